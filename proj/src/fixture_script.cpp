#include "beamaggr/fixture_script.hpp"

#include <algorithm>
#include <fstream>

#include "beamaggr/errors.hpp"
#include "beamaggr/text.hpp"

namespace beamaggr::fixtures {

Script Script::load(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open script " + path.string());
    try {
        return parse(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw SyntaxError("script " + path.string() + ": " + e.what());
    }
}

Script Script::parse(const nlohmann::json& doc)
{
    if (!doc.is_object() || !doc.contains("questions") || !doc["questions"].is_object()) {
        throw SyntaxError("script needs a \"questions\" object");
    }
    Script s;
    s.questions = doc["questions"];
    return s;
}

const nlohmann::json* Script::find(const std::string& question) const
{
    auto it = questions.find(question);
    return it == questions.end() ? nullptr : &*it;
}

llm::Completion render_sample(const nlohmann::json& sample)
{
    llm::Completion c;
    if (sample.is_object() && sample.contains("text")) {
        c.text = sample["text"].get<std::string>();
        c.finish_reason = llm::finish_reason_from_string(sample.value("finish_reason", "stop"));
        return c;
    }
    std::string answer;
    std::string rationale;
    if (sample.is_string()) {
        answer = sample.get<std::string>();
    } else if (sample.is_object()) {
        answer = sample.value("answer", "Unknown");
        rationale = sample.value("rationale", "");
    } else if (sample.is_null()) {
        answer = "Unknown";
    } else {
        throw SyntaxError("unsupported script sample " + sample.dump());
    }
    if (!rationale.empty()) c.text = rationale + " ";
    if (beam::canonicalize_answer(answer) == "unknown") {
        c.text += "So the answer is Unknown.";
    } else {
        c.text += "So the answer is **" + answer + "**.";
    }
    return c;
}

std::string prompt_question(std::string_view prompt)
{
    static constexpr std::string_view marker = "Question: ";
    const auto pos = prompt.rfind(marker);
    if (pos == std::string_view::npos) return {};
    auto rest = prompt.substr(pos + marker.size());
    return std::string(text::trim(rest.substr(0, rest.find('\n'))));
}

ScriptedBackend::ScriptedBackend(const Script& script, const strategies::PromptLibrary& prompts) : script_(script)
{
    for (const auto& [id, tpl] : prompts.templates()) {
        const auto cut = std::min(tpl.find("{question}"), tpl.find("{context}"));
        prefixes_.emplace_back(id, tpl.substr(0, cut));
    }
    std::sort(prefixes_.begin(), prefixes_.end(),
              [](const auto& a, const auto& b) { return a.second.size() > b.second.size(); });
}

std::optional<std::string> ScriptedBackend::template_of(std::string_view prompt) const
{
    for (const auto& [id, prefix] : prefixes_) {
        if (prompt.substr(0, prefix.size()) == prefix) return id;
    }
    return std::nullopt;
}

std::vector<llm::Completion> ScriptedBackend::complete_n(const llm::Prompt& prompt)
{
    const auto id = template_of(prompt.text);
    if (!id) throw BackendError("prompt matches no known template");
    const auto question = prompt_question(prompt.text);
    const auto* entry = script_.find(question);
    if (!entry) throw BackendError("no script entry for question \"" + question + "\"");

    std::vector<llm::Completion> out;
    if (*id == "knowledge") {
        out.assign(prompt.n, llm::Completion{entry->value("knowledge", ""), llm::FinishReason::stop, {}});
    } else if (*id == "decompose") {
        if (!entry->contains("decomposition")) throw BackendError("no scripted decomposition for \"" + question + "\"");
        out.assign(prompt.n, llm::Completion{(*entry)["decomposition"].dump(), llm::FinishReason::stop, {}});
    } else {
        const nlohmann::json samples = entry->value(*id, nlohmann::json::array());
        for (int i = 0; i < prompt.n; ++i) {
            out.push_back(static_cast<std::size_t>(i) < samples.size() ? render_sample(samples[i])
                                                                       : render_sample("Unknown"));
        }
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].usage = {i == 0 ? llm::count_tokens(prompt.text) : 0, llm::count_tokens(out[i].text)};
    }
    return out;
}

nlohmann::json ScriptedSerpProvider::raw_results(const std::string& query)
{
    const auto* entry = script_.find(query);
    if (!entry) throw ProviderError("no script entry for query \"" + query + "\"");
    return entry->value("serp_response", nlohmann::json{{"organic", nlohmann::json::array()}});
}

} // namespace beamaggr::fixtures
