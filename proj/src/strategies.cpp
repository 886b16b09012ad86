#include "beamaggr/strategies.hpp"

#include <algorithm>
#include <fstream>
#include <future>
#include <set>
#include <sstream>

#include "beamaggr/errors.hpp"
#include "beamaggr/text.hpp"

namespace beamaggr::strategies {

namespace fs = std::filesystem;

std::string_view to_string(StrategyKind kind) noexcept
{
    switch (kind) {
    case StrategyKind::closebook: return "closebook";
    case StrategyKind::parametric: return "parametric";
    case StrategyKind::wiki: return "wiki";
    case StrategyKind::serp: return "serp";
    }
    return "closebook";
}

StrategyKind strategy_from_string(std::string_view name)
{
    for (auto kind : all_strategies) {
        if (to_string(kind) == name) return kind;
    }
    throw ConfigError("unknown strategy \"" + std::string(name) + "\"");
}

StrategyConfig default_config(StrategyKind kind)
{
    StrategyConfig c;
    c.kind = kind;
    c.prompt_id = std::string(to_string(kind));
    if (kind == StrategyKind::wiki) c.retrieval_doc_count = 5;
    if (kind == StrategyKind::serp) c.retrieval_doc_count = 3;
    return c;
}

nlohmann::json to_json(const StrategyOutcome& outcome)
{
    nlohmann::json completions = nlohmann::json::array();
    for (std::size_t i = 0; i < outcome.raw_completions.size(); ++i) {
        const auto reason = i < outcome.finish_reasons.size() ? outcome.finish_reasons[i] : llm::FinishReason::stop;
        completions.push_back({{"text", outcome.raw_completions[i]}, {"finish_reason", llm::to_string(reason)}});
    }
    return {{"strategy", to_string(outcome.kind)},
            {"context", outcome.context},
            {"completions", std::move(completions)},
            {"extracted", outcome.extracted},
            {"table", beam::to_json(outcome.table)},
            {"usage", llm::to_json(outcome.usage)}};
}

StrategyOutcome outcome_from_json(const nlohmann::json& j)
{
    StrategyOutcome o;
    o.kind = strategy_from_string(j.at("strategy").get<std::string>());
    o.context = j.value("context", "");
    for (const auto& c : j.at("completions")) {
        o.raw_completions.push_back(c.at("text").get<std::string>());
        o.finish_reasons.push_back(llm::finish_reason_from_string(c.at("finish_reason").get<std::string>()));
    }
    o.extracted = j.at("extracted").get<std::vector<std::string>>();
    o.table = beam::frequency_table_from_json(j.at("table"));
    o.usage = llm::usage_from_json(j.at("usage"));
    return o;
}

std::optional<std::string> extract_answer(std::string_view completion)
{
    static constexpr std::string_view marker = "the answer is";
    const std::string lowered = text::lowercase(completion);
    const auto pos = lowered.rfind(marker);
    if (pos == std::string::npos) return std::nullopt;
    const std::string_view rest = completion.substr(pos + marker.size());

    std::optional<std::string_view> span;
    for (auto open = rest.find("**"); open != std::string_view::npos;) {
        const auto close = rest.find("**", open + 2);
        if (close == std::string_view::npos) break;
        span = rest.substr(open + 2, close - open - 2);
        open = rest.find("**", close + 2);
    }

    std::string answer;
    if (span) {
        answer = std::string(text::trim(*span));
    } else {
        std::string_view sentence = rest.substr(0, rest.find('\n'));
        for (std::size_t i = 0; i < sentence.size(); ++i) {
            if (sentence[i] == '.' && (i + 1 == sentence.size() || text::is_space(sentence[i + 1]))) {
                sentence = sentence.substr(0, i);
                break;
            }
        }
        answer = text::replace_all(std::string(text::trim(sentence)), "**", "");
        answer = std::string(text::trim(answer));
    }
    const auto canonical = beam::canonicalize_answer(answer);
    if (canonical.empty() || canonical == "unknown") return std::nullopt;
    return answer;
}

PromptLibrary PromptLibrary::load(const fs::path& dir)
{
    if (!fs::is_directory(dir)) throw ConfigError("prompt directory not found: " + dir.string());
    std::map<std::string, std::string> templates;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
        std::ifstream in(entry.path(), std::ios::binary);
        std::stringstream buf;
        buf << in.rdbuf();
        std::string body = text::normalize_newlines(buf.str());
        while (!body.empty() && body.back() == '\n') body.pop_back();
        templates.emplace(entry.path().stem().string(), std::move(body));
    }
    return PromptLibrary(std::move(templates));
}

const std::string& PromptLibrary::get(const std::string& id) const
{
    auto it = templates_.find(id);
    if (it == templates_.end()) throw ConfigError("no prompt template \"" + id + "\"");
    return it->second;
}

std::string PromptLibrary::render(const std::string& id, std::string_view question, std::string_view context) const
{
    static constexpr std::string_view q_slot = "{question}";
    static constexpr std::string_view c_slot = "{context}";
    const std::string_view tpl = get(id);
    std::string out;
    out.reserve(tpl.size() + question.size() + context.size());
    for (std::size_t i = 0; i < tpl.size();) {
        if (tpl.compare(i, q_slot.size(), q_slot) == 0) {
            out += question;
            i += q_slot.size();
        } else if (tpl.compare(i, c_slot.size(), c_slot) == 0) {
            out += context;
            i += c_slot.size();
        } else {
            out.push_back(tpl[i++]);
        }
    }
    return out;
}

std::string format_parametric_context(std::string_view knowledge)
{
    return "#1 Document:\n" + std::string(text::trim(knowledge));
}

std::string format_wiki_context(const std::vector<retrieval::SearchResult>& results)
{
    std::string out;
    int i = 1;
    for (const auto& r : results) {
        if (!out.empty()) out += '\n';
        out += "#" + std::to_string(i++) + " Wikipedia Title: " + r.title + "\nText: " + r.snippet;
    }
    return out;
}

std::string format_serp_context(const std::vector<retrieval::SearchResult>& results)
{
    std::vector<const retrieval::SearchResult*> ordered;
    for (const auto& r : results) {
        if (r.source != retrieval::ResultSource::answer_box) ordered.push_back(&r);
    }
    for (const auto& r : results) {
        if (r.source == retrieval::ResultSource::answer_box) ordered.push_back(&r);
    }
    std::string out;
    int i = 1;
    for (const auto* r : ordered) {
        if (!out.empty()) out += '\n';
        const char* label = r->source == retrieval::ResultSource::answer_box ? " Answerbox Title: " : " Wikipedia Title: ";
        out += "#" + std::to_string(i++) + label + r->title + "\nSnippet: " + r->snippet;
    }
    return out;
}

Knowledge build_parametric_context(const std::string& question, llm::Backend& backend, const PromptLibrary& prompts,
                                   int max_tokens)
{
    llm::Prompt prompt;
    prompt.text = prompts.render("knowledge", question);
    prompt.temperature = 0.0;
    prompt.n = 1;
    prompt.max_tokens = max_tokens;
    const auto out = llm::complete_n(backend, prompt);
    Knowledge k;
    k.usage = out[0].usage;
    k.filtered = out[0].finish_reason == llm::FinishReason::content_filter;
    if (!k.filtered) k.text = std::string(text::trim(out[0].text));
    return k;
}

StrategyOutcome make_outcome(StrategyKind kind, const std::vector<llm::Completion>& completions)
{
    StrategyOutcome o;
    o.kind = kind;
    for (const auto& c : completions) {
        o.raw_completions.push_back(c.text);
        o.finish_reasons.push_back(c.finish_reason);
        o.usage += c.usage;
        if (c.finish_reason == llm::FinishReason::content_filter) continue;
        if (auto a = extract_answer(c.text)) o.extracted.push_back(std::move(*a));
    }
    o.table = beam::vote(o.extracted);
    return o;
}

StrategyOutcome LlmStrategyRunner::sample(const std::string& prompt_text, const StrategyConfig& config)
{
    llm::Prompt prompt;
    prompt.text = prompt_text;
    prompt.temperature = config.sample_temperature;
    prompt.n = config.samples;
    prompt.max_tokens = config.max_tokens;
    prompt.extra = config.sampling;
    return make_outcome(config.kind, llm::complete_n(backend_, prompt));
}

StrategyOutcome LlmStrategyRunner::run(const std::string& question, const StrategyConfig& config)
{
    const std::string prompt_id = config.prompt_id.empty() ? std::string(to_string(config.kind)) : config.prompt_id;
    try {
        switch (config.kind) {
        case StrategyKind::closebook:
            return sample(prompts_.render(prompt_id, question), config);

        case StrategyKind::parametric: {
            auto knowledge = build_parametric_context(question, backend_, prompts_, config.knowledge_max_tokens);
            if (knowledge.filtered) {
                StrategyOutcome o;
                o.kind = config.kind;
                o.usage = knowledge.usage;
                return o;
            }
            const auto context = format_parametric_context(knowledge.text);
            auto o = sample(prompts_.render(prompt_id, question, context), config);
            o.usage += knowledge.usage;
            o.context = context;
            return o;
        }

        case StrategyKind::wiki: {
            if (!retrievers_.index) throw ConfigError("wiki strategy needs a local index");
            const auto results = retrieval::search(*retrievers_.index, question,
                                                   static_cast<std::size_t>(config.retrieval_doc_count));
            const auto context = format_wiki_context(results);
            auto o = sample(prompts_.render(prompt_id, question, context), config);
            o.context = context;
            return o;
        }

        case StrategyKind::serp: {
            if (!retrievers_.serp) throw ConfigError("serp strategy needs a search provider");
            const auto results = retrieval::fetch_serp(*retrievers_.serp, question,
                                                       static_cast<std::size_t>(config.retrieval_doc_count));
            const auto context = format_serp_context(results);
            auto o = sample(prompts_.render(prompt_id, question, context), config);
            o.context = context;
            return o;
        }
        }
    } catch (const BackendError& e) {
        throw BackendError(std::string(to_string(config.kind)) + ": " + e.what());
    }
    throw ConfigError("unhandled strategy");
}

std::vector<StrategyKind> MultiSourceResult::voters(const std::string& canonical) const
{
    std::vector<StrategyKind> out;
    for (const auto& o : outcomes) {
        if (o.table.count(canonical) > 0) out.push_back(o.kind);
    }
    return out;
}

MultiSourceResult aggregate_outcomes(const std::string& question, std::vector<StrategyOutcome> outcomes,
                                     double vote_temperature, std::size_t k)
{
    MultiSourceResult r;
    r.outcomes = std::move(outcomes);
    std::vector<beam::FrequencyTable> tables;
    for (const auto& o : r.outcomes) {
        tables.push_back(o.table);
        r.usage += o.usage;
    }
    r.merged = beam::merge_votes(tables);
    if (r.merged.empty()) throw AllSourcesEmptyError(question);
    r.distribution = beam::softmax_distribution(r.merged, vote_temperature);
    r.candidates = beam::truncate_renormalize(r.distribution, k);
    return r;
}

std::vector<StrategyOutcome> run_strategies(const std::string& question, const std::vector<StrategyConfig>& configs,
                                            StrategyRunner& runner, bool parallel)
{
    if (configs.empty()) throw ConfigError("no strategies configured");
    std::vector<const StrategyConfig*> ordered;
    for (const auto& c : configs) ordered.push_back(&c);
    std::sort(ordered.begin(), ordered.end(), [](const auto* a, const auto* b) { return a->kind < b->kind; });
    for (std::size_t i = 1; i < ordered.size(); ++i) {
        if (ordered[i]->kind == ordered[i - 1]->kind) {
            throw ConfigError("strategy \"" + std::string(to_string(ordered[i]->kind)) + "\" configured twice");
        }
    }

    std::vector<StrategyOutcome> outcomes;
    if (parallel && ordered.size() > 1) {
        std::vector<std::future<StrategyOutcome>> futures;
        for (const auto* c : ordered) {
            futures.push_back(std::async(std::launch::async, [&runner, &question, c] { return runner.run(question, *c); }));
        }
        for (auto& f : futures) f.wait();
        for (auto& f : futures) outcomes.push_back(f.get());
    } else {
        for (const auto* c : ordered) outcomes.push_back(runner.run(question, *c));
    }
    return outcomes;
}

MultiSourceResult answer_question_multisource(const std::string& question, const std::vector<StrategyConfig>& configs,
                                              StrategyRunner& runner, double vote_temperature, std::size_t k,
                                              bool parallel)
{
    return aggregate_outcomes(question, run_strategies(question, configs, runner, parallel), vote_temperature, k);
}

} // namespace beamaggr::strategies
