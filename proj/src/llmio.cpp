#include "beamaggr/llmio.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>
#include <thread>

#include "beamaggr/digest.hpp"
#include "beamaggr/errors.hpp"
#include "beamaggr/text.hpp"

namespace beamaggr::llm {

namespace fs = std::filesystem;

nlohmann::json to_json(const TokenUsage& usage)
{
    return {{"prompt_tokens", usage.prompt_tokens}, {"completion_tokens", usage.completion_tokens}};
}

TokenUsage usage_from_json(const nlohmann::json& j)
{
    return {j.value("prompt_tokens", std::uint64_t{0}), j.value("completion_tokens", std::uint64_t{0})};
}

std::string_view to_string(FinishReason reason) noexcept
{
    switch (reason) {
    case FinishReason::stop: return "stop";
    case FinishReason::length: return "length";
    case FinishReason::content_filter: return "content_filter";
    }
    return "stop";
}

FinishReason finish_reason_from_string(std::string_view s)
{
    if (s == "length") return FinishReason::length;
    if (s == "content_filter") return FinishReason::content_filter;
    return FinishReason::stop;
}

std::vector<Completion> complete_n(Backend& backend, const Prompt& prompt)
{
    if (prompt.n < 1) throw std::invalid_argument("sample count must be at least 1");
    auto out = backend.complete_n(prompt);
    if (out.size() != static_cast<std::size_t>(prompt.n)) {
        throw BackendError("backend returned " + std::to_string(out.size()) + " completions, expected " +
                           std::to_string(prompt.n));
    }
    return out;
}

std::uint64_t count_tokens(std::string_view text) noexcept
{
    return (text::utf8_length(text) + 3) / 4;
}

std::string temperature_bucket(double temperature)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", std::round(temperature * 100.0) / 100.0);
    return buf;
}

std::string prompt_digest(std::string_view prompt_text)
{
    return sha256_hex(text::normalize_newlines(prompt_text));
}

std::string fixture_key(std::string_view prompt_text, double temperature, int sample_index)
{
    std::string material = text::normalize_newlines(prompt_text);
    material += "\n\x1f" "temperature=" + temperature_bucket(temperature);
    material += "\n\x1f" "sample=" + std::to_string(sample_index);
    return sha256_hex(material);
}

FixtureStore::FixtureStore(fs::path dir) : dir_(std::move(dir)) {}

std::optional<Completion> FixtureStore::get(const std::string& key) const
{
    std::ifstream in(dir_ / (key + ".json"), std::ios::binary);
    if (!in) return std::nullopt;
    try {
        const auto j = nlohmann::json::parse(in);
        return Completion{j.at("text").get<std::string>(),
                          finish_reason_from_string(j.at("finish_reason").get<std::string>()),
                          usage_from_json(j.at("usage"))};
    } catch (const nlohmann::json::exception& e) {
        throw BackendError("corrupt fixture " + key + ": " + e.what());
    }
}

void FixtureStore::put(const std::string& key, std::string_view prompt_text, const Completion& completion)
{
    const nlohmann::json j{{"key", key},
                           {"prompt_digest", prompt_digest(prompt_text)},
                           {"text", completion.text},
                           {"finish_reason", to_string(completion.finish_reason)},
                           {"usage", to_json(completion.usage)}};
    std::lock_guard lock(write_mutex_);
    fs::create_directories(dir_);
    const auto final_path = dir_ / (key + ".json");
    const auto tmp_path = dir_ / (key + ".json.tmp");
    {
        std::ofstream out(tmp_path, std::ios::binary | std::ios::trunc);
        out << j.dump(2) << '\n';
        if (!out) throw BackendError("cannot write fixture " + tmp_path.string());
    }
    fs::rename(tmp_path, final_path);
}

std::vector<Completion> ReplayBackend::complete_n(const Prompt& prompt)
{
    std::vector<Completion> out;
    out.reserve(prompt.n);
    for (int i = 0; i < prompt.n; ++i) {
        const auto key = fixture_key(prompt.text, prompt.temperature, i);
        auto c = store_.get(key);
        if (!c) {
            throw FixtureMissError(key, "no fixture for sample " + std::to_string(i) + " of prompt " +
                                            prompt_digest(prompt.text).substr(0, 12));
        }
        out.push_back(std::move(*c));
    }
    return out;
}

std::vector<Completion> RecordingBackend::complete_n(const Prompt& prompt)
{
    auto out = llm::complete_n(inner_, prompt);
    for (int i = 0; i < prompt.n; ++i) {
        store_.put(fixture_key(prompt.text, prompt.temperature, i), prompt.text, out[i]);
    }
    return out;
}

OpenAIConfig OpenAIConfig::from_env()
{
    OpenAIConfig config;
    if (const char* v = std::getenv("LLM_ENDPOINT")) config.endpoint = v;
    if (const char* v = std::getenv("LLM_API_KEY")) config.api_key = v;
    if (const char* v = std::getenv("LLM_MODEL")) config.model = v;
    return config;
}

std::pair<std::string, std::string> split_url(const std::string& url)
{
    static const std::regex pattern(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, pattern)) throw ConfigError("invalid endpoint URL: " + url);
    return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

OpenAICompletionsBackend::OpenAICompletionsBackend(OpenAIConfig config) : config_(std::move(config))
{
    if (config_.endpoint.empty()) throw ConfigError("LLM endpoint is not configured (LLM_ENDPOINT)");
    std::tie(origin_, path_) = split_url(config_.endpoint);
    if (!config_.retry.sleep) {
        config_.retry.sleep = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    }
}

nlohmann::json OpenAICompletionsBackend::request_body(const Prompt& prompt) const
{
    nlohmann::json body{{"model", config_.model},
                        {"prompt", prompt.text},
                        {"temperature", prompt.temperature},
                        {"n", prompt.n},
                        {"max_tokens", prompt.max_tokens}};
    if (!prompt.stop.empty()) body["stop"] = prompt.stop;
    for (const auto& [k, v] : prompt.extra.items()) body[k] = v;
    return body;
}

std::vector<Completion> OpenAICompletionsBackend::parse_response(const nlohmann::json& body, const Prompt& prompt)
{
    if (!body.contains("choices") || !body["choices"].is_array()) {
        throw BackendError("response has no choices array");
    }
    std::map<int, Completion> by_index;
    int fallback_index = 0;
    for (const auto& choice : body["choices"]) {
        Completion c;
        c.text = choice.value("text", "");
        const auto& reason = choice.contains("finish_reason") && choice["finish_reason"].is_string()
                                 ? choice["finish_reason"].get<std::string>()
                                 : std::string("stop");
        c.finish_reason = finish_reason_from_string(reason);
        const int index = choice.contains("index") ? choice["index"].get<int>() : fallback_index;
        ++fallback_index;
        by_index[index] = std::move(c);
    }
    std::vector<Completion> out;
    for (auto& [_, c] : by_index) out.push_back(std::move(c));
    if (out.size() != static_cast<std::size_t>(prompt.n)) {
        throw BackendError("expected " + std::to_string(prompt.n) + " choices, got " +
                           std::to_string(out.size()));
    }

    if (body.contains("usage") && body["usage"].is_object()) {
        const auto reported = usage_from_json(body["usage"]);
        std::uint64_t remaining = reported.completion_tokens;
        for (std::size_t i = out.size(); i-- > 1;) {
            const auto c = std::min(count_tokens(out[i].text), remaining);
            out[i].usage = {0, c};
            remaining -= c;
        }
        out[0].usage = {reported.prompt_tokens, remaining};
    } else {
        for (auto& c : out) c.usage = {0, count_tokens(c.text)};
        out[0].usage.prompt_tokens = count_tokens(prompt.text);
    }
    return out;
}

std::vector<Completion> OpenAICompletionsBackend::complete_n(const Prompt& prompt)
{
    httplib::Client client(origin_);
    client.set_connection_timeout(config_.timeout);
    client.set_read_timeout(config_.timeout);
    httplib::Headers headers;
    if (!config_.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + config_.api_key);
        headers.emplace("api-key", config_.api_key);
    }
    const std::string payload = request_body(prompt).dump();

    auto backoff = config_.retry.initial_backoff;
    std::string last_error;
    for (int attempt = 0; attempt < config_.retry.attempts; ++attempt) {
        if (attempt > 0) {
            config_.retry.sleep(backoff);
            backoff *= 2;
        }
        auto res = client.Post(path_, headers, payload, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        nlohmann::json body;
        try {
            body = nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::parse_error&) {
            throw BackendError("HTTP " + std::to_string(res->status) + " with non-JSON body");
        }
        if (res->status == 400 && body.contains("error") && body["error"].is_object() &&
            body["error"].value("code", "") == "content_filter") {
            std::vector<Completion> filtered(prompt.n, Completion{"", FinishReason::content_filter, {}});
            filtered[0].usage.prompt_tokens = count_tokens(prompt.text);
            return filtered;
        }
        if (res->status != 200) {
            std::string message = body.contains("error") ? body["error"].dump() : res->body;
            throw BackendError("HTTP " + std::to_string(res->status) + ": " + message);
        }
        return parse_response(body, prompt);
    }
    throw BackendError("completion request failed after " + std::to_string(config_.retry.attempts) +
                       " attempts: " + last_error);
}

void UsageLedger::accumulate(const TokenUsage& usage, const UsageTag& tag)
{
    std::lock_guard lock(mutex_);
    entries_.emplace_back(tag, usage);
    total_ += usage;
}

template <typename Pred>
TokenUsage UsageLedger::sum_if(Pred pred) const
{
    std::lock_guard lock(mutex_);
    TokenUsage sum;
    for (const auto& [tag, usage] : entries_) {
        if (pred(tag)) sum += usage;
    }
    return sum;
}

TokenUsage UsageLedger::total() const
{
    std::lock_guard lock(mutex_);
    return total_;
}

TokenUsage UsageLedger::for_question(const std::string& question) const
{
    return sum_if([&](const UsageTag& t) { return t.question == question; });
}

TokenUsage UsageLedger::for_strategy(const std::string& strategy) const
{
    return sum_if([&](const UsageTag& t) { return t.strategy == strategy; });
}

TokenUsage UsageLedger::for_node(const std::string& question, int node) const
{
    return sum_if([&](const UsageTag& t) { return t.question == question && t.node == node; });
}

std::vector<std::pair<UsageTag, TokenUsage>> UsageLedger::entries() const
{
    std::lock_guard lock(mutex_);
    return entries_;
}

nlohmann::json UsageLedger::report() const
{
    std::lock_guard lock(mutex_);
    std::map<std::string, TokenUsage> by_strategy;
    std::map<std::string, TokenUsage> by_question;
    TokenUsage sum;
    for (const auto& [tag, usage] : entries_) {
        by_strategy[tag.strategy] += usage;
        by_question[tag.question] += usage;
        sum += usage;
    }
    if (!(sum == total_)) throw std::logic_error("usage ledger grand total disagrees with its entries");
    nlohmann::json out{{"total", to_json(total_)}, {"by_strategy", nlohmann::json::object()},
                       {"by_question", nlohmann::json::object()}};
    for (const auto& [k, v] : by_strategy) out["by_strategy"][k] = to_json(v);
    for (const auto& [k, v] : by_question) out["by_question"][k] = to_json(v);
    return out;
}

} // namespace beamaggr::llm
