#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace beamaggr::llm {

struct TokenUsage {
    std::uint64_t prompt_tokens = 0;
    std::uint64_t completion_tokens = 0;

    std::uint64_t total() const noexcept { return prompt_tokens + completion_tokens; }
    TokenUsage& operator+=(const TokenUsage& other) noexcept
    {
        prompt_tokens += other.prompt_tokens;
        completion_tokens += other.completion_tokens;
        return *this;
    }
    friend TokenUsage operator+(TokenUsage a, const TokenUsage& b) noexcept { return a += b; }
    bool operator==(const TokenUsage&) const = default;
};

nlohmann::json to_json(const TokenUsage& usage);
TokenUsage usage_from_json(const nlohmann::json& j);

enum class FinishReason { stop, length, content_filter };

std::string_view to_string(FinishReason reason) noexcept;
FinishReason finish_reason_from_string(std::string_view s);

struct Prompt {
    std::string text;
    double temperature = 0.0;
    int n = 1;
    int max_tokens = 512;
    std::vector<std::string> stop;
    /// Extra sampling parameters passed through to the wire request (top_p, ...).
    nlohmann::json extra = nlohmann::json::object();
};

struct Completion {
    std::string text;
    FinishReason finish_reason = FinishReason::stop;
    TokenUsage usage;

    bool operator==(const Completion&) const = default;
};

/// Anything that can sample completions. Implementations must tolerate
/// concurrent calls.
class Backend {
public:
    virtual ~Backend() = default;
    virtual std::vector<Completion> complete_n(const Prompt& prompt) = 0;
};

/// Validates the prompt and the number of returned completions.
std::vector<Completion> complete_n(Backend& backend, const Prompt& prompt);

/// ceil(code points / 4): the approximation used when a backend reports no usage.
std::uint64_t count_tokens(std::string_view text) noexcept;

/// Temperature rounded to two decimals, e.g. "0.70".
std::string temperature_bucket(double temperature);

/// Digest of (prompt text with LF line endings, temperature bucket, sample index).
std::string fixture_key(std::string_view prompt_text, double temperature, int sample_index);

std::string prompt_digest(std::string_view prompt_text);

/// Directory of `<key>.json` completion fixtures.
class FixtureStore {
public:
    explicit FixtureStore(std::filesystem::path dir);

    std::optional<Completion> get(const std::string& key) const;
    /// Writes atomically; last writer wins.
    void put(const std::string& key, std::string_view prompt_text, const Completion& completion);

    const std::filesystem::path& dir() const noexcept { return dir_; }

private:
    std::filesystem::path dir_;
    std::mutex write_mutex_;
};

class ReplayBackend : public Backend {
public:
    explicit ReplayBackend(const FixtureStore& store) : store_(store) {}
    std::vector<Completion> complete_n(const Prompt& prompt) override;

private:
    const FixtureStore& store_;
};

/// Forwards to `inner` and persists every completion before returning it.
class RecordingBackend : public Backend {
public:
    RecordingBackend(Backend& inner, FixtureStore& store) : inner_(inner), store_(store) {}
    std::vector<Completion> complete_n(const Prompt& prompt) override;

private:
    Backend& inner_;
    FixtureStore& store_;
};

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds initial_backoff{1000};
    std::function<void(std::chrono::milliseconds)> sleep;  // defaults to std::this_thread::sleep_for
};

struct OpenAIConfig {
    std::string endpoint;  // full URL of the completions route
    std::string api_key;
    std::string model = "gpt-3.5-turbo-instruct";
    std::chrono::seconds timeout{120};
    RetryPolicy retry;

    /// Reads LLM_ENDPOINT, LLM_API_KEY and (optionally) LLM_MODEL.
    static OpenAIConfig from_env();
};

/// OpenAI-compatible legacy completions client (`POST .../completions`).
///
/// Retries transport failures and HTTP 429/5xx with exponential backoff.
/// A content-filter refusal (a `content_filter` finish reason, or an HTTP 400
/// whose error code is `content_filter`) is returned as filtered completions
/// and never retried.
class OpenAICompletionsBackend : public Backend {
public:
    explicit OpenAICompletionsBackend(OpenAIConfig config);
    std::vector<Completion> complete_n(const Prompt& prompt) override;

    nlohmann::json request_body(const Prompt& prompt) const;
    /// Splits the response into per-sample completions. Reported usage wins:
    /// sample 0 carries the prompt tokens and the per-sample completion
    /// tokens always add up to the reported total.
    static std::vector<Completion> parse_response(const nlohmann::json& body, const Prompt& prompt);

private:
    OpenAIConfig config_;
    std::string origin_;
    std::string path_;
};

/// Splits "https://host:port/path" into ("https://host:port", "/path").
std::pair<std::string, std::string> split_url(const std::string& url);

struct UsageTag {
    std::string question;
    std::string strategy;
    int node = -1;

    bool operator==(const UsageTag&) const = default;
};

/// Thread-safe token accounting keyed by (question, strategy, node).
class UsageLedger {
public:
    void accumulate(const TokenUsage& usage, const UsageTag& tag);

    TokenUsage total() const;
    TokenUsage for_question(const std::string& question) const;
    TokenUsage for_strategy(const std::string& strategy) const;
    TokenUsage for_node(const std::string& question, int node) const;
    std::vector<std::pair<UsageTag, TokenUsage>> entries() const;

    /// Totals by strategy and by question; throws std::logic_error if the
    /// grand total disagrees with the sum over tags.
    nlohmann::json report() const;

private:
    template <typename Pred>
    TokenUsage sum_if(Pred pred) const;

    mutable std::mutex mutex_;
    std::vector<std::pair<UsageTag, TokenUsage>> entries_;
    TokenUsage total_;
};

} // namespace beamaggr::llm
