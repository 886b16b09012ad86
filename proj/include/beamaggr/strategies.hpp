#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "beamaggr/beamcore.hpp"
#include "beamaggr/llmio.hpp"
#include "beamaggr/retrieval.hpp"

namespace beamaggr::strategies {

enum class StrategyKind { closebook, parametric, wiki, serp };

/// Canonical merge order.
inline constexpr std::array<StrategyKind, 4> all_strategies{StrategyKind::closebook, StrategyKind::parametric,
                                                            StrategyKind::wiki, StrategyKind::serp};

std::string_view to_string(StrategyKind kind) noexcept;
/// Throws ConfigError for unknown names.
StrategyKind strategy_from_string(std::string_view name);

struct StrategyConfig {
    StrategyKind kind = StrategyKind::closebook;
    int samples = 5;
    double sample_temperature = 0.7;
    std::string prompt_id;
    int retrieval_doc_count = 0;
    int max_tokens = 512;
    int knowledge_max_tokens = 256;
    /// Extra sampling parameters forwarded to the backend (top_p, ...).
    nlohmann::json sampling = nlohmann::json::object();
};

/// Defaults for one strategy: 5 samples at 0.7, five wiki documents, three
/// organic search results.
StrategyConfig default_config(StrategyKind kind);

struct StrategyOutcome {
    StrategyKind kind = StrategyKind::closebook;
    std::vector<std::string> raw_completions;
    std::vector<llm::FinishReason> finish_reasons;
    std::vector<std::string> extracted;
    beam::FrequencyTable table;
    llm::TokenUsage usage;
    std::string context;

    bool operator==(const StrategyOutcome&) const = default;
};

nlohmann::json to_json(const StrategyOutcome& outcome);
StrategyOutcome outcome_from_json(const nlohmann::json& j);

/// Answer stated after the last "the answer is" (case-insensitive): the last
/// **bold** span when there is one, otherwise the rest of that sentence.
/// "Unknown" and empty answers yield nullopt.
std::optional<std::string> extract_answer(std::string_view completion);

/// Prompt templates keyed by id ("decompose", "closebook", "knowledge",
/// "parametric", "wiki", "serp"), each holding {question} and optionally
/// {context}.
class PromptLibrary {
public:
    PromptLibrary() = default;
    explicit PromptLibrary(std::map<std::string, std::string> templates) : templates_(std::move(templates)) {}

    /// Loads every `<id>.txt` in `dir`.
    static PromptLibrary load(const std::filesystem::path& dir);

    bool contains(const std::string& id) const { return templates_.count(id) != 0; }
    /// Throws ConfigError for unknown ids.
    const std::string& get(const std::string& id) const;
    const std::map<std::string, std::string>& templates() const noexcept { return templates_; }

    /// Substitutes {question} and {context} in one pass.
    std::string render(const std::string& id, std::string_view question, std::string_view context = {}) const;

private:
    std::map<std::string, std::string> templates_;
};

/// "#1 Document:\n<knowledge>"
std::string format_parametric_context(std::string_view knowledge);
/// "#i Wikipedia Title: <title>\nText: <snippet>" per result.
std::string format_wiki_context(const std::vector<retrieval::SearchResult>& results);
/// Organic results first, then the answer box, with "Snippet:" lines.
std::string format_serp_context(const std::vector<retrieval::SearchResult>& results);

struct Knowledge {
    std::string text;
    bool filtered = false;
    llm::TokenUsage usage;
};

/// One zero-shot knowledge completion at temperature 0.
Knowledge build_parametric_context(const std::string& question, llm::Backend& backend, const PromptLibrary& prompts,
                                   int max_tokens = 256);

/// Runs one strategy on one question. Implementations must tolerate
/// concurrent calls.
class StrategyRunner {
public:
    virtual ~StrategyRunner() = default;
    virtual StrategyOutcome run(const std::string& question, const StrategyConfig& config) = 0;
};

/// Knowledge sources for the retrieval-backed strategies; either may be null
/// when the matching strategy is disabled.
struct Retrievers {
    const retrieval::InvertedIndex* index = nullptr;
    retrieval::SerpProvider* serp = nullptr;
};

class LlmStrategyRunner : public StrategyRunner {
public:
    LlmStrategyRunner(llm::Backend& backend, const PromptLibrary& prompts, Retrievers retrievers)
        : backend_(backend), prompts_(prompts), retrievers_(retrievers)
    {}

    /// Backend failures are rethrown as BackendError prefixed with the strategy name.
    StrategyOutcome run(const std::string& question, const StrategyConfig& config) override;

private:
    StrategyOutcome sample(const std::string& prompt_text, const StrategyConfig& config);

    llm::Backend& backend_;
    const PromptLibrary& prompts_;
    Retrievers retrievers_;
};

/// Adapter for callables; used by tests and by offline tooling.
class CallbackRunner : public StrategyRunner {
public:
    using Fn = std::function<StrategyOutcome(const std::string&, const StrategyConfig&)>;
    explicit CallbackRunner(Fn fn) : fn_(std::move(fn)) {}
    StrategyOutcome run(const std::string& question, const StrategyConfig& config) override
    {
        return fn_(question, config);
    }

private:
    Fn fn_;
};

/// Builds an outcome from raw completions: refusals are skipped, answers
/// extracted and voted.
StrategyOutcome make_outcome(StrategyKind kind, const std::vector<llm::Completion>& completions);

struct MultiSourceResult {
    std::vector<StrategyOutcome> outcomes;  // in canonical strategy order
    beam::FrequencyTable merged;
    std::vector<beam::Candidate> distribution;  // before truncation
    beam::CandidateSet candidates;
    llm::TokenUsage usage;

    /// Strategies whose samples voted for `canonical`.
    std::vector<StrategyKind> voters(const std::string& canonical) const;
};

/// Votes computed from already collected outcomes; throws AllSourcesEmptyError.
MultiSourceResult aggregate_outcomes(const std::string& question, std::vector<StrategyOutcome> outcomes,
                                     double vote_temperature, std::size_t k);

/// Runs every configured strategy, concurrently when `parallel`; outcomes
/// come back in canonical strategy order. Throws ConfigError on an empty or
/// duplicated strategy list.
std::vector<StrategyOutcome> run_strategies(const std::string& question, const std::vector<StrategyConfig>& configs,
                                            StrategyRunner& runner, bool parallel = false);

/// Runs every configured strategy (concurrently when `parallel`), merges the
/// votes in canonical order and keeps the top `k`.
MultiSourceResult answer_question_multisource(const std::string& question, const std::vector<StrategyConfig>& configs,
                                              StrategyRunner& runner, double vote_temperature, std::size_t k,
                                              bool parallel = false);

} // namespace beamaggr::strategies
