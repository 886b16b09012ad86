#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "beamaggr/evalkit.hpp"
#include "beamaggr/llmio.hpp"
#include "beamaggr/qtree.hpp"
#include "beamaggr/strategies.hpp"
#include "beamaggr/trace.hpp"

namespace beamaggr::engine {

enum class Mode { beam, greedy };
enum class BackendMode { live, record, replay };

std::string_view to_string(Mode mode) noexcept;
std::string_view to_string(BackendMode mode) noexcept;
Mode mode_from_string(std::string_view name);
BackendMode backend_mode_from_string(std::string_view name);

struct EngineConfig {
    std::size_t beam_size = 2;
    double vote_temperature = 3.0;
    int samples = 5;
    double sample_temperature = 0.7;
    std::size_t max_combinations = 8;
    std::vector<strategies::StrategyKind> strategies{strategies::all_strategies.begin(),
                                                     strategies::all_strategies.end()};
    Mode mode = Mode::beam;
    BackendMode backend = BackendMode::replay;
    bool parallel_strategies = false;
    std::size_t workers = 1;
    int max_tokens = 512;
    int knowledge_max_tokens = 256;
    int retrieval_docs = 5;
    int serp_results = 3;
    int decomposition_retries = 3;
    nlohmann::json sampling = nlohmann::json::object();

    /// 1 in greedy mode, beam_size otherwise.
    std::size_t effective_beam() const noexcept { return mode == Mode::greedy ? 1 : beam_size; }

    std::vector<strategies::StrategyConfig> strategy_configs() const;

    /// Throws ConfigError on out-of-range values.
    void validate() const;

    /// Keys mirror the field names; unknown keys are a ConfigError.
    static EngineConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// Bottom-up beam aggregation over a decomposition tree.
///
/// Answers to identical substituted questions are shared within one solve;
/// later branches reuse the first result and are marked as cache hits. A
/// branch on which every strategy comes back empty is dropped and the
/// remaining combination weights are renormalized.
class Engine {
public:
    Engine(EngineConfig config, strategies::StrategyRunner& runner);

    const EngineConfig& config() const noexcept { return config_; }

    /// Throws StructureError for invalid trees and AllSourcesEmptyError
    /// (carrying the node id) when a node ends up without candidates.
    /// Usage is tagged with `id` (or the question when empty) in `ledger`.
    trace::SolveTrace solve(const std::string& question, const qtree::QuestionTree& tree, const std::string& id = {},
                            llm::UsageLedger* ledger = nullptr) const;

private:
    EngineConfig config_;
    std::vector<strategies::StrategyConfig> strategy_configs_;
    strategies::StrategyRunner& runner_;
};

trace::SolveTrace solve(const std::string& question, const qtree::QuestionTree& tree, const EngineConfig& config,
                        strategies::StrategyRunner& runner, llm::UsageLedger* ledger = nullptr);

/// solve with the beam forced to one candidate per node.
trace::SolveTrace solve_greedy(const std::string& question, const qtree::QuestionTree& tree, EngineConfig config,
                               strategies::StrategyRunner& runner, llm::UsageLedger* ledger = nullptr);

/// Produces a tree for an instance that carries no decomposition.
using TreeGenerator = std::function<qtree::QuestionTree(const eval::QAInstance&, llm::UsageLedger*)>;

/// Decomposition prompt completions parsed by regenerate_or_fallback: the
/// first attempt at temperature 0, later attempts drawn from one sampled
/// batch. Usage is tagged with strategy "decompose".
TreeGenerator make_llm_decomposer(llm::Backend& backend, const strategies::PromptLibrary& prompts, int max_retries);

/// The JSON object embedded in a decomposition completion (first '{' to last '}').
std::string extract_decomposition_json(std::string_view completion);

struct DatasetRunOptions {
    std::string dataset_name = "dataset";
    /// Decompositions keyed by question text, consulted after the dataset's own.
    std::map<std::string, qtree::DecompositionMap> decomposition_cache;
    TreeGenerator generator;
    /// Shared ledger; a private one is used when null.
    llm::UsageLedger* ledger = nullptr;
};

struct DatasetRun {
    eval::EvalReport report;
    eval::CostReport cost;
    std::vector<trace::SolveTrace> traces;  // solved instances, dataset order
    std::vector<std::pair<std::string, std::string>> predictions;  // (id, answer), dataset order
};

/// Solves every instance on `config.workers` threads. Failures are recorded
/// as skipped rows and never abort the run. Instance ids must be unique.
DatasetRun run_dataset(const std::vector<eval::QAInstance>& instances, const EngineConfig& config,
                       strategies::StrategyRunner& runner, const DatasetRunOptions& options);

/// Reads JSONL {"question", "decomposition"} lines.
std::map<std::string, qtree::DecompositionMap> load_decomposition_cache(std::istream& in);

} // namespace beamaggr::engine
