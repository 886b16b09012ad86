#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "beamaggr/beamcore.hpp"
#include "beamaggr/llmio.hpp"
#include "beamaggr/qtree.hpp"
#include "beamaggr/strategies.hpp"
#include "beamaggr/trace.hpp"

namespace beamaggr::eval {

/// Lowercase, drop ASCII punctuation and the articles a/an/the, split on whitespace.
std::vector<std::string> normalize_text(std::string_view s);

/// Multiset token overlap F1; 1 when both sides normalize to nothing, 0 when one does.
double token_f1(std::string_view prediction, std::string_view gold);

/// Best token_f1 over the aliases (0 for an empty list).
double max_alias_f1(std::string_view prediction, const std::vector<std::string>& aliases);

enum class DatasetFormat { generic, hotpotqa, wikimqa, musique, bamboogle };

std::string_view to_string(DatasetFormat format) noexcept;
/// Accepts "generic", "hotpotqa", "2wikimqa", "musique", "bamboogle"; throws ConfigError.
DatasetFormat dataset_format_from_string(std::string_view name);

struct QAInstance {
    std::string id;
    std::string question;
    std::vector<std::string> answers;
    std::string qtype;
    std::optional<int> hops;
    std::optional<qtree::DecompositionMap> decomposition;

    bool operator==(const QAInstance&) const = default;
};

/// Loads a benchmark file. JSON-array files (original HotpotQA/2WikiMQA
/// releases) and JSONL files are both accepted; lines carrying the
/// "question_id"/"question_text"/"answers_objects" fields of the IRCoT
/// processed release are recognised in every format. Throws FormatError with
/// the offending line (or array element) number.
std::vector<QAInstance> load_dataset(const std::filesystem::path& path, DatasetFormat format);
std::vector<QAInstance> load_dataset(std::istream& in, DatasetFormat format);

struct NodeStats {
    qtree::NodeId node = 0;
    std::size_t diversity = 0;   // distinct answers before truncation
    double consistency = 0.0;    // top-1 probability after truncation
    double uncertainty = 0.0;    // entropy (nats) after truncation

    bool operator==(const NodeStats&) const = default;
};

NodeStats node_stats(const std::vector<beam::Candidate>& before_truncation, const beam::CandidateSet& after);

/// One entry per node record, in trace order.
std::vector<NodeStats> trace_node_stats(const trace::SolveTrace& trace);

/// Credits every strategy that voted for the on-path answer at each node of
/// the winning path (root top-1 down through the branch contributing most),
/// normalized to fractions. Throws IncompleteTraceError.
std::map<strategies::StrategyKind, double> source_contribution(const trace::SolveTrace& trace);

struct InstanceRow {
    std::string id;
    std::string question;
    std::string prediction;
    std::vector<std::string> gold;
    double f1 = 0.0;
    std::string qtype;
    std::optional<int> hops;
    llm::TokenUsage usage;

    bool operator==(const InstanceRow&) const = default;
};

struct SkippedRow {
    std::string id;
    std::string reason;
    llm::TokenUsage usage;

    bool operator==(const SkippedRow&) const = default;
};

struct Breakdown {
    std::size_t count = 0;
    double mean_f1 = 0.0;

    bool operator==(const Breakdown&) const = default;
};

/// Label used for instances without a question type.
inline constexpr std::string_view untyped = "untyped";

struct EvalReport {
    std::string dataset;
    std::vector<InstanceRow> rows;     // sorted by id
    std::vector<SkippedRow> skipped;   // sorted by id
    double mean_f1 = 0.0;
    std::map<std::string, Breakdown> by_qtype;
    std::map<int, Breakdown> by_hops;

    /// Sorts rows and recomputes every aggregate from them.
    static EvalReport build(std::string dataset, std::vector<InstanceRow> rows, std::vector<SkippedRow> skipped);

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
    std::string to_text() const;
};

/// Scores {"id","prediction"} rows against a dataset; ids without a
/// prediction are listed as skipped.
EvalReport score_predictions(const std::string& dataset_name, const std::vector<QAInstance>& instances,
                             const std::map<std::string, std::string>& predictions);

/// Reads JSONL {"id","prediction"}; throws FormatError.
std::map<std::string, std::string> load_predictions(std::istream& in);

struct CostReport {
    std::string dataset;
    std::size_t instances = 0;
    std::size_t solved = 0;
    llm::TokenUsage total;
    std::map<std::string, llm::TokenUsage> by_strategy;
    double f1 = 0.0;

    /// Mean tokens over every attempted instance.
    double avg_prompt_tokens() const noexcept;
    double avg_completion_tokens() const noexcept;
    double avg_tokens() const noexcept;

    /// Totals from the report rows; `ledger` supplies the strategy split and
    /// must agree with the row totals (std::logic_error otherwise).
    static CostReport build(const EvalReport& report, const llm::UsageLedger& ledger);

    nlohmann::json to_json() const;
    static CostReport from_json(const nlohmann::json& j);
};

/// Plain-text table with columns dataset, #inst, prompt, completion, #token, f1.
std::string render_cost_table(const std::vector<CostReport>& reports);

/// Dataset-level analytics over complete traces: mean source contribution
/// and mean node statistics.
struct TraceAnalytics {
    std::size_t traces = 0;
    std::map<strategies::StrategyKind, double> contribution;
    double mean_diversity = 0.0;
    double mean_consistency = 0.0;
    double mean_uncertainty = 0.0;

    static TraceAnalytics build(const std::vector<trace::SolveTrace>& traces);
    nlohmann::json to_json() const;
    std::string to_text() const;
};

} // namespace beamaggr::eval
