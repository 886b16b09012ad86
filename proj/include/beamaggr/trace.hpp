#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "beamaggr/beamcore.hpp"
#include "beamaggr/llmio.hpp"
#include "beamaggr/qtree.hpp"
#include "beamaggr/strategies.hpp"

// Reasoning traces: one record per node visit, serialized as JSON lines.
namespace beamaggr::trace {

inline constexpr std::string_view schema_version = "baggtrace/1";

/// One substituted question posed at a node. Atomic nodes have a single
/// branch with an empty combination and weight 1.
struct BranchRecord {
    std::vector<beam::Candidate> combination;  // one member per child
    double joint_prob = 1.0;
    double weight = 1.0;  // joint_prob renormalized over the surviving branches
    std::string question;
    bool cache_hit = false;
    std::vector<strategies::StrategyOutcome> outcomes;
    beam::FrequencyTable merged;
    std::vector<beam::Candidate> distribution;
    beam::CandidateSet candidates;
    std::optional<std::string> error;  // set when every strategy came back empty

    bool failed() const noexcept { return error.has_value(); }
    bool operator==(const BranchRecord&) const = default;
};

struct NodeRecord {
    qtree::NodeId node = 0;
    std::string question;
    qtree::NodeKind kind = qtree::NodeKind::atomic;
    std::vector<qtree::NodeId> children;
    std::vector<BranchRecord> branches;
    std::vector<beam::Candidate> distribution;  // before truncation
    beam::CandidateSet candidates;

    bool operator==(const NodeRecord&) const = default;
};

struct SolveTrace {
    std::string id;
    std::string question;
    qtree::QuestionTree tree;
    std::size_t beam_size = 2;
    double vote_temperature = 3.0;
    std::size_t max_combinations = 8;
    std::vector<NodeRecord> nodes;  // post-order
    bool complete = false;
    std::string answer;
    beam::CandidateSet root_candidates;
    llm::TokenUsage usage;

    /// Record for `node`; throws IncompleteTraceError when absent.
    const NodeRecord& record(qtree::NodeId node) const;

    bool operator==(const SolveTrace&) const = default;
};

/// Fills a branch's merged table, distribution and candidates from its
/// outcomes, or marks it failed when no strategy produced an answer.
void aggregate_branch(BranchRecord& branch, double vote_temperature, std::size_t k);

/// Sets branch weights (joint probabilities renormalized over the surviving
/// branches) and the node's distribution and candidates. Throws
/// AllSourcesEmptyError carrying the node id when every branch failed.
void aggregate_node(NodeRecord& node, std::size_t k);

nlohmann::json to_json(const BranchRecord& branch);
BranchRecord branch_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NodeRecord& node);
NodeRecord node_from_json(const nlohmann::json& j);

/// Header line, one line per node, then a result line when complete.
void write_trace(std::ostream& out, const SolveTrace& trace);
std::string trace_to_string(const SolveTrace& trace);

/// Reads consecutive traces; a trace without a result line is returned with
/// complete = false. Throws FormatError on schema mismatch or bad JSON.
std::vector<SolveTrace> read_traces(std::istream& in);

/// Recomputes every vote, distribution, combination weight and candidate
/// set from the recorded per-strategy tables.
SolveTrace reaggregate(const SolveTrace& trace);

} // namespace beamaggr::trace
