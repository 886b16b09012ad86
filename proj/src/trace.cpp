#include "beamaggr/trace.hpp"

#include <istream>
#include <ostream>
#include <sstream>

#include "beamaggr/errors.hpp"

namespace beamaggr::trace {

const NodeRecord& SolveTrace::record(qtree::NodeId node) const
{
    for (const auto& r : nodes) {
        if (r.node == node) return r;
    }
    throw IncompleteTraceError("trace has no record for node " + std::to_string(node));
}

void aggregate_branch(BranchRecord& branch, double vote_temperature, std::size_t k)
{
    std::vector<beam::FrequencyTable> tables;
    for (const auto& o : branch.outcomes) tables.push_back(o.table);
    branch.merged = beam::merge_votes(tables);
    if (branch.merged.empty()) {
        branch.distribution.clear();
        branch.candidates = beam::CandidateSet{{}, k};
        branch.error = "no strategy produced an answer";
        return;
    }
    branch.error.reset();
    branch.distribution = beam::softmax_distribution(branch.merged, vote_temperature);
    branch.candidates = beam::truncate_renormalize(branch.distribution, k);
}

void aggregate_node(NodeRecord& node, std::size_t k)
{
    double surviving = 0.0;
    for (const auto& b : node.branches) {
        if (!b.failed()) surviving += b.joint_prob;
    }
    if (surviving <= 0.0) throw AllSourcesEmptyError(node.question, node.node);

    std::vector<beam::WeightedDistribution> weighted;
    for (auto& b : node.branches) {
        b.weight = b.failed() ? 0.0 : b.joint_prob / surviving;
        if (!b.failed()) weighted.push_back({b.weight, b.candidates});
    }
    if (node.kind == qtree::NodeKind::atomic) {
        node.distribution = node.branches.front().distribution;
    } else {
        node.distribution = beam::marginalize(weighted);
    }
    node.candidates = beam::truncate_renormalize(node.distribution, k);
}

nlohmann::json to_json(const BranchRecord& branch)
{
    nlohmann::json outcomes = nlohmann::json::array();
    for (const auto& o : branch.outcomes) outcomes.push_back(strategies::to_json(o));
    nlohmann::json j{{"question", branch.question},
                     {"combination", beam::to_json(branch.combination)},
                     {"joint_prob", branch.joint_prob},
                     {"weight", branch.weight},
                     {"cache_hit", branch.cache_hit},
                     {"strategies", std::move(outcomes)},
                     {"merged", beam::to_json(branch.merged)},
                     {"distribution", beam::to_json(branch.distribution)},
                     {"candidates", beam::to_json(branch.candidates)}};
    if (branch.error) j["error"] = *branch.error;
    return j;
}

BranchRecord branch_from_json(const nlohmann::json& j)
{
    BranchRecord b;
    b.question = j.at("question").get<std::string>();
    b.combination = beam::candidates_from_json(j.at("combination"));
    b.joint_prob = j.at("joint_prob").get<double>();
    b.weight = j.at("weight").get<double>();
    b.cache_hit = j.at("cache_hit").get<bool>();
    for (const auto& o : j.at("strategies")) b.outcomes.push_back(strategies::outcome_from_json(o));
    b.merged = beam::frequency_table_from_json(j.at("merged"));
    b.distribution = beam::candidates_from_json(j.at("distribution"));
    b.candidates = beam::candidate_set_from_json(j.at("candidates"));
    if (j.contains("error")) b.error = j["error"].get<std::string>();
    return b;
}

nlohmann::json to_json(const NodeRecord& node)
{
    nlohmann::json branches = nlohmann::json::array();
    for (const auto& b : node.branches) branches.push_back(to_json(b));
    return {{"type", "node"},
            {"node", node.node},
            {"question", node.question},
            {"kind", qtree::to_string(node.kind)},
            {"children", node.children},
            {"branches", std::move(branches)},
            {"distribution", beam::to_json(node.distribution)},
            {"candidates", beam::to_json(node.candidates)}};
}

NodeRecord node_from_json(const nlohmann::json& j)
{
    NodeRecord n;
    n.node = j.at("node").get<int>();
    n.question = j.at("question").get<std::string>();
    n.kind = j.at("kind").get<std::string>() == "composite" ? qtree::NodeKind::composite : qtree::NodeKind::atomic;
    n.children = j.at("children").get<std::vector<int>>();
    for (const auto& b : j.at("branches")) n.branches.push_back(branch_from_json(b));
    n.distribution = beam::candidates_from_json(j.at("distribution"));
    n.candidates = beam::candidate_set_from_json(j.at("candidates"));
    return n;
}

void write_trace(std::ostream& out, const SolveTrace& trace)
{
    const nlohmann::json header{{"type", "header"},
                                {"schema", schema_version},
                                {"id", trace.id},
                                {"question", trace.question},
                                {"tree", qtree::to_json(trace.tree)},
                                {"beam_size", trace.beam_size},
                                {"vote_temperature", trace.vote_temperature},
                                {"max_combinations", trace.max_combinations}};
    out << header.dump() << '\n';
    for (const auto& n : trace.nodes) out << to_json(n).dump() << '\n';
    if (trace.complete) {
        const nlohmann::json result{{"type", "result"},
                                    {"answer", trace.answer},
                                    {"candidates", beam::to_json(trace.root_candidates)},
                                    {"usage", llm::to_json(trace.usage)}};
        out << result.dump() << '\n';
    }
}

std::string trace_to_string(const SolveTrace& trace)
{
    std::ostringstream out;
    write_trace(out, trace);
    return out.str();
}

std::vector<SolveTrace> read_traces(std::istream& in)
{
    std::vector<SolveTrace> traces;
    std::string line;
    std::size_t line_no = 0;
    bool open = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            const auto type = j.at("type").get<std::string>();
            if (type == "header") {
                if (j.at("schema").get<std::string>() != schema_version) {
                    throw FormatError(line_no, "unsupported trace schema " + j["schema"].dump());
                }
                SolveTrace t;
                t.id = j.at("id").get<std::string>();
                t.question = j.at("question").get<std::string>();
                t.tree = qtree::tree_from_json(j.at("tree"));
                t.beam_size = j.at("beam_size").get<std::size_t>();
                t.vote_temperature = j.at("vote_temperature").get<double>();
                t.max_combinations = j.at("max_combinations").get<std::size_t>();
                traces.push_back(std::move(t));
                open = true;
            } else if (!open) {
                throw FormatError(line_no, "\"" + type + "\" record outside a trace");
            } else if (type == "node") {
                traces.back().nodes.push_back(node_from_json(j));
            } else if (type == "result") {
                auto& t = traces.back();
                t.complete = true;
                t.answer = j.at("answer").get<std::string>();
                t.root_candidates = beam::candidate_set_from_json(j.at("candidates"));
                t.usage = llm::usage_from_json(j.at("usage"));
                open = false;
            } else {
                throw FormatError(line_no, "unknown record type \"" + type + "\"");
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(line_no, e.what());
        }
    }
    return traces;
}

SolveTrace reaggregate(const SolveTrace& trace)
{
    SolveTrace out = trace;
    for (auto& node : out.nodes) {
        for (auto& b : node.branches) {
            b.joint_prob = 1.0;
            for (std::size_t i = 0; i < b.combination.size(); ++i) {
                if (i >= node.children.size()) throw IncompleteTraceError("combination longer than child list");
                auto& member = b.combination[i];
                member.prob = out.record(node.children[i]).candidates.prob(member.answer);
                b.joint_prob *= member.prob;
            }
            aggregate_branch(b, out.vote_temperature, out.beam_size);
        }
        aggregate_node(node, out.beam_size);
    }
    if (out.complete) {
        out.root_candidates = out.record(out.tree.root).candidates;
        out.answer = beam::final_answer(out.root_candidates);
    }
    return out;
}

} // namespace beamaggr::trace
