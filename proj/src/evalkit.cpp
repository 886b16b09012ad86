#include "beamaggr/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "beamaggr/errors.hpp"
#include "beamaggr/text.hpp"

namespace beamaggr::eval {

namespace {

bool is_ascii_punct(unsigned char c) noexcept
{
    return (c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) || (c >= 123 && c <= 126);
}

double mean_of(const std::vector<double>& xs)
{
    if (xs.empty()) return 0.0;
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

std::string fixed(double v, int digits)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string pad(std::string s, std::size_t width, bool right = false)
{
    const auto len = text::utf8_length(s);
    if (len >= width) return s;
    const std::string fill(width - len, ' ');
    return right ? fill + s : s + fill;
}

std::string id_string(const nlohmann::json& v)
{
    return v.is_string() ? v.get<std::string>() : v.dump();
}

std::vector<std::string> string_list(const nlohmann::json& v, std::size_t line)
{
    if (v.is_string()) return {v.get<std::string>()};
    if (!v.is_array()) throw FormatError(line, "answers must be a string or a list of strings");
    std::vector<std::string> out;
    for (const auto& a : v) {
        if (!a.is_string()) throw FormatError(line, "answers must be strings");
        out.push_back(a.get<std::string>());
    }
    return out;
}

// "2hop__123_456" → ("2hop", 2)
void musique_type(const std::string& id, QAInstance& inst)
{
    const auto sep = id.find("__");
    if (sep == std::string::npos) return;
    inst.qtype = id.substr(0, sep);
    if (!inst.qtype.empty() && inst.qtype[0] >= '1' && inst.qtype[0] <= '9') inst.hops = inst.qtype[0] - '0';
}

QAInstance from_ircot(const nlohmann::json& j, DatasetFormat format, std::size_t line)
{
    QAInstance inst;
    inst.id = id_string(j.at("question_id"));
    inst.question = j.at("question_text").get<std::string>();
    if (j.contains("answers_objects")) {
        for (const auto& obj : j["answers_objects"]) {
            if (obj.contains("spans")) {
                for (const auto& s : obj["spans"]) inst.answers.push_back(s.get<std::string>());
            }
        }
    }
    if (format == DatasetFormat::musique) musique_type(inst.id, inst);
    if (j.contains("type") && j["type"].is_string()) inst.qtype = j["type"].get<std::string>();
    if (inst.answers.empty()) throw FormatError(line, "instance \"" + inst.id + "\" has no gold answer");
    return inst;
}

QAInstance to_instance(const nlohmann::json& j, DatasetFormat format, std::size_t line)
{
    if (!j.is_object()) throw FormatError(line, "expected a JSON object");
    if (j.contains("question_text")) return from_ircot(j, format, line);

    QAInstance inst;
    auto require = [&](const char* key) -> const nlohmann::json& {
        if (!j.contains(key)) throw FormatError(line, std::string("missing field \"") + key + "\"");
        return j[key];
    };
    const char* question_key = j.contains("question") ? "question" : "Question";
    inst.question = require(question_key).get<std::string>();

    switch (format) {
    case DatasetFormat::generic:
        inst.id = id_string(require("id"));
        inst.answers = string_list(require("answers"), line);
        inst.qtype = j.value("qtype", "");
        if (j.contains("hops") && j["hops"].is_number_integer()) inst.hops = j["hops"].get<int>();
        break;
    case DatasetFormat::hotpotqa:
    case DatasetFormat::wikimqa:
        inst.id = id_string(j.contains("_id") ? j["_id"] : require("id"));
        inst.answers = string_list(require("answer"), line);
        if (j.contains("answer_aliases")) {
            for (auto& a : string_list(j["answer_aliases"], line)) inst.answers.push_back(std::move(a));
        }
        inst.qtype = j.value("type", "");
        break;
    case DatasetFormat::musique:
        inst.id = id_string(require("id"));
        inst.answers = string_list(require("answer"), line);
        if (j.contains("answer_aliases")) {
            for (auto& a : string_list(j["answer_aliases"], line)) inst.answers.push_back(std::move(a));
        }
        musique_type(inst.id, inst);
        break;
    case DatasetFormat::bamboogle:
        inst.id = j.contains("id") ? id_string(j["id"]) : "bamboogle-" + std::to_string(line);
        inst.answers = string_list(j.contains("answer") ? j["answer"] : require("Answer"), line);
        break;
    }
    if (inst.answers.empty()) throw FormatError(line, "instance \"" + inst.id + "\" has no gold answer");
    if (j.contains("decomposition") && !j["decomposition"].is_null()) {
        if (!j["decomposition"].is_object()) throw FormatError(line, "decomposition must be an object");
        inst.decomposition = qtree::DecompositionMap::parse(j["decomposition"].dump());
    }
    return inst;
}

} // namespace

std::vector<std::string> normalize_text(std::string_view s)
{
    std::string cleaned;
    for (char c : text::lowercase(s)) {
        if (!is_ascii_punct(static_cast<unsigned char>(c))) cleaned.push_back(c);
    }
    std::vector<std::string> out;
    for (auto& tok : text::split_whitespace(cleaned)) {
        if (tok != "a" && tok != "an" && tok != "the") out.push_back(std::move(tok));
    }
    return out;
}

double token_f1(std::string_view prediction, std::string_view gold)
{
    const auto p = normalize_text(prediction);
    const auto g = normalize_text(gold);
    if (p.empty() && g.empty()) return 1.0;
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, int> counts;
    for (const auto& t : g) ++counts[t];
    int same = 0;
    for (const auto& t : p) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++same;
        }
    }
    if (same == 0) return 0.0;
    const double precision = static_cast<double>(same) / static_cast<double>(p.size());
    const double recall = static_cast<double>(same) / static_cast<double>(g.size());
    return 2.0 * precision * recall / (precision + recall);
}

double max_alias_f1(std::string_view prediction, const std::vector<std::string>& aliases)
{
    double best = 0.0;
    for (const auto& a : aliases) best = std::max(best, token_f1(prediction, a));
    return best;
}

std::string_view to_string(DatasetFormat format) noexcept
{
    switch (format) {
    case DatasetFormat::generic: return "generic";
    case DatasetFormat::hotpotqa: return "hotpotqa";
    case DatasetFormat::wikimqa: return "2wikimqa";
    case DatasetFormat::musique: return "musique";
    case DatasetFormat::bamboogle: return "bamboogle";
    }
    return "generic";
}

DatasetFormat dataset_format_from_string(std::string_view name)
{
    for (auto f : {DatasetFormat::generic, DatasetFormat::hotpotqa, DatasetFormat::wikimqa, DatasetFormat::musique,
                   DatasetFormat::bamboogle}) {
        if (to_string(f) == name) return f;
    }
    throw ConfigError("unknown dataset format \"" + std::string(name) + "\"");
}

std::vector<QAInstance> load_dataset(std::istream& in, DatasetFormat format)
{
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string content = buf.str();
    const auto first = content.find_first_not_of(" \t\r\n");

    std::vector<QAInstance> out;
    if (first != std::string::npos && content[first] == '[') {
        nlohmann::json arr;
        try {
            arr = nlohmann::json::parse(content);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(0, e.what());
        }
        std::size_t index = 0;
        for (const auto& j : arr) {
            ++index;
            try {
                out.push_back(to_instance(j, format, index));
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(index, e.what());
            }
        }
        return out;
    }

    std::istringstream lines(content);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(lines, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        try {
            out.push_back(to_instance(nlohmann::json::parse(line), format, line_no));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(line_no, e.what());
        }
    }
    return out;
}

std::vector<QAInstance> load_dataset(const std::filesystem::path& path, DatasetFormat format)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open dataset " + path.string());
    return load_dataset(in, format);
}

NodeStats node_stats(const std::vector<beam::Candidate>& before_truncation, const beam::CandidateSet& after)
{
    NodeStats s;
    s.diversity = before_truncation.size();
    if (!after.empty()) s.consistency = after.top().prob;
    double h = 0.0;
    for (const auto& c : after.items) {
        if (c.prob > 0.0) h -= c.prob * std::log(c.prob);
    }
    s.uncertainty = std::max(h, 0.0);
    return s;
}

std::vector<NodeStats> trace_node_stats(const trace::SolveTrace& trace)
{
    std::vector<NodeStats> out;
    for (const auto& r : trace.nodes) {
        auto s = node_stats(r.distribution, r.candidates);
        s.node = r.node;
        out.push_back(s);
    }
    return out;
}

std::map<strategies::StrategyKind, double> source_contribution(const trace::SolveTrace& trace)
{
    if (!trace.complete || trace.root_candidates.empty()) {
        throw IncompleteTraceError("trace \"" + trace.id + "\" has no completed root");
    }
    std::map<strategies::StrategyKind, double> credit;

    struct Step {
        qtree::NodeId node;
        std::string answer;
    };
    std::vector<Step> stack{{trace.tree.root, trace.root_candidates.top().answer}};
    while (!stack.empty()) {
        const auto step = stack.back();
        stack.pop_back();
        const auto& rec = trace.record(step.node);

        const trace::BranchRecord* best = nullptr;
        double best_mass = -1.0;
        for (const auto& b : rec.branches) {
            if (b.failed()) continue;
            const double mass = b.weight * b.candidates.prob(step.answer);
            if (mass > best_mass) {
                best = &b;
                best_mass = mass;
            }
        }
        if (!best) throw IncompleteTraceError("node " + std::to_string(step.node) + " has no surviving branch");
        for (const auto& o : best->outcomes) {
            if (o.table.count(step.answer) > 0) credit[o.kind] += 1.0;
        }
        for (std::size_t i = best->combination.size(); i-- > 0;) {
            stack.push_back({rec.children.at(i), best->combination[i].answer});
        }
    }

    double total = 0.0;
    for (const auto& [_, c] : credit) total += c;
    if (total <= 0.0) throw IncompleteTraceError("no strategy voted along the winning path");
    for (auto& [_, c] : credit) c /= total;
    return credit;
}

EvalReport EvalReport::build(std::string dataset, std::vector<InstanceRow> rows, std::vector<SkippedRow> skipped)
{
    EvalReport r;
    r.dataset = std::move(dataset);
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::sort(skipped.begin(), skipped.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

    std::vector<double> all;
    std::map<std::string, std::vector<double>> by_type;
    std::map<int, std::vector<double>> by_hops;
    for (const auto& row : rows) {
        all.push_back(row.f1);
        by_type[row.qtype.empty() ? std::string(untyped) : row.qtype].push_back(row.f1);
        if (row.hops) by_hops[*row.hops].push_back(row.f1);
    }
    r.mean_f1 = mean_of(all);
    for (const auto& [k, v] : by_type) r.by_qtype[k] = {v.size(), mean_of(v)};
    for (const auto& [k, v] : by_hops) r.by_hops[k] = {v.size(), mean_of(v)};
    r.rows = std::move(rows);
    r.skipped = std::move(skipped);
    return r;
}

nlohmann::json EvalReport::to_json() const
{
    nlohmann::json j{{"dataset", dataset}, {"mean_f1", mean_f1}, {"evaluated", rows.size()},
                     {"by_qtype", nlohmann::json::object()}, {"by_hops", nlohmann::json::object()},
                     {"instances", nlohmann::json::array()}, {"skipped", nlohmann::json::array()}};
    for (const auto& [k, b] : by_qtype) j["by_qtype"][k] = {{"count", b.count}, {"mean_f1", b.mean_f1}};
    for (const auto& [k, b] : by_hops) j["by_hops"][std::to_string(k)] = {{"count", b.count}, {"mean_f1", b.mean_f1}};
    for (const auto& row : rows) {
        nlohmann::json r{{"id", row.id},       {"question", row.question}, {"prediction", row.prediction},
                         {"gold", row.gold},   {"f1", row.f1},             {"qtype", row.qtype},
                         {"usage", llm::to_json(row.usage)}};
        r["hops"] = row.hops ? nlohmann::json(*row.hops) : nlohmann::json(nullptr);
        j["instances"].push_back(std::move(r));
    }
    for (const auto& s : skipped) {
        j["skipped"].push_back({{"id", s.id}, {"reason", s.reason}, {"usage", llm::to_json(s.usage)}});
    }
    return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j)
{
    std::vector<InstanceRow> rows;
    for (const auto& r : j.at("instances")) {
        InstanceRow row;
        row.id = r.at("id").get<std::string>();
        row.question = r.value("question", "");
        row.prediction = r.at("prediction").get<std::string>();
        row.gold = r.at("gold").get<std::vector<std::string>>();
        row.f1 = r.at("f1").get<double>();
        row.qtype = r.value("qtype", "");
        if (r.contains("hops") && !r["hops"].is_null()) row.hops = r["hops"].get<int>();
        row.usage = llm::usage_from_json(r.at("usage"));
        rows.push_back(std::move(row));
    }
    std::vector<SkippedRow> skipped;
    for (const auto& s : j.at("skipped")) {
        skipped.push_back({s.at("id").get<std::string>(), s.at("reason").get<std::string>(),
                           llm::usage_from_json(s.value("usage", nlohmann::json::object()))});
    }
    return build(j.at("dataset").get<std::string>(), std::move(rows), std::move(skipped));
}

std::string EvalReport::to_text() const
{
    std::ostringstream out;
    out << "dataset " << dataset << ": " << rows.size() << " evaluated, " << skipped.size() << " skipped, mean F1 "
        << fixed(mean_f1, 4) << '\n';
    for (const auto& [k, b] : by_qtype) {
        out << "  qtype " << pad(k, 20) << pad(std::to_string(b.count), 6, true) << "  F1 " << fixed(b.mean_f1, 4)
            << '\n';
    }
    for (const auto& [k, b] : by_hops) {
        out << "  hops  " << pad(std::to_string(k), 20) << pad(std::to_string(b.count), 6, true) << "  F1 "
            << fixed(b.mean_f1, 4) << '\n';
    }
    for (const auto& s : skipped) out << "  skipped " << s.id << ": " << s.reason << '\n';
    return out.str();
}

EvalReport score_predictions(const std::string& dataset_name, const std::vector<QAInstance>& instances,
                             const std::map<std::string, std::string>& predictions)
{
    std::vector<InstanceRow> rows;
    std::vector<SkippedRow> skipped;
    for (const auto& inst : instances) {
        auto it = predictions.find(inst.id);
        if (it == predictions.end()) {
            skipped.push_back({inst.id, "no prediction", {}});
            continue;
        }
        rows.push_back({inst.id, inst.question, it->second, inst.answers, max_alias_f1(it->second, inst.answers),
                        inst.qtype, inst.hops, {}});
    }
    return EvalReport::build(dataset_name, std::move(rows), std::move(skipped));
}

std::map<std::string, std::string> load_predictions(std::istream& in)
{
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out[id_string(j.at("id"))] = j.at("prediction").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(line_no, e.what());
        }
    }
    return out;
}

double CostReport::avg_prompt_tokens() const noexcept
{
    return instances ? static_cast<double>(total.prompt_tokens) / static_cast<double>(instances) : 0.0;
}

double CostReport::avg_completion_tokens() const noexcept
{
    return instances ? static_cast<double>(total.completion_tokens) / static_cast<double>(instances) : 0.0;
}

double CostReport::avg_tokens() const noexcept
{
    return instances ? static_cast<double>(total.total()) / static_cast<double>(instances) : 0.0;
}

CostReport CostReport::build(const EvalReport& report, const llm::UsageLedger& ledger)
{
    CostReport c;
    c.dataset = report.dataset;
    c.instances = report.rows.size() + report.skipped.size();
    c.solved = report.rows.size();
    c.f1 = report.mean_f1;
    for (const auto& r : report.rows) c.total += r.usage;
    for (const auto& s : report.skipped) c.total += s.usage;

    const auto summary = ledger.report();
    if (!(llm::usage_from_json(summary.at("total")) == c.total)) {
        throw std::logic_error("per-instance token usage disagrees with the ledger total");
    }
    for (const auto& [k, v] : summary.at("by_strategy").items()) c.by_strategy[k] = llm::usage_from_json(v);
    return c;
}

nlohmann::json CostReport::to_json() const
{
    nlohmann::json j{{"dataset", dataset},
                     {"instances", instances},
                     {"solved", solved},
                     {"total", llm::to_json(total)},
                     {"avg_prompt_tokens", avg_prompt_tokens()},
                     {"avg_completion_tokens", avg_completion_tokens()},
                     {"#token", avg_tokens()},
                     {"f1", f1},
                     {"by_strategy", nlohmann::json::object()}};
    for (const auto& [k, v] : by_strategy) j["by_strategy"][k] = llm::to_json(v);
    return j;
}

CostReport CostReport::from_json(const nlohmann::json& j)
{
    CostReport c;
    c.dataset = j.at("dataset").get<std::string>();
    c.instances = j.at("instances").get<std::size_t>();
    c.solved = j.at("solved").get<std::size_t>();
    c.total = llm::usage_from_json(j.at("total"));
    c.f1 = j.at("f1").get<double>();
    const auto by_strategy = j.value("by_strategy", nlohmann::json::object());
    for (const auto& [k, v] : by_strategy.items()) c.by_strategy[k] = llm::usage_from_json(v);
    return c;
}

std::string render_cost_table(const std::vector<CostReport>& reports)
{
    std::ostringstream out;
    out << pad("dataset", 14) << pad("#inst", 7, true) << pad("prompt", 12, true) << pad("completion", 12, true)
        << pad("#token", 12, true) << pad("f1", 9, true) << '\n';
    for (const auto& r : reports) {
        out << pad(r.dataset, 14) << pad(std::to_string(r.instances), 7, true)
            << pad(fixed(r.avg_prompt_tokens(), 1), 12, true) << pad(fixed(r.avg_completion_tokens(), 1), 12, true)
            << pad(fixed(r.avg_tokens(), 1), 12, true) << pad(fixed(r.f1 * 100.0, 2), 9, true) << '\n';
    }
    return out.str();
}

TraceAnalytics TraceAnalytics::build(const std::vector<trace::SolveTrace>& traces)
{
    TraceAnalytics a;
    std::vector<double> diversity;
    std::vector<double> consistency;
    std::vector<double> uncertainty;
    for (const auto& t : traces) {
        if (!t.complete) continue;
        ++a.traces;
        for (const auto& [kind, share] : source_contribution(t)) a.contribution[kind] += share;
        for (const auto& s : trace_node_stats(t)) {
            diversity.push_back(static_cast<double>(s.diversity));
            consistency.push_back(s.consistency);
            uncertainty.push_back(s.uncertainty);
        }
    }
    if (a.traces) {
        for (auto& [_, share] : a.contribution) share /= static_cast<double>(a.traces);
    }
    a.mean_diversity = mean_of(diversity);
    a.mean_consistency = mean_of(consistency);
    a.mean_uncertainty = mean_of(uncertainty);
    return a;
}

nlohmann::json TraceAnalytics::to_json() const
{
    nlohmann::json j{{"traces", traces},
                     {"contribution", nlohmann::json::object()},
                     {"node_stats",
                      {{"diversity", mean_diversity},
                       {"consistency", mean_consistency},
                       {"uncertainty", mean_uncertainty},
                       {"note", "stand-in definitions: distinct answers before truncation, top-1 probability "
                                "and entropy (nats) after truncation"}}}};
    for (const auto& [k, v] : contribution) j["contribution"][std::string(strategies::to_string(k))] = v;
    return j;
}

std::string TraceAnalytics::to_text() const
{
    std::ostringstream out;
    out << "source contribution over " << traces << " traces\n";
    for (const auto& [k, v] : contribution) {
        out << "  " << pad(std::string(strategies::to_string(k)), 12) << pad(fixed(v * 100.0, 1), 7, true) << "%\n";
    }
    out << "node statistics (stand-in definitions)\n"
        << "  diversity    " << fixed(mean_diversity, 3) << '\n'
        << "  consistency  " << fixed(mean_consistency, 3) << '\n'
        << "  uncertainty  " << fixed(mean_uncertainty, 3) << '\n';
    return out.str();
}

} // namespace beamaggr::eval
