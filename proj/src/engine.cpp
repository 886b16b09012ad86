#include "beamaggr/engine.hpp"

#include <algorithm>
#include <atomic>
#include <istream>
#include <mutex>
#include <set>
#include <thread>

#include "beamaggr/errors.hpp"
#include "beamaggr/text.hpp"

namespace beamaggr::engine {

std::string_view to_string(Mode mode) noexcept
{
    return mode == Mode::greedy ? "greedy" : "beam";
}

std::string_view to_string(BackendMode mode) noexcept
{
    switch (mode) {
    case BackendMode::live: return "live";
    case BackendMode::record: return "record";
    case BackendMode::replay: return "replay";
    }
    return "replay";
}

Mode mode_from_string(std::string_view name)
{
    if (name == "beam") return Mode::beam;
    if (name == "greedy") return Mode::greedy;
    throw ConfigError("unknown mode \"" + std::string(name) + "\"");
}

BackendMode backend_mode_from_string(std::string_view name)
{
    for (auto m : {BackendMode::live, BackendMode::record, BackendMode::replay}) {
        if (to_string(m) == name) return m;
    }
    throw ConfigError("unknown backend mode \"" + std::string(name) + "\"");
}

std::vector<strategies::StrategyConfig> EngineConfig::strategy_configs() const
{
    std::vector<strategies::StrategyConfig> out;
    for (auto kind : strategies) {
        auto c = strategies::default_config(kind);
        c.samples = samples;
        c.sample_temperature = sample_temperature;
        c.max_tokens = max_tokens;
        c.knowledge_max_tokens = knowledge_max_tokens;
        c.sampling = sampling;
        if (kind == strategies::StrategyKind::wiki) c.retrieval_doc_count = retrieval_docs;
        if (kind == strategies::StrategyKind::serp) c.retrieval_doc_count = serp_results;
        out.push_back(std::move(c));
    }
    return out;
}

void EngineConfig::validate() const
{
    if (beam_size < 1) throw ConfigError("beam_size must be at least 1");
    if (!(vote_temperature > 0.0)) throw ConfigError("vote_temperature must be positive");
    if (samples < 1) throw ConfigError("samples must be at least 1");
    if (sample_temperature < 0.0) throw ConfigError("sample_temperature must be non-negative");
    if (max_combinations < 1) throw ConfigError("max_combinations must be at least 1");
    if (workers < 1) throw ConfigError("workers must be at least 1");
    if (max_tokens < 1 || knowledge_max_tokens < 1) throw ConfigError("token limits must be positive");
    if (retrieval_docs < 0 || serp_results < 0) throw ConfigError("result counts must be non-negative");
    if (decomposition_retries < 1) throw ConfigError("decomposition_retries must be at least 1");
    if (strategies.empty()) throw ConfigError("at least one strategy is required");
    std::set<strategies::StrategyKind> seen(strategies.begin(), strategies.end());
    if (seen.size() != strategies.size()) throw ConfigError("duplicate strategy in configuration");
    if (!sampling.is_object()) throw ConfigError("sampling must be an object");
}

EngineConfig EngineConfig::from_json(const nlohmann::json& j)
{
    if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
    EngineConfig c;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "beam_size") c.beam_size = v.get<std::size_t>();
            else if (key == "vote_temperature") c.vote_temperature = v.get<double>();
            else if (key == "samples") c.samples = v.get<int>();
            else if (key == "sample_temperature") c.sample_temperature = v.get<double>();
            else if (key == "max_combinations") c.max_combinations = v.get<std::size_t>();
            else if (key == "strategies") {
                c.strategies.clear();
                for (const auto& s : v) c.strategies.push_back(strategies::strategy_from_string(s.get<std::string>()));
            }
            else if (key == "mode") c.mode = mode_from_string(v.get<std::string>());
            else if (key == "backend") c.backend = backend_mode_from_string(v.get<std::string>());
            else if (key == "parallel_strategies") c.parallel_strategies = v.get<bool>();
            else if (key == "workers") c.workers = v.get<std::size_t>();
            else if (key == "max_tokens") c.max_tokens = v.get<int>();
            else if (key == "knowledge_max_tokens") c.knowledge_max_tokens = v.get<int>();
            else if (key == "retrieval_docs") c.retrieval_docs = v.get<int>();
            else if (key == "serp_results") c.serp_results = v.get<int>();
            else if (key == "decomposition_retries") c.decomposition_retries = v.get<int>();
            else if (key == "sampling") c.sampling = v;
            else throw ConfigError("unknown configuration key \"" + key + "\"");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad configuration value: ") + e.what());
    }
    c.validate();
    return c;
}

nlohmann::json EngineConfig::to_json() const
{
    nlohmann::json names = nlohmann::json::array();
    for (auto s : strategies) names.push_back(strategies::to_string(s));
    return {{"beam_size", beam_size},
            {"vote_temperature", vote_temperature},
            {"samples", samples},
            {"sample_temperature", sample_temperature},
            {"max_combinations", max_combinations},
            {"strategies", std::move(names)},
            {"mode", to_string(mode)},
            {"backend", to_string(backend)},
            {"parallel_strategies", parallel_strategies},
            {"workers", workers},
            {"max_tokens", max_tokens},
            {"knowledge_max_tokens", knowledge_max_tokens},
            {"retrieval_docs", retrieval_docs},
            {"serp_results", serp_results},
            {"decomposition_retries", decomposition_retries},
            {"sampling", sampling}};
}

Engine::Engine(EngineConfig config, strategies::StrategyRunner& runner)
    : config_(std::move(config)), runner_(runner)
{
    config_.validate();
    strategy_configs_ = config_.strategy_configs();
}

trace::SolveTrace Engine::solve(const std::string& question, const qtree::QuestionTree& tree, const std::string& id,
                                llm::UsageLedger* ledger) const
{
    if (const auto violations = qtree::validate(tree); !violations.empty()) {
        std::string msg = "invalid question tree:";
        for (const auto& v : violations) msg += " [node " + std::to_string(v.node) + ": " + v.rule + "]";
        throw StructureError(msg);
    }
    const std::size_t k = config_.effective_beam();
    const std::string tag = id.empty() ? question : id;

    trace::SolveTrace out;
    out.id = id;
    out.question = question;
    out.tree = tree;
    out.beam_size = k;
    out.vote_temperature = config_.vote_temperature;
    out.max_combinations = config_.max_combinations;

    std::map<qtree::NodeId, std::size_t> index_of;
    std::map<std::string, std::vector<strategies::StrategyOutcome>> answered;

    for (const auto node_id : qtree::post_order(tree)) {
        const auto& node = tree.node(node_id);
        trace::NodeRecord rec;
        rec.node = node_id;
        rec.question = node.question;
        rec.kind = node.kind;
        rec.children = node.children;

        std::vector<beam::Combination> combos;
        if (node.children.empty()) {
            combos.push_back({{}, 1.0});
        } else {
            std::vector<beam::CandidateSet> child_sets;
            for (auto c : node.children) child_sets.push_back(out.nodes[index_of.at(c)].candidates);
            combos = beam::beam_combine(child_sets, config_.max_combinations);
        }

        const std::string tpl = qtree::posed_template(node);
        for (const auto& combo : combos) {
            trace::BranchRecord b;
            b.combination = combo.members;
            b.joint_prob = combo.joint_prob;
            b.question = qtree::mask_fill(tpl, combo.surfaces());

            if (auto hit = answered.find(b.question); hit != answered.end()) {
                b.cache_hit = true;
                b.outcomes = hit->second;
                for (auto& o : b.outcomes) o.usage = {};
            } else {
                b.outcomes = strategies::run_strategies(b.question, strategy_configs_, runner_,
                                                        config_.parallel_strategies);
                for (const auto& o : b.outcomes) {
                    out.usage += o.usage;
                    if (ledger) ledger->accumulate(o.usage, {tag, std::string(strategies::to_string(o.kind)), node_id});
                }
                answered.emplace(b.question, b.outcomes);
            }
            trace::aggregate_branch(b, config_.vote_temperature, k);
            rec.branches.push_back(std::move(b));
        }

        trace::aggregate_node(rec, k);
        index_of[node_id] = out.nodes.size();
        out.nodes.push_back(std::move(rec));
    }

    out.root_candidates = out.nodes[index_of.at(tree.root)].candidates;
    out.answer = beam::final_answer(out.root_candidates);
    out.complete = true;
    return out;
}

trace::SolveTrace solve(const std::string& question, const qtree::QuestionTree& tree, const EngineConfig& config,
                        strategies::StrategyRunner& runner, llm::UsageLedger* ledger)
{
    return Engine(config, runner).solve(question, tree, {}, ledger);
}

trace::SolveTrace solve_greedy(const std::string& question, const qtree::QuestionTree& tree, EngineConfig config,
                               strategies::StrategyRunner& runner, llm::UsageLedger* ledger)
{
    config.mode = Mode::greedy;
    return Engine(std::move(config), runner).solve(question, tree, {}, ledger);
}

std::string extract_decomposition_json(std::string_view completion)
{
    const auto open = completion.find('{');
    const auto close = completion.rfind('}');
    if (open == std::string_view::npos || close == std::string_view::npos || close < open) return {};
    return std::string(completion.substr(open, close - open + 1));
}

TreeGenerator make_llm_decomposer(llm::Backend& backend, const strategies::PromptLibrary& prompts, int max_retries)
{
    return [&backend, &prompts, max_retries](const eval::QAInstance& inst, llm::UsageLedger* ledger) {
        const std::string text = prompts.render("decompose", inst.question);
        const llm::UsageTag tag{inst.id, "decompose", -1};
        std::vector<llm::Completion> sampled;

        auto take = [&](const llm::Completion& c) {
            return c.finish_reason == llm::FinishReason::content_filter ? std::string()
                                                                         : extract_decomposition_json(c.text);
        };
        auto generate = [&](int attempt) -> std::string {
            llm::Prompt prompt;
            prompt.text = text;
            prompt.max_tokens = 512;
            if (attempt == 0) {
                const auto out = llm::complete_n(backend, prompt);
                if (ledger) ledger->accumulate(out[0].usage, tag);
                return take(out[0]);
            }
            if (sampled.empty()) {
                prompt.temperature = 0.7;
                prompt.n = std::max(1, max_retries - 1);
                sampled = llm::complete_n(backend, prompt);
                for (const auto& c : sampled) {
                    if (ledger) ledger->accumulate(c.usage, tag);
                }
            }
            return take(sampled.at(static_cast<std::size_t>(attempt - 1) % sampled.size()));
        };
        return qtree::regenerate_or_fallback(inst.question, generate, max_retries);
    };
}

namespace {

struct InstanceOutcome {
    std::optional<trace::SolveTrace> trace;
    std::string skip_reason;
};

InstanceOutcome solve_instance(const eval::QAInstance& inst, const Engine& engine, const DatasetRunOptions& options,
                               llm::UsageLedger& ledger)
{
    InstanceOutcome r;
    try {
        std::optional<qtree::QuestionTree> tree;
        try {
            if (inst.decomposition) {
                tree = qtree::parse_decomposition(inst.question, *inst.decomposition);
            } else if (auto it = options.decomposition_cache.find(inst.question);
                       it != options.decomposition_cache.end()) {
                tree = qtree::parse_decomposition(inst.question, it->second);
            }
        } catch (const Error& e) {
            r.skip_reason = std::string("invalid decomposition: ") + e.what();
            return r;
        }
        if (!tree && options.generator) tree = options.generator(inst, &ledger);
        if (!tree) {
            r.skip_reason = "no decomposition available";
            return r;
        }
        r.trace = engine.solve(inst.question, *tree, inst.id, &ledger);
    } catch (const std::exception& e) {
        r.skip_reason = e.what();
    }
    return r;
}

} // namespace

DatasetRun run_dataset(const std::vector<eval::QAInstance>& instances, const EngineConfig& config,
                       strategies::StrategyRunner& runner, const DatasetRunOptions& options)
{
    std::set<std::string> ids;
    for (const auto& inst : instances) {
        if (!ids.insert(inst.id).second) throw ConfigError("duplicate instance id \"" + inst.id + "\"");
    }

    const Engine engine(config, runner);
    llm::UsageLedger own_ledger;
    llm::UsageLedger& ledger = options.ledger ? *options.ledger : own_ledger;

    std::vector<InstanceOutcome> results(instances.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < instances.size(); i = next++) {
            results[i] = solve_instance(instances[i], engine, options, ledger);
        }
    };
    const std::size_t threads = std::min(config.workers, instances.size());
    if (threads <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }

    DatasetRun run;
    std::vector<eval::InstanceRow> rows;
    std::vector<eval::SkippedRow> skipped;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const auto& inst = instances[i];
        const auto usage = ledger.for_question(inst.id);
        if (results[i].trace) {
            auto& t = *results[i].trace;
            rows.push_back({inst.id, inst.question, t.answer, inst.answers, eval::max_alias_f1(t.answer, inst.answers),
                            inst.qtype, inst.hops, usage});
            run.predictions.emplace_back(inst.id, t.answer);
            run.traces.push_back(std::move(t));
        } else {
            skipped.push_back({inst.id, results[i].skip_reason, usage});
        }
    }
    run.report = eval::EvalReport::build(options.dataset_name, std::move(rows), std::move(skipped));
    run.cost = eval::CostReport::build(run.report, ledger);
    return run;
}

std::map<std::string, qtree::DecompositionMap> load_decomposition_cache(std::istream& in)
{
    std::map<std::string, qtree::DecompositionMap> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        try {
            const auto j = qtree::DecompositionMap::parse(line);
            out[j.at("question").get<std::string>()] = j.at("decomposition");
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(line_no, e.what());
        }
    }
    return out;
}

} // namespace beamaggr::engine
