// beamaggr: command-line front end (index, decompose, run, eval, report).

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "beamaggr/engine.hpp"
#include "beamaggr/errors.hpp"
#include "beamaggr/evalkit.hpp"
#include "beamaggr/llmio.hpp"
#include "beamaggr/qtree.hpp"
#include "beamaggr/retrieval.hpp"
#include "beamaggr/strategies.hpp"
#include "beamaggr/trace.hpp"

namespace fs = std::filesystem;
using namespace beamaggr;

namespace {

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const fs::path& path, const std::string& content)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
    if (!out) throw Error("cannot write " + path.string());
}

std::string fmt_prob(double p)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", p);
    return buf;
}

struct BackendOptions {
    std::string backend = "replay";
    std::string fixtures;
    std::string index;
    std::string corpus;
    std::string prompts = "data/prompts";
};

void add_backend_options(CLI::App* cmd, BackendOptions& o)
{
    cmd->add_option("--backend", o.backend, "live, record or replay")
        ->check(CLI::IsMember({"live", "record", "replay"}));
    cmd->add_option("--fixtures", o.fixtures, "fixture directory with llm/ and serp/ subdirectories");
    cmd->add_option("--index", o.index, "BM25 index built by `beamaggr index`");
    cmd->add_option("--corpus", o.corpus, "corpus JSONL indexed on the fly");
    cmd->add_option("--prompts", o.prompts, "prompt template directory");
}

// Backends, retrievers and the strategy runner for one invocation.
class Runtime {
public:
    Runtime(const BackendOptions& o, engine::BackendMode mode, bool need_index, bool need_serp)
        : prompts_(strategies::PromptLibrary::load(o.prompts))
    {
        const bool uses_fixtures = mode != engine::BackendMode::live;
        if (uses_fixtures && o.fixtures.empty()) throw ConfigError("--fixtures is required for record and replay");
        if (uses_fixtures) {
            store_ = std::make_unique<llm::FixtureStore>(fs::path(o.fixtures) / "llm");
            serp_store_ = std::make_unique<retrieval::SerpFixtureProvider>(fs::path(o.fixtures) / "serp");
        }

        if (mode == engine::BackendMode::replay) {
            backend_ = std::make_unique<llm::ReplayBackend>(*store_);
            if (need_serp) serp_ = serp_store_.get();
        } else {
            live_ = std::make_unique<llm::OpenAICompletionsBackend>(llm::OpenAIConfig::from_env());
            if (need_serp) live_serp_ = std::make_unique<retrieval::SerperProvider>(retrieval::SerperConfig::from_env());
            if (mode == engine::BackendMode::record) {
                backend_ = std::make_unique<llm::RecordingBackend>(*live_, *store_);
                if (need_serp) {
                    recording_serp_ = std::make_unique<retrieval::RecordingSerpProvider>(*live_serp_, *serp_store_);
                    serp_ = recording_serp_.get();
                }
            } else {
                serp_ = live_serp_.get();
            }
        }

        if (need_index) {
            if (!o.index.empty()) {
                index_ = std::make_unique<retrieval::InvertedIndex>(retrieval::InvertedIndex::load(fs::path(o.index)));
            } else if (!o.corpus.empty()) {
                index_ = std::make_unique<retrieval::InvertedIndex>(
                    retrieval::build_index(retrieval::load_corpus(fs::path(o.corpus))));
            } else {
                throw ConfigError("the wiki strategy needs --index or --corpus");
            }
        }
        llm::Backend& active = backend_ ? *backend_ : *live_;
        runner_ = std::make_unique<strategies::LlmStrategyRunner>(active, prompts_,
                                                                  strategies::Retrievers{index_.get(), serp_});
    }

    llm::Backend& backend() { return backend_ ? *backend_ : *live_; }
    strategies::StrategyRunner& runner() { return *runner_; }
    const strategies::PromptLibrary& prompts() const { return prompts_; }

private:
    strategies::PromptLibrary prompts_;
    std::unique_ptr<llm::FixtureStore> store_;
    std::unique_ptr<retrieval::SerpFixtureProvider> serp_store_;
    std::unique_ptr<llm::Backend> live_;
    std::unique_ptr<llm::Backend> backend_;
    std::unique_ptr<retrieval::SerpProvider> live_serp_;
    std::unique_ptr<retrieval::SerpProvider> recording_serp_;
    retrieval::SerpProvider* serp_ = nullptr;
    std::unique_ptr<retrieval::InvertedIndex> index_;
    std::unique_ptr<strategies::StrategyRunner> runner_;
};

bool uses(const engine::EngineConfig& c, strategies::StrategyKind kind)
{
    return std::find(c.strategies.begin(), c.strategies.end(), kind) != c.strategies.end();
}

void print_trace(std::ostream& out, const trace::SolveTrace& t)
{
    for (const auto& rec : t.nodes) {
        out << "[node " << rec.node << "] " << rec.question << '\n';
        for (const auto& b : rec.branches) {
            if (rec.kind == qtree::NodeKind::composite) {
                out << "  > " << b.question << "  (weight " << fmt_prob(b.weight) << (b.cache_hit ? ", cached" : "")
                    << ")\n";
            }
            for (const auto& o : b.outcomes) {
                out << "    " << strategies::to_string(o.kind) << ":";
                for (const auto& [answer, count] : o.table.counts()) {
                    out << " [" << o.table.surface(answer) << ", " << count << "]";
                }
                out << '\n';
            }
        }
        out << "  aggregated:";
        for (const auto& c : rec.candidates.items) out << " [" << c.surface << ", " << fmt_prob(c.prob) << "]";
        out << '\n';
    }
    out << "answer: " << t.answer << '\n';
}

int cmd_index(const std::string& corpus, const std::string& out, double k1, double b)
{
    const auto docs = retrieval::load_corpus(fs::path(corpus));
    const auto index = retrieval::build_index(docs, {k1, b});
    index.save(fs::path(out));
    std::cout << "indexed " << index.doc_count() << " documents, " << index.postings().size() << " terms -> " << out
              << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"BeamAggR multi-hop question answering"};
    app.require_subcommand(1);

    // index
    std::string idx_corpus, idx_out;
    double idx_k1 = 1.2, idx_b = 0.75;
    auto* index_cmd = app.add_subcommand("index", "build a BM25 index from corpus JSONL");
    index_cmd->add_option("--corpus", idx_corpus, "corpus JSONL {doc_id,title,body}")->required();
    index_cmd->add_option("--out", idx_out, "index file")->required();
    index_cmd->add_option("--k1", idx_k1, "BM25 k1");
    index_cmd->add_option("--b", idx_b, "BM25 b");

    // decompose
    std::string dec_question, dec_file, dec_dataset, dec_format = "generic", dec_out;
    bool dec_generate = false;
    int dec_retries = 3;
    BackendOptions dec_backend;
    auto* dec_cmd = app.add_subcommand("decompose", "validate, render or generate decompositions");
    dec_cmd->add_option("--question", dec_question, "original question");
    dec_cmd->add_option("--decomposition", dec_file, "decomposition JSON file to validate");
    dec_cmd->add_flag("--generate", dec_generate, "generate with the decomposition prompt");
    dec_cmd->add_option("--dataset", dec_dataset, "generate for every instance of a dataset");
    dec_cmd->add_option("--format", dec_format, "dataset format");
    dec_cmd->add_option("--out", dec_out, "decomposition cache JSONL to write");
    dec_cmd->add_option("--retries", dec_retries, "generation attempts before the atomic fallback");
    add_backend_options(dec_cmd, dec_backend);

    // run
    std::string run_question, run_dataset, run_format = "generic", run_name, run_decomposition, run_decompositions;
    std::string run_config, run_trace, run_report, run_predictions;
    std::vector<std::string> run_strategies;
    std::size_t run_beam = 0, run_workers = 0;
    bool run_greedy = false, run_parallel = false, run_generate = false;
    BackendOptions run_backend;
    auto* run_cmd = app.add_subcommand("run", "answer one question or a whole dataset");
    run_cmd->add_option("--question", run_question, "single question");
    run_cmd->add_option("--dataset", run_dataset, "dataset file");
    run_cmd->add_option("--format", run_format, "generic, hotpotqa, 2wikimqa, musique or bamboogle");
    run_cmd->add_option("--name", run_name, "dataset name used in reports");
    run_cmd->add_option("--decomposition", run_decomposition, "decomposition JSON for --question");
    run_cmd->add_option("--decompositions", run_decompositions, "decomposition cache JSONL");
    run_cmd->add_flag("--generate-decompositions", run_generate, "decompose missing questions with the model");
    run_cmd->add_option("--config", run_config, "engine configuration JSON");
    run_cmd->add_option("--beam-size", run_beam, "candidates kept per node");
    run_cmd->add_flag("--greedy", run_greedy, "keep one candidate per node");
    run_cmd->add_option("--strategies", run_strategies, "subset of closebook, parametric, wiki, serp")->delimiter(',');
    run_cmd->add_option("--workers", run_workers, "instances solved concurrently");
    run_cmd->add_flag("--parallel-strategies", run_parallel, "run the strategies of a question concurrently");
    run_cmd->add_option("--trace", run_trace, "trace output (JSONL, baggtrace/1)");
    run_cmd->add_option("--report", run_report, "report JSON output (dataset runs)");
    run_cmd->add_option("--predictions", run_predictions, "predictions JSONL output (dataset runs)");
    add_backend_options(run_cmd, run_backend);

    // eval
    std::string ev_predictions, ev_dataset, ev_format = "generic", ev_out, ev_name;
    auto* eval_cmd = app.add_subcommand("eval", "score a predictions file");
    eval_cmd->add_option("--predictions", ev_predictions, "JSONL {id, prediction}")->required();
    eval_cmd->add_option("--dataset", ev_dataset, "dataset file")->required();
    eval_cmd->add_option("--format", ev_format, "dataset format");
    eval_cmd->add_option("--name", ev_name, "dataset name");
    eval_cmd->add_option("--out", ev_out, "report JSON output");

    // report
    std::vector<std::string> rep_inputs;
    auto* report_cmd = app.add_subcommand("report", "render cost and analytics tables from run reports");
    report_cmd->add_option("reports", rep_inputs, "report JSON files written by `run --report`")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*index_cmd) return cmd_index(idx_corpus, idx_out, idx_k1, idx_b);

        if (*dec_cmd) {
            if (!dec_dataset.empty() || dec_generate) {
                engine::EngineConfig cfg;
                cfg.backend = engine::backend_mode_from_string(dec_backend.backend);
                Runtime rt(dec_backend, cfg.backend, false, false);
                auto generator = engine::make_llm_decomposer(rt.backend(), rt.prompts(), dec_retries);
                std::vector<eval::QAInstance> instances;
                if (!dec_dataset.empty()) {
                    instances = eval::load_dataset(fs::path(dec_dataset), eval::dataset_format_from_string(dec_format));
                } else {
                    if (dec_question.empty()) throw ConfigError("--question or --dataset is required");
                    instances.push_back({"question", dec_question, {""}, "", std::nullopt, std::nullopt});
                }
                std::ostringstream cache;
                for (const auto& inst : instances) {
                    const auto tree = generator(inst, nullptr);
                    cache << nlohmann::json{{"question", inst.question}, {"decomposition", qtree::to_decomposition(tree)}}
                                 .dump()
                          << '\n';
                }
                if (dec_out.empty()) std::cout << cache.str();
                else write_file(dec_out, cache.str());
                return 0;
            }
            if (dec_question.empty() || dec_file.empty()) {
                throw ConfigError("validation needs --question and --decomposition");
            }
            const auto tree = qtree::parse_decomposition(dec_question, read_file(dec_file));
            const auto report = qtree::validate(tree);
            for (const auto& line : qtree::render_flat(tree)) std::cout << line << '\n';
            for (const auto& v : report) {
                std::cout << "violation at node " << v.node << ": " << v.rule << " (" << v.detail << ")\n";
            }
            return report.empty() ? 0 : 1;
        }

        if (*run_cmd) {
            engine::EngineConfig cfg;
            if (!run_config.empty()) cfg = engine::EngineConfig::from_json(nlohmann::json::parse(read_file(run_config)));
            if (run_cmd->count("--backend")) cfg.backend = engine::backend_mode_from_string(run_backend.backend);
            else run_backend.backend = std::string(engine::to_string(cfg.backend));
            if (run_beam) cfg.beam_size = run_beam;
            if (run_greedy) cfg.mode = engine::Mode::greedy;
            if (run_workers) cfg.workers = run_workers;
            if (run_parallel) cfg.parallel_strategies = true;
            if (!run_strategies.empty()) {
                cfg.strategies.clear();
                for (const auto& s : run_strategies) cfg.strategies.push_back(strategies::strategy_from_string(s));
            }
            cfg.validate();

            Runtime rt(run_backend, cfg.backend, uses(cfg, strategies::StrategyKind::wiki),
                       uses(cfg, strategies::StrategyKind::serp));

            engine::DatasetRunOptions options;
            if (!run_decompositions.empty()) {
                std::ifstream in(run_decompositions, std::ios::binary);
                if (!in) throw Error("cannot open " + run_decompositions);
                options.decomposition_cache = engine::load_decomposition_cache(in);
            }
            if (run_generate) {
                options.generator = engine::make_llm_decomposer(rt.backend(), rt.prompts(), cfg.decomposition_retries);
            }

            if (!run_question.empty()) {
                qtree::QuestionTree tree;
                if (!run_decomposition.empty()) {
                    tree = qtree::parse_decomposition(run_question, read_file(run_decomposition));
                } else if (auto it = options.decomposition_cache.find(run_question);
                           it != options.decomposition_cache.end()) {
                    tree = qtree::parse_decomposition(run_question, it->second);
                } else if (options.generator) {
                    tree = options.generator({"question", run_question, {""}, "", std::nullopt, std::nullopt}, nullptr);
                } else {
                    tree = qtree::atomic_tree(run_question);
                }
                const auto t = engine::Engine(cfg, rt.runner()).solve(run_question, tree);
                print_trace(std::cout, t);
                if (!run_trace.empty()) write_file(run_trace, trace::trace_to_string(t));
                return 0;
            }

            if (run_dataset.empty()) throw ConfigError("--question or --dataset is required");
            const auto format = eval::dataset_format_from_string(run_format);
            const auto instances = eval::load_dataset(fs::path(run_dataset), format);
            options.dataset_name = run_name.empty() ? std::string(eval::to_string(format)) : run_name;
            const auto result = engine::run_dataset(instances, cfg, rt.runner(), options);

            std::cout << result.report.to_text();
            std::cout << eval::render_cost_table({result.cost});
            const auto analytics = eval::TraceAnalytics::build(result.traces);
            std::cout << analytics.to_text();

            if (!run_trace.empty()) {
                std::ostringstream out;
                for (const auto& t : result.traces) trace::write_trace(out, t);
                write_file(run_trace, out.str());
            }
            if (!run_predictions.empty()) {
                std::ostringstream out;
                for (const auto& [id, answer] : result.predictions) {
                    out << nlohmann::json{{"id", id}, {"prediction", answer}}.dump() << '\n';
                }
                write_file(run_predictions, out.str());
            }
            if (!run_report.empty()) {
                const nlohmann::json report{{"config", cfg.to_json()},
                                            {"eval", result.report.to_json()},
                                            {"cost", result.cost.to_json()},
                                            {"analytics", analytics.to_json()}};
                write_file(run_report, report.dump(2) + "\n");
            }
            return 0;
        }

        if (*eval_cmd) {
            const auto format = eval::dataset_format_from_string(ev_format);
            const auto instances = eval::load_dataset(fs::path(ev_dataset), format);
            std::ifstream in(ev_predictions, std::ios::binary);
            if (!in) throw Error("cannot open " + ev_predictions);
            const auto report = eval::score_predictions(ev_name.empty() ? std::string(eval::to_string(format)) : ev_name,
                                                        instances, eval::load_predictions(in));
            std::cout << report.to_text();
            if (!ev_out.empty()) write_file(ev_out, report.to_json().dump(2) + "\n");
            return 0;
        }

        if (*report_cmd) {
            std::vector<eval::CostReport> costs;
            std::vector<nlohmann::json> docs;
            for (const auto& path : rep_inputs) {
                docs.push_back(nlohmann::json::parse(read_file(path)));
                costs.push_back(eval::CostReport::from_json(docs.back().at("cost")));
            }
            std::cout << eval::render_cost_table(costs);
            for (const auto& doc : docs) {
                const auto report = eval::EvalReport::from_json(doc.at("eval"));
                std::cout << '\n' << report.to_text();
                if (doc.contains("analytics")) {
                    const auto& a = doc["analytics"];
                    std::cout << "source contribution:";
                    for (const auto& [k, v] : a.at("contribution").items()) {
                        std::cout << ' ' << k << ' ' << fmt_prob(v.get<double>());
                    }
                    const auto& s = a.at("node_stats");
                    std::cout << "\nnode stats (stand-ins): diversity " << fmt_prob(s.at("diversity").get<double>())
                              << ", consistency " << fmt_prob(s.at("consistency").get<double>()) << ", uncertainty "
                              << fmt_prob(s.at("uncertainty").get<double>()) << '\n';
                }
            }
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
