// beamaggr_make_fixtures: records replay fixtures for a dataset from a
// script of per-question samples, so bundled datasets run offline.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "beamaggr/engine.hpp"
#include "beamaggr/errors.hpp"
#include "beamaggr/evalkit.hpp"
#include "beamaggr/fixture_script.hpp"
#include "beamaggr/llmio.hpp"
#include "beamaggr/retrieval.hpp"
#include "beamaggr/strategies.hpp"

namespace fs = std::filesystem;
using namespace beamaggr;

int main(int argc, char** argv)
{
    CLI::App app{"Record replay fixtures from a scripted backend"};
    std::string script_path, dataset_path, format = "generic", decompositions, prompts_dir = "data/prompts", corpus,
                                             out_dir;
    std::vector<std::size_t> beam_sizes{1, 2};
    bool generate = false;
    app.add_option("--script", script_path, "script JSON")->required();
    app.add_option("--dataset", dataset_path, "dataset file")->required();
    app.add_option("--format", format, "dataset format");
    app.add_option("--decompositions", decompositions, "decomposition cache JSONL");
    app.add_flag("--generate-decompositions", generate, "decompose missing questions through the prompt");
    app.add_option("--prompts", prompts_dir, "prompt template directory");
    app.add_option("--corpus", corpus, "corpus JSONL for the wiki strategy")->required();
    app.add_option("--out", out_dir, "fixture directory (llm/ and serp/ are recreated)")->required();
    app.add_option("--beam-sizes", beam_sizes, "beam sizes to record")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    try {
        const auto script = fixtures::Script::load(script_path);
        const auto prompts = strategies::PromptLibrary::load(prompts_dir);
        const auto instances = eval::load_dataset(fs::path(dataset_path), eval::dataset_format_from_string(format));
        const auto index = retrieval::build_index(retrieval::load_corpus(fs::path(corpus)));

        const fs::path out(out_dir);
        fs::remove_all(out / "llm");
        fs::remove_all(out / "serp");
        llm::FixtureStore store(out / "llm");
        retrieval::SerpFixtureProvider serp_store(out / "serp");

        fixtures::ScriptedBackend scripted(script, prompts);
        fixtures::ScriptedSerpProvider scripted_serp(script);
        llm::RecordingBackend backend(scripted, store);
        retrieval::RecordingSerpProvider serp(scripted_serp, serp_store);
        strategies::LlmStrategyRunner runner(backend, prompts, {&index, &serp});

        engine::DatasetRunOptions options;
        if (!decompositions.empty()) {
            std::ifstream in(decompositions, std::ios::binary);
            if (!in) throw Error("cannot open " + decompositions);
            options.decomposition_cache = engine::load_decomposition_cache(in);
        }
        engine::EngineConfig config;
        config.backend = engine::BackendMode::record;
        if (generate) options.generator = engine::make_llm_decomposer(backend, prompts, config.decomposition_retries);

        for (const auto k : beam_sizes) {
            config.beam_size = k;
            const auto run = engine::run_dataset(instances, config, runner, options);
            std::cout << "k=" << k << ": solved " << run.report.rows.size() << ", skipped " << run.report.skipped.size()
                      << ", mean F1 " << run.report.mean_f1 << '\n';
            for (const auto& s : run.report.skipped) std::cout << "  skipped " << s.id << ": " << s.reason << '\n';
            if (!run.report.skipped.empty()) return 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
