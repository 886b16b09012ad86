#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "beamaggr/engine.hpp"
#include "beamaggr/llmio.hpp"
#include "beamaggr/qtree.hpp"
#include "beamaggr/retrieval.hpp"
#include "beamaggr/strategies.hpp"

namespace testing_support {

inline const std::filesystem::path data_dir{BEAMAGGR_DATA_DIR};

inline const std::string golden_question = "The fourth largest city in Germany was originally called what?";
inline const std::string golden_q1 = "What is the fourth largest city in Germany?";

/// Replays the bundled Bamboogle worked example offline.
struct GoldenWorld {
    beamaggr::strategies::PromptLibrary prompts = beamaggr::strategies::PromptLibrary::load(data_dir / "prompts");
    beamaggr::llm::FixtureStore store{data_dir / "bamboogle" / "fixtures" / "llm"};
    beamaggr::llm::ReplayBackend backend{store};
    beamaggr::retrieval::SerpFixtureProvider serp{data_dir / "bamboogle" / "fixtures" / "serp"};
    beamaggr::retrieval::InvertedIndex index = beamaggr::retrieval::build_index(
        beamaggr::retrieval::load_corpus(data_dir / "bamboogle" / "corpus.jsonl"));
    beamaggr::strategies::LlmStrategyRunner runner{backend, prompts, {&index, &serp}};

    std::vector<beamaggr::strategies::StrategyConfig> configs() const
    {
        return beamaggr::engine::EngineConfig{}.strategy_configs();
    }

    beamaggr::qtree::QuestionTree tree() const
    {
        std::ifstream in(data_dir / "bamboogle" / "decompositions.jsonl");
        const auto cache = beamaggr::engine::load_decomposition_cache(in);
        return beamaggr::qtree::parse_decomposition(golden_question, cache.at(golden_question));
    }
};

} // namespace testing_support
