#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "beamaggr/engine.hpp"
#include "beamaggr/errors.hpp"
#include "beamaggr/trace.hpp"
#include "support/golden.hpp"
#include "support/random_trees.hpp"
#include "support/scripted_world.hpp"

using namespace beamaggr;
using namespace beamaggr::trace;

namespace {

SolveTrace golden_trace()
{
    testing_support::GoldenWorld w;
    auto t = engine::solve(testing_support::golden_question, w.tree(), engine::EngineConfig{}, w.runner);
    t.id = "bamboogle-1";
    return t;
}

} // namespace

TEST(TraceFile, RoundTripsExactly)
{
    const auto t = golden_trace();
    const auto text = trace_to_string(t);
    std::istringstream in(text + text);
    const auto back = read_traces(in);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0], t);
    EXPECT_EQ(trace_to_string(back[1]), text);
}

TEST(TraceFile, HeaderCarriesSchema)
{
    const auto text = trace_to_string(golden_trace());
    const auto header = nlohmann::json::parse(text.substr(0, text.find('\n')));
    EXPECT_EQ(header.at("schema"), std::string(schema_version));
}

TEST(TraceFile, IncompleteTraceHasNoResult)
{
    auto t = golden_trace();
    const auto text = trace_to_string(t);
    const auto last_line = text.rfind('\n', text.size() - 2);
    std::istringstream in(text.substr(0, last_line + 1));
    const auto back = read_traces(in);
    ASSERT_EQ(back.size(), 1u);
    EXPECT_FALSE(back[0].complete);
    EXPECT_EQ(back[0].nodes.size(), t.nodes.size());
}

TEST(TraceFile, RejectsUnknownSchemaAndGarbage)
{
    std::istringstream wrong_schema(R"({"type":"trace","schema":"baggtrace/0"})" "\n");
    EXPECT_THROW(read_traces(wrong_schema), FormatError);
    std::istringstream garbage("{not json\n");
    EXPECT_THROW(read_traces(garbage), FormatError);
    std::istringstream orphan(R"({"type":"node"})" "\n");
    EXPECT_THROW(read_traces(orphan), FormatError);
}

TEST(TraceRecord, MissingNodeIsIncomplete)
{
    EXPECT_THROW(golden_trace().record(42), IncompleteTraceError);
}

TEST(Reaggregate, ReproducesGoldenTraceExactly)
{
    const auto t = golden_trace();
    EXPECT_EQ(reaggregate(t), t);
    std::istringstream in(trace_to_string(t));
    EXPECT_EQ(trace_to_string(reaggregate(read_traces(in).at(0))), trace_to_string(t));
}

TEST(Reaggregate, ReproducesRandomTracesExactly)
{
    std::mt19937 rng(9);
    strategies::CallbackRunner runner(testing_support::scripted_outcome);
    for (std::size_t k : {1u, 2u, 3u}) {
        engine::EngineConfig config;
        config.beam_size = k;
        for (int i = 0; i < 30; ++i) {
            const auto tree = testing_support::random_tree(rng);
            const auto t = engine::solve(tree.original_question, tree, config, runner);
            std::istringstream in(trace_to_string(t));
            EXPECT_EQ(reaggregate(read_traces(in).at(0)), t);
        }
    }
}

TEST(Reaggregate, ReflectsEditedVotes)
{
    auto t = golden_trace();
    // Flip the first hop towards Darmstadt: the root should follow.
    auto& q1 = t.nodes.front().branches.front();
    for (auto& o : q1.outcomes) {
        if (o.kind == strategies::StrategyKind::serp) o.table.add("Darmstadt", 10);
    }
    const auto again = reaggregate(t);
    EXPECT_EQ(again.nodes.front().candidates.top().answer, "darmstadt");
    EXPECT_EQ(again.answer, "Darmundestat");
}
