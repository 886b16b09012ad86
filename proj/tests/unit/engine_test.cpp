#include <gtest/gtest.h>

#include <atomic>
#include <mutex>
#include <random>
#include <set>
#include <sstream>

#include "beamaggr/engine.hpp"
#include "beamaggr/errors.hpp"
#include "support/golden.hpp"
#include "support/oracles.hpp"
#include "support/random_trees.hpp"
#include "support/scripted_world.hpp"

using namespace beamaggr;
using namespace beamaggr::engine;
using strategies::CallbackRunner;
using strategies::StrategyConfig;
using strategies::StrategyOutcome;
using testing_support::GoldenWorld;

namespace {

StrategyOutcome voted(strategies::StrategyKind kind, const std::vector<std::string>& answers, llm::TokenUsage usage = {})
{
    StrategyOutcome o;
    o.kind = kind;
    o.extracted = answers;
    o.raw_completions = answers;
    o.finish_reasons.assign(answers.size(), llm::FinishReason::stop);
    o.table = beam::vote(answers);
    o.usage = usage;
    return o;
}

/// Independent recomputation of a node's candidates from its recorded merged tables.
std::vector<std::pair<std::string, long double>> expected_node(const trace::NodeRecord& node, long double tau,
                                                               std::size_t k)
{
    std::map<std::string, long double> mass;
    long double total_joint = 0;
    for (const auto& b : node.branches) total_joint += b.joint_prob;
    for (const auto& b : node.branches) {
        const auto dist = oracle::top_k(oracle::softmax(b.merged.counts(), tau), k);
        for (const auto& [a, p] : dist) mass[a] += b.joint_prob / total_joint * p;
    }
    return oracle::top_k(mass, k);
}

qtree::QuestionTree two_leaf_tree(const std::string& a, const std::string& b, const std::string& parent)
{
    qtree::QuestionTree t;
    t.original_question = "Original?";
    t.nodes[0] = {0, a, {}, qtree::NodeKind::atomic, "", false};
    t.nodes[1] = {1, b, {}, qtree::NodeKind::atomic, "", false};
    t.nodes[2] = {2, parent, {0, 1}, qtree::NodeKind::composite, "Original?", false};
    t.root = 2;
    return t;
}

} // namespace

TEST(Solve, GoldenWorkedExample)
{
    GoldenWorld w;
    const auto tree = w.tree();
    const auto trace = solve(testing_support::golden_question, tree, EngineConfig{}, w.runner);
    ASSERT_TRUE(trace.complete);
    EXPECT_EQ(trace.answer, "Colonia Claudia Ara Agrippinensium");

    const auto& q1 = trace.record(tree.node(tree.root).children[0]);
    ASSERT_EQ(q1.candidates.size(), 2u);
    EXPECT_EQ(q1.candidates.items[0].surface, "Cologne");
    EXPECT_NEAR(q1.candidates.items[0].prob, 0.6607, 1e-3);
    EXPECT_EQ(q1.candidates.items[1].surface, "Darmstadt");
    EXPECT_NEAR(q1.candidates.items[1].prob, 0.3392, 1e-3);
    EXPECT_EQ(q1.branches[0].merged.counts(),
              (std::map<std::string, int>{{"cologne", 7}, {"darmstadt", 5}, {"frankfurt", 3}, {"regensburg", 3}}));

    const auto& root = trace.record(tree.root);
    ASSERT_EQ(root.branches.size(), 2u);
    EXPECT_EQ(root.branches[0].question, "What was Cologne originally called?");
    EXPECT_EQ(root.branches[1].question, "What was Darmstadt originally called?");
    EXPECT_NEAR(root.branches[0].weight, 0.6607, 1e-3);
    EXPECT_NEAR(root.branches[0].candidates.items[0].prob, 0.7914, 1e-3);
    EXPECT_NEAR(root.branches[1].candidates.items[0].prob, 0.8808, 1e-3);
    ASSERT_EQ(root.candidates.size(), 2u);
    EXPECT_NEAR(root.candidates.items[0].prob, 0.6363, 1e-3);
    EXPECT_EQ(root.candidates.items[1].surface, "Darmundestat");
    EXPECT_NEAR(root.candidates.items[1].prob, 0.3636, 1e-3);

    for (const auto& node : trace.nodes) {
        const auto expected = expected_node(node, 3.0L, 2);
        ASSERT_EQ(node.candidates.size(), expected.size());
        for (std::size_t i = 0; i < expected.size(); ++i) {
            EXPECT_EQ(node.candidates.items[i].answer, expected[i].first);
            EXPECT_NEAR(node.candidates.items[i].prob, static_cast<double>(expected[i].second), 1e-12);
        }
    }
}

TEST(Solve, GoldenGreedyFollowsTopBranch)
{
    GoldenWorld w;
    const auto tree = w.tree();
    const auto greedy = solve_greedy(testing_support::golden_question, tree, EngineConfig{}, w.runner);
    const auto& root = greedy.record(tree.root);
    ASSERT_EQ(root.branches.size(), 1u);
    EXPECT_EQ(root.branches[0].question, "What was Cologne originally called?");
    EXPECT_EQ(greedy.answer, "Colonia Claudia Ara Agrippinensium");
    EXPECT_DOUBLE_EQ(greedy.root_candidates.items[0].prob, 1.0);

    EngineConfig k1;
    k1.beam_size = 1;
    EXPECT_EQ(solve(testing_support::golden_question, tree, k1, w.runner), greedy);
}

TEST(Solve, AtomicTreeEqualsMultiSource)
{
    GoldenWorld w;
    const auto trace = solve(testing_support::golden_q1, qtree::atomic_tree(testing_support::golden_q1),
                             EngineConfig{}, w.runner);
    const auto direct = strategies::answer_question_multisource(testing_support::golden_q1, w.configs(), w.runner, 3.0, 2);
    EXPECT_EQ(trace.root_candidates, direct.candidates);
    EXPECT_EQ(trace.answer, "Cologne");
}

TEST(Solve, SingleCandidateChildrenGiveOneCombination)
{
    CallbackRunner runner([](const std::string& q, const StrategyConfig& c) {
        if (q == "A?") return voted(c.kind, {"x"});
        if (q == "B?") return voted(c.kind, {"y"});
        return voted(c.kind, {q == "C x y?" ? "z" : "wrong"});
    });
    const auto trace = solve("Original?", two_leaf_tree("A?", "B?", "C #1 #2?"), EngineConfig{}, runner);
    const auto& root = trace.record(2);
    ASSERT_EQ(root.branches.size(), 1u);
    EXPECT_DOUBLE_EQ(root.branches[0].weight, 1.0);
    EXPECT_EQ(trace.answer, "z");
}

TEST(Solve, IdenticalQuestionsAreAnsweredOnce)
{
    std::mutex m;
    std::map<std::string, int> calls;
    CallbackRunner runner([&](const std::string& q, const StrategyConfig& c) {
        {
            std::lock_guard lock(m);
            ++calls[q];
        }
        return voted(c.kind, {q == "A?" ? "x" : "z"}, {10, 2});
    });
    EngineConfig config;
    config.strategies = {strategies::StrategyKind::closebook};
    llm::UsageLedger ledger;
    const auto trace = engine::solve("Original?", two_leaf_tree("A?", "A?", "C #1 #2?"), config, runner, &ledger);
    EXPECT_EQ(calls.at("A?"), 1);
    EXPECT_FALSE(trace.record(0).branches[0].cache_hit);
    EXPECT_TRUE(trace.record(1).branches[0].cache_hit);
    EXPECT_EQ(trace.record(1).branches[0].candidates, trace.record(0).branches[0].candidates);
    EXPECT_EQ(trace.usage, (llm::TokenUsage{20, 4}));
    EXPECT_EQ(ledger.total(), trace.usage);
    EXPECT_EQ(ledger.for_node("Original?", 1), (llm::TokenUsage{0, 0}));
}

TEST(Solve, EmptyNodeReportsItsId)
{
    CallbackRunner runner([](const std::string& q, const StrategyConfig& c) {
        return voted(c.kind, q == "B?" ? std::vector<std::string>{} : std::vector<std::string>{"x"});
    });
    try {
        solve("Original?", two_leaf_tree("A?", "B?", "C #1 #2?"), EngineConfig{}, runner);
        FAIL();
    } catch (const AllSourcesEmptyError& e) {
        ASSERT_TRUE(e.node());
        EXPECT_EQ(*e.node(), 1);
    }
}

TEST(Solve, FailedBranchIsDroppedAndWeightsRenormalized)
{
    CallbackRunner runner([](const std::string& q, const StrategyConfig& c) {
        if (q == "A?") return voted(c.kind, {"p", "p", "q"});
        if (q == "C p?") return voted(c.kind, {});
        return voted(c.kind, {"r"});
    });
    qtree::QuestionTree t;
    t.original_question = "Original?";
    t.nodes[0] = {0, "A?", {}, qtree::NodeKind::atomic, "", false};
    t.nodes[1] = {1, "C #1?", {0}, qtree::NodeKind::composite, "Original?", false};
    t.root = 1;
    const auto trace = solve("Original?", t, EngineConfig{}, runner);
    const auto& root = trace.record(1);
    ASSERT_EQ(root.branches.size(), 2u);
    EXPECT_TRUE(root.branches[0].failed());
    EXPECT_DOUBLE_EQ(root.branches[1].weight, 1.0);
    EXPECT_EQ(trace.answer, "r");
}

TEST(Solve, InvalidTreeIsStructureError)
{
    CallbackRunner runner([](const std::string&, const StrategyConfig& c) { return voted(c.kind, {"x"}); });
    auto t = two_leaf_tree("A?", "B?", "C #1 #3?");
    EXPECT_THROW(solve("Original?", t, EngineConfig{}, runner), StructureError);
}

TEST(Solve, MatchesExhaustiveEnumerationOnRandomTrees)
{
    std::mt19937 rng(31);
    CallbackRunner runner(testing_support::scripted_outcome);
    EngineConfig config;
    config.beam_size = 4;
    config.max_combinations = 1u << 20;
    for (int t = 0; t < 100; ++t) {
        const auto tree = testing_support::random_tree(rng);
        const auto trace = solve(tree.original_question, tree, config, runner);
        const auto expected = oracle::enumerate_root(tree, testing_support::scripted_votes, 3.0L);
        ASSERT_EQ(trace.root_candidates.size(), expected.size());
        for (const auto& c : trace.root_candidates.items) {
            EXPECT_NEAR(c.prob, static_cast<double>(expected.at(c.answer)), 1e-9);
        }
    }
}

TEST(Solve, GreedyEqualsBeamOfOneOnRandomTrees)
{
    std::mt19937 rng(77);
    CallbackRunner runner(testing_support::scripted_outcome);
    EngineConfig k1;
    k1.beam_size = 1;
    for (int t = 0; t < 50; ++t) {
        const auto tree = testing_support::random_tree(rng);
        const auto beam = solve(tree.original_question, tree, k1, runner);
        const auto greedy = solve_greedy(tree.original_question, tree, EngineConfig{}, runner);
        EXPECT_EQ(trace::trace_to_string(beam), trace::trace_to_string(greedy));
    }
}

TEST(Solve, ParallelStrategiesDoNotChangeTraces)
{
    GoldenWorld w;
    const auto tree = w.tree();
    EngineConfig parallel;
    parallel.parallel_strategies = true;
    EXPECT_EQ(trace::trace_to_string(solve(testing_support::golden_question, tree, parallel, w.runner)),
              trace::trace_to_string(solve(testing_support::golden_question, tree, EngineConfig{}, w.runner)));
}

TEST(EngineConfig, JsonAndValidation)
{
    EngineConfig c;
    c.beam_size = 3;
    c.strategies = {strategies::StrategyKind::wiki, strategies::StrategyKind::serp};
    c.mode = Mode::greedy;
    const auto back = EngineConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(back.effective_beam(), 1u);
    EXPECT_THROW(EngineConfig::from_json({{"beam_sise", 2}}), ConfigError);
    EXPECT_THROW(EngineConfig::from_json({{"beam_size", 0}}), ConfigError);
    EXPECT_THROW(EngineConfig::from_json({{"vote_temperature", -1.0}}), ConfigError);

    const auto configs = EngineConfig{}.strategy_configs();
    ASSERT_EQ(configs.size(), 4u);
    EXPECT_EQ(configs[2].retrieval_doc_count, 5);
    EXPECT_EQ(configs[3].retrieval_doc_count, 3);
}

TEST(Decomposer, ExtractsJsonAndRetries)
{
    EXPECT_EQ(extract_decomposition_json("Decompose: {\"A?\": [\"x?\"]} trailing"), "{\"A?\": [\"x?\"]}");

    class Scripted : public llm::Backend {
    public:
        std::vector<llm::Completion> complete_n(const llm::Prompt& p) override
        {
            prompts.push_back(p);
            std::vector<llm::Completion> out;
            for (int i = 0; i < p.n; ++i) {
                const bool good = p.temperature > 0 && i == 1;
                out.push_back({good ? R"( {"A?": ["x?", "y #1?"]})" : "not a mapping", llm::FinishReason::stop, {5, 1}});
            }
            return out;
        }
        std::vector<llm::Prompt> prompts;
    } backend;
    strategies::PromptLibrary prompts(std::map<std::string, std::string>{{"decompose", "Question: {question}\nDecompose:"}});
    const auto generator = make_llm_decomposer(backend, prompts, 3);
    llm::UsageLedger ledger;
    eval::QAInstance inst{"i1", "A?", {"y"}, "", std::nullopt, std::nullopt};
    const auto tree = generator(inst, &ledger);
    EXPECT_EQ(tree, qtree::parse_decomposition("A?", R"({"A?": ["x?", "y #1?"]})"));
    ASSERT_EQ(backend.prompts.size(), 2u);
    EXPECT_DOUBLE_EQ(backend.prompts[0].temperature, 0.0);
    EXPECT_EQ(backend.prompts[0].n, 1);
    EXPECT_EQ(backend.prompts[1].n, 2);
    EXPECT_GT(ledger.for_strategy("decompose").total(), 0u);
}

TEST(Decomposer, FallsBackToAtomic)
{
    class Useless : public llm::Backend {
        std::vector<llm::Completion> complete_n(const llm::Prompt& p) override
        {
            return std::vector<llm::Completion>(p.n, llm::Completion{"{}", llm::FinishReason::stop, {}});
        }
    } backend;
    strategies::PromptLibrary prompts(std::map<std::string, std::string>{{"decompose", "Question: {question}\nDecompose:"}});
    eval::QAInstance inst{"i1", "A?", {"y"}, "", std::nullopt, std::nullopt};
    EXPECT_EQ(make_llm_decomposer(backend, prompts, 3)(inst, nullptr), qtree::atomic_tree("A?"));
}

TEST(DecompositionCache, Loads)
{
    std::istringstream in(R"({"question": "A?", "decomposition": {"A?": ["x?", "y #1?"]}}
{"question": "B?", "decomposition": {"B?": ["B?"]}}
)");
    const auto cache = load_decomposition_cache(in);
    EXPECT_EQ(cache.size(), 2u);
    EXPECT_EQ(cache.at("A?").begin().key(), "A?");
    std::istringstream bad("{\"question\": 1}\n");
    EXPECT_THROW(load_decomposition_cache(bad), FormatError);
}

TEST(RunDataset, SkipsWithReasonsAndAccountsCost)
{
    CallbackRunner runner([](const std::string& q, const StrategyConfig& c) {
        if (q.rfind("Empty", 0) == 0) return voted(c.kind, {});
        return voted(c.kind, {"x"}, {3, 1});
    });
    const qtree::DecompositionMap doc = nlohmann::ordered_json::parse(R"({"Q1?": ["A?", "B #1?"]})");
    std::vector<eval::QAInstance> instances{
        {"a", "Q1?", {"x"}, "bridge", 2, doc},
        {"b", "No decomposition?", {"x"}, "", std::nullopt, std::nullopt},
        {"c", "Empty everywhere?", {"x"}, "", std::nullopt, qtree::DecompositionMap::parse(R"({"Empty everywhere?": ["Empty everywhere?"]})")},
        {"d", "Cached?", {"y"}, "", std::nullopt, std::nullopt},
    };
    DatasetRunOptions options;
    options.dataset_name = "toy";
    options.decomposition_cache["Cached?"] = nlohmann::ordered_json::parse(R"({"Cached?": ["Cached?"]})");
    EngineConfig config;
    config.workers = 3;
    const auto run = run_dataset(instances, config, runner, options);

    ASSERT_EQ(run.report.rows.size(), 2u);
    EXPECT_EQ(run.report.rows[0].id, "a");
    EXPECT_DOUBLE_EQ(run.report.rows[0].f1, 1.0);
    EXPECT_DOUBLE_EQ(run.report.rows[1].f1, 0.0);
    ASSERT_EQ(run.report.skipped.size(), 2u);
    EXPECT_EQ(run.report.skipped[0].id, "b");
    EXPECT_EQ(run.report.skipped[0].reason, "no decomposition available");
    EXPECT_NE(run.report.skipped[1].reason.find("no strategy produced an answer at node 0"), std::string::npos);
    EXPECT_EQ(run.traces.size(), 2u);
    EXPECT_EQ(run.predictions, (std::vector<std::pair<std::string, std::string>>{{"a", "x"}, {"d", "x"}}));

    // Two nodes × four strategies for "a", four strategies for "d".
    EXPECT_EQ(run.cost.total, (llm::TokenUsage{36, 12}));
    EXPECT_EQ(run.cost.instances, 4u);
    EXPECT_EQ(run.cost.solved, 2u);
    llm::TokenUsage by_strategy;
    for (const auto& [_, u] : run.cost.by_strategy) by_strategy += u;
    EXPECT_EQ(by_strategy, run.cost.total);
}

TEST(RunDataset, DuplicateIdsAreRejected)
{
    CallbackRunner runner([](const std::string&, const StrategyConfig& c) { return voted(c.kind, {"x"}); });
    std::vector<eval::QAInstance> instances{{"a", "Q?", {"x"}, "", std::nullopt, std::nullopt},
                                            {"a", "R?", {"x"}, "", std::nullopt, std::nullopt}};
    EXPECT_ANY_THROW(run_dataset(instances, EngineConfig{}, runner, {}));
}

TEST(RunDataset, WorkerCountDoesNotChangeResults)
{
    CallbackRunner runner(testing_support::scripted_outcome);
    std::mt19937 rng(5);
    std::vector<eval::QAInstance> instances;
    DatasetRunOptions options;
    for (int i = 0; i < 12; ++i) {
        const auto tree = testing_support::random_tree(rng, {2, 2, 0.3, 0.2});
        instances.push_back({"r" + std::to_string(i), tree.original_question, {"n0x1"}, "", std::nullopt, std::nullopt});
        options.decomposition_cache[tree.original_question] = qtree::to_decomposition(tree);
    }
    EngineConfig one, many;
    many.workers = 4;
    many.parallel_strategies = true;
    const auto a = run_dataset(instances, one, runner, options);
    const auto b = run_dataset(instances, many, runner, options);
    EXPECT_EQ(a.report.to_json(), b.report.to_json());
    ASSERT_EQ(a.traces.size(), b.traces.size());
    for (std::size_t i = 0; i < a.traces.size(); ++i) {
        EXPECT_EQ(trace::trace_to_string(a.traces[i]), trace::trace_to_string(b.traces[i]));
    }
}
