#include <gtest/gtest.h>

#include <random>

#include "beamaggr/errors.hpp"
#include "beamaggr/fixture_script.hpp"
#include "beamaggr/strategies.hpp"
#include "support/golden.hpp"

using namespace beamaggr;
using namespace beamaggr::strategies;
using nlohmann::json;

namespace {

using testing_support::data_dir;
using testing_support::GoldenWorld;
const std::string q1 = testing_support::golden_q1;

/// Backend that answers every prompt with fixed completions.
class FixedBackend : public llm::Backend {
public:
    explicit FixedBackend(std::vector<llm::Completion> out) : out_(std::move(out)) {}
    std::vector<llm::Completion> complete_n(const llm::Prompt& prompt) override
    {
        prompts.push_back(prompt);
        std::vector<llm::Completion> r;
        for (int i = 0; i < prompt.n; ++i) r.push_back(out_[std::min<std::size_t>(i, out_.size() - 1)]);
        return r;
    }
    std::vector<llm::Prompt> prompts;

private:
    std::vector<llm::Completion> out_;
};

StrategyOutcome voted(StrategyKind kind, const std::vector<std::string>& answers)
{
    StrategyOutcome o;
    o.kind = kind;
    o.extracted = answers;
    o.raw_completions = answers;
    o.table = beam::vote(answers);
    return o;
}

} // namespace

TEST(ExtractAnswer, Examples)
{
    EXPECT_EQ(extract_answer("Miguel Morayta died on 19 June 2013. So the answer is **19 June 2013**."), "19 June 2013");
    EXPECT_EQ(extract_answer("I cannot determine this."), std::nullopt);
    EXPECT_EQ(extract_answer("So the answer is **no**."), "no");
}

TEST(ExtractAnswer, Variants)
{
    EXPECT_EQ(extract_answer("So the answer is Paris. Extra words"), "Paris");
    EXPECT_EQ(extract_answer("THE ANSWER IS **A**, though the answer is **B** and **C**."), "C");
    EXPECT_EQ(extract_answer("So the answer is Unknown."), std::nullopt);
    EXPECT_EQ(extract_answer("So the answer is **unknown**."), std::nullopt);
    EXPECT_EQ(extract_answer("So the answer is"), std::nullopt);
    EXPECT_EQ(extract_answer("So the answer is **U.S. Navy**."), "U.S. Navy");
}

TEST(StrategyKindNames, RoundTrip)
{
    for (auto k : all_strategies) EXPECT_EQ(strategy_from_string(to_string(k)), k);
    EXPECT_THROW(strategy_from_string("oracle"), ConfigError);
    EXPECT_EQ(default_config(StrategyKind::closebook).retrieval_doc_count, 0);
    EXPECT_EQ(default_config(StrategyKind::parametric).retrieval_doc_count, 0);
    EXPECT_EQ(default_config(StrategyKind::wiki).retrieval_doc_count, 5);
    EXPECT_EQ(default_config(StrategyKind::serp).retrieval_doc_count, 3);
    EXPECT_EQ(default_config(StrategyKind::serp).samples, 5);
    EXPECT_DOUBLE_EQ(default_config(StrategyKind::serp).sample_temperature, 0.7);
}

TEST(PromptLibrary, RenderIsSinglePass)
{
    PromptLibrary lib(std::map<std::string, std::string>{{"t", "C: {context}\nQuestion: {question}\nAnswer:"}});
    EXPECT_EQ(lib.render("t", "what is {context}?", "ctx"), "C: ctx\nQuestion: what is {context}?\nAnswer:");
    EXPECT_THROW(lib.get("missing"), ConfigError);
}

TEST(PromptLibrary, BundledTemplatesEndWithQuestionSlot)
{
    const auto lib = PromptLibrary::load(data_dir / "prompts");
    for (const char* id : {"decompose", "closebook", "knowledge", "parametric", "wiki", "serp"}) {
        ASSERT_TRUE(lib.contains(id)) << id;
        EXPECT_NE(lib.get(id).find("Question: {question}"), std::string::npos) << id;
    }
    for (const char* id : {"parametric", "wiki", "serp"}) {
        EXPECT_NE(lib.get(id).find("{context}"), std::string::npos) << id;
    }
}

TEST(ContextFormatting, Shapes)
{
    EXPECT_EQ(format_parametric_context("Cologne is big."), "#1 Document:\nCologne is big.");
    const std::vector<retrieval::SearchResult> local{{"Cologne", "City on the Rhine.", 1},
                                                     {"Darmstadt", "City in Hesse.", 2}};
    EXPECT_EQ(format_wiki_context(local),
              "#1 Wikipedia Title: Cologne\nText: City on the Rhine.\n#2 Wikipedia Title: Darmstadt\nText: City in Hesse.");
    const auto serp = format_serp_context(retrieval::parse_serp(
        json{{"answerBox", {{"title", "Box"}, {"answer", "Darmstadt"}}},
             {"organic", {{{"title", "A"}, {"snippet", "sa"}}}}}));
    EXPECT_LT(serp.find("sa"), serp.find("Darmstadt"));
}

TEST(RunStrategy, GoldenFirstHopTables)
{
    GoldenWorld w;
    const auto closebook = w.runner.run(q1, default_config(StrategyKind::closebook));
    EXPECT_EQ(closebook.table.counts(), (std::map<std::string, int>{{"cologne", 2}, {"frankfurt", 3}}));
    EXPECT_EQ(closebook.raw_completions.size(), 5u);
    const auto serp = w.runner.run(q1, default_config(StrategyKind::serp));
    EXPECT_EQ(serp.table.counts(), (std::map<std::string, int>{{"darmstadt", 5}}));
    EXPECT_NE(serp.context.find("Darmstadt"), std::string::npos);
    const auto parametric = w.runner.run(q1, default_config(StrategyKind::parametric));
    EXPECT_EQ(parametric.table.counts(), (std::map<std::string, int>{{"cologne", 5}}));
    EXPECT_EQ(parametric.context.rfind("#1 Document:\n", 0), 0u);
    EXPECT_NE(parametric.context.find("fourth-most populous"), std::string::npos);
    const auto wiki = w.runner.run(q1, default_config(StrategyKind::wiki));
    EXPECT_EQ(wiki.table.counts(), (std::map<std::string, int>{{"regensburg", 3}}));
    EXPECT_GT(wiki.usage.total(), 0u);
}

TEST(RunStrategy, GoldenMultiSourceAggregation)
{
    GoldenWorld w;
    for (bool parallel : {false, true}) {
        const auto r = answer_question_multisource(q1, w.configs(), w.runner, 3.0, 2, parallel);
        ASSERT_EQ(r.candidates.size(), 2u);
        EXPECT_EQ(r.candidates.items[0].surface, "Cologne");
        EXPECT_NEAR(r.candidates.items[0].prob, 0.6607, 1e-3);
        EXPECT_EQ(r.candidates.items[1].surface, "Darmstadt");
        EXPECT_NEAR(r.candidates.items[1].prob, 0.3392, 1e-3);
        EXPECT_EQ(r.voters("cologne"), (std::vector<StrategyKind>{StrategyKind::closebook, StrategyKind::parametric}));
        EXPECT_EQ(r.distribution.size(), 4u);
    }
}

TEST(RunStrategy, MissingFixtureSurfaces)
{
    GoldenWorld w;
    EXPECT_THROW(w.runner.run("A question nobody recorded?", default_config(StrategyKind::closebook)),
                 FixtureMissError);
}

TEST(RunStrategy, AllRefusedGivesEmptyTable)
{
    FixedBackend backend({{"", llm::FinishReason::content_filter, {3, 0}}});
    PromptLibrary lib(std::map<std::string, std::string>{{"closebook", "Question: {question}\nAnswer:"}});
    LlmStrategyRunner runner(backend, lib, {});
    const auto o = runner.run("q?", default_config(StrategyKind::closebook));
    EXPECT_TRUE(o.table.empty());
    EXPECT_TRUE(o.extracted.empty());
    EXPECT_EQ(o.raw_completions.size(), 5u);
    EXPECT_EQ(o.usage.prompt_tokens, 15u);
}

TEST(RunStrategy, RefusedKnowledgeEmptiesParametric)
{
    FixedBackend backend({{"So the answer is **X**.", llm::FinishReason::content_filter, {}}});
    PromptLibrary lib(std::map<std::string, std::string>{{"knowledge", "Question: {question}\nKnowledge:"},
                       {"parametric", "{context}\nQuestion: {question}\nAnswer:"}});
    LlmStrategyRunner runner(backend, lib, {});
    const auto o = runner.run("q?", default_config(StrategyKind::parametric));
    EXPECT_TRUE(o.table.empty());
    EXPECT_EQ(backend.prompts.size(), 1u);
}

TEST(RunStrategy, EmptyKnowledgeStillRunsParametric)
{
    FixedBackend backend({{"", llm::FinishReason::stop, {}}});
    PromptLibrary lib(std::map<std::string, std::string>{{"knowledge", "Question: {question}\nKnowledge:"},
                       {"parametric", "{context}\nQuestion: {question}\nAnswer:"}});
    LlmStrategyRunner runner(backend, lib, {});
    const auto o = runner.run("q?", default_config(StrategyKind::parametric));
    ASSERT_EQ(backend.prompts.size(), 2u);
    EXPECT_DOUBLE_EQ(backend.prompts[0].temperature, 0.0);
    EXPECT_EQ(backend.prompts[0].n, 1);
    EXPECT_EQ(backend.prompts[1].text, "#1 Document:\n\nQuestion: q?\nAnswer:");
    EXPECT_TRUE(o.table.empty());
}

TEST(RunStrategy, RetrievalStrategiesNeedSources)
{
    FixedBackend backend({{"So the answer is **X**.", llm::FinishReason::stop, {}}});
    PromptLibrary lib(std::map<std::string, std::string>{{"wiki", "{context}\nQuestion: {question}"},
                                                         {"serp", "{context}\nQuestion: {question}"}});
    LlmStrategyRunner runner(backend, lib, {});
    EXPECT_THROW(runner.run("q?", default_config(StrategyKind::wiki)), ConfigError);
    EXPECT_THROW(runner.run("q?", default_config(StrategyKind::serp)), ConfigError);
}

TEST(RunStrategy, BackendErrorsCarryStrategyName)
{
    class Failing : public llm::Backend {
        std::vector<llm::Completion> complete_n(const llm::Prompt&) override { throw BackendError("boom"); }
    } backend;
    PromptLibrary lib(std::map<std::string, std::string>{{"closebook", "Question: {question}"}});
    LlmStrategyRunner runner(backend, lib, {});
    try {
        runner.run("q?", default_config(StrategyKind::closebook));
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_EQ(std::string(e.what()).rfind("closebook: ", 0), 0u);
    }
}

TEST(MakeOutcome, SkipsRefusalsButKeepsTruncated)
{
    const auto o = make_outcome(StrategyKind::serp, {{"So the answer is **A**.", llm::FinishReason::stop, {1, 1}},
                                                     {"So the answer is **B**.", llm::FinishReason::content_filter, {}},
                                                     {"So the answer is **A", llm::FinishReason::length, {0, 2}},
                                                     {"rambling", llm::FinishReason::length, {}}});
    EXPECT_EQ(o.raw_completions.size(), 4u);
    EXPECT_LE(o.extracted.size(), o.raw_completions.size());
    EXPECT_EQ(o.table, beam::vote(o.extracted));
    EXPECT_EQ(o.table.count("b"), 0);
    EXPECT_EQ(o.usage, (llm::TokenUsage{1, 3}));
}

TEST(Aggregate, SingleStrategySingleSample)
{
    CallbackRunner runner([](const std::string&, const StrategyConfig& c) { return voted(c.kind, {"X"}); });
    const auto r = answer_question_multisource("q", {default_config(StrategyKind::closebook)}, runner, 3.0, 2);
    ASSERT_EQ(r.candidates.size(), 1u);
    EXPECT_EQ(r.candidates.items[0].answer, "x");
    EXPECT_DOUBLE_EQ(r.candidates.items[0].prob, 1.0);
}

TEST(Aggregate, SymmetricVotes)
{
    CallbackRunner runner([](const std::string&, const StrategyConfig& c) {
        return voted(c.kind, {c.kind == StrategyKind::closebook ? "a" : "b"});
    });
    const auto r = answer_question_multisource(
        "q", {default_config(StrategyKind::closebook), default_config(StrategyKind::serp)}, runner, 3.0, 2);
    ASSERT_EQ(r.candidates.size(), 2u);
    EXPECT_EQ(r.candidates.items[0].answer, "a");
    EXPECT_DOUBLE_EQ(r.candidates.items[0].prob, 0.5);
    EXPECT_DOUBLE_EQ(r.candidates.items[1].prob, 0.5);
}

TEST(Aggregate, AllSourcesEmpty)
{
    CallbackRunner runner([](const std::string&, const StrategyConfig& c) { return voted(c.kind, {}); });
    EXPECT_THROW(answer_question_multisource("q", {default_config(StrategyKind::wiki)}, runner, 3.0, 2),
                 AllSourcesEmptyError);
}

TEST(Aggregate, ConfigListValidation)
{
    CallbackRunner runner([](const std::string&, const StrategyConfig& c) { return voted(c.kind, {"x"}); });
    EXPECT_THROW(run_strategies("q", {}, runner), ConfigError);
    EXPECT_THROW(run_strategies("q", {default_config(StrategyKind::wiki), default_config(StrategyKind::wiki)}, runner),
                 ConfigError);
    const auto out = run_strategies("q", {default_config(StrategyKind::serp), default_config(StrategyKind::closebook)},
                                    runner);
    EXPECT_EQ(out[0].kind, StrategyKind::closebook);
    EXPECT_EQ(out[1].kind, StrategyKind::serp);
}

TEST(StrategyProperties, TableIndependentOfSampleOrder)
{
    std::mt19937 rng(12);
    const std::vector<std::string> texts{"So the answer is **Paris**.", "So the answer is **paris**.",
                                         "So the answer is Lyon.", "no idea", "So the answer is **Unknown**."};
    for (int t = 0; t < 200; ++t) {
        std::vector<llm::Completion> cs;
        for (int i = 0; i < 6; ++i) cs.push_back({texts[rng() % texts.size()], llm::FinishReason::stop, {}});
        auto shuffled = cs;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        EXPECT_EQ(make_outcome(StrategyKind::wiki, cs).table, make_outcome(StrategyKind::wiki, shuffled).table);
    }
}

TEST(OutcomeJson, RoundTrip)
{
    auto o = make_outcome(StrategyKind::serp, {{"So the answer is **A**.", llm::FinishReason::stop, {4, 2}},
                                               {"", llm::FinishReason::content_filter, {}}});
    o.context = "ctx";
    EXPECT_EQ(outcome_from_json(to_json(o)), o);
}

TEST(ScriptedBackend, RendersSamplesAndRecognisesTemplates)
{
    const auto prompts = PromptLibrary::load(data_dir / "prompts");
    const auto script = fixtures::Script::parse(json{
        {"questions",
         {{"Q?",
           {{"knowledge", "Background."},
            {"closebook", {"Alpha", "Unknown", {{"answer", "Beta"}, {"rationale", "Because."}},
                           {{"text", "cut off"}, {"finish_reason", "length"}}}}}}}}});
    fixtures::ScriptedBackend backend(script, prompts);
    EXPECT_EQ(backend.template_of(prompts.render("closebook", "Q?")), "closebook");
    EXPECT_EQ(backend.template_of(prompts.render("knowledge", "Q?")), "knowledge");
    EXPECT_EQ(fixtures::prompt_question(prompts.render("closebook", "Q?")), "Q?");

    const auto out = backend.complete_n({prompts.render("closebook", "Q?"), 0.7, 4});
    EXPECT_EQ(out[0].text, "So the answer is **Alpha**.");
    EXPECT_EQ(out[1].text, "So the answer is Unknown.");
    EXPECT_EQ(out[2].text, "Because. So the answer is **Beta**.");
    EXPECT_EQ(out[3].finish_reason, llm::FinishReason::length);
    EXPECT_EQ(backend.complete_n({prompts.render("knowledge", "Q?"), 0.0, 1})[0].text, "Background.");
    EXPECT_THROW(backend.complete_n({prompts.render("closebook", "Other?"), 0.7, 1}), BackendError);
}
