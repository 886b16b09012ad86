#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "beamaggr/llmio.hpp"
#include "beamaggr/retrieval.hpp"
#include "beamaggr/strategies.hpp"

// Scripted stand-ins for the model and the search engine, used to author
// replay fixtures offline.
//
// A script is a JSON document:
//
//   {"questions": {"<question>": {
//        "knowledge": "<background paragraph>",
//        "decomposition": {...},
//        "closebook":  [<sample>, ...],
//        "parametric": [<sample>, ...],
//        "wiki":       [<sample>, ...],
//        "serp":       [<sample>, ...],
//        "serp_response": {"answerBox": {...}, "organic": [...]}}}}
//
// A sample is an answer string ("Unknown" for an abstention), an object
// {"answer", "rationale"}, or a verbatim completion {"text", "finish_reason"}.
// Missing sample lists abstain.
namespace beamaggr::fixtures {

struct Script {
    nlohmann::json questions = nlohmann::json::object();

    static Script load(const std::filesystem::path& path);
    static Script parse(const nlohmann::json& doc);

    /// Entry for `question`, or nullptr.
    const nlohmann::json* find(const std::string& question) const;
};

/// Completion text for one scripted sample.
llm::Completion render_sample(const nlohmann::json& sample);

/// Question text of a rendered prompt: the remainder of its last "Question: " line.
std::string prompt_question(std::string_view prompt);

/// Serves scripted completions. The prompt template is recognised by its
/// fixed prefix, the question by the last "Question: " line. Unknown
/// questions raise BackendError. Usage is approximated from the text.
class ScriptedBackend : public llm::Backend {
public:
    ScriptedBackend(const Script& script, const strategies::PromptLibrary& prompts);
    std::vector<llm::Completion> complete_n(const llm::Prompt& prompt) override;

    /// Template id whose fixed prefix the prompt starts with (longest match).
    std::optional<std::string> template_of(std::string_view prompt) const;

private:
    const Script& script_;
    std::vector<std::pair<std::string, std::string>> prefixes_;  // (id, prefix), longest first
};

/// Serves the scripted "serp_response" of each question (an empty result
/// page when absent); unknown queries raise ProviderError.
class ScriptedSerpProvider : public retrieval::SerpProvider {
public:
    explicit ScriptedSerpProvider(const Script& script) : script_(script) {}
    nlohmann::json raw_results(const std::string& query) override;

private:
    const Script& script_;
};

} // namespace beamaggr::fixtures
