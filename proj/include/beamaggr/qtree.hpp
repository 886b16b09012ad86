#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace beamaggr::qtree {

using NodeId = int;

enum class NodeKind { atomic, composite };

std::string_view to_string(NodeKind kind) noexcept;

/// One question in a decomposition tree.
///
/// `question` is the text posed to the reasoning strategies. A placeholder
/// `#i` in it stands for the answer of `children[i-1]`. `origin` is the
/// decomposition-document key this node resolves (empty for plain steps), and
/// `annotated` marks nodes whose child order came from a trailing
/// "(#i, #j)" annotation rather than from placeholders in the body; for those
/// the children are stored in annotation order.
struct QuestionNode {
    NodeId id = 0;
    std::string question;
    std::vector<NodeId> children;
    NodeKind kind = NodeKind::atomic;
    std::string origin;
    bool annotated = false;

    bool operator==(const QuestionNode&) const = default;
};

struct QuestionTree {
    std::string original_question;
    std::map<NodeId, QuestionNode> nodes;
    NodeId root = 0;

    const QuestionNode& node(NodeId id) const;
    std::size_t size() const noexcept { return nodes.size(); }

    bool operator==(const QuestionTree&) const = default;
};

/// Composite question text → ordered sub-question texts.
using DecompositionMap = nlohmann::ordered_json;

struct Violation {
    NodeId node = -1;
    std::string rule;
    std::string detail;
};

using ValidationReport = std::vector<Violation>;

/// Parses a decomposition document (JSON text) into a tree.
///
/// Within one entry, `#j` in sub-question i refers to the answer of
/// sub-question j (j < i). The parser re-roots those references so that
/// every placeholder indexes the node's own children; an entry without an
/// annotation resolves to its last sub-question, an annotated entry becomes
/// a node posing the key text over the annotated sub-questions. Node ids are
/// assigned in post-order, so the root carries the largest id.
///
/// Throws SyntaxError on malformed JSON or wrong value types and
/// StructureError on cycles, dangling or forward placeholders, unreferenced
/// sub-questions, a missing or ambiguous root, or a root that does not match
/// `original_question`.
QuestionTree parse_decomposition(std::string_view original_question, std::string_view raw);
QuestionTree parse_decomposition(std::string_view original_question, const std::string& raw);
QuestionTree parse_decomposition(std::string_view original_question, const char* raw);
QuestionTree parse_decomposition(std::string_view original_question, const DecompositionMap& doc);

/// Inverse of parse_decomposition: renders the tree back into a mapping
/// document that parses to an equal tree.
DecompositionMap to_decomposition(const QuestionTree& tree);

/// Flat QDMR-style rendering ("Q1. ...", "Q2. When was #1 born?", ...) in
/// post-order, with placeholders renumbered to step indices.
std::vector<std::string> render_flat(const QuestionTree& tree);

ValidationReport validate(const QuestionTree& tree);

std::vector<NodeId> post_order(const QuestionTree& tree);

/// Placeholder indices appearing in `question`, in order of appearance.
std::vector<int> placeholders(std::string_view question);

/// Replaces every `#i` with combo[i-1]; throws MissingAnswerError when an
/// index exceeds the combination length.
std::string mask_fill(std::string_view question, const std::vector<std::string>& combo);

/// Text to fill for `node`: its question, followed for annotated nodes by
/// " (#1, #2, ...)" so the children's answers reach the posed question.
std::string posed_template(const QuestionNode& node);

/// Strips a trailing "(#i, #j, ...)" annotation; returns the indices found.
std::optional<std::vector<int>> strip_annotation(std::string& question);

/// A tree with a single atomic node holding `question`.
QuestionTree atomic_tree(std::string_view question);

/// Produces a raw decomposition document for attempt `attempt` (0-based).
using DecompositionGenerator = std::function<std::string(int attempt)>;

/// First structurally valid tree within `max_retries` attempts, else an
/// atomic tree over the original question.
QuestionTree regenerate_or_fallback(std::string_view original_question,
                                    const DecompositionGenerator& generator,
                                    int max_retries);

nlohmann::json to_json(const QuestionTree& tree);
QuestionTree tree_from_json(const nlohmann::json& j);

} // namespace beamaggr::qtree
