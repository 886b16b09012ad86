#include "beamaggr/qtree.hpp"

#include <algorithm>
#include <regex>
#include <set>

#include "beamaggr/errors.hpp"
#include "beamaggr/text.hpp"

namespace beamaggr::qtree {

namespace {

constexpr int max_placeholder = 9;

bool is_digit(char c) noexcept { return c >= '0' && c <= '9'; }

// Calls on_text for literal runs and on_index for each "#<digits>" token.
template <typename OnText, typename OnIndex>
void scan_placeholders(std::string_view q, OnText on_text, OnIndex on_index)
{
    std::size_t i = 0;
    std::size_t literal_start = 0;
    while (i < q.size()) {
        if (q[i] == '#' && i + 1 < q.size() && is_digit(q[i + 1])) {
            on_text(q.substr(literal_start, i - literal_start));
            std::size_t j = i + 1;
            int value = 0;
            while (j < q.size() && is_digit(q[j])) {
                value = std::min(value * 10 + (q[j] - '0'), 1'000'000);
                ++j;
            }
            on_index(value);
            i = j;
            literal_start = j;
        } else {
            ++i;
        }
    }
    on_text(q.substr(literal_start));
}

// "#r" → "#<mapping(r)>"
template <typename Mapping>
std::string renumber(std::string_view q, Mapping mapping)
{
    std::string out;
    scan_placeholders(
        q, [&](std::string_view lit) { out.append(lit); },
        [&](int idx) { out += "#" + std::to_string(mapping(idx)); });
    return out;
}

std::string annotation_suffix(const std::vector<int>& indices)
{
    std::string out = " (";
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (i) out += ", ";
        out += "#" + std::to_string(indices[i]);
    }
    return out + ")";
}

std::string normalized(std::string text)
{
    strip_annotation(text);
    return text::collapse_whitespace(text);
}

struct Draft {
    std::string question;
    std::vector<Draft> children;
    std::string origin;
    bool annotated = false;
};

class Builder {
public:
    explicit Builder(const DecompositionMap& doc) : doc_(doc)
    {
        if (!doc.is_object()) throw SyntaxError("decomposition document must be a JSON object");
        for (const auto& [key, value] : doc.items()) {
            if (!value.is_array()) {
                throw SyntaxError("entry \"" + key + "\" must map to an array of questions");
            }
            for (const auto& item : value) {
                if (!item.is_string()) {
                    throw SyntaxError("entry \"" + key + "\" contains a non-string sub-question");
                }
            }
            auto [it, inserted] = by_text_.emplace(normalized(key), key);
            if (!inserted) throw StructureError("duplicate entry for \"" + key + "\"");
        }
    }

    std::string find_root(std::string_view original_question) const
    {
        std::set<std::string> referenced;
        for (const auto& [key, value] : doc_.items()) {
            const auto self = normalized(key);
            for (const auto& item : value) {
                auto text = normalized(item.get<std::string>());
                if (text != self) referenced.insert(std::move(text));
            }
        }
        std::vector<std::string> roots;
        for (const auto& [text, key] : by_text_) {
            if (!referenced.count(text)) roots.push_back(key);
        }
        if (roots.empty()) throw StructureError("cycle: every entry is referenced by another entry");
        if (roots.size() > 1) {
            throw StructureError("multiple root entries (\"" + roots[0] + "\", \"" + roots[1] + "\")");
        }
        if (normalized(roots[0]) != normalized(std::string(original_question))) {
            throw StructureError("root entry \"" + roots[0] + "\" does not match the question");
        }
        return roots[0];
    }

    Draft build(const std::string& key)
    {
        if (visiting_.count(key)) throw StructureError("cycle through \"" + key + "\"");
        const auto& list = doc_.at(key);
        if (list.empty()) throw StructureError("entry \"" + key + "\" has no sub-questions");

        std::string key_text = key;
        const auto annotation = strip_annotation(key_text);
        key_text = text::collapse_whitespace(key_text);

        if (list.size() == 1 && normalized(list[0].get<std::string>()) == key_text) {
            // {"Q": ["Q"]}: the question is answered directly.
            if (annotation) throw StructureError("self-answered entry cannot carry an annotation");
            visited_.insert(key);
            return Draft{key_text, {}, key_text, false};
        }

        visiting_.insert(key);
        std::vector<Draft> steps;
        std::vector<int> uses;
        for (std::size_t i = 0; i < list.size(); ++i) {
            std::string step = list[i].get<std::string>();
            const auto step_annotation = strip_annotation(step);
            step = text::collapse_whitespace(step);
            std::vector<int> refs;
            if (step_annotation) {
                if (!placeholders(step).empty()) {
                    throw StructureError("sub-question \"" + step +
                                         "\" has both placeholders and an annotation");
                }
                refs = *step_annotation;
            } else {
                refs = placeholders(step);
                std::sort(refs.begin(), refs.end());
                refs.erase(std::unique(refs.begin(), refs.end()), refs.end());
            }
            for (int r : refs) {
                if (r > max_placeholder) {
                    throw StructureError("placeholder #" + std::to_string(r) + " exceeds #" +
                                         std::to_string(max_placeholder));
                }
                if (r < 1 || r > static_cast<int>(i)) {
                    throw StructureError("placeholder #" + std::to_string(r) + " in \"" + step +
                                         "\" does not refer to an earlier sub-question");
                }
            }

            Draft draft;
            // A step restating its own entry (typically the annotated
            // comparison step) is posed directly rather than looked up.
            if (auto it = by_text_.find(step); it != by_text_.end() && step != key_text) {
                if (!refs.empty()) {
                    throw StructureError("decomposed sub-question \"" + step +
                                         "\" cannot reference its siblings");
                }
                draft = build(it->second);
            } else {
                draft.question = renumber(step, [&](int r) {
                    return static_cast<int>(std::find(refs.begin(), refs.end(), r) - refs.begin()) + 1;
                });
                draft.annotated = step_annotation.has_value();
                for (int r : refs) {
                    draft.children.push_back(steps[r - 1]);
                    ++uses[r - 1];
                }
            }
            steps.push_back(std::move(draft));
            uses.push_back(0);
        }

        Draft result;
        if (annotation) {
            for (int a : *annotation) {
                if (a < 1 || a > static_cast<int>(steps.size())) {
                    throw StructureError("annotation #" + std::to_string(a) + " on \"" + key +
                                         "\" is out of range");
                }
                result.children.push_back(steps[a - 1]);
                ++uses[a - 1];
            }
            result.question = key_text;
            result.annotated = true;
        } else {
            if (!steps.back().origin.empty()) {
                throw StructureError("final sub-question of \"" + key_text +
                                     "\" cannot itself be decomposed");
            }
            ++uses.back();
            result = steps.back();
        }
        for (std::size_t i = 0; i < uses.size(); ++i) {
            if (uses[i] == 0) {
                throw StructureError("sub-question #" + std::to_string(i + 1) + " of \"" + key_text +
                                     "\" is never referenced");
            }
        }
        result.origin = key_text;
        visiting_.erase(key);
        visited_.insert(key);
        return result;
    }

    void check_all_reached() const
    {
        for (const auto& [key, value] : doc_.items()) {
            if (!visited_.count(key)) {
                throw StructureError("cycle: entry \"" + key + "\" is unreachable from the root");
            }
        }
    }

private:
    const DecompositionMap& doc_;
    std::map<std::string, std::string> by_text_;
    std::set<std::string> visiting_;
    std::set<std::string> visited_;
};

NodeId assign_ids(Draft& draft, QuestionTree& tree, NodeId& next)
{
    QuestionNode node;
    for (auto& child : draft.children) node.children.push_back(assign_ids(child, tree, next));
    node.id = next++;
    node.question = std::move(draft.question);
    node.kind = node.children.empty() ? NodeKind::atomic : NodeKind::composite;
    node.origin = std::move(draft.origin);
    node.annotated = draft.annotated;
    const NodeId id = node.id;
    tree.nodes.emplace(id, std::move(node));
    return id;
}

// Renders nodes as ordered steps; `keyed` controls whether nodes with an
// origin become separate mapping entries.
class Flattener {
public:
    Flattener(const QuestionTree& tree, bool keyed) : tree_(tree), keyed_(keyed) {}

    int step(NodeId id, std::vector<std::string>& steps)
    {
        const auto& node = tree_.node(id);
        if (keyed_ && !node.origin.empty()) {
            entry(id);
            steps.push_back(node.origin);
        } else {
            steps.push_back(plain(id, steps));
        }
        return static_cast<int>(steps.size());
    }

    std::string entry(NodeId id)
    {
        const auto& node = tree_.node(id);
        const std::string origin = node.origin.empty() ? tree_.original_question : node.origin;
        std::vector<std::string> steps;
        std::string key = origin;
        if (node.annotated) {
            std::vector<int> indices;
            for (NodeId c : node.children) indices.push_back(step(c, steps));
            key += annotation_suffix(indices);
        } else if (node.kind == NodeKind::atomic && node.question == origin) {
            steps.push_back(origin);
        } else {
            steps.push_back(plain(id, steps));
        }
        entries_.emplace_back(key, std::move(steps));
        return key;
    }

    std::string plain(NodeId id, std::vector<std::string>& steps)
    {
        const auto& node = tree_.node(id);
        std::vector<int> indices;
        for (NodeId c : node.children) indices.push_back(step(c, steps));
        if (node.annotated) return node.question + annotation_suffix(indices);
        return renumber(node.question, [&](int i) {
            return i >= 1 && i <= static_cast<int>(indices.size()) ? indices[i - 1] : i;
        });
    }

    std::vector<std::pair<std::string, std::vector<std::string>>>& entries() { return entries_; }

private:
    const QuestionTree& tree_;
    bool keyed_;
    std::vector<std::pair<std::string, std::vector<std::string>>> entries_;
};

} // namespace

std::string_view to_string(NodeKind kind) noexcept
{
    return kind == NodeKind::atomic ? "atomic" : "composite";
}

const QuestionNode& QuestionTree::node(NodeId id) const
{
    auto it = nodes.find(id);
    if (it == nodes.end()) throw StructureError("unknown node id " + std::to_string(id));
    return it->second;
}

std::vector<int> placeholders(std::string_view question)
{
    std::vector<int> out;
    scan_placeholders(question, [](std::string_view) {}, [&](int idx) { out.push_back(idx); });
    return out;
}

std::string mask_fill(std::string_view question, const std::vector<std::string>& combo)
{
    std::string out;
    scan_placeholders(
        question, [&](std::string_view lit) { out.append(lit); },
        [&](int idx) {
            if (idx < 1 || idx > static_cast<int>(combo.size())) {
                throw MissingAnswerError("no answer for placeholder #" + std::to_string(idx) + " in \"" +
                                         std::string(question) + "\"");
            }
            out += combo[idx - 1];
        });
    return out;
}

std::string posed_template(const QuestionNode& node)
{
    if (!node.annotated || node.children.empty()) return node.question;
    std::vector<int> indices(node.children.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i) + 1;
    return node.question + annotation_suffix(indices);
}

std::optional<std::vector<int>> strip_annotation(std::string& question)
{
    static const std::regex pattern(R"(\s*\(\s*(#\d+(?:\s*,\s*#\d+)*)\s*\)\s*$)");
    std::smatch m;
    if (!std::regex_search(question, m, pattern)) return std::nullopt;
    std::vector<int> indices;
    static const std::regex index_pattern(R"(#(\d+))");
    const std::string body = m[1].str();
    for (auto it = std::sregex_iterator(body.begin(), body.end(), index_pattern);
         it != std::sregex_iterator(); ++it) {
        indices.push_back(std::stoi((*it)[1].str()));
    }
    question.erase(static_cast<std::size_t>(m.position(0)));
    return indices;
}

QuestionTree parse_decomposition(std::string_view original_question, std::string_view raw)
{
    DecompositionMap doc;
    try {
        doc = DecompositionMap::parse(raw);
    } catch (const nlohmann::json::parse_error& e) {
        throw SyntaxError(std::string("malformed decomposition document: ") + e.what());
    }
    return parse_decomposition(original_question, doc);
}

QuestionTree parse_decomposition(std::string_view original_question, const std::string& raw)
{
    return parse_decomposition(original_question, std::string_view(raw));
}

QuestionTree parse_decomposition(std::string_view original_question, const char* raw)
{
    return parse_decomposition(original_question, std::string_view(raw));
}

QuestionTree parse_decomposition(std::string_view original_question, const DecompositionMap& doc)
{
    Builder builder(doc);
    const std::string root_key = builder.find_root(original_question);
    Draft draft = builder.build(root_key);
    builder.check_all_reached();

    QuestionTree tree;
    tree.original_question = text::collapse_whitespace(original_question);
    NodeId next = 0;
    tree.root = assign_ids(draft, tree, next);

    if (auto report = validate(tree); !report.empty()) {
        throw StructureError("node " + std::to_string(report.front().node) + ": " + report.front().rule +
                             " (" + report.front().detail + ")");
    }
    return tree;
}

DecompositionMap to_decomposition(const QuestionTree& tree)
{
    Flattener flattener(tree, true);
    flattener.entry(tree.root);
    DecompositionMap doc = DecompositionMap::object();
    // The root entry is emitted last by the recursion; put it first.
    auto& entries = flattener.entries();
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) doc[it->first] = it->second;
    return doc;
}

std::vector<std::string> render_flat(const QuestionTree& tree)
{
    Flattener flattener(tree, false);
    std::vector<std::string> steps;
    flattener.step(tree.root, steps);
    for (std::size_t i = 0; i < steps.size(); ++i) steps[i] = "Q" + std::to_string(i + 1) + ". " + steps[i];
    return steps;
}

ValidationReport validate(const QuestionTree& tree)
{
    ValidationReport report;
    if (!tree.nodes.count(tree.root)) {
        report.push_back({tree.root, "missing root", "root id is not a node"});
        return report;
    }

    std::map<NodeId, int> parents;
    for (const auto& [id, node] : tree.nodes) {
        if (node.id != id) report.push_back({id, "id mismatch", "node stores id " + std::to_string(node.id)});
        const bool atomic = node.kind == NodeKind::atomic;
        if (atomic != node.children.empty()) {
            report.push_back({id, "kind mismatch",
                              atomic ? "atomic node has children" : "composite node has no children"});
        }
        std::set<NodeId> seen;
        for (NodeId c : node.children) {
            if (!tree.nodes.count(c)) {
                report.push_back({id, "dangling child", "child " + std::to_string(c) + " does not exist"});
            }
            if (!seen.insert(c).second) {
                report.push_back({id, "duplicate child", "child " + std::to_string(c) + " listed twice"});
            }
            ++parents[c];
        }
        const auto indices = placeholders(node.question);
        std::set<int> used;
        for (int i : indices) {
            if (i > max_placeholder) {
                report.push_back({id, "placeholder out of range",
                                  "#" + std::to_string(i) + " exceeds #" + std::to_string(max_placeholder)});
            } else if (i < 1 || i > static_cast<int>(node.children.size())) {
                report.push_back({id, "placeholder out of range",
                                  "#" + std::to_string(i) + " with " + std::to_string(node.children.size()) +
                                      " children"});
            }
            used.insert(i);
        }
        if (!node.annotated) {
            for (std::size_t c = 1; c <= node.children.size(); ++c) {
                if (!used.count(static_cast<int>(c))) {
                    report.push_back({id, "unreferenced child", "no placeholder #" + std::to_string(c)});
                }
            }
        }
    }
    for (const auto& [child, count] : parents) {
        if (count > 1) report.push_back({child, "multiple parents", std::to_string(count) + " parents"});
        if (child == tree.root) report.push_back({child, "cycle", "root is a child of another node"});
    }

    // Reachability and cycles via iterative DFS colouring.
    enum class Colour { white, grey, black };
    std::map<NodeId, Colour> colour;
    for (const auto& [id, _] : tree.nodes) colour[id] = Colour::white;
    std::vector<std::pair<NodeId, std::size_t>> stack{{tree.root, 0}};
    colour[tree.root] = Colour::grey;
    while (!stack.empty()) {
        auto& [id, next_child] = stack.back();
        const auto& children = tree.nodes.at(id).children;
        if (next_child == children.size()) {
            colour[id] = Colour::black;
            stack.pop_back();
            continue;
        }
        const NodeId c = children[next_child++];
        auto it = colour.find(c);
        if (it == colour.end()) continue;
        if (it->second == Colour::grey) {
            report.push_back({c, "cycle", "node " + std::to_string(c) + " is its own ancestor"});
        } else if (it->second == Colour::white) {
            it->second = Colour::grey;
            stack.emplace_back(c, 0);
        }
    }
    for (const auto& [id, c] : colour) {
        if (c == Colour::white) report.push_back({id, "unreachable", "not reachable from the root"});
    }
    return report;
}

std::vector<NodeId> post_order(const QuestionTree& tree)
{
    std::vector<NodeId> order;
    order.reserve(tree.nodes.size());
    std::vector<std::pair<NodeId, std::size_t>> stack{{tree.root, 0}};
    while (!stack.empty()) {
        auto& [id, next_child] = stack.back();
        const auto& children = tree.node(id).children;
        if (next_child == children.size()) {
            order.push_back(id);
            stack.pop_back();
        } else {
            stack.emplace_back(children[next_child++], 0);
        }
    }
    return order;
}

QuestionTree atomic_tree(std::string_view question)
{
    QuestionTree tree;
    tree.original_question = text::collapse_whitespace(question);
    QuestionNode node;
    node.id = 0;
    node.question = tree.original_question;
    node.origin = tree.original_question;
    tree.nodes.emplace(0, std::move(node));
    tree.root = 0;
    return tree;
}

QuestionTree regenerate_or_fallback(std::string_view original_question,
                                    const DecompositionGenerator& generator, int max_retries)
{
    for (int attempt = 0; attempt < max_retries; ++attempt) {
        try {
            auto tree = parse_decomposition(original_question, generator(attempt));
            if (validate(tree).empty()) return tree;
        } catch (const Error&) {
            // rejected by post-filtering; try again
        }
    }
    return atomic_tree(original_question);
}

nlohmann::json to_json(const QuestionTree& tree)
{
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& [id, node] : tree.nodes) {
        nlohmann::json j{{"id", id},
                         {"question", node.question},
                         {"children", node.children},
                         {"kind", to_string(node.kind)}};
        if (!node.origin.empty()) j["origin"] = node.origin;
        if (node.annotated) j["annotated"] = true;
        nodes.push_back(std::move(j));
    }
    return {{"question", tree.original_question}, {"root", tree.root}, {"nodes", std::move(nodes)}};
}

QuestionTree tree_from_json(const nlohmann::json& j)
{
    try {
        QuestionTree tree;
        tree.original_question = j.at("question").get<std::string>();
        tree.root = j.at("root").get<NodeId>();
        for (const auto& n : j.at("nodes")) {
            QuestionNode node;
            node.id = n.at("id").get<NodeId>();
            node.question = n.at("question").get<std::string>();
            node.children = n.at("children").get<std::vector<NodeId>>();
            const auto kind = n.at("kind").get<std::string>();
            if (kind != "atomic" && kind != "composite") throw SyntaxError("unknown node kind " + kind);
            node.kind = kind == "atomic" ? NodeKind::atomic : NodeKind::composite;
            node.origin = n.value("origin", "");
            node.annotated = n.value("annotated", false);
            tree.nodes.emplace(node.id, std::move(node));
        }
        return tree;
    } catch (const nlohmann::json::exception& e) {
        throw SyntaxError(std::string("malformed tree: ") + e.what());
    }
}

} // namespace beamaggr::qtree
