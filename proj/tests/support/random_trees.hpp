#pragma once

#include <random>
#include <string>
#include <vector>

#include "beamaggr/qtree.hpp"

namespace testing_support {

struct TreeShape {
    int max_depth = 3;
    int max_branching = 3;
    /// Chance that a composite non-root node becomes its own mapping entry.
    double keyed = 0.3;
    /// Chance that a composite node uses a trailing annotation instead of placeholders.
    double annotated = 0.2;
};

/// Random valid tree. Node texts start with "N<uid>:" so scripted strategies
/// can recover which node a posed question belongs to.
inline beamaggr::qtree::QuestionTree random_tree(std::mt19937& rng, const TreeShape& shape = {})
{
    using namespace beamaggr::qtree;
    QuestionTree tree;
    int next_uid = 0;
    NodeId next_id = 0;
    auto chance = [&](double p) { return std::uniform_real_distribution<double>(0, 1)(rng) < p; };

    std::function<NodeId(int, bool)> build = [&](int depth, bool is_root) -> NodeId {
        const int uid = next_uid++;
        int branching = 0;
        if (depth < shape.max_depth) {
            branching = std::uniform_int_distribution<int>(is_root ? 1 : 0, shape.max_branching)(rng);
        }
        QuestionNode node;
        for (int i = 0; i < branching; ++i) node.children.push_back(build(depth + 1, false));
        node.id = next_id++;
        const std::string head = "N" + std::to_string(uid) + ":";
        if (node.children.empty()) {
            node.kind = NodeKind::atomic;
            node.question = head + " what is it?";
        } else {
            node.kind = NodeKind::composite;
            node.annotated = chance(shape.annotated);
            if (node.annotated) {
                node.question = head + " compare them?";
            } else {
                node.question = head + " combine";
                for (std::size_t i = 1; i <= node.children.size(); ++i) node.question += " #" + std::to_string(i);
                node.question += "?";
            }
            if (!is_root && chance(shape.keyed)) node.origin = head + " entry for node?";
            if (!is_root && node.annotated && !node.origin.empty()) node.question = node.origin;
        }
        const NodeId id = node.id;
        tree.nodes.emplace(id, std::move(node));
        return id;
    };
    tree.root = build(0, true);
    tree.original_question = "N0: original question " + std::to_string(rng() % 100000) + "?";
    auto& root = tree.nodes.at(tree.root);
    root.origin = tree.original_question;
    if (root.annotated) root.question = tree.original_question;
    return tree;
}

} // namespace testing_support
