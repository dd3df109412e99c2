#pragma once

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hierf {

/**
 * Rooted hierarchy of labeled nodes. The structural source of truth:
 * levels run 1 (root) .. K (deepest), leaves are exactly the childless
 * nodes, and leaf_order fixes the column order of the summation matrix.
 */
struct Tree {
    std::vector<std::string> nodes;                               // insertion order
    std::map<std::string, std::string> parent;                    // non-root -> parent
    std::map<std::string, int> level;                             // 1-based aggregation level
    std::vector<std::string> leaf_order;                          // the m leaf labels
    std::map<std::string, std::vector<std::string>> children;     // insertion order per node
    std::string root;

    std::size_t n() const { return nodes.size(); }
    std::size_t m() const { return leaf_order.size(); }

    int depth() const {
        int k = 1;
        for (const auto& [label, lv] : level) k = std::max(k, lv);
        return k;
    }

    bool contains(const std::string& label) const {
        return level.find(label) != level.end();
    }

    bool is_leaf(const std::string& label) const {
        auto it = children.find(label);
        return it == children.end() || it->second.empty();
    }
};

/**
 * Builds a Tree from (parent, child) edges. Levels are assigned as
 * 1 + edge distance from the single root. A node list with no edges is
 * the degenerate tree whose root is its own leaf.
 */
inline Tree build_tree(const std::vector<std::pair<std::string, std::string>>& edges,
                       const std::vector<std::string>& leaf_order) {
    Tree tree;
    auto touch = [&tree](const std::string& label) {
        if (!tree.children.count(label)) {
            tree.children[label] = {};
            tree.nodes.push_back(label);
        }
    };

    if (edges.empty()) {
        if (leaf_order.size() != 1)
            throw std::invalid_argument("build_tree: empty edge list requires exactly one leaf");
        tree.root = leaf_order.front();
        touch(tree.root);
        tree.level[tree.root] = 1;
        tree.leaf_order = leaf_order;
        return tree;
    }

    for (const auto& [parent, child] : edges) {
        if (parent == child)
            throw std::invalid_argument("build_tree: cycle detected at '" + parent + "'");
        touch(parent);
        touch(child);
        if (tree.parent.count(child))
            throw std::invalid_argument("build_tree: node '" + child + "' has multiple parents");
        tree.parent[child] = parent;
        tree.children[parent].push_back(child);
    }

    std::vector<std::string> roots;
    for (const auto& label : tree.nodes)
        if (!tree.parent.count(label)) roots.push_back(label);
    if (roots.empty())
        throw std::invalid_argument("build_tree: cycle detected (no root)");
    if (roots.size() > 1)
        throw std::invalid_argument("build_tree: multiple roots ('" + roots[0] + "', '" + roots[1] + "')");
    tree.root = roots.front();

    std::deque<std::string> queue{tree.root};
    tree.level[tree.root] = 1;
    std::size_t visited = 0;
    while (!queue.empty()) {
        const std::string label = queue.front();
        queue.pop_front();
        ++visited;
        for (const auto& child : tree.children[label]) {
            tree.level[child] = tree.level[label] + 1;
            queue.push_back(child);
        }
    }
    if (visited != tree.nodes.size())
        throw std::invalid_argument("build_tree: cycle detected (unreachable nodes)");

    std::set<std::string> childless;
    for (const auto& label : tree.nodes)
        if (tree.children[label].empty()) childless.insert(label);
    std::set<std::string> given(leaf_order.begin(), leaf_order.end());
    if (given.size() != leaf_order.size())
        throw std::invalid_argument("build_tree: duplicate labels in leaf_order");
    if (given != childless)
        throw std::invalid_argument("build_tree: leaf_order does not match the childless nodes");
    tree.leaf_order = leaf_order;
    return tree;
}

/// Nodes whose aggregate row duplicates a descendant's row (single-child chains).
/// They are retained in the structure; callers surface them as diagnostics.
inline std::vector<std::string> redundant_nodes(const Tree& tree) {
    std::vector<std::string> out;
    for (const auto& label : tree.nodes) {
        auto it = tree.children.find(label);
        if (it != tree.children.end() && it->second.size() == 1) out.push_back(label);
    }
    return out;
}

/**
 * Temporal hierarchy as a Tree: one cycle of m leaves under nested block
 * sizes, e.g. (24, 6, 3, 1) for day / 6 h / 3 h / hourly. Requires each
 * block size to divide the one above it so that blocks nest.
 */
inline Tree temporal_tree(std::size_t m, const std::vector<std::size_t>& ks) {
    if (ks.empty() || ks.front() != m || ks.back() != 1)
        throw std::invalid_argument("temporal_tree: ks must run from m down to 1");
    for (std::size_t i = 0; i < ks.size(); ++i) {
        if (ks[i] == 0 || m % ks[i] != 0)
            throw std::invalid_argument("temporal_tree: every k must divide m");
        if (i > 0 && (ks[i] >= ks[i - 1] || ks[i - 1] % ks[i] != 0))
            throw std::invalid_argument("temporal_tree: block sizes must be strictly descending and nested");
    }
    auto label_of = [](std::size_t k, std::size_t idx) {
        return "k" + std::to_string(k) + "_" + std::to_string(idx + 1);
    };
    std::vector<std::pair<std::string, std::string>> edges;
    for (std::size_t li = 1; li < ks.size(); ++li) {
        const std::size_t k_up = ks[li - 1];
        const std::size_t k = ks[li];
        for (std::size_t idx = 0; idx < m / k; ++idx)
            edges.emplace_back(label_of(k_up, idx * k / k_up), label_of(k, idx));
    }
    std::vector<std::string> leaves;
    for (std::size_t idx = 0; idx < m; ++idx) leaves.push_back(label_of(1, idx));
    if (edges.empty()) return build_tree({}, {label_of(1, 0)});
    return build_tree(edges, leaves);
}

// --- serialization -------------------------------------------------------
// One `parent<TAB>child` edge per line plus a `#leaves:` ordered list line.
// Composed structures store both factor trees and the composition tag.

inline void write_tree(std::ostream& os, const Tree& tree) {
    for (const auto& label : tree.nodes)
        for (const auto& child : tree.children.at(label))
            os << label << '\t' << child << '\n';
    os << "#leaves:";
    for (const auto& leaf : tree.leaf_order) os << ' ' << leaf;
    os << '\n';
}

inline Tree read_tree(std::istream& is) {
    std::vector<std::pair<std::string, std::string>> edges;
    std::vector<std::string> leaves;
    std::string line;
    bool saw_leaves = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line.rfind("#leaves:", 0) == 0) {
            std::istringstream ss(line.substr(8));
            std::string tok;
            while (ss >> tok) leaves.push_back(tok);
            saw_leaves = true;
            break;
        }
        if (line[0] == '#') continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::invalid_argument("read_tree: malformed edge line '" + line + "'");
        edges.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    if (!saw_leaves) throw std::invalid_argument("read_tree: missing #leaves: line");
    return build_tree(edges, leaves);
}

struct ComposedTreeFile {
    Tree first;
    Tree second;
    std::string order;  // "SoT" or "ToS": which factor leads the Kronecker product
};

inline void write_composed_tree(std::ostream& os, const Tree& first, const Tree& second,
                                const std::string& order) {
    if (order != "SoT" && order != "ToS")
        throw std::invalid_argument("write_composed_tree: order must be SoT or ToS");
    os << "#compose: " << order << '\n';
    os << "#factor\n";
    write_tree(os, first);
    os << "#factor\n";
    write_tree(os, second);
}

inline ComposedTreeFile read_composed_tree(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line.rfind("#compose: ", 0) != 0)
        throw std::invalid_argument("read_composed_tree: missing #compose: header");
    ComposedTreeFile out;
    out.order = line.substr(10);
    if (out.order != "SoT" && out.order != "ToS")
        throw std::invalid_argument("read_composed_tree: bad order tag '" + out.order + "'");
    if (!std::getline(is, line) || line != "#factor")
        throw std::invalid_argument("read_composed_tree: missing first #factor");
    out.first = read_tree(is);
    if (!std::getline(is, line) || line != "#factor")
        throw std::invalid_argument("read_composed_tree: missing second #factor");
    out.second = read_tree(is);
    return out;
}

inline void write_tree_file(const std::string& path, const Tree& tree) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    write_tree(os, tree);
}

inline Tree read_tree_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    return read_tree(is);
}

}  // namespace hierf
