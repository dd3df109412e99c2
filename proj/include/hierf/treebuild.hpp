#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hierf/matrix.hpp"
#include "hierf/tree.hpp"

namespace hierf {

/// Agglomerative merge history. Cluster ids: 0..N-1 are input series,
/// merge step k creates cluster N+k. Ward linkage distances are monotone.
struct Dendrogram {
    struct Merge {
        std::size_t a = 0;
        std::size_t b = 0;
        double distance = 0.0;
        std::size_t id = 0;
    };
    std::vector<std::string> leaf_labels;
    std::vector<Merge> merges;  // exactly N-1 entries

    std::size_t leaf_count() const { return leaf_labels.size(); }

    double max_distance() const {
        double d = 0.0;
        for (const auto& m : merges) d = std::max(d, m.distance);
        return d;
    }
};

/**
 * Ward variance-minimization clustering of N series by the Lance-Williams
 * update over Euclidean distances. Ties break on the smallest cluster-id
 * pair, so results are deterministic.
 */
inline Dendrogram ward_cluster(const Mat& series, std::vector<std::string> labels = {}) {
    const std::size_t n = series.rows();
    if (n == 0) throw std::invalid_argument("ward_cluster: no series");
    if (labels.empty())
        for (std::size_t i = 0; i < n; ++i) labels.push_back("s" + std::to_string(i));
    if (labels.size() != n) throw std::invalid_argument("ward_cluster: label count mismatch");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < series.cols(); ++j)
            if (!std::isfinite(series(i, j)))
                throw std::invalid_argument("ward_cluster: non-finite value in series '" + labels[i] + "'");

    Dendrogram out;
    out.leaf_labels = std::move(labels);
    if (n == 1) return out;

    // active clusters keyed by id; pairwise squared distances
    std::vector<std::size_t> active;
    std::map<std::size_t, std::size_t> size_of;
    for (std::size_t i = 0; i < n; ++i) {
        active.push_back(i);
        size_of[i] = 1;
    }
    std::map<std::pair<std::size_t, std::size_t>, double> dist2;
    auto key = [](std::size_t a, std::size_t b) {
        return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
    };
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < series.cols(); ++t) {
                const double d = series(i, t) - series(j, t);
                acc += d * d;
            }
            dist2[{i, j}] = acc;
        }

    for (std::size_t step = 0; step + 1 < n; ++step) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t bi = 0, bj = 0;
        for (std::size_t p = 0; p < active.size(); ++p)
            for (std::size_t q = p + 1; q < active.size(); ++q) {
                const double d = dist2.at(key(active[p], active[q]));
                if (d < best) {
                    best = d;
                    bi = active[p];
                    bj = active[q];
                }
            }
        const std::size_t merged = n + step;
        out.merges.push_back({bi, bj, std::sqrt(std::max(0.0, best)), merged});

        const double ni = static_cast<double>(size_of.at(bi));
        const double nj = static_cast<double>(size_of.at(bj));
        for (std::size_t c : active) {
            if (c == bi || c == bj) continue;
            const double nk = static_cast<double>(size_of.at(c));
            const double total = ni + nj + nk;
            const double updated = ((ni + nk) * dist2.at(key(bi, c)) +
                                    (nj + nk) * dist2.at(key(bj, c)) - nk * best) /
                                   total;
            dist2[key(merged, c)] = updated;
        }
        active.erase(std::remove(active.begin(), active.end(), bi), active.end());
        active.erase(std::remove(active.begin(), active.end(), bj), active.end());
        active.push_back(merged);
        size_of[merged] = static_cast<std::size_t>(ni + nj);
    }
    return out;
}

/**
 * Cuts the dendrogram at a distance threshold: merges strictly below it
 * collapse into flat multi-child cluster nodes (children kept in merge
 * order), merges at or above it keep their binary structure on top.
 */
inline Tree cut(const Dendrogram& dendrogram, double threshold) {
    if (threshold < 0.0) throw std::invalid_argument("cut: threshold must be non-negative");
    const std::size_t n = dendrogram.leaf_count();
    if (n == 0) throw std::invalid_argument("cut: empty dendrogram");
    if (n == 1) return build_tree({}, {dendrogram.leaf_labels[0]});

    // cluster state per dendrogram id: the current tree node representing it
    // and, while still flat, its member leaves in merge order
    std::map<std::size_t, std::string> node_of;
    std::map<std::size_t, std::vector<std::string>> flat_members;
    for (std::size_t i = 0; i < n; ++i) {
        node_of[i] = dendrogram.leaf_labels[i];
        flat_members[i] = {dendrogram.leaf_labels[i]};
    }

    std::vector<std::pair<std::string, std::string>> edges;
    std::string top;
    for (const auto& merge : dendrogram.merges) {
        const std::string label = "n" + std::to_string(merge.id);
        if (merge.distance < threshold && flat_members.count(merge.a) && flat_members.count(merge.b)) {
            // collapse: keep an ordered member list, defer node creation
            auto members = flat_members.at(merge.a);
            const auto& rest = flat_members.at(merge.b);
            members.insert(members.end(), rest.begin(), rest.end());
            flat_members.erase(merge.a);
            flat_members.erase(merge.b);
            flat_members[merge.id] = std::move(members);
            node_of.erase(merge.a);
            node_of.erase(merge.b);
            node_of[merge.id] = label;
            top = label;
        } else {
            // materialize flat children before wiring the binary structure
            for (std::size_t side : {merge.a, merge.b}) {
                auto flat = flat_members.find(side);
                if (flat != flat_members.end() && flat->second.size() > 1) {
                    for (const auto& leaf : flat->second) edges.emplace_back(node_of.at(side), leaf);
                    flat_members.erase(flat);
                } else if (flat != flat_members.end()) {
                    node_of[side] = flat->second.front();  // singleton cluster is its leaf
                    flat_members.erase(flat);
                }
            }
            edges.emplace_back(label, node_of.at(merge.a));
            edges.emplace_back(label, node_of.at(merge.b));
            node_of.erase(merge.a);
            node_of.erase(merge.b);
            node_of[merge.id] = label;
            top = label;
        }
    }

    // fully collapsed: one flat cluster under its own root node
    const std::size_t root_id = dendrogram.merges.back().id;
    auto flat = flat_members.find(root_id);
    if (flat != flat_members.end()) {
        for (const auto& leaf : flat->second) edges.emplace_back(top, leaf);
    }

    // leaf order by first appearance as a child
    std::vector<std::string> leaf_order;
    std::map<std::string, bool> is_parent;
    for (const auto& [p, c] : edges) is_parent[p] = true;
    for (const auto& [p, c] : edges)
        if (!is_parent.count(c)) leaf_order.push_back(c);
    return build_tree(edges, leaf_order);
}

/**
 * Limits a (cut) tree to at most max_leaves series: representatives are
 * taken round-robin across the root's subtrees, earliest-attached leaf
 * first, then emptied aggregates are removed and chains collapsed.
 */
inline Tree cap_leaves(const Tree& tree, std::size_t max_leaves) {
    if (max_leaves == 0) throw std::invalid_argument("cap_leaves: max_leaves must be >= 1");
    if (tree.m() <= max_leaves) return tree;

    // leaves per root subtree, in child-insertion (merge) order
    std::vector<std::vector<std::string>> groups;
    auto leaves_under = [&tree](const std::string& start) {
        std::vector<std::string> found, stack{start};
        while (!stack.empty()) {
            std::string node = stack.back();
            stack.pop_back();
            const auto& kids = tree.children.at(node);
            if (kids.empty()) {
                found.push_back(node);
            } else {
                for (auto it = kids.rbegin(); it != kids.rend(); ++it) stack.push_back(*it);
            }
        }
        return found;
    };
    for (const auto& child : tree.children.at(tree.root)) groups.push_back(leaves_under(child));

    std::vector<std::string> keep;
    for (std::size_t round = 0; keep.size() < max_leaves; ++round) {
        bool any = false;
        for (const auto& group : groups) {
            if (round < group.size()) {
                any = true;
                keep.push_back(group[round]);
                if (keep.size() == max_leaves) break;
            }
        }
        if (!any) break;
    }
    std::set<std::string> kept(keep.begin(), keep.end());
    if (kept.size() == 1) return build_tree({}, {*kept.begin()});

    // rebuild: drop unselected leaves, splice out single-child aggregates
    std::map<std::string, std::vector<std::string>> live_children;
    std::function<std::vector<std::string>(const std::string&)> shrink =
        [&](const std::string& node) -> std::vector<std::string> {
        const auto& kids = tree.children.at(node);
        if (kids.empty()) return kept.count(node) ? std::vector<std::string>{node} : std::vector<std::string>{};
        std::vector<std::string> mine;
        for (const auto& child : kids) {
            auto sub = shrink(child);
            mine.insert(mine.end(), sub.begin(), sub.end());
        }
        if (mine.size() <= 1) return mine;  // collapse empties and chains
        live_children[node] = mine;
        return {node};
    };
    std::vector<std::string> roots = shrink(tree.root);
    if (roots.size() != 1)
        throw std::runtime_error("cap_leaves: internal error while re-rooting");

    std::vector<std::pair<std::string, std::string>> edges;
    std::vector<std::string> stack{roots.front()};
    while (!stack.empty()) {
        std::string node = stack.back();
        stack.pop_back();
        auto it = live_children.find(node);
        if (it == live_children.end()) continue;
        for (const auto& child : it->second) edges.emplace_back(node, child);
        for (auto rit = it->second.rbegin(); rit != it->second.rend(); ++rit) stack.push_back(*rit);
    }
    std::vector<std::string> leaf_order;
    for (const auto& leaf : tree.leaf_order)
        if (kept.count(leaf)) leaf_order.push_back(leaf);
    return build_tree(edges, leaf_order);
}

// --- dendrogram export: one merge per line for external plotting ---------

inline void write_dendrogram(std::ostream& os, const Dendrogram& dendrogram) {
    os << "#leaves:";
    for (const auto& label : dendrogram.leaf_labels) os << ' ' << label;
    os << '\n';
    os.precision(17);
    for (const auto& merge : dendrogram.merges)
        os << merge.a << ' ' << merge.b << ' ' << merge.distance << ' ' << merge.id << '\n';
}

}  // namespace hierf
