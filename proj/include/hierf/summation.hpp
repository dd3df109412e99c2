#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hierf/matrix.hpp"
#include "hierf/tree.hpp"

namespace hierf {

/// Stacking order of the y vector. For composed structures each entry is a
/// label pair; `pairs` keeps the exact split so nested labels stay unambiguous.
struct YLayout {
    std::vector<std::string> labels;
    std::vector<std::pair<std::string, std::string>> pairs;  // empty unless composed

    bool composed() const { return !pairs.empty(); }
    std::size_t size() const { return labels.size(); }
};

/**
 * The n x m 0/1 matrix S mapping the leaf vector b to the full vector y.
 * Rows are stored as sorted leaf-column index sets; a dense view is only
 * materialized below `dense_entry_cap` (composed structures get large).
 */
struct SummationMatrix {
    std::size_t n = 0;
    std::size_t m = 0;
    std::vector<std::vector<std::uint32_t>> rows;  // sorted column indices per row
    std::vector<std::string> row_layout;           // node label per row
    std::vector<std::string> col_layout;           // leaf label per column

    static constexpr std::size_t dense_entry_cap = 1'000'000;

    int at(std::size_t i, std::size_t j) const {
        const auto& r = rows[i];
        return std::binary_search(r.begin(), r.end(), static_cast<std::uint32_t>(j)) ? 1 : 0;
    }

    Mat dense(std::size_t entry_cap = dense_entry_cap) const {
        if (n * m > entry_cap)
            throw std::runtime_error("SummationMatrix::dense: " + std::to_string(n * m) +
                                     " entries exceed the dense cap");
        Mat out(n, m);
        for (std::size_t i = 0; i < n; ++i)
            for (auto j : rows[i]) out(i, j) = 1.0;
        return out;
    }

    YLayout layout() const { return YLayout{row_layout, {}}; }
};

/**
 * S from a Tree: s_ij = 1 iff node i is an ancestor of leaf j (each leaf
 * counting as its own ancestor). Rows are ordered aggregates by
 * (level, insertion order), then leaves in leaf_order, which places the
 * m x m identity block at the bottom for uni-dimensional trees.
 */
inline SummationMatrix summation_matrix(const Tree& tree) {
    SummationMatrix s;
    s.m = tree.m();
    s.col_layout = tree.leaf_order;

    std::vector<std::string> aggregates;
    for (const auto& label : tree.nodes)
        if (!tree.is_leaf(label)) aggregates.push_back(label);
    std::stable_sort(aggregates.begin(), aggregates.end(),
                     [&tree](const std::string& a, const std::string& b) {
                         return tree.level.at(a) < tree.level.at(b);
                     });

    s.row_layout = aggregates;
    s.row_layout.insert(s.row_layout.end(), tree.leaf_order.begin(), tree.leaf_order.end());
    s.n = s.row_layout.size();
    s.rows.assign(s.n, {});

    std::map<std::string, std::size_t> row_of;
    for (std::size_t i = 0; i < s.n; ++i) row_of[s.row_layout[i]] = i;

    for (std::size_t j = 0; j < s.m; ++j) {
        std::string cursor = tree.leaf_order[j];
        while (true) {
            s.rows[row_of.at(cursor)].push_back(static_cast<std::uint32_t>(j));
            auto up = tree.parent.find(cursor);
            if (up == tree.parent.end()) break;
            cursor = up->second;
        }
    }
    for (auto& row : s.rows) std::sort(row.begin(), row.end());
    return s;
}

/**
 * Temporal summation matrix per the stacked-block construction
 * I_{m/k} (x) 1_k^T, one block row per aggregation level. Block sizes must
 * divide m and run from m (root) down to 1 (leaves); they need not nest.
 */
inline SummationMatrix temporal_summation(std::size_t m, const std::vector<std::size_t>& ks) {
    if (m == 0) throw std::invalid_argument("temporal_summation: m must be positive");
    if (ks.empty() || ks.front() != m || ks.back() != 1)
        throw std::invalid_argument("temporal_summation: ks must run from m down to 1");
    for (std::size_t i = 0; i < ks.size(); ++i) {
        if (ks[i] == 0 || m % ks[i] != 0)
            throw std::invalid_argument("temporal_summation: k=" + std::to_string(ks[i]) +
                                        " does not divide m=" + std::to_string(m));
        if (i > 0 && ks[i] >= ks[i - 1])
            throw std::invalid_argument("temporal_summation: ks must be strictly descending");
    }

    SummationMatrix s;
    s.m = m;
    for (std::size_t k : ks) {
        for (std::size_t blk = 0; blk < m / k; ++blk) {
            std::vector<std::uint32_t> row(k);
            std::iota(row.begin(), row.end(), static_cast<std::uint32_t>(blk * k));
            s.rows.push_back(std::move(row));
            s.row_layout.push_back("k" + std::to_string(k) + "_" + std::to_string(blk + 1));
        }
    }
    s.n = s.rows.size();
    s.col_layout.assign(s.row_layout.end() - static_cast<long>(m), s.row_layout.end());
    return s;
}

/// y = S b.
inline Vec aggregate(const SummationMatrix& s, const Vec& b) {
    if (b.size() != s.m) throw std::invalid_argument("aggregate: leaf vector has wrong length");
    Vec y(s.n, 0.0);
    for (std::size_t i = 0; i < s.n; ++i) {
        double acc = 0.0;
        for (auto j : s.rows[i]) acc += b[j];
        y[i] = acc;
    }
    return y;
}

/**
 * The m x n extractor G selecting the leaf entries of y, one 1 per row in
 * leaf-column order. Leaf rows are located by label so interleaved layouts
 * (composed or pruned trees) resolve correctly; G S = I_m always.
 */
struct BottomExtractor {
    std::size_t m = 0;
    std::size_t n = 0;
    std::vector<std::size_t> leaf_row;  // row index of leaf j in the y layout

    Vec apply(const Vec& y) const {
        if (y.size() != n) throw std::invalid_argument("BottomExtractor: dimension mismatch");
        Vec b(m);
        for (std::size_t j = 0; j < m; ++j) b[j] = y[leaf_row[j]];
        return b;
    }

    Mat dense() const {
        Mat g(m, n);
        for (std::size_t j = 0; j < m; ++j) g(j, leaf_row[j]) = 1.0;
        return g;
    }
};

inline BottomExtractor bottom_extractor(const SummationMatrix& s) {
    std::map<std::string, std::size_t> row_of;
    for (std::size_t i = 0; i < s.n; ++i) row_of[s.row_layout[i]] = i;
    BottomExtractor g;
    g.m = s.m;
    g.n = s.n;
    g.leaf_row.resize(s.m);
    for (std::size_t j = 0; j < s.m; ++j) {
        auto it = row_of.find(s.col_layout[j]);
        if (it == row_of.end())
            throw std::invalid_argument("bottom_extractor: leaf '" + s.col_layout[j] +
                                        "' missing from row layout");
        g.leaf_row[j] = it->second;
    }
    return g;
}

inline std::string compose_label(const std::string& a, const std::string& b) {
    return a + "|" + b;
}

/**
 * Kronecker composition S_A (x) S_B with the second factor's index varying
 * fastest in both row and column layouts, so y pairs (a, b) stack b-major
 * inner. Entry count is capped to guard against dimensional explosion.
 */
inline std::pair<SummationMatrix, YLayout> compose(const SummationMatrix& sa,
                                                   const SummationMatrix& sb,
                                                   const YLayout& layout_a,
                                                   const YLayout& layout_b,
                                                   std::size_t entry_cap = 100'000'000) {
    if (layout_a.size() != sa.n || layout_b.size() != sb.n)
        throw std::invalid_argument("compose: layout sizes do not match the matrices");
    const std::size_t n = sa.n * sb.n;
    const std::size_t m = sa.m * sb.m;
    if (n * m > entry_cap)
        throw std::runtime_error("compose: " + std::to_string(n) + "x" + std::to_string(m) +
                                 " exceeds the entry cap of " + std::to_string(entry_cap));

    SummationMatrix s;
    s.n = n;
    s.m = m;
    s.rows.reserve(n);
    YLayout layout;
    layout.labels.reserve(n);
    layout.pairs.reserve(n);

    for (std::size_t ia = 0; ia < sa.n; ++ia) {
        for (std::size_t ib = 0; ib < sb.n; ++ib) {
            std::vector<std::uint32_t> row;
            row.reserve(sa.rows[ia].size() * sb.rows[ib].size());
            for (auto ja : sa.rows[ia])
                for (auto jb : sb.rows[ib])
                    row.push_back(static_cast<std::uint32_t>(ja * sb.m + jb));
            std::sort(row.begin(), row.end());
            s.rows.push_back(std::move(row));
            layout.labels.push_back(compose_label(layout_a.labels[ia], layout_b.labels[ib]));
            layout.pairs.emplace_back(layout_a.labels[ia], layout_b.labels[ib]);
        }
    }
    s.row_layout = layout.labels;
    for (std::size_t ja = 0; ja < sa.m; ++ja)
        for (std::size_t jb = 0; jb < sb.m; ++jb)
            s.col_layout.push_back(compose_label(sa.col_layout[ja], sb.col_layout[jb]));
    return {std::move(s), std::move(layout)};
}

/**
 * Permutation pi with layout_aob[i] = swap(layout_boa[pi(i)]), i.e. the
 * transpose-vectorization map between the two composition orders.
 */
inline std::vector<std::size_t> layout_permutation(const YLayout& layout_aob,
                                                   const YLayout& layout_boa) {
    if (!layout_aob.composed() || !layout_boa.composed())
        throw std::invalid_argument("layout_permutation: both layouts must be composed");
    if (layout_aob.size() != layout_boa.size())
        throw std::invalid_argument("layout_permutation: layout sizes differ");
    std::map<std::pair<std::string, std::string>, std::size_t> where;
    for (std::size_t i = 0; i < layout_boa.size(); ++i) where[layout_boa.pairs[i]] = i;
    std::vector<std::size_t> perm(layout_aob.size());
    for (std::size_t i = 0; i < layout_aob.size(); ++i) {
        const auto& [a, b] = layout_aob.pairs[i];
        auto it = where.find({b, a});
        if (it == where.end())
            throw std::invalid_argument("layout_permutation: label sets differ at '" +
                                        layout_aob.labels[i] + "'");
        perm[i] = it->second;
    }
    return perm;
}

/// kappa_str = S 1_m: per node, the number of leaves contributing to it.
inline Vec structural_vector(const SummationMatrix& s) {
    Vec kappa(s.n);
    for (std::size_t i = 0; i < s.n; ++i) kappa[i] = static_cast<double>(s.rows[i].size());
    return kappa;
}

/// y - S G y; the zero vector exactly when y is coherent.
inline Vec coherency_residual(const SummationMatrix& s, const BottomExtractor& g, const Vec& y) {
    if (y.size() != s.n) throw std::invalid_argument("coherency_residual: dimension mismatch");
    const Vec rebuilt = aggregate(s, g.apply(y));
    Vec r(s.n);
    for (std::size_t i = 0; i < s.n; ++i) r[i] = y[i] - rebuilt[i];
    return r;
}

/**
 * Removes the rows of the given non-leaf labels, leaving m and the leaf
 * identity rows untouched. Dropping a leaf or an unknown label is an error.
 */
inline std::pair<SummationMatrix, YLayout> prune(const SummationMatrix& s, const YLayout& layout,
                                                 const std::set<std::string>& drop) {
    if (layout.size() != s.n) throw std::invalid_argument("prune: layout does not match S");
    std::set<std::string> leaves(s.col_layout.begin(), s.col_layout.end());
    std::set<std::string> known(s.row_layout.begin(), s.row_layout.end());
    for (const auto& label : drop) {
        if (leaves.count(label))
            throw std::invalid_argument("prune: cannot drop leaf '" + label + "'");
        if (!known.count(label))
            throw std::invalid_argument("prune: unknown label '" + label + "'");
    }

    SummationMatrix out;
    out.m = s.m;
    out.col_layout = s.col_layout;
    YLayout kept;
    for (std::size_t i = 0; i < s.n; ++i) {
        if (drop.count(s.row_layout[i])) continue;
        out.rows.push_back(s.rows[i]);
        out.row_layout.push_back(s.row_layout[i]);
        kept.labels.push_back(layout.labels[i]);
        if (layout.composed()) kept.pairs.push_back(layout.pairs[i]);
    }
    out.n = out.rows.size();
    return {std::move(out), std::move(kept)};
}

}  // namespace hierf
