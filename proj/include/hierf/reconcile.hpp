#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hierf/covariance.hpp"
#include "hierf/matrix.hpp"
#include "hierf/summation.hpp"

namespace hierf {

enum class BundleTag { base, multi_task, hierarchical, reconciled };

inline std::string to_string(BundleTag tag) {
    switch (tag) {
        case BundleTag::base: return "base";
        case BundleTag::multi_task: return "multi-task";
        case BundleTag::hierarchical: return "hierarchical";
        case BundleTag::reconciled: return "reconciled";
    }
    throw std::invalid_argument("unknown bundle tag");
}

/// One stacked forecast vector in y-layout order, anchored at its origin.
struct ForecastBundle {
    std::int64_t origin = 0;
    Vec values;
    BundleTag tag = BundleTag::base;
    std::string provenance;  // reconciliation method label, empty if none
};

namespace detail {

/// Sigma^{-1} S without forming Sigma^{-1}: elementwise for diagonal sigma,
/// Cholesky solves otherwise.
inline Mat weighted_columns(const SummationMatrix& s, const CovarianceEstimate& sigma) {
    const std::size_t n = s.n, m = s.m;
    if (sigma.n() != n) throw std::invalid_argument("reconcile: sigma does not match S");
    Mat sd = s.dense(SummationMatrix::dense_entry_cap);
    if (sigma.diagonal()) {
        Mat out(n, m);
        for (std::size_t i = 0; i < n; ++i) {
            const double w = 1.0 / sigma.sigma(i, i);
            for (std::size_t j = 0; j < m; ++j) out(i, j) = w * sd(i, j);
        }
        return out;
    }
    Mat lower;
    if (!try_cholesky(sigma.sigma, lower))
        throw std::runtime_error("reconcile: sigma is not positive definite");
    return chol_solve_mat(lower, sd);
}

}  // namespace detail

/**
 * Precomputed GLS projection for one (S, sigma) pairing; immutable after
 * construction, safe to share across threads reconciling different origins.
 */
class GlsProjector {
public:
    GlsProjector(const SummationMatrix& s, const CovarianceEstimate& sigma)
        : n_(s.n), m_(s.m), s_(&s) {
        const Mat ws = detail::weighted_columns(s, sigma);  // Sigma^{-1} S
        std::vector<std::vector<std::uint32_t>> col_rows(m_);
        for (std::size_t i = 0; i < s.n; ++i)
            for (auto j : s.rows[i]) col_rows[j].push_back(static_cast<std::uint32_t>(i));
        Mat normal(m_, m_);
        for (std::size_t p = 0; p < m_; ++p)
            for (std::size_t q = 0; q < m_; ++q) {
                double acc = 0.0;
                for (auto i : col_rows[p]) acc += ws(i, q);
                normal(p, q) = acc;
            }
        if (!try_cholesky(normal, normal_lower_))
            throw std::runtime_error("reconcile_gls: singular S^T Sigma^{-1} S");
        wst_ = ws.transposed();  // m x n, rows give S^T Sigma^{-1}
    }

    Vec apply(const Vec& yhat) const {
        if (yhat.size() != n_) throw std::invalid_argument("reconcile_gls: dimension mismatch");
        const Vec rhs = matvec(wst_, yhat);
        const Vec b = chol_solve(normal_lower_, rhs);
        return aggregate(*s_, b);
    }

private:
    std::size_t n_, m_;
    const SummationMatrix* s_;
    Mat normal_lower_;
    Mat wst_;
};

/// GLS optimal combination: ytilde = S (S^T Sigma^{-1} S)^{-1} S^T Sigma^{-1} yhat.
inline ForecastBundle reconcile_gls(const SummationMatrix& s, const CovarianceEstimate& sigma,
                                    const ForecastBundle& yhat) {
    GlsProjector projector(s, sigma);
    ForecastBundle out;
    out.origin = yhat.origin;
    out.values = projector.apply(yhat.values);
    out.tag = BundleTag::reconciled;
    out.provenance = to_string(sigma.method);
    return out;
}

/// Bottom-up: keep the leaf forecasts, recompute every aggregate.
inline ForecastBundle reconcile_bottom_up(const SummationMatrix& s, const BottomExtractor& g,
                                          const ForecastBundle& yhat) {
    ForecastBundle out;
    out.origin = yhat.origin;
    out.values = aggregate(s, g.apply(yhat.values));
    out.tag = BundleTag::reconciled;
    out.provenance = "bottom-up";
    return out;
}

/**
 * Test oracle for the constrained minimization: substitutes ytilde = S b,
 * inverts sigma by Gauss-Jordan, and solves the normal equations by pivoted
 * elimination. Deliberately a separate code path from reconcile_gls.
 */
inline ForecastBundle reconcile_oracle(const SummationMatrix& s, const CovarianceEstimate& sigma,
                                       const ForecastBundle& yhat, std::size_t max_nodes = 200) {
    if (s.n > max_nodes)
        throw std::invalid_argument("reconcile_oracle: n exceeds the oracle cap");
    if (yhat.values.size() != s.n)
        throw std::invalid_argument("reconcile_oracle: dimension mismatch");
    const Mat sd = s.dense();
    const Mat sigma_inv = gauss_jordan_inverse(sigma.sigma);
    const Mat st = sd.transposed();
    const Mat a = matmul(matmul(st, sigma_inv), sd);
    const Vec rhs = matvec(matmul(st, sigma_inv), yhat.values);
    const Vec b = solve_pivoted(a, rhs);

    ForecastBundle out;
    out.origin = yhat.origin;
    out.values = matvec(sd, b);
    out.tag = BundleTag::reconciled;
    out.provenance = "oracle";
    return out;
}

}  // namespace hierf
