#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hierf/matrix.hpp"
#include "hierf/summation.hpp"

namespace hierf {

/// Base-forecast error history, one aligned sample sequence per node label.
class ResidualStore {
public:
    void add_series(const std::string& label, Vec samples) {
        for (double v : samples)
            if (!std::isfinite(v))
                throw std::invalid_argument("ResidualStore: non-finite residual for '" + label + "'");
        if (!labels_.empty() && samples.size() != series_.front().size())
            throw std::invalid_argument("ResidualStore: sample count mismatch for '" + label + "'");
        if (index_.count(label))
            throw std::invalid_argument("ResidualStore: duplicate label '" + label + "'");
        index_[label] = labels_.size();
        labels_.push_back(label);
        series_.push_back(std::move(samples));
    }

    /// Appends one residual vector (one forecast origin) across the given layout.
    void add_sample(const std::vector<std::string>& layout, const Vec& residual) {
        if (layout.size() != residual.size())
            throw std::invalid_argument("ResidualStore: layout/residual size mismatch");
        if (labels_.empty()) {
            for (std::size_t i = 0; i < layout.size(); ++i) {
                index_[layout[i]] = i;
                labels_.push_back(layout[i]);
                series_.emplace_back();
            }
        }
        for (std::size_t i = 0; i < layout.size(); ++i) {
            if (!std::isfinite(residual[i]))
                throw std::invalid_argument("ResidualStore: non-finite residual for '" + layout[i] + "'");
            series_[index_.at(layout[i])].push_back(residual[i]);
        }
    }

    bool empty() const { return labels_.empty() || series_.front().empty(); }
    std::size_t sample_count() const { return labels_.empty() ? 0 : series_.front().size(); }
    const std::vector<std::string>& labels() const { return labels_; }

    const Vec& series(const std::string& label) const {
        auto it = index_.find(label);
        if (it == index_.end())
            throw std::invalid_argument("ResidualStore: no residuals for '" + label + "'");
        return series_[it->second];
    }

    bool has(const std::string& label) const { return index_.count(label) > 0; }

    /// h x n matrix of residuals in the given label order.
    Mat matrix(const std::vector<std::string>& order) const {
        const std::size_t h = sample_count();
        Mat out(h, order.size());
        for (std::size_t j = 0; j < order.size(); ++j) {
            const Vec& col = series(order[j]);
            for (std::size_t t = 0; t < h; ++t) out(t, j) = col[t];
        }
        return out;
    }

private:
    std::vector<std::string> labels_;
    std::vector<Vec> series_;
    std::map<std::string, std::size_t> index_;
};

enum class CovMethod { id, str, svar, hvar, cov, kcov, populated };

inline std::string to_string(CovMethod method) {
    switch (method) {
        case CovMethod::id: return "id";
        case CovMethod::str: return "str";
        case CovMethod::svar: return "svar";
        case CovMethod::hvar: return "hvar";
        case CovMethod::cov: return "cov";
        case CovMethod::kcov: return "kcov";
        case CovMethod::populated: return "populated";
    }
    throw std::invalid_argument("unknown covariance method");
}

inline CovMethod cov_method_from(const std::string& name) {
    if (name == "id") return CovMethod::id;
    if (name == "str") return CovMethod::str;
    if (name == "svar") return CovMethod::svar;
    if (name == "hvar") return CovMethod::hvar;
    if (name == "cov") return CovMethod::cov;
    if (name == "kcov") return CovMethod::kcov;
    if (name == "populated") return CovMethod::populated;
    throw std::invalid_argument("unknown covariance method '" + name + "'");
}

/**
 * Estimated n x n weight matrix together with its topological 0/1 mask.
 * Diagonal methods carry an identity mask; shrinkage methods also carry
 * the shrinkage intensity lambda.
 */
struct CovarianceEstimate {
    CovMethod method = CovMethod::id;
    Mat sigma;
    Mat mask;
    double lambda = 0.0;
    bool has_lambda = false;

    std::size_t n() const { return sigma.rows(); }

    bool diagonal() const {
        for (std::size_t i = 0; i < mask.rows(); ++i)
            for (std::size_t j = 0; j < mask.cols(); ++j)
                if ((i == j) != (mask(i, j) != 0.0)) return false;
        return true;
    }
};

namespace detail {

inline double sample_mean(const Vec& x) {
    double acc = 0.0;
    for (double v : x) acc += v;
    return acc / static_cast<double>(x.size());
}

/// Unbiased sample variance (h - 1 denominator).
inline double sample_variance(const Vec& x) {
    if (x.size() < 2) throw std::invalid_argument("sample_variance: need at least 2 samples");
    const double mu = sample_mean(x);
    double acc = 0.0;
    for (double v : x) acc += (v - mu) * (v - mu);
    return acc / static_cast<double>(x.size() - 1);
}

inline double sample_covariance(const Vec& x, const Vec& y) {
    const double mx = sample_mean(x), my = sample_mean(y);
    double acc = 0.0;
    for (std::size_t t = 0; t < x.size(); ++t) acc += (x[t] - mx) * (y[t] - my);
    return acc / static_cast<double>(x.size() - 1);
}

/// Floors near-zero variances so sigma stays invertible.
inline void floor_variances(Vec& variances) {
    double peak = 0.0;
    for (double v : variances) peak = std::max(peak, v);
    const double floor = 1e-12 * (peak > 0.0 ? peak : 1.0);
    for (double& v : variances) v = std::max(v, floor);
}

/// Diagonal loading until a Cholesky factorization succeeds: delta starts at
/// 1e-9 * trace/n and grows tenfold, at most 6 retries.
inline void enforce_positive_definite(Mat& sigma) {
    Mat lower;
    if (try_cholesky(sigma, lower)) return;
    double trace = 0.0;
    for (std::size_t i = 0; i < sigma.rows(); ++i) trace += sigma(i, i);
    double delta = 1e-9 * (trace > 0.0 ? trace / static_cast<double>(sigma.rows()) : 1.0);
    for (int attempt = 0; attempt < 6; ++attempt) {
        Mat loaded = sigma;
        for (std::size_t i = 0; i < sigma.rows(); ++i) loaded(i, i) += delta;
        if (try_cholesky(loaded, lower)) {
            sigma = loaded;
            return;
        }
        delta *= 10.0;
    }
    throw std::runtime_error("covariance: could not reach positive definiteness by diagonal loading");
}

}  // namespace detail

/**
 * Optimal shrinkage intensity from the centered cross-product statistics:
 * lambda = sum_{i!=j} Var(sigma_ij) / sum_{i!=j} sigma_ij^2, clamped to
 * [0, 1], with Var(sigma_ij) = h/(h-1)^3 * sum_t (w_ijt - wbar_ij)^2 in the
 * unbiased Schaefer-Strimmer form. A zero denominator (no off-diagonal
 * signal) yields lambda = 1. `pair_mask`, when given, restricts the sums to
 * the modeled off-diagonal pairs.
 */
inline double shrinkage_lambda(const Mat& residuals, const Mat* pair_mask = nullptr) {
    const std::size_t h = residuals.rows();
    const std::size_t n = residuals.cols();
    if (h < 3) throw std::invalid_argument("shrinkage_lambda: need at least 3 samples");

    Vec means(n);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < h; ++t) acc += residuals(t, j);
        means[j] = acc / static_cast<double>(h);
    }

    const double hd = static_cast<double>(h);
    double var_sum = 0.0, cov_sq_sum = 0.0;
    Vec w(h);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (pair_mask && (*pair_mask)(i, j) == 0.0) continue;
            double wbar = 0.0;
            for (std::size_t t = 0; t < h; ++t) {
                w[t] = (residuals(t, i) - means[i]) * (residuals(t, j) - means[j]);
                wbar += w[t];
            }
            wbar /= hd;
            double wvar = 0.0;
            for (std::size_t t = 0; t < h; ++t) wvar += (w[t] - wbar) * (w[t] - wbar);
            const double var_hat = hd / ((hd - 1.0) * (hd - 1.0) * (hd - 1.0)) * wvar;
            const double sigma_ij = hd / (hd - 1.0) * wbar;
            var_sum += 2.0 * var_hat;  // both (i,j) and (j,i)
            cov_sq_sum += 2.0 * sigma_ij * sigma_ij;
        }
    }
    if (cov_sq_sum == 0.0) return 1.0;
    const double lambda = var_sum / cov_sq_sum;
    return std::min(1.0, std::max(0.0, lambda));
}

namespace detail {

/// Shared body of the cov/kcov estimators: variance diagonal plus shrunk
/// correlation, optionally masked to within-level blocks before shrinkage.
inline CovarianceEstimate covariance_scaled(const SummationMatrix& s, const ResidualStore& residuals,
                                            const std::map<std::string, int>& level_of,
                                            bool k_level_only) {
    const std::size_t n = s.n;
    if (residuals.sample_count() < 3)
        throw std::invalid_argument("covariance estimate: need at least 3 residual samples");

    Vec variances(n);
    for (std::size_t i = 0; i < n; ++i) variances[i] = sample_variance(residuals.series(s.row_layout[i]));
    floor_variances(variances);

    Mat mask(n, n, 1.0);
    if (k_level_only) {
        mask = Mat(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                mask(i, j) = (level_of.at(s.row_layout[i]) == level_of.at(s.row_layout[j])) ? 1.0 : 0.0;
    }

    const Mat resid = residuals.matrix(s.row_layout);
    const double lambda = shrinkage_lambda(resid, k_level_only ? &mask : nullptr);

    // sigma_ij = sqrt(v_i v_j) * [(1 - lambda) r_ij] off-diagonal, v_i on the
    // diagonal; lambda = 1 therefore reproduces hvar exactly.
    Mat sigma(n, n);
    for (std::size_t i = 0; i < n; ++i) sigma(i, i) = variances[i];
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (mask(i, j) == 0.0) continue;
            const double cov_ij =
                sample_covariance(residuals.series(s.row_layout[i]), residuals.series(s.row_layout[j]));
            const double denom = std::sqrt(variances[i] * variances[j]);
            const double corr = denom > 0.0 ? cov_ij / denom : 0.0;
            const double shrunk = (1.0 - lambda) * corr;
            const double value = shrunk * denom;
            sigma(i, j) = value;
            sigma(j, i) = value;
        }
    }
    enforce_positive_definite(sigma);

    CovarianceEstimate est;
    est.method = k_level_only ? CovMethod::kcov : CovMethod::cov;
    est.sigma = std::move(sigma);
    est.mask = std::move(mask);
    est.lambda = lambda;
    est.has_lambda = true;
    return est;
}

}  // namespace detail

/**
 * The six weight-matrix estimators:
 *   id   -> I_n
 *   str  -> diag(S 1_m), structural counts only, residual-free
 *   svar -> one pooled variance per aggregation level
 *   hvar -> per-node variances
 *   cov  -> variance diagonal with full shrunk correlation
 *   kcov -> same with off-level correlations zeroed before shrinkage
 */
inline CovarianceEstimate estimate(CovMethod method, const SummationMatrix& s,
                                   const ResidualStore& residuals,
                                   const std::map<std::string, int>& level_of = {}) {
    const std::size_t n = s.n;
    CovarianceEstimate est;
    est.method = method;
    est.mask = Mat::identity(n);

    switch (method) {
        case CovMethod::id:
            est.sigma = Mat::identity(n);
            return est;
        case CovMethod::str: {
            est.sigma = Mat(n, n);
            const Vec kappa = structural_vector(s);
            for (std::size_t i = 0; i < n; ++i) est.sigma(i, i) = kappa[i];
            return est;
        }
        case CovMethod::hvar: {
            if (residuals.sample_count() < 2)
                throw std::invalid_argument("estimate(hvar): need at least 2 residual samples");
            Vec variances(n);
            for (std::size_t i = 0; i < n; ++i)
                variances[i] = detail::sample_variance(residuals.series(s.row_layout[i]));
            detail::floor_variances(variances);
            est.sigma = Mat(n, n);
            for (std::size_t i = 0; i < n; ++i) est.sigma(i, i) = variances[i];
            return est;
        }
        case CovMethod::svar: {
            if (residuals.sample_count() < 2)
                throw std::invalid_argument("estimate(svar): need at least 2 residual samples");
            if (level_of.empty())
                throw std::invalid_argument("estimate(svar): level association required");
            std::map<int, std::pair<double, int>> pooled;  // level -> (variance sum, node count)
            for (std::size_t i = 0; i < n; ++i) {
                auto& slot = pooled[level_of.at(s.row_layout[i])];
                slot.first += detail::sample_variance(residuals.series(s.row_layout[i]));
                slot.second += 1;
            }
            Vec variances(n);
            for (std::size_t i = 0; i < n; ++i) {
                const auto& slot = pooled.at(level_of.at(s.row_layout[i]));
                variances[i] = slot.first / slot.second;
            }
            detail::floor_variances(variances);
            est.sigma = Mat(n, n);
            for (std::size_t i = 0; i < n; ++i) est.sigma(i, i) = variances[i];
            return est;
        }
        case CovMethod::cov:
            return detail::covariance_scaled(s, residuals, level_of, false);
        case CovMethod::kcov:
            if (level_of.empty())
                throw std::invalid_argument("estimate(kcov): level association required");
            return detail::covariance_scaled(s, residuals, level_of, true);
        case CovMethod::populated:
            throw std::invalid_argument("estimate: 'populated' is produced by populate(), not estimate()");
    }
    throw std::invalid_argument("estimate: unknown method");
}

/// Kronecker product of two topological 0/1 masks.
inline Mat compose_mask(const Mat& mask_a, const Mat& mask_b, std::size_t entry_cap = 100'000'000) {
    if (mask_a.rows() != mask_a.cols() || mask_b.rows() != mask_b.cols())
        throw std::invalid_argument("compose_mask: square inputs required");
    const std::size_t n = mask_a.rows() * mask_b.rows();
    if (n * n > entry_cap)
        throw std::runtime_error("compose_mask: " + std::to_string(n) + "^2 exceeds the entry cap");
    Mat out(n, n);
    for (std::size_t ia = 0; ia < mask_a.rows(); ++ia)
        for (std::size_t ja = 0; ja < mask_a.cols(); ++ja) {
            if (mask_a(ia, ja) == 0.0) continue;
            for (std::size_t ib = 0; ib < mask_b.rows(); ++ib)
                for (std::size_t jb = 0; jb < mask_b.cols(); ++jb)
                    out(ia * mask_b.rows() + ib, ja * mask_b.cols() + jb) = mask_b(ib, jb);
        }
    return out;
}

/**
 * Fills a topological mask with sample moments from the residual store:
 * variances on the diagonal, sample covariances at mask-1 positions, zeros
 * elsewhere, then diagonal-loads to positive definiteness.
 */
inline CovarianceEstimate populate(const Mat& mask, const ResidualStore& residuals,
                                   const YLayout& layout) {
    const std::size_t n = layout.size();
    if (mask.rows() != n || mask.cols() != n)
        throw std::invalid_argument("populate: mask does not match the layout");
    if (residuals.sample_count() < 2)
        throw std::invalid_argument("populate: need at least 2 residual samples");

    Vec variances(n);
    for (std::size_t i = 0; i < n; ++i)
        variances[i] = detail::sample_variance(residuals.series(layout.labels[i]));
    detail::floor_variances(variances);

    Mat sigma(n, n);
    for (std::size_t i = 0; i < n; ++i) sigma(i, i) = variances[i];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            if (mask(i, j) == 0.0) continue;
            const double cov_ij = detail::sample_covariance(residuals.series(layout.labels[i]),
                                                            residuals.series(layout.labels[j]));
            sigma(i, j) = cov_ij;
            sigma(j, i) = cov_ij;
        }
    detail::enforce_positive_definite(sigma);

    CovarianceEstimate est;
    est.method = CovMethod::populated;
    est.sigma = std::move(sigma);
    est.mask = mask;
    return est;
}

// --- audit serialization: n, method, lambda, row-major values ------------

inline void write_covariance(std::ostream& os, const CovarianceEstimate& est) {
    os << est.n() << ' ' << to_string(est.method) << ' ';
    if (est.has_lambda)
        os << std::setprecision(17) << est.lambda;
    else
        os << '-';
    os << '\n' << std::setprecision(17);
    for (std::size_t i = 0; i < est.n(); ++i) {
        for (std::size_t j = 0; j < est.n(); ++j) {
            if (j) os << ' ';
            os << est.sigma(i, j);
        }
        os << '\n';
    }
}

inline CovarianceEstimate read_covariance(std::istream& is) {
    std::size_t n = 0;
    std::string method, lambda_text;
    if (!(is >> n >> method >> lambda_text))
        throw std::invalid_argument("read_covariance: malformed header");
    CovarianceEstimate est;
    est.method = cov_method_from(method);
    if (lambda_text != "-") {
        est.lambda = std::stod(lambda_text);
        est.has_lambda = true;
    }
    est.sigma = Mat(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (!(is >> est.sigma(i, j)))
                throw std::invalid_argument("read_covariance: truncated matrix body");
    est.mask = Mat::identity(n);
    if (est.method == CovMethod::cov) {
        est.mask = Mat(n, n, 1.0);
    } else if (est.method == CovMethod::kcov || est.method == CovMethod::populated) {
        // the written form carries no level association; recover the
        // topology from the stored zeros
        est.mask = Mat(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                est.mask(i, j) = (i == j || est.sigma(i, j) != 0.0) ? 1.0 : 0.0;
    }
    return est;
}

}  // namespace hierf
