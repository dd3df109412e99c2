#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hierf/matrix.hpp"
#include "hierf/reconcile.hpp"
#include "hierf/summation.hpp"

namespace hierf {

/// Plain mean squared error over one horizon.
inline double mse(const Vec& y, const Vec& yhat) {
    if (y.size() != yhat.size()) throw std::invalid_argument("mse: length mismatch");
    if (y.empty()) throw std::invalid_argument("mse: empty input");
    double acc = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
        const double e = y[t] - yhat[t];
        acc += e * e;
    }
    return acc / static_cast<double>(y.size());
}

/// RelMSE_k = MSE_k / MSE^base_k - 1; negative entries are improvements.
inline double relmse(double mse_k, double mse_base_k) {
    if (!(mse_base_k > 0.0)) throw std::invalid_argument("relmse: base MSE must be positive");
    return mse_k / mse_base_k - 1.0;
}

/// Hadamard division by the structural vector.
inline Vec scaled_errors(const Vec& e, const Vec& kappa) {
    if (e.size() != kappa.size()) throw std::invalid_argument("scaled_errors: length mismatch");
    Vec out(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        if (!(kappa[i] > 0.0)) throw std::invalid_argument("scaled_errors: kappa must be strictly positive");
        out[i] = e[i] / kappa[i];
    }
    return out;
}

/// Per-node mean structurally-scaled square error over an h x n error matrix,
/// plus the average over the entire hierarchy.
struct Ms3eResult {
    Vec per_node;
    double overall = 0.0;
};

inline Ms3eResult ms3e(const Mat& errors, const Vec& kappa) {
    if (errors.cols() != kappa.size()) throw std::invalid_argument("ms3e: shape mismatch");
    if (errors.rows() == 0) throw std::invalid_argument("ms3e: empty horizon");
    Ms3eResult out;
    out.per_node.assign(errors.cols(), 0.0);
    for (std::size_t t = 0; t < errors.rows(); ++t) {
        Vec row = errors.row(t);
        Vec scaled = scaled_errors(row, kappa);
        for (std::size_t i = 0; i < scaled.size(); ++i) out.per_node[i] += scaled[i] * scaled[i];
    }
    double total = 0.0;
    for (auto& v : out.per_node) {
        v /= static_cast<double>(errors.rows());
        total += v;
    }
    out.overall = total / static_cast<double>(errors.cols());
    return out;
}

/// MS3E of the coherency residual vectors across a horizon of bundles.
inline double coherency_ms3e(const std::vector<ForecastBundle>& bundles, const SummationMatrix& s,
                             const BottomExtractor& g, const Vec& kappa) {
    if (bundles.empty()) throw std::invalid_argument("coherency_ms3e: empty horizon");
    Mat residuals(bundles.size(), s.n);
    for (std::size_t t = 0; t < bundles.size(); ++t) {
        Vec r = coherency_residual(s, g, bundles[t].values);
        for (std::size_t i = 0; i < s.n; ++i) residuals(t, i) = r[i];
    }
    return ms3e(residuals, kappa).overall;
}

/// Scores of one (forecasting method, reconciliation method) grid cell.
struct CellScores {
    bool ok = false;
    std::string error;
    double hier_ms3e = 0.0;
    double coh_ms3e = 0.0;
    std::map<int, double> relmse_per_level;       // dimensionless, vs the base/none cell
    std::map<std::string, double> mse_per_node;   // units^2
};

struct EvaluationReport {
    std::string units = "kWh";
    std::vector<std::string> header;                       // config echo lines
    std::map<std::pair<std::string, std::string>, CellScores> cells;

    CellScores& cell(const std::string& forecasting, const std::string& reconciliation) {
        return cells[{forecasting, reconciliation}];
    }
};

/// Per-level MSE table from per-node MSEs and a node -> level association.
inline std::map<int, double> per_level_mse(const std::map<std::string, double>& per_node,
                                           const std::map<std::string, int>& level_of) {
    std::map<int, std::pair<double, int>> acc;
    for (const auto& [label, value] : per_node) {
        auto& slot = acc[level_of.at(label)];
        slot.first += value;
        slot.second += 1;
    }
    std::map<int, double> out;
    for (const auto& [level, slot] : acc) out[level] = slot.first / slot.second;
    return out;
}

}  // namespace hierf
