#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hierf/covariance.hpp"
#include "hierf/matrix.hpp"
#include "hierf/reconcile.hpp"
#include "hierf/summation.hpp"

namespace hierf {

enum class Activation { sigmoid, linear };
enum class TrainMode { base, multi_task, hierarchical };

inline std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::base: return "base";
        case TrainMode::multi_task: return "multi-task";
        case TrainMode::hierarchical: return "hierarchical";
    }
    throw std::invalid_argument("unknown train mode");
}

/**
 * Network shape and optimization settings. The default factory follows the
 * applied design: layer widths decreasing geometrically from input to
 * output, sigmoid with dropout 0.2 everywhere except the final linear
 * layer, loss weight alpha 0.75.
 */
struct NetConfig {
    std::vector<std::size_t> layer_sizes;  // input, hidden..., output
    std::vector<Activation> activations;   // per non-input layer
    std::vector<double> dropout;           // per non-input layer
    double alpha = 0.75;
    double learning_rate = 1e-3;
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    double momentum = 0.9;
    double grad_clip = 5.0;

    std::size_t layers() const { return activations.size(); }
    std::size_t input_size() const { return layer_sizes.front(); }
    std::size_t output_size() const { return layer_sizes.back(); }

    void validate() const {
        if (layer_sizes.size() < 2) throw std::invalid_argument("NetConfig: need input and output sizes");
        if (activations.size() != layer_sizes.size() - 1 || dropout.size() != activations.size())
            throw std::invalid_argument("NetConfig: activation/dropout count mismatch");
        if (activations.back() != Activation::linear || dropout.back() != 0.0)
            throw std::invalid_argument("NetConfig: last layer must be linear with zero dropout");
        if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("NetConfig: alpha must be in [0, 1]");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("NetConfig: learning rate must be positive");
        for (double p : dropout)
            if (p < 0.0 || p >= 1.0) throw std::invalid_argument("NetConfig: dropout must be in [0, 1)");
    }

    static NetConfig standard(std::size_t input, std::size_t output, std::size_t layers = 3,
                              double dropout_rate = 0.2) {
        if (layers == 0) throw std::invalid_argument("NetConfig: need at least one layer");
        NetConfig cfg;
        cfg.layer_sizes.push_back(input);
        const double ratio = static_cast<double>(output) / static_cast<double>(input);
        for (std::size_t l = 1; l < layers; ++l) {
            const double width = static_cast<double>(input) *
                                 std::pow(ratio, static_cast<double>(l) / static_cast<double>(layers));
            cfg.layer_sizes.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(width))));
        }
        cfg.layer_sizes.push_back(output);
        for (std::size_t l = 0; l + 1 < layers; ++l) {
            cfg.activations.push_back(Activation::sigmoid);
            cfg.dropout.push_back(dropout_rate);
        }
        cfg.activations.push_back(Activation::linear);
        cfg.dropout.push_back(0.0);
        return cfg;
    }
};

/// Layer weights and biases. Dropout is a forward-pass flag, not state.
struct NetModel {
    std::vector<Mat> weights;  // weights[l]: out x in
    std::vector<Vec> biases;
    std::vector<Activation> activations;
    std::vector<double> dropout;

    std::size_t layers() const { return weights.size(); }
    std::size_t input_size() const { return weights.front().cols(); }
    std::size_t output_size() const { return weights.back().rows(); }

    std::size_t parameter_count() const {
        std::size_t count = 0;
        for (std::size_t l = 0; l < weights.size(); ++l)
            count += weights[l].rows() * weights[l].cols() + biases[l].size();
        return count;
    }
};

/// Glorot-uniform initialization, deterministic under the config seed.
inline NetModel init_model(const NetConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    NetModel model;
    model.activations = cfg.activations;
    model.dropout = cfg.dropout;
    for (std::size_t l = 0; l + 1 < cfg.layer_sizes.size(); ++l) {
        const std::size_t fan_in = cfg.layer_sizes[l];
        const std::size_t fan_out = cfg.layer_sizes[l + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> uniform(-bound, bound);
        Mat w(fan_out, fan_in);
        for (auto& x : w.data()) x = uniform(rng);
        model.weights.push_back(std::move(w));
        model.biases.emplace_back(fan_out, 0.0);
    }
    return model;
}

struct ForwardTrace {
    std::vector<Vec> inputs;       // a_0 .. a_{L-1} as seen by each layer
    std::vector<Vec> activations;  // h_l = act(z_l), pre-dropout
    std::vector<Vec> keep_scale;   // dropout multiplier per unit (1 when inactive)
};

/// Deterministic given (model, x, rng state, training flag); dropout masks
/// are drawn only when training.
inline Vec forward(const NetModel& model, const Vec& x, bool training, std::mt19937_64& rng,
                   ForwardTrace* trace = nullptr) {
    if (x.size() != model.input_size()) throw std::invalid_argument("forward: input size mismatch");
    Vec a = x;
    if (trace) {
        trace->inputs.clear();
        trace->activations.clear();
        trace->keep_scale.clear();
    }
    for (std::size_t l = 0; l < model.layers(); ++l) {
        if (trace) trace->inputs.push_back(a);
        Vec z = matvec(model.weights[l], a);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += model.biases[l][i];
        Vec h(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) {
            h[i] = model.activations[l] == Activation::sigmoid ? 1.0 / (1.0 + std::exp(-z[i])) : z[i];
            if (!std::isfinite(h[i])) throw std::runtime_error("forward: non-finite activation");
        }
        Vec scale(z.size(), 1.0);
        const double p = model.dropout[l];
        if (training && p > 0.0) {
            std::bernoulli_distribution keep(1.0 - p);
            for (std::size_t i = 0; i < scale.size(); ++i)
                scale[i] = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
        }
        if (trace) {
            trace->activations.push_back(h);
            trace->keep_scale.push_back(scale);
        }
        a.resize(h.size());
        for (std::size_t i = 0; i < h.size(); ++i) a[i] = h[i] * scale[i];
    }
    return a;
}

// --- scaling ---------------------------------------------------------------

/// Per-series standard scaler fitted on training data only; the fit-range
/// end timestamp is kept so leakage can be asserted downstream.
struct Scaler {
    double mean = 0.0;
    double sd = 1.0;
};

struct ScalerSet {
    std::map<std::string, Scaler> by_label;
    std::int64_t fit_end = std::numeric_limits<std::int64_t>::min();

    static ScalerSet fit(const std::vector<std::string>& labels, const Mat& columns,
                         std::int64_t fit_end_stamp) {
        if (labels.size() != columns.cols()) throw std::invalid_argument("ScalerSet: label mismatch");
        if (columns.rows() == 0) throw std::invalid_argument("ScalerSet: no data to fit");
        ScalerSet set;
        set.fit_end = fit_end_stamp;
        for (std::size_t j = 0; j < labels.size(); ++j) {
            double mean = 0.0;
            for (std::size_t t = 0; t < columns.rows(); ++t) mean += columns(t, j);
            mean /= static_cast<double>(columns.rows());
            double var = 0.0;
            for (std::size_t t = 0; t < columns.rows(); ++t) {
                const double d = columns(t, j) - mean;
                var += d * d;
            }
            var /= static_cast<double>(columns.rows());
            double sd = std::sqrt(var);
            if (sd < 1e-12) sd = 1.0;  // constant series map to z = 0
            set.by_label[labels[j]] = Scaler{mean, sd};
        }
        return set;
    }

    static ScalerSet identity(const std::vector<std::string>& labels) {
        ScalerSet set;
        for (const auto& label : labels) set.by_label[label] = Scaler{};
        return set;
    }

    const Scaler& at(const std::string& label) const {
        auto it = by_label.find(label);
        if (it == by_label.end())
            throw std::invalid_argument("ScalerSet: scaler not fitted for '" + label + "'");
        return it->second;
    }

    double transform(const std::string& label, double x) const {
        const Scaler& s = at(label);
        return (x - s.mean) / s.sd;
    }

    /// Standard inverse: x = z * sd + mean.
    double inverse(const std::string& label, double z) const {
        const Scaler& s = at(label);
        return z * s.sd + s.mean;
    }
};

// --- losses ------------------------------------------------------------

/// Mean square loss over a scalar horizon.
inline double loss_base(const Vec& y, const Vec& yhat) {
    if (y.size() != yhat.size()) throw std::invalid_argument("loss_base: length mismatch");
    if (y.empty()) throw std::invalid_argument("loss_base: empty input");
    double acc = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) acc += (y[t] - yhat[t]) * (y[t] - yhat[t]);
    return acc / static_cast<double>(y.size());
}

/// Vector-error mean square loss, reduced by the mean over the n outputs.
inline double loss_hierarchical(const Mat& y, const Mat& yhat) {
    if (y.rows() != yhat.rows() || y.cols() != yhat.cols())
        throw std::invalid_argument("loss_hierarchical: shape mismatch");
    if (y.rows() == 0 || y.cols() == 0) throw std::invalid_argument("loss_hierarchical: empty input");
    double acc = 0.0;
    for (std::size_t t = 0; t < y.rows(); ++t)
        for (std::size_t i = 0; i < y.cols(); ++i) {
            const double e = y(t, i) - yhat(t, i);
            acc += e * e;
        }
    return acc / static_cast<double>(y.rows() * y.cols());
}

/**
 * The normalize / reconcile / re-normalize round trip as one affine map:
 * r(u) = u - D^{-1}(M(Du + c) - c) with M the GLS projection and D, c the
 * per-node scales and centers. Built once per batch, reused by loss and
 * gradient evaluation.
 */
class CoherencyOperator {
public:
    CoherencyOperator(const SummationMatrix& s, const CovarianceEstimate& sigma,
                      const ScalerSet& scaler) {
        const std::size_t n = s.n;
        scale_.resize(n);
        center_.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const Scaler& sc = scaler.at(s.row_layout[i]);
            scale_[i] = sc.sd;
            center_[i] = sc.mean;
        }

        // M = S (S^T Sigma^{-1} S)^{-1} S^T Sigma^{-1}, dense n x n
        const Mat ws = detail::weighted_columns(s, sigma);  // Sigma^{-1} S
        const Mat sd = s.dense();
        Mat normal(s.m, s.m);
        for (std::size_t p = 0; p < s.m; ++p)
            for (std::size_t q = 0; q < s.m; ++q) {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += sd(i, p) * ws(i, q);
                normal(p, q) = acc;
            }
        Mat lower;
        if (!try_cholesky(normal, lower))
            throw std::runtime_error("CoherencyOperator: singular S^T Sigma^{-1} S");
        const Mat k = chol_solve_mat(lower, ws.transposed());  // m x n
        projector_ = matmul(sd, k);                            // M

        // P = I - D^{-1} M D and the constant residual offset q = D^{-1}(I - M)c
        p_ = Mat(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                p_(i, j) = (i == j ? 1.0 : 0.0) - projector_(i, j) * scale_[j] / scale_[i];
        offset_.assign(n, 0.0);
        const Vec mc = matvec(projector_, center_);
        for (std::size_t i = 0; i < n; ++i) offset_[i] = (center_[i] - mc[i]) / scale_[i];
        pt_ = p_.transposed();
    }

    std::size_t n() const { return scale_.size(); }

    /// z-space coherency residual of one prediction row.
    Vec residual(const Vec& u) const {
        Vec r = matvec(p_, u);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] += offset_[i];
        return r;
    }

    /// Pulls an output-space residual gradient back through the round trip.
    Vec pullback(const Vec& r) const { return matvec(pt_, r); }

    const Mat& projection() const { return projector_; }

private:
    Vec scale_, center_, offset_;
    Mat projector_, p_, pt_;
};

/// Coherency loss of scaled predictions: mean over rows and outputs of the
/// squared difference between each prediction and its reconciled self.
inline double loss_coherency(const Mat& yhat_z, const CoherencyOperator& op) {
    if (yhat_z.cols() != op.n()) throw std::invalid_argument("loss_coherency: shape mismatch");
    if (yhat_z.rows() == 0) throw std::invalid_argument("loss_coherency: empty input");
    double acc = 0.0;
    for (std::size_t t = 0; t < yhat_z.rows(); ++t) {
        const Vec r = op.residual(yhat_z.row(t));
        for (double v : r) acc += v * v;
    }
    return acc / static_cast<double>(yhat_z.rows() * yhat_z.cols());
}

inline double loss_coherency(const Mat& yhat_z, const ScalerSet& scaler, const SummationMatrix& s,
                             const CovarianceEstimate& sigma) {
    return loss_coherency(yhat_z, CoherencyOperator(s, sigma, scaler));
}

/// alpha-weighted combination of the hierarchical and coherency losses.
inline double loss_combined(const Mat& y_z, const Mat& yhat_z, const ScalerSet& scaler,
                            const SummationMatrix& s, const CovarianceEstimate& sigma,
                            double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("loss_combined: alpha out of range");
    const double lh = loss_hierarchical(y_z, yhat_z);
    if (alpha == 1.0) return lh;
    return alpha * lh + (1.0 - alpha) * loss_coherency(yhat_z, scaler, s, sigma);
}

// --- gradients -----------------------------------------------------------

struct Grads {
    std::vector<Mat> weights;
    std::vector<Vec> biases;

    static Grads zeros_like(const NetModel& model) {
        Grads g;
        for (std::size_t l = 0; l < model.layers(); ++l) {
            g.weights.emplace_back(model.weights[l].rows(), model.weights[l].cols());
            g.biases.emplace_back(model.biases[l].size(), 0.0);
        }
        return g;
    }

    double norm() const {
        double acc = 0.0;
        for (const auto& w : weights)
            for (double v : w.data()) acc += v * v;
        for (const auto& b : biases)
            for (double v : b) acc += v * v;
        return std::sqrt(acc);
    }
};

namespace detail {

/// Backpropagates one sample's output gradient through the traced forward pass.
inline void backprop_sample(const NetModel& model, const ForwardTrace& trace, Vec delta, Grads& grads) {
    for (std::size_t li = model.layers(); li-- > 0;) {
        // through dropout, then the activation derivative
        for (std::size_t i = 0; i < delta.size(); ++i) {
            delta[i] *= trace.keep_scale[li][i];
            if (model.activations[li] == Activation::sigmoid) {
                const double h = trace.activations[li][i];
                delta[i] *= h * (1.0 - h);
            }
        }
        const Vec& input = trace.inputs[li];
        for (std::size_t i = 0; i < delta.size(); ++i) {
            grads.biases[li][i] += delta[i];
            for (std::size_t j = 0; j < input.size(); ++j)
                grads.weights[li](i, j) += delta[i] * input[j];
        }
        if (li > 0) {
            Vec next(input.size(), 0.0);
            for (std::size_t i = 0; i < delta.size(); ++i)
                for (std::size_t j = 0; j < input.size(); ++j)
                    next[j] += model.weights[li](i, j) * delta[i];
            delta = std::move(next);
        }
    }
}

}  // namespace detail

/**
 * Analytic gradients of alpha * L_h + (1 - alpha) * L_c over a batch.
 * Pass a null coherency operator (or alpha = 1) for the pure accuracy
 * losses; with one output column this reduces to the scalar base loss.
 */
inline Grads backward(const NetModel& model, const Mat& x, const Mat& y_target_z,
                      const CoherencyOperator* coherency, double alpha, bool training,
                      std::mt19937_64& rng) {
    if (x.rows() != y_target_z.rows()) throw std::invalid_argument("backward: row mismatch");
    if (y_target_z.cols() != model.output_size())
        throw std::invalid_argument("backward: output size mismatch");
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("backward: alpha out of range");
    const double h = static_cast<double>(x.rows());
    const double n = static_cast<double>(y_target_z.cols());
    const bool with_coherency = coherency != nullptr && alpha < 1.0;

    Grads grads = Grads::zeros_like(model);
    ForwardTrace trace;
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const Vec yhat = forward(model, x.row(t), training, rng, &trace);
        Vec g(yhat.size(), 0.0);
        for (std::size_t i = 0; i < yhat.size(); ++i)
            g[i] = alpha * 2.0 / (h * n) * (yhat[i] - y_target_z(t, i));
        if (with_coherency) {
            const Vec r = coherency->residual(yhat);
            const Vec pulled = coherency->pullback(r);
            for (std::size_t i = 0; i < yhat.size(); ++i)
                g[i] += (1.0 - alpha) * 2.0 / (h * n) * pulled[i];
        }
        detail::backprop_sample(model, trace, std::move(g), grads);
    }
    for (const auto& w : grads.weights)
        for (double v : w.data())
            if (!std::isfinite(v)) throw std::runtime_error("backward: non-finite gradient");
    return grads;
}

// --- optimizer ------------------------------------------------------------

struct SgdState {
    std::vector<Mat> vw;
    std::vector<Vec> vb;

    static SgdState zeros_like(const NetModel& model) {
        SgdState s;
        for (std::size_t l = 0; l < model.layers(); ++l) {
            s.vw.emplace_back(model.weights[l].rows(), model.weights[l].cols());
            s.vb.emplace_back(model.biases[l].size(), 0.0);
        }
        return s;
    }
};

/// Momentum SGD with global gradient-norm clipping.
inline void sgd_step(NetModel& model, const Grads& grads, SgdState& state, double lr,
                     double momentum, double clip) {
    double scale = 1.0;
    if (clip > 0.0) {
        const double norm = grads.norm();
        if (norm > clip) scale = clip / norm;
    }
    for (std::size_t l = 0; l < model.layers(); ++l) {
        for (std::size_t idx = 0; idx < model.weights[l].data().size(); ++idx) {
            double& v = state.vw[l].data()[idx];
            v = momentum * v - lr * scale * grads.weights[l].data()[idx];
            model.weights[l].data()[idx] += v;
        }
        for (std::size_t i = 0; i < model.biases[l].size(); ++i) {
            double& v = state.vb[l][i];
            v = momentum * v - lr * scale * grads.biases[l][i];
            model.biases[l][i] += v;
        }
    }
}

// --- windowed training ------------------------------------------------------

/// One rolling-origin batch: raw-space features and targets plus the
/// provenance timestamps used by the anti-leakage checks.
struct WindowBatch {
    Mat train_x;
    Mat train_y;
    Mat test_x;
    Mat test_y;
    std::vector<std::int64_t> test_origins;
    std::int64_t train_end = 0;
    std::int64_t test_start = 0;
};

struct WindowedDataset {
    std::vector<std::string> node_labels;     // y-layout order
    std::vector<std::string> feature_labels;  // one per feature column
    std::vector<WindowBatch> batches;
    // base mode: feature columns per node; empty means every column
    std::map<std::string, std::vector<std::size_t>> features_for_node;
};

struct TrainResult {
    std::vector<NetModel> models;
    std::vector<ForecastBundle> forecasts;        // x-space, chronological
    std::vector<CovarianceEstimate> sigmas_used;  // per batch, hierarchical mode
    std::vector<double> batch_losses;             // final training loss per batch
    ResidualStore residuals;                      // test-window base errors, x-space
    std::vector<std::int64_t> scaler_fit_ends;    // per batch, for leakage assertions
};

namespace detail {

inline Mat scale_columns(const Mat& raw, const std::vector<std::string>& labels,
                         const ScalerSet& scaler) {
    Mat out(raw.rows(), raw.cols());
    for (std::size_t j = 0; j < raw.cols(); ++j)
        for (std::size_t t = 0; t < raw.rows(); ++t)
            out(t, j) = scaler.transform(labels[j], raw(t, j));
    return out;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Epoch/minibatch SGD over pre-scaled data. Throws on divergence.
inline double fit_network(NetModel& model, const Mat& xz, const Mat& yz,
                          const CoherencyOperator* coherency, const NetConfig& cfg,
                          std::mt19937_64& rng) {
    SgdState state = SgdState::zeros_like(model);
    std::vector<std::size_t> order(xz.rows());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t bs = std::max<std::size_t>(1, std::min(cfg.batch_size, xz.rows()));

    double last_loss = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t stop = std::min(order.size(), start + bs);
            Mat bx(stop - start, xz.cols());
            Mat by(stop - start, yz.cols());
            for (std::size_t r = start; r < stop; ++r) {
                for (std::size_t j = 0; j < xz.cols(); ++j) bx(r - start, j) = xz(order[r], j);
                for (std::size_t j = 0; j < yz.cols(); ++j) by(r - start, j) = yz(order[r], j);
            }
            Grads grads = backward(model, bx, by, coherency, cfg.alpha, true, rng);
            sgd_step(model, grads, state, cfg.learning_rate, cfg.momentum, cfg.grad_clip);
        }
        // epoch loss on the full training set, inference mode
        Mat pred(xz.rows(), yz.cols());
        for (std::size_t t = 0; t < xz.rows(); ++t) {
            const Vec out = forward(model, xz.row(t), false, rng);
            for (std::size_t j = 0; j < out.size(); ++j) pred(t, j) = out[j];
        }
        double loss = loss_hierarchical(yz, pred) * cfg.alpha;
        if (coherency != nullptr && cfg.alpha < 1.0)
            loss += (1.0 - cfg.alpha) * loss_coherency(pred, *coherency);
        if (!std::isfinite(loss))
            throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch));
        last_loss = loss;
    }
    return last_loss;
}

}  // namespace detail

/**
 * Rolling-window training. base: one single-output net per node under the
 * scalar loss. multi-task: one n-output net, alpha = 1. hierarchical: one
 * n-output net under the combined loss with the adaptive covariance
 * schedule (identity for the first batch, then the tagged estimator fitted
 * on the previous batches' test residuals).
 */
inline TrainResult train(TrainMode mode, const WindowedDataset& data, const SummationMatrix& s,
                         const std::map<std::string, int>& level_of, NetConfig config,
                         CovMethod schedule = CovMethod::hvar) {
    if (data.batches.size() < 2)
        throw std::invalid_argument("train: need at least 2 rolling windows");
    if (data.node_labels != s.row_layout)
        throw std::invalid_argument("train: dataset labels do not match the y layout");
    const std::size_t n = data.node_labels.size();

    TrainResult result;

    // models are re-trained from scratch each batch on the expanded window;
    // seeds derive from (config seed, model index)
    for (std::size_t b = 0; b < data.batches.size(); ++b) {
        const WindowBatch& batch = data.batches[b];
        if (batch.train_end >= batch.test_start)
            throw std::invalid_argument("train: training range must end before the test range");

        ScalerSet target_scaler = ScalerSet::fit(data.node_labels, batch.train_y, batch.train_end);
        ScalerSet feature_scaler = ScalerSet::fit(data.feature_labels, batch.train_x, batch.train_end);
        result.scaler_fit_ends.push_back(target_scaler.fit_end);
        const Mat xz = detail::scale_columns(batch.train_x, data.feature_labels, feature_scaler);
        const Mat yz = detail::scale_columns(batch.train_y, data.node_labels, target_scaler);
        const Mat test_xz = detail::scale_columns(batch.test_x, data.feature_labels, feature_scaler);

        CovarianceEstimate sigma;
        std::unique_ptr<CoherencyOperator> coherency;
        if (mode == TrainMode::hierarchical) {
            // the schedule starts from identity; later batches use the tagged
            // estimator once the residual history can support it
            const std::size_t need =
                (schedule == CovMethod::cov || schedule == CovMethod::kcov) ? 3 : 2;
            const bool residual_free = schedule == CovMethod::id || schedule == CovMethod::str;
            if (b == 0 || (!residual_free && result.residuals.sample_count() < need))
                sigma = estimate(CovMethod::id, s, ResidualStore{});
            else
                sigma = estimate(schedule, s, result.residuals, level_of);
            result.sigmas_used.push_back(sigma);
            coherency = std::make_unique<CoherencyOperator>(s, sigma, target_scaler);
        }

        NetConfig cfg = config;
        if (mode == TrainMode::multi_task) cfg.alpha = 1.0;

        Mat predictions(batch.test_x.rows(), n);
        double batch_loss = 0.0;
        if (mode == TrainMode::base) {
            for (std::size_t node = 0; node < n; ++node) {
                const std::string& label = data.node_labels[node];
                std::vector<std::size_t> cols;
                auto chosen = data.features_for_node.find(label);
                if (chosen != data.features_for_node.end()) cols = chosen->second;
                else
                    for (std::size_t j = 0; j < data.feature_labels.size(); ++j) cols.push_back(j);

                Mat node_x(xz.rows(), cols.size());
                Mat node_test(test_xz.rows(), cols.size());
                for (std::size_t idx = 0; idx < cols.size(); ++idx) {
                    for (std::size_t t = 0; t < xz.rows(); ++t) node_x(t, idx) = xz(t, cols[idx]);
                    for (std::size_t t = 0; t < test_xz.rows(); ++t) node_test(t, idx) = test_xz(t, cols[idx]);
                }
                Mat node_y(yz.rows(), 1);
                for (std::size_t t = 0; t < yz.rows(); ++t) node_y(t, 0) = yz(t, node);

                NetConfig node_cfg = cfg;
                node_cfg.layer_sizes = NetConfig::standard(cols.size(), 1, cfg.layers()).layer_sizes;
                node_cfg.alpha = 1.0;
                std::mt19937_64 rng(detail::mix_seed(cfg.seed, node));
                NetModel model = init_model(node_cfg, rng);
                batch_loss += detail::fit_network(model, node_x, node_y, nullptr, node_cfg, rng);
                for (std::size_t t = 0; t < node_test.rows(); ++t)
                    predictions(t, node) = forward(model, node_test.row(t), false, rng)[0];
                if (b + 1 == data.batches.size()) result.models.push_back(std::move(model));
            }
            batch_loss /= static_cast<double>(n);
        } else {
            std::mt19937_64 rng(detail::mix_seed(cfg.seed, 0));
            NetModel model = init_model(cfg, rng);
            batch_loss = detail::fit_network(model, xz, yz, coherency.get(), cfg, rng);
            for (std::size_t t = 0; t < test_xz.rows(); ++t) {
                const Vec out = forward(model, test_xz.row(t), false, rng);
                for (std::size_t j = 0; j < n; ++j) predictions(t, j) = out[j];
            }
            if (b + 1 == data.batches.size()) result.models.push_back(std::move(model));
        }
        result.batch_losses.push_back(batch_loss);

        // inverse-transform to physical units, emit bundles, record residuals
        for (std::size_t t = 0; t < predictions.rows(); ++t) {
            ForecastBundle bundle;
            bundle.origin = batch.test_origins[t];
            bundle.tag = mode == TrainMode::base
                             ? BundleTag::base
                             : (mode == TrainMode::multi_task ? BundleTag::multi_task
                                                              : BundleTag::hierarchical);
            bundle.values.resize(n);
            Vec residual(n);
            for (std::size_t j = 0; j < n; ++j) {
                bundle.values[j] = target_scaler.inverse(data.node_labels[j], predictions(t, j));
                residual[j] = batch.test_y(t, j) - bundle.values[j];
            }
            result.residuals.add_sample(data.node_labels, residual);
            result.forecasts.push_back(std::move(bundle));
        }

        if (mode != TrainMode::hierarchical) {
            // keep the per-batch sigma list aligned for audit consumers
            result.sigmas_used.push_back(estimate(CovMethod::id, s, ResidualStore{}));
        }
    }
    return result;
}

// --- checkpoint serialization ------------------------------------------

inline void write_model(std::ostream& os, const NetModel& model, std::uint64_t seed) {
    os << "hierf-net 1\n";
    os << "seed " << seed << '\n';
    os << "layers " << model.layers() << '\n';
    os.precision(17);
    for (std::size_t l = 0; l < model.layers(); ++l) {
        os << "layer " << model.weights[l].rows() << ' ' << model.weights[l].cols() << ' '
           << (model.activations[l] == Activation::sigmoid ? "sigmoid" : "linear") << ' '
           << model.dropout[l] << '\n';
        for (std::size_t i = 0; i < model.weights[l].rows(); ++i) {
            for (std::size_t j = 0; j < model.weights[l].cols(); ++j) {
                if (j) os << ' ';
                os << model.weights[l](i, j);
            }
            os << '\n';
        }
        for (std::size_t i = 0; i < model.biases[l].size(); ++i) {
            if (i) os << ' ';
            os << model.biases[l][i];
        }
        os << '\n';
    }
}

inline NetModel read_model(std::istream& is) {
    std::string magic;
    int version = 0;
    if (!(is >> magic >> version) || magic != "hierf-net" || version != 1)
        throw std::invalid_argument("read_model: bad checkpoint header");
    std::string key;
    std::uint64_t seed = 0;
    std::size_t layers = 0;
    if (!(is >> key >> seed) || key != "seed") throw std::invalid_argument("read_model: missing seed");
    if (!(is >> key >> layers) || key != "layers")
        throw std::invalid_argument("read_model: missing layer count");
    NetModel model;
    for (std::size_t l = 0; l < layers; ++l) {
        std::size_t rows = 0, cols = 0;
        std::string act;
        double dropout = 0.0;
        if (!(is >> key >> rows >> cols >> act >> dropout) || key != "layer")
            throw std::invalid_argument("read_model: malformed layer header");
        Mat w(rows, cols);
        for (auto& v : w.data())
            if (!(is >> v)) throw std::invalid_argument("read_model: truncated weights");
        Vec b(rows);
        for (auto& v : b)
            if (!(is >> v)) throw std::invalid_argument("read_model: truncated biases");
        model.weights.push_back(std::move(w));
        model.biases.push_back(std::move(b));
        model.activations.push_back(act == "sigmoid" ? Activation::sigmoid : Activation::linear);
        model.dropout.push_back(dropout);
    }
    return model;
}

}  // namespace hierf
