#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>

#include "hierf/learner.hpp"
#include "test_util.hpp"

using namespace hierf;

namespace {

Tree tiny_tree() { return build_tree({{"p", "a"}, {"p", "b"}}, {"a", "b"}); }

CovarianceEstimate identity_sigma(std::size_t n) {
    CovarianceEstimate est;
    est.method = CovMethod::id;
    est.sigma = Mat::identity(n);
    est.mask = Mat::identity(n);
    return est;
}

NetModel tiny_net(std::initializer_list<std::size_t> sizes, std::uint64_t seed) {
    NetConfig cfg;
    cfg.layer_sizes = sizes;
    for (std::size_t l = 0; l + 1 < cfg.layer_sizes.size(); ++l) {
        const bool last = l + 2 == cfg.layer_sizes.size();
        cfg.activations.push_back(last ? Activation::linear : Activation::sigmoid);
        cfg.dropout.push_back(0.0);
    }
    cfg.seed = seed;
    std::mt19937_64 rng(seed);
    return init_model(cfg, rng);
}

double eval_loss(const NetModel& model, const Mat& x, const Mat& yz,
                 const CoherencyOperator* op, double alpha) {
    std::mt19937_64 rng(0);
    Mat pred(x.rows(), model.output_size());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const Vec out = forward(model, x.row(t), false, rng);
        for (std::size_t j = 0; j < out.size(); ++j) pred(t, j) = out[j];
    }
    double loss = alpha * loss_hierarchical(yz, pred);
    if (op != nullptr && alpha < 1.0) loss += (1.0 - alpha) * loss_coherency(pred, *op);
    return loss;
}

/// Central finite differences over every parameter of the model.
void check_gradients(NetModel model, const Mat& x, const Mat& yz, const CoherencyOperator* op,
                     double alpha) {
    REQUIRE(model.parameter_count() <= 100);
    std::mt19937_64 rng(0);
    Grads analytic = backward(model, x, yz, op, alpha, false, rng);
    const double eps = 1e-5;
    auto check_pair = [](double a, double n) {
        CHECK(std::fabs(a - n) <= 1e-4 * (1e-6 + std::max(std::fabs(a), std::fabs(n))));
    };
    for (std::size_t l = 0; l < model.layers(); ++l) {
        for (std::size_t idx = 0; idx < model.weights[l].data().size(); ++idx) {
            double& w = model.weights[l].data()[idx];
            const double saved = w;
            w = saved + eps;
            const double up = eval_loss(model, x, yz, op, alpha);
            w = saved - eps;
            const double down = eval_loss(model, x, yz, op, alpha);
            w = saved;
            check_pair(analytic.weights[l].data()[idx], (up - down) / (2.0 * eps));
        }
        for (std::size_t i = 0; i < model.biases[l].size(); ++i) {
            double& bref = model.biases[l][i];
            const double saved = bref;
            bref = saved + eps;
            const double up = eval_loss(model, x, yz, op, alpha);
            bref = saved - eps;
            const double down = eval_loss(model, x, yz, op, alpha);
            bref = saved;
            check_pair(analytic.biases[l][i], (up - down) / (2.0 * eps));
        }
    }
}

Mat random_mat(std::mt19937& rng, std::size_t rows, std::size_t cols, double spread = 2.0) {
    std::uniform_real_distribution<double> dist(-spread, spread);
    Mat out(rows, cols);
    for (auto& v : out.data()) v = dist(rng);
    return out;
}

}  // namespace

TEST_CASE("forward pass basics") {
    // zero weights and biases, linear output: identically zero
    NetModel zero = tiny_net({3, 2}, 1);
    for (auto& w : zero.weights)
        for (auto& v : w.data()) v = 0.0;
    std::mt19937_64 rng(5);
    CHECK(forward(zero, {1.0, -2.0, 3.0}, false, rng) == Vec{0.0, 0.0});

    // a single linear layer is a plain affine map
    NetModel affine = tiny_net({2, 2}, 2);
    affine.weights[0](0, 0) = 1.0;
    affine.weights[0](0, 1) = 2.0;
    affine.weights[0](1, 0) = -1.0;
    affine.weights[0](1, 1) = 0.5;
    affine.biases[0] = {0.25, -0.5};
    Vec out = forward(affine, {2.0, 1.0}, false, rng);
    CHECK(out[0] == doctest::Approx(4.25).epsilon(1e-15));
    CHECK(out[1] == doctest::Approx(-2.0).epsilon(1e-15));

    // identical seeds give identical stochastic passes
    NetConfig cfg = NetConfig::standard(4, 2);
    cfg.seed = 9;
    std::mt19937_64 r1(cfg.seed), r2(cfg.seed);
    NetModel m1 = init_model(cfg, r1), m2 = init_model(cfg, r2);
    Vec x{0.5, -1.0, 2.0, 0.0};
    CHECK(forward(m1, x, true, r1) == forward(m2, x, true, r2));

    // dropout is inert at inference: repeated passes agree bitwise
    Vec a = forward(m1, x, false, r1);
    Vec b = forward(m1, x, false, r1);
    CHECK(a == b);

    CHECK_THROWS_AS(forward(m1, {1.0}, false, r1), std::invalid_argument);
}

TEST_CASE("loss_base handles the worked scalar cases") {
    CHECK(loss_base({1, 2, 3}, {1, 2, 3}) == 0.0);
    CHECK(loss_base({1, 3}, {0, 0}) == 5.0);
    CHECK(loss_base({2}, {1}) == 1.0);
    CHECK_THROWS_AS(loss_base({}, {}), std::invalid_argument);
}

TEST_CASE("loss_hierarchical reduces by the mean over outputs") {
    Mat y(1, 2), yhat(1, 2);
    y(0, 0) = 1.0;
    y(0, 1) = -1.0;
    CHECK(loss_hierarchical(y, y) == 0.0);
    CHECK(loss_hierarchical(y, yhat) == 1.0);  // errors (1, -1): (1 + 1) / 2

    std::mt19937 rng(3);
    Mat a = random_mat(rng, 4, 3), b = random_mat(rng, 4, 3);
    Mat doubled_a = a, doubled_b = b;
    for (auto& v : doubled_a.data()) v *= 2.0;
    for (auto& v : doubled_b.data()) v *= 2.0;
    CHECK(loss_hierarchical(doubled_a, doubled_b) ==
          doctest::Approx(4.0 * loss_hierarchical(a, b)).epsilon(1e-12));

    CHECK_THROWS_AS(loss_hierarchical(Mat(2, 2), Mat(2, 3)), std::invalid_argument);
}

TEST_CASE("loss_coherency measures the round-trip residual") {
    SummationMatrix s = summation_matrix(tiny_tree());
    ScalerSet identity = ScalerSet::identity(s.row_layout);
    CovarianceEstimate sigma = identity_sigma(3);

    // coherent prediction: zero loss
    Mat coherent(1, 3);
    coherent(0, 0) = 4;
    coherent(0, 1) = 2;
    coherent(0, 2) = 2;
    CHECK(loss_coherency(coherent, identity, s, sigma) == doctest::Approx(0.0).epsilon(1e-15));

    // (5, 2, 2) reconciles to (14/3, 7/3, 7/3): residual (1/3, -1/3, -1/3),
    // mean over the three outputs of squares = 1/9
    Mat off(1, 3);
    off(0, 0) = 5;
    off(0, 1) = 2;
    off(0, 2) = 2;
    CHECK(loss_coherency(off, identity, s, sigma) == doctest::Approx(1.0 / 9.0).epsilon(1e-12));

    // invariant under positive rescaling of sigma
    CovarianceEstimate scaled = sigma;
    for (auto& v : scaled.sigma.data()) v *= 42.0;
    CHECK(loss_coherency(off, identity, s, scaled) ==
          doctest::Approx(loss_coherency(off, identity, s, sigma)).epsilon(1e-12));

    // non-trivial scalers shift the round trip
    ScalerSet fitted;
    fitted.by_label["p"] = Scaler{10.0, 2.0};
    fitted.by_label["a"] = Scaler{5.0, 1.0};
    fitted.by_label["b"] = Scaler{5.0, 1.0};
    CoherencyOperator op(s, sigma, fitted);
    // z = 0 maps to x = (10, 5, 5), coherent: zero residual
    CHECK(norm_inf(op.residual({0.0, 0.0, 0.0})) <= 1e-12);
}

TEST_CASE("loss_combined is the alpha blend") {
    SummationMatrix s = summation_matrix(tiny_tree());
    ScalerSet identity = ScalerSet::identity(s.row_layout);
    CovarianceEstimate sigma = identity_sigma(3);
    std::mt19937 rng(8);
    Mat y = random_mat(rng, 5, 3), yhat = random_mat(rng, 5, 3);

    CHECK(loss_combined(y, yhat, identity, s, sigma, 1.0) ==
          doctest::Approx(loss_hierarchical(y, yhat)).epsilon(1e-15));
    CHECK(loss_combined(y, yhat, identity, s, sigma, 0.0) ==
          doctest::Approx(loss_coherency(yhat, identity, s, sigma)).epsilon(1e-15));

    // exactly linear in alpha
    const double at_0 = loss_combined(y, yhat, identity, s, sigma, 0.0);
    const double at_1 = loss_combined(y, yhat, identity, s, sigma, 1.0);
    for (double alpha : {0.25, 0.5, 0.75}) {
        CHECK(loss_combined(y, yhat, identity, s, sigma, alpha) ==
              doctest::Approx(alpha * at_1 + (1.0 - alpha) * at_0).epsilon(1e-12));
    }

    CHECK(NetConfig::standard(4, 3).alpha == 0.75);
    CHECK_THROWS_AS(loss_combined(y, yhat, identity, s, sigma, 1.5), std::invalid_argument);
}

TEST_CASE("single linear layer gradient equals the least-squares form") {
    // alpha = 1, one linear layer: dL/dW = 2/(h*n) * (Yhat - Y)^T X
    NetModel model = tiny_net({3, 2}, 4);
    std::mt19937 rng(12);
    Mat x = random_mat(rng, 6, 3), y = random_mat(rng, 6, 2);
    std::mt19937_64 grng(0);
    Grads grads = backward(model, x, y, nullptr, 1.0, false, grng);

    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double expected = 0.0;
            for (std::size_t t = 0; t < 6; ++t) {
                double pred = model.biases[0][i];
                for (std::size_t k = 0; k < 3; ++k) pred += model.weights[0](i, k) * x(t, k);
                expected += 2.0 / (6.0 * 2.0) * (pred - y(t, i)) * x(t, j);
            }
            CHECK(grads.weights[0](i, j) == doctest::Approx(expected).epsilon(1e-12));
        }
}

TEST_CASE("analytic gradients match central finite differences") {
    std::mt19937 rng(2);
    SummationMatrix s = summation_matrix(tiny_tree());
    CovarianceEstimate sigma = identity_sigma(3);

    // scalar base loss (single output)
    check_gradients(tiny_net({4, 3, 1}, 7), random_mat(rng, 5, 4), random_mat(rng, 5, 1), nullptr, 1.0);

    // hierarchical loss (multi-output)
    check_gradients(tiny_net({4, 4, 3}, 8), random_mat(rng, 4, 4), random_mat(rng, 4, 3), nullptr, 1.0);

    // coherency loss alone and combined, with a non-trivial scaling round trip
    ScalerSet fitted;
    fitted.by_label["p"] = Scaler{3.0, 2.5};
    fitted.by_label["a"] = Scaler{1.0, 0.5};
    fitted.by_label["b"] = Scaler{2.0, 1.5};
    CoherencyOperator op(s, sigma, fitted);
    check_gradients(tiny_net({4, 4, 3}, 9), random_mat(rng, 4, 4), random_mat(rng, 4, 3), &op, 0.0);
    check_gradients(tiny_net({4, 4, 3}, 10), random_mat(rng, 4, 4), random_mat(rng, 4, 3), &op, 0.75);

    // a non-diagonal weight matrix through the same path
    std::mt19937 srng(55);
    Mat a = random_mat(srng, 3, 3, 1.0);
    CovarianceEstimate full;
    full.method = CovMethod::populated;
    full.sigma = matmul(a.transposed(), a);
    for (std::size_t i = 0; i < 3; ++i) full.sigma(i, i) += 1.5;
    full.mask = Mat(3, 3, 1.0);
    CoherencyOperator op_full(s, full, fitted);
    check_gradients(tiny_net({3, 3, 3}, 11), random_mat(rng, 4, 3), random_mat(rng, 4, 3), &op_full, 0.6);
}

TEST_CASE("zero error with coherent output gives a zero gradient") {
    SummationMatrix s = summation_matrix(tiny_tree());
    CovarianceEstimate sigma = identity_sigma(3);
    ScalerSet identity = ScalerSet::identity(s.row_layout);
    CoherencyOperator op(s, sigma, identity);

    NetModel model = tiny_net({2, 3}, 6);
    for (auto& v : model.weights[0].data()) v = 0.0;
    model.biases[0] = {4.0, 2.0, 2.0};  // coherent constant output

    Mat x(3, 2);
    Mat y(3, 3);
    for (std::size_t t = 0; t < 3; ++t) {
        x(t, 0) = static_cast<double>(t);
        x(t, 1) = -1.0;
        y(t, 0) = 4.0;
        y(t, 1) = 2.0;
        y(t, 2) = 2.0;
    }
    std::mt19937_64 rng(0);
    Grads grads = backward(model, x, y, &op, 0.5, false, rng);
    CHECK(grads.norm() <= 1e-12);
}

TEST_CASE("scaler fit, floor, and anti-leakage stamp") {
    Mat cols(4, 2);
    const double c0[4] = {1.0, 2.0, 3.0, 4.0}, c1[4] = {7.0, 7.0, 7.0, 7.0};
    for (int t = 0; t < 4; ++t) {
        cols(t, 0) = c0[t];
        cols(t, 1) = c1[t];
    }
    ScalerSet set = ScalerSet::fit({"x", "flat"}, cols, 99);
    CHECK(set.fit_end == 99);
    CHECK(set.at("x").mean == 2.5);
    CHECK(set.at("flat").sd == 1.0);  // floored constant series
    CHECK(set.transform("flat", 7.0) == 0.0);
    CHECK(set.inverse("x", set.transform("x", 3.3)) == doctest::Approx(3.3).epsilon(1e-15));
    CHECK_THROWS_AS(set.at("missing"), std::invalid_argument);
}

namespace {

/// Small synthetic rolling dataset over the tiny 3-node tree.
WindowedDataset make_dataset(const SummationMatrix& s, std::size_t batches, std::size_t train0,
                             std::size_t test_size, std::uint64_t seed, bool constant = false) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.3);
    const std::size_t total = train0 + batches * test_size;
    // leaf signals plus noisy aggregates
    Mat y(total, s.n);
    Mat x(total, 2);
    for (std::size_t t = 0; t < total; ++t) {
        const double wave = std::sin(2.0 * 3.14159265358979 * static_cast<double>(t) / 24.0);
        Vec leaves{constant ? 5.0 : 5.0 + wave + noise(rng),
                   constant ? 3.0 : 3.0 - wave + noise(rng)};
        Vec full = aggregate(s, leaves);
        for (std::size_t i = 0; i < s.n; ++i) y(t, i) = full[i] + (constant ? 0.0 : 0.1 * noise(rng));
        x(t, 0) = t > 0 ? y(t - 1, 1) : 0.0;  // lag-1 of each leaf
        x(t, 1) = t > 0 ? y(t - 1, 2) : 0.0;
    }

    WindowedDataset data;
    data.node_labels = s.row_layout;
    data.feature_labels = {"a", "b"};
    for (std::size_t b = 0; b < batches; ++b) {
        WindowBatch batch;
        const std::size_t train_stop = train0 + b * test_size;
        const std::size_t test_stop = train_stop + test_size;
        batch.train_x = Mat(train_stop, 2);
        batch.train_y = Mat(train_stop, s.n);
        for (std::size_t t = 0; t < train_stop; ++t) {
            for (std::size_t j = 0; j < 2; ++j) batch.train_x(t, j) = x(t, j);
            for (std::size_t j = 0; j < s.n; ++j) batch.train_y(t, j) = y(t, j);
        }
        batch.test_x = Mat(test_size, 2);
        batch.test_y = Mat(test_size, s.n);
        for (std::size_t t = train_stop; t < test_stop; ++t) {
            for (std::size_t j = 0; j < 2; ++j) batch.test_x(t - train_stop, j) = x(t, j);
            for (std::size_t j = 0; j < s.n; ++j) batch.test_y(t - train_stop, j) = y(t, j);
            batch.test_origins.push_back(static_cast<std::int64_t>(t));
        }
        batch.train_end = static_cast<std::int64_t>(train_stop - 1);
        batch.test_start = static_cast<std::int64_t>(train_stop);
        data.batches.push_back(std::move(batch));
    }
    return data;
}

NetConfig quick_config(std::size_t input, std::size_t output, std::uint64_t seed) {
    NetConfig cfg = NetConfig::standard(input, output, 2, 0.0);
    cfg.epochs = 60;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 16;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("training learns a constant series to near-zero error") {
    SummationMatrix s = summation_matrix(tiny_tree());
    WindowedDataset data = make_dataset(s, 2, 48, 12, 5, true);
    for (TrainMode mode : {TrainMode::base, TrainMode::multi_task, TrainMode::hierarchical}) {
        TrainResult result = train(mode, data, s, tiny_tree().level, quick_config(2, 3, 1));
        double err = 0.0;
        std::size_t count = 0;
        std::size_t idx = 0;
        for (std::size_t b = 0; b < data.batches.size(); ++b)
            for (std::size_t t = 0; t < data.batches[b].test_origins.size(); ++t, ++idx)
                for (std::size_t j = 0; j < s.n; ++j) {
                    const double e = result.forecasts[idx].values[j] - data.batches[b].test_y(t, j);
                    err += e * e;
                    ++count;
                }
        CHECK(err / static_cast<double>(count) < 1e-3);
    }
}

TEST_CASE("training is deterministic under a fixed seed") {
    SummationMatrix s = summation_matrix(tiny_tree());
    WindowedDataset data = make_dataset(s, 2, 48, 12, 6);
    NetConfig cfg = quick_config(2, 3, 21);
    cfg.dropout = {0.2, 0.0};
    TrainResult r1 = train(TrainMode::hierarchical, data, s, tiny_tree().level, cfg);
    TrainResult r2 = train(TrainMode::hierarchical, data, s, tiny_tree().level, cfg);
    REQUIRE(r1.models.size() == r2.models.size());
    for (std::size_t m = 0; m < r1.models.size(); ++m)
        for (std::size_t l = 0; l < r1.models[m].layers(); ++l)
            CHECK(r1.models[m].weights[l] == r2.models[m].weights[l]);
    REQUIRE(r1.forecasts.size() == r2.forecasts.size());
    for (std::size_t i = 0; i < r1.forecasts.size(); ++i)
        CHECK(r1.forecasts[i].values == r2.forecasts[i].values);
}

TEST_CASE("hierarchical schedule starts at identity then uses test residuals") {
    Tree t = tiny_tree();
    SummationMatrix s = summation_matrix(t);
    WindowedDataset data = make_dataset(s, 3, 48, 12, 7);
    TrainResult result = train(TrainMode::hierarchical, data, s, t.level, quick_config(2, 3, 33),
                               CovMethod::hvar);
    REQUIRE(result.sigmas_used.size() == 3);
    CHECK(result.sigmas_used[0].method == CovMethod::id);
    CHECK(result.sigmas_used[0].sigma == Mat::identity(3));
    CHECK(result.sigmas_used[1].method == CovMethod::hvar);

    // recompute the expected batch-2 sigma from batch-1 test residuals only
    ResidualStore expected;
    for (std::size_t tstep = 0; tstep < data.batches[0].test_origins.size(); ++tstep) {
        Vec residual(s.n);
        for (std::size_t j = 0; j < s.n; ++j)
            residual[j] = data.batches[0].test_y(tstep, j) - result.forecasts[tstep].values[j];
        expected.add_sample(data.node_labels, residual);
    }
    CovarianceEstimate want = estimate(CovMethod::hvar, s, expected);
    for (std::size_t i = 0; i < s.n; ++i)
        CHECK(result.sigmas_used[1].sigma(i, i) == doctest::Approx(want.sigma(i, i)).epsilon(1e-12));

    // scaler fit stamps never reach into the consuming test window
    for (std::size_t b = 0; b < data.batches.size(); ++b)
        CHECK(result.scaler_fit_ends[b] < data.batches[b].test_start);
}

TEST_CASE("train rejects short window plans") {
    SummationMatrix s = summation_matrix(tiny_tree());
    WindowedDataset data = make_dataset(s, 1, 48, 12, 8);
    CHECK_THROWS_AS(train(TrainMode::multi_task, data, s, tiny_tree().level, quick_config(2, 3, 1)),
                    std::invalid_argument);
}

TEST_CASE("divergent training aborts with diagnostics") {
    SummationMatrix s = summation_matrix(tiny_tree());
    WindowedDataset data = make_dataset(s, 2, 48, 12, 9);
    NetConfig cfg = quick_config(2, 3, 2);
    cfg.learning_rate = 1e9;
    cfg.grad_clip = 0.0;  // no clipping, let it blow up
    CHECK_THROWS_AS(train(TrainMode::multi_task, data, s, tiny_tree().level, cfg),
                    std::runtime_error);
}

TEST_CASE("model checkpoints round-trip") {
    NetConfig cfg = NetConfig::standard(5, 3);
    cfg.seed = 77;
    std::mt19937_64 rng(cfg.seed);
    NetModel model = init_model(cfg, rng);
    std::ostringstream os;
    write_model(os, model, cfg.seed);
    std::istringstream is(os.str());
    NetModel back = read_model(is);
    REQUIRE(back.layers() == model.layers());
    for (std::size_t l = 0; l < model.layers(); ++l) {
        CHECK(back.weights[l] == model.weights[l]);
        CHECK(back.biases[l] == model.biases[l]);
        CHECK(back.activations[l] == model.activations[l]);
        CHECK(back.dropout[l] == model.dropout[l]);
    }
    std::mt19937_64 r2(1);
    Vec x{1.0, 2.0, 3.0, 4.0, 5.0};
    CHECK(forward(back, x, false, r2) == forward(model, x, false, r2));
}
