#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "hierf/covariance.hpp"
#include "hierf/summation.hpp"
#include "hierf/tree.hpp"
#include "test_util.hpp"

using namespace hierf;

namespace {

Tree two_level_tree() {
    return build_tree({{"11", "21"}, {"11", "22"},
                       {"21", "31"}, {"21", "32"}, {"21", "33"},
                       {"22", "34"}, {"22", "35"}, {"22", "36"}},
                      {"31", "32", "33", "34", "35", "36"});
}

std::map<std::string, int> levels_of(const Tree& t) { return t.level; }

/// Independent reimplementation of the lambda formula for oracle checks.
double lambda_oracle(const Mat& resid) {
    const std::size_t h = resid.rows(), n = resid.cols();
    Vec mean(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t t = 0; t < h; ++t) mean[j] += resid(t, j);
        mean[j] /= static_cast<double>(h);
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            double wbar = 0.0;
            Vec w(h);
            for (std::size_t t = 0; t < h; ++t) {
                w[t] = (resid(t, i) - mean[i]) * (resid(t, j) - mean[j]);
                wbar += w[t];
            }
            wbar /= static_cast<double>(h);
            double sq = 0.0;
            for (std::size_t t = 0; t < h; ++t) sq += (w[t] - wbar) * (w[t] - wbar);
            num += static_cast<double>(h) / std::pow(static_cast<double>(h) - 1.0, 3) * sq;
            const double sigma_ij = static_cast<double>(h) / (static_cast<double>(h) - 1.0) * wbar;
            den += sigma_ij * sigma_ij;
        }
    return den == 0.0 ? 1.0 : num / den;
}

ResidualStore store_of(std::initializer_list<std::pair<std::string, Vec>> items) {
    ResidualStore rs;
    for (const auto& [label, samples] : items) rs.add_series(label, samples);
    return rs;
}

}  // namespace

TEST_CASE("identity and structural estimators need no residuals") {
    SummationMatrix s = summation_matrix(two_level_tree());
    ResidualStore empty;

    CovarianceEstimate id = estimate(CovMethod::id, s, empty);
    CHECK(id.sigma == Mat::identity(9));
    CHECK(id.mask == Mat::identity(9));

    CovarianceEstimate str = estimate(CovMethod::str, s, empty);
    const Vec expected{6, 3, 3, 1, 1, 1, 1, 1, 1};
    for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t j = 0; j < 9; ++j)
            CHECK(str.sigma(i, j) == (i == j ? expected[i] : 0.0));
    CHECK(str.diagonal());
}

TEST_CASE("hvar carries per-node sample variances") {
    Tree pair = build_tree({{"p", "a"}, {"p", "b"}}, {"a", "b"});
    SummationMatrix s = summation_matrix(pair);
    ResidualStore rs = store_of({{"p", {0.0, 0.0, 0.0, 0.0}},
                                 {"a", {1.0, -1.0, 1.0, -1.0}},
                                 {"b", {2.0, -2.0, 2.0, -2.0}}});
    CovarianceEstimate est = estimate(CovMethod::hvar, s, rs);
    CHECK(est.sigma(1, 1) == doctest::Approx(4.0 / 3.0).epsilon(1e-15));
    CHECK(est.sigma(2, 2) == doctest::Approx(16.0 / 3.0).epsilon(1e-15));
    CHECK(est.sigma(0, 1) == 0.0);
    // zero-variance root floored, never zero
    CHECK(est.sigma(0, 0) > 0.0);

    ResidualStore one_sample;
    one_sample.add_series("p", {1.0});
    one_sample.add_series("a", {1.0});
    one_sample.add_series("b", {1.0});
    CHECK_THROWS_AS(estimate(CovMethod::hvar, s, one_sample), std::invalid_argument);
}

TEST_CASE("svar pools variances within each aggregation level") {
    Tree t = two_level_tree();
    SummationMatrix s = summation_matrix(t);
    ResidualStore rs;
    rs.add_series("11", {3.0, -3.0, 3.0, -3.0});   // var 12
    rs.add_series("21", {1.0, -1.0, 1.0, -1.0});   // var 4/3
    rs.add_series("22", {2.0, -2.0, 2.0, -2.0});   // var 16/3
    for (const auto& leaf : t.leaf_order) rs.add_series(leaf, {0.5, -0.5, 0.5, -0.5});

    CovarianceEstimate est = estimate(CovMethod::svar, s, rs, levels_of(t));
    CHECK(est.sigma(0, 0) == doctest::Approx(12.0).epsilon(1e-15));
    // level 2 pooled: mean(4/3, 16/3) = 10/3
    CHECK(est.sigma(1, 1) == doctest::Approx(10.0 / 3.0).epsilon(1e-15));
    CHECK(est.sigma(2, 2) == est.sigma(1, 1));
    for (std::size_t i = 3; i < 9; ++i) CHECK(est.sigma(i, i) == est.sigma(3, 3));

    CHECK_THROWS_AS(estimate(CovMethod::svar, s, rs), std::invalid_argument);
}

TEST_CASE("shrinkage lambda follows the centered cross-product formula") {
    // zero off-diagonal sample covariance: zero denominator convention
    Mat orth(4, 2);
    const double a[4] = {1, -1, 1, -1}, b[4] = {1, 1, -1, -1};
    for (int t = 0; t < 4; ++t) {
        orth(t, 0) = a[t];
        orth(t, 1) = b[t];
    }
    CHECK(shrinkage_lambda(orth) == 1.0);

    // duplicated alternating columns: constant cross-products, lambda 0
    const std::size_t h = 64;
    Mat dup(h, 2);
    for (std::size_t t = 0; t < h; ++t) dup(t, 0) = dup(t, 1) = (t % 2 == 0 ? 1.0 : -1.0);
    CHECK(shrinkage_lambda(dup) == 0.0);

    // raw value above 1 is clamped
    Mat wild(3, 2);
    const double w1[3] = {1.0, -1.0, 0.1}, w2[3] = {1.0, 1.0, -1.0};
    for (int t = 0; t < 3; ++t) {
        wild(t, 0) = w1[t];
        wild(t, 1) = w2[t];
    }
    REQUIRE(lambda_oracle(wild) > 1.0);
    CHECK(shrinkage_lambda(wild) == 1.0);

    // generic case agrees with the independent oracle
    std::mt19937 rng(11);
    std::normal_distribution<double> noise(0.0, 1.0);
    Mat generic(12, 4);
    for (std::size_t t = 0; t < 12; ++t)
        for (std::size_t j = 0; j < 4; ++j) generic(t, j) = noise(rng);
    const double oracle = std::min(1.0, std::max(0.0, lambda_oracle(generic)));
    CHECK(shrinkage_lambda(generic) == doctest::Approx(oracle).epsilon(1e-14));

    CHECK_THROWS_AS(shrinkage_lambda(Mat(2, 2, 1.0)), std::invalid_argument);
}

TEST_CASE("cov estimator: shrunk correlation around the variance diagonal") {
    Tree pair = build_tree({{"p", "a"}, {"p", "b"}}, {"a", "b"});
    SummationMatrix s = summation_matrix(pair);

    // perfectly correlated pair: lambda 0, correlation +1, sigma_ab = 8/3
    ResidualStore rs = store_of({{"p", {4.0, -4.0, 4.0, -4.0}},
                                 {"a", {1.0, -1.0, 1.0, -1.0}},
                                 {"b", {2.0, -2.0, 2.0, -2.0}}});
    CovarianceEstimate est = estimate(CovMethod::cov, s, rs, levels_of(pair));
    CHECK(est.has_lambda);
    CHECK(est.lambda == 0.0);
    std::size_t ia = 1, ib = 2;  // rows: p, a, b
    CHECK(est.sigma(ia, ib) == doctest::Approx(8.0 / 3.0).epsilon(1e-14));
    CHECK(est.sigma(ia, ib) == est.sigma(ib, ia));
    // rank deficiency handled by diagonal loading: factorization succeeds
    Mat lower;
    CHECK(try_cholesky(est.sigma, lower));

    CHECK_THROWS_AS(estimate(CovMethod::cov, s, store_of({{"p", {1.0, 2.0}},
                                                          {"a", {1.0, 2.0}},
                                                          {"b", {1.0, 2.0}}}),
                             levels_of(pair)),
                    std::invalid_argument);
}

TEST_CASE("lambda identities against hvar and the sample correlation") {
    Tree pair = build_tree({{"p", "a"}, {"p", "b"}}, {"a", "b"});
    SummationMatrix s = summation_matrix(pair);

    // orthogonal residuals for every pair: lambda 1, cov collapses to hvar exactly
    ResidualStore orth = store_of({{"p", {1.0, -1.0, -1.0, 1.0}},
                                   {"a", {1.0, -1.0, 1.0, -1.0}},
                                   {"b", {1.0, 1.0, -1.0, -1.0}}});
    CovarianceEstimate cov1 = estimate(CovMethod::cov, s, orth, levels_of(pair));
    CovarianceEstimate hvar = estimate(CovMethod::hvar, s, orth);
    CHECK(cov1.lambda == 1.0);
    CHECK(cov1.sigma == hvar.sigma);

    // constant cross-products with partial correlation: lambda 0 and the
    // correlation block reproduces the sample correlation (0.8 here)
    ResidualStore part = store_of({{"p", {0.0, 0.0, 0.0, 0.0}},
                                   {"a", {1.0, -1.0, 2.0, -2.0}},
                                   {"b", {1.0, -1.0, 0.5, -0.5}}});
    CovarianceEstimate cov0 = estimate(CovMethod::cov, s, part, levels_of(pair));
    CHECK(cov0.lambda == 0.0);
    const double corr_ab = cov0.sigma(1, 2) / std::sqrt(cov0.sigma(1, 1) * cov0.sigma(2, 2));
    CHECK(corr_ab == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("kcov zeroes every cross-level entry exactly") {
    Tree t = two_level_tree();
    SummationMatrix s = summation_matrix(t);
    std::mt19937 rng(3);
    std::normal_distribution<double> noise(0.0, 1.0);
    ResidualStore rs;
    for (const auto& label : s.row_layout) {
        Vec samples(20);
        for (auto& x : samples) x = noise(rng);
        rs.add_series(label, samples);
    }
    CovarianceEstimate est = estimate(CovMethod::kcov, s, rs, levels_of(t));
    const auto& lv = t.level;
    for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t j = 0; j < s.n; ++j) {
            if (lv.at(s.row_layout[i]) != lv.at(s.row_layout[j])) {
                CHECK(est.sigma(i, j) == 0.0);
                CHECK(est.mask(i, j) == 0.0);
            } else if (i != j) {
                CHECK(est.mask(i, j) == 1.0);
            }
        }
    Mat lower;
    CHECK(try_cholesky(est.sigma, lower));
}

TEST_CASE("estimates are symmetric and positive definite on noisy stores") {
    std::mt19937 rng(17);
    std::normal_distribution<double> noise(0.0, 2.0);
    for (int trial = 0; trial < 10; ++trial) {
        Tree t = testutil::random_tree(rng, 8);
        SummationMatrix s = summation_matrix(t);
        ResidualStore rs;
        for (const auto& label : s.row_layout) {
            Vec samples(25);
            for (auto& x : samples) x = noise(rng);
            rs.add_series(label, samples);
        }
        for (CovMethod method : {CovMethod::id, CovMethod::str, CovMethod::svar, CovMethod::hvar,
                                 CovMethod::cov, CovMethod::kcov}) {
            CovarianceEstimate est = estimate(method, s, rs, levels_of(t));
            for (std::size_t i = 0; i < s.n; ++i)
                for (std::size_t j = 0; j < i; ++j)
                    CHECK(est.sigma(i, j) == doctest::Approx(est.sigma(j, i)).epsilon(1e-15));
            Mat lower;
            CHECK(try_cholesky(est.sigma, lower));
            for (std::size_t i = 0; i < s.n; ++i)
                for (std::size_t j = 0; j < s.n; ++j)
                    if (est.mask(i, j) == 0.0) CHECK(est.sigma(i, j) == 0.0);
        }
    }
}

TEST_CASE("compose_mask is the Kronecker product of topologies") {
    CHECK(compose_mask(Mat::identity(3), Mat::identity(7)) == Mat::identity(21));

    Mat ones3(3, 3, 1.0);
    Mat block = compose_mask(ones3, Mat::identity(7));
    for (std::size_t i = 0; i < 21; ++i)
        for (std::size_t j = 0; j < 21; ++j)
            CHECK(block(i, j) == ((i % 7) == (j % 7) ? 1.0 : 0.0));

    Mat unit(1, 1, 1.0);
    CHECK(compose_mask(ones3, unit) == ones3);

    CHECK_THROWS_AS(compose_mask(Mat(400, 400, 1.0), Mat(400, 400, 1.0), 1000), std::runtime_error);
}

TEST_CASE("populate fills masked positions with sample moments") {
    Tree pair = build_tree({{"p", "a"}, {"p", "b"}}, {"a", "b"});
    SummationMatrix s = summation_matrix(pair);
    ResidualStore rs = store_of({{"p", {0.5, -0.5, 1.5, -1.5}},
                                 {"a", {1.0, -1.0, 2.0, -2.0}},
                                 {"b", {1.0, -1.0, 0.5, -0.5}}});
    YLayout layout = s.layout();

    CovarianceEstimate diag = populate(Mat::identity(3), rs, layout);
    CovarianceEstimate hvar = estimate(CovMethod::hvar, s, rs);
    CHECK(diag.sigma == hvar.sigma);
    CHECK(diag.method == CovMethod::populated);

    CovarianceEstimate full = populate(Mat(3, 3, 1.0), rs, layout);
    // off-diagonal entries are plain sample covariances (moment oracle)
    auto cov_or = [](const Vec& x, const Vec& y) {
        double mx = 0, my = 0;
        for (std::size_t t = 0; t < x.size(); ++t) {
            mx += x[t];
            my += y[t];
        }
        mx /= x.size();
        my /= y.size();
        double acc = 0;
        for (std::size_t t = 0; t < x.size(); ++t) acc += (x[t] - mx) * (y[t] - my);
        return acc / (x.size() - 1.0);
    };
    CHECK(full.sigma(1, 2) == doctest::Approx(cov_or(rs.series("a"), rs.series("b"))).epsilon(1e-15));
    CHECK(full.sigma(0, 1) == doctest::Approx(cov_or(rs.series("p"), rs.series("a"))).epsilon(1e-15));

    // composed mask: spatial all-ones times temporal identity
    Mat mask = compose_mask(Mat(2, 2, 1.0), Mat::identity(2));
    ResidualStore rs4;
    rs4.add_series("a|t1", {1.0, -1.0, 2.0, -2.0});
    rs4.add_series("a|t2", {0.5, 0.5, -0.5, -0.5});
    rs4.add_series("b|t1", {2.0, -2.0, 1.0, -1.0});
    rs4.add_series("b|t2", {1.5, -0.5, 0.5, -1.5});
    YLayout l4{{"a|t1", "a|t2", "b|t1", "b|t2"}, {}};
    CovarianceEstimate comp = populate(mask, rs4, l4);
    CHECK(comp.sigma(0, 2) == doctest::Approx(cov_or(rs4.series("a|t1"), rs4.series("b|t1"))).epsilon(1e-15));
    CHECK(comp.sigma(0, 1) == 0.0);
    CHECK(comp.sigma(0, 3) == 0.0);
    CHECK(comp.sigma(1, 3) == doctest::Approx(cov_or(rs4.series("a|t2"), rs4.series("b|t2"))).epsilon(1e-15));
    Mat lower;
    CHECK(try_cholesky(comp.sigma, lower));
}

TEST_CASE("covariance audit files round-trip") {
    Tree pair = build_tree({{"p", "a"}, {"p", "b"}}, {"a", "b"});
    SummationMatrix s = summation_matrix(pair);
    ResidualStore rs = store_of({{"p", {2.0, -2.0, 2.5, -2.5}},
                                 {"a", {1.0, -1.0, 2.0, -2.0}},
                                 {"b", {1.0, -1.0, 0.5, -0.5}}});
    CovarianceEstimate est = estimate(CovMethod::cov, s, rs, levels_of(pair));
    std::ostringstream os;
    write_covariance(os, est);
    std::istringstream is(os.str());
    CovarianceEstimate back = read_covariance(is);
    CHECK(back.method == CovMethod::cov);
    CHECK(back.has_lambda);
    CHECK(back.lambda == est.lambda);
    REQUIRE(back.n() == est.n());
    for (std::size_t i = 0; i < est.n(); ++i)
        for (std::size_t j = 0; j < est.n(); ++j) CHECK(back.sigma(i, j) == est.sigma(i, j));
}
