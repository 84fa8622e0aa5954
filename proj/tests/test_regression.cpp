#include "oracle.hpp"

#include <covadj/random.hpp>
#include <covadj/regression.hpp>

#include <gtest/gtest.h>

using namespace covadj;

namespace {

ArmData random_arm(std::size_t n, std::size_t k, std::uint64_t seed, double noise = 1.0) {
    Rng rng(seed);
    ArmData a;
    a.y.resize(static_cast<Eigen::Index>(n));
    a.z.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
    for (Eigen::Index i = 0; i < a.y.size(); ++i) {
        double y = 1.0;
        for (Eigen::Index c = 0; c < a.z.cols(); ++c) {
            a.z(i, c) = 2.0 * rng.normal() + static_cast<double>(c);
            y += 0.5 * static_cast<double>(c + 1) * a.z(i, c);
        }
        a.y[i] = y + noise * rng.normal();
    }
    return a;
}

oracle::Matrix with_intercept(const Eigen::MatrixXd& z) {
    oracle::Matrix x(static_cast<std::size_t>(z.rows()), std::vector<double>(static_cast<std::size_t>(z.cols()) + 1));
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        x[static_cast<std::size_t>(i)][0] = 1.0;
        for (Eigen::Index c = 0; c < z.cols(); ++c) x[static_cast<std::size_t>(i)][static_cast<std::size_t>(c) + 1] = z(i, c);
    }
    return x;
}

std::vector<double> as_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

} // namespace

TEST(Fit, DimIsArmMean) {
    ArmData a;
    a.y = Eigen::Vector3d(1, 2, 3);
    a.z = Eigen::MatrixXd::Random(3, 2);
    const auto m = fit(ModelSpec::dim(), a, 0);
    EXPECT_EQ(m.intercept, 2.0);
    EXPECT_TRUE(m.used_columns.empty());
    EXPECT_EQ(predict(m, std::vector<double>{100.0, -5.0}), 2.0);
}

TEST(Fit, OlsInterpolatesExactLine) {
    ArmData a;
    a.y.resize(10);
    a.z.resize(10, 1);
    for (int i = 0; i < 10; ++i) {
        a.z(i, 0) = i * 0.7 - 2.0;
        a.y[i] = 3.0 + 2.0 * a.z(i, 0);
    }
    const auto m = fit(ModelSpec::ols(), a, 0);
    EXPECT_NEAR(m.original_intercept(), 3.0, 1e-10);
    EXPECT_NEAR(m.coefficients()[0], 2.0, 1e-10);
    EXPECT_NEAR(predict(m, std::vector<double>{5.0}), 13.0, 1e-10);
}

TEST(Fit, OlsMatchesOracle) {
    const auto a = random_arm(400, 4, 21);
    const auto m = fit(ModelSpec::ols(), a, 0);
    const auto beta = oracle::lstsq(with_intercept(a.z), as_vector(a.y));
    EXPECT_NEAR(m.original_intercept(), beta[0], 1e-10);
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(m.coefficients()[c], beta[static_cast<std::size_t>(c) + 1], 1e-10);
    EXPECT_FALSE(m.rank_deficient);
}

TEST(Fit, RidgeHeavyPenaltyAgainstDirectSolve) {
    const auto a = random_arm(300, 3, 5);
    const double gamma = 1e6;
    const auto m = fit(ModelSpec::ridge({gamma}), a, 0);
    const auto ols = fit(ModelSpec::ols(), a, 0);
    // Direct solve in standardized space: stack sqrt(n*gamma)*I under Z.
    const auto n = static_cast<std::size_t>(a.y.size());
    oracle::Matrix x(n + 3, std::vector<double>(3, 0.0));
    std::vector<double> y(n + 3, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        for (int c = 0; c < 3; ++c) x[i][static_cast<std::size_t>(c)] = (a.z(r, c) - m.center[c]) / m.scale[c];
        y[i] = a.y[r] - a.y.mean();
    }
    for (std::size_t c = 0; c < 3; ++c) x[n + c][c] = std::sqrt(static_cast<double>(n) * gamma);
    const auto theta = oracle::lstsq(x, y);
    for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(m.slopes[c], theta[static_cast<std::size_t>(c)], 1e-12);
        EXPECT_LT(std::abs(m.slopes[c]), 1e-3 * std::abs(ols.slopes[c]));
    }
    EXPECT_NEAR(predict(m, std::vector<double>{0.0, 1.0, 2.0}), a.y.mean(), 1e-3);
}

TEST(Fit, RidgeTinyPenaltyEqualsOls) {
    const auto a = random_arm(500, 5, 8);
    const auto r = fit(ModelSpec::ridge({1e-10}), a, 0);
    const auto o = fit(ModelSpec::ols(), a, 0);
    EXPECT_LT((r.coefficients() - o.coefficients()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Fit, LassoAtGammaMaxIsAllZero) {
    const auto a = random_arm(300, 4, 9);
    const auto s = detail::standardize(a.y, a.z, {0, 1, 2, 3}, detail::AllRows{300});
    const double gmax = detail::gamma_max(detail::gram(s), 1.0);
    for (double g : {gmax, 2 * gmax}) {
        const auto m = fit(ModelSpec::lasso({g}), a, 0);
        EXPECT_EQ(m.slopes.cwiseAbs().maxCoeff(), 0.0) << g;
    }
    const auto below = fit(ModelSpec::lasso({0.9 * gmax}), a, 0);
    EXPECT_GT(below.slopes.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Fit, LassoSatisfiesKkt) {
    const auto a = random_arm(400, 6, 10, 3.0);
    const double gamma = 0.2;
    auto spec = ModelSpec::lasso({gamma});
    spec.cd_tolerance = 1e-12;
    const auto m = fit(spec, a, 0);
    const auto s = detail::standardize(a.y, a.z, {0, 1, 2, 3, 4, 5}, detail::AllRows{400});
    const auto g = detail::gram(s);
    const Eigen::VectorXd grad = g.xty - g.xtx * m.slopes;
    for (Eigen::Index j = 0; j < m.slopes.size(); ++j) {
        if (m.slopes[j] == 0.0) {
            EXPECT_LE(std::abs(grad[j]), gamma + 1e-9);
        } else {
            EXPECT_NEAR(grad[j], gamma * (m.slopes[j] > 0 ? 1.0 : -1.0), 1e-9);
        }
    }
}

TEST(Fit, CoordinateDescentObjectiveNonIncreasing) {
    const auto a = random_arm(300, 5, 12, 2.0);
    const auto m = fit(ModelSpec::elastic_net(0.5, {0.05}), a, 0);
    ASSERT_GE(m.objective_trace.size(), 2u);
    for (std::size_t i = 1; i < m.objective_trace.size(); ++i)
        EXPECT_LE(m.objective_trace[i], m.objective_trace[i - 1] + 1e-15);
}

TEST(Fit, ElasticNetEndpoints) {
    const auto a = random_arm(300, 4, 13, 2.0);
    for (double g : {0.01, 0.1, 1.0}) {
        auto en1 = ModelSpec::elastic_net(1.0, {g});
        auto las = ModelSpec::lasso({g});
        en1.cd_tolerance = las.cd_tolerance = 1e-13;
        EXPECT_LT((fit(en1, a, 0).slopes - fit(las, a, 0).slopes).cwiseAbs().maxCoeff(), 1e-8) << g;
        auto en0 = ModelSpec::elastic_net(0.0, {g});
        en0.cd_tolerance = 1e-13;
        EXPECT_LT((fit(en0, a, 0).slopes - fit(ModelSpec::ridge({g}), a, 0).slopes).cwiseAbs().maxCoeff(), 1e-8) << g;
    }
}

TEST(Fit, PcrAllComponentsEqualsOls) {
    const auto a = random_arm(200, 5, 14);
    const auto p = fit(ModelSpec::pcr(5), a, 0);
    const auto o = fit(ModelSpec::ols(), a, 0);
    EXPECT_LT((predict(p, a.z) - predict(o, a.z)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Fit, PcrThresholdKeepsFewerComponents) {
    ArmData a = random_arm(300, 4, 15);
    a.z.col(1) = a.z.col(0) * 2.0 + 1e-3 * Eigen::VectorXd::Random(300);
    const auto m = fit(ModelSpec::pcr(), a, 0);
    EXPECT_LT(m.components.cols(), 4);
    EXPECT_GE(m.components.cols(), 1);
}

TEST(Fit, TweedieScoreEquations) {
    Rng rng(16);
    ArmData a;
    a.y.resize(500);
    a.z.resize(500, 2);
    for (int i = 0; i < 500; ++i) {
        a.z(i, 0) = rng.normal();
        a.z(i, 1) = rng.normal();
        a.y[i] = static_cast<double>(rng.poisson(std::exp(0.5 + 0.3 * a.z(i, 0) - 0.2 * a.z(i, 1))));
    }
    const auto m = fit(ModelSpec::tweedie(), a, 0);
    EXPECT_TRUE(m.log_link);
    EXPECT_NEAR(m.coefficients()[0], 0.3, 0.1);
    const Eigen::ArrayXd mu = predict(m, a.z).array();
    const Eigen::ArrayXd w = (a.y.array() - mu) * mu.pow(1.0 - 1.5);
    // Score equations, per observation.
    EXPECT_NEAR(w.mean(), 0.0, 1e-7);
    EXPECT_NEAR((w * a.z.col(0).array()).mean(), 0.0, 1e-7);
    EXPECT_NEAR((w * a.z.col(1).array()).mean(), 0.0, 1e-7);
}

TEST(Fit, TweedieErrors) {
    auto a = random_arm(50, 1, 17);
    EXPECT_THROW(fit(ModelSpec::tweedie(), a, 0), ValidationError);  // negative outcomes
    a.y = a.y.array().abs() + 0.5;
    auto spec = ModelSpec::tweedie();
    spec.irls_max_iter = 1;
    try {
        fit(spec, a, 0);
        FAIL() << "expected ConvergenceError";
    } catch (const ConvergenceError& e) {
        EXPECT_GT(e.last_deviance(), 0.0);
    }
    EXPECT_THROW(ModelSpec::tweedie(2.5).validate(), ValidationError);
}

TEST(Predict, TweedieZeroLinearPredictorIsOne) {
    FittedArmModel m;
    m.n_covariates = 1;
    m.log_link = true;
    m.intercept = 0.0;
    EXPECT_EQ(predict(m, std::vector<double>{3.0}), 1.0);
}

TEST(Predict, BatchMatchesRowwiseBitwise) {
    const auto a = random_arm(100, 3, 18);
    for (const auto& spec : {ModelSpec::ols(), ModelSpec::lasso({0.05}), ModelSpec::pcr(2)}) {
        const auto m = fit(spec, a, 0);
        const auto batch = predict(m, a.z);
        for (Eigen::Index i = 0; i < a.z.rows(); ++i) {
            const Eigen::VectorXd row = a.z.row(i).transpose();
            EXPECT_EQ(batch[i], predict(m, std::span<const double>(row.data(), 3)));
        }
    }
}

TEST(Predict, WrongWidthRejected) {
    const auto m = fit(ModelSpec::ols(), random_arm(30, 2, 19), 0);
    EXPECT_THROW(predict(m, std::vector<double>{1.0}), ValidationError);
}

TEST(Fit, ConstantColumnsDropped) {
    auto a = random_arm(100, 3, 20);
    a.z.col(1).setConstant(4.0);
    const auto m = fit(ModelSpec::ols(), a, 0);
    EXPECT_EQ(m.dropped_columns, (std::vector<std::size_t>{1}));
    EXPECT_EQ(m.coefficients()[1], 0.0);
    a.z.setConstant(1.0);
    const auto d = fit(ModelSpec::ols(), a, 0);
    EXPECT_TRUE(d.degenerated_to_dim);
    EXPECT_NEAR(d.intercept, a.y.mean(), 1e-12);
}

TEST(Fit, RankDeficientOlsStillPredicts) {
    auto a = random_arm(100, 3, 22);
    a.z.col(2) = a.z.col(0) + a.z.col(1);
    const auto m = fit(ModelSpec::ols(), a, 0);
    EXPECT_TRUE(m.rank_deficient);
    EXPECT_EQ(m.rank, 2u);
    const auto full = oracle::lstsq(with_intercept(a.z.leftCols(2)), as_vector(a.y));
    const Eigen::VectorXd pred = predict(m, a.z);
    for (Eigen::Index i = 0; i < 100; ++i)
        EXPECT_NEAR(pred[i], full[0] + full[1] * a.z(i, 0) + full[2] * a.z(i, 1), 1e-9);
}

TEST(Fit, PrePeriodSelection) {
    auto a = random_arm(100, 3, 23);
    a.pre_period_col = 2;
    const auto m = fit(ModelSpec::ols().pre_period_only(), a, 0);
    EXPECT_EQ(m.used_columns, (std::vector<std::size_t>{2}));
}

TEST(CrossValidate, SingleGammaSkipsScoring) {
    const auto a = random_arm(20, 2, 24);
    const auto cv = cross_validate(ModelSpec::ridge({0.3}), a, 0);
    EXPECT_EQ(cv.chosen_gamma, 0.3);
    EXPECT_TRUE(cv.scores.empty());
}

TEST(CrossValidate, NoiseFavoursHeavyShrinkage) {
    int heavy = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        ArmData a = random_arm(100, 5, 1000 + s);
        Rng rng(5000 + s);
        for (Eigen::Index i = 0; i < a.y.size(); ++i) a.y[i] = rng.normal();
        heavy += cross_validate(ModelSpec::ridge({0.01, 100}), a, s).chosen_gamma == 100;
    }
    EXPECT_GE(heavy, 90);
}

TEST(CrossValidate, SignalFavoursLightShrinkage) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto a = random_arm(100, 3, 2000 + s, 0.0);
        EXPECT_EQ(cross_validate(ModelSpec::ridge({1e-6, 1e6}), a, s).chosen_gamma, 1e-6);
    }
}

TEST(CrossValidate, TooFewRows) {
    const auto a = random_arm(3, 1, 25);
    EXPECT_THROW(cross_validate(ModelSpec::lasso({0.1, 1.0}), a, 0), ValidationError);
}

TEST(CrossValidate, DefaultGridDescendsFromGammaMax) {
    const auto a = random_arm(200, 3, 26);
    const auto m = fit(ModelSpec::lasso(), a, 3);
    ASSERT_EQ(m.gamma_grid.size(), 50u);
    EXPECT_TRUE(std::is_sorted(m.gamma_grid.rbegin(), m.gamma_grid.rend()));
    EXPECT_NEAR(m.gamma_grid.back() / m.gamma_grid.front(), 1e-4, 1e-12);
    EXPECT_EQ(m.cv_scores.size(), 50u);
    ASSERT_TRUE(m.chosen_gamma);
}

TEST(ModelSpecText, RoundTrip) {
    for (const char* text : {"dim", "ols", "ridge", "lasso(grid=1|0.1;folds=3)", "elastic_net(mix=0.5)", "pcr(components=2)",
                             "pcr(threshold=0.8)", "tweedie(power=1.2)", "two_step:lasso", "ols@pre", "ridge@0|2"}) {
        EXPECT_EQ(to_string(parse_model_spec(text)), text);
    }
    EXPECT_EQ(to_string(parse_model_spec("lr")), "ols");
    EXPECT_EQ(to_string(parse_model_spec("ridge(gamma=0.1)")), "ridge(grid=0.1)");
}

TEST(ModelSpecText, Errors) {
    EXPECT_THROW(parse_model_spec("forest"), ValidationError);
    EXPECT_THROW(parse_model_spec("elastic_net"), ValidationError);
    EXPECT_THROW(parse_model_spec("elastic_net(mix=2)"), ValidationError);
    EXPECT_THROW(parse_model_spec("ridge(grid=-1)"), ValidationError);
    EXPECT_THROW(parse_model_spec("ridge(grid=1"), ValidationError);
    EXPECT_THROW(parse_model_spec("pcr(components=0)"), ValidationError);
    EXPECT_THROW(parse_model_spec("two_step:two_step:ols"), ValidationError);
    EXPECT_THROW(parse_model_spec("ols(wat=1)"), ValidationError);
}
