#include <covadj/aa_harness.hpp>
#include <covadj/dataset.hpp>

#include <gtest/gtest.h>

using namespace covadj;

namespace {

ExperimentData single_arm(std::size_t n, double rho, std::uint64_t seed, bool outcome_is_x = false) {
    SyntheticConfig cfg;
    cfg.n_units = n;
    cfg.k_covariates = 2;
    cfg.outcome_cor = rho;
    cfg.seed = seed;
    auto d = generate(cfg);
    for (auto& j : d.assignment) j = 0;
    d.assignment[0] = 1;  // keep the dataset valid; run_aa only looks at arm 0
    if (outcome_is_x) d.outcome = d.covariates.col(0);
    return d;
}

} // namespace

TEST(HalfSplit, BalancedAndSeeded) {
    const auto a = half_split(11, 5);
    EXPECT_EQ(std::count(a.begin(), a.end(), 0), 5);
    EXPECT_EQ(a, half_split(11, 5));
    EXPECT_NE(a, half_split(11, 6));
}

TEST(RunAa, OutcomeEqualToPrePeriodGivesZetaAndZero) {
    const auto d = single_arm(400, 0.5, 1, true);
    const auto run = run_aa(d, 0, {ModelSpec::ols()}, 50, 0.05, 3);
    const auto ols = run.model_index("ols");
    for (std::size_t s = 0; s < run.s_splits; ++s) {
        EXPECT_NEAR(run.outcomes[run.dim_index][s].ate, run.zeta[s], 1e-10);
        EXPECT_NEAR(run.outcomes[ols][s].ate, 0.0, 1e-8);
    }
    EXPECT_NEAR(imbalance_slope(run, run.dim_index), 1.0, 1e-6);
    EXPECT_NEAR(imbalance_slope(run, ols), 0.0, 1e-6);
}

TEST(RunAa, ConstantOutcome) {
    auto d = single_arm(100, 0.5, 2);
    d.outcome.setConstant(3.0);
    const auto run = run_aa(d, 0, {ModelSpec::ols()}, 20, 0.05, 4);
    for (const auto& per_model : run.outcomes)
        for (const auto& o : per_model) {
            ASSERT_TRUE(o.ok) << o.error;
            EXPECT_NEAR(o.ate, 0.0, 1e-12);
        }
}

TEST(RunAa, DimInsertedFirstWhenMissing) {
    const auto d = single_arm(100, 0.5, 3);
    const auto run = run_aa(d, 0, {ModelSpec::ols()}, 5, 0.05, 1);
    EXPECT_EQ(run.model_ids, (std::vector<std::string>{"dim", "ols"}));
    EXPECT_EQ(run.dim_index, 0u);
    const auto kept = run_aa(d, 0, {ModelSpec::ols(), ModelSpec::dim()}, 5, 0.05, 1);
    EXPECT_EQ(kept.model_ids, (std::vector<std::string>{"ols", "dim"}));
    EXPECT_EQ(kept.dim_index, 1u);
}

TEST(RunAa, IdenticalAcrossThreadCounts) {
    const auto d = single_arm(300, 0.7, 4);
    const auto a = run_aa(d, 0, {ModelSpec::ols(), ModelSpec::ridge()}, 40, 0.05, 9, 1);
    const auto b = run_aa(d, 0, {ModelSpec::ols(), ModelSpec::ridge()}, 40, 0.05, 9, 4);
    EXPECT_EQ(a.zeta, b.zeta);
    for (std::size_t m = 0; m < a.outcomes.size(); ++m)
        for (std::size_t s = 0; s < a.s_splits; ++s) {
            EXPECT_EQ(a.outcomes[m][s].ate, b.outcomes[m][s].ate);
            EXPECT_EQ(a.outcomes[m][s].ci_lo, b.outcomes[m][s].ci_lo);
        }
}

TEST(RunAa, Errors) {
    const auto d = single_arm(100, 0.5, 5);
    EXPECT_THROW(run_aa(d, 0, {}, 0, 0.05, 1), ValidationError);
    EXPECT_THROW(run_aa(d, 0, {}, 5, 1.5, 1), ValidationError);
    EXPECT_THROW(run_aa(d, 1, {}, 5, 0.05, 1), ValidationError);  // arm 1 has one unit
    const auto run = run_aa(d, 0, {}, 5, 0.05, 1);
    EXPECT_THROW(bucket_metrics(run, 6), ValidationError);
    EXPECT_THROW(bucket_metrics(run, 0), ValidationError);
}

TEST(RunAa, EstimatesUnbiasedAndZetaCentred) {
    const auto d = single_arm(400, 0.8, 6);
    const auto run = run_aa(d, 0, {ModelSpec::ols()}, 400, 0.05, 11);
    for (std::size_t m = 0; m < run.model_ids.size(); ++m) {
        std::vector<double> ates;
        for (const auto& o : run.outcomes[m]) ates.push_back(o.ate);
        const double se = std::sqrt(sample_variance(ates) / static_cast<double>(ates.size()));
        EXPECT_LT(std::abs(mean(ates)), 4 * se) << run.model_ids[m];
    }
    const double zse = std::sqrt(sample_variance(run.zeta) / static_cast<double>(run.zeta.size()));
    EXPECT_LT(std::abs(mean(run.zeta)), 4 * zse);
}

TEST(BucketStatistics, Examples) {
    auto m = bucket_statistics({1, 2, 3}, {{0, 4}, {1.5, 4}, {-1, -0.5}}, 0.0);
    EXPECT_DOUBLE_EQ(m.mse, 14.0 / 3);
    EXPECT_DOUBLE_EQ(m.median_dist, 4.0);
    EXPECT_DOUBLE_EQ(m.excess_frac, 1.0);
    EXPECT_DOUBLE_EQ(m.coverage, 1.0 / 3);

    m = bucket_statistics({-1, 1}, {{-2, 2}, {-2, 2}}, 0.0);
    EXPECT_DOUBLE_EQ(m.mse, 1.0);
    EXPECT_DOUBLE_EQ(m.median_dist, 0.0);
    EXPECT_DOUBLE_EQ(m.excess_frac, 0.0);
    EXPECT_DOUBLE_EQ(m.coverage, 1.0);

    m = bucket_statistics({0, 0, 0}, {{0, 0}, {0, 0}, {0, 0}}, 0.0);
    EXPECT_EQ(m.mse, 0.0);
    EXPECT_EQ(m.excess_frac, 0.0);

    EXPECT_EQ(bucket_statistics({}, {}, 0.0).count, 0u);
}

TEST(BucketStatistics, RelativeToDim) {
    EXPECT_DOUBLE_EQ(*relative_to_dim(2.0, 0.5), 0.75);
    EXPECT_DOUBLE_EQ(*relative_to_dim(2.0, 3.0), -0.5);
    EXPECT_FALSE(relative_to_dim(0.0, 1.0));
}

TEST(BucketMetrics, SizesAndOrdering) {
    const auto d = single_arm(200, 0.6, 7);
    const auto run = run_aa(d, 0, {ModelSpec::ols()}, 23, 0.05, 2);
    const auto bm = bucket_metrics(run, 5);
    ASSERT_EQ(bm.buckets.size(), 5u);
    std::size_t total = 0;
    double prev_max = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < 5; ++j) {
        const auto& b = bm.buckets[j];
        EXPECT_EQ(b.splits.size(), j < 3 ? 5u : 4u);
        total += b.splits.size();
        EXPECT_LE(prev_max, b.zeta_min);
        prev_max = b.zeta_max;
        EXPECT_FALSE(b.relative[bm.dim_index].r_mse);
        EXPECT_TRUE(b.relative[1].r_mse);
    }
    EXPECT_EQ(total, 23u);
}

TEST(Imbalance, Example) {
    Eigen::VectorXd x(4);
    x << 1, 2, 3, 6;
    const std::vector<int> j{0, 1, 0, 1};
    EXPECT_DOUBLE_EQ(imbalance(x, j), 2.0);
}
