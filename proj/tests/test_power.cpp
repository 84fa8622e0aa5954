#include "oracle.hpp"

#include <covadj/dataset.hpp>
#include <covadj/power.hpp>

#include <gtest/gtest.h>

using namespace covadj;

namespace {

AteEstimate fake_estimate(double mse0, double mse1, double control_mean) {
    AteEstimate e;
    e.model_id = "dim";
    e.mse_per_arm = {mse0, mse1};
    e.control_mean = control_mean;
    return e;
}

std::optional<int> scan(double mse0, double mse1, double ybar0, std::size_t n0, std::size_t n1, int day, double delta,
                        int horizon, double alpha = 0.05, double power = 0.8) {
    const auto f = forecast_from_counts(n0, n1, day, horizon);
    return recommend_duration(fake_estimate(mse0, mse1, ybar0), f, delta, alpha, power).day_found;
}

} // namespace

TEST(Forecast, LinearScaling) {
    const auto f = forecast_from_counts(300, 400, 7, 14);
    ASSERT_EQ(f.size(), 8u);
    EXPECT_EQ(f.front().day, 7);
    EXPECT_EQ(f.front().n0, 300u);
    EXPECT_EQ(f.back().day, 14);
    EXPECT_EQ(f.back().n0 + f.back().n1, 1400u);
    EXPECT_THROW(forecast_from_counts(1, 1, 0, 5), ValidationError);
    EXPECT_THROW(forecast_from_counts(1, 1, 7, 6), ValidationError);
}

TEST(Forecast, AnchorCountsFromDayColumn) {
    SyntheticConfig cfg;
    cfg.n_units = 2000;
    cfg.daily_arrivals = 100;
    cfg.seed = 1;
    const auto d = generate(cfg);
    const auto f = forecast_arm_sizes(d, 7, 20);
    std::size_t upto7 = 0;
    for (int day : *d.day_index) upto7 += day <= 7;
    EXPECT_EQ(f.front().n0 + f.front().n1, upto7);
    cfg.daily_arrivals = 0;
    EXPECT_THROW(forecast_arm_sizes(generate(cfg), 7, 20), ValidationError);
}

TEST(Forecast, PoissonArrivalsWithinTenPercent) {
    int hits = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        SyntheticConfig cfg;
        cfg.n_units = 5000;
        cfg.daily_arrivals = 100;
        cfg.seed = seed;
        const auto d = generate(cfg);
        const auto f = forecast_arm_sizes(d, 7, 14);
        std::size_t actual = 0;
        for (int day : *d.day_index) actual += day <= 14;
        const double predicted = static_cast<double>(f.back().n0 + f.back().n1);
        hits += std::abs(predicted - static_cast<double>(actual)) <= 0.1 * static_cast<double>(actual);
    }
    EXPECT_GE(hits, 90);
}

TEST(ZTestPower, Basics) {
    EXPECT_NEAR(z_test_power(0.0, 1.0, 0.05), normal_cdf(-1.959963984540054), 1e-12);
    EXPECT_NEAR(z_test_power(2.8015852, 1.0, 0.05), 0.8, 1e-6);
    EXPECT_EQ(z_test_power(1.0, 0.0, 0.05), 1.0);
}

TEST(RecommendDuration, ImmediateWhenVarianceTiny) {
    EXPECT_EQ(scan(1e-6, 1e-6, 10, 1000, 1000, 7, 0.1, 70), 8);
}

TEST(RecommendDuration, HalvingMseNeverLengthens) {
    for (double m : {0.5, 1.0, 4.0, 9.0}) {
        const auto full = scan(m, m, 10, 1000, 1000, 7, 0.01, 2000);
        const auto half = scan(m / 2, m / 2, 10, 1000, 1000, 7, 0.01, 2000);
        ASSERT_TRUE(full && half);
        EXPECT_LE(*half, *full);
    }
}

TEST(RecommendDuration, ScaleInvariant) {
    const auto base = scan(2.0, 3.0, 4.0, 800, 900, 7, 0.02, 5000);
    for (double c : {0.01, 3.0, 1000.0}) EXPECT_EQ(scan(2.0 * c * c, 3.0 * c * c, 4.0 * c, 800, 900, 7, 0.02, 5000), base);
}

TEST(RecommendDuration, WorkedExample) {
    // Unit MSEs, 1000 units per arm at day 7, one percent lift.
    EXPECT_EQ(oracle::closed_form_duration(1, 1, 1000, 1000, 7, 0.1, 0.05, 0.8), 11);
    EXPECT_EQ(scan(1, 1, 10, 1000, 1000, 7, 0.01, default_horizon(7)), 11);

    EXPECT_EQ(oracle::closed_form_duration(1, 1, 1000, 1000, 7, 0.01, 0.05, 0.8), 1099);
    const auto far = scan(1, 1, 1, 1000, 1000, 7, 0.01, 2000);
    ASSERT_TRUE(far);
    EXPECT_LE(std::abs(*far - 1099), 1);
    EXPECT_FALSE(scan(1, 1, 1, 1000, 1000, 7, 0.01, default_horizon(7)));
}

TEST(RecommendDuration, AgreesWithClosedFormOnRandomInputs) {
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        const double mse0 = 0.2 + 5 * rng.uniform(), mse1 = 0.2 + 5 * rng.uniform();
        const auto n = 200 + rng.below(5000);
        const int day = 1 + static_cast<int>(rng.below(14));
        const double ybar = 1 + 20 * rng.uniform(), delta = 0.005 + 0.05 * rng.uniform();
        const long expected = oracle::closed_form_duration(mse0, mse1, static_cast<double>(n), static_cast<double>(n),
                                                           day, delta * ybar, 0.05, 0.8);
        const auto found = scan(mse0, mse1, ybar, n, n, day, delta, static_cast<int>(expected) + 10);
        ASSERT_TRUE(found) << i;
        EXPECT_LE(std::abs(*found - expected), 1) << i;
    }
}

TEST(RecommendDuration, Errors) {
    const auto f = forecast_from_counts(10, 10, 7, 14);
    const auto e = fake_estimate(1, 1, 1);
    EXPECT_THROW(recommend_duration(e, f, 0.0), ValidationError);
    EXPECT_THROW(recommend_duration(e, f, 0.1, 0.0), ValidationError);
    EXPECT_THROW(recommend_duration(e, f, 0.1, 0.05, 1.0), ValidationError);
    EXPECT_THROW(recommend_duration(e, std::span<const ArmForecast>{}, 0.1), ValidationError);
}

TEST(RecommendDuration, ReportsVarianceAndPower) {
    const auto f = forecast_from_counts(1000, 1000, 7, 70);
    const auto r = recommend_duration(fake_estimate(1, 1, 10), f, 0.01);
    EXPECT_EQ(r.analysis_day, 7);
    EXPECT_EQ(r.horizon, 70);
    EXPECT_DOUBLE_EQ(r.variance_at_analysis_day, 0.002);
    ASSERT_TRUE(r.projected_variance && r.power_at_day_found);
    EXPECT_LT(*r.projected_variance, r.variance_at_analysis_day);
    EXPECT_GE(*r.power_at_day_found, 0.8);
    EXPECT_DOUBLE_EQ(r.effect, 0.1);
}
