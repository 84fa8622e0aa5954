#pragma once

// Covariate-adjusted ATE estimation by per-arm regression and cross-arm
// imputation (generalized Oaxaca-Blinder estimators).

#include <covadj/dataset.hpp>
#include <covadj/error.hpp>
#include <covadj/numeric.hpp>
#include <covadj/regression.hpp>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace covadj {

struct AteEstimate {
    std::string model_id;
    double ate = 0.0;
    double variance = 0.0;
    std::array<double, 2> mse_per_arm{};        // indexed by arm
    std::array<std::size_t, 2> n_per_arm{};     // indexed by arm
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double alpha = 0.05;                        // significance; CI level is 1 - alpha
    double control_mean = 0.0;                  // observed mean outcome of arm 0
    std::optional<double> lift;                 // ate / |control_mean|
    std::optional<std::array<double, 2>> lift_ci;
    std::array<std::optional<double>, 2> chosen_gamma;  // penalized kinds
    std::vector<std::string> warnings;

    double half_width() const noexcept { return 0.5 * (ci_hi - ci_lo); }
};

// Outcome, covariates and an assignment vector, without copying. The A/A
// harness reuses one table under many assignments through this view.
struct DesignView {
    const Eigen::VectorXd& outcome;
    const Eigen::MatrixXd& covariates;
    std::span<const int> assignment;
    std::size_t pre_period_col = 0;

    static DesignView of(const ExperimentData& data) {
        return {data.outcome, data.covariates, data.assignment, data.pre_period_col};
    }

    std::size_t size() const noexcept { return assignment.size(); }
};

namespace detail {

inline std::array<std::vector<std::size_t>, 2> arm_rows(std::span<const int> assignment) {
    std::array<std::vector<std::size_t>, 2> rows;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        const int j = assignment[i];
        if (j != 0 && j != 1) throw ValidationError("assignment must be 0 or 1");
        rows[static_cast<std::size_t>(j)].push_back(i);
    }
    return rows;
}

inline ArmData gather_arm(const DesignView& d, const std::vector<std::size_t>& rows) {
    ArmData arm;
    const auto m = static_cast<Eigen::Index>(rows.size());
    arm.y.resize(m);
    arm.z.resize(m, d.covariates.cols());
    for (Eigen::Index i = 0; i < m; ++i) {
        const auto r = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]);
        arm.y[i] = d.outcome[r];
    }
    for (Eigen::Index k = 0; k < d.covariates.cols(); ++k)
        for (Eigen::Index i = 0; i < m; ++i)
            arm.z(i, k) = d.covariates(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]), k);
    arm.pre_period_col = d.pre_period_col;
    return arm;
}

inline void require_two_per_arm(const std::array<std::vector<std::size_t>, 2>& rows) {
    for (int t : {0, 1})
        if (rows[static_cast<std::size_t>(t)].size() < 2)
            throw ValidationError("arm " + std::to_string(t) + " has " +
                                  std::to_string(rows[static_cast<std::size_t>(t)].size()) +
                                  " unit(s); the MSE estimate needs at least 2 per arm");
}

// Assembles the estimate from imputed potential outcomes and in-sample fits.
// `imputed` is N x 2 and `fitted` holds f_t(z_n) for n in arm t.
inline AteEstimate summarize(const DesignView& d, const std::array<std::vector<std::size_t>, 2>& rows,
                             const Eigen::MatrixX2d& imputed, const std::array<Eigen::VectorXd, 2>& fitted,
                             double alpha) {
    AteEstimate est;
    est.alpha = alpha;
    CompensatedSum diff;
    for (Eigen::Index i = 0; i < imputed.rows(); ++i) diff += imputed(i, 1) - imputed(i, 0);
    est.ate = diff.value() / static_cast<double>(imputed.rows());

    for (std::size_t t = 0; t < 2; ++t) {
        const auto& r = rows[t];
        CompensatedSum sse;
        for (std::size_t i = 0; i < r.size(); ++i) {
            const double e = d.outcome[static_cast<Eigen::Index>(r[i])] - fitted[t][static_cast<Eigen::Index>(i)];
            sse += e * e;
        }
        est.n_per_arm[t] = r.size();
        est.mse_per_arm[t] = sse.value() / static_cast<double>(r.size() - 1);
    }
    est.variance = est.mse_per_arm[1] / static_cast<double>(est.n_per_arm[1]) +
                   est.mse_per_arm[0] / static_cast<double>(est.n_per_arm[0]);
    const double half = two_sided_critical(alpha) * std::sqrt(est.variance);
    est.ci_lo = est.ate - half;
    est.ci_hi = est.ate + half;

    CompensatedSum control;
    for (auto r : rows[0]) control += d.outcome[static_cast<Eigen::Index>(r)];
    est.control_mean = control.value() / static_cast<double>(rows[0].size());
    if (est.control_mean != 0.0) {
        const double denom = std::abs(est.control_mean);
        est.lift = est.ate / denom;
        est.lift_ci = std::array<double, 2>{est.ci_lo / denom, est.ci_hi / denom};
    } else {
        est.warnings.push_back("lift undefined: control mean is zero");
    }
    return est;
}

inline void collect_warnings(AteEstimate& est, const FittedArmModel& m, int arm) {
    const std::string prefix = "arm " + std::to_string(arm) + ": ";
    if (m.degenerated_to_dim) est.warnings.push_back(prefix + "no covariate with variance; model reduced to the arm mean");
    else if (!m.dropped_columns.empty())
        est.warnings.push_back(prefix + std::to_string(m.dropped_columns.size()) + " zero-variance covariate(s) dropped");
    if (m.rank_deficient) est.warnings.push_back(prefix + "design is rank deficient; minimum-norm solution used");
}

inline void check_alpha(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
}

} // namespace detail

// Fits models[t] on arm t. The same seed is used for both arms so that
// relabeling the arms relabels the fits.
inline std::array<FittedArmModel, 2> fit_arms(const DesignView& d, const ModelSpec& spec, std::uint64_t seed) {
    const auto rows = detail::arm_rows(d.assignment);
    std::array<FittedArmModel, 2> models;
    for (int t : {0, 1}) {
        const auto& r = rows[static_cast<std::size_t>(t)];
        if (r.empty()) throw ValidationError("arm " + std::to_string(t) + " is empty");
        models[static_cast<std::size_t>(t)] = fit(spec, detail::gather_arm(d, r), derive_seed(seed, 0));
        models[static_cast<std::size_t>(t)].arm = t;
    }
    return models;
}

// N x 2 matrix of imputed potential outcomes: column t is Y_n where unit n
// is in arm t and models[t]'s prediction otherwise.
inline Eigen::MatrixX2d impute(const DesignView& d, const std::array<FittedArmModel, 2>& models) {
    for (int t : {0, 1}) {
        const auto& m = models[static_cast<std::size_t>(t)];
        if (m.arm != -1 && m.arm != t)
            throw ValidationError("impute: model for arm " + std::to_string(m.arm) + " passed in slot " +
                                  std::to_string(t));
        if (m.n_covariates != static_cast<std::size_t>(d.covariates.cols()))
            throw ValidationError("impute: model expects " + std::to_string(m.n_covariates) + " covariates, data has " +
                                  std::to_string(d.covariates.cols()));
    }
    const auto n = static_cast<Eigen::Index>(d.size());
    Eigen::MatrixX2d out(n, 2);
    const Eigen::VectorXd pred0 = predict(models[0], d.covariates);
    const Eigen::VectorXd pred1 = predict(models[1], d.covariates);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int j = d.assignment[static_cast<std::size_t>(i)];
        out(i, 0) = j == 0 ? d.outcome[i] : pred0[i];
        out(i, 1) = j == 1 ? d.outcome[i] : pred1[i];
    }
    return out;
}

inline Eigen::MatrixX2d impute(const ExperimentData& data, const std::array<FittedArmModel, 2>& models) {
    return impute(DesignView::of(data), models);
}

inline AteEstimate estimate_two_step(const DesignView& d, const ModelSpec& base, double alpha, std::uint64_t seed);

// Per-arm fit, imputation, ATE, Gaussian CI.
inline AteEstimate estimate(const DesignView& d, const ModelSpec& spec, double alpha, std::uint64_t seed) {
    detail::check_alpha(alpha);
    spec.validate();
    if (spec.kind == ModelKind::TwoStep) return estimate_two_step(d, *spec.base, alpha, seed);

    const auto rows = detail::arm_rows(d.assignment);
    detail::require_two_per_arm(rows);
    std::array<FittedArmModel, 2> models;
    std::array<Eigen::VectorXd, 2> fitted;
    for (std::size_t t = 0; t < 2; ++t) {
        const auto arm = detail::gather_arm(d, rows[t]);
        models[t] = fit(spec, arm, derive_seed(seed, 0));
        models[t].arm = static_cast<int>(t);
        fitted[t] = predict(models[t], arm.z);
    }
    auto est = detail::summarize(d, rows, impute(d, models), fitted, alpha);
    est.model_id = to_string(spec);
    for (int t : {0, 1}) {
        detail::collect_warnings(est, models[static_cast<std::size_t>(t)], t);
        est.chosen_gamma[static_cast<std::size_t>(t)] = models[static_cast<std::size_t>(t)].chosen_gamma;
    }
    return est;
}

// Two-step estimator. Step one fits `base` per arm. Step two fits, in each
// arm t, an OLS of Y on the single covariate f_{1-t}(z) (the other arm's
// prediction, which is each arm-t unit's imputed cross-arm value) and
// imputes with it. The reported estimate and CI come from step two.
inline AteEstimate estimate_two_step(const DesignView& d, const ModelSpec& base, double alpha, std::uint64_t seed) {
    detail::check_alpha(alpha);
    base.validate();
    if (base.kind == ModelKind::TwoStep) throw ValidationError("two_step cannot nest another two_step");
    const auto rows = detail::arm_rows(d.assignment);
    detail::require_two_per_arm(rows);

    std::array<FittedArmModel, 2> first;
    for (std::size_t t = 0; t < 2; ++t) {
        first[t] = fit(base, detail::gather_arm(d, rows[t]), derive_seed(seed, 0));
        first[t].arm = static_cast<int>(t);
    }
    // cross[t] holds f_{1-t}(z_n) for every unit: the step-two covariate of
    // the arm-t model.
    const std::array<Eigen::MatrixXd, 2> cross{predict(first[1], d.covariates), predict(first[0], d.covariates)};

    const auto n = static_cast<Eigen::Index>(d.size());
    Eigen::MatrixX2d imputed(n, 2);
    std::array<Eigen::VectorXd, 2> fitted;
    std::array<FittedArmModel, 2> second;
    const auto lr = ModelSpec::ols();
    for (std::size_t t = 0; t < 2; ++t) {
        const DesignView view{d.outcome, cross[t], d.assignment, 0};
        const auto arm = detail::gather_arm(view, rows[t]);
        second[t] = fit(lr, arm, derive_seed(seed, 1));
        second[t].arm = static_cast<int>(t);
        fitted[t] = predict(second[t], arm.z);
        const Eigen::VectorXd pred = predict(second[t], cross[t]);
        for (Eigen::Index i = 0; i < n; ++i)
            imputed(i, static_cast<Eigen::Index>(t)) =
                d.assignment[static_cast<std::size_t>(i)] == static_cast<int>(t) ? d.outcome[i] : pred[i];
    }
    auto est = detail::summarize(d, rows, imputed, fitted, alpha);
    est.model_id = "two_step:" + to_string(base);
    for (int t : {0, 1}) {
        detail::collect_warnings(est, first[static_cast<std::size_t>(t)], t);
        est.chosen_gamma[static_cast<std::size_t>(t)] = first[static_cast<std::size_t>(t)].chosen_gamma;
    }
    return est;
}

inline AteEstimate estimate(const ExperimentData& data, const ModelSpec& spec, double alpha, std::uint64_t seed) {
    return estimate(DesignView::of(data), spec, alpha, seed);
}

inline AteEstimate estimate_two_step(const ExperimentData& data, const ModelSpec& base, double alpha,
                                     std::uint64_t seed) {
    return estimate_two_step(DesignView::of(data), base, alpha, seed);
}

// Percentage variance reduction against the DIM estimate on the same data:
// 100 * (1 - Var_M / Var_DIM). Empty when Var_DIM is zero.
inline std::optional<double> variance_reduction(const AteEstimate& candidate, const AteEstimate& baseline_dim) {
    if (!(baseline_dim.variance > 0.0)) return std::nullopt;
    return 100.0 * (1.0 - candidate.variance / baseline_dim.variance);
}

} // namespace covadj
