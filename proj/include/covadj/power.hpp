#pragma once

// Experiment-duration recommendation: project arm sizes forward and find the
// first day on which a two-sided z-test of LIFT = 0 reaches the target power
// against LIFT = delta.

#include <covadj/dataset.hpp>
#include <covadj/error.hpp>
#include <covadj/estimator.hpp>
#include <covadj/numeric.hpp>

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace covadj {

struct ArmForecast {
    int day = 0;
    std::size_t n0 = 0;
    std::size_t n1 = 0;
};

// Linear extrapolation from anchor counts at `day`.
inline std::vector<ArmForecast> forecast_from_counts(std::size_t n0, std::size_t n1, int day, int horizon) {
    if (day < 1) throw ValidationError("analysis day must be at least 1");
    if (horizon < day) throw ValidationError("horizon must not precede the analysis day");
    std::vector<ArmForecast> out;
    out.reserve(static_cast<std::size_t>(horizon - day + 1));
    for (int d = day; d <= horizon; ++d) {
        const double scale = static_cast<double>(d) / static_cast<double>(day);
        out.push_back({d, static_cast<std::size_t>(std::llround(static_cast<double>(n0) * scale)),
                       static_cast<std::size_t>(std::llround(static_cast<double>(n1) * scale))});
    }
    return out;
}

// Linear extrapolation of arm counts: N_t(d) = round(N_t(D) * d / D) for
// d = D..horizon. The first entry is the anchor day D itself.
inline std::vector<ArmForecast> forecast_arm_sizes(const ExperimentData& data, int day, int horizon) {
    if (!data.day_index)
        throw ValidationError("forecast needs a day column; pass one in the schema or generate with daily arrivals");
    std::size_t n0 = 0, n1 = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if ((*data.day_index)[i] > day) continue;
        (data.assignment[i] == 0 ? n0 : n1) += 1;
    }
    return forecast_from_counts(n0, n1, day, horizon);
}

// Power of the two-sided level-alpha z-test when the true effect is
// `effect` and the estimator variance is `variance`.
inline double z_test_power(double effect, double variance, double alpha) {
    if (!(variance > 0.0)) return 1.0;
    return normal_cdf(std::abs(effect) / std::sqrt(variance) - two_sided_critical(alpha));
}

struct DurationRecommendation {
    std::string model_id;
    int analysis_day = 0;
    std::optional<int> day_found;               // empty: not within horizon
    double alpha = 0.05;
    double target_power = 0.8;
    double delta = 0.0;
    double effect = 0.0;                        // delta * |control mean|
    double variance_at_analysis_day = 0.0;
    std::optional<double> projected_variance;   // at day_found
    std::optional<double> power_at_day_found;
    int horizon = 0;
};

inline double projected_variance(const AteEstimate& est, const ArmForecast& f) {
    if (f.n0 == 0 || f.n1 == 0) return std::numeric_limits<double>::infinity();
    return est.mse_per_arm[1] / static_cast<double>(f.n1) + est.mse_per_arm[0] / static_cast<double>(f.n0);
}

// Scans the forecast day by day past the anchor. MSEs and the control mean
// stay frozen at their analysis-day values.
inline DurationRecommendation recommend_duration(const AteEstimate& est, std::span<const ArmForecast> forecast,
                                                 double delta, double alpha = 0.05, double target_power = 0.8) {
    if (delta == 0.0 || !std::isfinite(delta)) throw ValidationError("delta must be a non-zero finite lift");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
    if (!(target_power > 0.0 && target_power < 1.0)) throw ValidationError("target power must lie in (0, 1)");
    if (forecast.empty()) throw ValidationError("empty forecast");

    DurationRecommendation rec;
    rec.model_id = est.model_id;
    rec.analysis_day = forecast.front().day;
    rec.horizon = forecast.back().day;
    rec.alpha = alpha;
    rec.target_power = target_power;
    rec.delta = delta;
    rec.effect = delta * std::abs(est.control_mean);
    rec.variance_at_analysis_day = projected_variance(est, forecast.front());
    for (const auto& f : forecast.subspan(1)) {
        const double v = projected_variance(est, f);
        const double pw = z_test_power(rec.effect, v, alpha);
        if (pw >= target_power) {
            rec.day_found = f.day;
            rec.projected_variance = v;
            rec.power_at_day_found = pw;
            break;
        }
    }
    return rec;
}

// Default search horizon: ten times the analysis day.
inline int default_horizon(int day) { return 10 * day; }

} // namespace covadj
