#pragma once

// Spurious-covariate stress testing: append folds of Gaussian noise columns
// matched to the real covariates' moments, then measure how far each
// model's estimate drifts from a full-data reference estimate.

#include <covadj/dataset.hpp>
#include <covadj/estimator.hpp>
#include <covadj/numeric.hpp>
#include <covadj/random.hpp>

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace covadj {

struct Augmented {
    ExperimentData data;
    std::vector<std::size_t> constant_columns;  // original columns with zero sd
};

// Appends L spurious folds. Column l*K + k (l >= 1) is drawn i.i.d. from
// N(mean_k, sd_k) with the sample moments (n - 1 denominator) of real
// column k. Draws go fold by fold, column by column, unit by unit.
inline Augmented augment(const ExperimentData& data, std::size_t folds, std::uint64_t seed) {
    if (folds < 1) throw ValidationError("augment: L must be at least 1");
    const Eigen::Index n = data.covariates.rows();
    const Eigen::Index k = data.covariates.cols();
    Augmented out;
    out.data = data;
    out.data.covariates.resize(n, k * static_cast<Eigen::Index>(folds + 1));
    out.data.covariates.leftCols(k) = data.covariates;

    std::vector<double> mu(static_cast<std::size_t>(k)), sd(static_cast<std::size_t>(k));
    for (Eigen::Index c = 0; c < k; ++c) {
        const std::span<const double> col(data.covariates.col(c).data(), static_cast<std::size_t>(n));
        mu[static_cast<std::size_t>(c)] = mean(col);
        const double var = n > 1 ? sample_variance(col) : 0.0;
        sd[static_cast<std::size_t>(c)] = std::sqrt(var);
        if (!(var > 0.0)) out.constant_columns.push_back(static_cast<std::size_t>(c));
    }

    Rng rng(seed);
    for (std::size_t l = 1; l <= folds; ++l) {
        for (Eigen::Index c = 0; c < k; ++c) {
            const Eigen::Index dst = static_cast<Eigen::Index>(l) * k + c;
            const double m = mu[static_cast<std::size_t>(c)];
            const double s = sd[static_cast<std::size_t>(c)];
            for (Eigen::Index i = 0; i < n; ++i) out.data.covariates(i, dst) = m + s * rng.normal();
            out.data.covariate_names.push_back(data.covariate_names[static_cast<std::size_t>(c)] + "~" +
                                               std::to_string(l));
        }
    }
    return out;
}

struct StressConfig {
    std::vector<std::size_t> folds{1};     // each L >= 1
    std::size_t mc_draws = 100;
    std::vector<ModelSpec> models;
    std::uint64_t seed = 0;
    ModelSpec reference_model = ModelSpec::ols();
    double alpha = 0.05;

    void validate() const {
        if (folds.empty()) throw ValidationError("stress: at least one fold count is required");
        for (auto l : folds)
            if (l < 1) throw ValidationError("stress: fold counts must be at least 1");
        if (mc_draws < 1) throw ValidationError("stress: at least one draw is required");
        if (models.empty()) throw ValidationError("stress: no models");
        for (const auto& m : models) m.validate();
        reference_model.validate();
    }
};

struct StressDraw {
    std::size_t model = 0;
    std::size_t folds = 0;
    std::size_t draw = 0;
    bool ok = false;
    double ate = 0.0;
    double err = 0.0;                 // relative (or absolute, see StressResult)
    std::optional<double> vr;         // variance reduction vs DIM on the same draw
    double runtime_ms = 0.0;
    std::string error;
};

struct StressSummary {
    std::string model_id;
    std::size_t folds = 0;
    double median_err = 0.0;
    std::optional<double> median_vr;
    double median_runtime_ms = 0.0;
    std::size_t n_ok = 0;
    std::size_t n_failed = 0;
};

struct StressResult {
    double reference_ate = 0.0;
    std::string reference_model;
    bool absolute_errors = false;     // reference ATE was zero
    std::vector<std::string> model_ids;
    std::vector<StressDraw> draws;
    std::vector<StressSummary> summaries;  // per (model, L)
};

// |ate - reference| / |reference|, or the absolute difference when the
// reference is zero.
inline double estimate_error(double ate, double reference) {
    const double diff = std::abs(ate - reference);
    return reference != 0.0 ? diff / std::abs(reference) : diff;
}

inline StressResult error_distribution(const ExperimentData& data, const StressConfig& config) {
    config.validate();
    StressResult result;
    // The reference is computed once, with a fixed seed, on the real covariates.
    const auto reference = estimate(data, config.reference_model, config.alpha, derive_seed(config.seed, 0));
    result.reference_ate = reference.ate;
    result.reference_model = reference.model_id;
    result.absolute_errors = reference.ate == 0.0;
    for (const auto& m : config.models) result.model_ids.push_back(to_string(m));

    const auto dim = estimate(data, ModelSpec::dim(), config.alpha, 0);
    for (std::size_t li = 0; li < config.folds.size(); ++li) {
        const std::size_t folds = config.folds[li];
        std::vector<std::vector<double>> errs(config.models.size()), vrs(config.models.size()),
            times(config.models.size());
        std::vector<std::size_t> failed(config.models.size(), 0);
        for (std::size_t s = 0; s < config.mc_draws; ++s) {
            const std::uint64_t draw_seed = derive_seed(derive_seed(config.seed, folds), s + 1);
            const auto aug = augment(data, folds, draw_seed);
            for (std::size_t m = 0; m < config.models.size(); ++m) {
                StressDraw d;
                d.model = m;
                d.folds = folds;
                d.draw = s;
                try {
                    const auto t0 = std::chrono::steady_clock::now();
                    const auto est = estimate(aug.data, config.models[m], config.alpha, derive_seed(draw_seed, m + 1));
                    d.runtime_ms =
                        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                    times[m].push_back(d.runtime_ms);
                    d.ok = true;
                    d.ate = est.ate;
                    d.err = estimate_error(est.ate, reference.ate);
                    d.vr = variance_reduction(est, dim);
                    errs[m].push_back(d.err);
                    if (d.vr) vrs[m].push_back(*d.vr);
                } catch (const std::exception& e) {
                    d.error = e.what();
                    ++failed[m];
                }
                result.draws.push_back(std::move(d));
            }
        }
        for (std::size_t m = 0; m < config.models.size(); ++m) {
            StressSummary sum;
            sum.model_id = result.model_ids[m];
            sum.folds = folds;
            sum.n_ok = errs[m].size();
            sum.n_failed = failed[m];
            sum.median_err = median(errs[m]);
            if (!vrs[m].empty()) sum.median_vr = median(vrs[m]);
            if (!times[m].empty()) sum.median_runtime_ms = median(times[m]);
            result.summaries.push_back(std::move(sum));
        }
    }
    return result;
}

struct TimingRow {
    std::size_t n_units = 0;
    std::size_t folds = 0;            // 0: real covariates only
    std::string model_id;
    double runtime_ms = 0.0;          // best of `repetitions`
    std::optional<double> ratio_to_dim;
};

// Wall-clock cost of estimate() per (N, L, model) on synthetic data with K
// real covariates, best of `repetitions`, single-threaded. Rows come in
// (N, L, model) order.
inline std::vector<TimingRow> timing_profile(const std::vector<std::size_t>& data_sizes,
                                             const std::vector<std::size_t>& folds_list,
                                             const std::vector<ModelSpec>& models, std::uint64_t seed,
                                             std::size_t k_covariates = 5, std::size_t repetitions = 3) {
    using clock = std::chrono::steady_clock;
    std::vector<TimingRow> rows;
    for (std::size_t ni = 0; ni < data_sizes.size(); ++ni) {
        SyntheticConfig cfg;
        cfg.n_units = data_sizes[ni];
        cfg.k_covariates = k_covariates;
        cfg.outcome_cor = 0.8;
        cfg.seed = derive_seed(seed, ni);
        const auto base = generate(cfg);
        for (auto folds : folds_list) {
            const auto data = folds == 0 ? base : augment(base, folds, derive_seed(cfg.seed, folds)).data;
            auto time_one = [&](const ModelSpec& spec) {
                double best = std::numeric_limits<double>::infinity();
                for (std::size_t r = 0; r < std::max<std::size_t>(repetitions, 1); ++r) {
                    const auto t0 = clock::now();
                    const auto est = estimate(data, spec, 0.05, seed);
                    const auto t1 = clock::now();
                    (void)est;
                    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
                }
                return best;
            };
            const double dim_ms = time_one(ModelSpec::dim());
            for (const auto& spec : models) {
                TimingRow row;
                row.n_units = data_sizes[ni];
                row.folds = folds;
                row.model_id = to_string(spec);
                row.runtime_ms = spec.kind == ModelKind::Dim && spec.selection == ColumnSelection::All
                                     ? dim_ms
                                     : time_one(spec);
                if (dim_ms > 0.0) row.ratio_to_dim = row.runtime_ms / dim_ms;
                rows.push_back(std::move(row));
            }
        }
    }
    return rows;
}

} // namespace covadj
