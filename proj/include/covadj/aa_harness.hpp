#pragma once

// A/A re-randomization on a single arm: every split has true ATE 0, so the
// estimates measure bias and calibration as a function of chance imbalance.

#include <covadj/dataset.hpp>
#include <covadj/error.hpp>
#include <covadj/estimator.hpp>
#include <covadj/numeric.hpp>
#include <covadj/random.hpp>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace covadj {

struct SplitOutcome {
    bool ok = false;
    double ate = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    std::string error;
};

struct AaRun {
    std::size_t s_splits = 0;
    int arm = 0;
    double alpha = 0.05;
    std::uint64_t seed = 0;
    double true_ate = 0.0;
    std::size_t kappa = 20;
    std::size_t n_units = 0;

    std::vector<std::string> model_ids;            // model_ids[dim_index] == "dim"
    std::size_t dim_index = 0;
    std::vector<double> zeta;                      // per split
    std::vector<std::vector<SplitOutcome>> outcomes;  // [model][split]
    std::vector<std::size_t> failures;             // per model

    std::size_t model_index(const std::string& id) const {
        const auto it = std::find(model_ids.begin(), model_ids.end(), id);
        if (it == model_ids.end()) throw ValidationError("model '" + id + "' not in this run");
        return static_cast<std::size_t>(it - model_ids.begin());
    }
};

// Uniform random half-split of 0..n-1: returns the per-unit fake arm with
// floor(n/2) zeros.
inline std::vector<int> half_split(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    const auto perm = random_permutation(n, rng);
    std::vector<int> assignment(n);
    for (std::size_t i = 0; i < n; ++i) assignment[perm[i]] = i < n / 2 ? 0 : 1;
    return assignment;
}

// Difference of pre-period means between fake treatment and fake control.
inline double imbalance(const Eigen::VectorXd& x, std::span<const int> assignment) {
    CompensatedSum s0, s1;
    std::size_t n0 = 0, n1 = 0;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        const double v = x[static_cast<Eigen::Index>(i)];
        if (assignment[i] == 1) {
            s1 += v;
            ++n1;
        } else {
            s0 += v;
            ++n0;
        }
    }
    return s1.value() / static_cast<double>(n1) - s0.value() / static_cast<double>(n0);
}

// Runs S re-randomizations of arm `arm` and estimates every model on each.
// DIM is added when missing. Split s uses derive_seed(seed, s), so the run
// is identical for any thread count.
inline AaRun run_aa(const ExperimentData& data, int arm, std::vector<ModelSpec> models, std::size_t s_splits,
                    double alpha, std::uint64_t seed, unsigned threads = 0) {
    if (s_splits < 1) throw ValidationError("run_aa: S must be at least 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
    const auto single = restrict_to_arm(data, arm);
    const std::size_t n = single.size();
    if (n < 4) throw ValidationError("run_aa: arm " + std::to_string(arm) + " has " + std::to_string(n) +
                                     " units; at least 4 are required");

    AaRun run;
    run.s_splits = s_splits;
    run.arm = arm;
    run.alpha = alpha;
    run.seed = seed;
    run.n_units = n;
    for (auto& m : models) m.validate();
    const bool has_dim = std::any_of(models.begin(), models.end(), [](const ModelSpec& m) {
        return m.kind == ModelKind::Dim && m.selection == ColumnSelection::All;
    });
    if (!has_dim) models.insert(models.begin(), ModelSpec::dim());
    for (const auto& m : models) run.model_ids.push_back(to_string(m));
    run.dim_index = run.model_index("dim");

    run.zeta.assign(s_splits, 0.0);
    run.outcomes.assign(models.size(), std::vector<SplitOutcome>(s_splits));
    run.failures.assign(models.size(), 0);

    const Eigen::VectorXd x = single.pre_period();
    auto work = [&](std::size_t s) {
        const std::uint64_t split_seed = derive_seed(seed, s);
        const auto assignment = half_split(n, split_seed);
        run.zeta[s] = imbalance(x, assignment);
        const DesignView view{single.outcome, single.covariates, assignment, single.pre_period_col};
        for (std::size_t m = 0; m < models.size(); ++m) {
            auto& out = run.outcomes[m][s];
            try {
                const auto est = estimate(view, models[m], alpha, derive_seed(split_seed, m + 1));
                out.ok = true;
                out.ate = est.ate;
                out.ci_lo = est.ci_lo;
                out.ci_hi = est.ci_hi;
            } catch (const std::exception& e) {
                out.ok = false;
                out.error = e.what();
            }
        }
    };

    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, s_splits));
    if (threads <= 1) {
        for (std::size_t s = 0; s < s_splits; ++s) work(s);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (std::size_t s = next++; s < s_splits; s = next++) work(s);
            });
        for (auto& th : pool) th.join();
    }

    for (std::size_t m = 0; m < models.size(); ++m)
        for (const auto& o : run.outcomes[m]) run.failures[m] += !o.ok;
    return run;
}

struct BucketModelMetrics {
    std::size_t count = 0;    // successful splits in the bucket
    double mse = 0.0;
    double median_dist = 0.0;
    double excess_frac = 0.0;
    double coverage = 0.0;
};

// Relative-to-DIM forms; empty when the DIM metric in the bucket is zero.
struct RelativeMetrics {
    std::optional<double> r_mse;
    std::optional<double> r_median_dist;
    std::optional<double> r_excess_frac;
};

struct Bucket {
    std::vector<std::size_t> splits;  // split indices, ascending zeta
    double zeta_min = 0.0;
    double zeta_max = 0.0;
    std::vector<BucketModelMetrics> metrics;  // per model
    std::vector<RelativeMetrics> relative;    // per model; empty entries for DIM
};

struct BucketMetrics {
    std::size_t kappa = 0;
    std::vector<std::string> model_ids;
    std::size_t dim_index = 0;
    std::vector<Bucket> buckets;
};

// Per-bucket metrics for a set of estimates against a known truth.
// Values equal to the truth count on neither side of it, and the excess
// fraction is clamped to [0, 1].
inline BucketModelMetrics bucket_statistics(const std::vector<double>& estimates,
                                            const std::vector<std::pair<double, double>>& intervals, double truth) {
    BucketModelMetrics m;
    m.count = estimates.size();
    if (estimates.empty()) return m;
    const double count = static_cast<double>(estimates.size());
    CompensatedSum sq;
    std::size_t above = 0, below = 0, covered = 0;
    for (double e : estimates) {
        sq += (e - truth) * (e - truth);
        above += e > truth;
        below += e < truth;
    }
    for (const auto& [lo, hi] : intervals) covered += (lo <= truth && truth <= hi);
    m.mse = sq.value() / count;
    const double med = median(estimates);
    m.median_dist = (med - truth) * (med - truth);
    const double worst_side = std::max(static_cast<double>(above), static_cast<double>(below)) / count;
    m.excess_frac = std::clamp((worst_side - 0.5) / 0.5, 0.0, 1.0);
    m.coverage = static_cast<double>(covered) / static_cast<double>(intervals.size());
    return m;
}

inline std::optional<double> relative_to_dim(double dim_metric, double model_metric) {
    if (dim_metric == 0.0) return std::nullopt;
    return (dim_metric - model_metric) / dim_metric;
}

// Sorts splits by zeta (ties by split index), cuts them into kappa buckets
// whose sizes differ by at most one, and scores every model in each bucket.
inline BucketMetrics bucket_metrics(const AaRun& run, std::size_t kappa) {
    if (kappa < 1) throw ValidationError("bucket_metrics: kappa must be at least 1");
    if (kappa > run.s_splits)
        throw ValidationError("bucket_metrics: kappa = " + std::to_string(kappa) + " exceeds S = " +
                              std::to_string(run.s_splits));
    BucketMetrics out;
    out.kappa = kappa;
    out.model_ids = run.model_ids;
    out.dim_index = run.dim_index;

    std::vector<std::size_t> order(run.s_splits);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return run.zeta[a] < run.zeta[b]; });

    const std::size_t base = run.s_splits / kappa;
    const std::size_t extra = run.s_splits % kappa;
    std::size_t pos = 0;
    for (std::size_t j = 0; j < kappa; ++j) {
        const std::size_t size = base + (j < extra ? 1 : 0);
        Bucket bucket;
        bucket.splits.assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                             order.begin() + static_cast<std::ptrdiff_t>(pos + size));
        pos += size;
        bucket.zeta_min = run.zeta[bucket.splits.front()];
        bucket.zeta_max = run.zeta[bucket.splits.back()];
        for (std::size_t m = 0; m < run.model_ids.size(); ++m) {
            std::vector<double> estimates;
            std::vector<std::pair<double, double>> intervals;
            for (auto s : bucket.splits) {
                const auto& o = run.outcomes[m][s];
                if (!o.ok) continue;
                estimates.push_back(o.ate);
                intervals.emplace_back(o.ci_lo, o.ci_hi);
            }
            bucket.metrics.push_back(bucket_statistics(estimates, intervals, run.true_ate));
        }
        const auto& dim = bucket.metrics[run.dim_index];
        for (std::size_t m = 0; m < run.model_ids.size(); ++m) {
            RelativeMetrics r;
            if (m != run.dim_index) {
                const auto& mm = bucket.metrics[m];
                r.r_mse = relative_to_dim(dim.mse, mm.mse);
                r.r_median_dist = relative_to_dim(dim.median_dist, mm.median_dist);
                r.r_excess_frac = relative_to_dim(dim.excess_frac, mm.excess_frac);
            }
            bucket.relative.push_back(r);
        }
        out.buckets.push_back(std::move(bucket));
    }
    return out;
}

// Fraction of successful splits whose interval contains the truth.
inline double pooled_coverage(const AaRun& run, std::size_t model) {
    std::size_t ok = 0, covered = 0;
    for (const auto& o : run.outcomes.at(model)) {
        if (!o.ok) continue;
        ++ok;
        covered += (o.ci_lo <= run.true_ate && run.true_ate <= o.ci_hi);
    }
    return ok ? static_cast<double>(covered) / static_cast<double>(ok) : std::numeric_limits<double>::quiet_NaN();
}

// Least-squares slope of a model's estimates on zeta (the conditional-bias
// signature), over successful splits.
inline double imbalance_slope(const AaRun& run, std::size_t model) {
    std::vector<double> z, a;
    for (std::size_t s = 0; s < run.s_splits; ++s) {
        const auto& o = run.outcomes.at(model)[s];
        if (!o.ok) continue;
        z.push_back(run.zeta[s]);
        a.push_back(o.ate);
    }
    return ols_slope(z, a);
}

} // namespace covadj
