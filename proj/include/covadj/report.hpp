#pragma once

// JSON and CSV serialization of results, plus cross-experiment aggregation
// of saved reports. Reports hold only deterministic content; wall-clock
// timings belong in the run manifest.

#include <covadj/aa_harness.hpp>
#include <covadj/dataset.hpp>
#include <covadj/estimator.hpp>
#include <covadj/numeric.hpp>
#include <covadj/power.hpp>
#include <covadj/stress.hpp>

#include <json.hpp>

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace covadj {

using json = nlohmann::ordered_json;

inline constexpr const char* version = "1.0.0";

namespace detail {

template <class T>
json opt(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

// Finite doubles as numbers, anything else as null.
inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline std::string csv_num(double v) { return std::isfinite(v) ? detail::format_number(v) : std::string(); }

template <class T>
std::string csv_opt(const std::optional<T>& v) {
    if (!v) return {};
    if constexpr (std::is_floating_point_v<T>) return csv_num(*v);
    else return std::to_string(*v);
}

} // namespace detail

inline json to_json(const AteEstimate& e) {
    json j;
    j["model_id"] = e.model_id;
    j["ate"] = detail::num(e.ate);
    j["lift"] = e.lift ? detail::num(*e.lift) : json(nullptr);
    j["variance"] = detail::num(e.variance);
    j["mse_per_arm"] = {detail::num(e.mse_per_arm[0]), detail::num(e.mse_per_arm[1])};
    j["ci"] = {detail::num(e.ci_lo), detail::num(e.ci_hi)};
    j["lift_ci"] = e.lift_ci ? json{detail::num((*e.lift_ci)[0]), detail::num((*e.lift_ci)[1])} : json(nullptr);
    j["alpha"] = e.alpha;
    j["n_per_arm"] = {e.n_per_arm[0], e.n_per_arm[1]};
    j["control_mean"] = detail::num(e.control_mean);
    j["chosen_gamma"] = {detail::opt(e.chosen_gamma[0]), detail::opt(e.chosen_gamma[1])};
    j["warnings"] = e.warnings;
    return j;
}

inline json to_json(const DurationRecommendation& r) {
    json j;
    j["model_id"] = r.model_id;
    j["D"] = r.analysis_day;
    j["D_prime"] = detail::opt(r.day_found);
    j["within_horizon"] = r.day_found.has_value();
    j["delta"] = r.delta;
    j["alpha"] = r.alpha;
    j["power_target"] = r.target_power;
    j["effect"] = detail::num(r.effect);
    j["variance_at_D"] = detail::num(r.variance_at_analysis_day);
    j["projected_variance_at_D_prime"] = detail::opt(r.projected_variance);
    j["power_at_D_prime"] = detail::opt(r.power_at_day_found);
    j["horizon"] = r.horizon;
    return j;
}

inline json to_json(const BucketMetrics& bm, const AaRun& run) {
    json buckets = json::array();
    for (std::size_t b = 0; b < bm.buckets.size(); ++b) {
        const auto& bucket = bm.buckets[b];
        json jb;
        jb["bucket"] = b + 1;
        jb["size"] = bucket.splits.size();
        jb["zeta_range"] = {detail::num(bucket.zeta_min), detail::num(bucket.zeta_max)};
        json models = json::array();
        for (std::size_t m = 0; m < bm.model_ids.size(); ++m) {
            const auto& mm = bucket.metrics[m];
            const auto& r = bucket.relative[m];
            json jm;
            jm["model_id"] = bm.model_ids[m];
            jm["count"] = mm.count;
            jm["mse"] = detail::num(mm.mse);
            jm["median_dist"] = detail::num(mm.median_dist);
            jm["excess_frac"] = detail::num(mm.excess_frac);
            jm["coverage"] = detail::num(mm.coverage);
            jm["r_mse"] = detail::opt(r.r_mse);
            jm["r_median_dist"] = detail::opt(r.r_median_dist);
            jm["r_excess_frac"] = detail::opt(r.r_excess_frac);
            models.push_back(jm);
        }
        jb["models"] = models;
        buckets.push_back(jb);
    }
    json j;
    j["kappa"] = bm.kappa;
    j["true_ate"] = run.true_ate;
    j["buckets"] = buckets;
    return j;
}

inline json to_json(const AaRun& run) {
    json models = json::array();
    for (std::size_t m = 0; m < run.model_ids.size(); ++m) {
        models.push_back({{"model_id", run.model_ids[m]},
                          {"failures", run.failures[m]},
                          {"pooled_coverage", detail::num(pooled_coverage(run, m))},
                          {"imbalance_slope", detail::num(imbalance_slope(run, m))}});
    }
    std::vector<double> z = run.zeta;
    json j;
    j["arm"] = run.arm;
    j["n_units"] = run.n_units;
    j["s_splits"] = run.s_splits;
    j["alpha"] = run.alpha;
    j["nominal_coverage"] = 1.0 - run.alpha;
    j["seed"] = run.seed;
    j["true_ate"] = run.true_ate;
    j["zeta_mean"] = detail::num(mean(z));
    j["models"] = models;
    return j;
}

// One row per (split, model): s, zeta, model, ate, ci_lo, ci_hi.
inline std::string splits_csv(const AaRun& run) {
    std::ostringstream out;
    out << "s,zeta,model,ate,ci_lo,ci_hi\n";
    for (std::size_t s = 0; s < run.s_splits; ++s) {
        for (std::size_t m = 0; m < run.model_ids.size(); ++m) {
            const auto& o = run.outcomes[m][s];
            out << s + 1 << ',' << detail::format_number(run.zeta[s]) << ',' << run.model_ids[m] << ',';
            if (o.ok) out << detail::format_number(o.ate) << ',' << detail::format_number(o.ci_lo) << ',' << detail::format_number(o.ci_hi);
            else out << ",,";
            out << '\n';
        }
    }
    return out.str();
}

inline json to_json(const StressResult& r) {
    json summaries = json::array();
    for (const auto& s : r.summaries) {
        summaries.push_back({{"model_id", s.model_id},
                             {"L", s.folds},
                             {"median_err", detail::num(s.median_err)},
                             {"median_vr", detail::opt(s.median_vr)},
                             {"n_ok", s.n_ok},
                             {"n_failed", s.n_failed}});
    }
    json j;
    j["reference_model"] = r.reference_model;
    j["reference_ate"] = detail::num(r.reference_ate);
    j["absolute_errors"] = r.absolute_errors;
    j["summaries"] = summaries;
    return j;
}

// (model, L, quartile_or_N, median_err, median_vr, runtime_ms). The runtime
// column is left empty unless `with_runtime` is set, keeping the default
// output reproducible.
inline std::string stress_csv(const StressResult& r, std::size_t n_units, bool with_runtime) {
    std::ostringstream out;
    out << "model,L,quartile_or_N,median_err,median_vr,runtime_ms\n";
    for (const auto& s : r.summaries) {
        out << s.model_id << ',' << s.folds << ',' << n_units << ',' << detail::csv_num(s.median_err) << ','
            << detail::csv_opt(s.median_vr) << ',' << (with_runtime ? detail::csv_num(s.median_runtime_ms) : "")
            << '\n';
    }
    return out.str();
}

inline std::string timing_csv(const std::vector<TimingRow>& rows) {
    std::ostringstream out;
    out << "model,L,N,runtime_ms,ratio_to_dim\n";
    for (const auto& r : rows)
        out << r.model_id << ',' << r.folds << ',' << r.n_units << ',' << detail::csv_num(r.runtime_ms) << ','
            << detail::csv_opt(r.ratio_to_dim) << '\n';
    return out.str();
}

// ---------------------------------------------------------------------------
// Aggregation over saved reports
// ---------------------------------------------------------------------------

struct AggregateOutput {
    json summary;
    std::map<std::string, std::string> tables;  // file name -> CSV text
};

namespace detail {

inline json quartile_summary(const std::vector<double>& xs) {
    if (xs.empty()) return {{"count", 0}, {"min", nullptr}, {"q25", nullptr}, {"median", nullptr}, {"q75", nullptr}, {"max", nullptr}};
    return {{"count", xs.size()},
            {"min", quantile(xs, 0.0)},
            {"q25", quantile(xs, 0.25)},
            {"median", median(xs)},
            {"q75", quantile(xs, 0.75)},
            {"max", quantile(xs, 1.0)}};
}

inline std::string summary_row(const json& q) {
    auto cell = [](const json& v) { return v.is_null() ? std::string() : detail::format_number(v.get<double>()); };
    return std::to_string(q["count"].get<std::size_t>()) + ',' + cell(q["min"]) + ',' + cell(q["q25"]) + ',' +
           cell(q["median"]) + ',' + cell(q["q75"]) + ',' + cell(q["max"]);
}

// Splits indices 0..n-1, ordered by `sizes` (ties by position), into four
// groups whose sizes differ by at most one.
inline std::vector<std::vector<std::size_t>> size_quartiles(const std::vector<double>& sizes) {
    std::vector<std::size_t> order(sizes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return sizes[a] < sizes[b]; });
    std::vector<std::vector<std::size_t>> groups(4);
    const std::size_t base = sizes.size() / 4, extra = sizes.size() % 4;
    std::size_t pos = 0;
    for (std::size_t g = 0; g < 4; ++g) {
        const std::size_t len = base + (g < extra ? 1 : 0);
        groups[g].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                         order.begin() + static_cast<std::ptrdiff_t>(pos + len));
        pos += len;
    }
    return groups;
}

// Numeric day, with reports that carry no day ("all") sorted last.
inline std::pair<int, std::string> day_key(const json& report) {
    if (report.contains("day") && !report["day"].is_null()) {
        const int d = report["day"].get<int>();
        return {d, std::to_string(d)};
    }
    return {std::numeric_limits<int>::max(), "all"};
}

inline AggregateOutput aggregate_estimates(const std::vector<json>& reports) {
    AggregateOutput out;
    // day -> experiments (indices into reports)
    std::map<std::pair<int, std::string>, std::vector<std::size_t>> by_day;
    for (std::size_t i = 0; i < reports.size(); ++i) by_day[day_key(reports[i])].push_back(i);

    std::ostringstream vr_csv, dur_csv, gain_csv;
    vr_csv << "day,model,group,count,min,q25,median,q75,max\n";
    dur_csv << "day,model,count,min,q25,median,q75,max\n";
    gain_csv << "day,model,extra_days,experiments_gained\n";
    json days = json::object();

    for (const auto& [key, idx] : by_day) {
        const std::string& day = key.second;
        std::vector<std::string> models;
        for (auto i : idx)
            for (const auto& e : reports[i]["estimates"]) {
                const auto id = e["model_id"].get<std::string>();
                if (std::find(models.begin(), models.end(), id) == models.end()) models.push_back(id);
            }
        std::vector<double> sizes;
        for (auto i : idx) sizes.push_back(reports[i]["n_units"].get<double>());
        const auto quartiles = size_quartiles(sizes);

        json jday = json::object();
        for (const auto& model : models) {
            auto vr_of = [&](std::size_t i) -> std::optional<double> {
                for (const auto& e : reports[i]["estimates"])
                    if (e["model_id"] == model && !e["variance_reduction"].is_null())
                        return e["variance_reduction"].get<double>();
                return std::nullopt;
            };
            std::vector<double> all;
            for (auto i : idx)
                if (auto v = vr_of(i)) all.push_back(*v);
            json jm;
            jm["variance_reduction"]["all"] = quartile_summary(all);
            vr_csv << day << ',' << model << ",all," << summary_row(jm["variance_reduction"]["all"]) << '\n';
            for (std::size_t g = 0; g < 4; ++g) {
                std::vector<double> vals;
                for (auto pos : quartiles[g])
                    if (auto v = vr_of(idx[pos])) vals.push_back(*v);
                const std::string name = "q" + std::to_string(g + 1);
                jm["variance_reduction"][name] = quartile_summary(vals);
                vr_csv << day << ',' << model << ',' << name << ',' << summary_row(jm["variance_reduction"][name])
                       << '\n';
            }

            // Duration deltas against DIM, where durations were computed.
            auto dprime = [&](std::size_t i, const std::string& id) -> std::optional<int> {
                if (!reports[i].contains("durations")) return std::nullopt;
                for (const auto& d : reports[i]["durations"])
                    if (d["model_id"] == id && !d["D_prime"].is_null()) return d["D_prime"].get<int>();
                return std::nullopt;
            };
            auto has_durations = [&](std::size_t i) { return reports[i].contains("durations"); };
            if (model != "dim" && std::any_of(idx.begin(), idx.end(), has_durations)) {
                std::vector<double> deltas;
                int max_extra = 0;
                for (auto i : idx) {
                    const auto dm = dprime(i, model), dd = dprime(i, "dim");
                    if (dm && dd) deltas.push_back(static_cast<double>(*dm - *dd));
                    if (has_durations(i) && !reports[i]["durations"].empty()) {
                        const auto& d0 = reports[i]["durations"][0];
                        max_extra = std::max(max_extra, d0["horizon"].get<int>() - d0["D"].get<int>());
                    }
                }
                jm["d_prime_minus_dim"] = quartile_summary(deltas);
                dur_csv << day << ',' << model << ',' << summary_row(jm["d_prime_minus_dim"]) << '\n';
                json gains = json::array();
                for (int b = 0; b <= max_extra; ++b) {
                    std::size_t count = 0;
                    for (auto i : idx) {
                        if (!has_durations(i) || reports[i]["durations"].empty()) continue;
                        const int anchor = reports[i]["durations"][0]["D"].get<int>();
                        const auto dm = dprime(i, model), dd = dprime(i, "dim");
                        const bool model_rejects = dm && *dm <= anchor + b;
                        const bool dim_rejects = dd && *dd <= anchor + b;
                        count += model_rejects && !dim_rejects;
                    }
                    gains.push_back(count);
                    gain_csv << day << ',' << model << ',' << b << ',' << count << '\n';
                }
                jm["experiments_gained_by_extra_days"] = gains;
            }
            jday[model] = jm;
        }
        json groups = json::object();
        for (std::size_t g = 0; g < 4; ++g) {
            json ids = json::array();
            for (auto pos : quartiles[g]) ids.push_back(reports[idx[pos]].value("experiment", json(idx[pos])));
            groups["q" + std::to_string(g + 1)] = ids;
        }
        days[day] = {{"experiments", idx.size()}, {"size_quartiles", groups}, {"models", jday}};
    }
    out.summary["days"] = days;
    out.tables["aggregate_vr.csv"] = vr_csv.str();
    out.tables["aggregate_duration.csv"] = dur_csv.str();
    out.tables["aggregate_duration_gain.csv"] = gain_csv.str();
    return out;
}

inline AggregateOutput aggregate_aa(const std::vector<json>& reports) {
    AggregateOutput out;
    std::ostringstream csv;
    csv << "model,bucket,metric,count,min,q25,median,q75,max\n";
    std::map<std::string, std::map<std::size_t, std::map<std::string, std::vector<double>>>> values;
    for (const auto& r : reports)
        for (const auto& b : r["buckets"]["buckets"])
            for (const auto& m : b["models"])
                for (const char* metric : {"r_mse", "r_median_dist", "r_excess_frac", "coverage", "mse"})
                    if (!m[metric].is_null())
                        values[m["model_id"].get<std::string>()][b["bucket"].get<std::size_t>()][metric].push_back(
                            m[metric].get<double>());
    json models = json::object();
    for (const auto& [model, buckets] : values) {
        json jb = json::array();
        for (const auto& [bucket, metrics] : buckets) {
            json entry;
            entry["bucket"] = bucket;
            for (const auto& [metric, xs] : metrics) {
                entry[metric] = quartile_summary(xs);
                csv << model << ',' << bucket << ',' << metric << ',' << summary_row(entry[metric]) << '\n';
            }
            jb.push_back(entry);
        }
        models[model] = jb;
    }
    out.summary["models"] = models;
    out.tables["aggregate_aa.csv"] = csv.str();
    return out;
}

inline AggregateOutput aggregate_stress(const std::vector<json>& reports) {
    AggregateOutput out;
    std::vector<double> sizes;
    for (const auto& r : reports) sizes.push_back(r["n_units"].get<double>());
    const auto quartiles = size_quartiles(sizes);
    std::ostringstream csv;
    csv << "model,L,quartile_or_N,median_err,median_vr,runtime_ms\n";
    json groups = json::object();
    for (std::size_t g = 0; g < 4; ++g) {
        std::map<std::pair<std::string, std::size_t>, std::pair<std::vector<double>, std::vector<double>>> cells;
        for (auto pos : quartiles[g])
            for (const auto& s : reports[pos]["stress"]["summaries"]) {
                auto& cell = cells[{s["model_id"].get<std::string>(), s["L"].get<std::size_t>()}];
                if (!s["median_err"].is_null()) cell.first.push_back(s["median_err"].get<double>());
                if (!s["median_vr"].is_null()) cell.second.push_back(s["median_vr"].get<double>());
            }
        json jg = json::array();
        for (const auto& [key, cell] : cells) {
            const double me = median(cell.first);
            const double mv = median(cell.second);
            jg.push_back({{"model_id", key.first}, {"L", key.second}, {"median_err", num(me)}, {"median_vr", num(mv)}});
            csv << key.first << ',' << key.second << ",q" << g + 1 << ',' << csv_num(me) << ',' << csv_num(mv) << ",\n";
        }
        groups["q" + std::to_string(g + 1)] = jg;
    }
    out.summary["size_quartiles"] = groups;
    out.tables["aggregate_stress.csv"] = csv.str();
    return out;
}

} // namespace detail

// Summarizes reports of one kind: "estimate"/"batch_item", "aa" or "stress".
inline AggregateOutput aggregate(const std::vector<json>& reports) {
    if (reports.empty()) throw ValidationError("aggregate: no reports");
    auto family = [](const std::string& kind) { return kind == "batch_item" ? std::string("estimate") : kind; };
    const std::string kind = family(reports.front().value("kind", ""));
    for (const auto& r : reports)
        if (family(r.value("kind", "")) != kind)
            throw ValidationError("aggregate: mixed report kinds ('" + kind + "' and '" + r.value("kind", "") + "')");
    AggregateOutput out;
    if (kind == "estimate") out = detail::aggregate_estimates(reports);
    else if (kind == "aa") out = detail::aggregate_aa(reports);
    else if (kind == "stress") out = detail::aggregate_stress(reports);
    else throw ValidationError("aggregate: unsupported report kind '" + kind + "'");
    json merged = {{"kind", "aggregate"}, {"source_kind", kind}, {"reports", reports.size()}, {"version", version}};
    for (auto& [k, v] : out.summary.items()) merged[k] = v;
    out.summary = merged;
    return out;
}

} // namespace covadj
