// covadj: command-line front end for covariate-adjusted A/B test analysis.

#include <covadj/aa_harness.hpp>
#include <covadj/dataset.hpp>
#include <covadj/estimator.hpp>
#include <covadj/power.hpp>
#include <covadj/report.hpp>
#include <covadj/stress.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using covadj::json;

namespace {

struct RunConfig {
    std::string command;
    std::string input;
    std::string schema;
    std::vector<std::string> models{"dim", "ols"};
    std::uint64_t seed = 0;
    double alpha = 0.05;
    std::string out = "covadj-out";
    int day = 0;  // 0: no day filter
    unsigned threads = 0;

    int arm = 0;
    std::size_t s_splits = 1000;
    std::size_t kappa = 20;

    std::vector<std::size_t> folds{1};
    std::size_t draws = 100;
    std::string reference = "ols";
    bool timing = false;
    std::vector<std::size_t> sizes;

    double delta = 0.0;
    double power_target = 0.8;
    int horizon = 0;  // 0: ten times the analysis day

    covadj::SyntheticConfig synthetic;

    std::size_t experiments = 10;
    std::vector<int> days;

    std::vector<std::string> reports;
};

json echo(const RunConfig& c) {
    json j;
    j["command"] = c.command;
    j["input"] = c.input.empty() ? json(nullptr) : json(c.input);
    j["schema"] = c.schema;
    j["models"] = c.models;
    j["seed"] = c.seed;
    j["alpha"] = c.alpha;
    j["day"] = c.day > 0 ? json(c.day) : json(nullptr);
    if (c.command == "aa") {
        j["arm"] = c.arm;
        j["s_splits"] = c.s_splits;
        j["kappa"] = c.kappa;
    }
    if (c.command == "stress") {
        j["folds"] = c.folds;
        j["draws"] = c.draws;
        j["reference"] = c.reference;
        j["timing"] = c.timing;
        j["sizes"] = c.sizes;
    }
    if (c.command == "power" || c.command == "batch") {
        j["delta"] = c.delta;
        j["power_target"] = c.power_target;
        j["horizon"] = c.horizon;
    }
    if (c.input.empty() || c.command == "simulate" || c.command == "batch") {
        const auto& s = c.synthetic;
        j["synthetic"] = {{"n_units", s.n_units},         {"assignment_prob", s.assignment_prob},
                          {"k_covariates", s.k_covariates}, {"outcome_cor", s.outcome_cor},
                          {"true_ate", s.true_ate},       {"baseline", s.baseline},
                          {"noise_sd", s.noise_sd},
                          {"covariate_cor", s.covariate_cor}, {"daily_arrivals", s.daily_arrivals}};
    }
    if (c.command == "batch") {
        j["experiments"] = c.experiments;
        j["days"] = c.days;
    }
    if (c.command == "aggregate") j["reports"] = c.reports;
    return j;
}

// Seed streams derived from the master seed.
enum Stream : std::uint64_t { DataStream = 0, EstimateStream = 1, AaStream = 2, StressStream = 3, BatchStream = 4 };

std::uint64_t stream_seed(const RunConfig& c, Stream s) { return covadj::derive_seed(c.seed, s); }

void write_atomic(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw covadj::Error("cannot write " + tmp.string());
        out << text;
        if (!out.flush()) throw covadj::Error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) { write_atomic(path, j.dump(2) + "\n"); }

class Stopwatch {
public:
    double lap_ms() {
        const auto now = std::chrono::steady_clock::now();
        const double ms = std::chrono::duration<double, std::milli>(now - last_).count();
        last_ = now;
        return ms;
    }

private:
    std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

struct Manifest {
    json timings = json::object();
    std::vector<std::string> outputs;
};

std::vector<covadj::ModelSpec> parse_models(const std::vector<std::string>& names) {
    if (names.empty()) throw covadj::ValidationError("no models given");
    std::vector<covadj::ModelSpec> out;
    for (const auto& n : names) {
        auto spec = covadj::parse_model_spec(n);
        spec.validate();
        out.push_back(std::move(spec));
    }
    return out;
}

// Checks everything that can be checked without touching data.
void validate_config(const RunConfig& c) {
    using covadj::ValidationError;
    if (!c.input.empty() && !fs::exists(c.input)) throw ValidationError("input file not found: " + c.input);
    if (!c.schema.empty()) (void)covadj::parse_schema(c.schema);
    if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw ValidationError("--alpha must lie in (0, 1)");
    if (c.day < 0) throw ValidationError("--day must be at least 1");
    if (c.command != "simulate" && c.command != "aggregate") (void)parse_models(c.models);
    if (c.input.empty() || c.command == "simulate" || c.command == "batch") c.synthetic.validate();
    if (c.command == "aa") {
        if (c.arm != 0 && c.arm != 1) throw ValidationError("--arm must be 0 or 1");
        if (c.s_splits < 1) throw ValidationError("--s-splits must be at least 1");
        if (c.kappa < 1 || c.kappa > c.s_splits) throw ValidationError("--kappa must lie in [1, S]");
    }
    if (c.command == "stress") {
        if (c.folds.empty()) throw ValidationError("--folds needs at least one value");
        for (auto l : c.folds)
            if (l < 1) throw ValidationError("--folds values must be at least 1");
        if (c.draws < 1) throw ValidationError("--draws must be at least 1");
        covadj::parse_model_spec(c.reference).validate();
    }
    if (c.command == "power" || (c.command == "batch" && c.delta != 0.0)) {
        if (c.command == "power" && c.day < 1) throw ValidationError("power needs --day (the analysis day D)");
        if (c.delta == 0.0 || !std::isfinite(c.delta)) throw ValidationError("--delta must be a non-zero lift");
        if (!(c.power_target > 0.0 && c.power_target < 1.0))
            throw ValidationError("--power-target must lie in (0, 1)");
        if (c.horizon != 0 && c.command == "power" && c.horizon < c.day)
            throw ValidationError("--horizon must not precede --day");
    }
    if (c.command == "batch") {
        if (c.experiments < 1) throw ValidationError("--experiments must be at least 1");
        for (auto d : c.days)
            if (d < 1) throw ValidationError("--days values must be at least 1");
        if (c.horizon != 0)
            for (auto d : c.days)
                if (c.horizon < d) throw ValidationError("--horizon must not precede any of --days");
    }
    if (c.command == "aggregate") {
        if (c.reports.empty()) throw ValidationError("aggregate needs --reports");
        for (const auto& r : c.reports)
            if (!fs::exists(r)) throw ValidationError("report not found: " + r);
    }
}

covadj::ExperimentData load_data(const RunConfig& c) {
    covadj::ExperimentData data;
    if (c.input.empty()) {
        auto cfg = c.synthetic;
        cfg.seed = stream_seed(c, DataStream);
        data = covadj::generate(cfg);
    } else {
        data = covadj::load_csv(c.input, c.schema.empty() ? covadj::Schema{} : covadj::parse_schema(c.schema));
    }
    if (c.day > 0) data = covadj::truncate_to_day(data, c.day);
    return data;
}

json report_header(const RunConfig& c, const std::string& kind) {
    json j;
    j["kind"] = kind;
    j["version"] = covadj::version;
    j["seed"] = c.seed;
    j["config"] = echo(c);
    return j;
}

struct EstimateBlock {
    json estimates = json::array();
    json failures = json::array();
    std::vector<covadj::AteEstimate> ok;
};

// Estimates every model on `data`, with DIM first when it is not listed; a
// failing model is reported, not fatal.
EstimateBlock estimate_models(const covadj::ExperimentData& data, std::vector<covadj::ModelSpec> models,
                              double alpha, std::uint64_t seed, json* timings) {
    EstimateBlock block;
    const auto dim = covadj::estimate(data, covadj::ModelSpec::dim(), alpha, 0);
    const bool has_dim = std::any_of(models.begin(), models.end(), [](const covadj::ModelSpec& m) {
        return covadj::to_string(m) == "dim";
    });
    if (!has_dim) models.insert(models.begin(), covadj::ModelSpec::dim());
    for (std::size_t m = 0; m < models.size(); ++m) {
        const std::string id = covadj::to_string(models[m]);
        Stopwatch sw;
        try {
            auto est = covadj::estimate(data, models[m], alpha, covadj::derive_seed(seed, m + 1));
            auto j = covadj::to_json(est);
            j["variance_reduction"] = covadj::detail::opt(covadj::variance_reduction(est, dim));
            block.estimates.push_back(std::move(j));
            block.ok.push_back(std::move(est));
        } catch (const covadj::Error& e) {
            block.failures.push_back({{"model_id", id}, {"kind", e.kind()}, {"message", e.what()}});
        } catch (const std::exception& e) {
            block.failures.push_back({{"model_id", id}, {"kind", "error"}, {"message", e.what()}});
        }
        if (timings) (*timings)[id] = sw.lap_ms();
    }
    return block;
}

std::string estimates_csv(const json& estimates) {
    std::string out = "model,ate,variance,ci_lo,ci_hi,variance_reduction\n";
    auto cell = [](const json& v) { return v.is_null() ? std::string() : covadj::detail::format_number(v.get<double>()); };
    for (const auto& e : estimates)
        out += e["model_id"].get<std::string>() + ',' + cell(e["ate"]) + ',' + cell(e["variance"]) + ',' +
               cell(e["ci"][0]) + ',' + cell(e["ci"][1]) + ',' + cell(e["variance_reduction"]) + '\n';
    return out;
}

json durations_for(const std::vector<covadj::AteEstimate>& ests, const covadj::ExperimentData& data, int day,
                   const RunConfig& c) {
    std::size_t n0 = data.arm_size(0), n1 = data.arm_size(1);
    const int horizon = c.horizon > 0 ? c.horizon : covadj::default_horizon(day);
    const auto forecast = covadj::forecast_from_counts(n0, n1, day, horizon);
    json out = json::array();
    for (const auto& e : ests)
        out.push_back(covadj::to_json(covadj::recommend_duration(e, forecast, c.delta, c.alpha, c.power_target)));
    return out;
}

int run_simulate(const RunConfig& c, const fs::path& dir, Manifest& man) {
    Stopwatch sw;
    auto cfg = c.synthetic;
    cfg.seed = stream_seed(c, DataStream);
    const auto data = covadj::generate(cfg);
    std::ostringstream csv;
    covadj::write_csv(csv, data);
    write_atomic(dir / "data.csv", csv.str());
    auto report = report_header(c, "simulate");
    report["n_units"] = data.size();
    report["n_per_arm"] = {data.arm_size(0), data.arm_size(1)};
    report["schema"] = covadj::format_schema(covadj::canonical_schema(data));
    report["max_day"] = data.day_index ? json(*std::max_element(data.day_index->begin(), data.day_index->end()))
                                       : json(nullptr);
    write_json(dir / "report.json", report);
    man.timings["generate_ms"] = sw.lap_ms();
    man.outputs = {"data.csv", "report.json"};
    return 0;
}

int run_estimate(const RunConfig& c, const fs::path& dir, Manifest& man) {
    Stopwatch sw;
    const auto models = parse_models(c.models);
    const auto data = load_data(c);
    man.timings["load_ms"] = sw.lap_ms();
    json per_model = json::object();
    auto block = estimate_models(data, models, c.alpha, stream_seed(c, EstimateStream), &per_model);
    man.timings["models_ms"] = per_model;
    auto report = report_header(c, "estimate");
    report["n_units"] = data.size();
    report["day"] = c.day > 0 ? json(c.day) : json(nullptr);
    report["estimates"] = block.estimates;
    report["failures"] = block.failures;
    write_json(dir / "report.json", report);
    write_atomic(dir / "estimates.csv", estimates_csv(block.estimates));
    man.outputs = {"report.json", "estimates.csv"};
    return 0;
}

int run_power(const RunConfig& c, const fs::path& dir, Manifest& man) {
    Stopwatch sw;
    const auto models = parse_models(c.models);
    const auto data = load_data(c);
    if (!data.day_index)
        throw covadj::ValidationError("power needs a day column; pass day=<column> in --schema or --daily-arrivals");
    man.timings["load_ms"] = sw.lap_ms();
    auto block = estimate_models(data, models, c.alpha, stream_seed(c, EstimateStream), nullptr);
    auto report = report_header(c, "power");
    report["n_units"] = data.size();
    report["day"] = c.day;
    report["estimates"] = block.estimates;
    report["failures"] = block.failures;
    report["durations"] = durations_for(block.ok, data, c.day, c);
    man.timings["compute_ms"] = sw.lap_ms();
    write_json(dir / "report.json", report);
    man.outputs = {"report.json"};
    return 0;
}

int run_aa_cmd(const RunConfig& c, const fs::path& dir, Manifest& man) {
    Stopwatch sw;
    const auto models = parse_models(c.models);
    const auto data = load_data(c);
    man.timings["load_ms"] = sw.lap_ms();
    auto run = covadj::run_aa(data, c.arm, models, c.s_splits, c.alpha, stream_seed(c, AaStream), c.threads);
    run.kappa = c.kappa;
    const auto bm = covadj::bucket_metrics(run, c.kappa);
    man.timings["splits_ms"] = sw.lap_ms();
    auto report = report_header(c, "aa");
    report["n_units"] = data.size();
    report["aa"] = covadj::to_json(run);
    report["buckets"] = covadj::to_json(bm, run);
    write_json(dir / "report.json", report);
    write_atomic(dir / "splits.csv", covadj::splits_csv(run));
    man.outputs = {"report.json", "splits.csv"};
    return 0;
}

int run_stress(const RunConfig& c, const fs::path& dir, Manifest& man) {
    Stopwatch sw;
    covadj::StressConfig cfg;
    cfg.models = parse_models(c.models);
    cfg.folds = c.folds;
    cfg.mc_draws = c.draws;
    cfg.seed = stream_seed(c, StressStream);
    cfg.reference_model = covadj::parse_model_spec(c.reference);
    cfg.alpha = c.alpha;
    const auto data = load_data(c);
    man.timings["load_ms"] = sw.lap_ms();
    const auto result = covadj::error_distribution(data, cfg);
    man.timings["draws_ms"] = sw.lap_ms();
    auto report = report_header(c, "stress");
    report["n_units"] = data.size();
    report["stress"] = covadj::to_json(result);
    write_json(dir / "report.json", report);
    write_atomic(dir / "stress.csv", covadj::stress_csv(result, data.size(), c.timing));
    man.outputs = {"report.json", "stress.csv"};
    if (!c.sizes.empty()) {
        std::vector<std::size_t> folds{0};
        folds.insert(folds.end(), c.folds.begin(), c.folds.end());
        const auto rows = covadj::timing_profile(c.sizes, folds, cfg.models, cfg.seed, c.synthetic.k_covariates);
        write_atomic(dir / "timing.csv", covadj::timing_csv(rows));
        man.outputs.push_back("timing.csv");
        man.timings["timing_profile_ms"] = sw.lap_ms();
    }
    return 0;
}

void write_aggregate(const std::vector<json>& reports, const fs::path& dir, Manifest& man) {
    const auto agg = covadj::aggregate(reports);
    write_json(dir / "aggregate.json", agg.summary);
    man.outputs.push_back("aggregate.json");
    for (const auto& [name, text] : agg.tables) {
        write_atomic(dir / name, text);
        man.outputs.push_back(name);
    }
}

int run_batch(const RunConfig& c, const fs::path& dir, Manifest& man) {
    Stopwatch sw;
    const auto models = parse_models(c.models);
    std::vector<std::optional<int>> days;
    for (int d : c.days) days.emplace_back(d);
    if (days.empty()) days.emplace_back(std::nullopt);
    const int max_day = c.days.empty() ? 0 : *std::max_element(c.days.begin(), c.days.end());

    // Experiment sizes vary by a seeded factor in [0.5, 2) so that size
    // quartiles are meaningful.
    covadj::Rng size_rng(stream_seed(c, BatchStream));
    std::vector<json> reports;
    for (std::size_t w = 0; w < c.experiments; ++w) {
        const double factor = 0.5 + 1.5 * size_rng.uniform();
        auto cfg = c.synthetic;
        cfg.n_units = std::max<std::size_t>(8, static_cast<std::size_t>(std::llround(cfg.n_units * factor)));
        cfg.seed = covadj::derive_seed(stream_seed(c, DataStream), w);
        if (cfg.daily_arrivals > 0.0) cfg.daily_arrivals *= factor;
        else if (max_day > 0) cfg.daily_arrivals = static_cast<double>(cfg.n_units) / max_day;
        const auto full = covadj::generate(cfg);
        for (const auto& day : days) {
            const auto data = day ? covadj::truncate_to_day(full, *day) : full;
            auto block = estimate_models(data, models, c.alpha,
                                         covadj::derive_seed(stream_seed(c, EstimateStream), w), nullptr);
            auto report = report_header(c, "batch_item");
            report["experiment"] = w;
            report["day"] = day ? json(*day) : json(nullptr);
            report["n_units"] = data.size();
            report["estimates"] = block.estimates;
            report["failures"] = block.failures;
            if (day && c.delta != 0.0) report["durations"] = durations_for(block.ok, data, *day, c);
            const std::string name = "experiment_" + std::to_string(w) + "_day_" +
                                     (day ? std::to_string(*day) : std::string("all")) + ".json";
            write_json(dir / "reports" / name, report);
            man.outputs.push_back("reports/" + name);
            reports.push_back(std::move(report));
        }
    }
    man.timings["experiments_ms"] = sw.lap_ms();
    write_aggregate(reports, dir, man);
    man.timings["aggregate_ms"] = sw.lap_ms();
    return 0;
}

int run_aggregate(const RunConfig& c, const fs::path& dir, Manifest& man) {
    std::vector<json> reports;
    for (const auto& path : c.reports) {
        std::ifstream in(path);
        try {
            reports.push_back(json::parse(in));
        } catch (const json::parse_error& e) {
            throw covadj::ValidationError("report " + path + " is not valid JSON: " + e.what());
        }
    }
    write_aggregate(reports, dir, man);
    return 0;
}

void print_error(const std::string& kind, const std::string& message, std::optional<long> row = std::nullopt) {
    json err = {{"kind", kind}, {"message", message}};
    if (row) err["row"] = *row;
    std::cerr << json{{"error", err}}.dump() << '\n';
}

void add_synthetic_flags(CLI::App* app, covadj::SyntheticConfig& s) {
    app->add_option("--n-units", s.n_units, "Synthetic: number of units")->capture_default_str();
    app->add_option("--assignment-prob", s.assignment_prob, "Synthetic: treatment probability")
        ->capture_default_str();
    app->add_option("--k-covariates", s.k_covariates, "Synthetic: number of covariates")->capture_default_str();
    app->add_option("--outcome-cor", s.outcome_cor, "Synthetic: corr(x, Y)")->capture_default_str();
    app->add_option("--true-ate", s.true_ate, "Synthetic: true treatment effect")->capture_default_str();
    app->add_option("--baseline", s.baseline, "Synthetic: outcome level")->capture_default_str();
    app->add_option("--noise-sd", s.noise_sd, "Synthetic: noise scale")->capture_default_str();
    app->add_option("--covariate-cor", s.covariate_cor, "Synthetic: corr of extra covariates with x")
        ->capture_default_str();
    app->add_option("--daily-arrivals", s.daily_arrivals, "Synthetic: Poisson arrivals per day (0: no day column)")
        ->capture_default_str();
}

void add_common_flags(CLI::App* app, RunConfig& c, bool with_models) {
    app->add_option("--input", c.input, "Experiment CSV (synthetic data when omitted)");
    app->add_option("--schema", c.schema, "Column roles, e.g. assignment=arm;outcome=y;covariates=x,z;pre=x;day=d");
    if (with_models)
        app->add_option("--models", c.models, "Comma-separated model specs")->delimiter(',')->capture_default_str();
    app->add_option("--alpha", c.alpha, "Significance level")->capture_default_str();
    app->add_option("--day", c.day, "Keep units that arrived on or before this day");
}

} // namespace

int main(int argc, char** argv) {
    RunConfig c;
    if (const char* env = std::getenv("COVADJ_OUT"); env && *env) c.out = env;

    CLI::App app{"Covariate-adjusted average treatment effect estimation for A/B tests"};
    app.set_config("--config", "", "INI config file; [section] per command, keys mirror the long flags");
    app.add_option("--seed", c.seed, "Master seed")->capture_default_str();
    app.add_option("--out", c.out, "Output directory (default from COVADJ_OUT)")->capture_default_str();
    app.add_option("--threads", c.threads, "Worker threads for A/A splits (0: hardware)");
    app.require_subcommand(1);

    auto* simulate = app.add_subcommand("simulate", "Generate a synthetic experiment CSV");
    add_synthetic_flags(simulate, c.synthetic);

    auto* est = app.add_subcommand("estimate", "Estimate the ATE with each model");
    add_common_flags(est, c, true);
    add_synthetic_flags(est, c.synthetic);

    auto* aa = app.add_subcommand("aa", "A/A re-randomization audit on one arm");
    add_common_flags(aa, c, true);
    add_synthetic_flags(aa, c.synthetic);
    aa->add_option("--arm", c.arm, "Arm to re-randomize")->capture_default_str();
    aa->add_option("--s-splits", c.s_splits, "Number of re-randomizations S")->capture_default_str();
    aa->add_option("--kappa", c.kappa, "Number of imbalance buckets")->capture_default_str();

    auto* stress = app.add_subcommand("stress", "Spurious-covariate stress test");
    add_common_flags(stress, c, true);
    add_synthetic_flags(stress, c.synthetic);
    stress->add_option("--folds", c.folds, "Spurious fold counts L")->delimiter(',')->capture_default_str();
    stress->add_option("--draws", c.draws, "Monte Carlo draws per L")->capture_default_str();
    stress->add_option("--reference", c.reference, "Reference model")->capture_default_str();
    stress->add_flag("--timing", c.timing, "Fill the runtime column of stress.csv");
    stress->add_option("--sizes", c.sizes, "Also write timing.csv for these synthetic sizes")->delimiter(',');

    auto* power = app.add_subcommand("power", "Recommend an experiment duration");
    add_common_flags(power, c, true);
    add_synthetic_flags(power, c.synthetic);
    power->add_option("--delta", c.delta, "Hypothesized lift (e.g. 0.01 for 1%)")->required();
    power->add_option("--power-target", c.power_target, "Target power")->capture_default_str();
    power->add_option("--horizon", c.horizon, "Last day searched (default 10 x day)");

    auto* batch = app.add_subcommand("batch", "Many synthetic experiments plus an aggregate");
    batch->add_option("--models", c.models, "Comma-separated model specs")->delimiter(',')->capture_default_str();
    batch->add_option("--alpha", c.alpha, "Significance level")->capture_default_str();
    add_synthetic_flags(batch, c.synthetic);
    batch->add_option("--experiments", c.experiments, "Number of experiments W")->capture_default_str();
    batch->add_option("--days", c.days, "Analysis days")->delimiter(',');
    batch->add_option("--delta", c.delta, "Hypothesized lift for duration recommendations");
    batch->add_option("--power-target", c.power_target, "Target power")->capture_default_str();
    batch->add_option("--horizon", c.horizon, "Last day searched (default 10 x day)");

    auto* agg = app.add_subcommand("aggregate", "Summarize saved reports of one kind");
    agg->add_option("--reports", c.reports, "Report JSON files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage_error", e.what());
        return 2;
    }

    for (auto* sub : app.get_subcommands()) c.command = sub->get_name();

    Stopwatch total;
    Manifest man;
    const fs::path dir = c.out;
    try {
        validate_config(c);
        int status = 0;
        if (c.command == "simulate") status = run_simulate(c, dir, man);
        else if (c.command == "estimate") status = run_estimate(c, dir, man);
        else if (c.command == "aa") status = run_aa_cmd(c, dir, man);
        else if (c.command == "stress") status = run_stress(c, dir, man);
        else if (c.command == "power") status = run_power(c, dir, man);
        else if (c.command == "batch") status = run_batch(c, dir, man);
        else if (c.command == "aggregate") status = run_aggregate(c, dir, man);
        man.timings["total_ms"] = total.lap_ms();
        json manifest;
        manifest["command"] = c.command;
        manifest["version"] = covadj::version;
        manifest["seed"] = c.seed;
        manifest["config"] = echo(c);
        manifest["timings_ms"] = man.timings;
        manifest["outputs"] = man.outputs;
        write_json(dir / "manifest.json", manifest);
        return status;
    } catch (const covadj::ParseError& e) {
        print_error(e.kind(), e.what(), e.row());
        return 2;
    } catch (const covadj::ConvergenceError& e) {
        print_error(e.kind(), e.what());
        return 3;
    } catch (const covadj::Error& e) {
        print_error(e.kind(), e.what());
        return 2;
    } catch (const std::exception& e) {
        print_error("internal_error", e.what());
        return 1;
    }
}
