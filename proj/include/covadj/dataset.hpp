#pragma once

// Unit-level experiment table, CSV ingestion and the synthetic generator.

#include <covadj/error.hpp>
#include <covadj/random.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace covadj {

struct ExperimentData {
    std::vector<std::string> unit_ids;
    std::vector<int> assignment;   // 0 = control, 1 = treatment
    Eigen::VectorXd outcome;
    Eigen::MatrixXd covariates;    // N x K, row n is z_n
    std::vector<std::string> covariate_names;
    std::size_t pre_period_col = 0;
    std::optional<std::vector<int>> day_index;  // 1-based trigger day

    std::size_t size() const noexcept { return assignment.size(); }
    std::size_t n_covariates() const noexcept { return static_cast<std::size_t>(covariates.cols()); }

    std::size_t arm_size(int arm) const noexcept {
        std::size_t n = 0;
        for (int j : assignment) n += (j == arm);
        return n;
    }

    auto pre_period() const { return covariates.col(static_cast<Eigen::Index>(pre_period_col)); }
};

// Throws ValidationError when `data` breaks an ExperimentData invariant.
inline void validate(const ExperimentData& data) {
    const std::size_t n = data.assignment.size();
    if (n < 2) throw ValidationError("experiment needs at least 2 units, got " + std::to_string(n));
    if (static_cast<std::size_t>(data.outcome.size()) != n ||
        static_cast<std::size_t>(data.covariates.rows()) != n || data.unit_ids.size() != n)
        throw ValidationError("column lengths disagree with the number of units");
    if (data.covariates.cols() < 1) throw ValidationError("at least one covariate column is required");
    if (data.covariate_names.size() != data.n_covariates())
        throw ValidationError("covariate_names must name every covariate column");
    if (data.pre_period_col >= data.n_covariates())
        throw ValidationError("pre_period_col " + std::to_string(data.pre_period_col) +
                              " out of range for K = " + std::to_string(data.n_covariates()));
    for (std::size_t i = 0; i < n; ++i) {
        const int j = data.assignment[i];
        if (j != 0 && j != 1)
            throw ValidationError("unit " + std::to_string(i + 1) + ": assignment must be 0 or 1, got " +
                                  std::to_string(j));
        if (!std::isfinite(data.outcome[static_cast<Eigen::Index>(i)]))
            throw ValidationError("unit " + std::to_string(i + 1) + ": non-finite outcome");
    }
    if (!data.covariates.allFinite()) throw ValidationError("covariates contain non-finite values");
    for (int arm : {0, 1})
        if (data.arm_size(arm) == 0) throw ValidationError("arm " + std::to_string(arm) + " is empty");
    if (data.day_index) {
        if (data.day_index->size() != n) throw ValidationError("day_index length disagrees with N");
        for (std::size_t i = 0; i < n; ++i)
            if ((*data.day_index)[i] < 1)
                throw ValidationError("unit " + std::to_string(i + 1) + ": day_index must be positive");
    }
}

// Rows `rows` of `data`, in that order. Does not validate.
inline ExperimentData subset(const ExperimentData& data, const std::vector<std::size_t>& rows) {
    ExperimentData out;
    const auto m = static_cast<Eigen::Index>(rows.size());
    out.unit_ids.reserve(rows.size());
    out.assignment.reserve(rows.size());
    out.outcome.resize(m);
    out.covariates.resize(m, data.covariates.cols());
    if (data.day_index) out.day_index.emplace().reserve(rows.size());
    for (Eigen::Index i = 0; i < m; ++i) {
        const auto r = rows[static_cast<std::size_t>(i)];
        out.unit_ids.push_back(data.unit_ids[r]);
        out.assignment.push_back(data.assignment[r]);
        out.outcome[i] = data.outcome[static_cast<Eigen::Index>(r)];
        out.covariates.row(i) = data.covariates.row(static_cast<Eigen::Index>(r));
        if (data.day_index) out.day_index->push_back((*data.day_index)[r]);
    }
    out.covariate_names = data.covariate_names;
    out.pre_period_col = data.pre_period_col;
    return out;
}

// Units of one arm. The assignment column is kept (all equal to `arm`).
inline ExperimentData restrict_to_arm(const ExperimentData& data, int arm) {
    if (arm != 0 && arm != 1) throw ValidationError("unknown arm " + std::to_string(arm));
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (data.assignment[i] == arm) rows.push_back(i);
    if (rows.empty()) throw ValidationError("arm " + std::to_string(arm) + " is empty");
    return subset(data, rows);
}

// Units that triggered on or before `day`.
inline ExperimentData truncate_to_day(const ExperimentData& data, int day) {
    if (!data.day_index) throw ValidationError("day filter requested but the data has no day column");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < data.size(); ++i)
        if ((*data.day_index)[i] <= day) rows.push_back(i);
    auto out = subset(data, rows);
    validate(out);
    return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

// Column roles. An empty covariate list means "every column without another
// role"; an empty pre_period means the first covariate.
struct Schema {
    std::string assignment = "assignment";
    std::string outcome = "outcome";
    std::vector<std::string> covariates;
    std::string pre_period;
    std::optional<std::string> day;
    std::optional<std::string> id;
};

// Parses "assignment=arm;outcome=y;covariates=x,z1;pre=x;day=day;id=uid".
inline Schema parse_schema(std::string_view text) {
    Schema schema;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto end = text.find(';', pos);
        if (end == std::string_view::npos) end = text.size();
        const auto item = text.substr(pos, end - pos);
        pos = end + 1;
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string_view::npos) throw SchemaError("schema entry without '=': " + std::string(item));
        const std::string key(item.substr(0, eq));
        const std::string value(item.substr(eq + 1));
        if (key == "assignment") schema.assignment = value;
        else if (key == "outcome") schema.outcome = value;
        else if (key == "pre" || key == "pre_period") schema.pre_period = value;
        else if (key == "day") schema.day = value;
        else if (key == "id") schema.id = value;
        else if (key == "covariates") {
            std::stringstream ss(value);
            for (std::string name; std::getline(ss, name, ',');)
                if (!name.empty()) schema.covariates.push_back(name);
        } else
            throw SchemaError("unknown schema role '" + key + "'");
    }
    return schema;
}

inline std::string format_schema(const Schema& schema) {
    std::string out = "assignment=" + schema.assignment + ";outcome=" + schema.outcome + ";covariates=";
    for (std::size_t i = 0; i < schema.covariates.size(); ++i)
        out += (i ? "," : "") + schema.covariates[i];
    out += ";pre=" + schema.pre_period;
    if (schema.day) out += ";day=" + *schema.day;
    if (schema.id) out += ";id=" + *schema.id;
    return out;
}

// The schema under which write_csv output reads back as `data`.
inline Schema canonical_schema(const ExperimentData& data) {
    Schema schema;
    schema.covariates = data.covariate_names;
    schema.pre_period = data.covariate_names.at(data.pre_period_col);
    if (data.day_index) schema.day = "day";
    schema.id = "unit_id";
    return schema;
}

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t pos = 0;
    while (true) {
        const auto end = line.find(',', pos);
        if (end == std::string_view::npos) {
            fields.push_back(line.substr(pos));
            break;
        }
        fields.push_back(line.substr(pos, end - pos));
        pos = end + 1;
    }
    for (auto& f : fields) {
        while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
        while (!f.empty() && (f.back() == ' ' || f.back() == '\t')) f.remove_suffix(1);
    }
    return fields;
}

inline double parse_number(std::string_view field, long row, const std::string& column) {
    double value = 0.0;
    const char* first = field.data();
    const char* last = field.data() + field.size();
    if (!field.empty() && *first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (field.empty() || ec != std::errc() || ptr != last)
        throw ParseError("row " + std::to_string(row) + ", column '" + column + "': cannot parse '" +
                             std::string(field) + "' as a number",
                         row);
    if (!std::isfinite(value))
        throw ValidationError("row " + std::to_string(row) + ", column '" + column + "': non-finite value");
    return value;
}

inline std::string format_number(double x) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, ptr);
}

} // namespace detail

inline ExperimentData read_csv(std::istream& in, const Schema& schema) {
    std::string header_line;
    if (!std::getline(in, header_line)) throw SchemaError("CSV input is empty");
    if (!header_line.empty() && header_line.back() == '\r') header_line.pop_back();
    if (header_line.rfind("\xEF\xBB\xBF", 0) == 0) header_line.erase(0, 3);

    std::map<std::string, std::size_t> index;
    std::vector<std::string> header;
    for (auto f : detail::split_csv_line(header_line)) {
        header.emplace_back(f);
        if (!index.emplace(std::string(f), header.size() - 1).second)
            throw SchemaError("duplicate column '" + std::string(f) + "'");
    }
    auto locate = [&](const std::string& name, const char* role) {
        const auto it = index.find(name);
        if (it == index.end())
            throw SchemaError(std::string("missing ") + role + " column '" + name + "'");
        return it->second;
    };

    const std::size_t assign_col = locate(schema.assignment, "assignment");
    const std::size_t outcome_col = locate(schema.outcome, "outcome");
    constexpr std::size_t none = static_cast<std::size_t>(-1);
    // Without an explicit mapping, columns named "day" and "unit_id" take
    // those roles unless listed as covariates.
    auto implicit = [&](const std::optional<std::string>& name, const char* fallback) -> std::optional<std::string> {
        if (name) return name;
        if (index.count(fallback) &&
            std::find(schema.covariates.begin(), schema.covariates.end(), fallback) == schema.covariates.end())
            return std::string(fallback);
        return std::nullopt;
    };
    const auto day_name = implicit(schema.day, "day");
    const auto id_name = implicit(schema.id, "unit_id");
    const std::size_t day_col = day_name ? locate(*day_name, "day") : none;
    const std::size_t id_col = id_name ? locate(*id_name, "id") : none;

    std::vector<std::string> cov_names = schema.covariates;
    if (cov_names.empty()) {
        for (std::size_t c = 0; c < header.size(); ++c)
            if (c != assign_col && c != outcome_col && c != day_col && c != id_col)
                cov_names.push_back(header[c]);
    }
    if (cov_names.empty()) throw SchemaError("schema maps no covariate columns");
    std::vector<std::size_t> cov_cols;
    for (const auto& name : cov_names) cov_cols.push_back(locate(name, "covariate"));

    const std::string pre_name = schema.pre_period.empty() ? cov_names.front() : schema.pre_period;
    std::size_t pre_col = cov_names.size();
    for (std::size_t k = 0; k < cov_names.size(); ++k)
        if (cov_names[k] == pre_name) pre_col = k;
    if (pre_col == cov_names.size())
        throw SchemaError("pre-period column '" + pre_name + "' is not one of the covariates");

    std::vector<std::string> ids;
    std::vector<int> assignment;
    std::vector<double> outcome;
    std::vector<double> cov_values;
    std::vector<int> days;

    std::string line;
    long row = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        ++row;
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size())
            throw ParseError("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                                 " fields, found " + std::to_string(fields.size()),
                             row);

        const double j = detail::parse_number(fields[assign_col], row, schema.assignment);
        if (j != 0.0 && j != 1.0)
            throw ValidationError("row " + std::to_string(row) + ": assignment must be 0 or 1, got '" +
                                  std::string(fields[assign_col]) + "'");
        assignment.push_back(static_cast<int>(j));
        outcome.push_back(detail::parse_number(fields[outcome_col], row, schema.outcome));
        for (std::size_t k = 0; k < cov_cols.size(); ++k)
            cov_values.push_back(detail::parse_number(fields[cov_cols[k]], row, cov_names[k]));
        if (day_col != none) {
            const double d = detail::parse_number(fields[day_col], row, *day_name);
            if (d != std::floor(d) || d < 1)
                throw ValidationError("row " + std::to_string(row) + ": day must be a positive integer");
            days.push_back(static_cast<int>(d));
        }
        ids.push_back(id_col != none ? std::string(fields[id_col]) : std::to_string(row));
    }

    ExperimentData data;
    const auto n = static_cast<Eigen::Index>(assignment.size());
    const auto k = static_cast<Eigen::Index>(cov_cols.size());
    data.unit_ids = std::move(ids);
    data.assignment = std::move(assignment);
    data.outcome = Eigen::Map<const Eigen::VectorXd>(outcome.data(), n);
    data.covariates =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(cov_values.data(), n, k);
    data.covariate_names = std::move(cov_names);
    data.pre_period_col = pre_col;
    if (day_col != none) data.day_index = std::move(days);
    validate(data);
    return data;
}

inline ExperimentData load_csv(const std::string& path, const Schema& schema) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open '" + path + "'");
    return read_csv(in, schema);
}

// Writes the canonical layout: unit_id, assignment, outcome, [day], covariates.
// Numbers use the shortest representation that round-trips exactly.
inline void write_csv(std::ostream& out, const ExperimentData& data) {
    out << "unit_id,assignment,outcome";
    if (data.day_index) out << ",day";
    for (const auto& name : data.covariate_names) out << ',' << name;
    out << '\n';
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        out << data.unit_ids[i] << ',' << data.assignment[i] << ',' << detail::format_number(data.outcome[r]);
        if (data.day_index) out << ',' << (*data.day_index)[i];
        for (Eigen::Index k = 0; k < data.covariates.cols(); ++k)
            out << ',' << detail::format_number(data.covariates(r, k));
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Synthetic experiments
// ---------------------------------------------------------------------------

struct SyntheticConfig {
    std::size_t n_units = 1000;
    double assignment_prob = 0.5;
    std::size_t k_covariates = 1;
    double outcome_cor = 0.0;     // target corr(x, Y) when noise_sd = 1
    double true_ate = 0.0;
    double baseline = 0.0;        // outcome level mu, so lifts are meaningful
    double noise_sd = 1.0;
    double covariate_cor = 0.0;   // correlation of each extra covariate with x
    double daily_arrivals = 0.0;  // <= 0: no day column
    std::uint64_t seed = 0;

    void validate() const {
        if (n_units < 2) throw ValidationError("n_units must be at least 2");
        if (!(assignment_prob > 0.0 && assignment_prob < 1.0))
            throw ValidationError("assignment_prob must lie in (0, 1)");
        if (k_covariates < 1) throw ValidationError("k_covariates must be at least 1");
        if (!(std::abs(outcome_cor) <= 1.0)) throw ValidationError("outcome_cor must lie in [-1, 1]");
        if (!(std::abs(covariate_cor) <= 1.0)) throw ValidationError("covariate_cor must lie in [-1, 1]");
        if (!(noise_sd > 0.0)) throw ValidationError("noise_sd must be positive");
        if (!std::isfinite(true_ate) || !std::isfinite(baseline) || !std::isfinite(daily_arrivals))
            throw ValidationError("true_ate, baseline and daily_arrivals must be finite");
    }
};

// Covariate 0 is the pre-period KPI x ~ N(0, 1). The outcome is
//   Y = mu + rho * x + sqrt(1 - rho^2) * sigma * eps + tau * J.
// Per-unit draw order: J, x, eps, then the extra covariates.
inline ExperimentData generate(const SyntheticConfig& config) {
    config.validate();
    Rng rng(config.seed);
    const auto n = static_cast<Eigen::Index>(config.n_units);
    const auto k = static_cast<Eigen::Index>(config.k_covariates);
    const double rho = config.outcome_cor;
    const double resid = std::sqrt(1.0 - rho * rho) * config.noise_sd;
    const double c = config.covariate_cor;
    const double c_resid = std::sqrt(1.0 - c * c);

    ExperimentData data;
    data.unit_ids.reserve(config.n_units);
    data.assignment.reserve(config.n_units);
    data.outcome.resize(n);
    data.covariates.resize(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int j = rng.bernoulli(config.assignment_prob) ? 1 : 0;
        const double x = rng.normal();
        const double eps = rng.normal();
        data.assignment.push_back(j);
        data.unit_ids.push_back(std::to_string(i + 1));
        data.covariates(i, 0) = x;
        data.outcome[i] = config.baseline + rho * x + resid * eps + config.true_ate * j;
        for (Eigen::Index col = 1; col < k; ++col) data.covariates(i, col) = c * x + c_resid * rng.normal();
    }
    data.covariate_names.push_back("x");
    for (Eigen::Index col = 1; col < k; ++col) data.covariate_names.push_back("z" + std::to_string(col));
    data.pre_period_col = 0;

    if (config.daily_arrivals > 0.0) {
        std::vector<int> days;
        days.reserve(config.n_units);
        int day = 0;
        while (days.size() < config.n_units) {
            ++day;
            auto arrivals = rng.poisson(config.daily_arrivals);
            while (arrivals-- > 0 && days.size() < config.n_units) days.push_back(day);
        }
        data.day_index = std::move(days);
    }
    validate(data);
    return data;
}

} // namespace covadj
