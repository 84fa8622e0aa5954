#pragma once

// Per-arm regression models behind one fit/predict contract.
//
// Every fit standardizes the covariates it uses (mean 0, population sd 1)
// and centers the outcome, so the intercept is never penalized and
// predictions are invariant to affine rescaling of any covariate. The
// penalized kinds minimize
//
//   (1/2n) ||y - Z theta||^2 + gamma * (mix * |theta|_1 + (1 - mix)/2 * |theta|_2^2)
//
// over standardized slopes: ridge is mix = 0, lasso is mix = 1.

#include <covadj/error.hpp>
#include <covadj/numeric.hpp>
#include <covadj/random.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace covadj {

enum class ModelKind { Dim, Ols, Ridge, Lasso, ElasticNet, Pcr, Tweedie, TwoStep };

enum class ColumnSelection {
    All,        // every covariate
    PrePeriod,  // only the designated pre-period KPI column
    Explicit,   // the indices in ModelSpec::columns
};

struct ModelSpec {
    ModelKind kind = ModelKind::Dim;

    // Candidate regularization values. Empty: `grid_size` log-spaced values
    // from gamma_max down to `grid_ratio * gamma_max`, computed per arm.
    std::vector<double> hyper_grid;
    std::size_t grid_size = 50;
    double grid_ratio = 1e-4;
    std::size_t cv_folds = 5;

    std::optional<double> mix;  // elastic-net l1 share; required for ElasticNet

    std::optional<std::size_t> n_components;  // PCR; overrides the threshold
    double variance_threshold = 0.9;

    double tweedie_power = 1.5;
    std::size_t irls_max_iter = 100;
    double irls_tolerance = 1e-10;

    double cd_tolerance = 1e-8;
    std::size_t cd_max_sweeps = 10000;

    ColumnSelection selection = ColumnSelection::All;
    std::vector<std::size_t> columns;

    std::shared_ptr<const ModelSpec> base;  // TwoStep

    static ModelSpec dim() { return {}; }
    static ModelSpec ols() {
        ModelSpec s;
        s.kind = ModelKind::Ols;
        return s;
    }
    static ModelSpec ridge(std::vector<double> grid = {}) {
        ModelSpec s;
        s.kind = ModelKind::Ridge;
        s.hyper_grid = std::move(grid);
        return s;
    }
    static ModelSpec lasso(std::vector<double> grid = {}) {
        ModelSpec s;
        s.kind = ModelKind::Lasso;
        s.hyper_grid = std::move(grid);
        return s;
    }
    static ModelSpec elastic_net(double mix, std::vector<double> grid = {}) {
        ModelSpec s;
        s.kind = ModelKind::ElasticNet;
        s.mix = mix;
        s.hyper_grid = std::move(grid);
        return s;
    }
    static ModelSpec pcr(std::optional<std::size_t> components = std::nullopt) {
        ModelSpec s;
        s.kind = ModelKind::Pcr;
        s.n_components = components;
        return s;
    }
    static ModelSpec tweedie(double power = 1.5) {
        ModelSpec s;
        s.kind = ModelKind::Tweedie;
        s.tweedie_power = power;
        return s;
    }
    static ModelSpec two_step(ModelSpec base_spec) {
        ModelSpec s;
        s.kind = ModelKind::TwoStep;
        s.base = std::make_shared<const ModelSpec>(std::move(base_spec));
        return s;
    }

    ModelSpec& pre_period_only() {
        selection = ColumnSelection::PrePeriod;
        return *this;
    }
    ModelSpec& with_columns(std::vector<std::size_t> cols) {
        selection = ColumnSelection::Explicit;
        columns = std::move(cols);
        return *this;
    }

    bool is_penalized() const noexcept {
        return kind == ModelKind::Ridge || kind == ModelKind::Lasso || kind == ModelKind::ElasticNet;
    }

    // l1 share of the penalty for the penalized kinds.
    double l1_share() const noexcept {
        switch (kind) {
        case ModelKind::Lasso: return 1.0;
        case ModelKind::ElasticNet: return mix.value_or(0.0);
        default: return 0.0;
        }
    }

    void validate() const {
        if (kind == ModelKind::TwoStep) {
            if (!base) throw ValidationError("two_step needs a base model");
            if (base->kind == ModelKind::TwoStep) throw ValidationError("two_step cannot nest another two_step");
            base->validate();
            return;
        }
        if (is_penalized()) {
            for (double g : hyper_grid)
                if (!(g > 0.0) || !std::isfinite(g))
                    throw ValidationError("hyper_grid values must be finite and strictly positive");
            if (hyper_grid.empty() && (grid_size < 1 || !(grid_ratio > 0.0 && grid_ratio <= 1.0)))
                throw ValidationError("default grid needs grid_size >= 1 and grid_ratio in (0, 1]");
            if (cv_folds < 2) throw ValidationError("cv_folds must be at least 2");
        }
        if (kind == ModelKind::ElasticNet) {
            if (!mix) throw ValidationError("elastic_net requires an explicit mix in [0, 1]");
            if (!(*mix >= 0.0 && *mix <= 1.0)) throw ValidationError("elastic_net mix must lie in [0, 1]");
        }
        if (kind == ModelKind::Pcr) {
            if (n_components && *n_components < 1) throw ValidationError("pcr needs at least one component");
            if (!(variance_threshold > 0.0 && variance_threshold <= 1.0))
                throw ValidationError("pcr variance_threshold must lie in (0, 1]");
        }
        if (kind == ModelKind::Tweedie && !(tweedie_power > 1.0 && tweedie_power < 2.0))
            throw ValidationError("tweedie power must lie in (1, 2)");
        if (selection == ColumnSelection::Explicit && columns.empty())
            throw ValidationError("explicit column selection is empty");
    }
};

// ---------------------------------------------------------------------------
// Canonical names: dim, ols, ridge, lasso, elastic_net(mix=0.5), pcr,
// tweedie, two_step:<base>; optional parameters in parentheses separated by
// ';' and a column suffix "@pre" or "@0|3".
// ---------------------------------------------------------------------------

inline std::string kind_name(ModelKind kind) {
    switch (kind) {
    case ModelKind::Dim: return "dim";
    case ModelKind::Ols: return "ols";
    case ModelKind::Ridge: return "ridge";
    case ModelKind::Lasso: return "lasso";
    case ModelKind::ElasticNet: return "elastic_net";
    case ModelKind::Pcr: return "pcr";
    case ModelKind::Tweedie: return "tweedie";
    case ModelKind::TwoStep: return "two_step";
    }
    return "unknown";
}

namespace detail {

// Shortest text that reads back to the same double.
inline std::string format_param(double x) {
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return ec == std::errc() ? std::string(buf, ptr) : std::string("nan");
}

} // namespace detail

inline std::string to_string(const ModelSpec& spec) {
    if (spec.kind == ModelKind::TwoStep) return "two_step:" + (spec.base ? to_string(*spec.base) : "?");
    std::vector<std::string> params;
    const ModelSpec defaults;
    if (spec.kind == ModelKind::ElasticNet && spec.mix) params.push_back("mix=" + detail::format_param(*spec.mix));
    if (spec.is_penalized()) {
        if (!spec.hyper_grid.empty()) {
            std::string g = "grid=";
            for (std::size_t i = 0; i < spec.hyper_grid.size(); ++i)
                g += (i ? "|" : "") + detail::format_param(spec.hyper_grid[i]);
            params.push_back(g);
        }
        if (spec.cv_folds != defaults.cv_folds) params.push_back("folds=" + std::to_string(spec.cv_folds));
    }
    if (spec.kind == ModelKind::Pcr) {
        if (spec.n_components) params.push_back("components=" + std::to_string(*spec.n_components));
        else if (spec.variance_threshold != defaults.variance_threshold)
            params.push_back("threshold=" + detail::format_param(spec.variance_threshold));
    }
    if (spec.kind == ModelKind::Tweedie && spec.tweedie_power != defaults.tweedie_power)
        params.push_back("power=" + detail::format_param(spec.tweedie_power));

    std::string out = kind_name(spec.kind);
    if (!params.empty()) {
        out += '(';
        for (std::size_t i = 0; i < params.size(); ++i) out += (i ? ";" : "") + params[i];
        out += ')';
    }
    if (spec.selection == ColumnSelection::PrePeriod) out += "@pre";
    if (spec.selection == ColumnSelection::Explicit) {
        out += '@';
        for (std::size_t i = 0; i < spec.columns.size(); ++i)
            out += (i ? "|" : "") + std::to_string(spec.columns[i]);
    }
    return out;
}

namespace detail {

inline double parse_param_double(std::string_view text, std::string_view context) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || ec != std::errc() || ptr != text.data() + text.size())
        throw ValidationError("bad number '" + std::string(text) + "' in model '" + std::string(context) + "'");
    return v;
}

inline std::size_t parse_param_size(std::string_view text, std::string_view context) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || ec != std::errc() || ptr != text.data() + text.size())
        throw ValidationError("bad integer '" + std::string(text) + "' in model '" + std::string(context) + "'");
    return v;
}

inline std::vector<std::string_view> split(std::string_view text, char sep) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (true) {
        const auto end = text.find(sep, pos);
        out.push_back(text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
        if (end == std::string_view::npos) break;
        pos = end + 1;
    }
    return out;
}

} // namespace detail

inline ModelSpec parse_model_spec(std::string_view name) {
    const std::string_view full = name;
    if (name.starts_with("two_step:")) {
        auto spec = ModelSpec::two_step(parse_model_spec(name.substr(9)));
        spec.validate();
        return spec;
    }

    std::string_view columns;
    if (const auto at = name.find('@'); at != std::string_view::npos) {
        columns = name.substr(at + 1);
        name = name.substr(0, at);
    }
    std::string_view params;
    if (const auto open = name.find('('); open != std::string_view::npos) {
        if (name.back() != ')') throw ValidationError("unbalanced parentheses in model '" + std::string(full) + "'");
        params = name.substr(open + 1, name.size() - open - 2);
        name = name.substr(0, open);
    }

    ModelSpec spec;
    if (name == "dim") spec.kind = ModelKind::Dim;
    else if (name == "ols" || name == "lr") spec.kind = ModelKind::Ols;
    else if (name == "ridge") spec.kind = ModelKind::Ridge;
    else if (name == "lasso") spec.kind = ModelKind::Lasso;
    else if (name == "elastic_net") spec.kind = ModelKind::ElasticNet;
    else if (name == "pcr") spec.kind = ModelKind::Pcr;
    else if (name == "tweedie") spec.kind = ModelKind::Tweedie;
    else throw ValidationError("unknown model kind '" + std::string(name) + "'");

    if (!params.empty()) {
        for (auto item : detail::split(params, ';')) {
            const auto eq = item.find('=');
            if (eq == std::string_view::npos)
                throw ValidationError("model parameter without '=' in '" + std::string(full) + "'");
            const auto key = item.substr(0, eq);
            const auto value = item.substr(eq + 1);
            if (key == "mix") spec.mix = detail::parse_param_double(value, full);
            else if (key == "grid") {
                for (auto g : detail::split(value, '|')) spec.hyper_grid.push_back(detail::parse_param_double(g, full));
            } else if (key == "gamma") spec.hyper_grid = {detail::parse_param_double(value, full)};
            else if (key == "folds") spec.cv_folds = detail::parse_param_size(value, full);
            else if (key == "components") spec.n_components = detail::parse_param_size(value, full);
            else if (key == "threshold") spec.variance_threshold = detail::parse_param_double(value, full);
            else if (key == "power") spec.tweedie_power = detail::parse_param_double(value, full);
            else throw ValidationError("unknown parameter '" + std::string(key) + "' in model '" + std::string(full) + "'");
        }
    }

    if (columns == "pre") spec.selection = ColumnSelection::PrePeriod;
    else if (!columns.empty()) {
        spec.selection = ColumnSelection::Explicit;
        for (auto c : detail::split(columns, '|')) spec.columns.push_back(detail::parse_param_size(c, full));
    }
    spec.validate();
    return spec;
}

// ---------------------------------------------------------------------------
// Fitted model
// ---------------------------------------------------------------------------

struct FittedArmModel {
    ModelSpec spec;
    int arm = -1;                       // set by the estimator
    std::size_t n_covariates = 0;       // K expected by predict
    std::size_t n_obs = 0;

    std::vector<std::size_t> used_columns;     // indices into z that carry a slope
    std::vector<std::size_t> dropped_columns;  // selected but zero-variance
    Eigen::VectorXd center;                    // per used column
    Eigen::VectorXd scale;                     // per used column, > 0

    // prediction = intercept + slopes . ((z[used] - center) / scale),
    // passed through exp() when log_link is set.
    double intercept = 0.0;
    Eigen::VectorXd slopes;
    bool log_link = false;

    Eigen::MatrixXd components;         // PCR loadings, used x c
    Eigen::VectorXd component_weights;  // PCR weights on the scores

    std::optional<double> chosen_gamma;
    std::vector<double> gamma_grid;     // descending
    std::vector<double> cv_scores;      // mean out-of-fold R^2 per grid value

    std::size_t rank = 0;
    bool rank_deficient = false;
    bool degenerated_to_dim = false;    // every selected covariate was constant
    std::size_t iterations = 0;         // CD sweeps or IRLS iterations
    double deviance = 0.0;              // tweedie
    std::vector<double> objective_trace;  // penalized objective after each CD sweep

    double linear_predictor(std::span<const double> z) const {
        if (z.size() != n_covariates)
            throw ValidationError("predict: expected " + std::to_string(n_covariates) + " covariates, got " +
                                  std::to_string(z.size()));
        double eta = intercept;
        for (std::size_t i = 0; i < used_columns.size(); ++i) {
            const auto k = static_cast<Eigen::Index>(i);
            eta += slopes[k] * ((z[used_columns[i]] - center[k]) / scale[k]);
        }
        return eta;
    }

    // Slopes on the original covariate scale, length K (zero where unused).
    Eigen::VectorXd coefficients() const {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_covariates));
        for (std::size_t i = 0; i < used_columns.size(); ++i) {
            const auto k = static_cast<Eigen::Index>(i);
            out[static_cast<Eigen::Index>(used_columns[i])] = slopes[k] / scale[k];
        }
        return out;
    }

    // Intercept on the original covariate scale (value of the linear
    // predictor at z = 0).
    double original_intercept() const {
        double b0 = intercept;
        for (std::size_t i = 0; i < used_columns.size(); ++i) {
            const auto k = static_cast<Eigen::Index>(i);
            b0 -= slopes[k] * center[k] / scale[k];
        }
        return b0;
    }
};

inline double predict(const FittedArmModel& model, std::span<const double> z) {
    const double eta = model.linear_predictor(z);
    return model.log_link ? std::exp(eta) : eta;
}

// Row-wise predictions; each entry is bitwise equal to predict() on that row.
inline Eigen::VectorXd predict(const FittedArmModel& model, const Eigen::MatrixXd& z) {
    if (static_cast<std::size_t>(z.cols()) != model.n_covariates)
        throw ValidationError("predict: expected " + std::to_string(model.n_covariates) + " covariates, got " +
                              std::to_string(z.cols()));
    Eigen::ArrayXd eta = Eigen::ArrayXd::Constant(z.rows(), model.intercept);
    for (std::size_t i = 0; i < model.used_columns.size(); ++i) {
        const auto k = static_cast<Eigen::Index>(i);
        eta += model.slopes[k] * ((z.col(static_cast<Eigen::Index>(model.used_columns[i])).array() - model.center[k]) /
                                  model.scale[k]);
    }
    if (model.log_link) eta = eta.exp();
    return eta.matrix();
}

// Outcomes and covariates of one arm.
struct ArmData {
    Eigen::VectorXd y;
    Eigen::MatrixXd z;
    std::size_t pre_period_col = 0;
};

namespace detail {

// Covariates after column selection and zero-variance dropping, standardized
// with the population sd; outcome centered.
struct Standardized {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    double y_mean = 0.0;
    Eigen::VectorXd center;
    Eigen::VectorXd scale;
    std::vector<std::size_t> used;
    std::vector<std::size_t> dropped;

    Eigen::Index n() const noexcept { return x.rows(); }
    Eigen::Index p() const noexcept { return x.cols(); }
};

inline std::vector<std::size_t> selected_columns(const ModelSpec& spec, std::size_t k, std::size_t pre_col) {
    std::vector<std::size_t> cols;
    switch (spec.selection) {
    case ColumnSelection::All:
        for (std::size_t c = 0; c < k; ++c) cols.push_back(c);
        break;
    case ColumnSelection::PrePeriod:
        if (pre_col >= k) throw ValidationError("pre-period column out of range");
        cols.push_back(pre_col);
        break;
    case ColumnSelection::Explicit:
        for (auto c : spec.columns) {
            if (c >= k) throw ValidationError("model column " + std::to_string(c) + " out of range");
            cols.push_back(c);
        }
        break;
    }
    return cols;
}

inline double column_mean(const Eigen::Ref<const Eigen::VectorXd>& v) {
    return mean(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

template <class RowIndex>
Standardized standardize(const Eigen::VectorXd& y, const Eigen::MatrixXd& z, const std::vector<std::size_t>& cols,
                         const RowIndex& rows) {
    Standardized s;
    const auto n = static_cast<Eigen::Index>(rows.size());
    const double dn = static_cast<double>(n);

    s.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) s.y[i] = y[static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)])];
    s.y_mean = column_mean(s.y);
    s.y.array() -= s.y_mean;

    std::vector<double> centers, scales;
    Eigen::VectorXd buf(n);
    for (auto c : cols) {
        for (Eigen::Index i = 0; i < n; ++i)
            buf[i] = z(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]), static_cast<Eigen::Index>(c));
        const double m = column_mean(buf);
        CompensatedSum ss;
        for (Eigen::Index i = 0; i < n; ++i) ss += (buf[i] - m) * (buf[i] - m);
        const double sd = std::sqrt(ss.value() / dn);
        if (!(sd > 0.0) || sd <= 1e-12 * std::abs(m)) {
            s.dropped.push_back(c);
            continue;
        }
        s.used.push_back(c);
        centers.push_back(m);
        scales.push_back(sd);
    }
    const auto p = static_cast<Eigen::Index>(s.used.size());
    s.center = Eigen::Map<const Eigen::VectorXd>(centers.data(), p);
    s.scale = Eigen::Map<const Eigen::VectorXd>(scales.data(), p);
    s.x.resize(n, p);
    for (Eigen::Index j = 0; j < p; ++j) {
        const auto c = static_cast<Eigen::Index>(s.used[static_cast<std::size_t>(j)]);
        for (Eigen::Index i = 0; i < n; ++i)
            s.x(i, j) = (z(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]), c) - s.center[j]) / s.scale[j];
    }
    return s;
}

struct AllRows {
    std::size_t count;
    std::size_t size() const noexcept { return count; }
    std::size_t operator[](std::size_t i) const noexcept { return i; }
};

// Sufficient statistics for the penalized least-squares kinds.
struct Gram {
    Eigen::MatrixXd xtx;  // X'X / n
    Eigen::VectorXd xty;  // X'y / n
    double yty = 0.0;     // y'y / n
};

inline Gram gram(const Standardized& s) {
    Gram g;
    const double dn = static_cast<double>(s.n());
    g.xtx = (s.x.transpose() * s.x) / dn;
    g.xty = (s.x.transpose() * s.y) / dn;
    g.yty = s.y.squaredNorm() / dn;
    return g;
}

// Smallest gamma at which every penalized slope is zero. Ridge (mix = 0)
// has none; 1e-3 stands in for the l1 share as glmnet does.
inline double gamma_max(const Gram& g, double mix) {
    if (g.xty.size() == 0) return 1.0;
    const double m = g.xty.cwiseAbs().maxCoeff();
    return (m > 0.0 ? m : 1.0) / std::max(mix, 1e-3);
}

inline std::vector<double> default_grid(double gmax, std::size_t size, double ratio) {
    std::vector<double> grid(size);
    if (size == 1) return {gmax};
    const double step = std::log(ratio) / static_cast<double>(size - 1);
    for (std::size_t i = 0; i < size; ++i) grid[i] = gmax * std::exp(step * static_cast<double>(i));
    return grid;
}

inline double penalized_objective(const Gram& g, const Eigen::VectorXd& theta, double gamma, double mix) {
    const double loss = 0.5 * (g.yty - 2.0 * g.xty.dot(theta) + theta.dot(g.xtx * theta));
    return loss + gamma * (mix * theta.lpNorm<1>() + 0.5 * (1.0 - mix) * theta.squaredNorm());
}

inline double soft_threshold(double u, double t) noexcept {
    if (u > t) return u - t;
    if (u < -t) return u + t;
    return 0.0;
}

struct CdResult {
    std::size_t sweeps = 0;
    bool converged = false;
};

// Cyclic coordinate descent on the covariance form. `theta` is the warm
// start on entry and the solution on exit.
inline CdResult coordinate_descent(const Gram& g, double gamma, double mix, Eigen::VectorXd& theta, double tol,
                                   std::size_t max_sweeps, std::vector<double>* trace = nullptr) {
    const Eigen::Index p = theta.size();
    Eigen::VectorXd grad = g.xty - g.xtx * theta;  // X'(y - X theta) / n
    const double l1 = gamma * mix;
    const double l2 = gamma * (1.0 - mix);
    CdResult result;
    if (trace) trace->push_back(penalized_objective(g, theta, gamma, mix));
    while (result.sweeps < max_sweeps) {
        ++result.sweeps;
        double max_change = 0.0;
        for (Eigen::Index j = 0; j < p; ++j) {
            const double old = theta[j];
            const double diag = g.xtx(j, j);
            const double updated = soft_threshold(grad[j] + diag * old, l1) / (diag + l2);
            const double delta = updated - old;
            if (delta != 0.0) {
                theta[j] = updated;
                grad.noalias() -= g.xtx.col(j) * delta;
                max_change = std::max(max_change, std::abs(delta));
            }
        }
        if (trace) trace->push_back(penalized_objective(g, theta, gamma, mix));
        if (max_change < tol) {
            result.converged = true;
            break;
        }
    }
    return result;
}

inline Eigen::VectorXd ridge_solve(const Gram& g, double gamma) {
    Eigen::MatrixXd a = g.xtx;
    a.diagonal().array() += gamma;
    return a.ldlt().solve(g.xty);
}

// Penalized solutions along a descending grid, warm-started for CD.
inline std::vector<Eigen::VectorXd> penalized_path(const ModelSpec& spec, const Gram& g,
                                                   const std::vector<double>& grid) {
    std::vector<Eigen::VectorXd> path;
    path.reserve(grid.size());
    const double mix = spec.l1_share();
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(g.xty.size());
    for (double gamma : grid) {
        if (mix == 0.0 && spec.kind == ModelKind::Ridge) {
            path.push_back(ridge_solve(g, gamma));
        } else {
            coordinate_descent(g, gamma, mix, theta, spec.cd_tolerance, spec.cd_max_sweeps);
            path.push_back(theta);
        }
    }
    return path;
}

inline double r_squared(const Eigen::VectorXd& y, const Eigen::VectorXd& pred) {
    const double m = column_mean(y);
    const double ss_tot = (y.array() - m).square().sum();
    const double ss_res = (y - pred).squaredNorm();
    if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
    return 1.0 - ss_res / ss_tot;
}

inline std::vector<double> descending(std::vector<double> grid) {
    std::sort(grid.begin(), grid.end(), std::greater<>());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    return grid;
}

} // namespace detail

struct CvResult {
    double chosen_gamma = 0.0;
    std::vector<double> grid;    // descending
    std::vector<double> scores;  // mean out-of-fold R^2, empty for a single-value grid
};

// K-fold selection of gamma for the penalized kinds. Folds come from a seeded
// permutation and differ in size by at most one; the highest mean
// out-of-fold R^2 wins, ties going to the larger gamma.
inline CvResult cross_validate(const ModelSpec& spec, const ArmData& arm, std::uint64_t seed) {
    spec.validate();
    if (!spec.is_penalized()) throw ValidationError("cross_validate: " + kind_name(spec.kind) + " has no hyperparameter");
    const auto n = static_cast<std::size_t>(arm.y.size());
    if (n == 0) throw ValidationError("cross_validate: arm is empty");
    const auto cols = detail::selected_columns(spec, static_cast<std::size_t>(arm.z.cols()), arm.pre_period_col);

    CvResult result;
    if (!spec.hyper_grid.empty()) {
        result.grid = detail::descending(spec.hyper_grid);
    } else {
        const auto full = detail::standardize(arm.y, arm.z, cols, detail::AllRows{n});
        const auto g = detail::gram(full);
        result.grid = detail::default_grid(detail::gamma_max(g, spec.l1_share()), spec.grid_size, spec.grid_ratio);
    }
    if (result.grid.size() == 1) {
        result.chosen_gamma = result.grid.front();
        return result;
    }
    const std::size_t folds = spec.cv_folds;
    if (n < folds)
        throw ValidationError("cross_validate: " + std::to_string(n) + " rows cannot fill " + std::to_string(folds) +
                              " folds; use a smaller fold count");

    Rng rng(seed);
    const auto perm = random_permutation(n, rng);
    std::vector<std::size_t> fold_of(n);
    for (std::size_t i = 0; i < n; ++i) fold_of[perm[i]] = i % folds;

    std::vector<CompensatedSum> totals(result.grid.size());
    for (std::size_t f = 0; f < folds; ++f) {
        std::vector<std::size_t> train, test;
        for (std::size_t i = 0; i < n; ++i) (fold_of[i] == f ? test : train).push_back(i);
        const auto s = detail::standardize(arm.y, arm.z, cols, train);
        const auto g = detail::gram(s);
        const auto path = detail::penalized_path(spec, g, result.grid);

        Eigen::VectorXd y_test(static_cast<Eigen::Index>(test.size()));
        Eigen::MatrixXd x_test(static_cast<Eigen::Index>(test.size()), s.p());
        for (std::size_t i = 0; i < test.size(); ++i) {
            const auto r = static_cast<Eigen::Index>(test[i]);
            const auto ti = static_cast<Eigen::Index>(i);
            y_test[ti] = arm.y[r];
            for (Eigen::Index j = 0; j < s.p(); ++j)
                x_test(ti, j) = (arm.z(r, static_cast<Eigen::Index>(s.used[static_cast<std::size_t>(j)])) - s.center[j]) /
                                s.scale[j];
        }
        for (std::size_t gi = 0; gi < result.grid.size(); ++gi) {
            Eigen::VectorXd pred = (x_test * path[gi]).array() + s.y_mean;
            totals[gi] += detail::r_squared(y_test, pred);
        }
    }

    result.scores.resize(result.grid.size());
    std::size_t best = 0;
    for (std::size_t gi = 0; gi < result.grid.size(); ++gi) {
        result.scores[gi] = totals[gi].value() / static_cast<double>(folds);
        if (result.scores[gi] > result.scores[best]) best = gi;
    }
    result.chosen_gamma = result.grid[best];
    return result;
}

namespace detail {

inline void fit_least_squares(FittedArmModel& model, const Standardized& s) {
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(s.x);
    model.slopes = cod.solve(s.y);
    model.rank = static_cast<std::size_t>(cod.rank());
    model.rank_deficient = model.rank < static_cast<std::size_t>(s.p());
}

inline void fit_pcr(FittedArmModel& model, const Standardized& s, const ModelSpec& spec) {
    const double dn = static_cast<double>(s.n());
    const Eigen::MatrixXd corr = (s.x.transpose() * s.x) / dn;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(corr);
    // Eigen returns ascending eigenvalues.
    const Eigen::Index p = s.p();
    Eigen::VectorXd values = eig.eigenvalues().reverse();
    Eigen::MatrixXd vectors = eig.eigenvectors().rowwise().reverse();

    Eigen::Index c = p;
    if (spec.n_components) {
        c = std::min<Eigen::Index>(static_cast<Eigen::Index>(*spec.n_components), p);
    } else {
        const double total = values.cwiseMax(0.0).sum();
        double acc = 0.0;
        for (Eigen::Index i = 0; i < p; ++i) {
            acc += std::max(values[i], 0.0);
            if (acc >= spec.variance_threshold * total * (1.0 - 1e-12)) {
                c = i + 1;
                break;
            }
        }
    }
    model.components = vectors.leftCols(c);
    const Eigen::MatrixXd scores = s.x * model.components;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(scores);
    model.component_weights = cod.solve(s.y);
    model.rank = static_cast<std::size_t>(cod.rank());
    model.rank_deficient = model.rank < static_cast<std::size_t>(c);
    model.slopes = model.components * model.component_weights;
}

inline double tweedie_deviance(const Eigen::VectorXd& y, const Eigen::ArrayXd& mu, double p) {
    CompensatedSum dev;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double yi = y[i];
        const double m = mu[i];
        double d = -yi * std::pow(m, 1.0 - p) / (1.0 - p) + std::pow(m, 2.0 - p) / (2.0 - p);
        if (yi > 0.0) d += std::pow(yi, 2.0 - p) / ((1.0 - p) * (2.0 - p));
        dev += 2.0 * d;
    }
    return dev.value();
}

// IRLS for a Tweedie GLM with log link on standardized covariates. `y_raw`
// is the uncentered outcome.
inline void fit_tweedie(FittedArmModel& model, const Standardized& s, const Eigen::VectorXd& y_raw,
                        const ModelSpec& spec) {
    const double p = spec.tweedie_power;
    if ((y_raw.array() < 0.0).any()) throw ValidationError("tweedie requires non-negative outcomes");
    const double y_mean = s.y_mean;
    if (!(y_mean > 0.0)) throw ValidationError("tweedie requires a positive mean outcome");

    const Eigen::Index n = s.n();
    const Eigen::Index q = s.p() + 1;
    Eigen::MatrixXd design(n, q);
    design.col(0).setOnes();
    design.rightCols(s.p()) = s.x;

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(q);
    beta[0] = std::log(y_mean);
    Eigen::ArrayXd eta = (design * beta).array();
    Eigen::ArrayXd mu = eta.exp();
    double dev = tweedie_deviance(y_raw, mu, p);

    for (std::size_t iter = 1; iter <= spec.irls_max_iter; ++iter) {
        const Eigen::ArrayXd w = mu.pow(2.0 - p);
        const Eigen::ArrayXd work = eta + (y_raw.array() - mu) / mu;
        const Eigen::ArrayXd sw = w.sqrt();
        const Eigen::MatrixXd a = design.array().colwise() * sw;
        const Eigen::VectorXd b = (work * sw).matrix();
        Eigen::VectorXd proposal = a.colPivHouseholderQr().solve(b);

        // Step halving guards against overshoot far from the optimum.
        double new_dev = std::numeric_limits<double>::infinity();
        Eigen::ArrayXd new_eta, new_mu;
        for (int half = 0; half < 30; ++half) {
            new_eta = (design * proposal).array();
            new_mu = new_eta.exp();
            new_dev = new_mu.allFinite() ? tweedie_deviance(y_raw, new_mu, p)
                                         : std::numeric_limits<double>::infinity();
            if (std::isfinite(new_dev) && new_dev <= dev * (1.0 + 1e-12) + 1e-300) break;
            proposal = 0.5 * (proposal + beta);
        }
        if (!std::isfinite(new_dev))
            throw ConvergenceError("tweedie IRLS produced a non-finite deviance", dev);

        const double change = std::abs(new_dev - dev) / (std::abs(new_dev) + 0.1);
        beta = proposal;
        eta = new_eta;
        mu = new_mu;
        dev = new_dev;
        model.iterations = iter;
        if (change < spec.irls_tolerance) {
            model.intercept = beta[0];
            model.slopes = beta.tail(s.p());
            model.deviance = dev;
            model.log_link = true;
            model.rank = static_cast<std::size_t>(s.p());
            return;
        }
    }
    throw ConvergenceError("tweedie IRLS did not converge in " + std::to_string(spec.irls_max_iter) +
                               " iterations (last deviance " + format_param(dev) + ")",
                           dev);
}

} // namespace detail

// Fits one arm's regression. Zero-variance covariates are dropped; if none
// remain the model degenerates to the arm mean and says so.
inline FittedArmModel fit(const ModelSpec& spec, const ArmData& arm, std::uint64_t seed) {
    spec.validate();
    if (spec.kind == ModelKind::TwoStep)
        throw ValidationError("two_step models are fit by the estimator, not per arm");
    const auto n = static_cast<std::size_t>(arm.y.size());
    if (n == 0) throw ValidationError("fit: arm is empty");
    if (static_cast<std::size_t>(arm.z.rows()) != n) throw ValidationError("fit: outcome and covariate rows differ");
    if (!arm.y.allFinite() || !arm.z.allFinite()) throw ValidationError("fit: non-finite input");

    FittedArmModel model;
    model.spec = spec;
    model.n_covariates = static_cast<std::size_t>(arm.z.cols());
    model.n_obs = n;

    std::vector<std::size_t> cols;
    if (spec.kind != ModelKind::Dim)
        cols = detail::selected_columns(spec, model.n_covariates, arm.pre_period_col);
    const auto s = detail::standardize(arm.y, arm.z, cols, detail::AllRows{n});
    model.used_columns = s.used;
    model.dropped_columns = s.dropped;
    model.center = s.center;
    model.scale = s.scale;
    model.intercept = s.y_mean;
    model.slopes = Eigen::VectorXd::Zero(s.p());

    if (spec.kind == ModelKind::Dim) return model;
    if (s.p() == 0) {
        model.degenerated_to_dim = true;
        if (spec.kind == ModelKind::Tweedie) {
            if ((arm.y.array() < 0.0).any()) throw ValidationError("tweedie requires non-negative outcomes");
            if (!(s.y_mean > 0.0)) throw ValidationError("tweedie requires a positive mean outcome");
            model.intercept = std::log(s.y_mean);
            model.log_link = true;
        }
        return model;
    }

    switch (spec.kind) {
    case ModelKind::Ols:
        detail::fit_least_squares(model, s);
        break;
    case ModelKind::Pcr:
        detail::fit_pcr(model, s, spec);
        break;
    case ModelKind::Tweedie:
        detail::fit_tweedie(model, s, arm.y, spec);
        break;
    case ModelKind::Ridge:
    case ModelKind::Lasso:
    case ModelKind::ElasticNet: {
        const auto cv = cross_validate(spec, arm, seed);
        model.chosen_gamma = cv.chosen_gamma;
        model.gamma_grid = cv.grid;
        model.cv_scores = cv.scores;
        const auto g = detail::gram(s);
        const double mix = spec.l1_share();
        if (spec.kind == ModelKind::Ridge) {
            model.slopes = detail::ridge_solve(g, cv.chosen_gamma);
        } else {
            // Warm start down the grid to the chosen value.
            Eigen::VectorXd theta = Eigen::VectorXd::Zero(s.p());
            for (double gamma : cv.grid) {
                if (gamma == cv.chosen_gamma) break;
                detail::coordinate_descent(g, gamma, mix, theta, spec.cd_tolerance, spec.cd_max_sweeps);
            }
            const auto cd = detail::coordinate_descent(g, cv.chosen_gamma, mix, theta, spec.cd_tolerance,
                                                       spec.cd_max_sweeps, &model.objective_trace);
            model.iterations = cd.sweeps;
            model.slopes = theta;
        }
        model.rank = static_cast<std::size_t>(s.p());
        break;
    }
    case ModelKind::Dim:
    case ModelKind::TwoStep:
        break;
    }
    return model;
}

} // namespace covadj
