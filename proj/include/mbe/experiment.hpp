#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <nlohmann/json.hpp>

#include "mbe/bounds.hpp"
#include "mbe/error.hpp"
#include "mbe/gaussian.hpp"
#include "mbe/generators.hpp"
#include "mbe/kolmogorov.hpp"
#include "mbe/normal.hpp"
#include "mbe/parallel.hpp"
#include "mbe/rng.hpp"
#include "mbe/spectral.hpp"

namespace mbe {

using json = nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kCsvHeader =
    "n,d,R,dk_value,mc_error,mvn_error,bound_t1,bound_t2,bound_t3a,bound_t3b,bound_t4,seed";

enum class KappaMode { proof, statement };

struct BoundSettings {
    double c_t1 = 1.0;
    double c_t2 = 1.0;
    double c_t3 = 1.0;
    double c_t4 = 1.0;
    double c_kappa = 1.0;
    double p = 2.0;                // integrability index of d nu / d mu
    std::optional<double> q;       // defaults to p / (p - 1)
    KappaMode kappa_mode = KappaMode::proof;
    std::optional<double> kappa;   // fixed kappa instead of the Hoeffding radius

    double q_value() const { return q ? *q : p / (p - 1.0); }
};

struct CheckSettings {
    int quad_points = 1000;
    double rhs_scale = 1.0;
    int oracle_rectangles = 25;
    Eigen::Index oracle_dim = 5;
    std::int64_t oracle_draws = 100000;
};

struct ExperimentConfig {
    GeneratorSpec generator = Bolthausen{1};
    std::vector<std::int64_t> n_grid;
    std::int64_t replications = 1000;
    Eigen::Index d = 1;
    int grid_points = 41;
    int random_count = 512;
    std::int64_t qmc_budget = 1 << 14;
    std::uint64_t master_seed = 1;
    BoundSettings bounds;
    PathMode path_mode = PathMode::Collapsed;
    double budget_minutes = 30.0;
    std::string output;
    CheckSettings check;
    json raw = json::object();
};

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

class ConfigReader {
public:
    struct Node {
        const json* value;
        std::size_t pos;
        std::string path;
    };

    explicit ConfigReader(const std::string& text) : text_(text) {}

    [[noreturn]] void fail(std::size_t pos, const std::string& msg) const {
        const auto end = text_.begin() + static_cast<std::ptrdiff_t>(std::min(pos, text_.size()));
        const auto line = 1 + std::count(text_.begin(), end, '\n');
        throw ConfigError("config line " + std::to_string(line) + ": " + msg);
    }

    std::optional<Node> get(const Node& obj, const std::string& key) const {
        const auto it = obj.value->find(key);
        if (it == obj.value->end()) return std::nullopt;
        return Node{&*it, find_key(key, obj.pos), obj.path + "." + key};
    }

    Node require(const Node& obj, const std::string& key) const {
        auto n = get(obj, key);
        if (!n) fail(obj.pos, "missing required key '" + obj.path + "." + key + "'");
        return *n;
    }

    void allow_only(const Node& obj, std::initializer_list<std::string_view> keys) const {
        if (!obj.value->is_object()) fail(obj.pos, "'" + obj.path + "' must be an object");
        for (const auto& [k, v] : obj.value->items()) {
            if (std::find(keys.begin(), keys.end(), k) == keys.end())
                fail(find_key(k, obj.pos), "unknown key '" + obj.path + "." + k + "'");
        }
    }

    double number(const Node& n) const {
        if (!n.value->is_number()) fail(n.pos, "'" + n.path + "' must be a number");
        const double v = n.value->get<double>();
        if (!std::isfinite(v)) fail(n.pos, "'" + n.path + "' must be finite");
        return v;
    }

    std::int64_t integer(const Node& n) const {
        if (n.value->is_number_integer()) return n.value->get<std::int64_t>();
        const double v = number(n);
        if (v != std::floor(v) || std::abs(v) > 9.0e15) fail(n.pos, "'" + n.path + "' must be an integer");
        return static_cast<std::int64_t>(v);
    }

    std::uint64_t unsigned_integer(const Node& n) const {
        if (n.value->is_number_unsigned()) return n.value->get<std::uint64_t>();
        const std::int64_t v = integer(n);
        if (v < 0) fail(n.pos, "'" + n.path + "' must be non-negative");
        return static_cast<std::uint64_t>(v);
    }

    std::string string(const Node& n) const {
        if (!n.value->is_string()) fail(n.pos, "'" + n.path + "' must be a string");
        return n.value->get<std::string>();
    }

    Node element(const Node& arr, std::size_t i) const {
        return Node{&(*arr.value)[i], arr.pos, arr.path + "[" + std::to_string(i) + "]"};
    }

    std::size_t array_size(const Node& n) const {
        if (!n.value->is_array()) fail(n.pos, "'" + n.path + "' must be an array");
        return n.value->size();
    }

    Vector vector(const Node& n) const {
        const std::size_t k = array_size(n);
        Vector v(static_cast<Eigen::Index>(k));
        for (std::size_t i = 0; i < k; ++i) v[static_cast<Eigen::Index>(i)] = number(element(n, i));
        return v;
    }

    Matrix matrix(const Node& n) const {
        const std::size_t rows = array_size(n);
        if (rows == 0) fail(n.pos, "'" + n.path + "' must be non-empty");
        Matrix m;
        for (std::size_t i = 0; i < rows; ++i) {
            const Vector row = vector(element(n, i));
            if (i == 0) m.resize(static_cast<Eigen::Index>(rows), row.size());
            if (row.size() != m.cols()) fail(n.pos, "'" + n.path + "' has ragged rows");
            m.row(static_cast<Eigen::Index>(i)) = row.transpose();
        }
        return m;
    }

    SymMatrix sym(const Node& n) const {
        try {
            return SymMatrix(matrix(n));
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            fail(n.pos, "'" + n.path + "': " + e.what());
        }
    }

private:
    std::size_t find_key(const std::string& key, std::size_t from) const {
        const std::string quoted = "\"" + key + "\"";
        for (auto pos = text_.find(quoted, from); pos != std::string::npos; pos = text_.find(quoted, pos + 1)) {
            auto q = pos + quoted.size();
            while (q < text_.size() && std::isspace(static_cast<unsigned char>(text_[q]))) ++q;
            if (q < text_.size() && text_[q] == ':') return pos;
        }
        return from;
    }

    const std::string& text_;
};

/// Covariance given as a matrix or as {"kind": "identity" | "ar1", "d": k, "rho": r}.
inline SymMatrix parse_covariance(const ConfigReader& rd, const ConfigReader::Node& n) {
    if (n.value->is_array()) return rd.sym(n);
    rd.allow_only(n, {"kind", "d", "rho"});
    const std::string kind = rd.string(rd.require(n, "kind"));
    const auto dn = rd.require(n, "d");
    const std::int64_t d = rd.integer(dn);
    if (d < 1) rd.fail(dn.pos, "'" + dn.path + "' must be >= 1");
    if (kind == "identity") return SymMatrix::identity(d);
    if (kind == "ar1") {
        const auto rn = rd.require(n, "rho");
        const double rho = rd.number(rn);
        if (!(std::abs(rho) < 1.0)) rd.fail(rn.pos, "'" + rn.path + "' must lie in (-1, 1)");
        Matrix m(d, d);
        for (Eigen::Index i = 0; i < d; ++i)
            for (Eigen::Index j = 0; j < d; ++j) m(i, j) = std::pow(rho, std::abs(static_cast<double>(i - j)));
        return SymMatrix(m);
    }
    rd.fail(n.pos, "unknown covariance kind '" + kind + "'");
}

inline GeneratorSpec parse_generator(const ConfigReader& rd, const ConfigReader::Node& g) {
    if (!g.value->is_object()) rd.fail(g.pos, "'generator' must be an object");
    const std::string type = rd.string(rd.require(g, "type"));
    try {
        if (type == "iid_gaussian") {
            rd.allow_only(g, {"type", "sigma"});
            return IidGaussian{parse_covariance(rd, rd.require(g, "sigma"))};
        }
        if (type == "bolthausen") {
            rd.allow_only(g, {"type", "d"});
            const auto dn = rd.require(g, "d");
            const std::int64_t d = rd.integer(dn);
            if (d < 1) rd.fail(dn.pos, "'generator.d' must be >= 1");
            return Bolthausen{d};
        }
        if (type == "markov") {
            rd.allow_only(g, {"type", "transition", "initial", "g", "center"});
            const Matrix p = rd.matrix(rd.require(g, "transition"));
            const Eigen::Index m = p.rows();
            Vector nu = Vector::Constant(m, 1.0 / static_cast<double>(m));
            if (auto in = rd.get(g, "initial")) nu = rd.vector(*in);
            const auto gn = rd.require(g, "g");
            if (rd.array_size(gn) != static_cast<std::size_t>(m)) rd.fail(gn.pos, "'generator.g' must be m x m x d");
            std::vector<Vector> table;
            for (Eigen::Index s = 0; s < m; ++s) {
                const Matrix rows = rd.matrix(rd.element(gn, static_cast<std::size_t>(s)));
                if (rows.rows() != m) rd.fail(gn.pos, "'generator.g' must be m x m x d");
                for (Eigen::Index t = 0; t < m; ++t) table.push_back(rows.row(t).transpose());
            }
            bool center = true;
            if (auto c = rd.get(g, "center")) {
                if (!c->value->is_boolean()) rd.fail(c->pos, "'generator.center' must be a boolean");
                center = c->value->get<bool>();
            }
            if (center) table = markov_center(table, p);
            MarkovChainSpec chain(p, nu, std::move(table));
            stationary_and_gap(chain.transition());
            return MarkovInduced{std::move(chain)};
        }
        if (type == "gaussian_surrogate") {
            rd.allow_only(g, {"type", "cond_covs"});
            const auto cn = rd.require(g, "cond_covs");
            const std::size_t k = rd.array_size(cn);
            if (k == 0) rd.fail(cn.pos, "'generator.cond_covs' must be non-empty");
            GaussianSurrogate sur;
            for (std::size_t i = 0; i < k; ++i) sur.cond_covs.push_back(rd.sym(rd.element(cn, i)));
            for (const auto& v : sur.cond_covs) {
                if (v.dim() != sur.cond_covs.front().dim()) rd.fail(cn.pos, "cond_covs dimensions differ");
                SymMatrix::checked_psd(v.matrix());
            }
            return sur;
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        rd.fail(g.pos, std::string("generator: ") + e.what());
    }
    rd.fail(g.pos, "unknown generator type '" + type + "'");
}

}  // namespace detail

/// Parses and validates a JSON experiment config. Errors carry the line of
/// the offending key.
inline ExperimentConfig parse_config(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        const auto end = text.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(e.byte, text.size()));
        throw ConfigError("config line " + std::to_string(1 + std::count(text.begin(), end, '\n')) +
                          ": malformed JSON");
    }
    const detail::ConfigReader rd(text);
    const detail::ConfigReader::Node root{&doc, 0, "config"};
    rd.allow_only(root, {"schema_version", "generator", "n_grid", "replications", "d", "family", "qmc_budget",
                         "master_seed", "bounds", "path_mode", "budget_minutes", "output", "check"});

    ExperimentConfig cfg;
    cfg.raw = doc;
    const auto ver = rd.require(root, "schema_version");
    if (rd.integer(ver) != kSchemaVersion)
        rd.fail(ver.pos, "unsupported schema_version (expected " + std::to_string(kSchemaVersion) + ")");

    cfg.generator = detail::parse_generator(rd, rd.require(root, "generator"));
    cfg.d = generator_dim(cfg.generator);
    if (auto dn = rd.get(root, "d")) {
        if (rd.integer(*dn) != cfg.d) rd.fail(dn->pos, "'d' does not match the generator dimension");
    }

    const auto grid = rd.require(root, "n_grid");
    const std::size_t k = rd.array_size(grid);
    if (k == 0) rd.fail(grid.pos, "'n_grid' must be non-empty");
    for (std::size_t i = 0; i < k; ++i) {
        const std::int64_t n = rd.integer(rd.element(grid, i));
        if (n < 1) rd.fail(grid.pos, "'n_grid' entries must be >= 1");
        if (!cfg.n_grid.empty() && n <= cfg.n_grid.back()) rd.fail(grid.pos, "'n_grid' must be strictly increasing");
        if (std::holds_alternative<Bolthausen>(cfg.generator) && n < kBolthausenMinN)
            rd.fail(grid.pos, "bolthausen requires every n >= " + std::to_string(kBolthausenMinN));
        cfg.n_grid.push_back(n);
    }

    const auto reps = rd.require(root, "replications");
    cfg.replications = rd.integer(reps);
    if (cfg.replications < 100) rd.fail(reps.pos, "'replications' must be >= 100");

    if (auto fam = rd.get(root, "family")) {
        rd.allow_only(*fam, {"grid_points", "random_count"});
        if (auto g = rd.get(*fam, "grid_points")) {
            cfg.grid_points = static_cast<int>(rd.integer(*g));
            if (cfg.grid_points < 3) rd.fail(g->pos, "'family.grid_points' must be >= 3");
        }
        if (auto r = rd.get(*fam, "random_count")) {
            cfg.random_count = static_cast<int>(rd.integer(*r));
            if (cfg.random_count < 0) rd.fail(r->pos, "'family.random_count' must be >= 0");
        }
    }
    if (auto b = rd.get(root, "qmc_budget")) {
        cfg.qmc_budget = rd.integer(*b);
        if (cfg.qmc_budget < 1024) rd.fail(b->pos, "'qmc_budget' must be >= 1024");
    }
    if (auto s = rd.get(root, "master_seed")) cfg.master_seed = rd.unsigned_integer(*s);

    if (auto bn = rd.get(root, "bounds")) {
        rd.allow_only(*bn, {"c_t1", "c_t2", "c_t3", "c_t4", "c_kappa", "p", "q", "kappa_mode", "kappa"});
        auto positive = [&](const char* key, double& slot) {
            if (auto v = rd.get(*bn, key)) {
                slot = rd.number(*v);
                if (!(slot > 0.0)) rd.fail(v->pos, "'" + v->path + "' must be positive");
            }
        };
        positive("c_t1", cfg.bounds.c_t1);
        positive("c_t2", cfg.bounds.c_t2);
        positive("c_t3", cfg.bounds.c_t3);
        positive("c_t4", cfg.bounds.c_t4);
        positive("c_kappa", cfg.bounds.c_kappa);
        if (auto v = rd.get(*bn, "p")) {
            cfg.bounds.p = rd.number(*v);
            if (!(cfg.bounds.p > 1.0)) rd.fail(v->pos, "'bounds.p' must exceed 1");
        }
        if (auto v = rd.get(*bn, "q")) {
            cfg.bounds.q = rd.number(*v);
            if (!(*cfg.bounds.q > 0.0)) rd.fail(v->pos, "'bounds.q' must be positive");
        }
        if (auto v = rd.get(*bn, "kappa_mode")) {
            const std::string mode = rd.string(*v);
            if (mode == "proof") cfg.bounds.kappa_mode = KappaMode::proof;
            else if (mode == "statement") cfg.bounds.kappa_mode = KappaMode::statement;
            else rd.fail(v->pos, "'bounds.kappa_mode' must be \"proof\" or \"statement\"");
        }
        if (auto v = rd.get(*bn, "kappa")) {
            cfg.bounds.kappa = rd.number(*v);
            if (!(*cfg.bounds.kappa >= 0.0)) rd.fail(v->pos, "'bounds.kappa' must be >= 0");
        }
    }
    if (auto pm = rd.get(root, "path_mode")) {
        const std::string mode = rd.string(*pm);
        if (mode == "collapsed") cfg.path_mode = PathMode::Collapsed;
        else if (mode == "full") cfg.path_mode = PathMode::Full;
        else rd.fail(pm->pos, "'path_mode' must be \"collapsed\" or \"full\"");
    }
    if (auto bm = rd.get(root, "budget_minutes")) {
        cfg.budget_minutes = rd.number(*bm);
        if (!(cfg.budget_minutes > 0.0)) rd.fail(bm->pos, "'budget_minutes' must be positive");
    }
    if (auto o = rd.get(root, "output")) cfg.output = rd.string(*o);
    if (auto c = rd.get(root, "check")) {
        rd.allow_only(*c, {"quad_points", "rhs_scale", "oracle_rectangles", "oracle_dim", "oracle_draws"});
        if (auto v = rd.get(*c, "quad_points")) {
            cfg.check.quad_points = static_cast<int>(rd.integer(*v));
            if (cfg.check.quad_points < 1000) rd.fail(v->pos, "'check.quad_points' must be >= 1000");
        }
        if (auto v = rd.get(*c, "rhs_scale")) {
            cfg.check.rhs_scale = rd.number(*v);
            if (!(cfg.check.rhs_scale > 0.0)) rd.fail(v->pos, "'check.rhs_scale' must be positive");
        }
        if (auto v = rd.get(*c, "oracle_rectangles")) cfg.check.oracle_rectangles = static_cast<int>(rd.integer(*v));
        if (auto v = rd.get(*c, "oracle_dim")) cfg.check.oracle_dim = rd.integer(*v);
        if (auto v = rd.get(*c, "oracle_draws")) cfg.check.oracle_draws = rd.integer(*v);
        if (cfg.check.oracle_rectangles < 0 || cfg.check.oracle_dim < 1 || cfg.check.oracle_draws < 100)
            rd.fail(c->pos, "'check' oracle settings out of range");
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Moment statistics of each generator

namespace detail {

/// E[max(x, W)^3] with W the largest of k i.i.d. |N(0, 1)| (W = 0 for k = 0).
inline double max_cube_moment(double x, Eigen::Index k) {
    if (k == 0) return x * x * x;
    const auto kd = static_cast<double>(k);
    auto tail = [kd](double w) {
        const double below = -std::expm1(kd * std::log1p(-std::erfc(w / std::numbers::sqrt2)));
        return 3.0 * w * w * below;
    };
    const double upper = std::max(x, 0.0) + 40.0;
    return x * x * x + boost::math::quadrature::gauss_kronrod<double, 31>::integrate(tail, x, upper, 12, 1e-12);
}

inline double two_atom_cube(const TwoAtom& a, Eigen::Index others) {
    return a.p * max_cube_moment(std::abs(a.v_plus), others) +
           (1.0 - a.p) * max_cube_moment(std::abs(a.v_minus), others);
}

inline double gaussian_cube_mc(const SymMatrix& v, std::int64_t draws, std::uint64_t seed) {
    const RowMatrix x = sample_mvn(v, draws, seed);
    double acc = 0.0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) acc += std::pow(x.row(r).cwiseAbs().maxCoeff(), 3.0);
    return acc / static_cast<double>(draws);
}

}  // namespace detail

struct MomentProbe {
    MomentStats stats;
    bool deterministic_qv = true;  // Assumption 1 holds, so t1..t3 apply
    SymMatrix sigma_n = SymMatrix::identity(1);
};

/// Moment constants for n steps: alpha, beta from the conditional
/// covariances, M from the supremum of conditional third moments, gamma and
/// the third-moment mean from unconditional E||X_k||_inf^3.
inline MomentProbe probe_moments(const GeneratorSpec& spec, std::int64_t n, std::uint64_t seed) {
    constexpr std::int64_t kDraws = 100000;
    constexpr int kWindowProbes = 4096;
    MomentProbe out;
    out.sigma_n = generator_sigma_n(spec, n);
    const Eigen::Index d = generator_dim(spec);
    MomentStats& s = out.stats;
    s.n = n;
    s.d = d;
    const double ld = s.log_d();
    double sup_cond = 0.0, sup_uncond = 0.0;

    std::visit(
        [&](const auto& g) {
            using T = std::decay_t<decltype(g)>;
            if constexpr (std::is_same_v<T, IidGaussian> || std::is_same_v<T, GaussianSurrogate>) {
                std::vector<SymMatrix> table;
                if constexpr (std::is_same_v<T, IidGaussian>) table = {g.sigma};
                else table = g.cond_covs;
                double alpha = kInf, beta = 0.0, ratio = 0.0, mean = 0.0;
                std::vector<double> cube(table.size());
                for (std::size_t j = 0; j < table.size(); ++j) {
                    const auto st = spectral_stats(table[j]);
                    cube[j] = detail::gaussian_cube_mc(table[j], kDraws, child_seed(seed, j));
                    alpha = std::min(alpha, st.lambda_min);
                    beta = std::max(beta, st.d_max);
                    ratio = std::max(ratio, st.lambda_min > 0.0 ? cube[j] / st.lambda_min : kInf);
                    sup_cond = std::max(sup_cond, cube[j]);
                }
                for (std::int64_t k = 0; k < n; ++k) mean += cube[static_cast<std::size_t>(k) % table.size()];
                s.alpha = alpha;
                s.beta = beta;
                s.M = ratio;
                s.third_moment_mean = mean / static_cast<double>(n);
                sup_uncond = sup_cond;
            } else if constexpr (std::is_same_v<T, Bolthausen>) {
                const Eigen::Index others = d - 1;
                const double h_normal = detail::max_cube_moment(0.0, d);
                const double h_rad = detail::max_cube_moment(1.0, others);
                const auto w = bolthausen_window(n);
                // The window is entered with S ~ N(0, begin); walk probes through it.
                Rng rng = make_rng(seed);
                std::normal_distribution<double> normal;
                std::vector<double> sums(kWindowProbes);
                for (auto& v : sums) v = std::sqrt(static_cast<double>(w.begin)) * normal(rng);
                double window_total = 0.0;
                sup_cond = std::max(h_normal, h_rad);
                sup_uncond = h_normal;
                for (std::int64_t i = w.begin + 1; i <= w.end; ++i) {
                    const auto inside = std::get<TwoAtom>(bolthausen_step_law(i, n, 0.0));
                    const double h_in = detail::two_atom_cube(inside, others);
                    int hits = 0;
                    for (auto& v : sums) {
                        const StepLaw law = bolthausen_step_law(i, n, v);
                        if (std::get<TwoAtom>(law).p == inside.p) ++hits;
                        v += draw(law, rng, normal);
                    }
                    const double frac = static_cast<double>(hits) / kWindowProbes;
                    const double e = frac * h_in + (1.0 - frac) * h_rad;
                    window_total += e;
                    sup_cond = std::max(sup_cond, h_in);
                    sup_uncond = std::max(sup_uncond, e);
                }
                const auto wlen = static_cast<double>(w.end - w.begin);
                s.alpha = 1.0;
                s.beta = 1.0;
                s.M = sup_cond;
                s.third_moment_mean = ((static_cast<double>(n) - wlen) * h_normal + window_total) /
                                      static_cast<double>(n);
            } else {
                const MarkovChainSpec& chain = g.chain;
                const auto info = stationary_and_gap(chain.transition());
                double alpha = kInf, beta = 0.0, ratio = 0.0, mean = 0.0;
                for (Eigen::Index st = 0; st < chain.states(); ++st) {
                    double e = 0.0;
                    for (Eigen::Index nx = 0; nx < chain.states(); ++nx)
                        e += chain.transition()(st, nx) * std::pow(chain.f(st, nx).cwiseAbs().maxCoeff(), 3.0);
                    const auto sp = spectral_stats(chain.state_cov(st));
                    alpha = std::min(alpha, sp.lambda_min);
                    beta = std::max(beta, sp.d_max);
                    ratio = std::max(ratio, sp.lambda_min > 0.0 ? e / sp.lambda_min : kInf);
                    sup_cond = std::max(sup_cond, e);
                    mean += info.mu[st] * e;
                }
                s.alpha = alpha;
                s.beta = beta;
                s.M = ratio;
                s.third_moment_mean = mean;
                sup_uncond = sup_cond;
                out.deterministic_qv = false;
            }
        },
        spec);

    s.gamma = std::pow(sup_uncond, 2.0 / 3.0) / ld;
    const auto st = spectral_stats(out.sigma_n);
    s.lambda_min_sigma = st.lambda_min;
    s.d_min_sigma = st.d_min;
    s.d_max_sigma = st.d_max;
    return out;
}

// ---------------------------------------------------------------------------
// Commands

struct CommandResult {
    int exit_code = 0;
    std::string csv;
    json report = json::object();
    std::string text;
};

namespace detail {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
inline constexpr std::uint64_t kFamilyStream = 0x46414d49ULL;
inline constexpr std::uint64_t kReferenceStream = 0x52454653ULL;
inline constexpr std::uint64_t kProbeStream = 0x50524f42ULL;
inline constexpr std::uint64_t kPilotStream = 0x50494c54ULL;
inline constexpr std::uint64_t kAugmentStream = 0x4155474dULL;

inline std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

template <class F>
double guarded(F&& f) {
    try {
        return f();
    } catch (const InvalidInput&) {
        return kNaN;
    }
}

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline json fit_json(const std::vector<std::pair<double, double>>& pts) {
    if (pts.size() < 2) return nullptr;
    for (const auto& [n, v] : pts)
        if (!(v > 0.0) || !std::isfinite(v)) return nullptr;
    const RateFit f = rate_fit(pts);
    return {{"slope", f.slope}, {"intercept", f.intercept}, {"r_squared", f.r_squared}};
}

inline json estimate_json(const DkEstimate& e) {
    return {{"value", e.value},
            {"mc_error", e.mc_error},
            {"mvn_error", e.mvn_error},
            {"bonferroni_mc_bound", e.bonferroni_mc_bound},
            {"argmax_index", e.argmax_index},
            {"family_size", e.family_size}};
}

inline json stats_json(const MomentStats& s) {
    return {{"M", num(s.M)},
            {"alpha", num(s.alpha)},
            {"beta", num(s.beta)},
            {"gamma", num(s.gamma)},
            {"lambda_min_sigma", num(s.lambda_min_sigma)},
            {"d_min_sigma", num(s.d_min_sigma)},
            {"d_max_sigma", num(s.d_max_sigma)},
            {"third_moment_mean", num(s.third_moment_mean)}};
}

/// Rectangle family and Gaussian reference probabilities, reused while
/// Sigma_n is unchanged.
class ReferenceCache {
public:
    ReferenceCache(const ExperimentConfig& cfg, unsigned threads) : cfg_(cfg), threads_(threads) {}

    const std::pair<RectangleFamily, std::vector<ProbEstimate>>& get(const SymMatrix& sigma) {
        if (!entry_ || !(sigma == key_)) {
            RectangleFamily fam = build_family(sigma.dim(), sigma, cfg_.grid_points, cfg_.random_count,
                                               child_seed(cfg_.master_seed, kFamilyStream));
            auto refs = reference_probs(sigma, fam, cfg_.qmc_budget,
                                        child_seed(cfg_.master_seed, kReferenceStream), threads_);
            entry_.emplace(std::move(fam), std::move(refs));
            key_ = sigma;
        }
        return *entry_;
    }

private:
    const ExperimentConfig& cfg_;
    unsigned threads_;
    SymMatrix key_ = SymMatrix::identity(1);
    std::optional<std::pair<RectangleFamily, std::vector<ProbEstimate>>> entry_;
};

inline json base_report(const ExperimentConfig& cfg, const char* command, unsigned threads) {
    return {{"software", {{"name", "mbe"}, {"version", kVersion}}},
            {"command", command},
            {"config", cfg.raw},
            {"master_seed", cfg.master_seed},
            {"threads", threads}};
}

inline std::string kappa_mode_name(KappaMode m) { return m == KappaMode::proof ? "proof" : "statement"; }

struct MarkovKappa {
    double proof = kNaN;
    double statement = kNaN;
    double used = kNaN;
    StationaryInfo info;
    double rn_norm = 1.0;
};

inline MarkovKappa markov_kappa(const MarkovChainSpec& chain, const MomentStats& s, const BoundSettings& b,
                                std::int64_t n) {
    MarkovKappa k;
    k.info = stationary_and_gap(chain.transition());
    k.rn_norm = radon_nikodym_norm(chain.initial(), k.info.mu, b.p);
    const double q = b.q_value();
    k.proof = kappa_markov(s.beta, std::min(s.alpha, s.beta), k.info.gap, n, s.d, k.rn_norm, q, b.c_kappa);
    k.statement =
        kappa_markov_statement(s.beta, std::min(s.alpha, s.beta), k.info.gap, n, s.d, k.rn_norm, q, b.c_kappa);
    k.used = b.kappa ? *b.kappa : (b.kappa_mode == KappaMode::proof ? k.proof : k.statement);
    return k;
}

}  // namespace detail

/// Projected wall-clock seconds of a grid run, from 10-replication pilots.
inline double projected_seconds(const ExperimentConfig& cfg, unsigned threads, bool markov_paths) {
    constexpr std::int64_t kPilot = 10;
    const double scale = static_cast<double>(cfg.replications) / kPilot / std::max(1u, threads);
    double total = 0.0;
    for (std::int64_t n : cfg.n_grid) {
        auto t0 = detail::Clock::now();
        const std::uint64_t seed = child_seed(cfg.master_seed, detail::kPilotStream);
        RowMatrix pilot;
        if (markov_paths) {
            for (std::int64_t r = 0; r < kPilot; ++r) generate(cfg.generator, n, child_seed(seed, r));
            pilot = sample_terminal(cfg.generator, n, kPilot, seed, 1, PathMode::Collapsed);
        } else {
            pilot = sample_terminal(cfg.generator, n, kPilot, seed, 1, cfg.path_mode);
        }
        total += detail::seconds_since(t0) * scale;
        const SymMatrix sigma = generator_sigma_n(cfg.generator, n);
        const auto fam = build_family(cfg.d, sigma, cfg.grid_points, cfg.random_count, seed);
        t0 = detail::Clock::now();
        empirical_probs(pilot, fam);
        total += detail::seconds_since(t0) * scale;
        t0 = detail::Clock::now();
        const std::size_t probe = std::min<std::size_t>(2, fam.size());
        for (std::size_t i = 0; i < probe; ++i) rect_prob(sigma, fam.rectangles[i], cfg.qmc_budget, seed);
        total += detail::seconds_since(t0) * static_cast<double>(fam.size()) / static_cast<double>(probe) /
                 std::max(1u, threads);
    }
    return total;
}

inline void enforce_budget(const ExperimentConfig& cfg, unsigned threads, bool markov_paths) {
    const double minutes = projected_seconds(cfg, threads, markov_paths) / 60.0;
    if (minutes > cfg.budget_minutes) {
        std::ostringstream msg;
        msg << "projected runtime " << minutes << " min exceeds budget_minutes " << cfg.budget_minutes;
        throw ConfigError(msg.str());
    }
}

/// Terminal samples S_n / sqrt(n) for every n in the grid, one CSV row each.
inline CommandResult cmd_simulate(const ExperimentConfig& cfg, unsigned threads) {
    threads = resolve_threads(threads);
    enforce_budget(cfg, threads, false);
    CommandResult res;
    res.report = detail::base_report(cfg, "simulate", threads);
    std::string csv = "n,replication";
    for (Eigen::Index j = 0; j < cfg.d; ++j) csv += ",x" + std::to_string(j + 1);
    csv += "\n";
    json rows = json::array();
    for (std::int64_t n : cfg.n_grid) {
        const auto t0 = detail::Clock::now();
        const RowMatrix x = sample_terminal(cfg.generator, n, cfg.replications, cfg.master_seed, threads, cfg.path_mode);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            csv += std::to_string(n) + "," + std::to_string(r);
            for (Eigen::Index j = 0; j < x.cols(); ++j) csv += "," + detail::fmt(x(r, j));
            csv += "\n";
        }
        const Vector mean = x.colwise().mean().transpose();
        rows.push_back({{"n", n},
                        {"R", cfg.replications},
                        {"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
                        {"wall_time", detail::seconds_since(t0)}});
    }
    res.csv = std::move(csv);
    res.report["rows"] = rows;
    return res;
}

namespace detail {

inline CommandResult run_distance_grid(const ExperimentConfig& cfg, unsigned threads, bool with_bounds,
                                       const char* command) {
    threads = resolve_threads(threads);
    enforce_budget(cfg, threads, false);
    CommandResult res;
    res.report = base_report(cfg, command, threads);
    std::string csv = std::string(kCsvHeader) + "\n";
    ReferenceCache cache(cfg, threads);
    json rows = json::array();
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    const bool markov = std::holds_alternative<MarkovInduced>(cfg.generator);

    for (std::int64_t n : cfg.n_grid) {
        const auto t0 = Clock::now();
        const SymMatrix sigma = generator_sigma_n(cfg.generator, n);
        const auto& [fam, refs] = cache.get(sigma);
        const RowMatrix x = sample_terminal(cfg.generator, n, cfg.replications, cfg.master_seed, threads, cfg.path_mode);
        const DkEstimate est = estimate_dk(x, fam, refs, threads);

        std::map<std::string, double> b = {{"bound_t1", kNaN}, {"bound_t2", kNaN}, {"bound_t3a", kNaN},
                                           {"bound_t3b", kNaN}, {"bound_t4", kNaN}};
        json extra = json::object();
        if (with_bounds) {
            const MomentProbe probe = probe_moments(cfg.generator, n, child_seed(cfg.master_seed, kProbeStream));
            const MomentStats& s = probe.stats;
            const BoundSettings& bs = cfg.bounds;
            if (probe.deterministic_qv) {
                b["bound_t1"] = guarded([&] { return bound_t1(s, bs.c_t1).value; });
                b["bound_t2"] = guarded([&] { return bound_t2(s, bs.c_t2).value; });
                b["bound_t3a"] = guarded([&] { return bound_t3(s, T3Variant::without_alpha, bs.c_t3).value; });
                b["bound_t3b"] = guarded([&] { return bound_t3(s, T3Variant::with_alpha, bs.c_t3).value; });
                extra["Delta"] = num(guarded([&] { return t2_delta(s); }));
            }
            if (markov) {
                const auto& chain = std::get<MarkovInduced>(cfg.generator).chain;
                const MarkovKappa k = markov_kappa(chain, s, bs, n);
                const double inv = op_norm(SymMatrix(Matrix(sigma.matrix().inverse())));
                b["bound_t4"] = guarded([&] { return bound_t4(s, k.used, inv, bs.c_t4).value; });
                extra["kappa"] = num(k.used);
            }
            extra["moment_stats"] = stats_json(s);
        }

        csv += std::to_string(n) + "," + std::to_string(cfg.d) + "," + std::to_string(cfg.replications) + "," +
               fmt(est.value) + "," + fmt(est.mc_error) + "," + fmt(est.mvn_error);
        for (const char* key : {"bound_t1", "bound_t2", "bound_t3a", "bound_t3b", "bound_t4"}) csv += "," + fmt(b[key]);
        csv += "," + std::to_string(cfg.master_seed) + "\n";

        json row = {{"n", n}, {"d", cfg.d}, {"R", cfg.replications}, {"dk", estimate_json(est)}};
        for (const auto& [key, v] : b) row[key] = num(v);
        row.update(extra);
        row["wall_time"] = seconds_since(t0);
        rows.push_back(row);
        series["dk_value"].emplace_back(static_cast<double>(n), est.value);
        for (const auto& [key, v] : b) series[key].emplace_back(static_cast<double>(n), v);
    }
    res.csv = std::move(csv);
    res.report["rows"] = rows;
    if (with_bounds) {
        json fits = json::object();
        for (const auto& [key, pts] : series) fits[key] = fit_json(pts);
        res.report["rate_fits"] = fits;
    }
    return res;
}

}  // namespace detail

/// Kolmogorov distance per n, without bounds.
inline CommandResult cmd_distance(const ExperimentConfig& cfg, unsigned threads) {
    return detail::run_distance_grid(cfg, threads, false, "distance");
}

/// Distance, applicable bounds and log-log rate fits per series.
inline CommandResult cmd_ratefit(const ExperimentConfig& cfg, unsigned threads) {
    return detail::run_distance_grid(cfg, threads, true, "ratefit");
}

struct MarkovCell {
    std::vector<double> sigma_dev;     // ||Sigma_bar_n - Sigma|| per replication
    std::vector<std::int64_t> tau;
    double qv_residual_max = 0.0;
    RowMatrix raw;
    RowMatrix augmented;
};

/// Per-replication quantities of the Markov pipeline at a single n.
inline MarkovCell markov_cell(const MarkovChainSpec& chain, const SymMatrix& sigma, double kappa, std::int64_t n,
                              std::int64_t replications, std::uint64_t seed, unsigned threads) {
    const Eigen::Index d = chain.dim();
    MarkovCell cell;
    cell.sigma_dev.resize(static_cast<std::size_t>(replications));
    cell.tau.resize(static_cast<std::size_t>(replications));
    cell.raw.resize(replications, d);
    cell.augmented.resize(replications, d);
    std::vector<double> residual(static_cast<std::size_t>(replications));
    const double root_n = std::sqrt(static_cast<double>(n));
    const GeneratorSpec spec = MarkovInduced{chain};
    parallel_for(static_cast<std::size_t>(replications), resolve_threads(threads), [&](std::size_t r) {
        const std::uint64_t s = child_seed(seed, static_cast<std::uint64_t>(n), r);
        const MdsPath path = generate(spec, n, s);
        const Matrix avg = path.cond_covs->partial_sum(static_cast<std::size_t>(n)).matrix() / static_cast<double>(n);
        cell.sigma_dev[r] = op_norm(SymMatrix(Matrix(avg - sigma.matrix())));
        const AugmentResult aug = yurinskii_augment(path, sigma, kappa, child_seed(s, detail::kAugmentStream));
        cell.tau[r] = aug.tau;
        const Matrix qv = aug.path.cond_covs->partial_sum(static_cast<std::size_t>(aug.path.n)).matrix();
        residual[r] = (qv - aug.target.matrix()).cwiseAbs().maxCoeff();
        const auto ri = static_cast<Eigen::Index>(r);
        cell.raw.row(ri) = path.terminal_sum().transpose() / root_n;
        cell.augmented.row(ri) = aug.path.terminal_sum().transpose() / root_n;
    });
    cell.qv_residual_max = *std::max_element(residual.begin(), residual.end());
    return cell;
}

inline double quantile(std::vector<double> v, double level) {
    if (v.empty()) throw InvalidInput("quantile: empty sample");
    std::sort(v.begin(), v.end());
    const double pos = level * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Markov-chain pipeline: kappa, concentration of Sigma_bar_n, Yurinskii
/// augmentation and the Markov bound.
inline CommandResult cmd_markov(const ExperimentConfig& cfg, unsigned threads) {
    if (!std::holds_alternative<MarkovInduced>(cfg.generator))
        throw ConfigError("markov: generator.type must be \"markov\"");
    threads = resolve_threads(threads);
    enforce_budget(cfg, threads, true);
    const MarkovChainSpec& chain = std::get<MarkovInduced>(cfg.generator).chain;
    const SymMatrix sigma = markov_sigma(chain);
    CommandResult res;
    res.report = detail::base_report(cfg, "markov", threads);
    std::string csv = std::string(kCsvHeader) + "\n";
    detail::ReferenceCache cache(cfg, threads);
    const auto& [fam, refs] = cache.get(sigma);
    const double inv_norm = detail::guarded([&] { return op_norm(SymMatrix(Matrix(sigma.matrix().inverse()))); });
    json rows = json::array();
    std::vector<std::pair<double, double>> p90_series, t4_series, dk_series;

    for (std::int64_t n : cfg.n_grid) {
        const auto t0 = detail::Clock::now();
        const MomentProbe probe = probe_moments(cfg.generator, n, child_seed(cfg.master_seed, detail::kProbeStream));
        const detail::MarkovKappa k = detail::markov_kappa(chain, probe.stats, cfg.bounds, n);
        const MarkovCell cell = markov_cell(chain, sigma, k.used, n, cfg.replications, cfg.master_seed, threads);
        const DkEstimate raw = estimate_dk(cell.raw, fam, refs, threads);
        const DkEstimate aug = estimate_dk(cell.augmented, fam, refs, threads);
        const double t4 = detail::guarded([&] { return bound_t4(probe.stats, k.used, inv_norm, cfg.bounds.c_t4).value; });

        const auto exceed = std::count_if(cell.sigma_dev.begin(), cell.sigma_dev.end(),
                                          [&](double v) { return v > k.used; });
        const auto full = std::count(cell.tau.begin(), cell.tau.end(), n);
        double tau_mean = 0.0;
        for (auto t : cell.tau) tau_mean += static_cast<double>(t);
        tau_mean /= static_cast<double>(cell.tau.size());
        const double p90 = quantile(cell.sigma_dev, 0.9);
        const auto r = static_cast<double>(cfg.replications);

        csv += std::to_string(n) + "," + std::to_string(cfg.d) + "," + std::to_string(cfg.replications) + "," +
               detail::fmt(raw.value) + "," + detail::fmt(raw.mc_error) + "," + detail::fmt(raw.mvn_error) +
               ",nan,nan,nan,nan," + detail::fmt(t4) + "," + std::to_string(cfg.master_seed) + "\n";

        rows.push_back(
            {{"n", n},
             {"kappa", detail::num(k.used)},
             {"kappa_proof", detail::num(k.proof)},
             {"kappa_statement", detail::num(k.statement)},
             {"kappa_mode", cfg.bounds.kappa ? "fixed" : detail::kappa_mode_name(cfg.bounds.kappa_mode)},
             {"gap", k.info.gap},
             {"reversible", k.info.reversible},
             {"radon_nikodym_norm", k.rn_norm},
             {"sigma_deviation",
              {{"p50", quantile(cell.sigma_dev, 0.5)},
               {"p90", p90},
               {"max", *std::max_element(cell.sigma_dev.begin(), cell.sigma_dev.end())}}},
             {"kappa_exceedance", static_cast<double>(exceed) / r},
             {"tau",
              {{"min", *std::min_element(cell.tau.begin(), cell.tau.end())},
               {"mean", tau_mean},
               {"max", *std::max_element(cell.tau.begin(), cell.tau.end())},
               {"fraction_untruncated", static_cast<double>(full) / r}}},
             {"qv_residual_max", cell.qv_residual_max},
             {"dk_raw", detail::estimate_json(raw)},
             {"dk_augmented", detail::estimate_json(aug)},
             {"bound_t4", detail::num(t4)},
             {"moment_stats", detail::stats_json(probe.stats)},
             {"wall_time", detail::seconds_since(t0)}});
        p90_series.emplace_back(static_cast<double>(n), p90);
        t4_series.emplace_back(static_cast<double>(n), t4);
        dk_series.emplace_back(static_cast<double>(n), raw.value);
    }
    res.csv = std::move(csv);
    res.report["rows"] = rows;
    res.report["rate_fits"] = {{"sigma_deviation_p90", detail::fit_json(p90_series)},
                               {"bound_t4", detail::fit_json(t4_series)},
                               {"dk_value", detail::fit_json(dk_series)}};
    return res;
}

/// Integral-lemma sweep, auxiliary-bound spot checks and Gaussian-engine
/// cross-oracles. Exit code 1 on the first failure, which is printed.
inline CommandResult cmd_check(const ExperimentConfig& cfg, unsigned threads) {
    threads = resolve_threads(threads);
    CommandResult res;
    res.report = detail::base_report(cfg, "check", threads);
    std::ostringstream out;
    json cases = json::array();
    std::string first_failure;
    auto record = [&](const std::string& name, bool ok, const std::string& detail_text) {
        cases.push_back({{"case", name}, {"holds", ok}, {"detail", detail_text}});
        out << (ok ? "PASS " : "FAIL ") << name << " " << detail_text << "\n";
        if (!ok && first_failure.empty()) first_failure = name + " " + detail_text;
    };
    auto g = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.6g", v);
        return std::string(buf);
    };

    const CheckSettings& cs = cfg.check;
    {
        const auto w = stein_integral_check(0.5, 1.0, 1.0, cs.quad_points, cs.rhs_scale);
        record("stein t=0.5 eps1=1 epsk=1", w.holds, "lhs " + g(w.lhs) + " rhs " + g(w.rhs));
    }
    int swept = 0, held = 0;
    for (const auto& tr : stein_sweep_grid()) {
        ++swept;
        std::string name = "stein t=" + g(tr.t) + " eps1=" + g(tr.eps1) + " epsk=" + g(tr.epsk);
        try {
            const auto r = stein_integral_check(tr.t, tr.eps1, tr.epsk, cs.quad_points, cs.rhs_scale);
            if (r.holds) ++held;
            else record(name, false, "lhs " + g(r.lhs) + " > rhs " + g(r.rhs));
        } catch (const QuadratureFailure& e) {
            record(name, false, e.what());
        }
    }
    record("stein sweep", held == swept, std::to_string(held) + "/" + std::to_string(swept) + " hold");

    const SymMatrix id2 = SymMatrix::identity(2);
    record("aux gaussian_comparison(I, I) = 0", auxiliary_bound(GaussianComparison{id2, id2}) == 0.0, "");
    record("aux gaussian_max_moment(2, 1, 1) = 1", auxiliary_bound(GaussianMaxMoment{2.0, 1.0, 1.0}) == 1.0, "");
    {
        const double v = auxiliary_bound(GaussianComparison{id2, SymMatrix{{1, 0.1}, {0.1, 1}}});
        record("aux gaussian_comparison rho=0.1", std::abs(v - 0.1 * std::log(10.0)) < 1e-12, "value " + g(v));
    }

    {
        const SymMatrix s{{1, 0.5}, {0.5, 1}};
        const auto p = rect_prob(s, Rectangle(Vector::Constant(2, -kInf), Vector::Zero(2)), cfg.qmc_budget,
                                 child_seed(cfg.master_seed, 1));
        record("mvn orthant rho=0.5", std::abs(p.value - 1.0 / 3.0) <= 1e-3, "value " + g(p.value));
    }
    {
        const auto p = rect_prob(SymMatrix::identity(3), Rectangle::cube(3, -1.0, 1.0), cfg.qmc_budget,
                                 child_seed(cfg.master_seed, 2));
        const double exact = std::pow(norm_cdf(1.0) - norm_cdf(-1.0), 3.0);
        record("mvn cube [-1,1]^3", std::abs(p.value - exact) <= 1e-3, "value " + g(p.value));
    }
    if (cs.oracle_rectangles > 0) {
        Matrix m(cs.oracle_dim, cs.oracle_dim);
        for (Eigen::Index i = 0; i < cs.oracle_dim; ++i)
            for (Eigen::Index j = 0; j < cs.oracle_dim; ++j) m(i, j) = std::pow(0.5, std::abs(static_cast<double>(i - j)));
        const SymMatrix s(m);
        const RowMatrix x = sample_mvn(s, cs.oracle_draws, child_seed(cfg.master_seed, 3), threads);
        const auto fam = build_family(cs.oracle_dim, s, 3, cs.oracle_rectangles, child_seed(cfg.master_seed, 4));
        double worst = 0.0;
        for (std::size_t i = 6; i < fam.size(); ++i) {
            const auto p = rect_prob(s, fam.rectangles[i], cfg.qmc_budget, child_seed(cfg.master_seed, 5, i));
            worst = std::max(worst, std::abs(p.value - empirical_rect_prob(x, fam.rectangles[i])));
        }
        record("mvn vs empirical on random rectangles", worst <= 0.01, "max gap " + g(worst));
    }

    res.exit_code = first_failure.empty() ? 0 : 1;
    if (!first_failure.empty()) out << "first failure: " << first_failure << "\n";
    res.text = out.str();
    res.report["cases"] = cases;
    res.report["all_hold"] = first_failure.empty();
    return res;
}

}  // namespace mbe
