#pragma once

#include <cmath>
#include <algorithm>
#include <complex>
#include <functional>
#include <numbers>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mbe/error.hpp"
#include "mbe/gaussian.hpp"
#include "mbe/parallel.hpp"
#include "mbe/rng.hpp"
#include "mbe/spectral.hpp"

namespace mbe {

/// Per-step conditional covariances stored as a palette: step k uses
/// table[index[k]].
struct CondCovs {
    std::vector<SymMatrix> table;
    std::vector<std::uint32_t> index;

    const SymMatrix& at(std::size_t k) const { return table[index[k]]; }
    std::size_t size() const noexcept { return index.size(); }

    /// Sum of V_1 .. V_t.
    SymMatrix partial_sum(std::size_t t) const {
        std::vector<std::int64_t> counts(table.size(), 0);
        for (std::size_t k = 0; k < t; ++k) ++counts[index[k]];
        Matrix acc = Matrix::Zero(table.front().dim(), table.front().dim());
        for (std::size_t j = 0; j < table.size(); ++j)
            if (counts[j] != 0) acc += static_cast<double>(counts[j]) * table[j].matrix();
        return SymMatrix(std::move(acc));
    }
};

struct MdsPath {
    std::int64_t n = 0;
    Eigen::Index d = 0;
    RowMatrix increments;  // n x d, row k-1 holds X_k
    std::optional<CondCovs> cond_covs;
    std::string generator_tag;
    std::uint64_t seed = 0;

    Vector terminal_sum() const { return increments.colwise().sum().transpose(); }
};

// ---------------------------------------------------------------------------
// Markov chains

class MarkovChainSpec {
public:
    MarkovChainSpec() = default;

    /// Validates row-stochastic P, a distribution nu, and the centering of f.
    /// f_table is indexed [s * m + s'].
    MarkovChainSpec(Matrix transition, Vector initial, std::vector<Vector> f_table)
        : p_(std::move(transition)), nu_(std::move(initial)), f_(std::move(f_table)) {
        const Eigen::Index m = p_.rows();
        if (m < 1 || p_.cols() != m) throw InvalidSpec("markov: P must be square and nonempty");
        if (nu_.size() != m) throw InvalidSpec("markov: nu has wrong length");
        if (static_cast<Eigen::Index>(f_.size()) != m * m)
            throw InvalidSpec("markov: f_table must have m*m entries");
        for (Eigen::Index s = 0; s < m; ++s) {
            if ((p_.row(s).array() < 0.0).any()) throw InvalidSpec("markov: negative entry in P");
            if (std::abs(p_.row(s).sum() - 1.0) > 1e-12)
                throw InvalidSpec("markov: row " + std::to_string(s) + " of P does not sum to 1");
        }
        if ((nu_.array() < 0.0).any() || std::abs(nu_.sum() - 1.0) > 1e-12)
            throw InvalidSpec("markov: nu is not a probability vector");
        const Eigen::Index d = f_.front().size();
        if (d < 1) throw InvalidSpec("markov: f has zero dimension");
        double scale = 0.0;
        for (const auto& v : f_) {
            if (v.size() != d) throw InvalidSpec("markov: ragged f_table");
            scale = std::max(scale, v.cwiseAbs().maxCoeff());
        }
        for (Eigen::Index s = 0; s < m; ++s) {
            Vector mean = Vector::Zero(d);
            for (Eigen::Index t = 0; t < m; ++t) mean += p_(s, t) * f(s, t);
            if (mean.cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, scale))
                throw InvalidSpec("markov: f is not centered at state " + std::to_string(s));
        }
    }

    Eigen::Index states() const noexcept { return p_.rows(); }
    Eigen::Index dim() const noexcept { return f_.front().size(); }
    const Matrix& transition() const noexcept { return p_; }
    const Vector& initial() const noexcept { return nu_; }
    const Vector& f(Eigen::Index s, Eigen::Index t) const {
        return f_[static_cast<std::size_t>(s * p_.rows() + t)];
    }
    const std::vector<Vector>& f_table() const noexcept { return f_; }

    /// E_{s'~P(.|s)} f f^T.
    SymMatrix state_cov(Eigen::Index s) const {
        Matrix acc = Matrix::Zero(dim(), dim());
        for (Eigen::Index t = 0; t < states(); ++t) acc += p_(s, t) * f(s, t) * f(s, t).transpose();
        return SymMatrix::checked_psd(std::move(acc));
    }

    /// E_{s'~P(.|s)} ||f||_inf^3.
    double state_third_moment(Eigen::Index s) const {
        double acc = 0.0;
        for (Eigen::Index t = 0; t < states(); ++t) {
            const double r = f(s, t).cwiseAbs().maxCoeff();
            acc += p_(s, t) * r * r * r;
        }
        return acc;
    }

private:
    Matrix p_;
    Vector nu_;
    std::vector<Vector> f_;
};

/// f[s][s'] = g[s][s'] - sum_{s''} P[s][s''] g[s][s''].
inline std::vector<Vector> markov_center(const std::vector<Vector>& g, const Matrix& p) {
    const Eigen::Index m = p.rows();
    if (static_cast<Eigen::Index>(g.size()) != m * m)
        throw InvalidInput("markov_center: g must have m*m entries");
    std::vector<Vector> f(g.size());
    for (Eigen::Index s = 0; s < m; ++s) {
        Vector mean = Vector::Zero(g.front().size());
        for (Eigen::Index t = 0; t < m; ++t) mean += p(s, t) * g[static_cast<std::size_t>(s * m + t)];
        for (Eigen::Index t = 0; t < m; ++t) {
            const auto k = static_cast<std::size_t>(s * m + t);
            f[k] = g[k] - mean;
        }
    }
    return f;
}

struct StationaryInfo {
    Vector mu;
    double gap = 0.0;
    double second_modulus = 0.0;
    bool reversible = false;
    std::string warning;
};

/// Stationary distribution and spectral gap 1 - |lambda_2| of P.
inline StationaryInfo stationary_and_gap(const Matrix& p) {
    const Eigen::Index m = p.rows();
    if (m < 1 || p.cols() != m) throw InvalidInput("stationary_and_gap: P must be square");
    StationaryInfo info;
    if (m == 1) {
        info.mu = Vector::Ones(1);
        info.gap = 1.0;
        info.reversible = true;
        return info;
    }
    Eigen::EigenSolver<Matrix> es(p, false);
    std::vector<double> moduli;
    int unit = 0;
    for (Eigen::Index i = 0; i < m; ++i) {
        const std::complex<double> ev = es.eigenvalues()[i];
        if (std::abs(ev - 1.0) < 1e-9) ++unit;
        moduli.push_back(std::abs(ev));
    }
    if (unit != 1)
        throw NoUniqueStationary("P has " + std::to_string(unit) + " unit eigenvalues");
    std::sort(moduli.begin(), moduli.end(), std::greater<>());
    info.second_modulus = moduli[1];
    if (info.second_modulus > 1.0 - 1e-9)
        throw NoUniqueStationary("P is periodic: second eigenvalue modulus is 1");
    info.gap = 1.0 - info.second_modulus;

    // (P^T - I) mu = 0 with the last equation replaced by sum(mu) = 1.
    Matrix a = p.transpose() - Matrix::Identity(m, m);
    a.row(m - 1).setOnes();
    Vector rhs = Vector::Zero(m);
    rhs[m - 1] = 1.0;
    info.mu = a.fullPivLu().solve(rhs);
    // Two rounds of power-iteration polish.
    for (int it = 0; it < 2; ++it) {
        info.mu = (info.mu.transpose() * p).transpose();
        info.mu /= info.mu.sum();
    }
    if ((info.mu.array() < -1e-12).any())
        throw NoUniqueStationary("stationary solve produced negative mass");
    info.mu = info.mu.cwiseMax(0.0);
    info.mu /= info.mu.sum();

    info.reversible = true;
    for (Eigen::Index i = 0; i < m && info.reversible; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            if (std::abs(info.mu[i] * p(i, j) - info.mu[j] * p(j, i)) > 1e-10) {
                info.reversible = false;
                break;
            }
    if (!info.reversible)
        info.warning = "chain is not reversible; gap reported as 1 - |lambda_2(P)|";
    return info;
}

/// Sigma = E_{s~mu, s'~P(.|s)} f f^T.
inline SymMatrix markov_sigma(const MarkovChainSpec& chain) {
    const StationaryInfo info = stationary_and_gap(chain.transition());
    Matrix acc = Matrix::Zero(chain.dim(), chain.dim());
    for (Eigen::Index s = 0; s < chain.states(); ++s)
        acc += info.mu[s] * chain.state_cov(s).matrix();
    return SymMatrix::checked_psd(std::move(acc));
}

/// ||d nu / d mu||_{mu,p}; p = +inf gives the essential supremum.
inline double radon_nikodym_norm(const Vector& nu, const Vector& mu, double p) {
    if (nu.size() != mu.size()) throw InvalidInput("radon_nikodym_norm: size mismatch");
    if (!(p > 1.0)) throw InvalidInput("radon_nikodym_norm: p must exceed 1");
    double sup = 0.0, acc = 0.0;
    for (Eigen::Index i = 0; i < nu.size(); ++i) {
        if (mu[i] <= 0.0) {
            if (nu[i] > 0.0) throw InvalidInput("nu is not absolutely continuous w.r.t. mu");
            continue;
        }
        const double ratio = nu[i] / mu[i];
        sup = std::max(sup, ratio);
        if (std::isfinite(p)) acc += mu[i] * std::pow(ratio, p);
    }
    return std::isfinite(p) ? std::pow(acc, 1.0 / p) : sup;
}

// ---------------------------------------------------------------------------
// Generator specifications

struct IidGaussian {
    SymMatrix sigma;
};

/// Lower-bound triangular array: coordinate 1 follows the windowed two-atom
/// law, coordinates 2..d are i.i.d. N(0, 1).
struct Bolthausen {
    Eigen::Index d = 1;
};

struct MarkovInduced {
    MarkovChainSpec chain;
};

/// Y_k = V_k^{1/2} Z_k with the listed V's applied cyclically.
struct GaussianSurrogate {
    std::vector<SymMatrix> cond_covs;
};

using GeneratorSpec = std::variant<IidGaussian, Bolthausen, MarkovInduced, GaussianSurrogate>;

inline std::string generator_tag(const GeneratorSpec& spec) {
    return std::visit(
        [](const auto& g) -> std::string {
            using T = std::decay_t<decltype(g)>;
            if constexpr (std::is_same_v<T, IidGaussian>) return "iid_gaussian";
            else if constexpr (std::is_same_v<T, Bolthausen>) return "bolthausen";
            else if constexpr (std::is_same_v<T, MarkovInduced>) return "markov";
            else return "gaussian_surrogate";
        },
        spec);
}

inline Eigen::Index generator_dim(const GeneratorSpec& spec) {
    return std::visit(
        [](const auto& g) -> Eigen::Index {
            using T = std::decay_t<decltype(g)>;
            if constexpr (std::is_same_v<T, IidGaussian>) return g.sigma.dim();
            else if constexpr (std::is_same_v<T, Bolthausen>) return g.d;
            else if constexpr (std::is_same_v<T, MarkovInduced>) return g.chain.dim();
            else return g.cond_covs.front().dim();
        },
        spec);
}

// ---------------------------------------------------------------------------
// Bolthausen step law

inline constexpr std::int64_t kBolthausenMinN = 1024;

struct StandardNormal {};

/// p * delta_{v_plus} + (1 - p) * delta_{v_minus}.
struct TwoAtom {
    double p = 0.5;
    double v_plus = 1.0;
    double v_minus = -1.0;
};

using StepLaw = std::variant<StandardNormal, TwoAtom>;

struct BolthausenWindow {
    std::int64_t begin = 0;  // exclusive: floor(n - 2 sqrt n)
    std::int64_t end = 0;    // inclusive: floor(n - sqrt n)
};

inline BolthausenWindow bolthausen_window(std::int64_t n) {
    const double root = std::sqrt(static_cast<double>(n));
    return {static_cast<std::int64_t>(std::floor(static_cast<double>(n) - 2.0 * root)),
            static_cast<std::int64_t>(std::floor(static_cast<double>(n) - root))};
}

inline double bolthausen_lambda(std::int64_t i, std::int64_t n) {
    return std::sqrt(1.0 - static_cast<double>(i) / static_cast<double>(n));
}

/// Conditional law of X^1_{ni} given S_{n,i-1} = s_partial.
inline StepLaw bolthausen_step_law(std::int64_t i, std::int64_t n, double s_partial) {
    if (n < kBolthausenMinN)
        throw InvalidRegime("bolthausen: n must be >= " + std::to_string(kBolthausenMinN));
    if (i < 1 || i > n) throw InvalidInput("bolthausen: step index out of range");
    const BolthausenWindow w = bolthausen_window(n);
    if (i <= w.begin || i > w.end) return StandardNormal{};
    const double lambda = bolthausen_lambda(i, n);
    if (std::abs(s_partial) > std::sqrt(static_cast<double>(n)) * lambda / 4.0)
        return TwoAtom{0.5, 1.0, -1.0};
    const double p = 16.0 * lambda * lambda;
    if (!(p < 1.0)) throw InvalidRegime("bolthausen: 16 lambda^2 >= 1 inside the window");
    const double rho = std::sqrt((1.0 - p) / p);
    return TwoAtom{p, rho, -1.0 / rho};
}

struct LawMoments {
    double mean = 0.0;
    double variance = 0.0;
    double abs_third = 0.0;
};

inline LawMoments law_moments(const StepLaw& law) {
    if (std::holds_alternative<StandardNormal>(law))
        return {0.0, 1.0, 2.0 * std::sqrt(2.0 / std::numbers::pi)};
    const auto& a = std::get<TwoAtom>(law);
    const double q = 1.0 - a.p;
    const double mean = a.p * a.v_plus + q * a.v_minus;
    const double second = a.p * a.v_plus * a.v_plus + q * a.v_minus * a.v_minus;
    const double third =
        a.p * std::pow(std::abs(a.v_plus), 3) + q * std::pow(std::abs(a.v_minus), 3);
    return {mean, second - mean * mean, third};
}

inline double draw(const StepLaw& law, Rng& rng, std::normal_distribution<double>& normal) {
    if (std::holds_alternative<StandardNormal>(law)) return normal(rng);
    const auto& a = std::get<TwoAtom>(law);
    return uniform01(rng) < a.p ? a.v_plus : a.v_minus;
}

// ---------------------------------------------------------------------------
// Path generation

namespace detail {

inline Eigen::Index sample_row(const Matrix& p, Eigen::Index s, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    const Eigen::Index m = p.cols();
    for (Eigen::Index t = 0; t < m - 1; ++t) {
        acc += p(s, t);
        if (u < acc) return t;
    }
    return m - 1;
}

inline Eigen::Index sample_dist(const Vector& nu, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    for (Eigen::Index t = 0; t < nu.size() - 1; ++t) {
        acc += nu[t];
        if (u < acc) return t;
    }
    return nu.size() - 1;
}

inline void check_bolthausen(const Bolthausen& b, std::int64_t n) {
    if (b.d < 1) throw InvalidSpec("bolthausen: d must be >= 1");
    if (n < kBolthausenMinN)
        throw InvalidRegime("bolthausen: n must be >= " + std::to_string(kBolthausenMinN));
}

inline void check_surrogate(const GaussianSurrogate& g) {
    if (g.cond_covs.empty()) throw InvalidSpec("gaussian_surrogate: empty covariance list");
    for (const auto& v : g.cond_covs) {
        if (v.dim() != g.cond_covs.front().dim())
            throw InvalidSpec("gaussian_surrogate: covariances differ in dimension");
        if (!v.psd()) SymMatrix::checked_psd(v.matrix());
    }
}

}  // namespace detail

/// Simulates one martingale difference path. Deterministic in (spec, n, seed).
inline MdsPath generate(const GeneratorSpec& spec, std::int64_t n, std::uint64_t seed) {
    if (n < 1) throw InvalidInput("generate: n must be >= 1");
    MdsPath path;
    path.n = n;
    path.d = generator_dim(spec);
    path.seed = seed;
    path.generator_tag = generator_tag(spec);
    path.increments.resize(n, path.d);
    Rng rng = make_rng(seed);
    std::normal_distribution<double> normal;
    const auto un = static_cast<std::size_t>(n);

    std::visit(
        [&](const auto& g) {
            using T = std::decay_t<decltype(g)>;
            CondCovs cc;
            if constexpr (std::is_same_v<T, IidGaussian>) {
                const Matrix root = psd_sqrt(g.sigma).matrix();
                Vector z(path.d);
                for (std::int64_t k = 0; k < n; ++k) {
                    for (Eigen::Index j = 0; j < path.d; ++j) z[j] = normal(rng);
                    path.increments.row(k) = (root * z).transpose();
                }
                cc.table = {g.sigma};
                cc.index.assign(un, 0);
            } else if constexpr (std::is_same_v<T, Bolthausen>) {
                detail::check_bolthausen(g, n);
                double s = 0.0;
                for (std::int64_t i = 1; i <= n; ++i) {
                    const double x = draw(bolthausen_step_law(i, n, s), rng, normal);
                    s += x;
                    path.increments(i - 1, 0) = x;
                    for (Eigen::Index j = 1; j < path.d; ++j) path.increments(i - 1, j) = normal(rng);
                }
                cc.table = {SymMatrix::identity(path.d)};
                cc.index.assign(un, 0);
            } else if constexpr (std::is_same_v<T, GaussianSurrogate>) {
                detail::check_surrogate(g);
                std::vector<Matrix> roots;
                for (const auto& v : g.cond_covs) roots.push_back(psd_sqrt(v).matrix());
                Vector z(path.d);
                const std::size_t len = g.cond_covs.size();
                cc.table = g.cond_covs;
                cc.index.resize(un);
                for (std::int64_t k = 0; k < n; ++k) {
                    const std::size_t which = static_cast<std::size_t>(k) % len;
                    for (Eigen::Index j = 0; j < path.d; ++j) z[j] = normal(rng);
                    path.increments.row(k) = (roots[which] * z).transpose();
                    cc.index[static_cast<std::size_t>(k)] = static_cast<std::uint32_t>(which);
                }
            } else {
                const MarkovChainSpec& chain = g.chain;
                for (Eigen::Index s = 0; s < chain.states(); ++s) cc.table.push_back(chain.state_cov(s));
                cc.index.resize(un);
                Eigen::Index state = detail::sample_dist(chain.initial(), rng);
                for (std::int64_t k = 0; k < n; ++k) {
                    const Eigen::Index next = detail::sample_row(chain.transition(), state, rng);
                    path.increments.row(k) = chain.f(state, next).transpose();
                    cc.index[static_cast<std::size_t>(k)] = static_cast<std::uint32_t>(state);
                    state = next;
                }
            }
            path.cond_covs = std::move(cc);
        },
        spec);
    return path;
}

/// How terminal sums are produced for replication experiments.
enum class PathMode {
    /// Runs of i.i.d. Gaussian steps are replaced by one Gaussian draw with the
    /// summed covariance; the terminal sum has exactly the same law.
    Collapsed,
    /// Every step is simulated through generate().
    Full,
};

namespace detail {

/// S_n with Gaussian runs collapsed.
inline Vector collapsed_terminal_sum(const GeneratorSpec& spec, std::int64_t n, Rng& rng,
                                     const std::vector<Matrix>& roots) {
    std::normal_distribution<double> normal;
    const Eigen::Index d = generator_dim(spec);
    Vector z(d);
    auto gauss = [&](const Matrix& root) {
        for (Eigen::Index j = 0; j < d; ++j) z[j] = normal(rng);
        return Vector(root * z);
    };
    return std::visit(
        [&](const auto& g) -> Vector {
            using T = std::decay_t<decltype(g)>;
            if constexpr (std::is_same_v<T, IidGaussian> || std::is_same_v<T, GaussianSurrogate>) {
                return gauss(roots.front());
            } else if constexpr (std::is_same_v<T, Bolthausen>) {
                const BolthausenWindow w = bolthausen_window(n);
                Vector s(d);
                double x = std::sqrt(static_cast<double>(w.begin)) * normal(rng);
                for (std::int64_t i = w.begin + 1; i <= w.end; ++i)
                    x += draw(bolthausen_step_law(i, n, x), rng, normal);
                x += std::sqrt(static_cast<double>(n - w.end)) * normal(rng);
                s[0] = x;
                const double root_n = std::sqrt(static_cast<double>(n));
                for (Eigen::Index j = 1; j < d; ++j) s[j] = root_n * normal(rng);
                return s;
            } else {
                const MarkovChainSpec& chain = g.chain;
                Vector s = Vector::Zero(d);
                Eigen::Index state = sample_dist(chain.initial(), rng);
                for (std::int64_t k = 0; k < n; ++k) {
                    const Eigen::Index next = sample_row(chain.transition(), state, rng);
                    s += chain.f(state, next);
                    state = next;
                }
                return s;
            }
        },
        spec);
}

}  // namespace detail

/// R replications of S_n / sqrt(n); replication r uses child_seed(seed, n, r).
inline RowMatrix sample_terminal(const GeneratorSpec& spec, std::int64_t n, std::int64_t replications,
                                 std::uint64_t seed, unsigned threads = 1,
                                 PathMode mode = PathMode::Collapsed) {
    if (n < 1 || replications < 1) throw InvalidInput("sample_terminal: n and R must be >= 1");
    const Eigen::Index d = generator_dim(spec);
    std::vector<Matrix> roots;
    std::visit(
        [&](const auto& g) {
            using T = std::decay_t<decltype(g)>;
            if constexpr (std::is_same_v<T, IidGaussian>) {
                roots.push_back(psd_sqrt(g.sigma.scaled(static_cast<double>(n))).matrix());
            } else if constexpr (std::is_same_v<T, GaussianSurrogate>) {
                detail::check_surrogate(g);
                Matrix total = Matrix::Zero(d, d);
                for (std::int64_t k = 0; k < n; ++k)
                    total += g.cond_covs[static_cast<std::size_t>(k) % g.cond_covs.size()].matrix();
                roots.push_back(psd_sqrt(SymMatrix(total)).matrix());
            } else if constexpr (std::is_same_v<T, Bolthausen>) {
                detail::check_bolthausen(g, n);
            }
        },
        spec);
    RowMatrix out(replications, d);
    const double inv_root_n = 1.0 / std::sqrt(static_cast<double>(n));
    parallel_for(static_cast<std::size_t>(replications), threads, [&](std::size_t r) {
        const std::uint64_t s = child_seed(seed, static_cast<std::uint64_t>(n), r);
        Vector sum;
        if (mode == PathMode::Full) {
            sum = generate(spec, n, s).terminal_sum();
        } else {
            Rng rng = make_rng(s);
            sum = detail::collapsed_terminal_sum(spec, n, rng, roots);
        }
        out.row(static_cast<Eigen::Index>(r)) = (inv_root_n * sum).transpose();
    });
    return out;
}

/// Sigma_n = (1/n) sum E[X_k X_k^T | F_0]; for Markov-induced sequences the
/// stationary Sigma.
inline SymMatrix generator_sigma_n(const GeneratorSpec& spec, std::int64_t n) {
    return std::visit(
        [&](const auto& g) -> SymMatrix {
            using T = std::decay_t<decltype(g)>;
            if constexpr (std::is_same_v<T, IidGaussian>) return g.sigma;
            else if constexpr (std::is_same_v<T, Bolthausen>) return SymMatrix::identity(g.d);
            else if constexpr (std::is_same_v<T, MarkovInduced>) return markov_sigma(g.chain);
            else {
                const Eigen::Index d = g.cond_covs.front().dim();
                Matrix total = Matrix::Zero(d, d);
                for (std::int64_t k = 0; k < n; ++k)
                    total += g.cond_covs[static_cast<std::size_t>(k) % g.cond_covs.size()].matrix();
                return SymMatrix::checked_psd(total / static_cast<double>(n));
            }
        },
        spec);
}

// ---------------------------------------------------------------------------
// Yurinskii augmentation

struct AugmentResult {
    MdsPath path;  // length n + 1
    std::int64_t tau = 0;
    SymMatrix padding_cov;
    SymMatrix terminal_qv;  // sum_{i<=tau} V_i + padding_cov
    SymMatrix target;       // n (Sigma + kappa I)
};

/// tau = sup{t <= n : V_1 + ... + V_t <= n (Sigma + kappa I)}; steps after tau
/// are zeroed and step n+1 is Gaussian with the residual covariance.
inline AugmentResult yurinskii_augment(const MdsPath& path, const SymMatrix& sigma, double kappa,
                                       std::uint64_t seed) {
    if (!(kappa >= 0.0)) throw InvalidInput("yurinskii_augment: kappa must be >= 0");
    if (!path.cond_covs) throw InvalidInput("yurinskii_augment: path has no conditional covariances");
    if (sigma.dim() != path.d) throw InvalidInput("yurinskii_augment: dimension mismatch");
    SymMatrix::checked_psd(sigma.matrix());
    const CondCovs& cc = *path.cond_covs;
    const Eigen::Index d = path.d;
    const auto nd = static_cast<double>(path.n);
    const SymMatrix target(nd * (sigma.matrix() + kappa * Matrix::Identity(d, d)));

    // V_k >= 0 makes the partial sums Loewner-increasing, so the stopping
    // rule is monotone in t and a bisection finds the last admissible t.
    auto admissible = [&](std::int64_t t) {
        return loewner_leq(cc.partial_sum(static_cast<std::size_t>(t)), target);
    };
    std::int64_t tau = 0, hi = path.n + 1;
    while (hi - tau > 1) {
        const std::int64_t mid = tau + (hi - tau) / 2;
        (admissible(mid) ? tau : hi) = mid;
    }
    const Matrix partial = cc.partial_sum(static_cast<std::size_t>(tau)).matrix();

    AugmentResult res;
    res.tau = tau;
    res.target = target;
    res.padding_cov = SymMatrix(target.matrix() - partial);
    res.terminal_qv = SymMatrix(partial + res.padding_cov.matrix());

    MdsPath& out = res.path;
    out.n = path.n + 1;
    out.d = d;
    out.seed = seed;
    out.generator_tag = path.generator_tag + "+yurinskii";
    out.increments = RowMatrix::Zero(out.n, d);
    out.increments.topRows(tau) = path.increments.topRows(tau);
    Rng rng = make_rng(seed);
    std::normal_distribution<double> normal;
    Vector eta(d);
    for (Eigen::Index j = 0; j < d; ++j) eta[j] = normal(rng);
    out.increments.row(path.n) = (psd_sqrt(res.padding_cov).matrix() * eta).transpose();

    CondCovs aug;
    aug.table = cc.table;
    const auto zero_idx = static_cast<std::uint32_t>(aug.table.size());
    aug.table.push_back(SymMatrix::zero(d));
    const auto pad_idx = static_cast<std::uint32_t>(aug.table.size());
    aug.table.push_back(res.padding_cov);
    aug.index.assign(cc.index.begin(), cc.index.begin() + tau);
    aug.index.resize(static_cast<std::size_t>(path.n), zero_idx);
    aug.index.push_back(pad_idx);
    out.cond_covs = std::move(aug);
    return res;
}

}  // namespace mbe
