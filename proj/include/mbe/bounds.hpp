#pragma once

#include <boost/math/quadrature/tanh_sinh.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mbe/error.hpp"
#include "mbe/normal.hpp"
#include "mbe/spectral.hpp"

namespace mbe {

/// Scalar hypotheses feeding the bound evaluators.
struct MomentStats {
    double M = 1.0;      // E[||X_k||^3 | F] <= M lambda_min(V_k)
    double alpha = 1.0;  // min lambda_min(V_k)
    double beta = 1.0;   // max d_max(V_k)
    double gamma = 1.0;  // E||X_k||^3 <= (gamma log_+ d)^{3/2}
    double lambda_min_sigma = 1.0;
    double d_min_sigma = 1.0;
    double d_max_sigma = 1.0;
    double third_moment_mean = 1.0;  // (1/n) sum E||X_k||_inf^3
    std::int64_t n = 1;
    std::int64_t d = 1;

    void validate() const {
        auto positive = [](double v, const char* name) {
            if (!(v > 0.0) || !std::isfinite(v))
                throw InvalidInput(std::string("MomentStats: ") + name + " must be positive");
        };
        positive(M, "M");
        positive(alpha, "alpha");
        positive(beta, "beta");
        positive(gamma, "gamma");
        positive(lambda_min_sigma, "lambda_min_sigma");
        positive(d_min_sigma, "d_min_sigma");
        positive(d_max_sigma, "d_max_sigma");
        positive(third_moment_mean, "third_moment_mean");
        if (n < 1 || d < 1) throw InvalidInput("MomentStats: n and d must be >= 1");
        if (d_min_sigma > d_max_sigma) throw InvalidInput("MomentStats: d_min_sigma > d_max_sigma");
    }

    double log_d() const { return log_plus(static_cast<double>(d)); }
};

struct BoundReport {
    std::string theorem_id;
    double value = 0.0;
    std::map<std::string, double> components;
    double constant_c = 1.0;
};

// Finite-n bound with third-moment average only; rate n^{-1/8}.
inline BoundReport bound_t1(const MomentStats& s, double c = 1.0) {
    s.validate();
    const double ld = s.log_d();
    const double ratio = s.d_max_sigma / s.d_min_sigma;
    BoundReport r{"t1", 0.0, {}, c};
    r.value = c * std::pow(s.lambda_min_sigma, -3.0 / 8.0) * std::pow(s.third_moment_mean, 0.25) *
              std::pow(ratio, 3.0 / 8.0) * std::pow(ld, 9.0 / 8.0) *
              std::pow(static_cast<double>(s.n), -1.0 / 8.0);
    r.components = {{"log_plus_d", ld}, {"diag_ratio", ratio}};
    return r;
}

inline double t2_delta(const MomentStats& s) {
    return std::sqrt(s.M) * std::pow(1.0 / s.lambda_min_sigma, 0.25) *
           std::pow(s.d_max_sigma / s.d_min_sigma, 0.25) * std::pow(s.log_d(), 0.75) *
           std::pow(static_cast<double>(s.n), -0.25);
}

/// Moment-ratio bound Delta log_+ d log((1 + Delta^2) / Delta^2); Delta = 0 maps
/// to 0 (the limit of x log((1+x^2)/x^2)).
inline BoundReport bound_t2(const MomentStats& s, double c = 1.0) {
    s.validate();
    const double delta = t2_delta(s);
    BoundReport r{"t2", 0.0, {{"Delta", delta}, {"log_plus_d", s.log_d()}}, c};
    if (delta == 0.0) {
        r.components["degenerate_delta"] = 1.0;
        return r;
    }
    const double d2 = delta * delta;
    const double log_term = std::log1p(1.0 / d2);
    r.components["log_correction"] = log_term;
    r.value = c * delta * s.log_d() * log_term;
    return r;
}

enum class T3Variant { without_alpha, with_alpha };

inline BoundReport bound_t3(const MomentStats& s, T3Variant variant, double c = 1.0) {
    s.validate();
    const double ld = s.log_d();
    const double gb = s.gamma + s.beta;
    const auto n = static_cast<double>(s.n);
    BoundReport r{variant == T3Variant::with_alpha ? "t3b" : "t3a", 0.0, {{"log_plus_d", ld}}, c};
    if (variant == T3Variant::without_alpha) {
        r.value = c * std::pow(gb / s.d_min_sigma, 3.0 / 8.0) * std::pow(ld, 1.5) * std::pow(n, -1.0 / 8.0);
    } else {
        r.value = c * std::pow(gb, 0.75) / std::sqrt(s.alpha * std::sqrt(s.d_min_sigma)) * ld * ld *
                  std::pow(n, -0.25);
    }
    return r;
}

namespace detail {

inline void check_kappa_args(double beta, double alpha, double gap, std::int64_t n, std::int64_t d,
                             double rn_norm, double q) {
    if (beta < alpha) throw InvalidInput("kappa_markov: beta < alpha");
    if (!(gap > 0.0 && gap <= 1.0)) throw InvalidInput("kappa_markov: gap must lie in (0, 1]");
    if (!(rn_norm >= 1.0)) throw InvalidInput("kappa_markov: Radon-Nikodym norm must be >= 1");
    if (!(q > 0.0)) throw InvalidInput("kappa_markov: q must be positive");
    if (n < 1 || d < 1) throw InvalidInput("kappa_markov: n and d must be >= 1");
}

}  // namespace detail

/// Matrix-Hoeffding radius c sqrt((q / gap) log(2 d n rn_norm)) (beta - alpha) / sqrt(n).
inline double kappa_markov(double beta, double alpha, double gap, std::int64_t n, std::int64_t d,
                           double rn_norm, double q, double c = 1.0) {
    detail::check_kappa_args(beta, alpha, gap, n, d, rn_norm, q);
    const double log_arg = 2.0 * static_cast<double>(d) * static_cast<double>(n) * rn_norm;
    return c * std::sqrt(q / gap * std::log(log_arg)) * (beta - alpha) /
           std::sqrt(static_cast<double>(n));
}

/// Same radius with log(.) in place of sqrt(log(.)), the log(nd) n^{-1/2}
/// scaling quoted for kappa in the theorem statement.
inline double kappa_markov_statement(double beta, double alpha, double gap, std::int64_t n,
                                     std::int64_t d, double rn_norm, double q, double c = 1.0) {
    detail::check_kappa_args(beta, alpha, gap, n, d, rn_norm, q);
    const double log_arg = 2.0 * static_cast<double>(d) * static_cast<double>(n) * rn_norm;
    return c * std::sqrt(q / gap) * std::log(log_arg) * (beta - alpha) /
           std::sqrt(static_cast<double>(n));
}

/// Markov-chain bound. kappa = 0 is accepted as the limit kappa log(1/kappa) -> 0.
inline BoundReport bound_t4(const MomentStats& s, double kappa, double sigma_inv_norm, double c = 1.0) {
    s.validate();
    if (!(kappa >= 0.0 && kappa < 1.0)) throw InvalidInput("bound_t4: kappa must lie in [0, 1)");
    const double ld = s.log_d();
    const auto n = static_cast<double>(s.n);
    const double nd = n * static_cast<double>(s.d);
    const double coupling = std::sqrt(kappa * std::log(nd));
    const double comparison = kappa > 0.0 ? sigma_inv_norm * kappa * std::log(1.0 / kappa) : 0.0;
    const double martingale = (std::pow(s.gamma, 0.75) + std::pow(s.beta, 0.75)) / std::sqrt(s.alpha) *
                              ld * ld * std::pow(n, -0.25);
    BoundReport r{"t4", 0.0, {}, c};
    r.value = c * ((coupling + comparison) * ld + martingale);
    r.components = {{"kappa", kappa},
                    {"coupling_term", coupling * ld},
                    {"comparison_term", comparison * ld},
                    {"martingale_term", martingale},
                    {"log_plus_d", ld}};
    return r;
}

// ---------------------------------------------------------------------------
// Auxiliary bounds

struct SmoothDerivative {
    int s = 1;
    double sigma = 1.0;
    double d = 1.0;
};
struct GaussianMaxMoment {
    double s = 2.0;
    double d = 1.0;
    double d_max = 1.0;
};
struct GaussianComparison {
    SymMatrix sigma;
    SymMatrix sigma_prime;
};
struct AntiConcentration {
    double x = 0.0;
    double d = 1.0;
    double d_min = 1.0;
};

using AuxiliaryKind = std::variant<SmoothDerivative, GaussianMaxMoment, GaussianComparison, AntiConcentration>;

/// Max-abs entry of D^{-1/2} (sigma' - sigma) D^{-1/2}, D = diag(sigma).
inline double comparison_delta(const SymMatrix& sigma, const SymMatrix& sigma_prime) {
    if (sigma.dim() != sigma_prime.dim()) throw InvalidInput("comparison: dimension mismatch");
    const Vector inv = sigma.matrix().diagonal().cwiseSqrt().cwiseInverse();
    const Matrix scaled = inv.asDiagonal() * (sigma_prime.matrix() - sigma.matrix()) * inv.asDiagonal();
    return scaled.cwiseAbs().maxCoeff();
}

inline double auxiliary_bound(const AuxiliaryKind& kind, double c = 1.0) {
    return std::visit(
        [c](const auto& k) -> double {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, SmoothDerivative>) {
                if (k.s < 1 || !(k.sigma > 0.0)) throw InvalidInput("smooth_derivative: need s >= 1, sigma > 0");
                return c * std::pow(k.sigma, -k.s) * std::pow(log_plus(k.d), 0.5 * k.s);
            } else if constexpr (std::is_same_v<T, GaussianMaxMoment>) {
                if (k.s < 2.0 || !(k.d_max > 0.0)) throw InvalidInput("gaussian_max_moment: need s >= 2");
                return c * std::pow(log_plus(k.d), 0.5 * k.s) * std::pow(k.d_max, 0.5 * k.s);
            } else if constexpr (std::is_same_v<T, GaussianComparison>) {
                const double delta = comparison_delta(k.sigma, k.sigma_prime);
                if (delta == 0.0) return 0.0;
                if (!(delta < 1.0)) throw InvalidInput("gaussian_comparison: Delta must be < 1");
                const Vector root = k.sigma.matrix().diagonal().cwiseSqrt();
                const Matrix inv = k.sigma.matrix().inverse();
                const SymMatrix scaled(Matrix(root.asDiagonal() * inv * root.asDiagonal()));
                return c * op_norm(scaled) * delta * std::log(1.0 / delta) *
                       log_plus(static_cast<double>(k.sigma.dim()));
            } else {
                if (!(k.x >= 0.0) || !(k.d_min > 0.0)) throw InvalidInput("anti_concentration: need x >= 0, d_min > 0");
                return c * k.x * log_plus(k.d) / k.d_min;
            }
        },
        kind);
}

// ---------------------------------------------------------------------------
// Integral inequality from the Stein-solution derivative estimate

struct SteinCheck {
    double lhs = 0.0;
    double rhs = 0.0;
    bool holds = false;
    double error_estimate = 0.0;
};

/// lhs = int_t^inf e^{-3s} / ((1-e^{-2t}) e1 + (e^{-2t} - e^{-2s}) ek)^{3/2} ds,
/// integrated over u = e^{-s} in (0, e^{-t}] by tanh-sinh quadrature.
/// quad_points is validated only; the rule refines to a 1e-13 relative tolerance.
/// rhs = e^{-3t} / sqrt((1-e^{-2t}) e1) / ((1-e^{-2t}) e1 + e^{-2t} ek), times rhs_scale.
inline SteinCheck stein_integral_check(double t, double eps1, double epsk, int quad_points,
                                       double rhs_scale = 1.0) {
    if (!(t > 0.0) || !(eps1 > 0.0) || !(epsk >= 0.0))
        throw InvalidInput("stein_integral_check: need t > 0, eps1 > 0, epsk >= 0");
    if (quad_points < 1000) throw InvalidInput("stein_integral_check: quad_points must be >= 1000");
    const double e2t = std::exp(-2.0 * t);
    const double base = -std::expm1(-2.0 * t) * eps1;  // (1 - e^{-2t}) eps1
    auto integrand = [&](double u) {
        const double denom = base + (e2t - u * u) * epsk;
        return u * u / (denom * std::sqrt(denom));
    };
    // The integrand peaks over a width of about base / (ek e^{-t}) below the
    // upper endpoint; that piece is integrated separately.
    const double top = std::exp(-t);
    const double width = epsk > 0.0 ? std::min(top, base / (epsk * top)) : top;
    const double cut = top - width;
    boost::math::quadrature::tanh_sinh<double> quad(15);
    double lhs = 0.0, err = 0.0, piece_err = 0.0;
    if (cut > 0.0) {
        lhs += quad.integrate(integrand, 0.0, cut, 1e-13, &piece_err);
        err += piece_err;
    }
    lhs += quad.integrate(integrand, cut, top, 1e-13, &piece_err);
    err += piece_err;
    SteinCheck out;
    out.lhs = lhs;
    out.rhs = rhs_scale * std::exp(-3.0 * t) / std::sqrt(base) / (base + e2t * epsk);
    out.error_estimate = err;
    if (err > 1e-8 * std::abs(out.rhs / rhs_scale))
        throw QuadratureFailure("stein_integral_check: error estimate " + std::to_string(err) +
                                " exceeds 1e-8 * rhs");
    out.holds = out.lhs <= out.rhs * (1.0 + 1e-6);
    return out;
}

struct SteinTriple {
    double t = 0.0;
    double eps1 = 0.0;
    double epsk = 0.0;
};

/// 5 x 5 x 4 log-spaced sweep over (0.01, 3) x (0.1, 10) x (0.1, 10).
inline std::vector<SteinTriple> stein_sweep_grid() {
    auto logspace = [](double lo, double hi, int k) {
        std::vector<double> v;
        for (int i = 0; i < k; ++i)
            v.push_back(lo * std::pow(hi / lo, (i + 0.5) / static_cast<double>(k)));
        return v;
    };
    std::vector<SteinTriple> grid;
    for (double t : logspace(0.01, 3.0, 5))
        for (double e1 : logspace(0.1, 10.0, 5))
            for (double ek : logspace(0.1, 10.0, 4)) grid.push_back({t, e1, ek});
    return grid;
}

// ---------------------------------------------------------------------------
// Rate fitting

struct RateFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    std::vector<std::pair<double, double>> points;
};

/// Least squares of log(value) on log(n).
inline RateFit rate_fit(const std::vector<std::pair<double, double>>& points) {
    if (points.size() < 2) throw InvalidInput("rate_fit: need at least 2 points");
    for (const auto& [n, v] : points) {
        if (!(n > 0.0)) throw InvalidInput("rate_fit: n must be positive");
        if (!(v > 0.0)) throw InvalidInput("rate_fit: values must be positive");
    }
    const auto k = static_cast<double>(points.size());
    double mx = 0.0, my = 0.0;
    for (const auto& [n, v] : points) {
        mx += std::log(n);
        my += std::log(v);
    }
    mx /= k;
    my /= k;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (const auto& [n, v] : points) {
        const double dx = std::log(n) - mx, dy = std::log(v) - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if (sxx == 0.0) throw InvalidInput("rate_fit: n values must be distinct");
    RateFit f;
    f.points = points;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r_squared = syy == 0.0 ? 1.0 : std::clamp(sxy * sxy / (sxx * syy), 0.0, 1.0);
    return f;
}

}  // namespace mbe
