#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <variant>
#include <vector>

#include "mbe/error.hpp"
#include "mbe/gaussian.hpp"
#include "mbe/normal.hpp"
#include "mbe/parallel.hpp"
#include "mbe/rng.hpp"
#include "mbe/spectral.hpp"

namespace mbe {

struct FamilyRecipe {
    int grid_points = 41;
    int random_count = 512;
    std::uint64_t seed = 0;
};

struct RectangleFamily {
    std::vector<Rectangle> rectangles;
    FamilyRecipe recipe;

    std::size_t size() const noexcept { return rectangles.size(); }
};

/// Quantile levels k / (grid_points + 1), k = 1..grid_points.
inline std::vector<double> family_levels(int grid_points) {
    std::vector<double> levels;
    for (int k = 1; k <= grid_points; ++k)
        levels.push_back(static_cast<double>(k) / static_cast<double>(grid_points + 1));
    return levels;
}

/// One-sided boxes (-inf, t]^d and symmetric boxes [-t, t]^d on a grid of
/// marginal quantile levels, plus random rectangles whose endpoints are
/// marginal quantiles of N(0, sigma).
inline RectangleFamily build_family(Eigen::Index d, const SymMatrix& sigma, int grid_points,
                                    int random_count, std::uint64_t seed) {
    if (grid_points < 3) throw InvalidInput("build_family: grid_points must be >= 3");
    if (random_count < 0) throw InvalidInput("build_family: random_count must be >= 0");
    if (sigma.dim() != d) throw InvalidInput("build_family: dimension mismatch");
    const Vector scale = sigma.matrix().diagonal().cwiseMax(0.0).cwiseSqrt();
    RectangleFamily fam;
    fam.recipe = {grid_points, random_count, seed};
    const auto levels = family_levels(grid_points);
    for (double l : levels) {
        fam.rectangles.emplace_back(Vector::Constant(d, -kInf), norm_quantile(l) * scale);
    }
    for (double l : levels) {
        const Vector t = norm_quantile(0.5 * (1.0 + l)) * scale;
        fam.rectangles.emplace_back(-t, t);
    }
    Rng rng = make_rng(seed);
    for (int r = 0; r < random_count; ++r) {
        const double target = 0.05 + 0.9 * uniform01(rng);
        const double width = std::pow(target, 1.0 / static_cast<double>(d));
        Vector lo(d), hi(d);
        for (Eigen::Index i = 0; i < d; ++i) {
            const double kind = uniform01(rng);
            double a = (1.0 - width) * uniform01(rng);
            if (kind < 0.25) a = 0.0;
            else if (kind < 0.5) a = 1.0 - width;
            const double b = std::min(1.0, a + width);
            lo[i] = a <= 0.0 ? -kInf : norm_quantile(a) * scale[i];
            hi[i] = b >= 1.0 ? kInf : norm_quantile(b) * scale[i];
        }
        fam.rectangles.emplace_back(std::move(lo), std::move(hi));
    }
    return fam;
}

/// Gaussian probabilities of every family member; rectangle i uses
/// child_seed(seed, i).
inline std::vector<ProbEstimate> reference_probs(const SymMatrix& sigma, const RectangleFamily& fam,
                                                 std::int64_t budget, std::uint64_t seed,
                                                 unsigned threads = 1) {
    cholesky_factor(sigma);
    std::vector<ProbEstimate> out(fam.size());
    parallel_for(fam.size(), threads, [&](std::size_t i) {
        out[i] = rect_prob(sigma, fam.rectangles[i], budget, child_seed(seed, i));
    });
    return out;
}

inline std::vector<double> empirical_probs(const RowMatrix& samples, const RectangleFamily& fam,
                                           unsigned threads = 1) {
    std::vector<double> out(fam.size());
    parallel_for(fam.size(), threads,
                 [&](std::size_t i) { out[i] = empirical_rect_prob(samples, fam.rectangles[i]); });
    return out;
}

struct DkEstimate {
    double value = 0.0;
    double mc_error = 0.0;
    double mvn_error = 0.0;
    Rectangle argmax_rectangle;
    std::size_t argmax_index = 0;
    std::size_t family_size = 0;
    /// Simultaneous (Bonferroni, 95%) half-width of the empirical side over
    /// the whole family; not folded into value.
    double bonferroni_mc_bound = 0.0;
};

/// max_i |empirical_i - reference_i|; ties resolve to the lowest index.
inline DkEstimate estimate_dk(const RowMatrix& samples, const RectangleFamily& fam,
                              const std::vector<ProbEstimate>& refs, unsigned threads = 1) {
    if (samples.rows() < 100) throw InvalidInput("estimate_dk: need at least 100 samples");
    if (fam.size() == 0) throw InvalidInput("estimate_dk: empty family");
    if (refs.size() != fam.size()) throw InvalidInput("estimate_dk: reference size mismatch");
    const std::vector<double> emp = empirical_probs(samples, fam, threads);
    const auto r = static_cast<double>(samples.rows());
    DkEstimate est;
    est.family_size = fam.size();
    double best = -1.0;
    for (std::size_t i = 0; i < fam.size(); ++i) {
        const double gap = std::abs(emp[i] - refs[i].value);
        if (gap > best) {
            best = gap;
            est.argmax_index = i;
        }
    }
    const std::size_t k = est.argmax_index;
    est.value = std::clamp(best, 0.0, 1.0);
    est.mc_error = std::sqrt(std::max(emp[k] * (1.0 - emp[k]), 0.0) / r);
    est.mvn_error = refs[k].std_error;
    est.argmax_rectangle = fam.rectangles[k];
    const double z = norm_quantile(1.0 - 0.05 / (2.0 * static_cast<double>(fam.size())));
    est.bonferroni_mc_bound = z * 0.5 / std::sqrt(r);
    return est;
}

inline DkEstimate estimate_dk(const RowMatrix& samples, const SymMatrix& sigma,
                              const RectangleFamily& fam, std::int64_t budget, std::uint64_t seed,
                              unsigned threads = 1) {
    if (samples.cols() != sigma.dim()) throw InvalidInput("estimate_dk: dimension mismatch");
    return estimate_dk(samples, fam, reference_probs(sigma, fam, budget, seed, threads), threads);
}

// ---------------------------------------------------------------------------
// One-dimensional brute-force oracle

struct NormalLaw {
    double mean = 0.0;
    double sd = 1.0;  // sd == 0 is a point mass at mean
};

struct EmpiricalLaw {
    std::vector<double> sorted;

    explicit EmpiricalLaw(std::vector<double> xs) : sorted(std::move(xs)) {
        if (sorted.empty()) throw InvalidInput("EmpiricalLaw: no samples");
        std::sort(sorted.begin(), sorted.end());
    }
};

using OneDimLaw = std::variant<NormalLaw, EmpiricalLaw>;

namespace detail {

inline double cdf(const OneDimLaw& law, double x, bool left_limit) {
    if (const auto* n = std::get_if<NormalLaw>(&law)) {
        if (n->sd <= 0.0) return left_limit ? (x > n->mean ? 1.0 : 0.0) : (x >= n->mean ? 1.0 : 0.0);
        return norm_cdf((x - n->mean) / n->sd);
    }
    const auto& e = std::get<EmpiricalLaw>(law);
    const auto it = left_limit ? std::lower_bound(e.sorted.begin(), e.sorted.end(), x)
                               : std::upper_bound(e.sorted.begin(), e.sorted.end(), x);
    return static_cast<double>(it - e.sorted.begin()) / static_cast<double>(e.sorted.size());
}

inline void law_range(const OneDimLaw& law, double& lo, double& hi, std::vector<double>& atoms) {
    if (const auto* n = std::get_if<NormalLaw>(&law)) {
        lo = std::min(lo, n->mean - 8.0 * n->sd);
        hi = std::max(hi, n->mean + 8.0 * n->sd);
        if (n->sd <= 0.0) atoms.push_back(n->mean);
        return;
    }
    const auto& e = std::get<EmpiricalLaw>(law);
    lo = std::min(lo, e.sorted.front());
    hi = std::max(hi, e.sorted.back());
    atoms.insert(atoms.end(), e.sorted.begin(), e.sorted.end());
}

}  // namespace detail

/// sup over closed intervals (half-lines included) with endpoints on a uniform
/// grid of `grid` points plus every atom of either law, of
/// |P_a([x, y]) - P_b([x, y])|. Linear scan over the grid.
inline double dk_one_dim_oracle(const OneDimLaw& a, const OneDimLaw& b, int grid) {
    if (grid < 2) throw InvalidInput("dk_one_dim_oracle: grid must be >= 2");
    double lo = kInf, hi = -kInf;
    std::vector<double> pts;
    detail::law_range(a, lo, hi, pts);
    detail::law_range(b, lo, hi, pts);
    if (hi <= lo) hi = lo + 1.0;
    for (int k = 0; k < grid; ++k)
        pts.push_back(lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(grid - 1));
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());

    double min_left = 0.0, max_left = 0.0;  // the -inf endpoint contributes 0
    double best = 0.0;
    for (double x : pts) {
        const double left = detail::cdf(a, x, true) - detail::cdf(b, x, true);
        min_left = std::min(min_left, left);
        max_left = std::max(max_left, left);
        const double right = detail::cdf(a, x, false) - detail::cdf(b, x, false);
        best = std::max({best, right - min_left, max_left - right});
    }
    best = std::max({best, -min_left, max_left});  // [x, +inf)
    return std::clamp(best, 0.0, 1.0);
}

}  // namespace mbe
