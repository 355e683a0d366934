#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "mbe/error.hpp"
#include "mbe/normal.hpp"
#include "mbe/parallel.hpp"
#include "mbe/rng.hpp"
#include "mbe/spectral.hpp"

namespace mbe {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Closed axis-aligned box with extended-real endpoints.
class Rectangle {
public:
    Rectangle() = default;

    Rectangle(Vector lower, Vector upper) : lower_(std::move(lower)), upper_(std::move(upper)) {
        if (lower_.size() != upper_.size() || lower_.size() == 0)
            throw InvalidInput("Rectangle: endpoint vectors must be nonempty and equal length");
        for (Eigen::Index i = 0; i < lower_.size(); ++i) {
            if (std::isnan(lower_[i]) || std::isnan(upper_[i]) || !(lower_[i] <= upper_[i]))
                throw InvalidInput("Rectangle: lower > upper at coordinate " + std::to_string(i));
        }
    }

    static Rectangle full(Eigen::Index d) {
        return {Vector::Constant(d, -kInf), Vector::Constant(d, kInf)};
    }
    static Rectangle cube(Eigen::Index d, double lo, double hi) {
        return {Vector::Constant(d, lo), Vector::Constant(d, hi)};
    }

    Eigen::Index dim() const noexcept { return lower_.size(); }
    const Vector& lower() const noexcept { return lower_; }
    const Vector& upper() const noexcept { return upper_; }

    template <class Row>
    bool contains(const Row& x) const {
        for (Eigen::Index i = 0; i < lower_.size(); ++i) {
            if (!(lower_[i] <= x[i] && x[i] <= upper_[i])) return false;
        }
        return true;
    }

    /// Reflection through the origin, -r.
    Rectangle negated() const { return {-upper_, -lower_}; }

    /// Coordinatewise scaling by a positive vector.
    Rectangle scaled(const Vector& s) const {
        return {lower_.cwiseProduct(s), upper_.cwiseProduct(s)};
    }

    bool subset_of(const Rectangle& o) const {
        return (o.lower_.array() <= lower_.array()).all() &&
               (upper_.array() <= o.upper_.array()).all();
    }

    friend bool operator==(const Rectangle& a, const Rectangle& b) {
        return a.lower_ == b.lower_ && a.upper_ == b.upper_;
    }

private:
    Vector lower_;
    Vector upper_;
};

struct ProbEstimate {
    double value = 0.0;
    double std_error = 0.0;
    std::int64_t n_points = 0;
};

/// Draws `count` rows of root * z with z ~ N(0, I). Rows are produced in fixed
/// blocks with per-block child seeds, so the output is identical for any
/// thread count.
inline RowMatrix sample_mvn(const Matrix& root, std::int64_t count, std::uint64_t seed,
                            unsigned threads = 1) {
    if (count < 1) throw InvalidInput("sample_mvn: count must be >= 1");
    if (root.rows() != root.cols()) throw InvalidInput("sample_mvn: root must be square");
    const Eigen::Index d = root.rows();
    RowMatrix out(count, d);
    constexpr std::int64_t kBlock = 4096;
    const std::int64_t blocks = (count + kBlock - 1) / kBlock;
    parallel_for(static_cast<std::size_t>(blocks), threads, [&](std::size_t b) {
        Rng rng = make_rng(child_seed(seed, b));
        std::normal_distribution<double> normal;
        Vector z(d);
        const std::int64_t begin = static_cast<std::int64_t>(b) * kBlock;
        const std::int64_t end = std::min(count, begin + kBlock);
        for (std::int64_t r = begin; r < end; ++r) {
            for (Eigen::Index j = 0; j < d; ++j) z[j] = normal(rng);
            out.row(r) = (root * z).transpose();
        }
    });
    return out;
}

inline RowMatrix sample_mvn(const SymMatrix& sigma, std::int64_t count, std::uint64_t seed,
                            unsigned threads = 1) {
    return sample_mvn(psd_sqrt(sigma).matrix(), count, seed, threads);
}

/// Fraction of rows inside the closed rectangle r.
inline double empirical_rect_prob(const RowMatrix& samples, const Rectangle& r) {
    if (samples.rows() < 1) throw InvalidInput("empirical_rect_prob: no samples");
    if (samples.cols() != r.dim()) throw InvalidInput("empirical_rect_prob: dimension mismatch");
    std::int64_t hits = 0;
    for (Eigen::Index i = 0; i < samples.rows(); ++i) hits += r.contains(samples.row(i)) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(samples.rows());
}

namespace detail {

inline const std::vector<double>& richtmyer_generators(std::size_t count) {
    // sqrt of successive primes; grows on demand (guarded by a static local).
    static const std::vector<double> gens = [] {
        std::vector<double> g;
        constexpr int kLimit = 20000;
        std::vector<bool> composite(kLimit + 1, false);
        for (int p = 2; p <= kLimit; ++p) {
            if (composite[p]) continue;
            g.push_back(std::sqrt(static_cast<double>(p)));
            for (long q = static_cast<long>(p) * p; q <= kLimit; q += p) composite[q] = true;
        }
        return g;
    }();
    if (count > gens.size()) throw InvalidInput("rect_prob: dimension too large");
    return gens;
}

/// Sequentially conditioned problem after variable reordering.
struct GenzProblem {
    Matrix chol;  // lower triangular, in the permuted order
    Vector lower;
    Vector upper;
};

inline double clamp_std(double z) {
    constexpr double kClip = 8.0;
    return std::clamp(z, -kClip, kClip);
}

/// Pivoted Cholesky with Genz-Bretz ordering: at each step pick the remaining
/// variable with the smallest conditional interval probability, conditioning
/// previous variables on their truncated means.
inline GenzProblem prepare_genz(const SymMatrix& sigma, const Vector& a, const Vector& b) {
    const Eigen::Index d = sigma.dim();
    Matrix c = sigma.matrix();
    Vector lo = a;
    Vector hi = b;
    Matrix L = Matrix::Zero(d, d);
    Vector y = Vector::Zero(d);
    const double tol = tol_psd(sigma);
    for (Eigen::Index i = 0; i < d; ++i) {
        Eigen::Index best = i;
        double best_prob = kInf;
        for (Eigen::Index j = i; j < d; ++j) {
            double var = c(j, j);
            double mean = 0.0;
            for (Eigen::Index k = 0; k < i; ++k) {
                var -= L(j, k) * L(j, k);
                mean += L(j, k) * y[k];
            }
            if (!(var > tol)) continue;
            const double s = std::sqrt(var);
            const double prob = norm_cdf(clamp_std((hi[j] - mean) / s)) -
                                norm_cdf(clamp_std((lo[j] - mean) / s));
            if (prob < best_prob) {
                best_prob = prob;
                best = j;
            }
        }
        if (best != i) {
            c.row(i).swap(c.row(best));
            c.col(i).swap(c.col(best));
            L.row(i).swap(L.row(best));
            std::swap(lo[i], lo[best]);
            std::swap(hi[i], hi[best]);
        }
        double pivot = c(i, i);
        for (Eigen::Index k = 0; k < i; ++k) pivot -= L(i, k) * L(i, k);
        if (!(pivot > tol))
            throw NotPositiveDefinite("rect_prob: covariance is not positive definite");
        const double lii = std::sqrt(pivot);
        L(i, i) = lii;
        for (Eigen::Index r = i + 1; r < d; ++r) {
            double s = c(r, i);
            for (Eigen::Index k = 0; k < i; ++k) s -= L(r, k) * L(i, k);
            L(r, i) = s / lii;
        }
        double mean = 0.0;
        for (Eigen::Index k = 0; k < i; ++k) mean += L(i, k) * y[k];
        const double za = clamp_std((lo[i] - mean) / lii);
        const double zb = clamp_std((hi[i] - mean) / lii);
        const double mass = norm_cdf(zb) - norm_cdf(za);
        y[i] = mass > 1e-300 ? (norm_pdf(za) - norm_pdf(zb)) / mass : 0.5 * (za + zb);
    }
    return {std::move(L), std::move(lo), std::move(hi)};
}

inline double genz_integrand(const GenzProblem& p, const double* w, Vector& y) {
    const Eigen::Index d = p.chol.rows();
    double f = 1.0;
    for (Eigen::Index i = 0; i < d; ++i) {
        double mean = 0.0;
        for (Eigen::Index k = 0; k < i; ++k) mean += p.chol(i, k) * y[k];
        const double lii = p.chol(i, i);
        const double ei_lo = norm_cdf(clamp_std((p.lower[i] - mean) / lii));
        const double ei_hi = norm_cdf(clamp_std((p.upper[i] - mean) / lii));
        const double width = ei_hi - ei_lo;
        f *= width;
        if (f <= 0.0) return 0.0;
        if (i + 1 < d) {
            const double u = std::clamp(ei_lo + w[i] * width, 1e-300, 1.0 - 1e-16);
            y[i] = norm_quantile(u);
        }
    }
    return f;
}

}  // namespace detail

/// Gaussian probability N(0, sigma)(r) by sequential conditioning integrated
/// with randomly shifted Richtmyer lattice rules (baker-transformed). stderr
/// is the standard error over the independent shifts.
inline ProbEstimate rect_prob(const SymMatrix& sigma, const Rectangle& r, std::int64_t budget,
                              std::uint64_t seed, unsigned threads = 1) {
    constexpr int kShifts = 10;
    if (budget < 1024) throw InvalidInput("rect_prob: budget must be >= 1024");
    if (sigma.dim() != r.dim()) throw InvalidInput("rect_prob: dimension mismatch");

    // Coordinates unconstrained on both sides marginalize out exactly.
    std::vector<Eigen::Index> active;
    for (Eigen::Index i = 0; i < r.dim(); ++i) {
        if (std::isfinite(r.lower()[i]) || std::isfinite(r.upper()[i])) active.push_back(i);
    }
    if (active.empty()) {
        cholesky_factor(sigma);  // still reject non-PD input
        return {1.0, 0.0, 0};
    }
    const auto m = static_cast<Eigen::Index>(active.size());
    Matrix sub(m, m);
    Vector a(m), b(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        a[i] = r.lower()[active[i]];
        b[i] = r.upper()[active[i]];
        for (Eigen::Index j = 0; j < m; ++j) sub(i, j) = sigma(active[i], active[j]);
    }
    cholesky_factor(sigma);
    const detail::GenzProblem problem = detail::prepare_genz(SymMatrix(sub), a, b);

    const std::int64_t per_shift = std::max<std::int64_t>(1, budget / kShifts);
    const auto dims = static_cast<std::size_t>(std::max<Eigen::Index>(1, m - 1));
    const auto& gens = detail::richtmyer_generators(dims);

    std::vector<double> shift_means(kShifts, 0.0);
    parallel_for(kShifts, threads, [&](std::size_t s) {
        Rng rng = make_rng(child_seed(seed, s));
        std::vector<double> shift(dims), w(dims);
        for (auto& v : shift) v = uniform01(rng);
        Vector y = Vector::Zero(m);
        double sum = 0.0;
        for (std::int64_t k = 1; k <= per_shift; ++k) {
            for (std::size_t j = 0; j < dims; ++j) {
                double x = static_cast<double>(k) * gens[j] + shift[j];
                x -= std::floor(x);
                w[j] = std::abs(2.0 * x - 1.0);
            }
            sum += detail::genz_integrand(problem, w.data(), y);
        }
        shift_means[s] = sum / static_cast<double>(per_shift);
    });

    double mean = 0.0;
    for (double v : shift_means) mean += v;
    mean /= kShifts;
    double var = 0.0;
    for (double v : shift_means) var += (v - mean) * (v - mean);
    var /= static_cast<double>(kShifts - 1);
    return {std::clamp(mean, 0.0, 1.0), std::sqrt(var / kShifts), per_shift * kShifts};
}

}  // namespace mbe
