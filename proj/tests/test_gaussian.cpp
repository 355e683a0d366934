#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mbe/gaussian.hpp"
#include "mbe/normal.hpp"

using namespace mbe;

namespace {

double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

SymMatrix ar1(Eigen::Index d, double rho) {
    Matrix m(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = std::pow(rho, std::abs(double(i - j)));
    return SymMatrix(m);
}

}  // namespace

TEST(Normal, QuantileInvertsCdf) {
    for (double p : {1e-300, 1e-12, 1e-4, 0.02, 0.3, 0.5, 0.77, 0.975, 1 - 1e-10}) {
        const double x = norm_quantile(p);
        EXPECT_NEAR(norm_cdf(x), p, 1e-14 * std::max(1.0, p / (1 - p)) + 1e-15 * p) << p;
    }
    EXPECT_TRUE(std::isinf(norm_quantile(0.0)));
    EXPECT_NEAR(norm_quantile(0.975), 1.959963984540054, 1e-14);
}

TEST(Rectangle, InvariantsAndMembership) {
    EXPECT_THROW(Rectangle(Vector::Constant(2, 1.0), Vector::Constant(2, 0.0)), InvalidInput);
    const Rectangle r = Rectangle::cube(2, -1.0, 1.0);
    Vector x(2);
    x << 1.0, -1.0;  // closed on both ends
    EXPECT_TRUE(r.contains(x));
    x << 1.0 + 1e-12, 0.0;
    EXPECT_FALSE(r.contains(x));
    EXPECT_TRUE(r.subset_of(Rectangle::full(2)));
}

TEST(SampleMvn, ZeroRootGivesZeroRows) {
    const RowMatrix s = sample_mvn(Matrix::Zero(2, 2), 3, 99);
    EXPECT_EQ(s.rows(), 3);
    EXPECT_EQ(s.cwiseAbs().maxCoeff(), 0.0);
}

TEST(SampleMvn, DeterministicAcrossThreadCounts) {
    const Matrix root = cholesky_factor(ar1(3, 0.4));
    const RowMatrix a = sample_mvn(root, 10000, 5, 1);
    const RowMatrix b = sample_mvn(root, 10000, 5, 1);
    const RowMatrix c = sample_mvn(root, 10000, 5, 4);
    EXPECT_TRUE(a == b);
    EXPECT_TRUE(a == c);
    EXPECT_THROW(sample_mvn(root, 0, 5), InvalidInput);
}

TEST(SampleMvn, SampleCovarianceMatchesIdentity) {
    const RowMatrix s = sample_mvn(Matrix::Identity(2, 2), 100000, 7);
    const Matrix cov = (s.transpose() * s) / static_cast<double>(s.rows());
    EXPECT_LE((cov - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 0.02);
}

TEST(RectProb, FullSpaceIsOne) {
    const ProbEstimate p = rect_prob(SymMatrix::identity(4), Rectangle::full(4), 4096, 1);
    EXPECT_EQ(p.value, 1.0);
    EXPECT_EQ(p.std_error, 0.0);
}

TEST(RectProb, OrthantMatchesArcsineFormula) {
    const double rho = 0.5;
    const SymMatrix sigma{{1, rho}, {rho, 1}};
    const Rectangle orthant(Vector::Zero(2), Vector::Constant(2, kInf));
    const ProbEstimate p = rect_prob(sigma, orthant, 1 << 14, 11);
    const double exact = 0.25 + std::asin(rho) / (2.0 * std::numbers::pi);
    EXPECT_NEAR(p.value, exact, 1e-3);
    EXPECT_NEAR(p.value, 1.0 / 3.0, 1e-3);
}

TEST(RectProb, ProductCubeMatchesOneDimensionalProduct) {
    const ProbEstimate p = rect_prob(SymMatrix::identity(3), Rectangle::cube(3, -1, 1), 1 << 14, 3);
    const double exact = std::pow(phi(1.0) - phi(-1.0), 3);
    EXPECT_NEAR(p.value, exact, 1e-3);
    EXPECT_NEAR(p.value, 0.318186, 1e-3);
}

TEST(RectProb, ErrorBarCoversTruthForCorrelatedBox) {
    // Bivariate normal box probability by 1-d quadrature of the conditional law.
    const double rho = -0.6, a1 = -0.3, b1 = 1.2, a2 = -1.5, b2 = 0.4;
    const int steps = 20000;
    double exact = 0.0;
    for (int k = 0; k < steps; ++k) {
        const double x = a1 + (b1 - a1) * (k + 0.5) / steps;
        const double s = std::sqrt(1 - rho * rho);
        exact += std::exp(-0.5 * x * x) / std::sqrt(2 * std::numbers::pi) *
                 (phi((b2 - rho * x) / s) - phi((a2 - rho * x) / s));
    }
    exact *= (b1 - a1) / steps;
    Vector lo(2), hi(2);
    lo << a1, a2;
    hi << b1, b2;
    const ProbEstimate p = rect_prob(SymMatrix{{1, rho}, {rho, 1}}, Rectangle(lo, hi), 1 << 13, 4);
    EXPECT_LE(std::abs(p.value - exact), std::max(3 * p.std_error, 1e-6));
}

TEST(RectProb, Errors) {
    EXPECT_THROW(rect_prob(SymMatrix{{1, 2}, {2, 1}}, Rectangle::cube(2, 0, 1), 4096, 1),
                 NotPositiveDefinite);
    EXPECT_THROW(rect_prob(SymMatrix::identity(2), Rectangle::cube(2, 0, 1), 100, 1), InvalidInput);
}

TEST(RectProb, MonotoneAndSymmetric) {
    const SymMatrix sigma = ar1(4, 0.5);
    Rng rng = make_rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        Vector lo(4), hi(4);
        for (int i = 0; i < 4; ++i) {
            const double a = 3 * uniform01(rng) - 2, b = a + 2 * uniform01(rng) + 0.1;
            lo[i] = a;
            hi[i] = b;
        }
        const Rectangle inner(lo, hi);
        const Rectangle outer(lo.array() - 0.3, hi.array() + 0.2);
        const auto pi = rect_prob(sigma, inner, 8192, trial);
        const auto po = rect_prob(sigma, outer, 8192, trial + 100);
        EXPECT_LE(pi.value, po.value + 3 * (pi.std_error + po.std_error));
        const auto pn = rect_prob(sigma, inner.negated(), 8192, trial + 200);
        EXPECT_LE(std::abs(pn.value - pi.value), 3 * (pn.std_error + pi.std_error) + 1e-6);
    }
}

TEST(RectProb, DeterministicAcrossThreads) {
    const SymMatrix sigma = ar1(6, 0.3);
    const Rectangle r = Rectangle::cube(6, -1.0, 1.5);
    const auto a = rect_prob(sigma, r, 8192, 9, 1);
    const auto b = rect_prob(sigma, r, 8192, 9, 3);
    EXPECT_EQ(a.value, b.value);
    EXPECT_EQ(a.std_error, b.std_error);
}

TEST(EmpiricalRectProb, DirectCounts) {
    RowMatrix s(2, 2);
    s << 0, 0, 2, 2;
    EXPECT_DOUBLE_EQ(empirical_rect_prob(s, Rectangle::full(2)), 1.0);
    EXPECT_DOUBLE_EQ(empirical_rect_prob(s, Rectangle::cube(2, -1, 1)), 0.5);
}

TEST(EmpiricalRectProb, HalfLineOfStandardNormal) {
    const RowMatrix s = sample_mvn(Matrix::Identity(1, 1), 100000, 21);
    const Rectangle half(Vector::Constant(1, -kInf), Vector::Zero(1));
    EXPECT_NEAR(empirical_rect_prob(s, half), 0.5, 0.005);
}

TEST(RectProb, AgreesWithEmpiricalOnRandomRectangles) {
    const SymMatrix sigma = ar1(5, 0.4);
    const RowMatrix s = sample_mvn(sigma, 100000, 31);
    Rng rng = make_rng(32);
    for (int trial = 0; trial < 25; ++trial) {
        Vector lo(5), hi(5);
        for (int i = 0; i < 5; ++i) {
            const double u = uniform01(rng);
            lo[i] = u < 0.2 ? -kInf : norm_quantile(0.3 * uniform01(rng));
            hi[i] = u > 0.8 ? kInf : norm_quantile(0.7 + 0.3 * uniform01(rng));
        }
        const Rectangle r(lo, hi);
        EXPECT_NEAR(rect_prob(sigma, r, 8192, trial).value, empirical_rect_prob(s, r), 0.01);
    }
}

TEST(MaxNormTail, UnionBoundRadiusHoldsEmpirically) {
    // P(||Z||_inf > sqrt(2 d_max log(d / delta))) <= delta
    const Eigen::Index d = 20;
    const SymMatrix sigma = ar1(d, 0.5).scaled(2.0);
    const RowMatrix s = sample_mvn(sigma, 50000, 41);
    for (double delta : {0.2, 0.05, 0.01}) {
        const double radius = std::sqrt(2.0) * std::sqrt(2.0 * std::log(d / delta));
        int exceed = 0;
        for (Eigen::Index i = 0; i < s.rows(); ++i) exceed += s.row(i).cwiseAbs().maxCoeff() > radius;
        const double freq = static_cast<double>(exceed) / static_cast<double>(s.rows());
        EXPECT_LE(freq, delta + 3 * std::sqrt(delta / s.rows())) << delta;
    }
}
