#include <gtest/gtest.h>

#include <cmath>

#include "mbe/rng.hpp"
#include "mbe/spectral.hpp"

using namespace mbe;

namespace {

SymMatrix random_psd(Eigen::Index d, std::uint64_t seed, Eigen::Index rank = -1) {
    Rng rng = make_rng(seed);
    std::normal_distribution<double> normal;
    const Eigen::Index k = rank < 0 ? d + 2 : rank;
    Matrix a(d, k);
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j < k; ++j) a(i, j) = normal(rng);
    return SymMatrix(Matrix(a * a.transpose()));
}

}  // namespace

TEST(SymMatrix, RejectsAsymmetricAndRagged) {
    Matrix m(2, 2);
    m << 1, 2, 3, 4;
    EXPECT_THROW(SymMatrix{m}, InvalidInput);
    EXPECT_THROW((SymMatrix{{1, 2}, {2}}), InvalidInput);
    EXPECT_THROW(SymMatrix::checked_psd(SymMatrix{{1, 2}, {2, 1}}.matrix()), NotPSD);
}

TEST(Cholesky, IdentityIsFixedPoint) {
    EXPECT_TRUE(cholesky_factor(SymMatrix::identity(3)).isApprox(Matrix::Identity(3, 3)));
}

TEST(Cholesky, TwoByTwoReconstructs) {
    const SymMatrix m{{4, 2}, {2, 3}};
    const Matrix L = cholesky_factor(m);
    EXPECT_NEAR(L(0, 0), 2.0, 1e-15);
    EXPECT_NEAR(L(1, 0), 1.0, 1e-15);
    EXPECT_NEAR(L(1, 1), 1.41421356237, 1e-10);
    EXPECT_EQ(L(0, 1), 0.0);
    EXPECT_LE((L * L.transpose() - m.matrix()).cwiseAbs().maxCoeff(), 1e-10 * m.max_abs());
}

TEST(Cholesky, IndefiniteThrows) {
    EXPECT_THROW(cholesky_factor(SymMatrix{{1, 2}, {2, 1}}), NotPositiveDefinite);
    EXPECT_THROW(cholesky_factor(SymMatrix::zero(2)), NotPositiveDefinite);
}

TEST(Cholesky, RandomReconstructionContract) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const SymMatrix m = random_psd(6, seed);
        const Matrix L = cholesky_factor(m);
        EXPECT_LE((L * L.transpose() - m.matrix()).cwiseAbs().maxCoeff(), 1e-10 * m.max_abs());
    }
}

TEST(PsdSqrt, IdentityAndDiagonal) {
    EXPECT_TRUE(psd_sqrt(SymMatrix::identity(4)).matrix().isApprox(Matrix::Identity(4, 4)));
    const SymMatrix s = psd_sqrt(SymMatrix{{4, 0}, {0, 9}});
    EXPECT_NEAR(s(0, 0), 2.0, 1e-14);
    EXPECT_NEAR(s(1, 1), 3.0, 1e-14);
    EXPECT_NEAR(s(0, 1), 0.0, 1e-14);
    EXPECT_TRUE(s.psd());
}

TEST(PsdSqrt, SquaringOracleOverRandomDraws) {
    for (std::uint64_t seed = 100; seed < 150; ++seed) {
        // include rank-deficient draws, which sit on the PSD boundary
        const SymMatrix m = random_psd(5, seed, seed % 3 == 0 ? 2 : -1);
        const SymMatrix s = psd_sqrt(m);
        EXPECT_LE((s.matrix() * s.matrix() - m.matrix()).cwiseAbs().maxCoeff(),
                  1e-8 * (1.0 + m.max_abs()))
            << "seed " << seed;
        EXPECT_GE(eigenvalues(s).minCoeff(), -1e-12);
    }
}

TEST(PsdSqrt, RejectsNegativeEigenvalue) {
    EXPECT_THROW(psd_sqrt(SymMatrix{{1, 0}, {0, -1}}), NotPSD);
    // tiny negative eigenvalue within tol_psd is clamped
    const SymMatrix near{{1.0, 0.0}, {0.0, -1e-12}};
    EXPECT_NO_THROW(psd_sqrt(near));
}

TEST(SpectralStats, KnownCases) {
    const auto id = spectral_stats(SymMatrix::identity(4));
    EXPECT_DOUBLE_EQ(id.lambda_min, 1.0);
    EXPECT_DOUBLE_EQ(id.lambda_max, 1.0);
    EXPECT_DOUBLE_EQ(id.d_min, 1.0);
    EXPECT_DOUBLE_EQ(id.d_max, 1.0);
    EXPECT_DOUBLE_EQ(id.op_norm, 1.0);

    const auto diag = spectral_stats(SymMatrix{{0.5, 0}, {0, 2.0}});
    EXPECT_NEAR(diag.lambda_min, 0.5, 1e-15);
    EXPECT_NEAR(diag.lambda_max, 2.0, 1e-15);
    EXPECT_DOUBLE_EQ(diag.d_min, 0.5);
    EXPECT_DOUBLE_EQ(diag.d_max, 2.0);

    // closed form for [[a, b], [b, a]]: a -/+ b
    const auto two = spectral_stats(SymMatrix{{2, 1}, {1, 2}});
    EXPECT_NEAR(two.lambda_min, 1.0, 1e-12);
    EXPECT_NEAR(two.lambda_max, 3.0, 1e-12);
}

TEST(SpectralStats, OrderingAndOpNormProperties) {
    for (std::uint64_t seed = 1; seed <= 30; ++seed) {
        const SymMatrix m = random_psd(4, seed);
        const auto s = spectral_stats(m);
        EXPECT_LE(s.lambda_min, s.d_min + 1e-12);
        EXPECT_LE(s.d_min, s.d_max);
        EXPECT_LE(s.d_max, s.lambda_max + 1e-12);
        EXPECT_DOUBLE_EQ(s.op_norm, std::max(std::abs(s.lambda_min), std::abs(s.lambda_max)));
    }
    for (double c : {0.0, 0.25, 1.0, 7.5}) {
        EXPECT_NEAR(spectral_stats(SymMatrix::identity(3).scaled(c)).op_norm, c, 1e-14);
    }
}

TEST(SpectralStats, LambdaMinSuperadditive) {
    for (std::uint64_t seed = 1; seed <= 40; ++seed) {
        const SymMatrix a = random_psd(5, 2 * seed, 3);
        const SymMatrix b = random_psd(5, 2 * seed + 1);
        EXPECT_GE(spectral_stats(a + b).lambda_min + 1e-10,
                  spectral_stats(a).lambda_min + spectral_stats(b).lambda_min);
    }
}

TEST(Loewner, OrderOnScaledIdentity) {
    const SymMatrix i3 = SymMatrix::identity(3);
    EXPECT_TRUE(loewner_leq(i3, i3.scaled(2.0)));
    EXPECT_TRUE(loewner_leq(i3, i3));
    EXPECT_FALSE(loewner_leq(i3.scaled(2.0), i3));
}
