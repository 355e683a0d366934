#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <string>

#include "mbe/error.hpp"

namespace mbe {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class SymMatrix;
SymMatrix psd_sqrt(const SymMatrix& m);

/// Dense symmetric matrix. Construction symmetrizes the input after checking
/// that it is symmetric to rounding; the PSD flag is set only by checked
/// constructors.
class SymMatrix {
public:
    SymMatrix() = default;

    explicit SymMatrix(Matrix m) : m_(std::move(m)) {
        if (m_.rows() != m_.cols()) throw InvalidInput("SymMatrix: matrix is not square");
        if (m_.rows() == 0) throw InvalidInput("SymMatrix: dimension must be positive");
        const double scale = std::max(1.0, m_.cwiseAbs().maxCoeff());
        if (((m_ - m_.transpose()).cwiseAbs().maxCoeff()) > 1e-12 * scale)
            throw InvalidInput("SymMatrix: matrix is not symmetric");
        m_ = 0.5 * (m_ + m_.transpose()).eval();
    }

    SymMatrix(std::initializer_list<std::initializer_list<double>> rows)
        : SymMatrix(from_rows(rows)) {}

    static SymMatrix identity(Eigen::Index d) {
        SymMatrix s(Matrix::Identity(d, d));
        s.psd_ = true;
        return s;
    }
    static SymMatrix zero(Eigen::Index d) {
        SymMatrix s(Matrix::Zero(d, d));
        s.psd_ = true;
        return s;
    }
    static SymMatrix diagonal(const Vector& diag) {
        SymMatrix s(Matrix(diag.asDiagonal()));
        s.psd_ = (diag.array() >= 0.0).all();
        return s;
    }
    /// Throws NotPSD unless the minimum eigenvalue is >= -tol_psd.
    static SymMatrix checked_psd(Matrix m);

    friend SymMatrix psd_sqrt(const SymMatrix& m);

    Eigen::Index dim() const noexcept { return m_.rows(); }
    double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }
    const Matrix& matrix() const noexcept { return m_; }
    bool psd() const noexcept { return psd_; }
    double max_abs() const { return m_.cwiseAbs().maxCoeff(); }

    SymMatrix scaled(double c) const {
        SymMatrix s(*this);
        s.m_ *= c;
        s.psd_ = psd_ && c >= 0.0;
        return s;
    }

    friend SymMatrix operator+(const SymMatrix& a, const SymMatrix& b) {
        SymMatrix s(a.m_ + b.m_);
        s.psd_ = a.psd_ && b.psd_;
        return s;
    }
    friend SymMatrix operator-(const SymMatrix& a, const SymMatrix& b) {
        return SymMatrix(a.m_ - b.m_);
    }
    friend bool operator==(const SymMatrix& a, const SymMatrix& b) {
        return a.m_.rows() == b.m_.rows() && a.m_ == b.m_;
    }

private:
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const auto d = static_cast<Eigen::Index>(rows.size());
        Matrix m(d, d);
        Eigen::Index i = 0;
        for (const auto& row : rows) {
            if (static_cast<Eigen::Index>(row.size()) != d)
                throw InvalidInput("SymMatrix: ragged initializer");
            Eigen::Index j = 0;
            for (double v : row) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    Matrix m_;
    bool psd_ = false;
};

struct SpectralStats {
    double lambda_min = 0.0;
    double lambda_max = 0.0;
    double d_min = 0.0;
    double d_max = 0.0;
    double op_norm = 0.0;
};

/// Scale-aware PSD tolerance: 1e-10 * dim * max|m_ij|.
inline double tol_psd(const SymMatrix& m) {
    return 1e-10 * static_cast<double>(m.dim()) * m.max_abs();
}

inline Vector eigenvalues(const SymMatrix& m) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(m.matrix(), Eigen::EigenvaluesOnly);
    return es.eigenvalues();
}

inline SymMatrix SymMatrix::checked_psd(Matrix m) {
    SymMatrix s(std::move(m));
    const Vector ev = eigenvalues(s);
    if (ev.minCoeff() < -tol_psd(s))
        throw NotPSD("matrix has eigenvalue " + std::to_string(ev.minCoeff()));
    s.psd_ = true;
    return s;
}

/// Lower-triangular L with L * L^T == m. Throws NotPositiveDefinite when a
/// pivot falls to tol_psd or below.
inline Matrix cholesky_factor(const SymMatrix& m) {
    const Eigen::Index d = m.dim();
    const double tol = tol_psd(m);
    Matrix L = Matrix::Zero(d, d);
    for (Eigen::Index j = 0; j < d; ++j) {
        double pivot = m(j, j);
        for (Eigen::Index k = 0; k < j; ++k) pivot -= L(j, k) * L(j, k);
        if (!(pivot > tol))
            throw NotPositiveDefinite("cholesky pivot " + std::to_string(pivot) + " at index " +
                                      std::to_string(j));
        const double ljj = std::sqrt(pivot);
        L(j, j) = ljj;
        for (Eigen::Index i = j + 1; i < d; ++i) {
            double s = m(i, j);
            for (Eigen::Index k = 0; k < j; ++k) s -= L(i, k) * L(j, k);
            L(i, j) = s / ljj;
        }
    }
    return L;
}

/// Symmetric PSD square root. Eigenvalues in [-tol_psd, 0) are clamped to 0.
inline SymMatrix psd_sqrt(const SymMatrix& m) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(m.matrix());
    const Vector& ev = es.eigenvalues();
    const double tol = tol_psd(m);
    if (ev.minCoeff() < -tol)
        throw NotPSD("psd_sqrt: eigenvalue " + std::to_string(ev.minCoeff()) + " below -" +
                     std::to_string(tol));
    const Vector root = ev.cwiseMax(0.0).cwiseSqrt();
    const Matrix& q = es.eigenvectors();
    Matrix s = q * root.asDiagonal() * q.transpose();
    s = 0.5 * (s + s.transpose()).eval();
    SymMatrix out(std::move(s));
    out.psd_ = true;
    return out;
}

inline SpectralStats spectral_stats(const SymMatrix& m) {
    const Vector ev = eigenvalues(m);
    const Vector diag = m.matrix().diagonal();
    SpectralStats s;
    s.lambda_min = ev.minCoeff();
    s.lambda_max = ev.maxCoeff();
    s.d_min = diag.minCoeff();
    s.d_max = diag.maxCoeff();
    s.op_norm = std::max(std::abs(s.lambda_min), std::abs(s.lambda_max));
    return s;
}

inline double op_norm(const SymMatrix& m) {
    const Vector ev = eigenvalues(m);
    return std::max(std::abs(ev.minCoeff()), std::abs(ev.maxCoeff()));
}

/// Loewner order a <= b, i.e. b - a is PSD within tol_psd of b.
inline bool loewner_leq(const SymMatrix& a, const SymMatrix& b) {
    const SymMatrix diff = b - a;
    const double tol = 1e-10 * static_cast<double>(b.dim()) * std::max(b.max_abs(), a.max_abs());
    return eigenvalues(diff).minCoeff() >= -tol;
}

}  // namespace mbe
