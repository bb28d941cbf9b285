#include "selfcal/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace selfcal::numerics {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "Matrix: data length must equal rows*cols");
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) {
            t(c, r) = (*this)(r, c);
        }
    }
    return t;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

namespace {

// c[i, :] += alpha * b_row, written so the compiler can vectorize it.
inline void axpy(double* __restrict c, const double* __restrict b, double alpha, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
        c[j] += alpha * b[j];
    }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Matrix c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik != 0.0) {
                axpy(ci, b.row(k).data(), aik, n);
            }
        }
    }
    return c;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.cols(), "matmul_bt: inner dimensions differ");
    return matmul(a, b.transposed());
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows(), "matmul_at: inner dimensions differ");
    Matrix c(a.cols(), b.cols());
    accumulate_at(c, a, b);
    return c;
}

void accumulate_at(Matrix& out, const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows(), "accumulate_at: inner dimensions differ");
    require(out.rows() == a.cols() && out.cols() == b.cols(), "accumulate_at: output shape");
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* bk = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki != 0.0) {
                axpy(out.row(i).data(), bk, aki, n);
            }
        }
    }
}

std::vector<double> softmax_with_temperature(std::span<const double> logits, double temperature) {
    require(!logits.empty(), "softmax_with_temperature: empty logits");
    require(temperature >= 0.0, "softmax_with_temperature: negative temperature");
    std::vector<double> p(logits.size(), 0.0);
    const auto best = static_cast<std::size_t>(
        std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (temperature == 0.0) {
        p[best] = 1.0;  // max_element returns the first maximum
        return p;
    }
    const double top = logits[best];
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp((logits[i] - top) / temperature);
        sum += p[i];
    }
    for (double& v : p) {
        v /= sum;
    }
    return p;
}

Matrix cholesky(const Matrix& h) {
    require(h.rows() == h.cols(), "cholesky: matrix must be square");
    const std::size_t n = h.rows();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            const double tol = 1e-9 * std::max({1.0, std::abs(h(i, j)), std::abs(h(j, i))});
            require(std::abs(h(i, j) - h(j, i)) <= tol, "cholesky: matrix is not symmetric");
        }
    }
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double diag = h(j, j);
        const double* lj = l.row(j).data();
        for (std::size_t k = 0; k < j; ++k) {
            diag -= lj[k] * lj[k];
        }
        if (!(diag > 0.0) || !std::isfinite(diag)) {
            throw DecompositionError("cholesky: matrix is not positive definite (pivot " +
                                     std::to_string(j) + ")");
        }
        const double ljj = std::sqrt(diag);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            const double* li = l.row(i).data();
            double s = h(i, j);
            for (std::size_t k = 0; k < j; ++k) {
                s -= li[k] * lj[k];
            }
            l(i, j) = s / ljj;
        }
    }
    return l;
}

Matrix inverse_from_cholesky(const Matrix& l) {
    require(l.rows() == l.cols(), "inverse_from_cholesky: matrix must be square");
    const std::size_t n = l.rows();
    for (std::size_t i = 0; i < n; ++i) {
        if (l(i, i) == 0.0) {
            throw SingularMatrixError("inverse_from_cholesky: zero diagonal entry");
        }
    }
    // Linv = L^-1 (lower), then H^-1 = Linv^T * Linv.
    Matrix linv(n, n);
    for (std::size_t c = 0; c < n; ++c) {
        linv(c, c) = 1.0 / l(c, c);
        for (std::size_t i = c + 1; i < n; ++i) {
            double s = 0.0;
            for (std::size_t k = c; k < i; ++k) {
                s -= l(i, k) * linv(k, c);
            }
            linv(i, c) = s / l(i, i);
        }
    }
    Matrix inv(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t k = i; k < n; ++k) {
                s += linv(k, i) * linv(k, j);
            }
            inv(i, j) = s;
            inv(j, i) = s;
        }
    }
    return inv;
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data()) {
        s += v * v;
    }
    return std::sqrt(s);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    }
    return m;
}

}  // namespace selfcal::numerics
