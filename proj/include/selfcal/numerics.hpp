#pragma once

// Dense 64-bit kernels shared by the model, trainer and compressors.
//
// Every product below uses a fixed loop order, so results are bit-identical
// across runs regardless of how callers schedule independent invocations.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "selfcal/common.hpp"

namespace selfcal::numerics {

class DecompositionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SingularMatrixError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    Matrix transposed() const;
    void fill(double v);

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// a * b.
Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T. Used for `activations * weight^T` with weights stored out x in.
Matrix matmul_bt(const Matrix& a, const Matrix& b);
// a^T * b.
Matrix matmul_at(const Matrix& a, const Matrix& b);
// out += a^T * b, accumulated row by row of a/b in index order.
void accumulate_at(Matrix& out, const Matrix& a, const Matrix& b);

std::vector<double> softmax_with_temperature(std::span<const double> logits, double temperature);

// Lower-triangular L with L * L^T == h. Throws DecompositionError when h is
// not numerically positive definite.
Matrix cholesky(const Matrix& h);

// (L * L^T)^-1 from a lower Cholesky factor, via triangular solves.
Matrix inverse_from_cholesky(const Matrix& l);

double frobenius_norm(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace selfcal::numerics
