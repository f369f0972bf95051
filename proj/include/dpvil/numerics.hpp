#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "dpvil/error.hpp"

namespace dpvil {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> d);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  Matrix transposed() const;
  bool all_finite() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix matmul(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);
Matrix outer(std::span<const double> a, std::span<const double> b);
// a += s * x yᵀ
void add_outer(Matrix& a, std::span<const double> x, std::span<const double> y, double s = 1.0);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
double trace(const Matrix& a);
double frobenius(const Matrix& a);
double max_asymmetry(const Matrix& a);
Matrix symmetrized(const Matrix& a);

// Gaussian elimination with partial pivoting; solves A X = B.
Matrix solve(const Matrix& a, const Matrix& b);
Matrix inverse(const Matrix& a);
Matrix expm(const Matrix& a);

// Cholesky factor L (lower) with cached log-determinant of L·Lᵀ.
class SpdFactor {
 public:
  SpdFactor() = default;
  SpdFactor(Matrix lower, double log_det) : lower_(std::move(lower)), log_det_(log_det) {}

  const Matrix& lower() const noexcept { return lower_; }
  double log_det() const noexcept { return log_det_; }
  std::size_t dim() const noexcept { return lower_.rows(); }

  Matrix reconstruct() const;
  // A⁻¹ b
  Vector solve(std::span<const double> b) const;
  Matrix inverse() const;
  // xᵀ A x computed as ‖Lᵀx‖².
  double quad_form(std::span<const double> x) const;
  // xᵀ A⁻¹ x computed as ‖L⁻¹x‖².
  double inverse_quad_form(std::span<const double> x) const;

 private:
  Matrix lower_;
  double log_det_ = 0.0;
};

SpdFactor cholesky(const Matrix& m);
// Retries with ε·I added, ε = 1e-10 … 1e-6 in decades, before giving up.
SpdFactor cholesky_jittered(const Matrix& m);

double digamma(double x);
double log_gamma(double x);
// ln Γ_D(x), the multivariate gamma function.
double log_multigamma(std::size_t dim, double x);
// Σ_{i=1..D} ψ(x + (1 − i)/2)
double multi_digamma(std::size_t dim, double x);

// Dominant eigenvector by power iteration, unit norm, first nonzero entry positive.
Vector principal_eigvec(const Matrix& s, int max_iter = 1000, double tol = 1e-12);

struct SymmetricEigen {
  Vector values;   // descending
  Matrix vectors;  // column j pairs with values[j]
};
// Cyclic Jacobi rotations; intended for small dense matrices.
SymmetricEigen symmetric_eigen(const Matrix& s, int max_sweeps = 100);

double log_sum_exp(std::span<const double> v);

}  // namespace dpvil
