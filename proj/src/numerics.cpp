#include "dpvil/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace dpvil {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeMismatch("matrix data length " + std::to_string(data_.size()) +
                        " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeMismatch("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> d) {
  Matrix m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix& Matrix::operator+=(const Matrix& other) {
  if (rows_ != other.rows_ || cols_ != other.cols_) throw ShapeMismatch("matrix +=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  if (rows_ != other.rows_ || cols_ != other.cols_) throw ShapeMismatch("matrix -=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul inner dimensions");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw ShapeMismatch("matvec");
  Vector y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
  return y;
}

Matrix outer(std::span<const double> a, std::span<const double> b) {
  Matrix m(a.size(), b.size());
  add_outer(m, a, b);
  return m;
}

void add_outer(Matrix& a, std::span<const double> x, std::span<const double> y, double s) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = s * x[i];
    auto row = a.row(i);
    for (std::size_t j = 0; j < y.size(); ++j) row[j] += xi * y[j];
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double trace(const Matrix& a) {
  double t = 0.0;
  for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) t += a(i, i);
  return t;
}

double frobenius(const Matrix& a) { return norm(a.values()); }

double max_asymmetry(const Matrix& a) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      worst = std::max(worst, std::abs(a(i, j) - a(j, i)));
  return worst;
}

Matrix symmetrized(const Matrix& a) {
  Matrix s = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j) s(i, j) = s(j, i) = 0.5 * (a(i, j) + a(j, i));
  return s;
}

Matrix solve(const Matrix& a, const Matrix& b) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.rows() != n) throw ShapeMismatch("solve");
  Matrix lu = a;
  Matrix x = b;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(lu(i, k)) > std::abs(lu(piv, k))) piv = i;
    if (lu(piv, k) == 0.0) throw NotPositiveDefinite("singular matrix in solve");
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu(k, j), lu(piv, j));
      for (std::size_t j = 0; j < x.cols(); ++j) std::swap(x(k, j), x(piv, j));
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = lu(i, k) / lu(k, k);
      if (f == 0.0) continue;
      for (std::size_t j = k; j < n; ++j) lu(i, j) -= f * lu(k, j);
      for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) -= f * x(k, j);
    }
  }
  for (std::size_t k = n; k-- > 0;) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double s = x(k, j);
      for (std::size_t i = k + 1; i < n; ++i) s -= lu(k, i) * x(i, j);
      x(k, j) = s / lu(k, k);
    }
  }
  return x;
}

Matrix inverse(const Matrix& a) { return solve(a, Matrix::identity(a.rows())); }

// Scaling and squaring with a [6/6] Padé approximant.
Matrix expm(const Matrix& a) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ShapeMismatch("expm needs a square matrix");
  double norm1 = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < n; ++i) col += std::abs(a(i, j));
    norm1 = std::max(norm1, col);
  }
  int squarings = 0;
  if (norm1 > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm1 / 0.5)));
  const Matrix x = a * std::ldexp(1.0, -squarings);

  constexpr int q = 6;
  double c = 1.0;
  Matrix term = Matrix::identity(n);
  Matrix num = Matrix::identity(n);
  Matrix den = Matrix::identity(n);
  for (int k = 1; k <= q; ++k) {
    c *= static_cast<double>(q - k + 1) / static_cast<double>(k * (2 * q - k + 1));
    term = matmul(x, term);
    num += term * c;
    den += term * ((k % 2 == 0) ? c : -c);
  }
  Matrix e = solve(den, num);
  for (int s = 0; s < squarings; ++s) e = matmul(e, e);
  return e;
}

Matrix SpdFactor::reconstruct() const { return matmul(lower_, lower_.transposed()); }

Vector SpdFactor::solve(std::span<const double> b) const {
  const std::size_t n = dim();
  Vector y(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    double s = y[i];
    for (std::size_t k = 0; k < i; ++k) s -= lower_(i, k) * y[k];
    y[i] = s / lower_(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = y[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= lower_(k, i) * y[k];
    y[i] = s / lower_(i, i);
  }
  return y;
}

Matrix SpdFactor::inverse() const {
  const std::size_t n = dim();
  Matrix inv(n, n);
  Vector e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    const Vector col = solve(e);
    for (std::size_t i = 0; i < n; ++i) inv(i, j) = col[i];
    e[j] = 0.0;
  }
  return symmetrized(inv);
}

double SpdFactor::quad_form(std::span<const double> x) const {
  const std::size_t n = dim();
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double t = 0.0;
    for (std::size_t i = j; i < n; ++i) t += lower_(i, j) * x[i];
    s += t * t;
  }
  return s;
}

double SpdFactor::inverse_quad_form(std::span<const double> x) const {
  const std::size_t n = dim();
  Vector y(x.begin(), x.end());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double t = y[i];
    for (std::size_t k = 0; k < i; ++k) t -= lower_(i, k) * y[k];
    y[i] = t / lower_(i, i);
    s += y[i] * y[i];
  }
  return s;
}

SpdFactor cholesky(const Matrix& m) {
  const std::size_t n = m.rows();
  if (m.cols() != n) throw ShapeMismatch("cholesky needs a square matrix");
  double scale = 1.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(m(i, i)));
  if (max_asymmetry(m) > 1e-9 * scale) throw NotPositiveDefinite("matrix is not symmetric");
  Matrix l(n, n);
  double log_det = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw NotPositiveDefinite("non-positive pivot at column " + std::to_string(j));
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    log_det += 2.0 * std::log(ljj);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return SpdFactor(std::move(l), log_det);
}

SpdFactor cholesky_jittered(const Matrix& m) {
  try {
    return cholesky(m);
  } catch (const NotPositiveDefinite&) {
  }
  for (double eps = 1e-10; eps <= 1e-6 * 1.0001; eps *= 10.0) {
    Matrix j = m;
    for (std::size_t i = 0; i < j.rows(); ++i) j(i, i) += eps;
    try {
      return cholesky(j);
    } catch (const NotPositiveDefinite&) {
    }
  }
  throw NotPositiveDefinite("jitter exhausted at 1e-6");
}

double digamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) throw DomainError("digamma requires x > 0");
  double acc = 0.0;
  while (x < 10.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // Asymptotic series with Bernoulli coefficients B_2k / (2k).
  const double series =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 -
                              inv2 * (1.0 / 240.0 -
                                      inv2 * (1.0 / 132.0 -
                                              inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
  return acc + std::log(x) - 0.5 * inv - series;
}

double log_gamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) throw DomainError("log_gamma requires x > 0");
  double shift = 0.0;
  while (x < 10.0) {
    shift -= std::log(x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  const double series =
      inv * (1.0 / 12.0 -
             inv2 * (1.0 / 360.0 -
                     inv2 * (1.0 / 1260.0 -
                             inv2 * (1.0 / 1680.0 -
                                     inv2 * (1.0 / 1188.0 -
                                             inv2 * (691.0 / 360360.0 - inv2 / 156.0))))));
  return shift + (x - 0.5) * std::log(x) - x + 0.5 * std::log(2.0 * std::numbers::pi) + series;
}

double log_multigamma(std::size_t dim, double x) {
  const double d = static_cast<double>(dim);
  double s = 0.25 * d * (d - 1.0) * std::log(std::numbers::pi);
  for (std::size_t i = 1; i <= dim; ++i) s += log_gamma(x + 0.5 * (1.0 - static_cast<double>(i)));
  return s;
}

double multi_digamma(std::size_t dim, double x) {
  double s = 0.0;
  for (std::size_t i = 1; i <= dim; ++i) s += digamma(x + 0.5 * (1.0 - static_cast<double>(i)));
  return s;
}

Vector principal_eigvec(const Matrix& s, int max_iter, double tol) {
  const std::size_t n = s.rows();
  if (s.cols() != n || n == 0) throw ShapeMismatch("principal_eigvec needs a square matrix");
  // Start from the column with the largest norm; it has a nonzero component
  // along the dominant direction unless that direction vanishes there.
  std::size_t best = 0;
  double best_norm = -1.0;
  for (std::size_t j = 0; j < n; ++j) {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) c += s(i, j) * s(i, j);
    if (c > best_norm) {
      best_norm = c;
      best = j;
    }
  }
  if (!(best_norm > 0.0)) throw NoConvergence("zero matrix has no principal direction");
  Vector v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = s(i, best);
  double nv = norm(v);
  for (double& x : v) x /= nv;

  auto canonical = [](Vector& u) {
    for (double x : u) {
      if (std::abs(x) > 1e-14) {
        if (x < 0.0)
          for (double& y : u) y = -y;
        return;
      }
    }
  };

  canonical(v);
  for (int it = 0; it < max_iter; ++it) {
    Vector w = matvec(s, v);
    nv = norm(w);
    if (!(nv > 0.0) || !std::isfinite(nv)) throw NoConvergence("power iteration collapsed");
    for (double& x : w) x /= nv;
    canonical(w);
    double delta = 0.0;
    for (std::size_t i = 0; i < n; ++i) delta = std::max(delta, std::abs(w[i] - v[i]));
    v = std::move(w);
    if (delta < tol) return v;
  }
  throw NoConvergence("power iteration did not converge in " + std::to_string(max_iter) +
                      " iterations");
}

SymmetricEigen symmetric_eigen(const Matrix& s, int max_sweeps) {
  const std::size_t n = s.rows();
  if (s.cols() != n) throw ShapeMismatch("symmetric_eigen needs a square matrix");
  Matrix a = symmetrized(s);
  Matrix v = Matrix::identity(n);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    double diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      diag += a(i, i) * a(i, i);
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    }
    if (off <= 1e-30 * std::max(diag, 1e-300)) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  SymmetricEigen out{Vector(n), Matrix(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = v(i, order[j]);
  }
  return out;
}

double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace dpvil
