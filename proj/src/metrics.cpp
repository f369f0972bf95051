#include "dpvil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <unordered_map>

namespace dpvil {

namespace {

void check_pair(std::size_t a, std::size_t b) {
  if (a != b) throw ShapeMismatch("labelings differ in length");
  if (a == 0) throw EmptyDataset("labelings are empty");
}

std::vector<int> dense(std::span<const int> labels, std::size_t& classes) {
  std::map<int, int> index;
  for (int l : labels) {
    if (l < 0) throw ShapeMismatch("labels must be non-negative");
    index.emplace(l, 0);
  }
  int next = 0;
  for (auto& [label, i] : index) i = next++;
  classes = index.size();
  std::vector<int> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(index[l]);
  return out;
}

double comb2(double n) { return n * (n - 1.0) / 2.0; }

}  // namespace

Matrix contingency(std::span<const int> pred, std::span<const int> truth) {
  check_pair(pred.size(), truth.size());
  std::size_t rp = 0, ct = 0;
  const auto p = dense(pred, rp);
  const auto t = dense(truth, ct);
  Matrix m(rp, ct);
  for (std::size_t i = 0; i < p.size(); ++i) m(static_cast<std::size_t>(p[i]), static_cast<std::size_t>(t[i])) += 1.0;
  return m;
}

Assignment max_weight_assignment(const Matrix& w) {
  const std::size_t rows = w.rows(), cols = w.cols();
  const std::size_t n = std::max(rows, cols);
  Assignment out;
  out.column_of_row.assign(rows, -1);
  if (n == 0) return out;
  double big = 0.0;
  for (double v : w.values()) big = std::max(big, v);
  // Minimize cost = big − weight over the padded square; padding has weight 0.
  auto cost = [&](std::size_t i, std::size_t j) { return big - (i < rows && j < cols ? w(i, j) : 0.0); };

  // Potentials u, v and matching p (1-based, column 0 is a sentinel).
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= n; ++j) {
    const std::size_t i = p[j] - 1;
    if (i < rows && j - 1 < cols) {
      out.column_of_row[i] = static_cast<int>(j - 1);
      out.total += w(i, j - 1);
    }
  }
  return out;
}

double acc(std::span<const int> pred, std::span<const int> truth) {
  const Matrix c = contingency(pred, truth);
  return max_weight_assignment(c).total / static_cast<double>(pred.size());
}

double ari(std::span<const int> pred, std::span<const int> truth) {
  const Matrix c = contingency(pred, truth);
  const double n = static_cast<double>(pred.size());
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  Vector col(c.cols(), 0.0);
  for (std::size_t i = 0; i < c.rows(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < c.cols(); ++j) {
      index += comb2(c(i, j));
      row += c(i, j);
      col[j] += c(i, j);
    }
    sum_a += comb2(row);
  }
  for (double b : col) sum_b += comb2(b);
  if (n < 2.0) return 1.0;
  const double expected = sum_a * sum_b / comb2(n);
  const double max_index = 0.5 * (sum_a + sum_b);
  // Both partitions trivial (one cluster, or all singletons): identical by construction.
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

double nmi(std::span<const int> pred, std::span<const int> truth) {
  const Matrix c = contingency(pred, truth);
  const double n = static_cast<double>(pred.size());
  Vector a(c.rows(), 0.0), b(c.cols(), 0.0);
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (std::size_t j = 0; j < c.cols(); ++j) {
      a[i] += c(i, j);
      b[j] += c(i, j);
    }
  auto entropy = [n](const Vector& counts) {
    double h = 0.0;
    for (double x : counts)
      if (x > 0.0) h -= (x / n) * std::log(x / n);
    return h;
  };
  const double ha = entropy(a), hb = entropy(b);
  if (ha == 0.0 && hb == 0.0) return 1.0;
  double mi = 0.0;
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (std::size_t j = 0; j < c.cols(); ++j)
      if (c(i, j) > 0.0) mi += (c(i, j) / n) * std::log(n * c(i, j) / (a[i] * b[j]));
  return std::clamp(mi / (0.5 * (ha + hb)), 0.0, 1.0);
}

double dda(const std::vector<bool>& flags, std::span<const int> truth) {
  check_pair(flags.size(), truth.size());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) hit += flags[i] == (truth[i] != 0);
  return static_cast<double>(hit) / static_cast<double>(flags.size());
}

MetricSummary evaluate(std::span<const int> pred, const std::vector<bool>& flags, std::span<const int> truth) {
  return {acc(pred, truth), ari(pred, truth), nmi(pred, truth), dda(flags, truth)};
}

std::vector<int> compact_labels(std::span<const std::uint64_t> ids) {
  std::unordered_map<std::uint64_t, int> index;
  std::vector<int> out;
  out.reserve(ids.size());
  for (std::uint64_t id : ids) out.push_back(index.emplace(id, static_cast<int>(index.size())).first->second);
  return out;
}

Projection pca2d(const Matrix& z) {
  if (z.rows() < 2) throw EmptyDataset("projection needs at least two rows");
  const std::size_t n = z.rows(), d = z.cols();
  Vector mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += z(r, j) / static_cast<double>(n);
  Matrix centred = z;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) centred(r, j) -= mean[j];
  Matrix cov = matmul(centred.transposed(), centred) * (1.0 / static_cast<double>(n - 1));
  const SymmetricEigen eig = symmetric_eigen(symmetrized(cov));
  Projection p;
  p.variances = eig.values;
  const std::size_t k = std::min<std::size_t>(2, d);
  p.axes = Matrix(d, 2);
  for (std::size_t c = 0; c < k; ++c) {
    // Sign convention: the largest-magnitude loading is positive.
    std::size_t arg = 0;
    for (std::size_t j = 0; j < d; ++j)
      if (std::abs(eig.vectors(j, c)) > std::abs(eig.vectors(arg, c))) arg = j;
    const double s = eig.vectors(arg, c) < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j) p.axes(j, c) = s * eig.vectors(j, c);
  }
  p.coords = matmul(centred, p.axes);
  return p;
}

}  // namespace dpvil
