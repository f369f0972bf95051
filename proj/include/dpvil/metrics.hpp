#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dpvil/numerics.hpp"

namespace dpvil {

// Counts n_ij of rows with pred-class i and truth-class j; classes are the
// distinct label values in ascending order.
Matrix contingency(std::span<const int> pred, std::span<const int> truth);

struct Assignment {
  double total = 0.0;
  std::vector<int> column_of_row;  // −1 where a row is left unmatched
};

// Maximum-weight matching of rows to columns of a rectangular matrix
// (Hungarian method on the zero-padded square problem).
Assignment max_weight_assignment(const Matrix& weights);

double acc(std::span<const int> pred, std::span<const int> truth);
double ari(std::span<const int> pred, std::span<const int> truth);
double nmi(std::span<const int> pred, std::span<const int> truth);
// `flags[i]` is true when sample i is reported anomalous; truth label 0 means healthy.
double dda(const std::vector<bool>& flags, std::span<const int> truth);

struct MetricSummary {
  double acc = 0.0;
  double ari = 0.0;
  double nmi = 0.0;
  double dda = 0.0;
};

MetricSummary evaluate(std::span<const int> pred, const std::vector<bool>& flags, std::span<const int> truth);

// Relabels arbitrary ids as 0, 1, 2, ... in order of first appearance.
std::vector<int> compact_labels(std::span<const std::uint64_t> ids);

struct Projection {
  Matrix coords;      // N × 2
  Vector variances;   // eigenvalues of the sample covariance, descending
  Matrix axes;        // D × 2
};

Projection pca2d(const Matrix& z);

}  // namespace dpvil
