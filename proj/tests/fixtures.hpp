#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dpvil/dpmm.hpp"
#include "dpvil/rng.hpp"
#include "dpvil/vae.hpp"
#include "oracles.hpp"

namespace fixture {

using namespace dpvil;

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

// DPMM over `dim` latent dimensions with `k` active components fitted to random points.
inline DpmmState random_dpmm(std::size_t dim, std::size_t k, Rng& rng) {
  DpPrior p = DpPrior::weakly_informative(0.5 + 4.0 * rng.uniform(), Vector(dim, 0.0));
  DpmmState s = DpmmState::initial(p);
  s.stats.components.clear();
  for (std::size_t c = 0; c < k; ++c) {
    ComponentStats st(dim);
    Vector center(dim);
    for (double& v : center) v = 2.0 * rng.normal();
    const int n = 3 + static_cast<int>(rng.below(8));
    for (int i = 0; i < n; ++i) {
      Vector z(dim);
      for (std::size_t j = 0; j < dim; ++j) z[j] = center[j] + 0.5 * rng.normal();
      st.add_point(z, 1.0);
    }
    s.stats.components.push_back(st);
  }
  std::sort(s.stats.components.begin(), s.stats.components.end(),
            [](const auto& a, const auto& b) { return a.n > b.n; });
  s.memory.assign(k, ComponentStats(dim));
  s.ids.resize(k);
  std::iota(s.ids.begin(), s.ids.end(), 0);
  s.next_id = k;
  auto [nw, sticks] = posterior_from_stats(p, s.stats);
  s.nw = std::move(nw);
  s.sticks = std::move(sticks);
  return s;
}

inline MlpParams random_params(std::size_t in, std::vector<std::size_t> hidden, std::size_t latent,
                               std::uint64_t seed) {
  VaeArchitecture arch;
  arch.input_dim = in;
  arch.hidden = std::move(hidden);
  arch.latent_dim = latent;
  MlpParams p = init_params(arch, seed);
  // Non-zero biases so every code path carries signal.
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (auto& t : tensors(p))
    if (t.name.ends_with("bias"))
      for (double& b : t.data) b = 0.3 * rng.normal();
  return p;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  std::string worst;
};

// Every analytic gradient entry against central differences with step h.
// The relative error uses max(|a|, |f|, guard) as denominator.
inline GradCheck gradient_check(const MlpParams& p, const Matrix& x, const Matrix& eps, const DpmmState& s,
                                double gamma, double scale, double h = 1e-5, double guard = 1e-6) {
  const BatchGradient analytic = backprop(p, x, eps, s, gamma, scale);
  Matrix weights(x.rows(), s.active());
  for (std::size_t n = 0; n < x.rows(); ++n) {
    double tail = 0.0;
    const Vector w = responsibilities_row(s, analytic.latent_means.row(n), tail);
    std::copy(w.begin(), w.end(), weights.row(n).begin());
  }
  GradCheck out;
  MlpParams probe = p;
  auto pt = tensors(probe);
  const auto gt = tensors(analytic.grad);
  for (std::size_t t = 0; t < pt.size(); ++t) {
    for (std::size_t i = 0; i < pt[t].data.size(); ++i) {
      const double orig = pt[t].data[i];
      pt[t].data[i] = orig + h;
      const double up = oracle::frozen_objective(probe, x, eps, s, weights, gamma, scale);
      pt[t].data[i] = orig - h;
      const double down = oracle::frozen_objective(probe, x, eps, s, weights, gamma, scale);
      pt[t].data[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double a = gt[t].data[i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), guard});
      ++out.entries;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = pt[t].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

}  // namespace fixture
