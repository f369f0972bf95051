#pragma once

// Independent reference implementations used only by tests. They follow the
// textbook variational-GMM formulas (Normal-Wishart normalizers, Wishart
// entropy, explicit truncation of the stick-breaking tail) and deliberately
// share no code paths with the library beyond special functions.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "dpvil/dpmm.hpp"
#include "dpvil/numerics.hpp"
#include "dpvil/vae.hpp"

namespace oracle {

using dpvil::Matrix;
using dpvil::Vector;

inline double det_small(const Matrix& a) {
  // LU without pivoting is fine for the SPD inputs used here.
  Matrix m = a;
  double det = 1.0;
  for (std::size_t k = 0; k < m.rows(); ++k) {
    det *= m(k, k);
    for (std::size_t i = k + 1; i < m.rows(); ++i) {
      const double f = m(i, k) / m(k, k);
      for (std::size_t j = k; j < m.cols(); ++j) m(i, j) -= f * m(k, j);
    }
  }
  return det;
}

inline Matrix inv_small(const Matrix& a) {
  const std::size_t n = a.rows();
  Matrix aug(n, 2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) aug(i, j) = a(i, j);
    aug(i, n + i) = 1.0;
  }
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(aug(i, k)) > std::abs(aug(p, k))) p = i;
    for (std::size_t j = 0; j < 2 * n; ++j) std::swap(aug(k, j), aug(p, j));
    const double piv = aug(k, k);
    for (std::size_t j = 0; j < 2 * n; ++j) aug(k, j) /= piv;
    for (std::size_t i = 0; i < n; ++i) {
      if (i == k) continue;
      const double f = aug(i, k);
      for (std::size_t j = 0; j < 2 * n; ++j) aug(i, j) -= f * aug(k, j);
    }
  }
  Matrix inv(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) inv(i, j) = aug(i, n + j);
  return inv;
}

inline double quad(const Matrix& w, const Vector& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) s += x[i] * w(i, j) * x[j];
  return s;
}

// ln B(W, ν): Wishart normalizer.
inline double log_wishart_b(const Matrix& w, double nu) {
  const double d = static_cast<double>(w.rows());
  double s = -0.5 * nu * std::log(det_small(w)) - 0.5 * nu * d * std::log(2.0) -
             0.25 * d * (d - 1.0) * std::log(std::numbers::pi);
  for (std::size_t i = 1; i <= w.rows(); ++i) s -= std::lgamma(0.5 * (nu + 1.0 - static_cast<double>(i)));
  return s;
}

inline double e_log_det(const Matrix& w, double nu) {
  const double d = static_cast<double>(w.rows());
  double s = d * std::log(2.0) + std::log(det_small(w));
  for (std::size_t i = 1; i <= w.rows(); ++i) s += dpvil::digamma(0.5 * (nu + 1.0 - static_cast<double>(i)));
  return s;
}

struct Comp {
  Vector m;
  double beta;
  Matrix w;
  double nu;
};

// Textbook truncated-DP variational GMM bound. Components beyond the active
// ones carry the prior (explicitly enumerated up to `truncation`), so their
// own KL terms vanish; optimal responsibilities are recomputed here.
inline double textbook_elbo(const dpvil::DpmmState& s, const Matrix& z, std::size_t truncation = 800) {
  const std::size_t d = s.dim();
  const double dd = static_cast<double>(d);
  const double alpha = s.prior.alpha;
  const std::size_t k_a = s.active();
  const Comp prior{s.prior.mean, s.prior.lambda, s.prior.scale, s.prior.dof};
  std::vector<Comp> comps;
  for (const auto& q : s.nw) comps.push_back({q.mean, q.lambda, q.scale, q.dof});

  // stick expectations for k < truncation
  std::vector<double> a(truncation), b(truncation);
  for (std::size_t k = 0; k < truncation; ++k) {
    if (k < k_a) {
      a[k] = s.sticks[k].a;
      b[k] = s.sticks[k].b;
    } else {
      a[k] = 1.0;
      b[k] = alpha;
    }
  }
  std::vector<double> e_log_pi(truncation);
  double acc = 0.0;
  for (std::size_t k = 0; k < truncation; ++k) {
    e_log_pi[k] = acc + dpvil::digamma(a[k]) - dpvil::digamma(a[k] + b[k]);
    acc += dpvil::digamma(b[k]) - dpvil::digamma(a[k] + b[k]);
  }

  auto comp_of = [&](std::size_t k) -> const Comp& { return k < k_a ? comps[k] : prior; };
  const double elog_prior = e_log_det(prior.w, prior.nu);
  std::vector<double> elog(k_a);
  for (std::size_t k = 0; k < k_a; ++k) elog[k] = e_log_det(comps[k].w, comps[k].nu);

  double bound = 0.0;
  std::vector<double> log_rho(truncation);
  for (std::size_t n = 0; n < z.rows(); ++n) {
    Vector zn(z.row(n).begin(), z.row(n).end());
    double mx = -1e300;
    for (std::size_t k = 0; k < truncation; ++k) {
      const Comp& c = comp_of(k);
      Vector diff(d);
      for (std::size_t i = 0; i < d; ++i) diff[i] = zn[i] - c.m[i];
      const double el = k < k_a ? elog[k] : elog_prior;
      // E[ln p(z_n | c_n = k, μ, Λ)]
      const double ll = 0.5 * (el - dd / c.beta - c.nu * quad(c.w, diff) - dd * std::log(2.0 * std::numbers::pi));
      log_rho[k] = e_log_pi[k] + ll;
      mx = std::max(mx, log_rho[k]);
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < truncation; ++k) norm += std::exp(log_rho[k] - mx);
    const double log_norm = mx + std::log(norm);
    // E[ln p(z|c,η)] + E[ln p(c|v)] − E[ln q(c)] with r_nk = ρ_nk / Σρ
    for (std::size_t k = 0; k < truncation; ++k) {
      const double r = std::exp(log_rho[k] - log_norm);
      if (r > 0.0) bound += r * (log_rho[k] - std::log(r));
    }
  }

  // E[ln p(v)] − E[ln q(v)] for active sticks
  for (std::size_t k = 0; k < k_a; ++k) {
    const double elv = dpvil::digamma(a[k]) - dpvil::digamma(a[k] + b[k]);
    const double el1v = dpvil::digamma(b[k]) - dpvil::digamma(a[k] + b[k]);
    const double e_log_p = std::lgamma(1.0 + alpha) - std::lgamma(alpha) + (alpha - 1.0) * el1v;
    const double e_log_q = std::lgamma(a[k] + b[k]) - std::lgamma(a[k]) - std::lgamma(b[k]) +
                           (a[k] - 1.0) * elv + (b[k] - 1.0) * el1v;
    bound += e_log_p - e_log_q;
  }

  // E[ln p(μ,Λ)] − E[ln q(μ,Λ)] for active components
  const Matrix w0_inv = inv_small(prior.w);
  for (std::size_t k = 0; k < k_a; ++k) {
    const Comp& c = comps[k];
    Vector diff(d);
    for (std::size_t i = 0; i < d; ++i) diff[i] = c.m[i] - prior.m[i];
    double tr = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) tr += w0_inv(i, j) * c.w(j, i);
    const double e_log_p =
        0.5 * (dd * std::log(prior.beta / (2.0 * std::numbers::pi)) + elog[k] - dd * prior.beta / c.beta -
               prior.beta * c.nu * quad(c.w, diff)) +
        log_wishart_b(prior.w, prior.nu) + 0.5 * (prior.nu - dd - 1.0) * elog[k] - 0.5 * c.nu * tr;
    const double entropy_lambda =
        -log_wishart_b(c.w, c.nu) - 0.5 * (c.nu - dd - 1.0) * elog[k] + 0.5 * c.nu * dd;
    const double e_log_q =
        0.5 * elog[k] + 0.5 * dd * std::log(c.beta / (2.0 * std::numbers::pi)) - 0.5 * dd - entropy_lambda;
    bound += e_log_p - e_log_q;
  }
  return bound;
}

// Active responsibilities of one point by explicit enumeration of the
// inactive components up to `truncation`.
inline Vector responsibilities(const dpvil::DpmmState& s, std::span<const double> z,
                               std::size_t truncation = 800) {
  const std::size_t d = s.dim();
  const double dd = static_cast<double>(d);
  const std::size_t k_a = s.active();
  std::vector<double> log_rho(truncation);
  double acc = 0.0;
  double mx = -1e300;
  for (std::size_t k = 0; k < truncation; ++k) {
    const double a = k < k_a ? s.sticks[k].a : 1.0;
    const double b = k < k_a ? s.sticks[k].b : s.prior.alpha;
    const double e_log_pi = acc + dpvil::digamma(a) - dpvil::digamma(a + b);
    acc += dpvil::digamma(b) - dpvil::digamma(a + b);
    const Vector& m = k < k_a ? s.nw[k].mean : s.prior.mean;
    const Matrix& w = k < k_a ? s.nw[k].scale : s.prior.scale;
    const double beta = k < k_a ? s.nw[k].lambda : s.prior.lambda;
    const double nu = k < k_a ? s.nw[k].dof : s.prior.dof;
    Vector diff(d);
    for (std::size_t i = 0; i < d; ++i) diff[i] = z[i] - m[i];
    log_rho[k] = e_log_pi + 0.5 * (e_log_det(w, nu) - dd / beta - nu * quad(w, diff) -
                                   dd * std::log(2.0 * std::numbers::pi));
    mx = std::max(mx, log_rho[k]);
  }
  double norm = 0.0;
  for (double l : log_rho) norm += std::exp(l - mx);
  Vector out(k_a);
  for (std::size_t k = 0; k < k_a; ++k) out[k] = std::exp(log_rho[k] - mx) / norm;
  return out;
}

// KL[N(μ, diag e^{lv}) ‖ N(m, P⁻¹)] from explicit inverse and determinant.
inline double kl_gauss(const Vector& mu, const Vector& lv, const Vector& m, const Matrix& p) {
  const std::size_t d = mu.size();
  const Matrix cov_p = inv_small(p);
  double tr = 0.0, log_det_q = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    tr += p(i, i) * std::exp(lv[i]);
    log_det_q += lv[i];
  }
  Vector diff(d);
  for (std::size_t i = 0; i < d; ++i) diff[i] = m[i] - mu[i];
  return 0.5 * (tr + quad(p, diff) - static_cast<double>(d) + std::log(det_small(cov_p)) - log_det_q);
}

// Minibatch objective with responsibilities frozen at `weights` (B × K_a),
// built from the public forward pieces; used for finite differences.
inline double frozen_objective(const dpvil::MlpParams& p, const Matrix& x, const Matrix& eps,
                               const dpvil::DpmmState& s, const Matrix& weights, double gamma, double scale) {
  double total = 0.0;
  for (std::size_t n = 0; n < x.rows(); ++n) {
    const dpvil::LatentGaussian lat = dpvil::encode(p, x.row(n));
    const dpvil::Decoded dec = dpvil::decode(p, dpvil::reparameterize(lat, eps.row(n)));
    double reg = 0.0;
    for (std::size_t k = 0; k < s.active(); ++k)
      reg += weights(n, k) * kl_gauss(lat.mean, lat.log_var, s.nw[k].mean, s.nw[k].scale * s.nw[k].lambda);
    total += dpvil::recon_loglik(x.row(n), dec.mean, dec.log_var) - gamma * reg;
  }
  return scale * total;
}

// Best total over every injective row→column map (rows ≤ cols) or column→row map.
inline double brute_force_assignment(const Matrix& w) {
  const bool wide = w.rows() <= w.cols();
  const std::size_t small = wide ? w.rows() : w.cols();
  const std::size_t large = wide ? w.cols() : w.rows();
  std::vector<std::size_t> perm(large);
  for (std::size_t i = 0; i < large; ++i) perm[i] = i;
  double best = 0.0;
  do {
    double t = 0.0;
    for (std::size_t i = 0; i < small; ++i) t += wide ? w(i, perm[i]) : w(perm[i], i);
    best = std::max(best, t);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// ARI from explicit pair counts: a = together in both, d = apart in both.
inline double ari_pairs(std::span<const int> u, std::span<const int> v) {
  double a = 0, b = 0, c = 0, d = 0;
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = i + 1; j < u.size(); ++j) {
      const bool su = u[i] == u[j], sv = v[i] == v[j];
      if (su && sv) ++a;
      else if (su) ++b;
      else if (sv) ++c;
      else ++d;
    }
  const double den = (a + b) * (b + d) + (a + c) * (c + d);
  return den == 0.0 ? 1.0 : 2.0 * (a * d - b * c) / den;
}

// NMI (arithmetic-mean normalization) straight from empirical probabilities.
inline double nmi_direct(std::span<const int> u, std::span<const int> v) {
  const double n = static_cast<double>(u.size());
  std::vector<int> lu(u.begin(), u.end()), lv(v.begin(), v.end());
  std::sort(lu.begin(), lu.end());
  lu.erase(std::unique(lu.begin(), lu.end()), lu.end());
  std::sort(lv.begin(), lv.end());
  lv.erase(std::unique(lv.begin(), lv.end()), lv.end());
  auto prob = [&](auto pred) {
    double c = 0;
    for (std::size_t i = 0; i < u.size(); ++i) c += pred(i) ? 1.0 : 0.0;
    return c / n;
  };
  double hu = 0, hv = 0, mi = 0;
  for (int a : lu) {
    const double p = prob([&](std::size_t i) { return u[i] == a; });
    hu -= p * std::log(p);
  }
  for (int b : lv) {
    const double p = prob([&](std::size_t i) { return v[i] == b; });
    hv -= p * std::log(p);
  }
  for (int a : lu)
    for (int b : lv) {
      const double pab = prob([&](std::size_t i) { return u[i] == a && v[i] == b; });
      if (pab == 0.0) continue;
      const double pa = prob([&](std::size_t i) { return u[i] == a; });
      const double pb = prob([&](std::size_t i) { return v[i] == b; });
      mi += pab * std::log(pab / (pa * pb));
    }
  if (hu == 0.0 && hv == 0.0) return 1.0;
  return mi / (0.5 * (hu + hv));
}

}  // namespace oracle
