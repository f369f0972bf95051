#include "dpvil/dpmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>

#include "dpvil/rng.hpp"

namespace dpvil {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

struct StickExpectations {
  Vector log_pi;        // E[ln π_k] for active components
  double tail_log_sum;  // ln Σ_{k>K_a} exp E[ln π_k]
};

StickExpectations stick_expectations(const DpmmState& s) {
  StickExpectations e;
  e.log_pi.resize(s.active());
  double acc = 0.0;
  for (std::size_t k = 0; k < s.active(); ++k) {
    const auto& st = s.sticks[k];
    const double dsum = digamma(st.a + st.b);
    e.log_pi[k] = acc + digamma(st.a) - dsum;
    acc += digamma(st.b) - dsum;
  }
  const double alpha = s.prior.alpha;
  e.tail_log_sum = acc + digamma(1.0) - digamma(1.0 + alpha) + inactive_tail_log_factor(alpha);
  return e;
}

NwPosterior prior_component(const DpPrior& p) {
  NwPosterior q;
  q.mean = p.mean;
  q.lambda = p.lambda;
  q.scale = p.scale;
  q.dof = p.dof;
  q.refresh();
  return q;
}

bool same_as_prior(const NwPosterior& q, const DpPrior& p) {
  return q.lambda == p.lambda && q.dof == p.dof && q.mean == p.mean && q.scale == p.scale;
}

// Σ_n ln Σ_k ρ̂_nk; optionally stores normalized responsibilities.
double responsibility_pass(const DpmmState& s, const Matrix& z, Responsibilities* out) {
  const std::size_t n_rows = z.rows();
  const std::size_t k_a = s.active();
  if (z.cols() != s.dim()) throw ShapeMismatch("latent dimension does not match prior");
  const StickExpectations se = stick_expectations(s);
  const NwPosterior base = prior_component(s.prior);
  if (out) {
    out->active = Matrix(n_rows, k_a);
    out->tail.assign(n_rows, 0.0);
  }
  Vector logs(k_a + 1);
  double total = 0.0;
  for (std::size_t n = 0; n < n_rows; ++n) {
    const auto zn = z.row(n);
    for (std::size_t k = 0; k < k_a; ++k) logs[k] = se.log_pi[k] + s.nw[k].expected_loglik(zn);
    logs[k_a] = se.tail_log_sum + base.expected_loglik(zn);
    const double lse = log_sum_exp(logs);
    if (!std::isfinite(lse)) {
      throw NumericalUnderflow("row " + std::to_string(n) + " cannot be normalized");
    }
    total += lse;
    if (out) {
      auto row = out->active.row(n);
      for (std::size_t k = 0; k < k_a; ++k) row[k] = std::exp(logs[k] - lse);
      out->tail[n] = std::exp(logs[k_a] - lse);
    }
  }
  return total;
}

// Expected log-likelihood of a hard-assigned block of statistics.
double block_expected_loglik(const NwPosterior& q, const ComponentStats& b) {
  if (b.n <= 0.0) return 0.0;
  const std::size_t d = b.dim();
  // Q = s2 − s1 m̂ᵀ − m̂ s1ᵀ + n m̂ m̂ᵀ
  double tr = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double qij = b.s2(i, j) - b.s1[i] * q.mean[j] - q.mean[i] * b.s1[j] +
                         b.n * q.mean[i] * q.mean[j];
      tr += q.scale(i, j) * qij;
    }
  }
  const double dd = static_cast<double>(d);
  return 0.5 * b.n * (q.expected_log_det - dd * kLog2Pi - dd / q.lambda) - 0.5 * q.dof * tr;
}

double memory_term(const DpmmState& s, const StickExpectations& se) {
  double total = 0.0;
  for (std::size_t k = 0; k < s.memory.size(); ++k) {
    const auto& m = s.memory[k];
    if (m.n <= 0.0) continue;
    total += m.n * se.log_pi[k] + block_expected_loglik(s.nw[k], m);
  }
  return total;
}

double kl_total(const DpmmState& s) {
  double total = 0.0;
  for (std::size_t k = 0; k < s.active(); ++k) {
    total += kl_beta(s.sticks[k], s.prior.alpha) + kl_normal_wishart(s.nw[k], s.prior);
  }
  return total;
}

void refresh_posteriors(DpmmState& s) {
  auto [nw, sticks] = posterior_from_stats(s.prior, s.stats);
  s.nw = std::move(nw);
  s.sticks = std::move(sticks);
}

template <typename T>
void permute(std::vector<T>& v, const std::vector<std::size_t>& order) {
  std::vector<T> out;
  out.reserve(order.size());
  for (std::size_t i : order) out.push_back(std::move(v[i]));
  v = std::move(out);
}

void reorder(DpmmState& s, const std::vector<std::size_t>& order) {
  permute(s.stats.components, order);
  permute(s.memory, order);
  permute(s.ids, order);
  refresh_posteriors(s);
}

void remove_component(DpmmState& s, std::size_t k) {
  s.stats.components.erase(s.stats.components.begin() + static_cast<std::ptrdiff_t>(k));
  s.memory.erase(s.memory.begin() + static_cast<std::ptrdiff_t>(k));
  s.ids.erase(s.ids.begin() + static_cast<std::ptrdiff_t>(k));
}

double relative_gain(double candidate, double current) {
  return (candidate - current) / std::max(std::abs(current), 1e-300);
}

// Algorithm start-up: a lone component with no data takes every row.
void seed_single_component(DpmmState& s, const Matrix& z, std::span<const double> tags) {
  ComponentStats c(s.dim());
  for (std::size_t n = 0; n < z.rows(); ++n) c.add_point(z.row(n), 1.0, tags.empty() ? 0.0 : tags[n]);
  s.stats.components[0] = c + s.memory[0];
  s.stats.tail = 0.0;
  refresh_posteriors(s);
}

}  // namespace

// ---------------------------------------------------------------------------

void DpPrior::validate() const {
  const std::size_t d = dim();
  if (d == 0) throw ConfigError("prior dimension must be positive");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (!(lambda > 0.0)) throw ConfigError("lambda must be positive");
  if (!(dof > static_cast<double>(d) - 1.0)) throw ConfigError("nu must exceed D - 1");
  if (scale.rows() != d || scale.cols() != d) throw ConfigError("W must be D x D");
  try {
    cholesky(scale);
  } catch (const NotPositiveDefinite&) {
    throw ConfigError("W must be symmetric positive-definite");
  }
}

DpPrior DpPrior::weakly_informative(double alpha, std::span<const double> mean) {
  const std::size_t d = mean.size();
  DpPrior p;
  p.alpha = alpha;
  p.mean.assign(mean.begin(), mean.end());
  p.lambda = 1.0;
  p.scale = Matrix::identity(d) * (1.0 / static_cast<double>(d));
  p.dof = static_cast<double>(d) + 2.0;
  return p;
}

void NwPosterior::refresh() {
  scale_factor = cholesky_jittered(scale);
  expected_log_det = multi_digamma(mean.size(), 0.5 * dof) +
                     static_cast<double>(mean.size()) * std::numbers::ln2 + scale_factor.log_det();
}

double NwPosterior::expected_loglik(std::span<const double> z) const {
  const std::size_t d = mean.size();
  double diff[64];
  Vector big;
  double* dp = diff;
  if (d > 64) {
    big.resize(d);
    dp = big.data();
  }
  for (std::size_t i = 0; i < d; ++i) dp[i] = z[i] - mean[i];
  const double quad = scale_factor.quad_form({dp, d});
  const double dd = static_cast<double>(d);
  return 0.5 * (expected_log_det - dd * kLog2Pi - dd / lambda - dof * quad);
}

ComponentStats& ComponentStats::operator+=(const ComponentStats& o) {
  if (o.s1.empty()) return *this;
  if (s1.empty()) {
    *this = o;
    return *this;
  }
  if (o.dim() != dim()) throw ShapeMismatch("adding statistics of different dimension");
  n += o.n;
  tag += o.tag;
  for (std::size_t i = 0; i < s1.size(); ++i) s1[i] += o.s1[i];
  s2 += o.s2;
  return *this;
}

void ComponentStats::add_point(std::span<const double> z, double weight, double tag_weight) {
  if (weight == 0.0) return;
  n += weight;
  tag += weight * tag_weight;
  for (std::size_t i = 0; i < z.size(); ++i) s1[i] += weight * z[i];
  add_outer(s2, z, z, weight);
}

Vector ComponentStats::mean() const {
  Vector m(dim(), 0.0);
  if (n <= 0.0) return m;
  for (std::size_t i = 0; i < dim(); ++i) m[i] = s1[i] / n;
  return m;
}

Matrix ComponentStats::scatter() const {
  Matrix s(dim(), dim());
  if (n <= 0.0) return s;
  const Vector m = mean();
  s = s2 * (1.0 / n);
  add_outer(s, m, m, -1.0);
  return symmetrized(s);
}

void DpmmState::check_consistent() const {
  const std::size_t k = nw.size();
  if (k == 0) throw ShapeMismatch("state needs at least one active component");
  if (sticks.size() != k || stats.components.size() != k || memory.size() != k || ids.size() != k) {
    throw ShapeMismatch("state component lists have different lengths");
  }
}

DpmmState DpmmState::initial(DpPrior prior, double tau) {
  prior.validate();
  DpmmState s;
  const std::size_t d = prior.dim();
  s.prior = std::move(prior);
  s.tau = tau;
  s.stats.components.assign(1, ComponentStats(d));
  s.memory.assign(1, ComponentStats(d));
  s.ids = {0};
  s.next_id = 1;
  refresh_posteriors(s);
  return s;
}

double inactive_tail_log_factor(double alpha) {
  const double g = digamma(alpha) - digamma(1.0 + alpha);  // = −1/α
  return -std::log1p(-std::exp(g));
}

Responsibilities update_responsibilities(const DpmmState& state, const Matrix& z) {
  state.check_consistent();
  Responsibilities r;
  responsibility_pass(state, z, &r);
  return r;
}

Vector responsibilities_row(const DpmmState& state, std::span<const double> z, double& tail) {
  Matrix one(1, z.size(), Vector(z.begin(), z.end()));
  Responsibilities r = update_responsibilities(state, one);
  tail = r.tail[0];
  return Vector(r.active.row(0).begin(), r.active.row(0).end());
}

SuffStats accumulate_stats(const Matrix& z, const Responsibilities& resp,
                           std::span<const double> tags) {
  if (resp.rows() != z.rows()) throw ShapeMismatch("responsibility rows != latent rows");
  if (!tags.empty() && tags.size() != z.rows()) throw ShapeMismatch("tag count != latent rows");
  const std::size_t k_a = resp.active.cols();
  SuffStats out;
  out.components.assign(k_a, ComponentStats(z.cols()));
  for (std::size_t n = 0; n < z.rows(); ++n) {
    const auto zn = z.row(n);
    const double tag = tags.empty() ? 0.0 : tags[n];
    for (std::size_t k = 0; k < k_a; ++k) out.components[k].add_point(zn, resp.active(n, k), tag);
    out.tail += resp.tail[n];
  }
  for (auto& c : out.components) c.s2 = symmetrized(c.s2);
  return out;
}

std::pair<std::vector<NwPosterior>, std::vector<StickPosterior>> posterior_from_stats(
    const DpPrior& prior, const SuffStats& stats) {
  const std::size_t k_a = stats.components.size();
  const std::size_t d = prior.dim();
  std::vector<NwPosterior> nw(k_a);
  std::vector<StickPosterior> sticks(k_a);
  const Matrix prior_scale_inv = cholesky(prior.scale).inverse();

  for (std::size_t k = 0; k < k_a; ++k) {
    const ComponentStats& c = stats.components[k];
    NwPosterior& q = nw[k];
    if (c.n <= 0.0) {
      q.mean = prior.mean;
      q.lambda = prior.lambda;
      q.scale = prior.scale;
      q.dof = prior.dof;
      q.refresh();
      continue;
    }
    if (c.dim() != d) throw ShapeMismatch("statistics dimension != prior dimension");
    const double nk = c.n;
    q.lambda = prior.lambda + nk;
    q.dof = prior.dof + nk;
    q.mean.resize(d);
    for (std::size_t i = 0; i < d; ++i) q.mean[i] = (prior.lambda * prior.mean[i] + c.s1[i]) / q.lambda;
    // Ŵ⁻¹ = W⁻¹ + N S + λN/(λ+N) (z̄ − m)(z̄ − m)ᵀ with N S = s2 − s1 s1ᵀ / N
    Matrix w_inv = prior_scale_inv + c.s2;
    add_outer(w_inv, c.s1, c.s1, -1.0 / nk);
    Vector diff(d);
    for (std::size_t i = 0; i < d; ++i) diff[i] = c.s1[i] / nk - prior.mean[i];
    add_outer(w_inv, diff, diff, prior.lambda * nk / (prior.lambda + nk));
    q.scale = cholesky_jittered(symmetrized(w_inv)).inverse();
    q.refresh();
  }

  double remaining = stats.tail;
  for (std::size_t k = 0; k < k_a; ++k) remaining += stats.components[k].n;
  for (std::size_t k = 0; k < k_a; ++k) {
    remaining -= stats.components[k].n;
    sticks[k].a = 1.0 + stats.components[k].n;
    sticks[k].b = prior.alpha + std::max(remaining, 0.0);
  }
  return {std::move(nw), std::move(sticks)};
}

double kl_beta(const StickPosterior& q, double alpha) {
  if (q.a == 1.0 && q.b == alpha) return 0.0;
  const double log_b0 = log_gamma(1.0) + log_gamma(alpha) - log_gamma(1.0 + alpha);
  const double log_b = log_gamma(q.a) + log_gamma(q.b) - log_gamma(q.a + q.b);
  return log_b0 - log_b + (q.a - 1.0) * digamma(q.a) + (q.b - alpha) * digamma(q.b) +
         (1.0 + alpha - q.a - q.b) * digamma(q.a + q.b);
}

double kl_normal_wishart(const NwPosterior& q, const DpPrior& p) {
  if (same_as_prior(q, p)) return 0.0;
  const std::size_t d = p.dim();
  const double dd = static_cast<double>(d);
  const SpdFactor p_factor = cholesky(p.scale);
  // tr(W0⁻¹ W1)
  double tr = 0.0;
  Vector col(d);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < d; ++i) col[i] = q.scale(i, j);
    tr += p_factor.solve(col)[j];
  }
  const double log_det_ratio = q.scale_factor.log_det() - p_factor.log_det();
  const double wishart = -0.5 * p.dof * log_det_ratio + 0.5 * q.dof * (tr - dd) +
                         log_multigamma(d, 0.5 * p.dof) - log_multigamma(d, 0.5 * q.dof) +
                         0.5 * (q.dof - p.dof) * multi_digamma(d, 0.5 * q.dof);
  Vector diff(d);
  for (std::size_t i = 0; i < d; ++i) diff[i] = q.mean[i] - p.mean[i];
  const double gauss = 0.5 * (dd * p.lambda / q.lambda - dd + dd * std::log(q.lambda / p.lambda) +
                              p.lambda * q.dof * q.scale_factor.quad_form(diff));
  return wishart + gauss;
}

double cavi_elbo(const DpmmState& state, const Matrix& z) {
  state.check_consistent();
  const double data = responsibility_pass(state, z, nullptr);
  const double value = data - kl_total(state) + memory_term(state, stick_expectations(state));
  if (!std::isfinite(value)) throw NonFinite("CAVI bound is not finite");
  return value;
}

double dpmm_kl_terms(const DpmmState& state, const Responsibilities& resp) {
  state.check_consistent();
  if (resp.active.cols() != state.active()) throw ShapeMismatch("responsibility columns != K_a");
  const StickExpectations se = stick_expectations(state);
  const double alpha = state.prior.alpha;
  // Within the tail, mass is geometric with ratio g; E[j] and entropy are closed form.
  const double log_g = digamma(alpha) - digamma(1.0 + alpha);
  const double g = std::exp(log_g);
  const double first_tail = se.tail_log_sum - inactive_tail_log_factor(alpha);
  const double geo_mean_index = g / (1.0 - g);
  const double geo_entropy = -std::log1p(-g) - geo_mean_index * log_g;

  double assign = 0.0;
  for (std::size_t n = 0; n < resp.rows(); ++n) {
    for (std::size_t k = 0; k < state.active(); ++k) {
      const double p = resp.active(n, k);
      if (p > 0.0) assign += p * (se.log_pi[k] - std::log(p));
    }
    const double r = resp.tail[n];
    if (r > 0.0) assign += r * (first_tail + log_g * geo_mean_index + geo_entropy - std::log(r));
  }
  for (std::size_t k = 0; k < state.memory.size(); ++k) assign += state.memory[k].n * se.log_pi[k];
  const double value = assign - kl_total(state);
  if (!std::isfinite(value)) throw NonFinite("DPMM KL terms are not finite");
  return value;
}

double coordinate_sweep(DpmmState& state, const Matrix& z, std::span<const double> tags) {
  state.check_consistent();
  Responsibilities resp;
  const double data = responsibility_pass(state, z, &resp);
  const double before = data - kl_total(state) + memory_term(state, stick_expectations(state));

  SuffStats current = accumulate_stats(z, resp, tags);
  for (std::size_t k = 0; k < state.active(); ++k) current.components[k] += state.memory[k];
  state.stats = std::move(current);
  refresh_posteriors(state);

  std::vector<std::size_t> order(state.active());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return state.stats.components[a].n > state.stats.components[b].n;
  });
  if (!std::is_sorted(order.begin(), order.end())) {
    DpmmState sorted = state;
    reorder(sorted, order);
    // Reordering relabels the sticks; keep it only if the bound does not drop.
    if (cavi_elbo(sorted, z) >= cavi_elbo(state, z)) state = std::move(sorted);
  }
  return before;
}

double coordinate_ascent(DpmmState& state, const Matrix& z, const CaviOptions& opts,
                         std::span<const double> tags) {
  double prev = coordinate_sweep(state, z, tags);
  for (int sweep = 1; sweep < opts.max_sweeps; ++sweep) {
    const double cur = coordinate_sweep(state, z, tags);
    if (opts.check_monotone && cur < prev - 1e-8 * std::abs(prev)) {
      throw NonFinite("coordinate ascent decreased the bound from " + std::to_string(prev) +
                      " to " + std::to_string(cur));
    }
    const bool done = std::abs(cur - prev) <= opts.rel_tol * std::abs(cur);
    prev = cur;
    if (done) break;
  }
  state.elbo = cavi_elbo(state, z);
  return state.elbo;
}

DpmmState propose_split(const DpmmState& state, const Matrix& z, const Responsibilities& resp,
                        std::size_t k, std::span<const double> tags) {
  state.check_consistent();
  if (k >= state.active()) throw ShapeMismatch("split index out of range");
  const std::size_t d = state.dim();
  const ComponentStats& parent = state.stats.components[k];
  if (parent.n < 2.0) throw DegenerateSplit("component has fewer than two points of mass");
  const Vector center = parent.mean();
  const Matrix scatter = parent.scatter();

  Vector axis;
  try {
    axis = principal_eigvec(scatter);
  } catch (const NoConvergence&) {
    // Near-degenerate spectrum: fall back to the axis of largest variance.
    std::size_t best = 0;
    for (std::size_t i = 1; i < d; ++i)
      if (scatter(i, i) > scatter(best, best)) best = i;
    if (!(scatter(best, best) > 0.0)) throw DegenerateSplit("component has zero scatter");
    axis.assign(d, 0.0);
    axis[best] = 1.0;
  }

  auto side_of = [&](std::span<const double> p) {
    double proj = 0.0;
    for (std::size_t i = 0; i < d; ++i) proj += (p[i] - center[i]) * axis[i];
    return proj > 0.0;
  };

  // Rows touching k and the mass they carry.
  std::vector<std::size_t> rows;
  Vector mass;
  for (std::size_t n = 0; n < z.rows(); ++n) {
    if (resp.active(n, k) > 0.0) {
      rows.push_back(n);
      mass.push_back(resp.active(n, k));
    }
  }
  Vector to_first(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) to_first[i] = side_of(z.row(rows[i])) ? 1.0 : 0.0;

  const ComponentStats& block = state.memory[k];
  bool block_first = block.n > 0.0 ? side_of(block.mean()) : true;

  DpmmState cand = state;
  const std::size_t k2 = k + 1;
  cand.stats.components.insert(cand.stats.components.begin() + static_cast<std::ptrdiff_t>(k2),
                               ComponentStats(d));
  cand.memory.insert(cand.memory.begin() + static_cast<std::ptrdiff_t>(k2), ComponentStats(d));
  cand.ids[k] = cand.next_id++;
  cand.ids.insert(cand.ids.begin() + static_cast<std::ptrdiff_t>(k2), cand.next_id++);

  auto rebuild_children = [&]() {
    ComponentStats first(d), second(d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto zn = z.row(rows[i]);
      const double tag = tags.empty() ? 0.0 : tags[rows[i]];
      first.add_point(zn, mass[i] * to_first[i], tag);
      second.add_point(zn, mass[i] * (1.0 - to_first[i]), tag);
    }
    cand.memory[k] = block_first ? block : ComponentStats(d);
    cand.memory[k2] = block_first ? ComponentStats(d) : block;
    cand.stats.components[k] = first + cand.memory[k];
    cand.stats.components[k2] = second + cand.memory[k2];
    const double total = parent.n;
    if (cand.stats.components[k].n <= 1e-8 * total || cand.stats.components[k2].n <= 1e-8 * total) {
      throw DegenerateSplit("one side of the split received no mass");
    }
    refresh_posteriors(cand);
  };
  rebuild_children();

  // One restricted coordinate-ascent pass over the two children.
  {
    const StickExpectations se = stick_expectations(cand);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto zn = z.row(rows[i]);
      const double l1 = se.log_pi[k] + cand.nw[k].expected_loglik(zn);
      const double l2 = se.log_pi[k2] + cand.nw[k2].expected_loglik(zn);
      const double m = std::max(l1, l2);
      const double e1 = std::exp(l1 - m);
      const double e2 = std::exp(l2 - m);
      to_first[i] = e1 / (e1 + e2);
    }
    if (block.n > 0.0) {
      const double l1 = block.n * se.log_pi[k] + block_expected_loglik(cand.nw[k], block);
      const double l2 = block.n * se.log_pi[k2] + block_expected_loglik(cand.nw[k2], block);
      block_first = l1 >= l2;
    }
    rebuild_children();
  }
  cand.elbo = cavi_elbo(cand, z);
  return cand;
}

double log_marginal_likelihood(const ComponentStats& s, const DpPrior& prior) {
  if (s.n <= 0.0) return 0.0;
  SuffStats one;
  one.components = {s};
  auto [nw, sticks] = posterior_from_stats(prior, one);
  const NwPosterior& q = nw[0];
  const std::size_t d = prior.dim();
  const double dd = static_cast<double>(d);
  const double log_det_w0 = cholesky(prior.scale).log_det();
  return -0.5 * s.n * dd * std::log(std::numbers::pi) +
         0.5 * dd * (std::log(prior.lambda) - std::log(q.lambda)) +
         log_multigamma(d, 0.5 * q.dof) - log_multigamma(d, 0.5 * prior.dof) +
         0.5 * q.dof * q.scale_factor.log_det() - 0.5 * prior.dof * log_det_w0;
}

double merge_score(const SuffStats& stats, std::size_t k1, std::size_t k2, const DpPrior& prior) {
  if (k1 == k2) throw ShapeMismatch("merge needs two distinct components");
  const auto& a = stats.components.at(k1);
  const auto& b = stats.components.at(k2);
  if (a.n <= 0.0 || b.n <= 0.0) return 0.0;
  return log_marginal_likelihood(a + b, prior) - log_marginal_likelihood(a, prior) -
         log_marginal_likelihood(b, prior);
}

DpmmState propose_merge(const DpmmState& state, std::size_t k1, std::size_t k2) {
  state.check_consistent();
  if (k1 == k2 || k1 >= state.active() || k2 >= state.active()) {
    throw ShapeMismatch("invalid merge pair");
  }
  const std::size_t keep = std::min(k1, k2);
  const std::size_t drop = std::max(k1, k2);
  DpmmState cand = state;
  cand.stats.components[keep] += cand.stats.components[drop];
  cand.memory[keep] += cand.memory[drop];
  cand.ids[keep] = cand.next_id++;
  remove_component(cand, drop);
  refresh_posteriors(cand);
  return cand;
}

SplitMergeResult run_split_merge(DpmmState state, const Matrix& z, const CaviOptions& opts,
                                 std::span<const double> tags) {
  state.check_consistent();
  if (z.rows() == 0) throw EmptyDataset("no latent rows for split-merge");
  if (z.cols() != state.dim()) throw ShapeMismatch("latent dimension does not match prior");

  SplitMergeResult out;
  out.input_elbo = cavi_elbo(state, z);
  const bool seedable =
      state.active() == 1 && state.stats.components[0].n <= state.memory[0].n;
  if (seedable) {
    DpmmState seeded = state;
    seed_single_component(seeded, z, tags);
    coordinate_ascent(seeded, z, opts, tags);
    coordinate_ascent(state, z, opts, tags);
    if (seeded.elbo >= state.elbo) state = std::move(seeded);
  } else {
    coordinate_ascent(state, z, opts, tags);
  }
  double current = state.elbo;

  // A. Greedy splits.
  constexpr std::size_t kMaxComponents = 100;
  while (state.active() < kMaxComponents) {
    const Responsibilities resp = update_responsibilities(state, z);
    std::optional<DpmmState> best;
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < state.active(); ++k) {
      if (state.stats.components[k].n < 2.0) continue;
      try {
        DpmmState cand = propose_split(state, z, resp, k, tags);
        if (!best || cand.elbo > best->elbo) {
          best = std::move(cand);
          best_k = k;
        }
      } catch (const DegenerateSplit&) {
      } catch (const NotPositiveDefinite&) {
      }
    }
    if (!best) break;
    // Sweeps may reorder components, so capture the children's ids first.
    const std::vector<std::uint64_t> children{best->ids[best_k], best->ids[best_k + 1]};
    const double l_split = coordinate_ascent(*best, z, opts, tags);
    if (relative_gain(l_split, current) <= state.tau) break;
    LineageEvent ev{LineageEvent::Kind::Split, {state.ids[best_k]}, children, {}};
    for (std::uint64_t id : children) {
      const auto it = std::find(best->ids.begin(), best->ids.end(), id);
      const auto& c = best->stats.components[static_cast<std::size_t>(it - best->ids.begin())];
      ev.child_tag_share.push_back(c.n > 0.0 ? c.tag / c.n : 0.0);
    }
    out.events.push_back(std::move(ev));
    state = std::move(*best);
    current = l_split;
    ++out.splits;
  }

  // B. Greedy merges.
  Rng rng(opts.seed);
  while (state.active() >= 2) {
    std::vector<std::size_t> anchors(state.active());
    std::iota(anchors.begin(), anchors.end(), 0);
    if (state.active() > opts.exhaustive_merge_limit) {
      std::vector<std::size_t> picked;
      for (std::size_t i = 0; i < opts.sampled_merge_anchors; ++i) picked.push_back(rng.below(state.active()));
      std::sort(picked.begin(), picked.end());
      picked.erase(std::unique(picked.begin(), picked.end()), picked.end());
      anchors = std::move(picked);
    }
    std::optional<DpmmState> best;
    std::pair<std::size_t, std::size_t> best_pair{0, 0};
    std::vector<std::pair<std::size_t, std::size_t>> tried;
    for (std::size_t k1 : anchors) {
      std::size_t k2_best = k1;
      double score_best = -std::numeric_limits<double>::infinity();
      for (std::size_t k2 = 0; k2 < state.active(); ++k2) {
        if (k2 == k1) continue;
        double score;
        try {
          score = merge_score(state.stats, k1, k2, state.prior);
        } catch (const NotPositiveDefinite&) {
          continue;
        }
        if (score > score_best) {
          score_best = score;
          k2_best = k2;
        }
      }
      if (k2_best == k1) continue;
      const std::pair<std::size_t, std::size_t> pair = std::minmax(k1, k2_best);
      if (std::find(tried.begin(), tried.end(), pair) != tried.end()) continue;
      tried.push_back(pair);
      try {
        DpmmState cand = propose_merge(state, pair.first, pair.second);
        cand.elbo = cavi_elbo(cand, z);
        if (!best || cand.elbo > best->elbo) {
          best = std::move(cand);
          best_pair = pair;
        }
      } catch (const NotPositiveDefinite&) {
      }
    }
    if (!best) break;
    const std::uint64_t merged_id = best->ids[best_pair.first];
    const double l_merge = coordinate_ascent(*best, z, opts, tags);
    if (relative_gain(l_merge, current) <= state.tau) break;
    out.events.push_back({LineageEvent::Kind::Merge,
                          {state.ids[best_pair.first], state.ids[best_pair.second]},
                          {merged_id},
                          {}});
    state = std::move(*best);
    current = l_merge;
    ++out.merges;
  }

  // Prune components that hold (almost) no mass.
  {
    DpmmState pruned = state;
    std::vector<LineageEvent> prune_events;
    for (std::size_t k = pruned.active(); k-- > 0;) {
      if (pruned.active() > 1 && pruned.stats.components[k].n < opts.prune_below) {
        prune_events.push_back({LineageEvent::Kind::Prune, {pruned.ids[k]}, {}, {}});
        remove_component(pruned, k);
      }
    }
    if (!prune_events.empty()) {
      refresh_posteriors(pruned);
      const double l_pruned = coordinate_ascent(pruned, z, opts, tags);
      if (l_pruned >= out.input_elbo) {
        state = std::move(pruned);
        current = l_pruned;
        out.events.insert(out.events.end(), prune_events.begin(), prune_events.end());
      }
    }
  }

  state.elbo = current;
  out.resp = update_responsibilities(state, z);
  out.state = std::move(state);
  return out;
}

}  // namespace dpvil
