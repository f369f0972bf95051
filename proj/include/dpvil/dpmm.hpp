#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "dpvil/numerics.hpp"

namespace dpvil {

// Stick-breaking concentration plus Normal-Wishart base measure NW(m, λ, W, ν).
struct DpPrior {
  double alpha = 1.0;
  Vector mean;
  double lambda = 1.0;
  Matrix scale;  // W, with E[Λ] = ν W
  double dof = 0.0;

  std::size_t dim() const noexcept { return mean.size(); }
  void validate() const;

  // m = supplied mean, λ = 1, W = I/D, ν = D + 2.
  static DpPrior weakly_informative(double alpha, std::span<const double> mean);
};

struct NwPosterior {
  Vector mean;
  double lambda = 1.0;
  Matrix scale;
  double dof = 0.0;

  // Derived quantities, filled by refresh().
  SpdFactor scale_factor;
  double expected_log_det = 0.0;  // E[ln |Λ|]

  void refresh();
  // E[ln N(z | μ, Λ⁻¹)]
  double expected_loglik(std::span<const double> z) const;
  // Precision λ̂·Ŵ of the Gaussian that approximates the predictive.
  Matrix predictive_precision() const { return scale * lambda; }
};

struct StickPosterior {
  double a = 1.0;
  double b = 1.0;
};

// Raw additive statistics of one component: soft count, weighted sum,
// weighted scatter, and an auxiliary tag mass (Σ π̂·tag_n).
struct ComponentStats {
  double n = 0.0;
  Vector s1;
  Matrix s2;
  double tag = 0.0;

  ComponentStats() = default;
  explicit ComponentStats(std::size_t dim) : s1(dim, 0.0), s2(dim, dim) {}

  std::size_t dim() const noexcept { return s1.size(); }
  ComponentStats& operator+=(const ComponentStats& o);
  friend ComponentStats operator+(ComponentStats a, const ComponentStats& b) { return a += b; }
  void add_point(std::span<const double> z, double weight, double tag_weight = 0.0);

  Vector mean() const;     // z̄ = s1 / n
  Matrix scatter() const;  // S = s2 / n − z̄ z̄ᵀ
};

struct SuffStats {
  std::vector<ComponentStats> components;
  double tail = 0.0;  // responsibility mass on inactive components
};

struct Responsibilities {
  Matrix active;  // N × K_a
  Vector tail;    // per-row mass on inactive components

  std::size_t rows() const noexcept { return active.rows(); }
};

struct LineageEvent {
  enum class Kind { Split, Merge, Prune };
  Kind kind;
  std::vector<std::uint64_t> parents;
  std::vector<std::uint64_t> children;
  // Splits only: tag / n of each child right after acceptance.
  std::vector<double> child_tag_share;
};

struct DpmmState {
  DpPrior prior;
  std::vector<NwPosterior> nw;
  std::vector<StickPosterior> sticks;
  // Totals used for the posterior: contributions of the current rows plus
  // retained memory.
  SuffStats stats;
  // Retained statistics of earlier data, held as fixed pseudo-observations
  // hard-assigned to their component. Empty blocks in batch mode.
  std::vector<ComponentStats> memory;
  std::vector<std::uint64_t> ids;
  std::uint64_t next_id = 0;
  double elbo = 0.0;
  double tau = 1e-6;

  std::size_t active() const noexcept { return nw.size(); }
  std::size_t dim() const noexcept { return prior.dim(); }
  void check_consistent() const;

  // One active component whose posterior equals the prior.
  static DpmmState initial(DpPrior prior, double tau = 1e-6);
};

struct CaviOptions {
  int max_sweeps = 50;
  double rel_tol = 1e-7;
  double prune_below = 1e-3;
  std::size_t exhaustive_merge_limit = 20;
  std::size_t sampled_merge_anchors = 5;
  std::uint64_t seed = 0;
  bool check_monotone = true;
};

// ln of the geometric tail factor 1 / (1 − exp{ψ(α) − ψ(1+α)}).
double inactive_tail_log_factor(double alpha);

Responsibilities update_responsibilities(const DpmmState& state, const Matrix& z);

// Responsibilities for a single row; returns active weights and sets tail.
Vector responsibilities_row(const DpmmState& state, std::span<const double> z, double& tail);

SuffStats accumulate_stats(const Matrix& z, const Responsibilities& resp,
                           std::span<const double> tags = {});

std::pair<std::vector<NwPosterior>, std::vector<StickPosterior>> posterior_from_stats(
    const DpPrior& prior, const SuffStats& stats);

double kl_beta(const StickPosterior& q, double alpha);
double kl_normal_wishart(const NwPosterior& q, const DpPrior& p);

// Collapsed bound: KL terms of the active components, Σ_n ln Σ_k ρ̂_nk with
// the analytic tail, and the expected log-likelihood of retained memory.
double cavi_elbo(const DpmmState& state, const Matrix& z);

// E_q[ln p(c, v, η) − ln q(c, v, η)] for given responsibilities.
double dpmm_kl_terms(const DpmmState& state, const Responsibilities& resp);

// One coordinate-ascent sweep: responsibilities, statistics, posteriors and
// size-biased reordering. Returns the bound of the state it started from.
double coordinate_sweep(DpmmState& state, const Matrix& z, std::span<const double> tags = {});

// Sweeps until the relative change drops below rel_tol or the cap is hit.
double coordinate_ascent(DpmmState& state, const Matrix& z, const CaviOptions& opts,
                         std::span<const double> tags = {});

DpmmState propose_split(const DpmmState& state, const Matrix& z, const Responsibilities& resp,
                        std::size_t k, std::span<const double> tags = {});

// ln M(s1 + s2) − ln M(s1) − ln M(s2) for Normal-Wishart marginal likelihoods.
double merge_score(const SuffStats& stats, std::size_t k1, std::size_t k2, const DpPrior& prior);
double log_marginal_likelihood(const ComponentStats& s, const DpPrior& prior);

DpmmState propose_merge(const DpmmState& state, std::size_t k1, std::size_t k2);

struct SplitMergeResult {
  DpmmState state;
  Responsibilities resp;
  std::vector<LineageEvent> events;
  int splits = 0;
  int merges = 0;
  double input_elbo = 0.0;
};

SplitMergeResult run_split_merge(DpmmState state, const Matrix& z, const CaviOptions& opts = {},
                                 std::span<const double> tags = {});

}  // namespace dpvil
