#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dpvil/dpmm.hpp"
#include "dpvil/numerics.hpp"

namespace dpvil {

// Fully connected layer y = W x + b, W stored out × in.
struct Dense {
  Matrix weight;
  Vector bias;

  Dense() = default;
  Dense(std::size_t in, std::size_t out) : weight(out, in), bias(out, 0.0) {}
  std::size_t in() const noexcept { return weight.cols(); }
  std::size_t out() const noexcept { return weight.rows(); }
};

// ReLU trunk followed by two linear heads (mean and log-variance).
struct Mlp {
  std::vector<Dense> hidden;
  Dense head_mean;
  Dense head_log_var;

  std::size_t input_dim() const;
  std::size_t output_dim() const { return head_mean.out(); }
};

struct VaeArchitecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden{128, 32};
  std::size_t latent_dim = 8;
};

// Encoder g(x, ϕ) and decoder f(z, θ). Gradients and Adam moments reuse this shape.
struct MlpParams {
  Mlp encoder;
  Mlp decoder;

  std::size_t input_dim() const { return encoder.input_dim(); }
  std::size_t latent_dim() const { return encoder.output_dim(); }
  bool same_shape(const MlpParams& o) const;
};

struct NamedTensor {
  std::string name;
  std::span<double> data;
};
struct ConstNamedTensor {
  std::string name;
  std::span<const double> data;
};

// Fixed traversal order shared by serialization, Adam and gradient checks.
std::vector<NamedTensor> tensors(MlpParams& p);
std::vector<ConstNamedTensor> tensors(const MlpParams& p);

MlpParams zeros_like(const MlpParams& p);
// Uniform fan-in initialization U(−1/√fan_in, 1/√fan_in); biases zero.
MlpParams init_params(const VaeArchitecture& arch, std::uint64_t seed);

struct LatentGaussian {
  Vector mean;
  Vector log_var;

  Vector sigma() const;
};

struct Decoded {
  Vector mean;
  Vector log_var;  // clamped to [kMinLogVar, kMaxLogVar]
};

inline constexpr double kMinLogVar = -10.0;
inline constexpr double kMaxLogVar = 10.0;

LatentGaussian encode(const MlpParams& p, std::span<const double> x);
Decoded decode(const MlpParams& p, std::span<const double> z);
Vector reparameterize(const LatentGaussian& lat, std::span<const double> eps);

double recon_loglik(std::span<const double> x, std::span<const double> mean, std::span<const double> log_var);

// KL[N(μ, diag σ²) ‖ N(m, P⁻¹)]
double kl_diag_vs_full(const LatentGaussian& lat, std::span<const double> mean, const Matrix& precision);

struct NetObjectiveTerms {
  double recon = 0.0;
  double reg = 0.0;  // Σ_k q(c=k) KL_k
  double total = 0.0;
};

// Frozen view of the DPMM used inside the network objective.
class LatentPrior {
 public:
  explicit LatentPrior(const DpmmState& state);
  const DpmmState& state() const noexcept { return *state_; }
  std::size_t active() const noexcept { return means_.size(); }
  // Active responsibilities of a latent point (tail excluded).
  Vector weights(std::span<const double> z) const;
  double kl(std::size_t k, const LatentGaussian& lat) const;
  const Vector& mean(std::size_t k) const { return means_[k]; }
  const Matrix& precision(std::size_t k) const { return precisions_[k]; }

 private:
  const DpmmState* state_;
  std::vector<Vector> means_;
  std::vector<Matrix> precisions_;
  Vector log_dets_;
};

NetObjectiveTerms net_objective(const MlpParams& p, std::span<const double> x, std::span<const double> eps,
                                const DpmmState& dpmm, double gamma);

struct BatchGradient {
  NetObjectiveTerms terms;  // summed over the batch and scaled
  MlpParams grad;
  Matrix latents;           // reparameterized z per row
  Matrix latent_means;      // μ_z per row
};

// Gradients of L_B = scale · Σ_n total_n with responsibilities held fixed.
BatchGradient backprop(const MlpParams& p, const Matrix& x, const Matrix& eps, const DpmmState& dpmm,
                       double gamma, double scale = 1.0);

struct AdamState {
  MlpParams m;
  MlpParams v;
  std::uint64_t step = 0;
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_params(const MlpParams& p, double learning_rate);
};

// Bias-corrected Adam ascent step (the objective is maximized).
void adam_step(MlpParams& p, const MlpParams& grad, AdamState& state);

}  // namespace dpvil
