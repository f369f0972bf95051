#include "dpvil/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

#include "dpvil/rng.hpp"

namespace dpvil {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

struct Trace {
  std::vector<Vector> inputs;  // input of each hidden layer, then of the heads
  std::vector<Vector> pre;     // pre-activation of each hidden layer
};

Vector affine(const Dense& l, std::span<const double> x) {
  Vector y = l.bias;
  for (std::size_t o = 0; o < l.out(); ++o) {
    const auto w = l.weight.row(o);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
    y[o] += s;
  }
  return y;
}

void forward(const Mlp& net, std::span<const double> x, Vector& mean, Vector& log_var, Trace* trace) {
  if (x.size() != net.input_dim()) throw ShapeMismatch("network input has the wrong dimension");
  Vector h(x.begin(), x.end());
  for (const Dense& layer : net.hidden) {
    Vector a = affine(layer, h);
    if (trace) {
      trace->inputs.push_back(h);
      trace->pre.push_back(a);
    }
    for (double& v : a) v = std::max(v, 0.0);
    h = std::move(a);
  }
  if (trace) trace->inputs.push_back(h);
  mean = affine(net.head_mean, h);
  log_var = affine(net.head_log_var, h);
}

// dL/dW += g hᵀ, dL/db += g; returns dL/dh when wanted.
void backward_dense(const Dense& l, Dense& grad, std::span<const double> h, std::span<const double> g,
                    Vector* dh) {
  for (std::size_t o = 0; o < l.out(); ++o) {
    if (g[o] == 0.0) continue;
    grad.bias[o] += g[o];
    auto gw = grad.weight.row(o);
    for (std::size_t i = 0; i < h.size(); ++i) gw[i] += g[o] * h[i];
    if (dh) {
      const auto w = l.weight.row(o);
      for (std::size_t i = 0; i < h.size(); ++i) (*dh)[i] += g[o] * w[i];
    }
  }
}

// Accumulates parameter gradients; returns dL/dx when `want_input`.
Vector backward(const Mlp& net, Mlp& grad, const Trace& t, std::span<const double> d_mean,
                std::span<const double> d_log_var, bool want_input) {
  const Vector& top = t.inputs.back();
  Vector dh(top.size(), 0.0);
  backward_dense(net.head_mean, grad.head_mean, top, d_mean, &dh);
  backward_dense(net.head_log_var, grad.head_log_var, top, d_log_var, &dh);
  for (std::size_t l = net.hidden.size(); l-- > 0;) {
    for (std::size_t i = 0; i < dh.size(); ++i)
      if (t.pre[l][i] <= 0.0) dh[i] = 0.0;
    const bool need = want_input || l > 0;
    Vector below(need ? t.inputs[l].size() : 0, 0.0);
    backward_dense(net.hidden[l], grad.hidden[l], t.inputs[l], dh, need ? &below : nullptr);
    dh = std::move(below);
  }
  return dh;
}

void append(std::vector<NamedTensor>& out, const std::string& prefix, Mlp& m) {
  for (std::size_t l = 0; l < m.hidden.size(); ++l) {
    const std::string p = prefix + ".hidden" + std::to_string(l);
    out.push_back({p + ".weight", m.hidden[l].weight.values()});
    out.push_back({p + ".bias", m.hidden[l].bias});
  }
  out.push_back({prefix + ".mean.weight", m.head_mean.weight.values()});
  out.push_back({prefix + ".mean.bias", m.head_mean.bias});
  out.push_back({prefix + ".log_var.weight", m.head_log_var.weight.values()});
  out.push_back({prefix + ".log_var.bias", m.head_log_var.bias});
}

Mlp make_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  Mlp m;
  std::size_t prev = in;
  for (std::size_t h : hidden) {
    m.hidden.emplace_back(prev, h);
    prev = h;
  }
  m.head_mean = Dense(prev, out);
  m.head_log_var = Dense(prev, out);
  return m;
}

void fill_uniform(Dense& l, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(l.in()));
  for (double& w : l.weight.values()) w = bound * (2.0 * rng.uniform() - 1.0);
}

bool clamped(double lv) { return lv < kMinLogVar || lv > kMaxLogVar; }

}  // namespace

std::size_t Mlp::input_dim() const {
  return hidden.empty() ? head_mean.in() : hidden.front().in();
}

bool MlpParams::same_shape(const MlpParams& o) const {
  const auto a = tensors(*this);
  const auto b = tensors(o);
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].data.size() != b[i].data.size()) return false;
  return true;
}

std::vector<NamedTensor> tensors(MlpParams& p) {
  std::vector<NamedTensor> out;
  append(out, "encoder", p.encoder);
  append(out, "decoder", p.decoder);
  return out;
}

std::vector<ConstNamedTensor> tensors(const MlpParams& p) {
  auto mut = tensors(const_cast<MlpParams&>(p));
  std::vector<ConstNamedTensor> out;
  out.reserve(mut.size());
  for (auto& t : mut) out.push_back({std::move(t.name), t.data});
  return out;
}

MlpParams zeros_like(const MlpParams& p) {
  MlpParams z = p;
  for (auto& t : tensors(z)) std::fill(t.data.begin(), t.data.end(), 0.0);
  return z;
}

MlpParams init_params(const VaeArchitecture& arch, std::uint64_t seed) {
  if (arch.input_dim == 0 || arch.latent_dim == 0) throw ConfigError("network dimensions must be positive");
  for (std::size_t h : arch.hidden)
    if (h == 0) throw ConfigError("hidden layer sizes must be positive");
  MlpParams p;
  p.encoder = make_mlp(arch.input_dim, arch.hidden, arch.latent_dim);
  std::vector<std::size_t> mirrored(arch.hidden.rbegin(), arch.hidden.rend());
  p.decoder = make_mlp(arch.latent_dim, mirrored, arch.input_dim);
  Rng rng(seed);
  for (Mlp* m : {&p.encoder, &p.decoder}) {
    for (Dense& l : m->hidden) fill_uniform(l, rng);
    fill_uniform(m->head_mean, rng);
    fill_uniform(m->head_log_var, rng);
  }
  return p;
}

Vector LatentGaussian::sigma() const {
  Vector s(log_var.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::exp(0.5 * log_var[i]);
  return s;
}

LatentGaussian encode(const MlpParams& p, std::span<const double> x) {
  LatentGaussian lat;
  forward(p.encoder, x, lat.mean, lat.log_var, nullptr);
  return lat;
}

Decoded decode(const MlpParams& p, std::span<const double> z) {
  Decoded d;
  forward(p.decoder, z, d.mean, d.log_var, nullptr);
  for (double& lv : d.log_var) lv = std::clamp(lv, kMinLogVar, kMaxLogVar);
  return d;
}

Vector reparameterize(const LatentGaussian& lat, std::span<const double> eps) {
  if (eps.size() != lat.mean.size()) throw ShapeMismatch("noise and latent dimensions differ");
  Vector z(lat.mean.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = lat.mean[i] + std::exp(0.5 * lat.log_var[i]) * eps[i];
  return z;
}

double recon_loglik(std::span<const double> x, std::span<const double> mean, std::span<const double> log_var) {
  if (x.size() != mean.size() || x.size() != log_var.size()) throw ShapeMismatch("reconstruction shapes differ");
  double s = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    const double r = x[d] - mean[d];
    s += -0.5 * kLog2Pi - 0.5 * log_var[d] - 0.5 * r * r * std::exp(-log_var[d]);
  }
  if (!std::isfinite(s)) throw NonFinite("reconstruction log-likelihood");
  return s;
}

double kl_diag_vs_full(const LatentGaussian& lat, std::span<const double> mean, const Matrix& precision) {
  const std::size_t d = lat.mean.size();
  if (mean.size() != d || precision.rows() != d) throw ShapeMismatch("KL operands differ in dimension");
  const SpdFactor f = cholesky(precision);
  Vector diff(d);
  double tr = 0.0, log_var_sum = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    diff[i] = mean[i] - lat.mean[i];
    tr += precision(i, i) * std::exp(lat.log_var[i]);
    log_var_sum += lat.log_var[i];
  }
  return 0.5 * (tr + f.quad_form(diff) - static_cast<double>(d) - f.log_det() - log_var_sum);
}

LatentPrior::LatentPrior(const DpmmState& state) : state_(&state) {
  for (const NwPosterior& q : state.nw) {
    means_.push_back(q.mean);
    precisions_.push_back(q.predictive_precision());
    log_dets_.push_back(q.scale_factor.log_det() + static_cast<double>(q.mean.size()) * std::log(q.lambda));
  }
}

Vector LatentPrior::weights(std::span<const double> z) const {
  double tail = 0.0;
  return responsibilities_row(*state_, z, tail);
}

double LatentPrior::kl(std::size_t k, const LatentGaussian& lat) const {
  const Matrix& p = precisions_[k];
  const std::size_t d = lat.mean.size();
  Vector diff(d);
  double tr = 0.0, log_var_sum = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    diff[i] = lat.mean[i] - means_[k][i];
    tr += p(i, i) * std::exp(lat.log_var[i]);
    log_var_sum += lat.log_var[i];
  }
  return 0.5 * (tr + dot(diff, matvec(p, diff)) - static_cast<double>(d) - log_dets_[k] - log_var_sum);
}

NetObjectiveTerms net_objective(const MlpParams& p, std::span<const double> x, std::span<const double> eps,
                                const DpmmState& dpmm, double gamma) {
  const LatentGaussian lat = encode(p, x);
  const Decoded dec = decode(p, reparameterize(lat, eps));
  NetObjectiveTerms t;
  t.recon = recon_loglik(x, dec.mean, dec.log_var);
  if (gamma != 0.0) {
    const LatentPrior prior(dpmm);
    const Vector w = prior.weights(lat.mean);
    for (std::size_t k = 0; k < prior.active(); ++k) t.reg += w[k] * prior.kl(k, lat);
  }
  t.total = t.recon - gamma * t.reg;
  return t;
}

BatchGradient backprop(const MlpParams& p, const Matrix& x, const Matrix& eps, const DpmmState& dpmm,
                       double gamma, double scale) {
  if (x.rows() == 0) throw EmptyDataset("backprop needs at least one row");
  if (eps.rows() != x.rows() || eps.cols() != p.latent_dim()) throw ShapeMismatch("noise batch shape");
  const std::size_t dz = p.latent_dim();
  const LatentPrior prior(dpmm);
  BatchGradient out;
  out.grad = zeros_like(p);
  out.latents = Matrix(x.rows(), dz);
  out.latent_means = Matrix(x.rows(), dz);

  for (std::size_t n = 0; n < x.rows(); ++n) {
    const auto xn = x.row(n);
    Trace te, td;
    LatentGaussian lat;
    forward(p.encoder, xn, lat.mean, lat.log_var, &te);
    const Vector sigma = lat.sigma();
    const auto en = eps.row(n);
    Vector z(dz);
    for (std::size_t i = 0; i < dz; ++i) z[i] = lat.mean[i] + sigma[i] * en[i];
    std::copy(z.begin(), z.end(), out.latents.row(n).begin());
    std::copy(lat.mean.begin(), lat.mean.end(), out.latent_means.row(n).begin());

    Vector x_mean, x_log_var;
    forward(p.decoder, z, x_mean, x_log_var, &td);
    const std::size_t dx = xn.size();
    Vector g_mean(dx), g_log_var(dx);
    double recon = 0.0;
    for (std::size_t d = 0; d < dx; ++d) {
      const bool c = clamped(x_log_var[d]);
      const double lv = std::clamp(x_log_var[d], kMinLogVar, kMaxLogVar);
      const double inv_var = std::exp(-lv);
      const double r = xn[d] - x_mean[d];
      recon += -0.5 * kLog2Pi - 0.5 * lv - 0.5 * r * r * inv_var;
      g_mean[d] = scale * r * inv_var;
      g_log_var[d] = c ? 0.0 : scale * 0.5 * (r * r * inv_var - 1.0);
    }
    const Vector g_z = backward(p.decoder, out.grad.decoder, td, g_mean, g_log_var, true);

    Vector g_mu = g_z;
    Vector g_lv(dz);
    for (std::size_t i = 0; i < dz; ++i) g_lv[i] = g_z[i] * en[i] * 0.5 * sigma[i];
    double reg = 0.0;
    if (gamma != 0.0) {
      const Vector w = prior.weights(lat.mean);
      for (std::size_t k = 0; k < prior.active(); ++k) {
        if (w[k] == 0.0) continue;
        reg += w[k] * prior.kl(k, lat);
        const Matrix& prec = prior.precision(k);
        Vector diff(dz);
        for (std::size_t i = 0; i < dz; ++i) diff[i] = lat.mean[i] - prior.mean(k)[i];
        const Vector pd = matvec(prec, diff);
        const double c = scale * gamma * w[k];
        for (std::size_t i = 0; i < dz; ++i) {
          g_mu[i] -= c * pd[i];
          g_lv[i] -= c * 0.5 * (prec(i, i) * sigma[i] * sigma[i] - 1.0);
        }
      }
    }
    backward(p.encoder, out.grad.encoder, te, g_mu, g_lv, false);

    out.terms.recon += scale * recon;
    out.terms.reg += scale * reg;
  }
  out.terms.total = out.terms.recon - gamma * out.terms.reg;
  if (!std::isfinite(out.terms.total)) throw NonFinite("minibatch objective");
  for (const auto& t : tensors(std::as_const(out.grad))) {
    for (double g : t.data)
      if (!std::isfinite(g)) throw NonFinite("gradient of " + t.name);
  }
  return out;
}

AdamState AdamState::for_params(const MlpParams& p, double learning_rate) {
  AdamState s;
  s.m = zeros_like(p);
  s.v = zeros_like(p);
  s.learning_rate = learning_rate;
  return s;
}

void adam_step(MlpParams& p, const MlpParams& grad, AdamState& s) {
  auto pt = tensors(p);
  const auto gt = tensors(grad);
  auto mt = tensors(s.m);
  auto vt = tensors(s.v);
  if (gt.size() != pt.size() || mt.size() != pt.size()) throw ShapeMismatch("optimizer state shape");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t t = 0; t < pt.size(); ++t) {
    auto w = pt[t].data;
    const auto g = gt[t].data;
    auto m = mt[t].data;
    auto v = vt[t].data;
    if (g.size() != w.size()) throw ShapeMismatch("gradient shape for " + pt[t].name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      w[i] += s.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.epsilon);
    }
  }
}

}  // namespace dpvil
