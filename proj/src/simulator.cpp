#include "dpvil/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

#include <fftw3.h>
#include <json.hpp>

#include "dpvil/rng.hpp"

namespace dpvil {

namespace {

using Complex = std::complex<double>;

Vector hann(std::size_t n) {
  Vector w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

std::vector<std::vector<Complex>> windowed_segments(std::span<const double> x, const WelchOptions& o) {
  const std::size_t len = o.segment;
  if (len < 2) throw DomainError("Welch segment length must be at least 2");
  if (!(o.overlap >= 0.0 && o.overlap < 1.0)) throw DomainError("Welch overlap must be in [0, 1)");
  if (x.size() < len) throw ShapeMismatch("record shorter than one Welch segment");
  const std::size_t hop = std::max<std::size_t>(1, len - static_cast<std::size_t>(std::lround(o.overlap * static_cast<double>(len))));
  const Vector w = hann(len);
  std::vector<std::vector<Complex>> out;
  for (std::size_t start = 0; start + len <= x.size(); start += hop) {
    double mean = 0.0;
    for (std::size_t i = 0; i < len; ++i) mean += x[start + i];
    mean /= static_cast<double>(len);
    std::vector<Complex> seg(len);
    for (std::size_t i = 0; i < len; ++i) seg[i] = (x[start + i] - mean) * w[i];
    out.push_back(fft(std::move(seg)));
  }
  return out;
}

}  // namespace

void BuildingSpec::validate() const {
  if (mass.empty()) throw ConfigError("building needs at least one floor");
  if (stiffness.size() != mass.size()) throw ConfigError("stiffness and mass must have one entry per floor");
  for (std::size_t i = 0; i < mass.size(); ++i)
    if (!(mass[i] > 0.0) || !(stiffness[i] > 0.0)) throw ConfigError("floor stiffness and mass must be positive");
  if (!(zeta1 > 0.0) || !(zeta2 > 0.0)) throw ConfigError("damping ratios must be positive");
}

BuildingSpec BuildingSpec::uniform(std::size_t floors, double k, double m, double zeta) {
  BuildingSpec s;
  s.stiffness.assign(floors, k);
  s.mass.assign(floors, m);
  s.zeta1 = zeta;
  s.zeta2 = zeta;
  return s;
}

std::vector<DamageScenario> shear_building_scenarios(std::size_t healthy_count, std::size_t damaged_count) {
  // (floor number from 1, stiffness loss)
  const std::vector<std::vector<std::pair<int, double>>> patterns = {
      {},
      {{1, 0.05}},
      {{1, 0.10}},
      {{2, 0.10}, {4, 0.10}},
      {{1, 0.10}, {3, 0.15}, {5, 0.20}},
      {{2, 0.15}, {4, 0.20}, {6, 0.25}},
      {{1, 0.10}, {3, 0.15}, {5, 0.20}, {7, 0.25}},
      {{1, 0.10}, {2, 0.15}, {4, 0.20}, {6, 0.25}, {8, 0.30}},
  };
  std::vector<DamageScenario> out;
  for (std::size_t s = 0; s < patterns.size(); ++s) {
    DamageScenario d;
    d.label = static_cast<int>(s);
    d.name = s == 0 ? "healthy" : "damage" + std::to_string(s);
    d.count = s == 0 ? healthy_count : damaged_count;
    if (!patterns[s].empty()) {
      d.reduction.assign(8, 0.0);
      for (const auto& [floor, loss] : patterns[s]) d.reduction[static_cast<std::size_t>(floor - 1)] = loss;
    }
    out.push_back(std::move(d));
  }
  return out;
}

Vector shear_chain_frequencies_hz(std::size_t n, double k, double m) {
  Vector f(n);
  for (std::size_t j = 1; j <= n; ++j) {
    const double arg = static_cast<double>(2 * j - 1) * std::numbers::pi / (2.0 * static_cast<double>(2 * n + 1));
    f[j - 1] = 2.0 * std::sqrt(k / m) * std::sin(arg) / (2.0 * std::numbers::pi);
  }
  return f;
}

namespace {

// Mass-normalized eigenpairs of (K, M) for diagonal M, ascending.
std::pair<Vector, Matrix> undamped_modes(const Matrix& m, const Matrix& k) {
  const std::size_t n = m.rows();
  Matrix scaled(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) scaled(i, j) = k(i, j) / std::sqrt(m(i, i) * m(j, j));
  const SymmetricEigen eig = symmetric_eigen(symmetrized(scaled));
  Vector omega(n);
  Matrix shapes(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    const std::size_t src = n - 1 - c;
    if (!(eig.values[src] > 0.0)) throw NotPositiveDefinite("stiffness matrix is not positive definite");
    omega[c] = std::sqrt(eig.values[src]);
    for (std::size_t i = 0; i < n; ++i) shapes(i, c) = eig.vectors(i, src) / std::sqrt(m(i, i));
  }
  return {omega, shapes};
}

}  // namespace

StructuralSystem assemble_system(const BuildingSpec& spec, const DamageScenario& scenario) {
  spec.validate();
  const std::size_t n = spec.floors();
  if (!scenario.reduction.empty() && scenario.reduction.size() != n)
    throw ConfigError("damage scenario '" + scenario.name + "' does not match the floor count");
  Vector k = spec.stiffness;
  for (std::size_t i = 0; i < scenario.reduction.size(); ++i) {
    const double r = scenario.reduction[i];
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("stiffness reductions must lie in [0, 1)");
    k[i] *= 1.0 - r;
  }
  StructuralSystem s;
  s.mass = Matrix::diagonal(spec.mass);
  s.stiffness = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    s.stiffness(i, i) = k[i] + (i + 1 < n ? k[i + 1] : 0.0);
    if (i + 1 < n) {
      s.stiffness(i, i + 1) = -k[i + 1];
      s.stiffness(i + 1, i) = -k[i + 1];
    }
  }
  auto [omega, shapes] = undamped_modes(s.mass, s.stiffness);
  s.omega = omega;
  if (n == 1) {
    s.a0 = 2.0 * spec.zeta1 * omega[0];
    s.a1 = 0.0;
  } else {
    // ζ_j = a0 / (2ω_j) + a1 ω_j / 2 at the first two modes.
    const double w1 = omega[0], w2 = omega[1];
    const double det = 0.25 * (w2 / w1 - w1 / w2);
    s.a0 = (spec.zeta1 * w2 / 2.0 - spec.zeta2 * w1 / 2.0) / det;
    s.a1 = (spec.zeta2 / (2.0 * w1) - spec.zeta1 / (2.0 * w2)) / det;
  }
  s.damping = s.mass * s.a0 + s.stiffness * s.a1;
  return s;
}

ModalData modal_analysis(const StructuralSystem& sys) {
  ModalData d;
  std::tie(d.omega, d.shapes) = undamped_modes(sys.mass, sys.stiffness);
  const std::size_t n = d.omega.size();
  d.damping.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    Vector phi(n);
    for (std::size_t i = 0; i < n; ++i) phi[i] = d.shapes(i, j);
    d.damping[j] = dot(phi, matvec(sys.damping, phi)) / (2.0 * d.omega[j]);
  }
  return d;
}

void ResponseConfig::validate() const {
  if (!(fs > 0.0)) throw ConfigError("sampling frequency must be positive");
  if (!(duration > 0.0) || !(burn_in >= 0.0)) throw ConfigError("durations must be positive");
  if (!(excitation_psd >= 0.0) || !(psd_scale > 0.0)) throw ConfigError("excitation PSD must be non-negative");
}

std::pair<Matrix, Matrix> discretize_zoh(const Matrix& a, const Matrix& b, double dt) {
  const std::size_t n = a.rows(), m = b.cols();
  Matrix aug(n + m, n + m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) aug(i, j) = a(i, j) * dt;
    for (std::size_t j = 0; j < m; ++j) aug(i, n + j) = b(i, j) * dt;
  }
  const Matrix e = expm(aug);
  Matrix phi(n, n), gamma(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) phi(i, j) = e(i, j);
    for (std::size_t j = 0; j < m; ++j) gamma(i, j) = e(i, n + j);
  }
  return {phi, gamma};
}

Response simulate_response(const StructuralSystem& sys, const ResponseConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t n = sys.mass.rows();
  if (sys.omega.back() / (2.0 * std::numbers::pi) >= cfg.fs / 2.0)
    throw UnstableIntegration("highest mode lies above the Nyquist frequency");

  // State x = [u; v]; input is the floor-1 acceleration w, applied as force m₁ w.
  Matrix minv_k(n, n), minv_c(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      minv_k(i, j) = sys.stiffness(i, j) / sys.mass(i, i);
      minv_c(i, j) = sys.damping(i, j) / sys.mass(i, i);
    }
  Matrix a(2 * n, 2 * n), b(2 * n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    a(i, n + i) = 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      a(n + i, j) = -minv_k(i, j);
      a(n + i, n + j) = -minv_c(i, j);
    }
  }
  b(n, 0) = 1.0;
  const double dt = 1.0 / cfg.fs;
  const auto [phi, gamma] = discretize_zoh(a, b, dt);

  const auto burn = static_cast<std::size_t>(std::lround(cfg.burn_in * cfg.fs));
  const auto keep = static_cast<std::size_t>(std::lround(cfg.duration * cfg.fs));
  const double sigma = std::sqrt(cfg.excitation_psd * cfg.fs * cfg.psd_scale);

  Rng rng(derive_seed(seed, 0));
  Response r;
  r.clean = Matrix(keep, n);
  Vector x(2 * n, 0.0), next(2 * n);
  for (std::size_t t = 0; t < burn + keep; ++t) {
    const double w = sigma * rng.normal();
    if (t >= burn) {
      auto out = r.clean.row(t - burn);
      for (std::size_t i = 0; i < n; ++i) {
        double acc = i == 0 ? w : 0.0;
        for (std::size_t j = 0; j < n; ++j) acc -= minv_k(i, j) * x[j] + minv_c(i, j) * x[n + j];
        out[i] = acc;
      }
    }
    for (std::size_t i = 0; i < 2 * n; ++i) {
      double v = gamma(i, 0) * w;
      const auto prow = phi.row(i);
      for (std::size_t j = 0; j < 2 * n; ++j) v += prow[j] * x[j];
      next[i] = v;
    }
    std::swap(x, next);
  }
  if (!r.clean.all_finite()) throw UnstableIntegration("response diverged");

  r.measured = r.clean;
  if (cfg.add_noise) {
    Rng noise(derive_seed(seed, 1));
    for (std::size_t c = 0; c < n; ++c) {
      double power = 0.0;
      for (std::size_t t = 0; t < keep; ++t) power += r.clean(t, c) * r.clean(t, c);
      power /= static_cast<double>(keep);
      const double sd = std::sqrt(power * std::pow(10.0, -cfg.snr_db / 10.0));
      for (std::size_t t = 0; t < keep; ++t) r.measured(t, c) += sd * noise.normal();
    }
  }
  return r;
}

std::vector<Complex> fft(std::vector<Complex> x) {
  const std::size_t n = x.size();
  if (n == 0) throw DomainError("FFT of an empty sequence");
  // Planning and destruction are not thread-safe in FFTW; execution is.
  static std::mutex planner;
  auto* buf = reinterpret_cast<fftw_complex*>(x.data());
  fftw_plan plan;
  {
    std::lock_guard lock(planner);
    plan = fftw_plan_dft_1d(static_cast<int>(n), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  if (!plan) throw DomainError("FFTW could not plan the transform");
  fftw_execute(plan);
  std::lock_guard lock(planner);
  fftw_destroy_plan(plan);
  return x;
}

Spectrum cross_spectrum(std::span<const double> x, std::span<const double> y, double fs, const WelchOptions& opts) {
  if (x.size() != y.size()) throw ShapeMismatch("cross spectrum needs equal-length records");
  const auto sx = windowed_segments(x, opts);
  const auto sy = windowed_segments(y, opts);
  const std::size_t len = opts.segment, bins = len / 2 + 1;
  const Vector w = hann(len);
  double wss = 0.0;
  for (double v : w) wss += v * v;
  Spectrum s;
  s.frequency.resize(bins);
  s.value.assign(bins, Complex{});
  for (std::size_t k = 0; k < bins; ++k) s.frequency[k] = static_cast<double>(k) * fs / static_cast<double>(len);
  for (std::size_t seg = 0; seg < sx.size(); ++seg)
    for (std::size_t k = 0; k < bins; ++k) s.value[k] += std::conj(sx[seg][k]) * sy[seg][k];
  for (std::size_t k = 0; k < bins; ++k) {
    const double one_sided = (k == 0 || k == len / 2) ? 1.0 : 2.0;
    s.value[k] *= one_sided / (fs * wss * static_cast<double>(sx.size()));
  }
  return s;
}

Spectrum auto_spectrum(std::span<const double> x, double fs, const WelchOptions& opts) {
  return cross_spectrum(x, x, fs, opts);
}

TfSegment compute_tf(std::span<const double> acc_i, std::span<const double> acc_ref, double fs, const Band& band,
                     const WelchOptions& opts) {
  if (acc_i.size() != acc_ref.size()) throw ShapeMismatch("transmissibility needs equal-length records");
  const Spectrum g_ri = cross_spectrum(acc_ref, acc_i, fs, opts);
  const Spectrum g_rr = auto_spectrum(acc_ref, fs, opts);
  TfSegment t;
  for (std::size_t k = 0; k < g_rr.frequency.size(); ++k) {
    const double f = g_rr.frequency[k];
    if (f < band.low_hz || f > band.high_hz) continue;
    const double mag = std::abs(g_ri.value[k]) / g_rr.value[k].real();
    const double lg = std::log10(mag);
    if (!std::isfinite(lg)) throw NonFinite("transmissibility is not finite at " + std::to_string(f) + " Hz");
    t.frequency.push_back(f);
    t.log_magnitude.push_back(lg);
  }
  if (t.frequency.empty()) throw BandEmpty("no spectral bins between the band limits");
  return t;
}

std::vector<std::pair<std::size_t, std::size_t>> SimulationConfig::effective_pairs() const {
  if (!pairs.empty()) return pairs;
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 1; i < building.floors(); ++i) out.emplace_back(i, i - 1);
  return out;
}

Vector tf_features(const Matrix& acc, const SimulationConfig& cfg, Vector* frequency) {
  const Matrix cols = acc.transposed();
  Vector features;
  for (const auto& [i, ref] : cfg.effective_pairs()) {
    if (i >= cols.rows() || ref >= cols.rows()) throw ConfigError("sensor pair refers to a missing floor");
    const TfSegment seg = compute_tf(cols.row(i), cols.row(ref), cfg.response.fs, cfg.band, cfg.welch);
    features.insert(features.end(), seg.log_magnitude.begin(), seg.log_magnitude.end());
    if (frequency) *frequency = seg.frequency;
  }
  return features;
}

Dataset build_dataset(const SimulationConfig& cfg) {
  std::size_t total = 0;
  for (const DamageScenario& s : cfg.scenarios) total += s.count;
  if (total == 0) throw ConfigError("scenarios request no samples");
  Dataset d;
  d.pairs = cfg.effective_pairs().size();
  std::vector<Vector> rows;
  std::size_t index = 0;
  for (const DamageScenario& sc : cfg.scenarios) {
    const StructuralSystem sys = assemble_system(cfg.building, sc);
    for (std::size_t c = 0; c < sc.count; ++c, ++index) {
      const Response r = simulate_response(sys, cfg.response, derive_seed(cfg.seed, index));
      rows.push_back(tf_features(r.measured, cfg, d.frequency.empty() ? &d.frequency : nullptr));
      d.labels.push_back(sc.label);
    }
  }
  d.features = Matrix(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), d.features.row(r).begin());

  nlohmann::json prov;
  prov["generator"] = "shear-building simulation";
  prov["seed"] = cfg.seed;
  prov["floors"] = cfg.building.floors();
  prov["duration_s"] = cfg.response.duration;
  prov["fs_hz"] = cfg.response.fs;
  prov["excitation_psd"] = cfg.response.excitation_psd;
  prov["psd_scale"] = cfg.response.psd_scale;
  prov["snr_db"] = cfg.response.snr_db;
  prov["band_hz"] = {cfg.band.low_hz, cfg.band.high_hz};
  prov["welch_segment"] = cfg.welch.segment;
  prov["pairs"] = cfg.effective_pairs();
  nlohmann::json sc = nlohmann::json::array();
  for (const DamageScenario& s : cfg.scenarios)
    sc.push_back({{"label", s.label}, {"name", s.name}, {"count", s.count}, {"reduction", s.reduction}});
  prov["scenarios"] = sc;
  d.provenance_json = prov.dump();
  return d;
}

}  // namespace dpvil
