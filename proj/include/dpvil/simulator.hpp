#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dpvil/dataset.hpp"
#include "dpvil/numerics.hpp"

namespace dpvil {

struct BuildingSpec {
  Vector stiffness;  // k_i (N/m), floor i connects to floor i−1 (ground for i = 0)
  Vector mass;       // m_i (kg)
  double zeta1 = 0.01;
  double zeta2 = 0.01;

  std::size_t floors() const noexcept { return mass.size(); }
  void validate() const;

  static BuildingSpec uniform(std::size_t floors = 8, double k = 2.5e6, double m = 1000.0, double zeta = 0.01);
};

struct DamageScenario {
  int label = 0;
  std::string name;
  Vector reduction;  // per-floor stiffness loss in [0, 1); empty means undamaged
  std::size_t count = 0;
};

// The eight structural conditions of the numerical building: healthy plus seven
// damage patterns of increasing severity and extent.
std::vector<DamageScenario> shear_building_scenarios(std::size_t healthy_count = 300, std::size_t damaged_count = 100);

struct StructuralSystem {
  Matrix mass;
  Matrix stiffness;
  Matrix damping;
  double a0 = 0.0;  // C = a0 M + a1 K
  double a1 = 0.0;
  Vector omega;     // undamped natural circular frequencies, ascending
};

StructuralSystem assemble_system(const BuildingSpec& spec, const DamageScenario& scenario = {});

// ω_j / 2π of a uniform fixed-free chain of n masses.
Vector shear_chain_frequencies_hz(std::size_t n, double k, double m);

struct ModalData {
  Vector omega;       // ascending
  Matrix shapes;      // column j is the M-normalized mode of omega[j]
  Vector damping;     // ζ_j = φ_jᵀ C φ_j / (2 ω_j)
};
ModalData modal_analysis(const StructuralSystem& sys);

struct ResponseConfig {
  double duration = 60.0;      // recorded seconds
  double burn_in = 60.0;       // discarded seconds before recording
  double fs = 50.0;
  double excitation_psd = 0.5;  // one-sided auto-PSD of the floor-1 acceleration input
  // Discrete white-noise variance is psd · fs · psd_scale; 0.5 integrates a one-sided PSD up to Nyquist.
  double psd_scale = 0.5;
  double snr_db = 20.0;
  bool add_noise = true;

  void validate() const;
};

struct Response {
  Matrix clean;     // samples × floors, absolute floor accelerations before noise
  Matrix measured;  // clean plus per-channel Gaussian noise
};

Response simulate_response(const StructuralSystem& sys, const ResponseConfig& cfg, std::uint64_t seed);

// Exact zero-order-hold discretization of ẋ = A x + B u: returns (Φ, Γ).
std::pair<Matrix, Matrix> discretize_zoh(const Matrix& a, const Matrix& b, double dt);

std::vector<std::complex<double>> fft(std::vector<std::complex<double>> x);

struct WelchOptions {
  std::size_t segment = 512;
  double overlap = 0.5;
};

struct Spectrum {
  Vector frequency;
  std::vector<std::complex<double>> value;  // one-sided, density-scaled
};

// Welch estimate of G_xy = E[conj(X) Y] with a Hann window.
Spectrum cross_spectrum(std::span<const double> x, std::span<const double> y, double fs, const WelchOptions& opts = {});
Spectrum auto_spectrum(std::span<const double> x, double fs, const WelchOptions& opts = {});

struct Band {
  double low_hz = 0.5;
  double high_hz = 16.0;
};

struct TfSegment {
  Vector frequency;
  Vector log_magnitude;  // log10 |G_ref,i / G_ref,ref|
};

TfSegment compute_tf(std::span<const double> acc_i, std::span<const double> acc_ref, double fs, const Band& band,
                     const WelchOptions& opts = {});

struct SimulationConfig {
  BuildingSpec building = BuildingSpec::uniform();
  std::vector<DamageScenario> scenarios = shear_building_scenarios();
  ResponseConfig response;
  Band band;
  WelchOptions welch;
  // (measured floor, reference floor), zero-based; defaults to every adjacent pair.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::uint64_t seed = 0;

  std::vector<std::pair<std::size_t, std::size_t>> effective_pairs() const;
};

// Feature vector of one record: concatenated log-magnitude TFs over the configured pairs.
Vector tf_features(const Matrix& accelerations, const SimulationConfig& cfg, Vector* frequency = nullptr);

Dataset build_dataset(const SimulationConfig& cfg);

}  // namespace dpvil
