#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace dpvil {

// Seeded generator with a portable normal sampler; std::normal_distribution
// is implementation-defined and caches state, which would break checkpoint
// reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform();  // [0, 1)
  double normal();
  void fill_normal(std::span<double> out);
  std::uint64_t next_u64() { return engine_(); }
  std::size_t below(std::size_t n);

  std::string serialize() const;
  static Rng deserialize(const std::string& text);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

// Stream seed for item `index` under a master seed (SplitMix64 finalizer).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace dpvil
