#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dpvil/dpmm.hpp"
#include "dpvil/numerics.hpp"
#include "dpvil/rng.hpp"
#include "dpvil/vae.hpp"

namespace dpvil {

enum class StatsMode { Batch, Streaming };
enum class LatentSource { Sampled, Mean };
enum class Normalization { ZScore, None };

struct EngineConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 150;
  double learning_rate = 5e-5;
  double gamma = 1.0;
  double alpha = 10.0;
  double tau = 1e-6;
  std::size_t latent_dim = 8;
  std::vector<std::size_t> hidden{128, 32};
  std::size_t mc_samples = 1;
  std::uint64_t seed = 0;
  Normalization normalization = Normalization::ZScore;
  StatsMode stats_mode = StatsMode::Batch;
  LatentSource latent_source = LatentSource::Sampled;
  std::size_t incremental_epochs = 5;
  int cavi_max_sweeps = 50;
  double cavi_rel_tol = 1e-7;

  void validate() const;
  friend bool operator==(const EngineConfig&, const EngineConfig&) = default;
};

// Component ids that represent normal operating conditions.
class HealthyRegistry {
 public:
  bool contains(std::uint64_t id) const { return ids_.contains(id); }
  void insert(std::uint64_t id) { ids_.insert(id); }
  const std::set<std::uint64_t>& ids() const noexcept { return ids_; }
  std::size_t size() const noexcept { return ids_.size(); }

  // Merge: healthy if either parent was. Split: a child stays healthy when its
  // parent was and at least half of its mass is reference-healthy (both
  // children inherit when no tag mass was recorded). Prune: dropped.
  void apply(const std::vector<LineageEvent>& events);
  // Drop ids that are no longer active.
  void restrict_to(std::span<const std::uint64_t> active);

  friend bool operator==(const HealthyRegistry&, const HealthyRegistry&) = default;

 private:
  std::set<std::uint64_t> ids_;
};

struct EngineCheckpoint {
  EngineConfig config;
  MlpParams params;
  AdamState adam;
  DpmmState dpmm;
  HealthyRegistry registry;
  Vector feature_mean;
  Vector feature_std;
  Rng rng;
  std::uint64_t epoch = 0;
};

struct EpochReport {
  std::uint64_t epoch = 0;
  double objective = 0.0;  // Σ over minibatches of L_B
  double recon = 0.0;
  double reg = 0.0;
  double elbo = 0.0;
  std::size_t active = 0;
  int splits = 0;
  int merges = 0;
};

struct Verdict {
  std::size_t component = 0;  // index of argmax active responsibility
  std::uint64_t component_id = 0;
  double max_active = 0.0;
  double tail = 0.0;
  bool anomaly = false;
};

// Fresh checkpoint: normalization from `x`, seeded network, and a DPMM whose
// prior mean is the mean encoder output over the first minibatch of `x`.
EngineCheckpoint create_engine(const EngineConfig& config, const Matrix& x);

Matrix normalize(const EngineCheckpoint& ckpt, const Matrix& x);

// One pass of minibatch network updates followed by split-merge CAVI on the
// collected latents. `tags` marks reference-healthy rows (1) or unknown (0).
EpochReport train_epoch(EngineCheckpoint& ckpt, const Matrix& x, std::span<const double> tags = {});

// Encoder means for every row of raw features.
Matrix encode_means(const EngineCheckpoint& ckpt, const Matrix& x);

std::vector<Verdict> score(const EngineCheckpoint& ckpt, const Matrix& x);
Verdict score_latent(const DpmmState& dpmm, const HealthyRegistry& registry, std::span<const double> z);

void mark_all_healthy(EngineCheckpoint& ckpt);
// Registry becomes the components whose current mass is at least `min_share` reference-healthy.
void mark_reference_healthy(EngineCheckpoint& ckpt, double min_share = 0.5);
// Fold the current per-row contributions into the retained memory.
void commit_to_memory(EngineCheckpoint& ckpt);

EngineCheckpoint fit_initial(const EngineConfig& config, const Matrix& healthy,
                             std::vector<EpochReport>* trace = nullptr);

struct IngestResult {
  std::vector<Verdict> verdicts;
  std::vector<EpochReport> trace;
};

// Incremental epochs on `batch` alone, verdicts for its rows, then commit. A
// checkpoint with empty memory (batch training) is committed first so earlier
// data is retained. An empty batch changes nothing.
IngestResult ingest(EngineCheckpoint& ckpt, const Matrix& batch);

// Binary checkpoint: magic, version, JSON descriptor, little-endian f64 arrays, CRC-32.
std::vector<std::uint8_t> serialize(const EngineCheckpoint& ckpt);
EngineCheckpoint deserialize(std::span<const std::uint8_t> bytes);
void save(const EngineCheckpoint& ckpt, const std::filesystem::path& path);
EngineCheckpoint load(const std::filesystem::path& path);

}  // namespace dpvil
