#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dpvil/dataset.hpp"
#include "dpvil/engine.hpp"
#include "dpvil/metrics.hpp"
#include "dpvil/simulator.hpp"

namespace dpvil {

// From `epoch` on, the training set holds every row whose label is in `classes`.
struct ScheduleStep {
  std::size_t epoch = 0;
  std::vector<int> classes;
};

struct RunConfig {
  EngineConfig engine;
  SimulationConfig simulation;
  std::string dataset;  // base path of a dataset written by `simulate` or supplied externally
  std::vector<ScheduleStep> schedule;  // empty: every class from the first epoch
  double train_fraction = 0.8;
  double validation_fraction = 0.1;
  std::size_t repeats = 1;
  std::vector<double> alphas{0.1, 1.0, 10.0, 50.0, 100.0};
  bool trace_metrics = true;  // per-epoch ACC/ARI/NMI/DDA on the current training rows

  void validate() const;
};

// Class-introduction schedule at desk scale: classes {0}, then {0,1,2} at 20,
// {0..4} at 40 and {0..7} at 95, trained for 125 epochs.
std::vector<ScheduleStep> desk_schedule();

RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_to_json(const RunConfig& cfg);
// FNV-1a 64 over the canonical JSON form, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

struct TraceRow {
  std::size_t epoch = 0;  // 1-based epoch whose update follows this evaluation
  std::size_t classes = 0;
  std::size_t rows = 0;
  MetricSummary metrics;  // measured on the epoch's training rows before its update
  std::size_t active = 0;
  double elbo = 0.0;
  double objective = 0.0;
  int splits = 0;
  int merges = 0;
};

struct TrainResult {
  EngineCheckpoint checkpoint;
  std::vector<TraceRow> trace;
  MetricSummary test;
  Matrix test_latents;
  std::vector<int> test_clusters;
  std::vector<int> test_labels;
};

// Stratified split, normalization from the training split, then epochs following the schedule.
TrainResult run_training(const Dataset& data, const RunConfig& cfg, std::uint64_t seed);

struct Evaluation {
  MetricSummary metrics;
  std::vector<Verdict> verdicts;
  Matrix latents;
  std::vector<int> clusters;
};

Evaluation evaluate_checkpoint(const EngineCheckpoint& ckpt, const Dataset& data);

// Running-ACC behaviour around one class-introduction epoch.
struct DipRecovery {
  std::size_t epoch = 0;
  double before = 0.0;    // ACC at the evaluation preceding the introduction
  double at = 0.0;        // ACC at the introduction epoch
  double drop = 0.0;
  std::size_t recovered_after = 0;  // epochs until ACC ≥ before − 0.05; 0 if never
  bool recovered = false;
};
std::vector<DipRecovery> analyze_dips(const std::vector<TraceRow>& trace, const std::vector<ScheduleStep>& schedule,
                                      std::size_t window = 30, double tolerance = 0.05);

std::string svg_scatter(const Matrix& coords, const std::vector<int>& groups, const std::string& title);
void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace, const std::string& header);

// Exit codes for the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;

// Entry point shared by the executable and tests; returns an exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dpvil
