// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// `acceptance 1 3 9` runs a subset.

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dpvil/cli.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace dpvil;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream o;
  o << std::setprecision(digits) << v;
  return o.str();
}

// ---- 1: gradients ------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  Rng rng(20240601);
  double worst = 0.0;
  std::string where;
  std::size_t entries = 0;
  const int nets = 24;
  for (int i = 0; i < nets; ++i) {
    const std::size_t in = 2 + rng.below(7);
    const std::size_t latent = 1 + rng.below(3);
    const std::size_t k = 1 + rng.below(3);
    std::vector<std::size_t> hidden;
    for (std::size_t l = 0, layers = 1 + rng.below(2); l < layers; ++l) hidden.push_back(2 + rng.below(5));
    const MlpParams p = fixture::random_params(in, hidden, latent, 1000 + static_cast<std::uint64_t>(i));
    const DpmmState s = fixture::random_dpmm(latent, k, rng);
    const std::size_t rows = 2 + rng.below(3);
    const Matrix x = fixture::random_matrix(rows, in, rng);
    const Matrix eps = fixture::random_matrix(rows, latent, rng);
    const double gamma = 0.2 + 2.0 * rng.uniform();
    const double scale = 0.5 + 3.0 * rng.uniform();
    const fixture::GradCheck gc = fixture::gradient_check(p, x, eps, s, gamma, scale);
    entries += gc.entries;
    if (gc.max_rel_error > worst) {
      worst = gc.max_rel_error;
      where = "net " + std::to_string(i) + " " + gc.worst;
    }
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-4 && t < 60.0, std::to_string(nets) + " nets, " + std::to_string(entries) +
                                          " entries, max relative error " + fmt(worst, 3) + " (" + where +
                                          "), " + fmt(t, 3) + " s"};
}

// ---- 2: CAVI -------------------------------------------------------------------

DpmmState state_with(const DpPrior& p, std::vector<ComponentStats> comps) {
  DpmmState s = DpmmState::initial(p);
  s.stats.components = std::move(comps);
  const std::size_t k = s.stats.components.size();
  s.memory.assign(k, ComponentStats(p.dim()));
  s.ids.resize(k);
  for (std::size_t i = 0; i < k; ++i) s.ids[i] = i;
  s.next_id = k;
  auto [nw, sticks] = posterior_from_stats(p, s.stats);
  s.nw = std::move(nw);
  s.sticks = std::move(sticks);
  return s;
}

Outcome cavi() {
  const auto t0 = Clock::now();
  double worst_gap = 0.0, worst_drop = 0.0;
  int fixtures = 0, sweeps = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Matrix z(20, 1);
    for (std::size_t n = 0; n < 20; ++n) z(n, 0) = (n % 2 ? 3.0 : -1.0) + 0.8 * rng.normal();
    double mean = 0.0;
    for (std::size_t n = 0; n < 20; ++n) mean += z(n, 0) / 20.0;
    for (double alpha : {1.0, 10.0}) {
      const DpPrior p = DpPrior::weakly_informative(alpha, Vector{mean});
      std::vector<ComponentStats> comps(1 + seed % 3, ComponentStats(1));
      for (std::size_t n = 0; n < 20; ++n) comps[rng.below(comps.size())].add_point(z.row(n), 1.0);
      std::sort(comps.begin(), comps.end(), [](const auto& a, const auto& b) { return a.n > b.n; });
      while (comps.back().n == 0.0) comps.pop_back();
      DpmmState s = state_with(p, comps);
      ++fixtures;
      double prev = cavi_elbo(s, z);
      for (int i = 0; i < 15; ++i) {
        worst_gap = std::max(worst_gap, std::abs(cavi_elbo(s, z) - oracle::textbook_elbo(s, z)));
        coordinate_sweep(s, z);
        ++sweeps;
        const double cur = cavi_elbo(s, z);
        worst_drop = std::max(worst_drop, (prev - cur) / std::abs(prev));
        prev = cur;
      }
      worst_gap = std::max(worst_gap, std::abs(cavi_elbo(s, z) - oracle::textbook_elbo(s, z)));
    }
  }
  const double t = seconds_since(t0);
  return {worst_gap <= 1e-8 && worst_drop <= 1e-8 && t < 10.0,
          std::to_string(fixtures) + " fixtures, max |bound - textbook| " + fmt(worst_gap, 3) + ", " +
              std::to_string(sweeps) + " sweeps, worst relative decrease " + fmt(std::max(worst_drop, 0.0), 3) +
              ", " + fmt(t, 3) + " s"};
}

// ---- 3: split-merge recovery -------------------------------------------------------

Outcome split_merge() {
  const auto t0 = Clock::now();
  int good = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    const std::vector<Vector> centers{{0, 0}, {10, 0}, {0, 10}};
    Matrix z(180, 2);
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 60; ++i)
        for (std::size_t j = 0; j < 2; ++j) z(60 * b + i, j) = centers[b][j] + 0.3 * rng.normal();
    Vector mean(2, 0.0);
    for (std::size_t n = 0; n < 180; ++n)
      for (std::size_t j = 0; j < 2; ++j) mean[j] += z(n, j) / 180.0;
    CaviOptions opts;
    opts.seed = seed;
    const SplitMergeResult r =
        run_split_merge(DpmmState::initial(DpPrior::weakly_informative(EngineConfig{}.alpha, mean)), z, opts);
    std::vector<int> pred, truth;
    for (std::size_t n = 0; n < 180; ++n) {
      const auto row = r.resp.active.row(n);
      pred.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
      truth.push_back(static_cast<int>(n / 60));
    }
    const Matrix c = contingency(pred, truth);
    double pure = 0.0;
    for (std::size_t i = 0; i < c.rows(); ++i) {
      double best = 0.0;
      for (std::size_t j = 0; j < c.cols(); ++j) best = std::max(best, c(i, j));
      pure += best / 180.0;
    }
    const bool ok = r.state.active() == 3 && pure >= 0.95;
    good += ok;
    per_seed += (per_seed.empty() ? "" : " ") + std::to_string(r.state.active()) + "/" + fmt(pure, 3);
  }
  const double t = seconds_since(t0);
  return {good >= 9 && t < 30.0, std::to_string(good) + " of 10 seeds with K=3 and purity >= 0.95 (K/purity: " +
                                     per_seed + "), " + fmt(t, 3) + " s"};
}

// ---- 4: memory and resume ------------------------------------------------------------

double rel_diff(const Matrix& a, const Matrix& b) { return frobenius(a - b) / std::max(frobenius(a), 1e-300); }

Outcome memory_and_resume() {
  Rng rng(77);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 1 + rng.below(4);
    Vector m0(d);
    for (double& v : m0) v = rng.normal();
    const DpPrior prior = DpPrior::weakly_informative(1.0 + 5.0 * rng.uniform(), m0);
    ComponentStats a(d), b(d);
    for (int i = 0; i < 15; ++i) {
      Vector z(d);
      for (double& v : z) v = 2.0 * rng.normal();
      (i % 3 ? a : b).add_point(z, 0.2 + rng.uniform());
    }
    SuffStats joint, first, second;
    joint.components = {a + b};
    first.components = {a};
    second.components = {b};
    const NwPosterior all = posterior_from_stats(prior, joint).first[0];
    // Sequential: the posterior after A becomes the prior for B.
    const NwPosterior after_a = posterior_from_stats(prior, first).first[0];
    DpPrior next = prior;
    next.mean = after_a.mean;
    next.lambda = after_a.lambda;
    next.scale = after_a.scale;
    next.dof = after_a.dof;
    const NwPosterior seq = posterior_from_stats(next, second).first[0];
    double mean_gap = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      mean_gap = std::max(mean_gap, std::abs(all.mean[j] - seq.mean[j]) / std::max(1.0, std::abs(all.mean[j])));
    worst = std::max({worst, mean_gap, std::abs(all.lambda - seq.lambda) / all.lambda,
                      std::abs(all.dof - seq.dof) / all.dof, rel_diff(all.scale, seq.scale)});
  }

  EngineConfig cfg;
  cfg.batch_size = 16;
  cfg.latent_dim = 2;
  cfg.hidden = {12};
  cfg.learning_rate = 1e-3;
  cfg.seed = 5;
  Matrix x(60, 6);
  for (std::size_t r = 0; r < 60; ++r)
    for (std::size_t c = 0; c < 6; ++c) x(r, c) = (r < 30 ? -1.0 : 1.5) * (1.0 + 0.1 * c) + 0.3 * rng.normal();
  EngineCheckpoint straight = create_engine(cfg, x);
  EngineCheckpoint resumed = straight;
  for (int e = 0; e < 6; ++e) train_epoch(straight, x);
  for (int e = 0; e < 3; ++e) train_epoch(resumed, x);
  const fs::path path = fs::temp_directory_path() / "dpvil_acceptance_resume.ckpt";
  save(resumed, path);
  EngineCheckpoint loaded = load(path);
  fs::remove(path);
  for (int e = 0; e < 3; ++e) train_epoch(loaded, x);
  const bool identical = serialize(loaded) == serialize(straight);
  return {worst <= 1e-9 && identical, "max relative gap joint vs sequential posterior " + fmt(worst, 3) +
                                          ", resumed training " + (identical ? "bit-identical" : "DIFFERS")};
}

// ---- 5: simulator physics ---------------------------------------------------------------

Outcome physics() {
  const BuildingSpec spec = BuildingSpec::uniform();
  const StructuralSystem sys = assemble_system(spec);
  const std::size_t n = spec.floors();
  const double k = spec.stiffness[0], m = spec.mass[0];
  double freq_gap = 0.0;
  for (std::size_t r = 1; r <= n; ++r) {
    // Uniform fixed-free shear chain.
    const double w = 2.0 * std::sqrt(k / m) *
                     std::sin((2.0 * static_cast<double>(r) - 1.0) * std::numbers::pi / (2.0 * (2.0 * n + 1.0)));
    freq_gap = std::max(freq_gap, std::abs(sys.omega[r - 1] - w) / w);
  }
  const double f1 = sys.omega[0] / (2.0 * std::numbers::pi);
  double zeta_gap = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    const double zeta = sys.a0 / (2.0 * sys.omega[i]) + sys.a1 * sys.omega[i] / 2.0;
    zeta_gap = std::max(zeta_gap, std::abs(zeta - 0.01));
  }
  ResponseConfig rc;
  const Response resp = simulate_response(sys, rc, 99);
  double snr_gap = 0.0, worst_snr = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    double ps = 0.0, pn = 0.0;
    for (std::size_t t = 0; t < resp.clean.rows(); ++t) {
      const double s = resp.clean(t, c), e = resp.measured(t, c) - s;
      ps += s * s;
      pn += e * e;
    }
    const double snr = 10.0 * std::log10(ps / pn);
    if (std::abs(snr - 20.0) >= snr_gap) {
      snr_gap = std::abs(snr - 20.0);
      worst_snr = snr;
    }
  }
  const bool ok = freq_gap <= 1e-8 && std::abs(f1 - 1.469) / 1.469 < 1e-3 && zeta_gap <= 1e-10 && snr_gap <= 0.5;
  return {ok, "eigenfrequency relative error " + fmt(freq_gap, 3) + ", f1 = " + fmt(f1, 6) + " Hz, damping error " +
                  fmt(zeta_gap, 3) + ", worst channel SNR " + fmt(worst_snr, 5) + " dB"};
}

// ---- 6-8: desk-scale incremental runs -----------------------------------------------------

RunConfig desk_config() {
  RunConfig cfg;
  cfg.engine.epochs = 125;
  cfg.engine.learning_rate = 1e-3;
  cfg.schedule = desk_schedule();
  return cfg;
}

struct DeskRuns {
  Dataset data;
  std::map<double, std::vector<TrainResult>> by_alpha;
  double seconds_alpha10 = 0.0;
};

DeskRuns& desk() {
  static DeskRuns runs = [] {
    DeskRuns r;
    SimulationConfig sim;
    sim.seed = 2024;
    r.data = build_dataset(sim);
    return r;
  }();
  return runs;
}

const std::vector<TrainResult>& runs_for(double alpha) {
  DeskRuns& d = desk();
  auto it = d.by_alpha.find(alpha);
  if (it != d.by_alpha.end()) return it->second;
  RunConfig cfg = desk_config();
  cfg.engine.alpha = alpha;
  std::vector<TrainResult> out;
  const auto t0 = Clock::now();
  for (std::uint64_t seed : {1, 2, 3}) {
    out.push_back(run_training(d.data, cfg, seed));
    const MetricSummary& m = out.back().test;
    std::cout << "  alpha " << alpha << " seed " << seed << ": DDA " << fmt(m.dda) << " ACC " << fmt(m.acc) << " ARI "
              << fmt(m.ari) << " NMI " << fmt(m.nmi) << " clusters " << out.back().checkpoint.dpmm.active() << '\n'
              << std::flush;
  }
  if (alpha == desk_config().engine.alpha) d.seconds_alpha10 = seconds_since(t0);
  return d.by_alpha.emplace(alpha, std::move(out)).first->second;
}

Outcome desk_reproduction() {
  const double alpha = desk_config().engine.alpha;
  const auto& runs = runs_for(alpha);
  MetricSummary mean;
  for (const auto& r : runs) {
    mean.dda += r.test.dda / 3.0;
    mean.acc += r.test.acc / 3.0;
    mean.ari += r.test.ari / 3.0;
    mean.nmi += r.test.nmi / 3.0;
  }
  const double t = desk().seconds_alpha10;
  const bool ok = mean.dda >= 0.95 && mean.acc >= 0.90 && mean.ari >= 0.80 && mean.nmi >= 0.80;
  return {ok, "mean over 3 seeds: DDA " + fmt(mean.dda) + " (>= 0.95), ACC " + fmt(mean.acc) + " (>= 0.90), ARI " +
                  fmt(mean.ari) + " (>= 0.80), NMI " + fmt(mean.nmi) + " (>= 0.80), " + fmt(t / 60.0, 3) +
                  " min for 3 runs"};
}

Outcome incremental_dynamic() {
  const auto& runs = runs_for(desk_config().engine.alpha);
  int good = 0;
  std::string detail;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    const auto dips = analyze_dips(runs[s].trace, desk_schedule(), 30, 0.05);
    bool ok = !dips.empty();
    detail += "seed " + std::to_string(s + 1) + ":";
    for (const auto& d : dips) {
      const bool this_ok = d.drop >= 0.02 && d.recovered;
      ok = ok && this_ok;
      detail += " [epoch " + std::to_string(d.epoch) + " " + fmt(d.before, 3) + "->" + fmt(d.at, 3) +
                (d.recovered ? ", back in " + std::to_string(d.recovered_after) : ", not recovered") + "]";
    }
    detail += s + 1 < runs.size() ? "; " : "";
    good += ok;
  }
  return {good >= 2, std::to_string(good) + " of 3 seeds satisfy every introduction; " + detail};
}

Outcome sensitivity() {
  double lo = 1.0, hi = 0.0;
  std::string detail;
  for (double alpha : {0.1, 1.0, 10.0, 50.0, 100.0}) {
    double acc = 0.0;
    for (const auto& r : runs_for(alpha)) acc += r.test.acc / 3.0;
    lo = std::min(lo, acc);
    hi = std::max(hi, acc);
    detail += (detail.empty() ? "" : ", ") + std::string("alpha ") + fmt(alpha) + ": " + fmt(acc);
  }
  return {hi - lo <= 0.08, "mean ACC spread " + fmt(hi - lo) + " (<= 0.08); " + detail};
}

// ---- 9: metrics -------------------------------------------------------------------------------

Outcome metrics_oracles() {
  Rng rng(909);
  int mismatches = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(6);
    Matrix w(r, c);
    for (double& v : w.values()) v = static_cast<double>(rng.below(25));
    mismatches += max_weight_assignment(w).total != oracle::brute_force_assignment(w);

    const std::size_t n = 2 + rng.below(60);
    std::vector<int> u(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      u[i] = static_cast<int>(rng.below(r));
      v[i] = static_cast<int>(rng.below(c));
    }
    worst = std::max({worst, std::abs(ari(u, v) - oracle::ari_pairs(u, v)), std::abs(nmi(u, v) - oracle::nmi_direct(u, v))});
    // ACC through the contingency table equals the brute-force bijection on the same table.
    const double direct = oracle::brute_force_assignment(contingency(u, v)) / static_cast<double>(n);
    mismatches += acc(u, v) != direct;
  }
  return {mismatches == 0 && worst <= 1e-12, std::to_string(mismatches) +
                                                 " Hungarian mismatches in 1000 tables, max ARI/NMI deviation " +
                                                 fmt(worst, 3)};
}

// ---- 10: external matrix ------------------------------------------------------------------------

Outcome external_eval() {
  const fs::path dir = fs::temp_directory_path() / "dpvil_acceptance_external";
  fs::remove_all(dir);
  fs::create_directories(dir);
  // Written by hand in the documented layout rather than through the library writer.
  const std::size_t rows = 48, cols = 30;
  Rng rng(1010);
  std::vector<double> values;
  std::vector<int> labels;
  for (std::size_t r = 0; r < rows; ++r) {
    const int label = static_cast<int>(r % 3);
    labels.push_back(label);
    for (std::size_t c = 0; c < cols; ++c)
      values.push_back(std::log10(1.0 + 0.5 * label * std::sin(0.2 * static_cast<double>(c))) + 0.02 * rng.normal());
  }
  {
    std::ofstream bin(dir / "tf.bin", std::ios::binary);
    for (double v : values) {
      unsigned char b[8];
      std::uint64_t u;
      std::memcpy(&u, &v, 8);
      for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
      bin.write(reinterpret_cast<const char*>(b), 8);
    }
  }
  nlohmann::json desc = {{"rows", rows}, {"cols", cols}, {"dtype", "f64le"}, {"order", "row-major"},
                         {"data", "tf.bin"}, {"labels", labels}};
  std::ofstream(dir / "tf.json") << desc.dump();

  const Dataset d = read_dataset(dir / "tf.json");
  EngineConfig cfg;
  cfg.batch_size = 8;
  cfg.latent_dim = 2;
  cfg.hidden = {16};
  cfg.learning_rate = 1e-3;
  EngineCheckpoint ckpt = create_engine(cfg, d.features);
  for (int e = 0; e < 10; ++e) train_epoch(ckpt, d.features);
  save(ckpt, dir / "model.ckpt");

  const std::string ck = (dir / "model.ckpt").string(), out = (dir / "out").string(),
                    in = (dir / "tf.json").string();
  const char* argv[] = {"dpvil", "eval", "--checkpoint", ck.c_str(), "--out", out.c_str(), in.c_str()};
  std::ostringstream log, err;
  const int code = run_cli(7, argv, log, err);
  bool all = false;
  std::string got;
  if (code == kExitOk) {
    std::ifstream f(dir / "out/eval.json");
    const auto j = nlohmann::json::parse(f);
    all = true;
    for (const char* key : {"dda", "acc", "ari", "nmi"}) {
      all = all && j.contains(key) && j[key].is_number();
      if (j.contains(key)) got += std::string(" ") + key + "=" + fmt(j[key].get<double>(), 3);
    }
  }
  fs::remove_all(dir);
  return {code == kExitOk && all, "eval exit code " + std::to_string(code) + "," + got + err.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradients},
      {"CAVI correctness", cavi},
      {"split-merge recovery", split_merge},
      {"summary-statistics memory", memory_and_resume},
      {"simulator physics", physics},
      {"desk-scale reproduction", desk_reproduction},
      {"incremental dynamic", incremental_dynamic},
      {"concentration sensitivity", sensitivity},
      {"metrics oracle equivalence", metrics_oracles},
      {"external matrix evaluation", external_eval},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!wanted.empty() && !wanted.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << '\n'
              << std::flush;
  }
  return failed == 0 ? 0 : 1;
}
