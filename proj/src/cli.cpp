#include "dpvil/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "dpvil/json_io.hpp"

namespace dpvil {

using nlohmann::json;

namespace {

// ---- configuration -------------------------------------------------------

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end())
      throw ConfigError("unknown key '" + key + "' in " + where);
}

json scenario_to_json(const DamageScenario& s) {
  json damage = json::object();
  for (std::size_t i = 0; i < s.reduction.size(); ++i)
    if (s.reduction[i] != 0.0) damage[std::to_string(i + 1)] = s.reduction[i];
  return {{"label", s.label}, {"name", s.name}, {"count", s.count}, {"damage", damage}};
}

DamageScenario scenario_from_json(const json& j, std::size_t floors) {
  reject_unknown(j, {"label", "name", "count", "damage"}, "scenario");
  DamageScenario s;
  s.label = field<int>(j, "label", "scenario");
  s.count = field<std::size_t>(j, "count", "scenario");
  s.name = j.value("name", "class" + std::to_string(s.label));
  if (s.label < 0) throw ConfigError("scenario labels must be non-negative");
  if (j.contains("damage")) {
    for (const auto& [floor, loss] : j.at("damage").items()) {
      std::size_t f = 0;
      try {
        f = std::stoul(floor);
      } catch (const std::exception&) {
        throw ConfigError("damage keys are floor numbers, got '" + floor + "'");
      }
      if (f == 0 || f > floors) throw ConfigError("damaged floor " + floor + " does not exist");
      if (s.reduction.empty()) s.reduction.assign(floors, 0.0);
      s.reduction[f - 1] = loss.get<double>();
    }
  }
  return s;
}

json simulation_to_json(const SimulationConfig& c) {
  json scenarios = json::array();
  for (const auto& s : c.scenarios) scenarios.push_back(scenario_to_json(s));
  return {{"stiffness", c.building.stiffness},
          {"mass", c.building.mass},
          {"zeta1", c.building.zeta1},
          {"zeta2", c.building.zeta2},
          {"scenarios", scenarios},
          {"duration", c.response.duration},
          {"burn_in", c.response.burn_in},
          {"fs", c.response.fs},
          {"excitation_psd", c.response.excitation_psd},
          {"psd_scale", c.response.psd_scale},
          {"snr_db", c.response.snr_db},
          {"add_noise", c.response.add_noise},
          {"band", {c.band.low_hz, c.band.high_hz}},
          {"segment", c.welch.segment},
          {"overlap", c.welch.overlap},
          {"pairs", c.pairs},
          {"seed", c.seed}};
}

SimulationConfig simulation_from_json(const json& j) {
  reject_unknown(j,
                 {"floors", "stiffness", "mass", "zeta", "zeta1", "zeta2", "scenarios", "healthy_count",
                  "damaged_count", "duration", "burn_in", "fs", "excitation_psd", "psd_scale", "snr_db", "add_noise",
                  "band", "segment", "overlap", "pairs", "seed"},
                 "simulation");
  SimulationConfig c;
  try {
    const std::size_t floors = j.value("floors", std::size_t{8});
    auto per_floor = [&](const char* key, double fallback) {
      if (!j.contains(key)) return Vector(floors, fallback);
      if (j[key].is_number()) return Vector(floors, j[key].get<double>());
      return j[key].get<Vector>();
    };
    c.building.stiffness = per_floor("stiffness", 2.5e6);
    c.building.mass = per_floor("mass", 1000.0);
    c.building.zeta1 = j.value("zeta1", j.value("zeta", 0.01));
    c.building.zeta2 = j.value("zeta2", j.value("zeta", 0.01));
    if (j.contains("scenarios")) {
      if (j.contains("healthy_count") || j.contains("damaged_count"))
        throw ConfigError("give either scenarios or healthy_count/damaged_count");
      c.scenarios.clear();
      for (const auto& s : j["scenarios"]) c.scenarios.push_back(scenario_from_json(s, c.building.floors()));
    } else {
      c.scenarios = shear_building_scenarios(j.value("healthy_count", std::size_t{300}),
                                             j.value("damaged_count", std::size_t{100}));
    }
    c.response.duration = j.value("duration", c.response.duration);
    c.response.burn_in = j.value("burn_in", c.response.burn_in);
    c.response.fs = j.value("fs", c.response.fs);
    c.response.excitation_psd = j.value("excitation_psd", c.response.excitation_psd);
    c.response.psd_scale = j.value("psd_scale", c.response.psd_scale);
    c.response.snr_db = j.value("snr_db", c.response.snr_db);
    c.response.add_noise = j.value("add_noise", c.response.add_noise);
    if (j.contains("band")) {
      const auto b = j["band"].get<std::vector<double>>();
      if (b.size() != 2) throw ConfigError("band needs [low, high]");
      c.band = {b[0], b[1]};
    }
    c.welch.segment = j.value("segment", c.welch.segment);
    c.welch.overlap = j.value("overlap", c.welch.overlap);
    c.pairs = j.value("pairs", c.pairs);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("simulation: ") + e.what());
  }
  c.building.validate();
  c.response.validate();
  if (!(c.band.low_hz < c.band.high_hz)) throw ConfigError("band must satisfy low < high");
  return c;
}

json schedule_to_json(const std::vector<ScheduleStep>& s) {
  json out = json::array();
  for (const auto& step : s) out.push_back({{"epoch", step.epoch}, {"classes", step.classes}});
  return out;
}

json run_config_json(const RunConfig& c) {
  return {{"engine", c.engine},
          {"simulation", simulation_to_json(c.simulation)},
          {"dataset", c.dataset},
          {"schedule", schedule_to_json(c.schedule)},
          {"train_fraction", c.train_fraction},
          {"validation_fraction", c.validation_fraction},
          {"repeats", c.repeats},
          {"alphas", c.alphas},
          {"trace_metrics", c.trace_metrics}};
}

// ---- helpers ---------------------------------------------------------------

std::vector<int> labels_of(const std::vector<Verdict>& v) {
  std::vector<std::uint64_t> ids;
  ids.reserve(v.size());
  for (const Verdict& x : v) ids.push_back(x.component_id);
  return compact_labels(ids);
}

std::vector<bool> flags_of(const std::vector<Verdict>& v) {
  std::vector<bool> f;
  f.reserve(v.size());
  for (const Verdict& x : v) f.push_back(x.anomaly);
  return f;
}

std::vector<ScheduleStep> effective_schedule(const RunConfig& cfg, const std::vector<int>& labels) {
  if (!cfg.schedule.empty()) return cfg.schedule;
  std::set<int> all(labels.begin(), labels.end());
  return {{0, std::vector<int>(all.begin(), all.end())}};
}

}  // namespace

// ---- configuration API -----------------------------------------------------

std::vector<ScheduleStep> desk_schedule() {
  return {{0, {0}}, {20, {0, 1, 2}}, {40, {0, 1, 2, 3, 4}}, {95, {0, 1, 2, 3, 4, 5, 6, 7}}};
}

void RunConfig::validate() const {
  engine.validate();
  if (!(train_fraction > 0.0) || !(validation_fraction >= 0.0) || train_fraction + validation_fraction > 1.0)
    throw ConfigError("split fractions must be positive and sum to at most 1");
  if (repeats == 0) throw ConfigError("repeats must be positive");
  if (alphas.empty()) throw ConfigError("alphas must not be empty");
  for (double a : alphas)
    if (!(a > 0.0)) throw ConfigError("every alpha must be positive");
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (schedule[i].classes.empty()) throw ConfigError("schedule steps need at least one class");
    if (i == 0 && schedule[i].epoch != 0) throw ConfigError("schedule must start at epoch 0");
    if (i > 0 && schedule[i].epoch <= schedule[i - 1].epoch) throw ConfigError("schedule epochs must increase strictly");
    if (schedule[i].epoch >= engine.epochs && i > 0) throw ConfigError("schedule step lies beyond the last epoch");
  }
}

RunConfig run_config_from_json(const std::string& text) {
  const json j = parse_json_text(text, "run config");
  reject_unknown(j,
                 {"engine", "simulation", "dataset", "schedule", "train_fraction", "validation_fraction", "repeats",
                  "alphas", "trace_metrics"},
                 "run config");
  RunConfig c;
  if (j.contains("engine")) c.engine = j["engine"].get<EngineConfig>();
  if (j.contains("simulation")) c.simulation = simulation_from_json(j["simulation"]);
  try {
    c.dataset = j.value("dataset", c.dataset);
    if (j.contains("schedule")) {
      const json& s = j["schedule"];
      if (s.is_string()) {
        if (s == "desk") c.schedule = desk_schedule();
        else if (s == "none") c.schedule.clear();
        else throw ConfigError("schedule must be \"desk\", \"none\" or a list of steps");
      } else {
        for (const auto& step : s) {
          reject_unknown(step, {"epoch", "classes"}, "schedule step");
          c.schedule.push_back({step.at("epoch").get<std::size_t>(), step.at("classes").get<std::vector<int>>()});
        }
      }
    }
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.repeats = j.value("repeats", c.repeats);
    c.alphas = j.value("alphas", c.alphas);
    c.trace_metrics = j.value("trace_metrics", c.trace_metrics);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(ss.str());
}

std::string run_config_to_json(const RunConfig& cfg) { return run_config_json(cfg).dump(2); }

std::string config_hash(const RunConfig& cfg) {
  const std::string text = run_config_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---- training harness ------------------------------------------------------

TrainResult run_training(const Dataset& data, const RunConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  data.validate();
  if (data.labels.empty()) throw ShapeMismatch("training needs a labeled dataset");
  const std::vector<ScheduleStep> schedule = effective_schedule(cfg, data.labels);

  const Split split = stratified_split(data.labels, cfg.train_fraction, cfg.validation_fraction, derive_seed(seed, 17));
  const Dataset train = select_rows(data, split.train);
  const Dataset test = select_rows(data, split.test.empty() ? split.train : split.test);

  // Rows of the first class set come first so the prior mean reflects the initial data.
  const std::set<int> initial(schedule.front().classes.begin(), schedule.front().classes.end());
  std::vector<std::size_t> order(train.rows());
  std::iota(order.begin(), order.end(), 0);
  std::stable_partition(order.begin(), order.end(), [&](std::size_t i) { return initial.contains(train.labels[i]); });

  EngineConfig ecfg = cfg.engine;
  ecfg.seed = seed;
  TrainResult result;
  result.checkpoint = create_engine(ecfg, select_rows(train, order).features);
  EngineCheckpoint& ckpt = result.checkpoint;

  const std::size_t reference_end = schedule.size() > 1 ? schedule[1].epoch : ecfg.epochs;
  std::size_t step = 0;
  Dataset current;
  Vector tags;
  for (std::size_t e = 0; e < ecfg.epochs; ++e) {
    if (e == 0 || (step + 1 < schedule.size() && schedule[step + 1].epoch == e)) {
      if (e != 0) ++step;
      const std::set<int> classes(schedule[step].classes.begin(), schedule[step].classes.end());
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < train.rows(); ++i)
        if (classes.contains(train.labels[i])) rows.push_back(i);
      if (rows.empty()) throw EmptyDataset("schedule step at epoch " + std::to_string(e) + " selects no rows");
      current = select_rows(train, rows);
      tags.assign(current.rows(), 0.0);
      for (std::size_t i = 0; i < current.rows(); ++i) tags[i] = current.labels[i] == 0 ? 1.0 : 0.0;
    }
    TraceRow row;
    row.epoch = e + 1;
    row.classes = schedule[step].classes.size();
    row.rows = current.rows();
    if (cfg.trace_metrics) {
      const auto verdicts = score(ckpt, current.features);
      row.metrics = evaluate(labels_of(verdicts), flags_of(verdicts), current.labels);
    }
    const EpochReport rep = train_epoch(ckpt, current.features, tags);
    if (e < reference_end) mark_reference_healthy(ckpt);
    row.active = rep.active;
    row.elbo = rep.elbo;
    row.objective = rep.objective;
    row.splits = rep.splits;
    row.merges = rep.merges;
    result.trace.push_back(row);
  }

  const Evaluation ev = evaluate_checkpoint(ckpt, test);
  result.test = ev.metrics;
  result.test_latents = ev.latents;
  result.test_clusters = ev.clusters;
  result.test_labels = test.labels;
  return result;
}

Evaluation evaluate_checkpoint(const EngineCheckpoint& ckpt, const Dataset& data) {
  data.validate();
  if (data.labels.empty()) throw ShapeMismatch("evaluation needs a labeled dataset");
  if (data.features.cols() != ckpt.params.input_dim())
    throw ShapeMismatch("dataset has " + std::to_string(data.features.cols()) + " features, checkpoint expects " +
                        std::to_string(ckpt.params.input_dim()));
  Evaluation ev;
  ev.latents = encode_means(ckpt, data.features);
  for (std::size_t n = 0; n < ev.latents.rows(); ++n)
    ev.verdicts.push_back(score_latent(ckpt.dpmm, ckpt.registry, ev.latents.row(n)));
  ev.clusters = labels_of(ev.verdicts);
  ev.metrics = evaluate(ev.clusters, flags_of(ev.verdicts), data.labels);
  return ev;
}

std::vector<DipRecovery> analyze_dips(const std::vector<TraceRow>& trace, const std::vector<ScheduleStep>& schedule,
                                      std::size_t window, double tolerance) {
  std::vector<DipRecovery> out;
  for (std::size_t s = 1; s < schedule.size(); ++s) {
    const std::size_t e = schedule[s].epoch;  // zero-based index of the first epoch with the new classes
    if (e == 0 || e >= trace.size()) continue;
    DipRecovery d;
    d.epoch = e;
    d.before = trace[e - 1].metrics.acc;
    d.at = trace[e].metrics.acc;
    d.drop = d.before - d.at;
    const std::size_t next = s + 1 < schedule.size() ? schedule[s + 1].epoch : trace.size();
    const std::size_t last = std::min({e + window, next - 1, trace.size() - 1});
    for (std::size_t t = e + 1; t <= last; ++t)
      if (trace[t].metrics.acc >= d.before - tolerance) {
        d.recovered = true;
        d.recovered_after = t - e;
        break;
      }
    out.push_back(d);
  }
  return out;
}

// ---- reports ---------------------------------------------------------------

std::string svg_scatter(const Matrix& coords, const std::vector<int>& groups, const std::string& title) {
  static constexpr const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  const double size = 600.0, pad = 40.0;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (coords.rows() > 0) {
    xmin = xmax = coords(0, 0);
    ymin = ymax = coords(0, 1);
    for (std::size_t r = 0; r < coords.rows(); ++r) {
      xmin = std::min(xmin, coords(r, 0));
      xmax = std::max(xmax, coords(r, 0));
      ymin = std::min(ymin, coords(r, 1));
      ymax = std::max(ymax, coords(r, 1));
    }
  }
  const double sx = (size - 2 * pad) / std::max(xmax - xmin, 1e-12);
  const double sy = (size - 2 * pad) / std::max(ymax - ymin, 1e-12);
  std::ostringstream o;
  o << std::fixed << std::setprecision(2);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size - 2 * pad << "\" height=\"" << size - 2 * pad
    << "\" fill=\"none\" stroke=\"#999\"/>\n";
  std::string safe;
  for (char ch : title) safe += ch == '<' ? std::string("&lt;") : ch == '&' ? std::string("&amp;") : std::string(1, ch);
  o << "<text x=\"" << size / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
    << safe << "</text>\n";
  for (std::size_t r = 0; r < coords.rows(); ++r) {
    const int g = r < groups.size() ? groups[r] : 0;
    const double x = pad + (coords(r, 0) - xmin) * sx;
    const double y = size - pad - (coords(r, 1) - ymin) * sy;
    o << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"3\" fill=\"" << palette[static_cast<std::size_t>(g) % 10]
      << "\" fill-opacity=\"0.8\"><title>cluster " << g << "</title></circle>\n";
  }
  o << "</svg>\n";
  return o.str();
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace, const std::string& header) {
  out << header;
  out << "epoch,classes,rows,acc,ari,nmi,dda,active,elbo,objective,splits,merges\n";
  out << std::setprecision(10);
  for (const TraceRow& r : trace)
    out << r.epoch << ',' << r.classes << ',' << r.rows << ',' << r.metrics.acc << ',' << r.metrics.ari << ','
        << r.metrics.nmi << ',' << r.metrics.dda << ',' << r.active << ',' << r.elbo << ',' << r.objective << ','
        << r.splits << ',' << r.merges << '\n';
}

// ---- commands --------------------------------------------------------------

namespace {

struct Context {
  RunConfig cfg;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  std::filesystem::path checkpoint;
  std::vector<std::string> inputs;
  std::ostream* log = nullptr;

  std::string header() const {
    return "# config_hash=" + config_hash(cfg) + " seed=" + std::to_string(seed) + "\n";
  }
  std::filesystem::path out(const std::string& name) const { return out_dir / name; }
};

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw IoError("cannot write " + p.string());
  f << std::setprecision(10);
  return f;
}

json metrics_json(const MetricSummary& m) {
  return {{"acc", m.acc}, {"ari", m.ari}, {"nmi", m.nmi}, {"dda", m.dda}};
}

void write_metrics_rows(std::ostream& out, const std::vector<std::pair<std::string, MetricSummary>>& rows) {
  out << "run,acc,ari,nmi,dda\n";
  for (const auto& [name, m] : rows) out << name << ',' << m.acc << ',' << m.ari << ',' << m.nmi << ',' << m.dda << '\n';
}

std::pair<MetricSummary, MetricSummary> mean_std(const std::vector<MetricSummary>& runs) {
  MetricSummary mean, sd;
  const double n = static_cast<double>(runs.size());
  for (const auto& r : runs) {
    mean.acc += r.acc / n;
    mean.ari += r.ari / n;
    mean.nmi += r.nmi / n;
    mean.dda += r.dda / n;
  }
  if (runs.size() > 1) {
    for (const auto& r : runs) {
      sd.acc += (r.acc - mean.acc) * (r.acc - mean.acc) / (n - 1);
      sd.ari += (r.ari - mean.ari) * (r.ari - mean.ari) / (n - 1);
      sd.nmi += (r.nmi - mean.nmi) * (r.nmi - mean.nmi) / (n - 1);
      sd.dda += (r.dda - mean.dda) * (r.dda - mean.dda) / (n - 1);
    }
    sd = {std::sqrt(sd.acc), std::sqrt(sd.ari), std::sqrt(sd.nmi), std::sqrt(sd.dda)};
  }
  return {mean, sd};
}

std::string pm(double mean, double sd) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(4) << mean << "±" << sd;
  return o.str();
}

Dataset dataset_from(const Context& ctx, std::size_t input_index = 0) {
  if (ctx.inputs.size() > input_index) return read_dataset(ctx.inputs[input_index]);
  if (ctx.cfg.dataset.empty()) throw ConfigError("no dataset given (config \"dataset\" or a positional path)");
  return read_dataset(ctx.cfg.dataset);
}

void write_verdicts(std::ostream& out, const std::vector<Verdict>& v, const std::string& batch) {
  for (std::size_t i = 0; i < v.size(); ++i)
    out << batch << ',' << i << ',' << v[i].component_id << ',' << v[i].tail << ',' << v[i].max_active << ','
        << (v[i].anomaly ? 1 : 0) << '\n';
}

int cmd_simulate(const Context& ctx) {
  SimulationConfig sim = ctx.cfg.simulation;
  sim.seed = ctx.seed;
  const Dataset d = build_dataset(sim);
  write_dataset(d, ctx.out("dataset"));
  *ctx.log << "wrote " << d.rows() << " x " << d.features.cols() << " dataset to " << ctx.out("dataset.bin").string()
           << '\n';
  return kExitOk;
}

// One training run of a repeat or sweep; `suffix` tags its output files.
struct Job {
  RunConfig cfg;
  std::uint64_t seed = 0;
  std::string suffix;
};

// Independent engine instances on up to hardware_concurrency threads; results keep job order.
std::vector<TrainResult> run_jobs(const Dataset& data, const std::vector<Job>& jobs) {
  std::vector<TrainResult> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  const std::size_t workers = std::min<std::size_t>(jobs.size(), std::max(1u, std::thread::hardware_concurrency()));
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < jobs.size();) {
          try {
            results[i] = run_training(data, jobs[i].cfg, jobs[i].seed);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

void write_run(const Context& ctx, const Job& job, const TrainResult& res) {
  const std::string hash = config_hash(job.cfg);
  const std::filesystem::path ckpt_path =
      job.suffix.empty() && !ctx.checkpoint.empty() ? ctx.checkpoint : ctx.out("checkpoint" + job.suffix + ".ckpt");
  save(res.checkpoint, ckpt_path);
  {
    auto f = open_out(ctx.out("trace" + job.suffix + ".csv"));
    write_trace_csv(f, res.trace, "# config_hash=" + hash + " seed=" + std::to_string(job.seed) + "\n");
  }
  {
    auto f = open_out(ctx.out("latent_pca" + job.suffix + ".svg"));
    f << "<!-- config_hash=" << hash << " seed=" << job.seed << " -->\n";
    f << svg_scatter(pca2d(res.test_latents).coords, res.test_clusters, "latent means (test split), colored by cluster");
  }
  *ctx.log << "seed " << job.seed << (job.suffix.empty() ? "" : " [" + job.suffix + "]") << ": ACC " << res.test.acc
           << " ARI " << res.test.ari << " NMI " << res.test.nmi << " DDA " << res.test.dda << " active "
           << res.checkpoint.dpmm.active() << '\n';
}

std::vector<Job> repeat_jobs(const Context& ctx, const RunConfig& cfg, const std::string& tag) {
  std::vector<Job> jobs;
  for (std::size_t r = 0; r < cfg.repeats; ++r)
    jobs.push_back({cfg, ctx.seed + r, tag + (r == 0 ? "" : "_r" + std::to_string(r))});
  return jobs;
}

int cmd_train(const Context& ctx) {
  const std::vector<Job> jobs = repeat_jobs(ctx, ctx.cfg, "");
  const std::vector<TrainResult> results = run_jobs(dataset_from(ctx), jobs);
  std::vector<MetricSummary> runs;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    write_run(ctx, jobs[i], results[i]);
    runs.push_back(results[i].test);
  }
  std::vector<std::pair<std::string, MetricSummary>> rows;
  for (std::size_t r = 0; r < runs.size(); ++r) rows.emplace_back("seed" + std::to_string(ctx.seed + r), runs[r]);
  const auto [mean, sd] = mean_std(runs);
  auto csv = open_out(ctx.out("metrics.csv"));
  csv << ctx.header();
  write_metrics_rows(csv, rows);
  csv << "mean±std," << pm(mean.acc, sd.acc) << ',' << pm(mean.ari, sd.ari) << ',' << pm(mean.nmi, sd.nmi) << ','
      << pm(mean.dda, sd.dda) << '\n';
  json j = {{"config_hash", config_hash(ctx.cfg)}, {"seed", ctx.seed}, {"mean", metrics_json(mean)},
            {"std", metrics_json(sd)}, {"runs", json::array()}};
  for (const auto& r : runs) j["runs"].push_back(metrics_json(r));
  open_out(ctx.out("metrics.json")) << j.dump(2) << '\n';
  return kExitOk;
}

int cmd_stream(const Context& ctx) {
  if (ctx.checkpoint.empty()) throw ConfigError("stream needs --checkpoint");
  EngineCheckpoint ckpt = load(ctx.checkpoint);
  auto log = open_out(ctx.out("verdicts.csv"));
  log << ctx.header() << "batch,sample,component,tail,max_active,anomaly\n";
  std::size_t flagged = 0, total = 0;
  for (const std::string& path : ctx.inputs) {
    const Dataset batch = read_dataset(path);
    const IngestResult r = ingest(ckpt, batch.features);
    write_verdicts(log, r.verdicts, std::filesystem::path(path).stem().string());
    for (const Verdict& v : r.verdicts) flagged += v.anomaly;
    total += r.verdicts.size();
  }
  save(ckpt, ctx.out("checkpoint.ckpt"));
  *ctx.log << "streamed " << total << " samples, " << flagged << " flagged anomalous\n";
  return kExitOk;
}

int cmd_eval(const Context& ctx) {
  if (ctx.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const EngineCheckpoint ckpt = load(ctx.checkpoint);
  const Dataset data = dataset_from(ctx);
  const Evaluation ev = evaluate_checkpoint(ckpt, data);
  json j = metrics_json(ev.metrics);
  j["config_hash"] = config_hash(ctx.cfg);
  j["seed"] = ctx.seed;
  j["rows"] = data.rows();
  j["clusters"] = std::set<int>(ev.clusters.begin(), ev.clusters.end()).size();
  j["flag_source"] = "engine anomaly rule on encoder means";
  open_out(ctx.out("eval.json")) << j.dump(2) << '\n';
  auto csv = open_out(ctx.out("eval.csv"));
  csv << ctx.header();
  write_metrics_rows(csv, {{"eval", ev.metrics}});
  auto verdicts = open_out(ctx.out("eval_verdicts.csv"));
  verdicts << ctx.header() << "batch,sample,component,tail,max_active,anomaly\n";
  write_verdicts(verdicts, ev.verdicts, "eval");
  *ctx.log << "ACC " << ev.metrics.acc << " ARI " << ev.metrics.ari << " NMI " << ev.metrics.nmi << " DDA "
           << ev.metrics.dda << '\n';
  return kExitOk;
}

int cmd_sensitivity(const Context& ctx) {
  std::vector<Job> jobs;
  for (double alpha : ctx.cfg.alphas) {
    RunConfig cfg = ctx.cfg;
    cfg.engine.alpha = alpha;
    std::ostringstream tag;
    tag << "_alpha" << alpha;
    for (Job& j : repeat_jobs(ctx, cfg, tag.str())) jobs.push_back(std::move(j));
  }
  const std::vector<TrainResult> results = run_jobs(dataset_from(ctx), jobs);
  auto csv = open_out(ctx.out("sensitivity.csv"));
  csv << ctx.header() << "alpha,acc,ari,nmi,dda,acc_std\n";
  for (std::size_t a = 0; a < ctx.cfg.alphas.size(); ++a) {
    std::vector<MetricSummary> runs;
    for (std::size_t r = 0; r < ctx.cfg.repeats; ++r) {
      const std::size_t i = a * ctx.cfg.repeats + r;
      write_run(ctx, jobs[i], results[i]);
      runs.push_back(results[i].test);
    }
    const auto [mean, sd] = mean_std(runs);
    csv << ctx.cfg.alphas[a] << ',' << mean.acc << ',' << mean.ari << ',' << mean.nmi << ',' << mean.dda << ','
        << sd.acc << '\n';
  }
  return kExitOk;
}

int cmd_export(const Context& ctx) {
  const Dataset data = dataset_from(ctx);
  write_dataset_csv(data, ctx.out("dataset.csv"), ctx.header());
  if (!ctx.checkpoint.empty()) {
    const EngineCheckpoint ckpt = load(ctx.checkpoint);
    const Evaluation ev = evaluate_checkpoint(ckpt, data);
    const Projection p = pca2d(ev.latents);
    auto f = open_out(ctx.out("latents.csv"));
    f << ctx.header() << "sample,label,cluster,anomaly,pc1,pc2";
    for (std::size_t j = 0; j < ev.latents.cols(); ++j) f << ",z" << j;
    f << '\n';
    for (std::size_t i = 0; i < ev.latents.rows(); ++i) {
      f << i << ',' << data.labels[i] << ',' << ev.clusters[i] << ',' << (ev.verdicts[i].anomaly ? 1 : 0) << ','
        << p.coords(i, 0) << ',' << p.coords(i, 1);
      for (double v : ev.latents.row(i)) f << ',' << v;
      f << '\n';
    }
    auto svg = open_out(ctx.out("latent_pca.svg"));
    svg << "<!-- config_hash=" << config_hash(ctx.cfg) << " seed=" << ctx.seed << " -->\n";
    svg << svg_scatter(p.coords, ev.clusters, "latent means colored by cluster");
  }
  return kExitOk;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return kExitConfig;
    case ErrorKind::Data: return kExitData;
    case ErrorKind::Numerical: return kExitNumerical;
  }
  return kExitData;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dirichlet-process variational incremental learning for structural anomaly detection", "dpvil"};
  app.require_subcommand(1);
  std::string config_path, out_dir = "out", checkpoint;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> inputs;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "master seed (overrides the config)");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--checkpoint", checkpoint, "checkpoint path");
  const std::map<std::string, std::string> commands = {
      {"simulate", "generate the shear-building dataset"},
      {"train", "train on a dataset, write checkpoint, trace, metrics and plot"},
      {"stream", "ingest dataset batches into a checkpoint and log verdicts"},
      {"eval", "score a labeled dataset with a checkpoint"},
      {"sensitivity", "train once per concentration parameter"},
      {"export", "write a dataset (and checkpoint latents) as CSV"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("inputs", inputs, "dataset paths");
    sub->fallthrough();
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    Context ctx;
    ctx.cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    ctx.seed = seed ? *seed : ctx.cfg.engine.seed;
    ctx.cfg.engine.seed = ctx.seed;
    ctx.cfg.simulation.seed = ctx.seed;
    ctx.out_dir = out_dir;
    ctx.checkpoint = checkpoint;
    ctx.inputs = inputs;
    ctx.log = &out;
    std::error_code ec;
    std::filesystem::create_directories(ctx.out_dir, ec);
    if (ec) throw IoError("cannot create " + ctx.out_dir.string() + ": " + ec.message());
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "simulate") return cmd_simulate(ctx);
    if (name == "train") return cmd_train(ctx);
    if (name == "stream") return cmd_stream(ctx);
    if (name == "eval") return cmd_eval(ctx);
    if (name == "sensitivity") return cmd_sensitivity(ctx);
    return cmd_export(ctx);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace dpvil
