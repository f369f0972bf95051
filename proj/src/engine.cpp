#include "dpvil/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dpvil/json_io.hpp"

namespace dpvil {

namespace {

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<StatsMode> kStatsModes[] = {{StatsMode::Batch, "batch"}, {StatsMode::Streaming, "streaming"}};
constexpr EnumName<LatentSource> kLatentSources[] = {{LatentSource::Sampled, "sampled"},
                                                     {LatentSource::Mean, "mean"}};
constexpr EnumName<Normalization> kNormalizations[] = {{Normalization::ZScore, "zscore"},
                                                       {Normalization::None, "none"}};

template <typename E, std::size_t N>
const char* enum_name(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <typename E, std::size_t N>
E enum_value(const EnumName<E> (&table)[N], const std::string& s, const char* key) {
  for (const auto& e : table)
    if (s == e.name) return e.value;
  throw ConfigError(std::string("unknown value '") + s + "' for " + key);
}

Matrix gather_rows(const Matrix& x, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = x.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void add_into(MlpParams& acc, const MlpParams& g) {
  auto a = tensors(acc);
  const auto b = tensors(g);
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t i = 0; i < a[t].data.size(); ++i) a[t].data[i] += b[t].data[i];
}

}  // namespace

void to_json(nlohmann::json& j, const EngineConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"learning_rate", c.learning_rate},
                     {"gamma", c.gamma},
                     {"alpha", c.alpha},
                     {"tau", c.tau},
                     {"latent_dim", c.latent_dim},
                     {"hidden", c.hidden},
                     {"mc_samples", c.mc_samples},
                     {"seed", c.seed},
                     {"normalization", enum_name(kNormalizations, c.normalization)},
                     {"stats_mode", enum_name(kStatsModes, c.stats_mode)},
                     {"latent_source", enum_name(kLatentSources, c.latent_source)},
                     {"incremental_epochs", c.incremental_epochs},
                     {"cavi_max_sweeps", c.cavi_max_sweeps},
                     {"cavi_rel_tol", c.cavi_rel_tol}};
}

void from_json(const nlohmann::json& j, EngineConfig& c) {
  if (!j.is_object()) throw ConfigError("engine config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "gamma") c.gamma = value.get<double>();
      else if (key == "alpha") c.alpha = value.get<double>();
      else if (key == "tau") c.tau = value.get<double>();
      else if (key == "latent_dim") c.latent_dim = value.get<std::size_t>();
      else if (key == "hidden") c.hidden = value.get<std::vector<std::size_t>>();
      else if (key == "mc_samples") c.mc_samples = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "normalization") c.normalization = enum_value(kNormalizations, value.get<std::string>(), "normalization");
      else if (key == "stats_mode") c.stats_mode = enum_value(kStatsModes, value.get<std::string>(), "stats_mode");
      else if (key == "latent_source") c.latent_source = enum_value(kLatentSources, value.get<std::string>(), "latent_source");
      else if (key == "incremental_epochs") c.incremental_epochs = value.get<std::size_t>();
      else if (key == "cavi_max_sweeps") c.cavi_max_sweeps = value.get<int>();
      else if (key == "cavi_rel_tol") c.cavi_rel_tol = value.get<double>();
      else throw ConfigError("unknown engine config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("engine config: ") + e.what());
  }
}

nlohmann::json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

void EngineConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be non-negative");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (!(tau >= 0.0)) throw ConfigError("tau must be non-negative");
  if (latent_dim == 0) throw ConfigError("latent_dim must be positive");
  if (mc_samples == 0) throw ConfigError("mc_samples must be positive");
  if (cavi_max_sweeps <= 0) throw ConfigError("cavi_max_sweeps must be positive");
  if (!(cavi_rel_tol > 0.0)) throw ConfigError("cavi_rel_tol must be positive");
  for (std::size_t h : hidden)
    if (h == 0) throw ConfigError("hidden sizes must be positive");
}

void HealthyRegistry::apply(const std::vector<LineageEvent>& events) {
  for (const LineageEvent& e : events) {
    switch (e.kind) {
      case LineageEvent::Kind::Merge: {
        bool healthy = false;
        for (std::uint64_t p : e.parents) healthy = healthy || ids_.erase(p) > 0;
        if (healthy)
          for (std::uint64_t c : e.children) ids_.insert(c);
        break;
      }
      case LineageEvent::Kind::Split: {
        const bool healthy = ids_.erase(e.parents.front()) > 0;
        if (!healthy) break;
        double total_share = 0.0;
        for (double s : e.child_tag_share) total_share += s;
        for (std::size_t i = 0; i < e.children.size(); ++i) {
          const bool untagged = total_share == 0.0 || i >= e.child_tag_share.size();
          if (untagged || e.child_tag_share[i] >= 0.5) ids_.insert(e.children[i]);
        }
        break;
      }
      case LineageEvent::Kind::Prune:
        for (std::uint64_t p : e.parents) ids_.erase(p);
        break;
    }
  }
}

void HealthyRegistry::restrict_to(std::span<const std::uint64_t> active) {
  std::set<std::uint64_t> kept;
  for (std::uint64_t id : active)
    if (ids_.contains(id)) kept.insert(id);
  ids_ = std::move(kept);
}

Matrix normalize(const EngineCheckpoint& ckpt, const Matrix& x) {
  if (x.cols() != ckpt.feature_mean.size()) throw ShapeMismatch("feature dimension does not match checkpoint");
  Matrix out = x;
  for (std::size_t n = 0; n < x.rows(); ++n) {
    auto r = out.row(n);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = (r[j] - ckpt.feature_mean[j]) / ckpt.feature_std[j];
  }
  if (!out.all_finite()) throw ShapeMismatch("features contain non-finite values");
  return out;
}

EngineCheckpoint create_engine(const EngineConfig& config, const Matrix& x) {
  config.validate();
  if (x.rows() == 0) throw EmptyDataset("no rows to initialize the engine");
  EngineCheckpoint c;
  c.config = config;
  const std::size_t d = x.cols();
  c.feature_mean.assign(d, 0.0);
  c.feature_std.assign(d, 1.0);
  if (config.normalization == Normalization::ZScore) {
    const double n = static_cast<double>(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t j = 0; j < d; ++j) c.feature_mean[j] += x(r, j) / n;
    Vector var(d, 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t j = 0; j < d; ++j) var[j] += (x(r, j) - c.feature_mean[j]) * (x(r, j) - c.feature_mean[j]) / n;
    for (std::size_t j = 0; j < d; ++j) c.feature_std[j] = var[j] > 1e-24 ? std::sqrt(var[j]) : 1.0;
  }
  VaeArchitecture arch{d, config.hidden, config.latent_dim};
  c.params = init_params(arch, derive_seed(config.seed, 1));
  c.adam = AdamState::for_params(c.params, config.learning_rate);
  c.rng = Rng(derive_seed(config.seed, 2));

  const std::size_t first = std::min(config.batch_size, x.rows());
  std::vector<std::size_t> rows(first);
  std::iota(rows.begin(), rows.end(), 0);
  const Matrix head = normalize(c, gather_rows(x, rows));
  Vector mean(config.latent_dim, 0.0);
  for (std::size_t r = 0; r < head.rows(); ++r) {
    const LatentGaussian lat = encode(c.params, head.row(r));
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += lat.mean[j] / static_cast<double>(head.rows());
  }
  c.dpmm = DpmmState::initial(DpPrior::weakly_informative(config.alpha, mean), config.tau);
  return c;
}

EpochReport train_epoch(EngineCheckpoint& ckpt, const Matrix& x, std::span<const double> tags) {
  if (x.rows() == 0) throw EmptyDataset("training epoch needs data");
  if (!tags.empty() && tags.size() != x.rows()) throw ShapeMismatch("tag count != rows");
  const EngineConfig& cfg = ckpt.config;
  const Matrix xn = normalize(ckpt, x);
  const std::size_t n_rows = xn.rows();
  const std::size_t dz = ckpt.params.latent_dim();

  std::vector<std::size_t> order(n_rows);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n_rows; i-- > 1;) std::swap(order[i], order[ckpt.rng.below(i + 1)]);

  EpochReport rep;
  Matrix z(n_rows, dz);
  for (std::size_t start = 0; start < n_rows; start += cfg.batch_size) {
    const std::size_t stop = std::min(start + cfg.batch_size, n_rows);
    const std::span<const std::size_t> rows(order.data() + start, stop - start);
    const Matrix xb = gather_rows(xn, rows);
    const double scale = static_cast<double>(n_rows) / static_cast<double>(rows.size()) /
                         static_cast<double>(cfg.mc_samples);
    MlpParams grad = zeros_like(ckpt.params);
    for (std::size_t l = 0; l < cfg.mc_samples; ++l) {
      Matrix eps(rows.size(), dz);
      ckpt.rng.fill_normal(eps.values());
      const BatchGradient bg = backprop(ckpt.params, xb, eps, ckpt.dpmm, cfg.gamma, scale);
      add_into(grad, bg.grad);
      rep.objective += bg.terms.total;
      rep.recon += bg.terms.recon;
      rep.reg += bg.terms.reg;
      if (l == 0) {
        const Matrix& lat = cfg.latent_source == LatentSource::Sampled ? bg.latents : bg.latent_means;
        for (std::size_t i = 0; i < rows.size(); ++i)
          std::copy(lat.row(i).begin(), lat.row(i).end(), z.row(rows[i]).begin());
      }
    }
    adam_step(ckpt.params, grad, ckpt.adam);
  }

  CaviOptions opts;
  opts.max_sweeps = cfg.cavi_max_sweeps;
  opts.rel_tol = cfg.cavi_rel_tol;
  opts.seed = ckpt.rng.next_u64();
  SplitMergeResult sm = run_split_merge(ckpt.dpmm, z, opts, tags);
  ckpt.registry.apply(sm.events);
  ckpt.registry.restrict_to(sm.state.ids);
  ckpt.dpmm = std::move(sm.state);
  ++ckpt.epoch;

  rep.epoch = ckpt.epoch;
  rep.elbo = ckpt.dpmm.elbo;
  rep.active = ckpt.dpmm.active();
  rep.splits = sm.splits;
  rep.merges = sm.merges;
  return rep;
}

Matrix encode_means(const EngineCheckpoint& ckpt, const Matrix& x) {
  const Matrix xn = normalize(ckpt, x);
  Matrix z(x.rows(), ckpt.params.latent_dim());
  for (std::size_t n = 0; n < x.rows(); ++n) {
    const LatentGaussian lat = encode(ckpt.params, xn.row(n));
    std::copy(lat.mean.begin(), lat.mean.end(), z.row(n).begin());
  }
  return z;
}

Verdict score_latent(const DpmmState& dpmm, const HealthyRegistry& registry, std::span<const double> z) {
  Verdict v;
  const Vector r = responsibilities_row(dpmm, z, v.tail);
  v.component = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  v.component_id = dpmm.ids[v.component];
  v.max_active = r[v.component];
  v.anomaly = !registry.contains(v.component_id) || v.tail > v.max_active;
  return v;
}

std::vector<Verdict> score(const EngineCheckpoint& ckpt, const Matrix& x) {
  const Matrix z = encode_means(ckpt, x);
  std::vector<Verdict> out;
  out.reserve(z.rows());
  for (std::size_t n = 0; n < z.rows(); ++n) out.push_back(score_latent(ckpt.dpmm, ckpt.registry, z.row(n)));
  return out;
}

void mark_all_healthy(EngineCheckpoint& ckpt) {
  for (std::uint64_t id : ckpt.dpmm.ids) ckpt.registry.insert(id);
}

void mark_reference_healthy(EngineCheckpoint& ckpt, double min_share) {
  HealthyRegistry r;
  const auto& comps = ckpt.dpmm.stats.components;
  for (std::size_t k = 0; k < comps.size(); ++k)
    if (comps[k].n > 0.0 && comps[k].tag >= min_share * comps[k].n) r.insert(ckpt.dpmm.ids[k]);
  ckpt.registry = std::move(r);
}

void commit_to_memory(EngineCheckpoint& ckpt) {
  ckpt.dpmm.memory = ckpt.dpmm.stats.components;
  ckpt.dpmm.stats.tail = 0.0;
}

EngineCheckpoint fit_initial(const EngineConfig& config, const Matrix& healthy, std::vector<EpochReport>* trace) {
  if (healthy.rows() == 0) throw EmptyDataset("no healthy data to fit");
  EngineCheckpoint ckpt = create_engine(config, healthy);
  const Vector tags(healthy.rows(), 1.0);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const EpochReport r = train_epoch(ckpt, healthy, tags);
    if (trace) trace->push_back(r);
  }
  mark_all_healthy(ckpt);
  commit_to_memory(ckpt);
  return ckpt;
}

IngestResult ingest(EngineCheckpoint& ckpt, const Matrix& batch) {
  IngestResult out;
  if (batch.rows() == 0) return out;
  double retained = 0.0;
  for (const ComponentStats& m : ckpt.dpmm.memory) retained += m.n;
  if (retained == 0.0) commit_to_memory(ckpt);
  for (std::size_t e = 0; e < ckpt.config.incremental_epochs; ++e) out.trace.push_back(train_epoch(ckpt, batch));
  out.verdicts = score(ckpt, batch);
  commit_to_memory(ckpt);
  return out;
}

}  // namespace dpvil
