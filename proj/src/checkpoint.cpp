#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dpvil/engine.hpp"
#include "dpvil/json_io.hpp"

namespace dpvil {

namespace {

constexpr char kMagic[8] = {'D', 'P', 'V', 'I', 'L', 'C', 'K', '\0'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T take(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw IoError("checkpoint ends early");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    crc = crc32(crc, bytes.data() + pos, static_cast<uInt>(chunk));
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

// Ordered list of named f64 arrays; order is fixed by the writer and recorded in the descriptor.
class ArrayWriter {
 public:
  void add(const std::string& name, std::span<const double> v) {
    manifest_.push_back({{"name", name}, {"length", v.size()}});
    payload_.insert(payload_.end(), v.begin(), v.end());
  }
  void add(const std::string& name, double v) { add(name, std::span<const double>(&v, 1)); }
  const nlohmann::json& manifest() const { return manifest_; }
  const std::vector<double>& payload() const { return payload_; }

 private:
  nlohmann::json manifest_ = nlohmann::json::array();
  std::vector<double> payload_;
};

class ArrayReader {
 public:
  ArrayReader(const nlohmann::json& manifest, std::span<const double> payload) : payload_(payload) {
    for (const auto& e : manifest) entries_.push_back({e.at("name").get<std::string>(), e.at("length").get<std::size_t>()});
  }
  std::span<const double> next(const std::string& name, std::size_t length) {
    if (idx_ >= entries_.size()) throw IoError("checkpoint is missing array '" + name + "'");
    const auto& [n, len] = entries_[idx_++];
    if (n != name) throw IoError("expected array '" + name + "', found '" + n + "'");
    if (len != length) throw IoError("array '" + name + "' has the wrong length");
    if (pos_ + len > payload_.size()) throw IoError("array payload too short");
    const auto out = payload_.subspan(pos_, len);
    pos_ += len;
    return out;
  }
  double scalar(const std::string& name) { return next(name, 1)[0]; }
  void read_into(const std::string& name, std::span<double> dst) {
    const auto src = next(name, dst.size());
    std::copy(src.begin(), src.end(), dst.begin());
  }
  void finish() const {
    if (idx_ != entries_.size() || pos_ != payload_.size()) throw IoError("checkpoint has trailing arrays");
  }

 private:
  std::vector<std::pair<std::string, std::size_t>> entries_;
  std::span<const double> payload_;
  std::size_t idx_ = 0;
  std::size_t pos_ = 0;
};

void write_stats(ArrayWriter& w, const std::string& prefix, const ComponentStats& s) {
  w.add(prefix + ".n", s.n);
  w.add(prefix + ".s1", s.s1);
  w.add(prefix + ".s2", s.s2.values());
  w.add(prefix + ".tag", s.tag);
}

ComponentStats read_stats(ArrayReader& r, const std::string& prefix, std::size_t dim) {
  ComponentStats s(dim);
  s.n = r.scalar(prefix + ".n");
  r.read_into(prefix + ".s1", s.s1);
  r.read_into(prefix + ".s2", s.s2.values());
  s.tag = r.scalar(prefix + ".tag");
  return s;
}

void write_params(ArrayWriter& w, const std::string& prefix, const MlpParams& p) {
  for (const auto& t : tensors(p)) w.add(prefix + t.name, t.data);
}

void read_params(ArrayReader& r, const std::string& prefix, MlpParams& p) {
  for (auto& t : tensors(p)) r.read_into(prefix + t.name, t.data);
}

}  // namespace

std::vector<std::uint8_t> serialize(const EngineCheckpoint& c) {
  const DpmmState& d = c.dpmm;
  const std::size_t dim = d.dim();
  ArrayWriter w;
  w.add("feature_mean", c.feature_mean);
  w.add("feature_std", c.feature_std);
  write_params(w, "params.", c.params);
  write_params(w, "adam.m.", c.adam.m);
  write_params(w, "adam.v.", c.adam.v);
  w.add("adam.learning_rate", c.adam.learning_rate);
  w.add("adam.beta1", c.adam.beta1);
  w.add("adam.beta2", c.adam.beta2);
  w.add("adam.epsilon", c.adam.epsilon);
  w.add("prior.alpha", d.prior.alpha);
  w.add("prior.mean", d.prior.mean);
  w.add("prior.lambda", d.prior.lambda);
  w.add("prior.scale", d.prior.scale.values());
  w.add("prior.dof", d.prior.dof);
  w.add("dpmm.elbo", d.elbo);
  w.add("dpmm.tau", d.tau);
  w.add("stats.tail", d.stats.tail);
  for (std::size_t k = 0; k < d.active(); ++k) {
    const std::string p = "component" + std::to_string(k);
    w.add(p + ".nw.mean", d.nw[k].mean);
    w.add(p + ".nw.lambda", d.nw[k].lambda);
    w.add(p + ".nw.scale", d.nw[k].scale.values());
    w.add(p + ".nw.dof", d.nw[k].dof);
    w.add(p + ".stick.a", d.sticks[k].a);
    w.add(p + ".stick.b", d.sticks[k].b);
    write_stats(w, p + ".stats", d.stats.components[k]);
  }
  for (std::size_t k = 0; k < d.memory.size(); ++k) write_stats(w, "memory" + std::to_string(k), d.memory[k]);

  std::vector<std::size_t> hidden;
  for (const Dense& h : c.params.encoder.hidden) hidden.push_back(h.out());
  nlohmann::json desc;
  desc["format"] = "dpvil-checkpoint";
  desc["config"] = c.config;
  desc["epoch"] = c.epoch;
  desc["rng"] = c.rng.serialize();
  desc["registry"] = c.registry.ids();
  desc["ids"] = d.ids;
  desc["next_id"] = d.next_id;
  desc["adam_step"] = c.adam.step;
  desc["arch"] = {{"input_dim", c.params.input_dim()}, {"hidden", hidden}, {"latent_dim", c.params.latent_dim()}};
  desc["dim"] = dim;
  desc["components"] = d.active();
  desc["memory"] = d.memory.size();
  desc["arrays"] = w.manifest();
  const std::string text = desc.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (double v : w.payload()) put<double>(out, v);
  put<std::uint32_t>(out, crc_of(out));
  return out;
}

EngineCheckpoint deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic)) throw ChecksumMismatch("checkpoint is truncated");
  if (!std::equal(kMagic, kMagic + sizeof(kMagic), bytes.begin())) throw IoError("not a dpvil checkpoint");
  if (bytes.size() < sizeof(kMagic) + 16) throw ChecksumMismatch("checkpoint is truncated");
  const auto body = bytes.first(bytes.size() - 4);
  std::size_t tail = body.size();
  if (take<std::uint32_t>(bytes, tail) != crc_of(body)) throw ChecksumMismatch("CRC-32 does not match contents");

  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(body, pos);
  if (version != kVersion)
    throw VersionMismatch("checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kVersion));
  const auto text_len = take<std::uint64_t>(body, pos);
  if (text_len > body.size() - pos) throw IoError("descriptor length exceeds file");
  const std::string text(reinterpret_cast<const char*>(body.data() + pos), text_len);
  pos += text_len;
  if ((body.size() - pos) % sizeof(double) != 0) throw IoError("array payload is not a whole number of doubles");
  std::vector<double> payload((body.size() - pos) / sizeof(double));
  std::memcpy(payload.data(), body.data() + pos, payload.size() * sizeof(double));

  EngineCheckpoint c;
  try {
    const nlohmann::json desc = nlohmann::json::parse(text);
    if (desc.at("format") != "dpvil-checkpoint") throw IoError("unknown checkpoint format");
    c.config = desc.at("config").get<EngineConfig>();
    c.epoch = desc.at("epoch").get<std::uint64_t>();
    c.rng = Rng::deserialize(desc.at("rng").get<std::string>());
    for (std::uint64_t id : desc.at("registry").get<std::vector<std::uint64_t>>()) c.registry.insert(id);

    const auto& arch_j = desc.at("arch");
    VaeArchitecture arch{arch_j.at("input_dim").get<std::size_t>(), arch_j.at("hidden").get<std::vector<std::size_t>>(),
                         arch_j.at("latent_dim").get<std::size_t>()};
    c.params = init_params(arch, 0);
    c.adam.m = zeros_like(c.params);
    c.adam.v = zeros_like(c.params);
    c.adam.step = desc.at("adam_step").get<std::uint64_t>();

    const auto dim = desc.at("dim").get<std::size_t>();
    const auto k_active = desc.at("components").get<std::size_t>();
    const auto k_memory = desc.at("memory").get<std::size_t>();
    const auto input_dim = arch.input_dim;

    ArrayReader r(desc.at("arrays"), payload);
    c.feature_mean.resize(input_dim);
    c.feature_std.resize(input_dim);
    r.read_into("feature_mean", c.feature_mean);
    r.read_into("feature_std", c.feature_std);
    read_params(r, "params.", c.params);
    read_params(r, "adam.m.", c.adam.m);
    read_params(r, "adam.v.", c.adam.v);
    c.adam.learning_rate = r.scalar("adam.learning_rate");
    c.adam.beta1 = r.scalar("adam.beta1");
    c.adam.beta2 = r.scalar("adam.beta2");
    c.adam.epsilon = r.scalar("adam.epsilon");

    DpmmState& d = c.dpmm;
    d.prior.alpha = r.scalar("prior.alpha");
    d.prior.mean.resize(dim);
    r.read_into("prior.mean", d.prior.mean);
    d.prior.lambda = r.scalar("prior.lambda");
    d.prior.scale = Matrix(dim, dim);
    r.read_into("prior.scale", d.prior.scale.values());
    d.prior.dof = r.scalar("prior.dof");
    d.prior.validate();
    d.elbo = r.scalar("dpmm.elbo");
    d.tau = r.scalar("dpmm.tau");
    d.stats.tail = r.scalar("stats.tail");
    for (std::size_t k = 0; k < k_active; ++k) {
      const std::string p = "component" + std::to_string(k);
      NwPosterior nw;
      nw.mean.resize(dim);
      r.read_into(p + ".nw.mean", nw.mean);
      nw.lambda = r.scalar(p + ".nw.lambda");
      nw.scale = Matrix(dim, dim);
      r.read_into(p + ".nw.scale", nw.scale.values());
      nw.dof = r.scalar(p + ".nw.dof");
      nw.refresh();
      d.nw.push_back(std::move(nw));
      StickPosterior st;
      st.a = r.scalar(p + ".stick.a");
      st.b = r.scalar(p + ".stick.b");
      d.sticks.push_back(st);
      d.stats.components.push_back(read_stats(r, p + ".stats", dim));
    }
    for (std::size_t k = 0; k < k_memory; ++k) d.memory.push_back(read_stats(r, "memory" + std::to_string(k), dim));
    r.finish();
    d.ids = desc.at("ids").get<std::vector<std::uint64_t>>();
    d.next_id = desc.at("next_id").get<std::uint64_t>();
    d.check_consistent();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint descriptor: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint config: ") + e.what());
  }
  return c;
}

void save(const EngineCheckpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

EngineCheckpoint load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace dpvil
