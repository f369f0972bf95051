#include "dpvil/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "dpvil/rng.hpp"

namespace dpvil {

namespace {

static_assert(std::endian::native == std::endian::little, "dataset IO assumes a little-endian host");

std::filesystem::path with_ext(std::filesystem::path base, const char* ext) {
  const auto e = base.extension();
  if (e == ".json" || e == ".bin") base.replace_extension();
  base += ext;
  return base;
}

}  // namespace

void Dataset::validate() const {
  if (features.rows() == 0 || features.cols() == 0) throw EmptyDataset("dataset has no features");
  if (!labels.empty() && labels.size() != features.rows()) throw ShapeMismatch("label count differs from row count");
  for (int l : labels)
    if (l < 0) throw ShapeMismatch("labels must be non-negative");
  if (!features.all_finite()) throw ShapeMismatch("dataset contains non-finite features");
  if (pairs != 0 && !frequency.empty() && pairs * frequency.size() != features.cols())
    throw ShapeMismatch("feature width disagrees with pairs × frequency bins");
}

void write_dataset(const Dataset& d, const std::filesystem::path& base) {
  d.validate();
  const auto bin = with_ext(base, ".bin");
  const auto json_path = with_ext(base, ".json");
  {
    std::ofstream out(bin, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + bin.string());
    out.write(reinterpret_cast<const char*>(d.features.values().data()),
              static_cast<std::streamsize>(d.features.size() * sizeof(double)));
    if (!out) throw IoError("failed writing " + bin.string());
  }
  nlohmann::json j;
  j["rows"] = d.features.rows();
  j["cols"] = d.features.cols();
  j["dtype"] = "f64le";
  j["order"] = "row-major";
  j["data"] = bin.filename().string();
  j["labels"] = d.labels;
  j["frequency_hz"] = d.frequency;
  j["pairs"] = d.pairs;
  j["layout"] = d.layout;
  j["provenance"] = nlohmann::json::parse(d.provenance_json);
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + json_path.string());
  out << std::setw(1) << j << '\n';
  if (!out) throw IoError("failed writing " + json_path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  const auto json_path = with_ext(path, ".json");
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open dataset descriptor " + json_path.string());
  Dataset d;
  std::filesystem::path bin;
  std::size_t rows = 0, cols = 0;
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    rows = j.at("rows").get<std::size_t>();
    cols = j.at("cols").get<std::size_t>();
    if (j.value("dtype", "f64le") != "f64le" || j.value("order", "row-major") != "row-major")
      throw IoError("only row-major little-endian f64 data is supported");
    bin = json_path.parent_path() / j.value("data", with_ext(path, ".bin").filename().string());
    d.labels = j.value("labels", std::vector<int>{});
    d.frequency = j.value("frequency_hz", Vector{});
    d.pairs = j.value("pairs", std::size_t{0});
    d.layout = j.value("layout", std::string("concatenated"));
    d.provenance_json = j.contains("provenance") ? j["provenance"].dump() : "{}";
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed dataset descriptor: " + std::string(e.what()));
  }
  std::ifstream data(bin, std::ios::binary);
  if (!data) throw IoError("cannot open dataset matrix " + bin.string());
  std::vector<double> values(rows * cols);
  data.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (data.gcount() != static_cast<std::streamsize>(values.size() * sizeof(double)))
    throw IoError("dataset matrix is shorter than its descriptor");
  if (data.peek() != std::char_traits<char>::eof()) throw IoError("dataset matrix is longer than its descriptor");
  d.features = Matrix(rows, cols, std::move(values));
  d.validate();
  return d;
}

void write_dataset_csv(const Dataset& d, const std::filesystem::path& path, const std::string& header) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << header << "label";
  for (std::size_t c = 0; c < d.features.cols(); ++c) out << ",f" << c;
  out << '\n' << std::setprecision(17);
  for (std::size_t r = 0; r < d.features.rows(); ++r) {
    out << (d.labels.empty() ? -1 : d.labels[r]);
    for (double v : d.features.row(r)) out << ',' << v;
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Dataset select_rows(const Dataset& d, const std::vector<std::size_t>& rows) {
  Dataset out = d;
  out.features = Matrix(rows.size(), d.features.cols());
  out.labels.clear();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= d.rows()) throw ShapeMismatch("row index out of range");
    std::copy(d.features.row(rows[i]).begin(), d.features.row(rows[i]).end(), out.features.row(i).begin());
    if (!d.labels.empty()) out.labels.push_back(d.labels[rows[i]]);
  }
  return out;
}

Split stratified_split(const std::vector<int>& labels, double train_fraction, double validation_fraction,
                       std::uint64_t seed) {
  if (!(train_fraction > 0.0) || !(validation_fraction >= 0.0) || train_fraction + validation_fraction > 1.0)
    throw ConfigError("split fractions must be positive and sum to at most 1");
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
  Rng rng(seed);
  Split s;
  for (auto& [label, idx] : by_label) {
    for (std::size_t i = idx.size(); i-- > 1;) std::swap(idx[i], idx[rng.below(i + 1)]);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * n));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::lround(validation_fraction * n)));
    s.train.insert(s.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.validation.insert(s.validation.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                        idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.insert(s.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

}  // namespace dpvil
