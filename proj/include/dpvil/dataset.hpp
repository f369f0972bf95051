#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpvil/numerics.hpp"

namespace dpvil {

// Labeled feature matrix. On disk: `<base>.bin` holds row-major little-endian
// f64 values, `<base>.json` describes shape, labels, frequency grid and origin.
struct Dataset {
  Matrix features;
  std::vector<int> labels;
  Vector frequency;             // per-pair grid, may be empty for external data
  std::size_t pairs = 0;        // TF pairs concatenated per row (0 if unknown)
  std::string layout = "concatenated";
  std::string provenance_json = "{}";

  std::size_t rows() const noexcept { return features.rows(); }
  void validate() const;
};

void write_dataset(const Dataset& d, const std::filesystem::path& base);
// `path` may name the .json sidecar, the .bin file, or the common base.
Dataset read_dataset(const std::filesystem::path& path);
// `header` is written verbatim before the column names (e.g. "# comment\n").
void write_dataset_csv(const Dataset& d, const std::filesystem::path& path, const std::string& header = {});

Dataset select_rows(const Dataset& d, const std::vector<std::size_t>& rows);

struct Split {
  std::vector<std::size_t> train, validation, test;
};

// Stratified shuffle split: within each label, the first fraction goes to train,
// the next to validation, the remainder to test.
Split stratified_split(const std::vector<int>& labels, double train_fraction, double validation_fraction,
                       std::uint64_t seed);

}  // namespace dpvil
