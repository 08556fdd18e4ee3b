#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "mmt/decode.h"
#include "mmt/masking.h"
#include "mmt/metrics.h"
#include "mmt/model.h"
#include "mmt/train.h"

namespace mmt::cli {

struct PathsBlock {
  std::optional<std::filesystem::path> train_src, train_tgt, valid_src, valid_tgt, test_src, test_tgt;
  std::optional<std::filesystem::path> train_features, valid_features, test_features;
  std::optional<std::filesystem::path> lexicon, test_sidecar;
  std::optional<std::filesystem::path> out_dir;
};

struct ProbingBlock {
  std::string task = "color";
  int k = 1;
  bool custom_characters = false;
};

// Flat INI file: [paths], [model], [optim], [decode], [probing], [run].
struct ExperimentConfig {
  PathsBlock paths;
  ModelConfig model;  // vocabulary sizes come from the data
  TrainConfig train;
  std::size_t average_last = 10;
  DecodeConfig decode;
  ProbingBlock probing;
  std::uint64_t seed = 1;

  // Relative paths resolve against `base_dir`. Unknown sections or keys and
  // malformed values throw ConfigError.
  static ExperimentConfig parse(std::istream& in, const std::string& name,
                                const std::filesystem::path& base_dir = {});
  // Also checks that every input path exists.
  static ExperimentConfig load(const std::filesystem::path& path);

  void validate() const;
};

}  // namespace mmt::cli
