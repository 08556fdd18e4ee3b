#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mmt/model.h"

namespace mmt {

// MMTC file: magic, version u32, serialized ModelConfig, tensor count u32,
// then for every parameter in declared order: name (u16 length + bytes),
// rank u32, dims u32..., values as little-endian f32.
inline constexpr char kCheckpointMagic[4] = {'M', 'M', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams<float> params;
};

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path);
void save_checkpoint(const ModelConfig& config, const ModelParams<float>& params,
                     const std::filesystem::path& path);
// Throws FormatError for malformed bytes and CheckpointError when the stored
// tensors do not fit the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);
Model<float> load_model(const std::filesystem::path& path);

// Element-wise mean of the parameters of one or more checkpoints that share
// a config.
Checkpoint average_checkpoints(const std::vector<std::filesystem::path>& paths);

}  // namespace mmt
