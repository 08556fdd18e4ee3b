#include "mmt/checkpoint.h"

#include "../io/binary.h"
#include "mmt/errors.h"

namespace mmt {

namespace {

void write_config(io::ByteWriter& w, const ModelConfig& c) {
  w.uint(c.enc_layers);
  w.uint(c.dec_layers);
  w.uint(c.d_model);
  w.uint(c.d_ffn);
  w.uint(c.heads);
  w.f64(c.dropout);
  w.f64(c.label_smoothing);
  w.uint(std::uint8_t(c.fusion_mode));
  w.uint(c.d_img);
  w.uint(c.src_vocab);
  w.uint(c.tgt_vocab);
  w.uint(c.max_len);
  w.uint(std::uint8_t(c.raw_qkv));
  w.uint(std::uint8_t(c.gate));
}

ModelConfig read_config(io::ByteReader& r) {
  const auto start = r.offset();
  ModelConfig c;
  c.enc_layers = r.uint<std::uint32_t>("config");
  c.dec_layers = r.uint<std::uint32_t>("config");
  c.d_model = r.uint<std::uint32_t>("config");
  c.d_ffn = r.uint<std::uint32_t>("config");
  c.heads = r.uint<std::uint32_t>("config");
  c.dropout = r.f64("config");
  c.label_smoothing = r.f64("config");
  const auto mode = r.uint<std::uint8_t>("config");
  if (mode > 2) throw FormatError("unknown fusion mode code " + std::to_string(mode), r.offset() - 1);
  c.fusion_mode = FusionMode(mode);
  c.d_img = r.uint<std::uint32_t>("config");
  c.src_vocab = r.uint<std::uint32_t>("config");
  c.tgt_vocab = r.uint<std::uint32_t>("config");
  c.max_len = r.uint<std::uint32_t>("config");
  const auto raw = r.uint<std::uint8_t>("config");
  const auto gate = r.uint<std::uint8_t>("config");
  if (raw > 1 || gate > 1) throw FormatError("invalid flag in model config", r.offset() - 2);
  c.raw_qkv = raw == 1;
  c.gate = GateGranularity(gate);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("stored model config is invalid: ") + e.what(), start);
  }
  return c;
}

}  // namespace

void save_checkpoint(const ModelConfig& config, const ModelParams<float>& params,
                     const std::filesystem::path& path) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.uint(kCheckpointVersion);
  write_config(w, config);
  const auto tensors = ordered_parameters(params, config);
  w.uint(std::uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.text16(name);
    w.uint(std::uint32_t(t.ndim()));
    for (auto d : t.shape()) w.uint(std::uint32_t(d));
    for (float v : t.data()) w.f32(v);
  }
  w.save(path);
}

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  save_checkpoint(model.config(), model.params(), path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto r = io::ByteReader::open(path);
  r.expect_magic(kCheckpointMagic, "checkpoint");
  const auto version = r.uint<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  Checkpoint ck;
  ck.config = read_config(r);
  const auto layout = parameter_layout(ck.config);
  const auto count_at = r.offset();
  const auto count = r.uint<std::uint32_t>("tensor count");
  if (count != layout.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                          std::to_string(layout.size()),
                      count_at);
  }
  ck.params = zero_params<float>(ck.config);
  const auto slots = ordered_parameters(ck.params, ck.config);
  for (std::size_t k = 0; k < layout.size(); ++k) {
    const auto& [name, shape] = layout[k];
    const auto at = r.offset();
    const auto stored = r.text16("tensor name");
    if (stored != name) throw FormatError("expected tensor '" + name + "', found '" + stored + "'", at);
    const auto rank = r.uint<std::uint32_t>("tensor rank");
    Shape s;
    for (std::uint32_t i = 0; i < std::min<std::uint32_t>(rank, 8); ++i) s.push_back(r.uint<std::uint32_t>("dims"));
    if (s != shape) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(s) + ", expected " + shape_str(shape), at);
    }
    Tensor<float> t = slots[k].tensor;
    r.f32_array(t.mutable_data().data(), t.size(), "tensor values");
  }
  if (!r.at_end()) throw FormatError("trailing bytes after the last tensor", r.offset());
  return ck;
}

Model<float> load_model(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  return Model<float>(ck.config, std::move(ck.params));
}

Checkpoint average_checkpoints(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) throw ContractError("averaging needs at least one checkpoint");
  Checkpoint first = load_checkpoint(paths.front());
  auto acc_handles = ordered_parameters(first.params, first.config);
  std::vector<std::vector<double>> acc;
  for (const auto& nt : acc_handles) acc.emplace_back(nt.tensor.data().begin(), nt.tensor.data().end());
  for (std::size_t k = 1; k < paths.size(); ++k) {
    Checkpoint next = load_checkpoint(paths[k]);
    if (!(next.config == first.config)) {
      throw CheckpointError("checkpoint '" + paths[k].string() + "' was written with a different model config");
    }
    const auto handles = ordered_parameters(next.params, next.config);
    for (std::size_t i = 0; i < handles.size(); ++i) {
      const auto& d = handles[i].tensor.data();
      for (std::size_t j = 0; j < d.size(); ++j) acc[i][j] += d[j];
    }
  }
  const double n = double(paths.size());
  for (std::size_t i = 0; i < acc_handles.size(); ++i) {
    auto out = acc_handles[i].tensor.mutable_data();
    for (std::size_t j = 0; j < acc[i].size(); ++j) out[j] = float(acc[i][j] / n);
  }
  return first;
}

}  // namespace mmt
