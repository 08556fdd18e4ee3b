#include "mmt/features.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "../io/binary.h"
#include "mmt/errors.h"

namespace mmt {

namespace {

const FeatureRegime kRegimes[] = {
    {"vit_384_16", 577, 768, true},
    {"vit_224_16", 197, 768, true},
    {"vit_384_32", 145, 768, true},
    {"vit_224_32", 50, 768, true},
    {"swin_224_7x7", 49, 1024, false},
};

void check_record(const PatchFeatures& r) {
  if (r.patches == 0) throw EmptyFeatureError("record '" + r.image_id + "' has no patches");
  if (r.values.size() != std::uint64_t(r.patches) * r.dim) {
    throw DimensionError("record '" + r.image_id + "' holds " + std::to_string(r.values.size()) +
                         " values for a " + std::to_string(r.patches) + "x" + std::to_string(r.dim) +
                         " shape");
  }
}

}  // namespace

std::span<const FeatureRegime> known_regimes() { return kRegimes; }

const FeatureRegime& regime_by_name(const std::string& name) {
  for (const auto& r : kRegimes) {
    if (r.name == name) return r;
  }
  throw ConfigError("unknown feature regime '" + name + "'");
}

std::uint64_t encoded_feature_size(std::span<const PatchFeatures> records) {
  std::uint64_t n = 4 + 4 + 8;
  for (const auto& r : records) n += 2 + r.image_id.size() + 1 + 4 + 4 + 4ULL * r.patches * r.dim;
  return n;
}

void write_features(std::span<const PatchFeatures> records, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.bytes(kFeatureMagic, 4);
  w.uint(kFeatureVersion);
  w.uint(std::uint64_t(records.size()));
  for (const auto& r : records) {
    check_record(r);
    if (r.dim != records.front().dim) {
      throw DimensionError("record '" + r.image_id + "' has dimension " + std::to_string(r.dim) +
                           ", first record has " + std::to_string(records.front().dim));
    }
    w.text16(r.image_id);
    w.uint(std::uint8_t(r.has_cls));
    w.uint(r.patches);
    w.uint(r.dim);
    for (float v : r.values) w.f32(v);
  }
  w.save(path);
}

std::vector<PatchFeatures> read_features(const std::filesystem::path& path) {
  auto in = io::ByteReader::open(path);
  in.expect_magic(kFeatureMagic, "feature");
  const auto version_at = in.offset();
  const auto version = in.uint<std::uint32_t>("version");
  if (version != kFeatureVersion) {
    throw FormatError("unsupported feature file version " + std::to_string(version), version_at);
  }
  const auto count = in.uint<std::uint64_t>("record count");
  // Every record needs at least 11 header bytes.
  if (count > in.remaining() / 11) throw FormatError("record count exceeds file size", in.offset() - 8);
  std::vector<PatchFeatures> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    PatchFeatures r;
    r.image_id = in.text16("image id");
    const auto flag_at = in.offset();
    const auto flag = in.uint<std::uint8_t>("CLS flag");
    if (flag > 1) throw FormatError("CLS flag must be 0 or 1", flag_at);
    r.has_cls = flag == 1;
    const auto shape_at = in.offset();
    r.patches = in.uint<std::uint32_t>("patch count");
    r.dim = in.uint<std::uint32_t>("feature dimension");
    if (r.patches == 0 || r.dim == 0) throw FormatError("record has an empty shape", shape_at);
    const std::uint64_t n = std::uint64_t(r.patches) * r.dim;
    if (n > in.remaining() / 4) {
      throw FormatError("record shape " + std::to_string(r.patches) + "x" + std::to_string(r.dim) +
                            " exceeds the remaining file",
                        shape_at);
    }
    if (!out.empty() && r.dim != out.front().dim) {
      throw FormatError("record dimension differs from the first record", shape_at + 4);
    }
    r.values.resize(n);
    in.f32_array(r.values.data(), n, "patch values");
    out.push_back(std::move(r));
  }
  if (!in.at_end()) throw FormatError("trailing bytes after the last record", in.offset());
  return out;
}

std::vector<std::size_t> derangement(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ContractError("a derangement needs at least two records");
  // Sattolo's algorithm yields a single n-cycle, which has no fixed points.
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i], perm[pick(rng)]);
  }
  return perm;
}

std::vector<PatchFeatures> shuffle_incongruent(std::span<const PatchFeatures> records, std::uint64_t seed) {
  const auto perm = derangement(records.size(), seed);
  std::vector<PatchFeatures> out(records.begin(), records.end());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& src = records[perm[i]];
    out[i].has_cls = src.has_cls;
    out[i].patches = src.patches;
    out[i].dim = src.dim;
    out[i].values = src.values;
  }
  return out;
}

std::uint64_t stable_hash(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SyntheticSpec SyntheticSpec::make(std::vector<std::string> words, const FeatureRegime& regime, double sigma,
                                  std::uint64_t seed, std::uint64_t table_seed) {
  if (sigma < 0) throw ConfigError("noise scale must be non-negative");
  if (regime.dim == 0 || regime.patches == 0) throw ConfigError("regime shape must be positive");
  if (regime.has_cls && regime.patches < 2) throw ConfigError("a CLS regime needs at least one patch row");
  SyntheticSpec spec;
  spec.words = std::move(words);
  spec.sigma = sigma;
  spec.regime = regime;
  spec.seed = seed;
  std::mt19937_64 rng(table_seed);
  std::normal_distribution<double> gauss;
  const std::size_t d = regime.dim;
  spec.table.resize(spec.words.size() * d);
  for (std::size_t w = 0; w < spec.words.size(); ++w) {
    std::vector<double> row(d);
    double norm = 0;
    for (auto& x : row) {
      x = gauss(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j) spec.table[w * d + j] = float(row[j] / norm);
  }
  return spec;
}

long SyntheticSpec::index_of(const std::string& word) const {
  const auto it = std::find(words.begin(), words.end(), word);
  return it == words.end() ? -1 : long(it - words.begin());
}

std::vector<PatchFeatures> generate_synthetic(std::span<const std::string> image_ids,
                                              std::span<const std::vector<std::string>> planted,
                                              const SyntheticSpec& spec,
                                              std::vector<std::vector<std::uint32_t>>* signal_rows) {
  if (image_ids.size() != planted.size()) throw ContractError("one planted-word list per image is required");
  const auto& reg = spec.regime;
  const std::size_t d = reg.dim;
  const std::size_t first = reg.has_cls ? 1 : 0;
  const std::size_t slots = reg.patches - first;
  const double noise_sd = spec.sigma / std::sqrt(double(d));
  std::vector<PatchFeatures> out;
  out.reserve(image_ids.size());
  if (signal_rows) signal_rows->assign(image_ids.size(), {});
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    std::vector<std::size_t> word_ids;
    for (const auto& w : planted[i]) {
      const long idx = spec.index_of(w);
      if (idx < 0) throw GenerationError("word '" + w + "' is not in the plantable vocabulary");
      word_ids.push_back(std::size_t(idx));
    }
    const std::size_t needed = word_ids.size() * spec.patches_per_signal;
    if (needed > slots) {
      throw GenerationError("image '" + image_ids[i] + "' needs " + std::to_string(needed) +
                            " signal patches but the regime has " + std::to_string(slots));
    }
    std::mt19937_64 rng(stable_hash(image_ids[i], spec.seed));
    std::normal_distribution<double> gauss(0.0, 1.0);
    PatchFeatures f{.image_id = image_ids[i], .has_cls = reg.has_cls, .patches = reg.patches, .dim = reg.dim,
                    .values = std::vector<float>(std::size_t(reg.patches) * d)};
    for (std::size_t r = first; r < reg.patches; ++r) {
      for (std::size_t j = 0; j < d; ++j) f.values[r * d + j] = float(noise_sd * gauss(rng));
    }
    std::vector<std::size_t> order(slots);
    std::iota(order.begin(), order.end(), first);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t next = 0;
    for (std::size_t w : word_ids) {
      const auto e = spec.embedding(w);
      for (std::uint32_t c = 0; c < spec.patches_per_signal; ++c) {
        const std::size_t r = order[next++];
        for (std::size_t j = 0; j < d; ++j) f.values[r * d + j] += e[j];
        if (signal_rows) (*signal_rows)[i].push_back(std::uint32_t(r));
      }
    }
    if (reg.has_cls) {
      for (std::size_t r = 1; r < reg.patches; ++r) {
        for (std::size_t j = 0; j < d; ++j) f.values[j] += f.values[r * d + j];
      }
      for (std::size_t j = 0; j < d; ++j) f.values[j] /= float(reg.patches - 1);
    }
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace mmt
