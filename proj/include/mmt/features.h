#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmt {

// One image's patch sequence [patches x dim], row-major. When has_cls is set
// row 0 is the CLS summary row.
struct PatchFeatures {
  std::string image_id;
  bool has_cls = false;
  std::uint32_t patches = 0;
  std::uint32_t dim = 0;
  std::vector<float> values;

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(values).subspan(i * dim, dim);
  }
  bool operator==(const PatchFeatures&) const = default;
};

// A patch-count/feature-size pairing, e.g. ViT-B at 384px with 16px patches
// gives 576 patches plus CLS.
struct FeatureRegime {
  std::string name;
  std::uint32_t patches = 0;  // including CLS when has_cls
  std::uint32_t dim = 0;
  bool has_cls = true;
};

// Regimes of the reference backbones: 384/16 (577), 224/16 (197),
// 384/32 (145), 224/32 (50), and a 7x7 windowed backbone without CLS (49).
std::span<const FeatureRegime> known_regimes();
const FeatureRegime& regime_by_name(const std::string& name);

// MMTF file: magic, version u32, record count u64, then per record
// id_len u16, id bytes, has_cls u8, p u32, d u32, p*d little-endian f32.
inline constexpr char kFeatureMagic[4] = {'M', 'M', 'T', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

void write_features(std::span<const PatchFeatures> records, const std::filesystem::path& path);
// Reads and validates the whole file; throws FormatError (with byte offset)
// without returning partial results.
std::vector<PatchFeatures> read_features(const std::filesystem::path& path);
// Exact size in bytes of the encoded file for these records.
std::uint64_t encoded_feature_size(std::span<const PatchFeatures> records);

// Reassigns payloads to image ids by a seeded derangement: no record keeps
// its own payload. Needs at least two records.
std::vector<PatchFeatures> shuffle_incongruent(std::span<const PatchFeatures> records,
                                               std::uint64_t seed);
// The permutation used above: record i receives the payload of perm[i].
std::vector<std::size_t> derangement(std::size_t n, std::uint64_t seed);

// Desk-scale stand-in for backbone features: each planted word gets a
// unit-norm signal vector, hidden in randomly chosen patch rows under
// isotropic gaussian noise of total norm about sigma.
struct SyntheticSpec {
  std::vector<std::string> words;  // plantable vocabulary
  std::vector<float> table;        // [words x regime.dim], unit-norm rows
  double sigma = 0.0;
  std::uint32_t patches_per_signal = 1;
  FeatureRegime regime;
  std::uint64_t seed = 0;

  // Row-normalized gaussian table drawn from `table_seed`.
  static SyntheticSpec make(std::vector<std::string> words, const FeatureRegime& regime, double sigma,
                            std::uint64_t seed, std::uint64_t table_seed);
  std::span<const float> embedding(std::size_t word) const {
    return std::span<const float>(table).subspan(word * regime.dim, regime.dim);
  }
  // Index of `word` in the plantable vocabulary, or -1.
  long index_of(const std::string& word) const;
};

// One record per image. `planted[i]` lists the words hidden in image i; the
// rows holding each word's signal are reported through `signal_rows` when
// given (same nesting, patches_per_signal rows per word). Output depends
// only on (spec, image id, planted words).
std::vector<PatchFeatures> generate_synthetic(std::span<const std::string> image_ids,
                                              std::span<const std::vector<std::string>> planted,
                                              const SyntheticSpec& spec,
                                              std::vector<std::vector<std::uint32_t>>* signal_rows = nullptr);

// Stable 64-bit FNV-1a, used to derive per-record seeds.
std::uint64_t stable_hash(std::string_view s, std::uint64_t seed = 0);

}  // namespace mmt
