#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "config.h"
#include "dispatch.h"
#include "mmt/errors.h"
#include "mmt/features.h"
#include "mmt/masking.h"
#include "mmt/synthetic.h"

using namespace mmt;
using namespace mmt::cli;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = MMT_FIXTURE_DIR;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("mmt_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  std::string str(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  setenv("MMT_PROBE_LOG", "quiet", 1);
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

std::string lexicon() { return (kFixtures / "golden_lexicon.tsv").string(); }
std::string sentence() { return (kFixtures / "golden_sentence.txt").string(); }

// Tiny synthetic corpus and a config that trains a small model in seconds.
void write_tiny_experiment(const TempDir& dir, const std::string& mode, std::uint64_t seed) {
  const auto c = make_synthetic_corpus(60, 3);
  write_corpus(c.source, dir / "train.en");
  write_corpus(c.target, dir / "train.de");
  write(dir / "run.ini", "[paths]\ntrain_src = train.en\ntrain_tgt = train.de\nvalid_src = train.en\n"
                         "valid_tgt = train.de\ntest_src = train.en\ntest_tgt = train.de\nout_dir = out\n"
                         "[model]\nenc_layers = 1\ndec_layers = 1\nd_model = 16\nd_ffn = 32\nheads = 2\n"
                         "max_len = 32\nfusion_mode = " +
                             mode +
                             "\n[optim]\nbatch_tokens = 256\nwarmup = 10\nmax_steps = 24\nvalidate_every = 8\n"
                             "average_last = 2\nval_decode_len = 16\n[decode]\nbeam = 2\nmax_out_len = 16\n"
                             "[run]\nseed = " +
                             std::to_string(seed) + "\n");
}

}  // namespace

TEST(CliDispatch, HelpIsSuccess) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("gen-features"), std::string::npos);
}

TEST(CliDispatch, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(run({"mask", "--no-such-flag"}).code, kExitUsage);
  EXPECT_EQ(run({"mask", "--task", "verb"}).code, kExitUsage);
  // Nothing names the input: neither a flag nor a config.
  const auto r = run({"mask", "--lexicon", lexicon()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("--input"), std::string::npos);
  EXPECT_EQ(run({"avg-ckpt", "--out", "x.mmtc"}).code, kExitUsage);
}

TEST(CliDispatch, DomainErrorsExitOne) {
  TempDir dir;
  write(dir / "bad.tsv", "color\tred\t-\t0\trot\nnoun\tred\ts\t1\trot\n");
  const auto r = run({"mask", "--input", sentence(), "--lexicon", dir.str("bad.tsv")});
  EXPECT_EQ(r.code, kExitDomainError);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  write(dir / "bad.mmtf", "NOPE and some more bytes");
  EXPECT_EQ(run({"--out", dir.str("x.mmtf"), "gen-features", "--shuffle", dir.str("bad.mmtf")}).code,
            kExitDomainError);
}

TEST(CliDispatch, BadLogLevelIsUsageError) {
  setenv("MMT_PROBE_LOG", "loud", 1);
  std::ostringstream out, err;
  EXPECT_EQ(dispatch({"mask", "--input", sentence(), "--lexicon", lexicon()}, out, err), kExitUsage);
  setenv("MMT_PROBE_LOG", "quiet", 1);
}

TEST(CliMask, NounMask3MatchesTableRow) {
  TempDir dir;
  const auto r = run({"mask", "--task", "noun", "--k", "3", "--input", sentence(), "--lexicon", lexicon(),
                      "--sidecar", dir.str("sc.tsv")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(r.out, "a man in a red [MASK_N] performing [MASK_N] [MASK_NS]\n");
  const auto sidecar = read_sidecar(dir / "sc.tsv");
  ASSERT_EQ(sidecar.size(), 3u);
  EXPECT_EQ(sidecar[0].original, "suit");
  EXPECT_EQ(sidecar[2].kind, MaskKind::kNounPlural);
}

TEST(CliMask, GlobalOutAfterSubcommandWritesFile) {
  TempDir dir;
  const auto r = run({"mask", "--task", "color", "--input", sentence(), "--lexicon", lexicon(), "--out",
                      dir.str("m.txt")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_TRUE(r.out.empty());
  EXPECT_EQ(slurp(dir / "m.txt"), "a man in a [MASK_C] suit performing motorcycle stunts\n");
}

TEST(CliConfig, UnknownKeyRejected) {
  std::istringstream in("[model]\nd_model = 64\nd_modle = 32\n");
  EXPECT_THROW(ExperimentConfig::parse(in, "x.ini"), ConfigError);
  std::istringstream section("[modell]\nd_model = 64\n");
  EXPECT_THROW(ExperimentConfig::parse(section, "x.ini"), ConfigError);
  TempDir dir;
  write(dir / "bad.ini", "[optim]\nlearning_rate = 1\n");
  EXPECT_EQ(run({"--config", dir.str("bad.ini"), "gradcheck", "--seeds", "1"}).code, kExitDomainError);
}

TEST(CliConfig, ParsesValuesAndResolvesPaths) {
  std::istringstream in(
      "[paths]\ntrain_src = a/train.en\nlexicon = /abs/lex.tsv\n[model]\nfusion_mode = gated\ngate = position\n"
      "d_img = 64\n[optim]\npeak_lr = 0.001\nmax_steps = 10\n[decode]\nbeam = 4\n[probing]\ntask = noun\nk = 3\n"
      "[run]\nseed = 9\n");
  const auto cfg = ExperimentConfig::parse(in, "x.ini", "/base");
  EXPECT_EQ(*cfg.paths.train_src, fs::path("/base/a/train.en"));
  EXPECT_EQ(*cfg.paths.lexicon, fs::path("/abs/lex.tsv"));
  EXPECT_EQ(cfg.model.fusion_mode, FusionMode::kGated);
  EXPECT_EQ(cfg.model.gate, GateGranularity::kPerPosition);
  EXPECT_EQ(cfg.model.d_img, 64u);
  EXPECT_DOUBLE_EQ(cfg.train.schedule.peak_lr, 0.001);
  EXPECT_EQ(cfg.train.max_steps, 10);
  EXPECT_EQ(cfg.decode.beam, 4);
  EXPECT_EQ(cfg.probing.k, 3);
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.train.seed, 9u);
}

TEST(CliConfig, MalformedValuesRejected) {
  for (const char* text : {"[model]\nd_model = big\n", "[model]\nraw_qkv = maybe\n", "[model]\ngate = row\n",
                           "[model]\nfusion_mode = late\n", "[optim]\nmax_steps = 0\n", "[probing]\nk = 7\ntask = noun\n",
                           "d_model = 3\n"}) {
    std::istringstream in(text);
    EXPECT_THROW(ExperimentConfig::parse(in, "x.ini"), ConfigError) << text;
  }
}

TEST(CliConfig, MissingInputPathRejected) {
  TempDir dir;
  write(dir / "c.ini", "[paths]\ntrain_src = nowhere.en\n");
  EXPECT_THROW(ExperimentConfig::load(dir / "c.ini"), ConfigError);
}

TEST(CliEvaluate, RelaxedNeverBelowRestrict) {
  TempDir dir;
  // Reference uses "roten"; the hypothesis has another form of the same lemma.
  write(dir / "ref.txt", "ein mann in einem roten anzug\nein mann in einem roten anzug\n");
  write(dir / "hyp.txt", "ein mann in einem rote anzug\nein mann in einem roten anzug\n");
  write_sidecar({{1, 4, MaskKind::kColor, "red", {{"rot", "rote", "roter", "rotes", "roten", "rotem"}}},
                 {2, 4, MaskKind::kColor, "red", {{"rot", "rote", "roter", "rotes", "roten", "rotem"}}}},
                dir / "sc.tsv");
  const auto r = run({"evaluate", "--hyp", dir.str("hyp.txt"), "--ref", dir.str("ref.txt"), "--sidecar",
                      dir.str("sc.tsv")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("restrict=0.500000"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("relaxed=1.000000"), std::string::npos) << r.out;

  const auto only = run({"evaluate", "--hyp", dir.str("hyp.txt"), "--ref", dir.str("ref.txt"), "--sidecar",
                         dir.str("sc.tsv"), "--criterion", "relaxed"});
  EXPECT_EQ(only.out.find("restrict="), std::string::npos);
  EXPECT_NE(only.out.find("relaxed="), std::string::npos);
}

TEST(CliEvaluate, LineCountMismatchIsDomainError) {
  TempDir dir;
  write(dir / "ref.txt", "a b\nc d\n");
  write(dir / "hyp.txt", "a b\n");
  EXPECT_EQ(run({"evaluate", "--hyp", dir.str("hyp.txt"), "--ref", dir.str("ref.txt")}).code, kExitDomainError);
}

TEST(CliFeatures, GenerateAndShuffle) {
  TempDir dir;
  ASSERT_EQ(run({"mask", "--task", "noun", "--k", "2", "--input", sentence(), "--lexicon", lexicon(), "--sidecar",
                 dir.str("sc.tsv"), "--out", dir.str("m.txt")})
                .code,
            kExitOk);
  // Two copies of the sentence so the shuffle has something to permute.
  write(dir / "m2.txt", slurp(dir / "m.txt") + slurp(dir / "m.txt"));
  write(dir / "sc2.tsv", slurp(dir / "sc.tsv"));
  const auto g = run({"--seed", "4", "gen-features", "--input", dir.str("m2.txt"), "--sidecar", dir.str("sc2.tsv"),
                      "--lexicon", lexicon(), "--regime", "vit_224_32", "--id-offset", "7", "--out",
                      dir.str("f.mmtf")});
  ASSERT_EQ(g.code, kExitOk) << g.err;
  const auto recs = read_features(dir / "f.mmtf");
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].image_id, "img000007");
  EXPECT_EQ(recs[0].patches, 50u);
  EXPECT_EQ(recs[0].dim, 768u);

  ASSERT_EQ(run({"--seed", "1", "gen-features", "--shuffle", dir.str("f.mmtf"), "--out", dir.str("s.mmtf")}).code,
            kExitOk);
  const auto shuffled = read_features(dir / "s.mmtf");
  EXPECT_EQ(shuffled[0].image_id, recs[0].image_id);
  EXPECT_EQ(shuffled[0].values, recs[1].values);
  EXPECT_EQ(shuffled[1].values, recs[0].values);

  EXPECT_EQ(run({"gen-features", "--input", dir.str("m2.txt"), "--sidecar", dir.str("sc2.tsv"), "--lexicon",
                 lexicon(), "--out", dir.str("g.mmtf")})
                .code,
            kExitUsage);
}

TEST(CliTrain, SeededRunsAreByteIdentical) {
  TempDir a, b;
  for (const TempDir* d : {&a, &b}) {
    write_tiny_experiment(*d, "text_only", 5);
    const auto r = run({"--config", d->str("run.ini"), "train"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_NE(r.out.find("steps=24"), std::string::npos) << r.out;
    ASSERT_EQ(run({"--config", d->str("run.ini"), "translate", "--out", d->str("out/hyp.txt")}).code, kExitOk);
  }
  for (const char* f : {"out/model.mmtc", "out/train.tsv", "out/src.vocab", "out/tgt.vocab", "out/hyp.txt"}) {
    EXPECT_FALSE(slurp(a / f).empty()) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_EQ(std::distance(fs::directory_iterator(a / "out/checkpoints"), fs::directory_iterator{}), 3);

  // Averaging a checkpoint with itself reproduces it.
  const auto ck = (a / "out/model.mmtc").string();
  ASSERT_EQ(run({"avg-ckpt", ck, ck, "--out", a.str("same.mmtc")}).code, kExitOk);
  EXPECT_EQ(slurp(a / "same.mmtc"), slurp(a / "out/model.mmtc"));
}

TEST(CliTrain, FusionWithoutFeaturesIsConfigError) {
  TempDir dir;
  write_tiny_experiment(dir, "gated", 1);
  const auto r = run({"--config", dir.str("run.ini"), "train"});
  EXPECT_EQ(r.code, kExitDomainError);
  EXPECT_NE(r.err.find("feature"), std::string::npos) << r.err;
}

TEST(CliGradcheck, ReportsAndPasses) {
  const auto r = run({"gradcheck", "--seeds", "1"});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("failed=0"), std::string::npos) << r.out;
  EXPECT_EQ(run({"gradcheck", "--seeds", "1", "--tolerance", "1e-30"}).code, kExitDomainError);
}
