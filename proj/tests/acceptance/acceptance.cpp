// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failures (0 = all pass). An optional argument runs only the
// criteria whose name contains it.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "../support/bleu_oracle.h"
#include "../support/toy_decoder.h"
#include "dispatch.h"
#include "mmt/checkpoint.h"
#include "mmt/errors.h"
#include "mmt/evaluation.h"
#include "mmt/features.h"
#include "mmt/gradcheck.h"
#include "mmt/synthetic.h"
#include "mmt/train.h"
#include "mmt/vocab.h"

using namespace mmt;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = MMT_FIXTURE_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mmt_accept_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---- gradients ----

Outcome gradient_suite() {
  Stopwatch clock;
  const auto results = run_gradient_suite({.seeds = 10, .tolerance = 1e-4});
  const double secs = clock.seconds();
  std::size_t failed = 0;
  double worst = 0;
  std::string first_failure;
  bool modes[3] = {};
  for (const auto& r : results) {
    worst = std::max(worst, r.rel_error);
    if (!r.passed && failed++ == 0) first_failure = fmt::format(" first failure {} seed {}", r.name, r.seed);
    modes[0] |= r.name == "model.text_only";
    modes[1] |= r.name == "model.gated";
    modes[2] |= r.name == "model.selective_attention";
  }
  const bool all_modes = modes[0] && modes[1] && modes[2];
  return {failed == 0 && all_modes && secs < 120,
          fmt::format("{} checks, {} failed, worst rel error {:.2e} (< 1e-4), all fusion modes {}, {:.1f}s (< 120s){}",
                      results.size(), failed, worst, all_modes ? "yes" : "NO", secs, first_failure)};
}

// ---- masking goldens ----

Outcome masking_goldens() {
  const auto lex = MaskLexicon::load(kFixtures / "golden_lexicon.tsv");
  const auto sentence = read_corpus(kFixtures / "golden_sentence.txt").at(0);
  const std::vector<std::pair<std::string, std::string>> rows{
      {"color", "a man in a [MASK_C] suit performing motorcycle stunts"},
      {"character", "a [MASK_P] in a red suit performing motorcycle stunts"},
      {"noun1", "a man in a red [MASK_N] performing motorcycle stunts"},
      {"noun2", "a man in a red [MASK_N] performing [MASK_N] stunts"},
      {"noun3", "a man in a red [MASK_N] performing [MASK_N] [MASK_NS]"},
      {"noun4", "a [MASK_N] in a red [MASK_N] performing [MASK_N] [MASK_NS]"},
  };
  std::vector<std::string> got{join_tokens(mask_color(sentence, lex).masked),
                               join_tokens(mask_character(sentence, lex).masked)};
  for (int k = 1; k <= 4; ++k) got.push_back(join_tokens(mask_nouns(sentence, lex, k).masked));
  std::string bad;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (got[i] != rows[i].second) bad += fmt::format(" {}: got '{}'", rows[i].first, got[i]);
  }
  return {bad.empty(), bad.empty() ? "6/6 rows byte-identical" : "mismatch:" + bad};
}

// ---- schedule ----

Outcome schedule_goldens() {
  const std::vector<std::pair<std::int64_t, double>> pins{{0, 1e-7}, {2000, 5e-3}, {8000, 2.5e-3}};
  bool ok = true;
  std::string detail;
  for (const auto& [step, want] : pins) {
    const double got = lr_schedule(step);
    const double rel = std::abs(got - want) / want;
    ok &= rel <= 1e-12;
    detail += fmt::format("lr({})={:.12g} rel {:.1e}; ", step, got, rel);
  }
  return {ok, detail + "tolerance 1e-12"};
}

// ---- copy task ----

Outcome copy_task() {
  std::mt19937_64 rng(5);
  ParallelCorpus c;
  for (int i = 0; i < 200; ++i) {
    std::vector<TokenId> s(4 + rng() % 9);
    for (auto& t : s) t = TokenId(4 + rng() % 96);
    c.sources.push_back(s);
    c.targets.push_back(s);
  }
  ModelConfig mc;  // Transformer-Tiny
  mc.src_vocab = mc.tgt_vocab = 100;
  mc.max_len = 32;
  Model<float> model(mc, 1);
  TrainConfig tc;
  tc.max_steps = 2000;
  tc.batch_tokens = 1024;
  tc.validate_every = 100;
  tc.stop_accuracy = 0.99;
  tc.val_decode_len = 16;
  Stopwatch clock;
  const auto r = train(model, c, c, tc);
  const double secs = clock.seconds();
  const double acc = r.validations.empty() ? 0.0 : r.validations.back().token_accuracy;
  return {acc > 0.99 && r.steps <= 2000 && secs < 600,
          fmt::format("token accuracy {:.4f} (> 0.99) after {} steps (<= 2000), {:.1f}s (< 600s)", acc, r.steps,
                      secs)};
}

// ---- planted-signal probing and incongruent decoding ----

struct PlantedRun {
  double relaxed = 0, restrict = 0, bleu = 0, congruent = 0, incongruent = 0;
};

struct PlantedResults {
  std::map<FusionMode, std::vector<PlantedRun>> runs;
  double seconds = 0;
  std::string error;
};

PlantedRun planted_run(FusionMode mode, std::uint64_t seed) {
  const auto train_c = make_synthetic_corpus(3000, seed * 10 + 1);
  const auto test_c = make_synthetic_corpus(300, seed * 10 + 2);
  const auto lex = synthetic_lexicon(train_c.source);
  const auto task = ProbingTask::parse("noun", 2);
  const auto tr = build_probing_corpus(train_c.source, lex, task);
  const auto te = build_probing_corpus(test_c.source, lex, task);
  const FeatureRegime regime{"planted", 50, 64, true};
  const auto spec = SyntheticSpec::make(plantable_words(lex), regime, 0.5, seed, 777);

  std::vector<Sentence> masked;
  for (const auto& e : tr.examples) masked.push_back(e.masked);
  const Vocab sv = Vocab::build(masked), tv = Vocab::build(train_c.target);
  ParallelCorpus train_set, test_set;
  for (std::size_t i = 0; i < tr.examples.size(); ++i) {
    train_set.sources.push_back(sv.encode(tr.examples[i].masked));
    train_set.targets.push_back(tv.encode(train_c.target[i]));
  }
  for (std::size_t i = 0; i < te.examples.size(); ++i) {
    test_set.sources.push_back(sv.encode(te.examples[i].masked));
    test_set.targets.push_back(tv.encode(test_c.target[i]));
  }
  if (mode != FusionMode::kTextOnly) train_set.features = plant_features(tr.examples, spec, 0);
  // The text-only model gets test features only for the congruence comparison; it ignores them.
  test_set.features = plant_features(te.examples, spec, 100000);

  ModelConfig mc;  // Transformer-Tiny
  mc.fusion_mode = mode;
  mc.d_img = regime.dim;
  mc.src_vocab = std::uint32_t(sv.size());
  mc.tgt_vocab = std::uint32_t(tv.size());
  mc.max_len = 32;
  Model<float> model(mc, seed);
  TrainConfig tc;
  tc.max_steps = 800;
  tc.batch_tokens = 1024;
  tc.schedule.warmup = 160;
  tc.validate_every = 1000000;
  tc.seed = seed;
  train(model, train_set, ParallelCorpus{}, tc);

  const DecodeConfig dc{.beam = 1, .max_out_len = 32};
  const auto hyps = decode_words(model, test_set, tv, dc);
  const auto report = evaluate_hypotheses(hyps, test_c.target, &te.sidecar);
  const auto cong = congruence_report(model, test_set, test_c.target, tv, seed, dc, true);
  return {*report.relaxed_accuracy, *report.restrict_accuracy, *report.bleu, *cong.congruent_bleu,
          *cong.incongruent_bleu};
}

const PlantedResults& planted_results() {
  static PlantedResults results = [] {
    PlantedResults r;
    Stopwatch clock;
    try {
      for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        for (auto mode : {FusionMode::kTextOnly, FusionMode::kGated, FusionMode::kSelectiveAttention}) {
          r.runs[mode].push_back(planted_run(mode, seed));
          const auto& p = r.runs[mode].back();
          std::cerr << fmt::format("  planted seed {} {}: relaxed {:.4f} restrict {:.4f} bleu {:.2f} incongruent {:.2f}\n",
                                   seed, to_string(mode), p.relaxed, p.restrict, p.bleu, p.incongruent);
        }
      }
    } catch (const Error& e) {
      r.error = e.what();
    }
    r.seconds = clock.seconds();
    return r;
  }();
  return results;
}

double mean_relaxed(const std::vector<PlantedRun>& runs) {
  double s = 0;
  for (const auto& r : runs) s += r.relaxed;
  return 100 * s / double(runs.size());
}

Outcome planted_probing() {
  const auto& r = planted_results();
  if (!r.error.empty()) return {false, "error: " + r.error};
  const double text = mean_relaxed(r.runs.at(FusionMode::kTextOnly));
  const double gated = mean_relaxed(r.runs.at(FusionMode::kGated));
  const double sel = mean_relaxed(r.runs.at(FusionMode::kSelectiveAttention));
  return {sel - text >= 10 && sel - gated >= 3 && r.seconds < 1800,
          fmt::format("relaxed accuracy over 3 seeds: selective {:.2f}, text_only {:.2f} (margin {:+.2f}, need >= 10), "
                      "gated {:.2f} (margin {:+.2f}, need >= 3); {:.0f}s for 9 runs (< 1800s)",
                      sel, text, sel - text, gated, sel - gated, r.seconds)};
}

Outcome incongruent_decoding() {
  const auto& r = planted_results();
  if (!r.error.empty()) return {false, "error: " + r.error};
  bool ok = r.seconds < 1800;
  std::string detail = "selective drops";
  for (const auto& p : r.runs.at(FusionMode::kSelectiveAttention)) {
    ok &= p.congruent - p.incongruent >= 5;
    detail += fmt::format(" {:.2f}", p.congruent - p.incongruent);
  }
  detail += " BLEU (need >= 5 each); text_only deltas";
  for (const auto& p : r.runs.at(FusionMode::kTextOnly)) {
    ok &= p.congruent == p.incongruent;
    detail += fmt::format(" {}", p.congruent - p.incongruent);
  }
  return {ok, detail + " (need exactly 0)"};
}

// ---- BLEU ----

Outcome bleu_oracle() {
  const auto hyp = read_corpus(kFixtures / "bleu50.hyp");
  const auto ref = read_corpus(kFixtures / "bleu50.ref");
  const double got = bleu(hyp, ref), want = testing::oracle_bleu(hyp, ref);
  return {hyp.size() == 50 && ref.size() == 50 && std::abs(got - want) <= 1e-6 && got > 0 && got < 100,
          fmt::format("{} lines, bleu {:.9f} vs oracle {:.9f}, |diff| {:.1e} (<= 1e-6)", hyp.size(), got, want,
                      std::abs(got - want))};
}

// ---- beam search ----

Outcome beam_oracle() {
  const auto toy = testing::greedy_trap();
  const auto oracle = toy.exhaustive(3);
  const auto beam = beam_search(toy.step(), {.beam = 2, .max_out_len = 3});
  const auto greedy = greedy_search(toy.step(), 3);
  const bool toy_ok = beam.tokens == oracle.tokens && std::abs(beam.log_prob - oracle.log_prob) < 1e-12 &&
                      greedy.tokens != oracle.tokens;

  std::mt19937_64 rng(8);
  int agree = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    ModelConfig c;
    c.enc_layers = c.dec_layers = 1;
    c.d_model = 8;
    c.d_ffn = 16;
    c.heads = 2;
    c.src_vocab = 12;
    c.tgt_vocab = 7 + std::uint32_t(seed % 5);
    c.max_len = 24;
    const Model<float> m(c, seed);
    std::vector<TokenId> src(2 + rng() % 6);
    for (auto& t : src) t = TokenId(4 + rng() % 8);
    const auto b = beam_decode(m, src, nullptr, {.beam = 1, .max_out_len = 12});
    const auto g = greedy_decode(m, src, nullptr, 12);
    agree += b.tokens == g.tokens && std::abs(b.log_prob - g.log_prob) < 1e-9;
  }
  return {toy_ok && agree == 100,
          fmt::format("beam=2 on the toy model finds the exhaustive optimum ({}), greedy does not; beam=1 equals "
                      "greedy on {}/100 random models",
                      toy_ok ? "yes" : "NO", agree)};
}

// ---- restrict <= relaxed ----

Outcome restrict_le_relaxed() {
  bool ok = true;
  std::size_t reports = 0;
  for (const auto& [mode, runs] : planted_results().runs) {
    for (const auto& r : runs) {
      ok &= r.restrict <= r.relaxed;
      ++reports;
    }
  }
  // Random hypotheses against random references, with forms from one lexicon.
  const auto c = make_synthetic_corpus(200, 77);
  const auto lex = synthetic_lexicon(c.source);
  std::mt19937_64 rng(3);
  const auto forms = lex.all_forms();
  for (const char* task : {"color", "character", "noun"}) {
    const auto pc = build_probing_corpus(c.source, lex, ProbingTask::parse(task, 4));
    for (int trial = 0; trial < 20; ++trial) {
      auto hyps = c.target;
      for (auto& h : hyps) {
        for (auto& w : h) {
          if (rng() % 3 == 0) w = forms[rng() % forms.size()];
        }
      }
      const auto rep = evaluate_hypotheses(hyps, c.target, &pc.sidecar);
      ok &= *rep.restrict_accuracy <= *rep.relaxed_accuracy;
      ++reports;
    }
  }
  bool guarded = false;
  try {
    EvalReport rep;
    add_probing(rep, {5, 10}, {4, 10});
  } catch (const ContractError&) {
    guarded = true;
  }
  return {ok && guarded, fmt::format("{} reports hold restrict <= relaxed; report builder rejects a violation: {}",
                                     reports, guarded ? "yes" : "NO")};
}

// ---- end-to-end determinism ----

int cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  if (code != 0) throw Error("mmt " + args.front() + " failed: " + err.str());
  return code;
}

void pipeline(const fs::path& dir) {
  const auto c = make_synthetic_corpus(240, 21);
  write_corpus(c.source, dir / "all.en");
  write_corpus(c.target, dir / "all.de");
  {
    std::ofstream f(dir / "lexicon.tsv");
    const auto lex = synthetic_lexicon(c.source);
    for (const auto& e : lex.entries()) {
      const char* cls = e.word_class == WordClass::kColor ? "color"
                        : e.word_class == WordClass::kCharacter ? "character"
                                                                : "noun";
      f << fmt::format("{}\t{}\t{}\t{}\t{}\n", cls, e.word, e.number, e.frequency_rank, format_forms(e.forms));
    }
  }
  const auto p = [&](const char* name) { return (dir / name).string(); };
  cli({"mask", "--task", "noun", "--k", "2", "--lexicon", p("lexicon.tsv"), "--input", p("all.en"), "--sidecar",
       p("all.sidecar"), "--out", p("all.masked")});
  cli({"--seed", "3", "gen-features", "--input", p("all.masked"), "--sidecar", p("all.sidecar"), "--lexicon",
       p("lexicon.tsv"), "--patches", "10", "--dim", "16", "--cls", "--out", p("all.mmtf")});
  std::ofstream(dir / "run.ini") << "[paths]\ntrain_src = all.masked\ntrain_tgt = all.de\nvalid_src = all.masked\n"
                                    "valid_tgt = all.de\ntest_src = all.masked\ntest_tgt = all.de\n"
                                    "train_features = all.mmtf\nvalid_features = all.mmtf\ntest_features = all.mmtf\n"
                                    "test_sidecar = all.sidecar\nout_dir = out\n"
                                    "[model]\nenc_layers = 1\ndec_layers = 1\nd_model = 32\nd_ffn = 64\nheads = 2\n"
                                    "d_img = 16\nmax_len = 32\nfusion_mode = selective_attention\n"
                                    "[optim]\nbatch_tokens = 512\nwarmup = 20\nmax_steps = 60\nvalidate_every = 20\n"
                                    "average_last = 2\nval_decode_len = 24\n"
                                    "[decode]\nbeam = 3\nmax_out_len = 24\n[run]\nseed = 11\n";
  cli({"--config", p("run.ini"), "train"});
  cli({"--config", p("run.ini"), "probe", "--hyp", p("out/hyp.txt"), "--out", p("out/probe.txt")});
  cli({"--config", p("run.ini"), "congruence", "--out", p("out/congruence.txt")});
  cli({"--config", p("run.ini"), "dump-attn", "--line", "2", "--out", p("out/attn.csv")});
}

Outcome determinism() {
  setenv("MMT_PROBE_LOG", "quiet", 1);
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  try {
    pipeline(a);
    pipeline(b);
  } catch (const Error& e) {
    return {false, e.what()};
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), a));
  }
  std::string differ;
  std::size_t checkpoints = 0;
  for (const auto& f : files) {
    if (slurp(a / f) != slurp(b / f)) differ += " " + f.string();
    checkpoints += f.extension() == ".mmtc";
  }
  const bool have_all = fs::exists(a / "out/probe.txt") && fs::exists(a / "out/attn.csv") && checkpoints >= 4;
  fs::remove_all(a);
  fs::remove_all(b);
  return {differ.empty() && have_all,
          fmt::format("{} files compared ({} checkpoints, reports, attention dump): {}", files.size(), checkpoints,
                      differ.empty() ? "all byte-identical" : "differ:" + differ)};
}

// ---- binary formats ----

template <typename Fn>
bool rejects(Fn fn) {
  try {
    fn();
  } catch (const FormatError&) {
    return true;
  } catch (const Error&) {
  }
  return false;
}

Outcome format_round_trip() {
  const fs::path dir = scratch("formats");
  bool ok = true;
  std::string detail;

  // One file per regime: a file holds a single feature dimension.
  bool feat_ok = true;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> normal;
  for (const auto& regime : known_regimes()) {
    std::vector<PatchFeatures> recs;
    for (int i = 0; i < 3; ++i) {
      PatchFeatures f{fmt::format("img_{}_{}", regime.name, i), regime.has_cls, regime.patches, regime.dim, {}};
      f.values.resize(std::size_t(regime.patches) * regime.dim);
      for (auto& v : f.values) v = normal(rng);
      f.values[0] = -0.0f;
      f.values[1] = std::numeric_limits<float>::denorm_min();
      recs.push_back(std::move(f));
    }
    write_features(recs, dir / "a.mmtf");
    const auto back = read_features(dir / "a.mmtf");
    write_features(back, dir / "b.mmtf");
    feat_ok &= back.size() == recs.size();
    for (std::size_t i = 0; feat_ok && i < recs.size(); ++i) {
      feat_ok = back[i].image_id == recs[i].image_id && back[i].patches == recs[i].patches &&
                back[i].dim == recs[i].dim && back[i].has_cls == recs[i].has_cls &&
                std::memcmp(back[i].values.data(), recs[i].values.data(), recs[i].values.size() * sizeof(float)) == 0;
    }
    feat_ok &= slurp(dir / "a.mmtf") == slurp(dir / "b.mmtf");
  }
  ok &= feat_ok;
  detail += fmt::format("features ({} regimes) bitwise {}; ", known_regimes().size(), feat_ok ? "equal" : "DIFFER");

  bool ck_ok = true;
  for (auto mode : {FusionMode::kTextOnly, FusionMode::kGated, FusionMode::kSelectiveAttention}) {
    ModelConfig c;
    c.enc_layers = 2;
    c.dec_layers = 1;
    c.d_model = 16;
    c.d_ffn = 24;
    c.heads = 2;
    c.fusion_mode = mode;
    c.d_img = 8;
    c.src_vocab = 11;
    c.tgt_vocab = 13;
    c.max_len = 30;
    const Model<float> m(c, 9);
    save_checkpoint(m, dir / "a.mmtc");
    const auto loaded = load_checkpoint(dir / "a.mmtc");
    save_checkpoint(loaded.config, loaded.params, dir / "b.mmtc");
    ck_ok &= loaded.config == c && slurp(dir / "a.mmtc") == slurp(dir / "b.mmtc");
  }
  ok &= ck_ok;
  detail += fmt::format("checkpoints (3 fusion modes) bitwise {}; ", ck_ok ? "equal" : "DIFFER");

  // Corrupt the magic of each file; the readers must refuse before touching the payload.
  for (const char* name : {"a.mmtf", "a.mmtc"}) {
    std::fstream f(dir / name, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(1);
    f.put('X');
  }
  const bool rej = rejects([&] { read_features(dir / "a.mmtf"); }) &&
                   rejects([&] { load_checkpoint(dir / "a.mmtc"); });
  ok &= rej;
  detail += fmt::format("corrupted magic rejected: {}", rej ? "yes" : "NO");
  fs::remove_all(dir);
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string filter = argc > 1 ? argv[1] : "";
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient-suite", gradient_suite},
      {"masking-goldens", masking_goldens},
      {"schedule-goldens", schedule_goldens},
      {"copy-task", copy_task},
      {"planted-probing", planted_probing},
      {"incongruent-decoding", incongruent_decoding},
      {"bleu-oracle", bleu_oracle},
      {"beam-oracle", beam_oracle},
      {"restrict-le-relaxed", restrict_le_relaxed},
      {"determinism", determinism},
      {"format-round-trip", format_round_trip},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    if (name.find(filter) == std::string::npos) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << fmt::format("{} {}: {}", o.pass ? "PASS" : "FAIL", name, o.detail) << std::endl;
  }
  return failures;
}
