#include "dispatch.h"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "config.h"
#include "mmt/checkpoint.h"
#include "mmt/errors.h"
#include "mmt/evaluation.h"
#include "mmt/features.h"
#include "mmt/gradcheck.h"
#include "mmt/synthetic.h"
#include "mmt/vocab.h"

namespace mmt::cli {

namespace {

namespace fs = std::filesystem;

// Missing or contradictory flags; reported like a parse error.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flag storage shared by every subcommand. Unset optionals fall back to
// the config file.
struct Flags {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;

  std::optional<fs::path> input, lexicon, sidecar, features, model, vocab_dir, hyp, ref;
  std::optional<std::string> task, criterion, fusion_mode, regime;
  std::optional<int> k, beam;
  std::optional<std::size_t> max_out_len, line;
  std::optional<std::int64_t> steps;
  std::optional<double> sigma;
  std::optional<std::uint32_t> patches, dim;
  bool cls = false;
  std::uint64_t table_seed = 777;
  std::size_t id_offset = 0;
  std::optional<fs::path> shuffle;
  int seeds = 10;
  double tolerance = 1e-4;
  std::vector<fs::path> checkpoints;
};

struct Context {
  Flags flags;
  ExperimentConfig cfg;
  std::ostream& out;
  std::ostream& err;

  std::uint64_t seed() const { return flags.seed.value_or(cfg.seed); }
};

fs::path need(const std::optional<fs::path>& flag, const std::optional<fs::path>& fallback, const char* what) {
  if (flag) return *flag;
  if (fallback) return *fallback;
  throw UsageError(std::string("missing ") + what);
}

// Writes to --out when given, otherwise to the context's output stream.
void emit(Context& ctx, const std::string& text) {
  if (ctx.flags.out) {
    std::ofstream f(*ctx.flags.out, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + ctx.flags.out->string() + "' for writing");
    f << text;
    if (!f) throw IoError("failed writing '" + ctx.flags.out->string() + "'");
  } else {
    ctx.out << text;
  }
}

std::string joined_lines(const std::vector<Sentence>& lines) {
  std::string s;
  for (const auto& l : lines) s += join_tokens(l) + "\n";
  return s;
}

DecodeConfig decode_config(const Context& ctx) {
  DecodeConfig d = ctx.cfg.decode;
  if (ctx.flags.beam) d.beam = *ctx.flags.beam;
  if (ctx.flags.max_out_len) d.max_out_len = *ctx.flags.max_out_len;
  d.validate();
  return d;
}

ProbingTask probing_task(const Context& ctx) {
  const std::string name = ctx.flags.task.value_or(ctx.cfg.probing.task);
  const int k = ctx.flags.k.value_or(ctx.cfg.probing.k);
  return ProbingTask::parse(name, name == "noun" ? k : 0);
}

MaskLexicon lexicon(const Context& ctx) {
  return MaskLexicon::load(need(ctx.flags.lexicon, ctx.cfg.paths.lexicon, "--lexicon"),
                           ctx.cfg.probing.custom_characters);
}

struct LoadedModel {
  Model<float> model;
  Vocab src, tgt;
};

LoadedModel load_run(const Context& ctx) {
  std::optional<fs::path> default_model;
  if (ctx.cfg.paths.out_dir) default_model = *ctx.cfg.paths.out_dir / "model.mmtc";
  const fs::path model_path = need(ctx.flags.model, default_model, "--model");
  const fs::path dir = ctx.flags.vocab_dir.value_or(model_path.parent_path());
  spdlog::info("loading {} with vocabularies from {}", model_path.string(), dir.string());
  LoadedModel run{load_model(model_path), Vocab::load(dir / "src.vocab"), Vocab::load(dir / "tgt.vocab")};
  if (run.src.size() != run.model.config().src_vocab || run.tgt.size() != run.model.config().tgt_vocab) {
    throw CheckpointError("vocabularies in " + dir.string() + " do not match the model's vocabulary sizes");
  }
  return run;
}

// Test-side corpus: source ids, optional references and features.
ParallelCorpus test_corpus(const Context& ctx, const LoadedModel& run, const std::vector<Sentence>* refs) {
  ParallelCorpus c;
  for (const auto& s : read_corpus(need(ctx.flags.input, ctx.cfg.paths.test_src, "--input"))) {
    c.sources.push_back(run.src.encode(s));
  }
  c.targets.resize(c.sources.size());
  if (refs) {
    if (refs->size() != c.sources.size()) {
      throw AlignmentError(fmt::format("{} source lines but {} references", c.sources.size(), refs->size()));
    }
    for (std::size_t i = 0; i < refs->size(); ++i) c.targets[i] = run.tgt.encode((*refs)[i]);
  }
  const auto feats = ctx.flags.features ? ctx.flags.features : ctx.cfg.paths.test_features;
  if (feats) c.features = read_features(*feats);
  c.check();
  return c;
}

std::vector<Sentence> references(const Context& ctx) {
  return read_corpus(need(ctx.flags.ref, ctx.cfg.paths.test_tgt, "--ref"));
}

// ---- subcommands ----

int run_mask(Context& ctx) {
  const auto lex = lexicon(ctx);
  const auto task = probing_task(ctx);
  const auto corpus = read_corpus(need(ctx.flags.input, ctx.cfg.paths.train_src, "--input"));
  const auto pc = build_probing_corpus(corpus, lex, task);
  std::vector<Sentence> masked;
  for (const auto& e : pc.examples) masked.push_back(e.masked);
  emit(ctx, joined_lines(masked));
  if (ctx.flags.sidecar) write_sidecar(pc.sidecar, *ctx.flags.sidecar);
  spdlog::info("{}: {} of {} sentences altered, {} masks", task.name(), pc.altered(), corpus.size(),
               pc.sidecar.size());
  return kExitOk;
}

int run_gen_features(Context& ctx) {
  if (!ctx.flags.out) throw UsageError("gen-features needs --out");
  if (ctx.flags.shuffle) {
    write_features(shuffle_incongruent(read_features(*ctx.flags.shuffle), ctx.seed()), *ctx.flags.out);
    return kExitOk;
  }
  FeatureRegime regime;
  if (ctx.flags.regime) {
    regime = regime_by_name(*ctx.flags.regime);
  } else if (ctx.flags.patches && ctx.flags.dim) {
    regime = FeatureRegime{"custom", *ctx.flags.patches, *ctx.flags.dim, ctx.flags.cls};
  } else {
    throw UsageError("gen-features needs --regime or both --patches and --dim");
  }
  const auto lex = lexicon(ctx);
  const auto lines = read_corpus(need(ctx.flags.input, std::nullopt, "--input (masked corpus)"));
  const auto sidecar = read_sidecar(need(ctx.flags.sidecar, std::nullopt, "--sidecar"));
  std::vector<std::string> ids;
  std::vector<std::vector<std::string>> planted(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) ids.push_back(fmt::format("img{:06d}", ctx.flags.id_offset + i));
  for (const auto& r : sidecar) {
    if (r.line_no == 0 || r.line_no > lines.size()) {
      throw AlignmentError(fmt::format("sidecar line {} is outside the {}-line corpus", r.line_no, lines.size()));
    }
    planted[r.line_no - 1].push_back(normalize_word(r.original));
  }
  const auto spec =
      SyntheticSpec::make(plantable_words(lex), regime, ctx.flags.sigma.value_or(0.5), ctx.seed(), ctx.flags.table_seed);
  write_features(generate_synthetic(ids, planted, spec), *ctx.flags.out);
  spdlog::info("wrote {} synthetic records ({} x {}) to {}", ids.size(), regime.patches, regime.dim,
               ctx.flags.out->string());
  return kExitOk;
}

int run_train(Context& ctx) {
  ExperimentConfig& cfg = ctx.cfg;
  if (ctx.flags.fusion_mode) cfg.model.fusion_mode = parse_fusion_mode(*ctx.flags.fusion_mode);
  if (ctx.flags.steps) cfg.train.max_steps = *ctx.flags.steps;
  cfg.train.seed = ctx.seed();
  cfg.validate();
  const fs::path out_dir = need(ctx.flags.out, cfg.paths.out_dir, "--out or paths.out_dir");
  const auto src = read_corpus(need(std::nullopt, cfg.paths.train_src, "paths.train_src"));
  const auto tgt = read_corpus(need(std::nullopt, cfg.paths.train_tgt, "paths.train_tgt"));
  const bool fused = cfg.model.fusion_mode != FusionMode::kTextOnly;

  const Vocab src_vocab = Vocab::build(src), tgt_vocab = Vocab::build(tgt);
  auto encode = [&](const std::vector<Sentence>& s, const std::vector<Sentence>& t,
                    const std::optional<fs::path>& feats) {
    ParallelCorpus c;
    for (const auto& x : s) c.sources.push_back(src_vocab.encode(x));
    for (const auto& x : t) c.targets.push_back(tgt_vocab.encode(x));
    if (fused) {
      if (!feats) throw ConfigError("fusion mode " + to_string(cfg.model.fusion_mode) + " needs feature files");
      c.features = read_features(*feats);
    }
    c.check();
    return c;
  };
  const auto train_set = encode(src, tgt, cfg.paths.train_features);
  ParallelCorpus valid_set;
  if (cfg.paths.valid_src && cfg.paths.valid_tgt) {
    valid_set = encode(read_corpus(*cfg.paths.valid_src), read_corpus(*cfg.paths.valid_tgt), cfg.paths.valid_features);
  }

  ModelConfig mc = cfg.model;
  mc.src_vocab = std::uint32_t(src_vocab.size());
  mc.tgt_vocab = std::uint32_t(tgt_vocab.size());
  if (fused) mc.d_img = train_set.features.front().dim;
  fs::create_directories(out_dir);
  src_vocab.save(out_dir / "src.vocab");
  tgt_vocab.save(out_dir / "tgt.vocab");

  Model<float> model(mc, ctx.seed());
  TrainConfig tc = cfg.train;
  tc.checkpoint_dir = out_dir / "checkpoints";
  tc.log_path = out_dir / "train.tsv";
  spdlog::info("training {} on {} pairs ({} parameters)", to_string(mc.fusion_mode), train_set.size(),
               model.parameter_count());
  const auto result = train(model, train_set, valid_set, tc);
  for (const auto& v : result.validations) {
    spdlog::debug("step {} val loss {:.4f} bleu {:.2f} acc {:.4f}", v.step, v.loss, v.bleu, v.token_accuracy);
  }
  if (result.checkpoints.empty()) {
    save_checkpoint(model, out_dir / "model.mmtc");
  } else {
    const std::size_t n = std::min(cfg.average_last, result.checkpoints.size());
    const std::vector<fs::path> last(result.checkpoints.end() - std::ptrdiff_t(n), result.checkpoints.end());
    const auto avg = average_checkpoints(last);
    save_checkpoint(avg.config, avg.params, out_dir / "model.mmtc");
  }
  ctx.out << fmt::format("steps={}\nearly_stopped={}\nfinal_loss={:.6f}\nmodel={}\n", result.steps,
                         result.early_stopped ? "true" : "false",
                         result.losses.empty() ? 0.0 : result.losses.back(), (out_dir / "model.mmtc").string());
  return kExitOk;
}

int run_translate(Context& ctx) {
  const auto run = load_run(ctx);
  const auto test = test_corpus(ctx, run, nullptr);
  emit(ctx, joined_lines(decode_words(run.model, test, run.tgt, decode_config(ctx))));
  return kExitOk;
}

int run_evaluate(Context& ctx) {
  const auto hyps = read_corpus(need(ctx.flags.hyp, std::nullopt, "--hyp"));
  const auto refs = references(ctx);
  std::optional<std::vector<SidecarRecord>> sidecar;
  if (const auto path = ctx.flags.sidecar ? ctx.flags.sidecar : ctx.cfg.paths.test_sidecar) sidecar = read_sidecar(*path);
  EvalReport report = evaluate_hypotheses(hyps, refs, sidecar ? &*sidecar : nullptr);
  if (sidecar && ctx.flags.criterion && *ctx.flags.criterion != "both") {
    // Keep only the requested criterion.
    if (parse_criterion(*ctx.flags.criterion) == ProbeCriterion::kRestrict) {
      report.relaxed_accuracy.reset();
    } else {
      report.restrict_accuracy.reset();
    }
  }
  emit(ctx, report.to_key_values());
  return kExitOk;
}

int run_probe(Context& ctx) {
  const auto run = load_run(ctx);
  const auto refs = references(ctx);
  const auto test = test_corpus(ctx, run, &refs);
  const auto sidecar = read_sidecar(need(ctx.flags.sidecar, ctx.cfg.paths.test_sidecar, "--sidecar"));
  const auto hyps = decode_words(run.model, test, run.tgt, decode_config(ctx));
  if (ctx.flags.hyp) {
    std::ofstream f(*ctx.flags.hyp, std::ios::binary | std::ios::trunc);
    f << joined_lines(hyps);
  }
  emit(ctx, evaluate_hypotheses(hyps, refs, &sidecar).to_key_values());
  return kExitOk;
}

int run_congruence(Context& ctx) {
  const auto run = load_run(ctx);
  const auto refs = references(ctx);
  const auto test = test_corpus(ctx, run, &refs);
  emit(ctx, congruence_report(run.model, test, refs, run.tgt, ctx.seed(), decode_config(ctx)).to_key_values());
  return kExitOk;
}

int run_gradcheck(Context& ctx) {
  GradCheckOptions opt;
  opt.seeds = ctx.flags.seeds;
  opt.tolerance = ctx.flags.tolerance;
  const auto results = run_gradient_suite(opt);
  std::size_t failed = 0;
  double worst = 0;
  std::string text;
  for (const auto& r : results) {
    worst = std::max(worst, r.rel_error);
    if (!r.passed) {
      ++failed;
      text += fmt::format("FAIL {} seed={} rel_error={:.3e}\n", r.name, r.seed, r.rel_error);
    }
  }
  text += fmt::format("checks={}\nfailed={}\nworst_rel_error={:.3e}\n", results.size(), failed, worst);
  emit(ctx, text);
  return failed == 0 ? kExitOk : kExitDomainError;
}

int run_dump_attn(Context& ctx) {
  if (!ctx.flags.out) throw UsageError("dump-attn needs --out");
  const auto run = load_run(ctx);
  const auto test = test_corpus(ctx, run, nullptr);
  const std::size_t line = ctx.flags.line.value_or(1);
  if (line == 0 || line > test.size()) {
    throw UsageError(fmt::format("--line {} is outside the {}-line input", line, test.size()));
  }
  if (!test.has_features()) throw ConfigError("dump-attn needs --features");
  dump_attention(run.model, test.sources[line - 1], test.features[line - 1], run.src, *ctx.flags.out);
  return kExitOk;
}

int run_avg_ckpt(Context& ctx) {
  if (!ctx.flags.out) throw UsageError("avg-ckpt needs --out");
  const auto avg = average_checkpoints(ctx.flags.checkpoints);
  save_checkpoint(avg.config, avg.params, *ctx.flags.out);
  return kExitOk;
}

void configure_logging(std::ostream& err) {
  const char* env = std::getenv("MMT_PROBE_LOG");
  const std::string level = env ? env : "info";
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto logger = std::make_shared<spdlog::logger>("mmt", sink);
  logger->set_pattern("[%l] %v");
  if (level == "quiet") {
    logger->set_level(spdlog::level::off);
  } else if (level == "info") {
    logger->set_level(spdlog::level::info);
  } else if (level == "debug") {
    logger->set_level(spdlog::level::debug);
  } else {
    throw UsageError("MMT_PROBE_LOG must be quiet, info or debug, got '" + level + "'");
  }
  spdlog::set_default_logger(logger);
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal translation probing toolkit", "mmt"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags flags;
  app.add_option("--config", flags.config, "Experiment config file (flat INI)")->check(CLI::ExistingFile);
  app.add_option("--seed", flags.seed, "Seed for every random choice");
  app.add_option("--out", flags.out, "Output file or directory");

  std::function<int(Context&)> action;
  auto sub = [&](const char* name, const char* help, int (*fn)(Context&)) {
    auto* s = app.add_subcommand(name, help);
    s->callback([&action, fn] { action = fn; });
    return s;
  };

  auto* mask = sub("mask", "Mask color, character or noun words of a corpus", run_mask);
  mask->add_option("--input", flags.input, "Tokenized corpus, one sentence per line");
  mask->add_option("--lexicon", flags.lexicon, "Mask lexicon TSV");
  mask->add_option("--task", flags.task, "color, character or noun")->check(CLI::IsMember({"color", "character", "noun"}));
  mask->add_option("--k", flags.k, "Noun masking level 1..4");
  mask->add_option("--sidecar", flags.sidecar, "Where to write the alignment sidecar");

  auto* gen = sub("gen-features", "Write synthetic planted-signal features or an incongruent shuffle", run_gen_features);
  gen->add_option("--input", flags.input, "Masked corpus (one record per line)");
  gen->add_option("--sidecar", flags.sidecar, "Sidecar naming the words to plant");
  gen->add_option("--lexicon", flags.lexicon, "Mask lexicon TSV");
  gen->add_option("--regime", flags.regime, "Named patch regime, e.g. vit_224_32");
  gen->add_option("--patches", flags.patches, "Custom regime: rows per record (CLS included)");
  gen->add_option("--dim", flags.dim, "Custom regime: feature dimension");
  gen->add_flag("--cls", flags.cls, "Custom regime: first row is a CLS summary");
  gen->add_option("--sigma", flags.sigma, "Noise level (default 0.5)");
  gen->add_option("--table-seed", flags.table_seed, "Seed of the word embedding table");
  gen->add_option("--id-offset", flags.id_offset, "First image number");
  gen->add_option("--shuffle", flags.shuffle, "Derange the payloads of this feature file instead")
      ->check(CLI::ExistingFile);

  auto* trn = sub("train", "Train a model from the config's [paths], [model] and [optim]", run_train);
  trn->add_option("--fusion-mode", flags.fusion_mode, "text_only, gated or selective_attention");
  trn->add_option("--steps", flags.steps, "Override optim.max_steps");

  auto model_flags = [&](CLI::App* s) {
    s->add_option("--model", flags.model, "Checkpoint (default <out_dir>/model.mmtc)");
    s->add_option("--vocab-dir", flags.vocab_dir, "Directory with src.vocab and tgt.vocab (default: model's)");
    s->add_option("--input", flags.input, "Source sentences");
    s->add_option("--features", flags.features, "Feature file aligned with the input lines");
  };
  auto decode_flags = [&](CLI::App* s) {
    s->add_option("--beam", flags.beam, "Beam width");
    s->add_option("--max-out-len", flags.max_out_len, "Output token limit");
  };

  auto* tr = sub("translate", "Decode source sentences", run_translate);
  model_flags(tr);
  decode_flags(tr);

  auto* ev = sub("evaluate", "Score hypotheses: BLEU and, with a sidecar, probing accuracy", run_evaluate);
  ev->add_option("--hyp", flags.hyp, "Hypotheses, one per line");
  ev->add_option("--ref", flags.ref, "References, one per line");
  ev->add_option("--sidecar", flags.sidecar, "Mask sidecar for probing accuracy");
  ev->add_option("--criterion", flags.criterion, "restrict, relaxed or both")
      ->check(CLI::IsMember({"restrict", "relaxed", "both"}));

  auto* pr = sub("probe", "Decode a masked test set and report BLEU with restrict/relaxed accuracy", run_probe);
  model_flags(pr);
  decode_flags(pr);
  pr->add_option("--ref", flags.ref, "References");
  pr->add_option("--sidecar", flags.sidecar, "Mask sidecar");
  pr->add_option("--hyp", flags.hyp, "Also write the hypotheses here");

  auto* co = sub("congruence", "Compare BLEU with true and deranged image features", run_congruence);
  model_flags(co);
  decode_flags(co);
  co->add_option("--ref", flags.ref, "References");

  auto* gc = sub("gradcheck", "Finite-difference check of every operation and the model", run_gradcheck);
  gc->add_option("--seeds", flags.seeds, "Seeds per check")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", flags.tolerance, "Relative error bound");

  auto* da = sub("dump-attn", "Write one sentence's selective-attention weights as CSV", run_dump_attn);
  model_flags(da);
  da->add_option("--line", flags.line, "1-based input line (default 1)");

  auto* av = sub("avg-ckpt", "Average checkpoints with identical configs", run_avg_ckpt);
  av->add_option("checkpoints", flags.checkpoints, "Checkpoint files")->required()->check(CLI::ExistingFile);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  // The logger writes to `err`, which may not outlive this call.
  const auto previous_logger = spdlog::default_logger();
  struct RestoreLogger {
    std::shared_ptr<spdlog::logger> logger;
    ~RestoreLogger() { spdlog::set_default_logger(logger); }
  } restore{previous_logger};
  try {
    configure_logging(err);
    Context ctx{flags, flags.config ? ExperimentConfig::load(*flags.config) : ExperimentConfig{}, out, err};
    return action(ctx);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\nRun with --help for the available options.\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomainError;
  }
}

}  // namespace mmt::cli
