#include "config.h"

#include <fstream>
#include <functional>
#include <map>

#include <boost/lexical_cast.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mmt/errors.h"

namespace mmt::cli {

namespace {

namespace fs = std::filesystem;
using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

template <typename T>
T number(const std::string& key, const std::string& value) {
  try {
    return boost::lexical_cast<T>(value);
  } catch (const boost::bad_lexical_cast&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  }
}

bool boolean(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
}

struct Keys {
  std::map<std::string, Setter> setters;
  fs::path base;

  template <typename T, typename Field>
  void num(const std::string& key, Field field) {
    setters[key] = [key, field](ExperimentConfig& c, const std::string& v) { field(c) = number<T>(key, v); };
  }
  void path(const std::string& key, std::optional<fs::path> PathsBlock::*member) {
    setters[key] = [base = base, member](ExperimentConfig& c, const std::string& v) {
      fs::path p(v);
      c.paths.*member = p.is_absolute() || base.empty() ? p : base / p;
    };
  }
};

Keys known_keys(const fs::path& base) {
  Keys k;
  k.base = base;
  k.path("paths.train_src", &PathsBlock::train_src);
  k.path("paths.train_tgt", &PathsBlock::train_tgt);
  k.path("paths.valid_src", &PathsBlock::valid_src);
  k.path("paths.valid_tgt", &PathsBlock::valid_tgt);
  k.path("paths.test_src", &PathsBlock::test_src);
  k.path("paths.test_tgt", &PathsBlock::test_tgt);
  k.path("paths.train_features", &PathsBlock::train_features);
  k.path("paths.valid_features", &PathsBlock::valid_features);
  k.path("paths.test_features", &PathsBlock::test_features);
  k.path("paths.lexicon", &PathsBlock::lexicon);
  k.path("paths.test_sidecar", &PathsBlock::test_sidecar);
  k.path("paths.out_dir", &PathsBlock::out_dir);

  k.num<std::uint32_t>("model.enc_layers", [](ExperimentConfig& c) -> auto& { return c.model.enc_layers; });
  k.num<std::uint32_t>("model.dec_layers", [](ExperimentConfig& c) -> auto& { return c.model.dec_layers; });
  k.num<std::uint32_t>("model.d_model", [](ExperimentConfig& c) -> auto& { return c.model.d_model; });
  k.num<std::uint32_t>("model.d_ffn", [](ExperimentConfig& c) -> auto& { return c.model.d_ffn; });
  k.num<std::uint32_t>("model.heads", [](ExperimentConfig& c) -> auto& { return c.model.heads; });
  k.num<double>("model.dropout", [](ExperimentConfig& c) -> auto& { return c.model.dropout; });
  k.num<double>("model.label_smoothing", [](ExperimentConfig& c) -> auto& { return c.model.label_smoothing; });
  k.num<std::uint32_t>("model.d_img", [](ExperimentConfig& c) -> auto& { return c.model.d_img; });
  k.num<std::uint32_t>("model.max_len", [](ExperimentConfig& c) -> auto& { return c.model.max_len; });
  k.setters["model.fusion_mode"] = [](ExperimentConfig& c, const std::string& v) {
    c.model.fusion_mode = parse_fusion_mode(v);
  };
  k.setters["model.raw_qkv"] = [](ExperimentConfig& c, const std::string& v) {
    c.model.raw_qkv = boolean("model.raw_qkv", v);
  };
  k.setters["model.gate"] = [](ExperimentConfig& c, const std::string& v) {
    if (v == "channel") {
      c.model.gate = GateGranularity::kPerChannel;
    } else if (v == "position") {
      c.model.gate = GateGranularity::kPerPosition;
    } else {
      throw ConfigError("config key 'model.gate': expected channel or position, got '" + v + "'");
    }
  };

  k.num<double>("optim.peak_lr", [](ExperimentConfig& c) -> auto& { return c.train.schedule.peak_lr; });
  k.num<double>("optim.floor_lr", [](ExperimentConfig& c) -> auto& { return c.train.schedule.floor_lr; });
  k.num<std::int64_t>("optim.warmup", [](ExperimentConfig& c) -> auto& { return c.train.schedule.warmup; });
  k.num<double>("optim.beta1", [](ExperimentConfig& c) -> auto& { return c.train.adam.beta1; });
  k.num<double>("optim.beta2", [](ExperimentConfig& c) -> auto& { return c.train.adam.beta2; });
  k.num<double>("optim.eps", [](ExperimentConfig& c) -> auto& { return c.train.adam.eps; });
  k.num<std::size_t>("optim.batch_tokens", [](ExperimentConfig& c) -> auto& { return c.train.batch_tokens; });
  k.num<std::int64_t>("optim.max_steps", [](ExperimentConfig& c) -> auto& { return c.train.max_steps; });
  k.num<std::int64_t>("optim.validate_every", [](ExperimentConfig& c) -> auto& { return c.train.validate_every; });
  k.num<int>("optim.patience", [](ExperimentConfig& c) -> auto& { return c.train.patience; });
  k.num<std::size_t>("optim.val_decode_len", [](ExperimentConfig& c) -> auto& { return c.train.val_decode_len; });
  k.num<double>("optim.stop_accuracy", [](ExperimentConfig& c) -> auto& { return c.train.stop_accuracy; });
  k.num<std::size_t>("optim.average_last", [](ExperimentConfig& c) -> auto& { return c.average_last; });

  k.num<int>("decode.beam", [](ExperimentConfig& c) -> auto& { return c.decode.beam; });
  k.num<std::size_t>("decode.max_out_len", [](ExperimentConfig& c) -> auto& { return c.decode.max_out_len; });

  k.setters["probing.task"] = [](ExperimentConfig& c, const std::string& v) { c.probing.task = v; };
  k.num<int>("probing.k", [](ExperimentConfig& c) -> auto& { return c.probing.k; });
  k.setters["probing.custom_characters"] = [](ExperimentConfig& c, const std::string& v) {
    c.probing.custom_characters = boolean("probing.custom_characters", v);
  };

  k.num<std::uint64_t>("run.seed", [](ExperimentConfig& c) -> auto& { return c.seed; });
  return k;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(std::istream& in, const std::string& name, const fs::path& base_dir) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(name + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  auto keys = known_keys(base_dir);
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError(name + ": key '" + section + "' must sit inside a [section]");
    }
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const auto it = keys.setters.find(full);
      if (it == keys.setters.end()) throw ConfigError(name + ": unknown config key '" + full + "'");
      it->second(cfg, value.data());
    }
  }
  cfg.train.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  auto cfg = parse(in, path.string(), path.parent_path());
  const PathsBlock& p = cfg.paths;
  for (const auto* input : {&p.train_src, &p.train_tgt, &p.valid_src, &p.valid_tgt, &p.test_src, &p.test_tgt,
                            &p.train_features, &p.valid_features, &p.test_features, &p.lexicon, &p.test_sidecar}) {
    if (*input && !fs::exists(**input)) {
      throw ConfigError(path.string() + ": referenced path '" + (*input)->string() + "' does not exist");
    }
  }
  return cfg;
}

void ExperimentConfig::validate() const {
  ModelConfig m = model;
  m.src_vocab = m.tgt_vocab = 5;  // real sizes are known only after reading the corpus
  m.validate();
  decode.validate();
  if (train.max_steps <= 0) throw ConfigError("optim.max_steps must be positive");
  if (train.batch_tokens == 0) throw ConfigError("optim.batch_tokens must be positive");
  if (train.validate_every <= 0) throw ConfigError("optim.validate_every must be positive");
  if (train.patience <= 0) throw ConfigError("optim.patience must be positive");
  if (train.schedule.warmup < 0) throw ConfigError("optim.warmup must be non-negative");
  if (!(train.schedule.peak_lr > 0)) throw ConfigError("optim.peak_lr must be positive");
  if (average_last == 0) throw ConfigError("optim.average_last must be positive");
  ProbingTask::parse(probing.task, probing.task == "noun" ? probing.k : 0);
}

}  // namespace mmt::cli
