#include "mmt/metrics.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "mmt/errors.h"

namespace mmt {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const Sentence& s, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[Sentence(s.begin() + std::ptrdiff_t(i), s.begin() + std::ptrdiff_t(i + n))];
  return out;
}

bool contains(const Sentence& s, const std::string& w) { return std::find(s.begin(), s.end(), w) != s.end(); }

std::string fixed(double v) { return fmt::format("{:.4f}", v); }

}  // namespace

double bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references) {
  if (hypotheses.empty()) throw ContractError("BLEU of an empty corpus is undefined");
  if (hypotheses.size() != references.size()) {
    throw AlignmentError(std::to_string(hypotheses.size()) + " hypotheses for " + std::to_string(references.size()) +
                         " references");
  }
  std::size_t matched[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    hyp_len += hypotheses[i].size();
    ref_len += references[i].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = ngrams(hypotheses[i], n);
      const auto r = ngrams(references[i], n);
      for (const auto& [g, c] : h) {
        total[n - 1] += c;
        const auto it = r.find(g);
        if (it != r.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  double log_precision = 0;
  for (int n = 0; n < 4; ++n) {
    if (matched[n] == 0) return 0.0;
    log_precision += std::log(double(matched[n]) / double(total[n])) / 4.0;
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - double(ref_len) / double(hyp_len)) : 1.0;
  return 100.0 * bp * std::exp(log_precision);
}

ProbeCriterion parse_criterion(const std::string& s) {
  if (s == "restrict") return ProbeCriterion::kRestrict;
  if (s == "relaxed") return ProbeCriterion::kRelaxed;
  throw ConfigError("unknown criterion '" + s + "' (restrict, relaxed)");
}

ProbeScore probing_accuracy(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                            const std::vector<SidecarRecord>& sidecar, ProbeCriterion criterion) {
  if (hypotheses.size() != references.size()) {
    throw AlignmentError(std::to_string(hypotheses.size()) + " hypotheses for " + std::to_string(references.size()) +
                         " references");
  }
  ProbeScore score;
  for (const auto& item : sidecar) {
    if (item.line_no == 0 || item.line_no > hypotheses.size()) {
      throw AlignmentError("sidecar refers to line " + std::to_string(item.line_no) + " but only " +
                           std::to_string(hypotheses.size()) + " hypotheses exist");
    }
    const auto& hyp = hypotheses[item.line_no - 1];
    const auto& ref = references[item.line_no - 1];
    const std::vector<std::string>* group = nullptr;
    const std::string* ref_form = nullptr;
    for (const auto& tok : ref) {
      for (const auto& g : item.forms) {
        const auto it = std::find(g.begin(), g.end(), tok);
        if (it != g.end()) {
          group = &g;
          ref_form = &*it;
          break;
        }
      }
      if (ref_form) break;
    }
    bool ok = false;
    if (criterion == ProbeCriterion::kRestrict) {
      ok = ref_form && contains(hyp, *ref_form);
    } else if (group) {
      ok = std::any_of(group->begin(), group->end(), [&](const std::string& f) { return contains(hyp, f); });
    } else {
      for (const auto& g : item.forms) {
        ok = ok || std::any_of(g.begin(), g.end(), [&](const std::string& f) { return contains(hyp, f); });
      }
    }
    ++score.total;
    score.correct += ok;
  }
  return score;
}

std::optional<double> EvalReport::delta() const {
  if (!congruent_bleu || !incongruent_bleu) return std::nullopt;
  return *congruent_bleu - *incongruent_bleu;
}

void add_probing(EvalReport& report, const ProbeScore& restrict_score, const ProbeScore& relaxed_score) {
  if (restrict_score.total != relaxed_score.total) {
    throw ContractError("restrict and relaxed scores cover different mask counts");
  }
  if (restrict_score.correct > relaxed_score.correct) {
    throw ContractError("restrict accuracy exceeds relaxed accuracy (" + std::to_string(restrict_score.correct) +
                        " > " + std::to_string(relaxed_score.correct) + ")");
  }
  report.restrict_accuracy = restrict_score.accuracy();
  report.relaxed_accuracy = relaxed_score.accuracy();
  report.scored_masks = restrict_score.total;
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  if (bleu) out << "BLEU: " << fixed(*bleu) << '\n';
  if (restrict_accuracy) {
    out << "Probing accuracy over " << scored_masks << " masks: restrict " << fixed(100 * *restrict_accuracy)
        << "%, relaxed " << fixed(100 * *relaxed_accuracy) << "%\n";
  }
  if (congruent_bleu) {
    out << "Congruent BLEU: " << fixed(*congruent_bleu) << ", incongruent BLEU: " << fixed(*incongruent_bleu)
        << ", delta: " << fixed(*delta()) << '\n';
  }
  return out.str();
}

std::string EvalReport::to_key_values() const {
  std::ostringstream out;
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) out << key << '=' << fmt::format("{:.6f}", *v) << '\n';
  };
  put("bleu", bleu);
  put("restrict", restrict_accuracy);
  put("relaxed", relaxed_accuracy);
  if (restrict_accuracy) out << "scored_masks=" << scored_masks << '\n';
  put("congruent_bleu", congruent_bleu);
  put("incongruent_bleu", incongruent_bleu);
  put("delta", delta());
  return out.str();
}

}  // namespace mmt
