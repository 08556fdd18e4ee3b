#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mmt/masking.h"

namespace mmt {

using Sentence = std::vector<std::string>;

// Corpus BLEU-4 in [0, 100], single reference, no smoothing: any n-gram
// order with zero matches gives 0.
double bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references);

enum class ProbeCriterion { kRestrict, kRelaxed };
ProbeCriterion parse_criterion(const std::string& s);

struct ProbeScore {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? double(correct) / double(total) : 0.0; }
};

// Micro-averaged over sidecar items. The reference form of an item is the
// leftmost reference token that is one of its target forms. Restrict needs
// that exact form in the hypothesis; relaxed accepts any form of its lemma
// group (any form of the word when the reference has none).
ProbeScore probing_accuracy(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                            const std::vector<SidecarRecord>& sidecar, ProbeCriterion criterion);

struct EvalReport {
  std::optional<double> bleu;
  std::optional<double> restrict_accuracy;
  std::optional<double> relaxed_accuracy;
  std::size_t scored_masks = 0;
  std::optional<double> congruent_bleu;
  std::optional<double> incongruent_bleu;

  std::optional<double> delta() const;
  // Human-readable summary.
  std::string to_text() const;
  // One key=value pair per line, fixed key order.
  std::string to_key_values() const;
};

// Fills the probing fields of `report`; throws ContractError if restrict
// ever exceeds relaxed.
void add_probing(EvalReport& report, const ProbeScore& restrict_score, const ProbeScore& relaxed_score);

}  // namespace mmt
