// Regenerates the checked-in fixtures under data/:
//   fixtures/bleu50.{hyp,ref}  50-line BLEU fixture (perturbed synthetic captions)
//   synth/                     small synthetic corpus, lexicon and demo config
// Usage: make_fixtures <data dir>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include <fmt/format.h>

#include "mmt/errors.h"
#include "mmt/masking.h"
#include "mmt/synthetic.h"

namespace fs = std::filesystem;
using namespace mmt;

namespace {

std::vector<Sentence> perturb(const std::vector<Sentence>& refs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> pool;
  for (const auto& r : refs) pool.insert(pool.end(), r.begin(), r.end());
  std::vector<Sentence> out;
  for (const auto& r : refs) {
    Sentence h = r;
    switch (rng() % 5) {
      case 0:  // untouched
        break;
      case 1:
        h[rng() % h.size()] = pool[rng() % pool.size()];
        break;
      case 2:
        h.erase(h.begin() + std::ptrdiff_t(rng() % h.size()));
        if (h.size() > 3) h.pop_back();
        break;
      case 3: {
        const std::size_t i = rng() % (h.size() - 1);
        std::swap(h[i], h[i + 1]);
        h.push_back(pool[rng() % pool.size()]);
        break;
      }
      default:
        for (auto& w : h) {
          if (rng() % 3 == 0) w = pool[rng() % pool.size()];
        }
    }
    out.push_back(h);
  }
  return out;
}

const char* class_name(WordClass c) {
  switch (c) {
    case WordClass::kColor:
      return "color";
    case WordClass::kCharacter:
      return "character";
    default:
      return "noun";
  }
}

void write_lexicon(const MaskLexicon& lex, const fs::path& path) {
  std::ofstream f(path, std::ios::binary);
  f << "# class\tword\tnumber\trank\ttarget forms (lemma groups separated by ;)\n";
  for (const auto& e : lex.entries()) {
    f << fmt::format("{}\t{}\t{}\t{}\t{}\n", class_name(e.word_class), e.word, e.number, e.frequency_rank,
                     format_forms(e.forms));
  }
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_fixtures <data dir>\n";
    return 2;
  }
  try {
    const fs::path data = argv[1];
    fs::create_directories(data / "fixtures");
    const auto bleu_refs = make_synthetic_corpus(50, 4242).target;
    write_corpus(bleu_refs, data / "fixtures" / "bleu50.ref");
    write_corpus(perturb(bleu_refs, 4243), data / "fixtures" / "bleu50.hyp");

    const fs::path synth = data / "synth";
    fs::create_directories(synth);
    const auto train = make_synthetic_corpus(3000, 11), valid = make_synthetic_corpus(200, 12),
               test = make_synthetic_corpus(300, 13);
    write_corpus(train.source, synth / "train.en");
    write_corpus(train.target, synth / "train.de");
    write_corpus(valid.source, synth / "valid.en");
    write_corpus(valid.target, synth / "valid.de");
    write_corpus(test.source, synth / "test.en");
    write_corpus(test.target, synth / "test.de");
    write_lexicon(synthetic_lexicon(train.source), synth / "lexicon.tsv");
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
