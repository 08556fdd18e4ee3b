#include "mmt/synthetic.h"

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include <fmt/format.h>

#include "mmt/errors.h"

namespace mmt {

namespace {

enum Gender { kMasc, kFem, kNeut };

struct Noun {
  const char* en;
  const char* en_plural;  // null when only the singular occurs
  const char* de;
  const char* de_plural;
  Gender gender;
};

// Categories are kept apart so that the slot, but not the word, is
// predictable from context.
const Noun kAnimals[] = {
    {"dog", "dogs", "hund", "hunde", kMasc},       {"cat", "cats", "katze", "katzen", kFem},
    {"horse", "horses", "pferd", "pferde", kNeut}, {"bird", "birds", "vogel", "vögel", kMasc},
    {"cow", "cows", "kuh", "kühe", kFem},          {"goat", "goats", "ziege", "ziegen", kFem},
    {"sheep", nullptr, "schaf", "schafe", kNeut},  {"duck", "ducks", "ente", "enten", kFem},
    {"bear", "bears", "bär", "bären", kMasc},      {"pig", "pigs", "schwein", "schweine", kNeut},
};
const Noun kClothing[] = {
    {"shirt", nullptr, "hemd", "hemden", kNeut},     {"hat", nullptr, "hut", "hüte", kMasc},
    {"jacket", nullptr, "jacke", "jacken", kFem},    {"dress", nullptr, "kleid", "kleider", kNeut},
    {"suit", nullptr, "anzug", "anzüge", kMasc},     {"coat", nullptr, "mantel", "mäntel", kMasc},
    {"skirt", nullptr, "rock", "röcke", kMasc},      {"helmet", nullptr, "helm", "helme", kMasc},
    {"scarf", nullptr, "schal", "schals", kMasc},    {"apron", nullptr, "schürze", "schürzen", kFem},
};
const Noun kVehicles[] = {
    {"car", nullptr, "auto", "autos", kNeut},          {"bike", nullptr, "fahrrad", "fahrräder", kNeut},
    {"bus", nullptr, "bus", "busse", kMasc},           {"boat", nullptr, "boot", "boote", kNeut},
    {"truck", nullptr, "lastwagen", "lastwagen", kMasc}, {"train", nullptr, "zug", "züge", kMasc},
    {"motorcycle", nullptr, "motorrad", "motorräder", kNeut}, {"tractor", nullptr, "traktor", "traktoren", kMasc},
    {"cart", nullptr, "wagen", "wagen", kMasc},        {"scooter", nullptr, "roller", "roller", kMasc},
};
const Noun kPlaces[] = {
    {"street", nullptr, "straße", "straßen", kFem}, {"beach", nullptr, "strand", "strände", kMasc},
    {"park", nullptr, "park", "parks", kMasc},      {"field", nullptr, "feld", "felder", kNeut},
    {"bridge", nullptr, "brücke", "brücken", kFem}, {"hill", nullptr, "hügel", "hügel", kMasc},
    {"lawn", nullptr, "rasen", "rasen", kMasc},     {"square", nullptr, "platz", "plätze", kMasc},
    {"pier", nullptr, "steg", "stege", kMasc},      {"meadow", nullptr, "wiese", "wiesen", kFem},
};

struct Color {
  const char* en;
  const char* stem;
};
const Color kColors[] = {{"red", "rot"},     {"green", "grün"},   {"blue", "blau"},  {"black", "schwarz"},
                         {"white", "weiß"},  {"yellow", "gelb"},  {"brown", "braun"}, {"gray", "grau"}};

struct Character {
  const char* en;
  std::vector<const char*> de;  // synonyms, picked at random
  Gender gender;
  bool plural;
};
const Character kCharacters[] = {
    {"man", {"mann"}, kMasc, false},         {"woman", {"frau"}, kFem, false},
    {"girl", {"mädchen"}, kNeut, false},     {"boy", {"junge"}, kMasc, false},
    {"people", {"leute", "menschen"}, kMasc, true}, {"men", {"männer"}, kMasc, true},
};

struct Verb {
  const char* en3;   // third person singular
  const char* enpl;  // plural
  const char* de3;
  const char* depl;
};
const Verb kTransitive[] = {{"pushes", "push", "schiebt", "schieben"},
                            {"washes", "wash", "wäscht", "waschen"},
                            {"repairs", "repair", "repariert", "reparieren"},
                            {"paints", "paint", "bemalt", "bemalen"}};
const Verb kIntransitive[] = {{"sleeps", "sleep", "schläft", "schlafen"},
                              {"runs", "run", "läuft", "laufen"},
                              {"waits", "wait", "wartet", "warten"},
                              {"plays", "play", "spielt", "spielen"}};
const Verb kWatch[] = {{"watches", "watch", "beobachtet", "beobachten"}, {"feeds", "feed", "füttert", "füttern"}};

const char* indef(Gender g, char kase) {
  switch (kase) {
    case 'n': return g == kFem ? "eine" : "ein";
    case 'a': return g == kMasc ? "einen" : g == kFem ? "eine" : "ein";
    default: return g == kFem ? "einer" : "einem";
  }
}

const char* def(Gender g, char kase) {
  switch (kase) {
    case 'n': return g == kMasc ? "der" : g == kFem ? "die" : "das";
    case 'a': return g == kMasc ? "den" : g == kFem ? "die" : "das";
    default: return g == kFem ? "der" : "dem";
  }
}

// Adjective ending after an indefinite article.
std::string strong(const char* stem, Gender g, char kase) {
  std::string s(stem);
  if (kase == 'd') return s + "en";
  if (kase == 'a' && g == kMasc) return s + "en";
  return s + (g == kMasc ? "er" : g == kFem ? "e" : "es");
}

std::string color_forms(const char* stem) {
  const std::string s(stem);
  return s + "," + s + "e," + s + "er," + s + "es," + s + "en," + s + "em";
}

template <typename T, std::size_t N>
const T& pick(const T (&arr)[N], std::mt19937_64& rng) {
  return arr[std::uniform_int_distribution<std::size_t>(0, N - 1)(rng)];
}

const Noun& pick_plural_animal(std::mt19937_64& rng) {
  for (;;) {
    const Noun& n = pick(kAnimals, rng);
    if (n.en_plural) return n;
  }
}

void add(Sentence& s, std::initializer_list<std::string> words) { s.insert(s.end(), words.begin(), words.end()); }

}  // namespace

SyntheticCorpus make_synthetic_corpus(std::size_t pairs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SyntheticCorpus out;
  for (std::size_t i = 0; i < pairs; ++i) {
    Sentence en, de;
    const int tmpl = std::uniform_int_distribution<int>(0, 4)(rng);
    switch (tmpl) {
      case 0: {  // a man in a red suit pushes a car
        Character c = kCharacters[std::uniform_int_distribution<int>(0, 3)(rng)];
        const Color& col = pick(kColors, rng);
        const Noun& cl = pick(kClothing, rng);
        const Verb& v = pick(kTransitive, rng);
        const Noun& ve = pick(kVehicles, rng);
        add(en, {"a", c.en, "in", "a", col.en, cl.en, v.en3, "a", ve.en});
        add(de, {indef(c.gender, 'n'), c.de[0], "in", indef(cl.gender, 'd'), strong(col.stem, cl.gender, 'd'), cl.de,
                 v.de3, indef(ve.gender, 'a'), ve.de});
        break;
      }
      case 1: {  // a brown dog sleeps on the beach
        const Color& col = pick(kColors, rng);
        const Noun& a = pick(kAnimals, rng);
        const Verb& v = pick(kIntransitive, rng);
        const Noun& p = pick(kPlaces, rng);
        add(en, {"a", col.en, a.en, v.en3, "on", "the", p.en});
        add(de, {indef(a.gender, 'n'), strong(col.stem, a.gender, 'n'), a.de, v.de3, "auf", def(p.gender, 'd'), p.de});
        break;
      }
      case 2: {  // two dogs play near a blue bus
        const Noun& a = pick_plural_animal(rng);
        const Verb& v = pick(kIntransitive, rng);
        const Color& col = pick(kColors, rng);
        const Noun& ve = pick(kVehicles, rng);
        add(en, {"two", a.en_plural, v.enpl, "near", "a", col.en, ve.en});
        add(de, {"zwei", a.de_plural, v.depl, "neben", indef(ve.gender, 'd'), strong(col.stem, ve.gender, 'd'), ve.de});
        break;
      }
      case 3: {  // a woman wearing a green hat watches the horse
        Character c = kCharacters[std::uniform_int_distribution<int>(0, 3)(rng)];
        const Color& col = pick(kColors, rng);
        const Noun& cl = pick(kClothing, rng);
        const Verb& v = pick(kWatch, rng);
        const Noun& a = pick(kAnimals, rng);
        add(en, {"a", c.en, "wearing", "a", col.en, cl.en, v.en3, "the", a.en});
        add(de, {indef(c.gender, 'n'), c.de[0], "mit", indef(cl.gender, 'd'), strong(col.stem, cl.gender, 'd'), cl.de,
                 v.de3, def(a.gender, 'a'), a.de});
        break;
      }
      default: {  // two men repair a truck on the street
        const Character& c = kCharacters[std::uniform_int_distribution<int>(4, 5)(rng)];
        const char* who = c.de[std::uniform_int_distribution<std::size_t>(0, c.de.size() - 1)(rng)];
        const Verb& v = pick(kTransitive, rng);
        const Noun& ve = pick(kVehicles, rng);
        const Noun& p = pick(kPlaces, rng);
        add(en, {"two", c.en, v.enpl, "a", ve.en, "on", "the", p.en});
        add(de, {"zwei", who, v.depl, indef(ve.gender, 'a'), ve.de, "auf", def(p.gender, 'd'), p.de});
        break;
      }
    }
    out.source.push_back(std::move(en));
    out.target.push_back(std::move(de));
  }
  return out;
}

MaskLexicon synthetic_lexicon(const std::vector<Sentence>& counts_from) {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : counts_from) {
    for (const auto& w : s) ++counts[w];
  }
  struct NounRow {
    std::string word;
    char number;
    std::string forms;
  };
  std::vector<NounRow> nouns;
  for (const auto* cat : {&kAnimals, &kClothing, &kVehicles, &kPlaces}) {
    for (const Noun& n : *cat) {
      nouns.push_back({n.en, 's', std::string(n.de) + "," + n.de_plural});
      if (n.en_plural) nouns.push_back({n.en_plural, 'p', std::string(n.de_plural) + "," + n.de});
    }
  }
  std::sort(nouns.begin(), nouns.end(), [&](const NounRow& a, const NounRow& b) {
    const auto ca = counts[a.word], cb = counts[b.word];
    return ca != cb ? ca > cb : a.word < b.word;
  });
  MaskLexicon lex;
  for (const auto& c : kColors) {
    lex.add({WordClass::kColor, c.en, '-', 0, parse_forms(color_forms(c.stem))});
  }
  for (const auto& c : kCharacters) {
    FormGroups forms{{}};
    for (const char* f : c.de) forms[0].push_back(f);
    lex.add({WordClass::kCharacter, c.en, c.plural ? 'p' : 's', 0, forms});
  }
  std::uint32_t rank = 0;
  for (const auto& n : nouns) lex.add({WordClass::kNoun, n.word, n.number, ++rank, parse_forms(n.forms)});
  return lex;
}

std::vector<std::string> plantable_words(const MaskLexicon& lex) {
  std::set<std::string> words;
  for (const auto& e : lex.entries()) words.insert(e.word);
  return {words.begin(), words.end()};
}

std::vector<PatchFeatures> plant_features(const std::vector<MaskedExample>& examples, const SyntheticSpec& spec,
                                          std::size_t id_offset) {
  std::vector<std::string> ids;
  std::vector<std::vector<std::string>> planted;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    ids.push_back(fmt::format("img{:06d}", id_offset + i));
    std::vector<std::string> words;
    for (const auto& r : examples[i].records) words.push_back(normalize_word(r.original));
    planted.push_back(std::move(words));
  }
  return generate_synthetic(ids, planted, spec);
}

}  // namespace mmt
