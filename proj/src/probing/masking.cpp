#include "mmt/masking.h"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>

#include "mmt/errors.h"
#include "mmt/vocab.h"

namespace mmt {

namespace {

const char* class_name(WordClass c) {
  switch (c) {
    case WordClass::kColor: return "color";
    case WordClass::kCharacter: return "character";
    case WordClass::kNoun: return "noun";
  }
  return "?";
}

WordClass parse_class(const std::string& s, std::size_t line) {
  if (s == "color") return WordClass::kColor;
  if (s == "character") return WordClass::kCharacter;
  if (s == "noun") return WordClass::kNoun;
  throw IoError("lexicon line " + std::to_string(line) + ": unknown class '" + s + "'");
}

bool valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    if (c < 0x80) extra = 0;
    else if ((c >> 5) == 0x6) extra = 1;
    else if ((c >> 4) == 0xE) extra = 2;
    else if ((c >> 3) == 0x1E) extra = 3;
    else return false;
    if (extra > 0 && i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    }
    i += extra + 1;
  }
  return true;
}

MaskedExample mask_matching(const std::vector<std::string>& tokens, const MaskLexicon& lex, WordClass cls,
                            MaskKind kind) {
  MaskedExample ex{tokens, tokens, {}};
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (lex.find(cls, normalize_word(tokens[i]))) {
      ex.masked[i] = mask_token(kind);
      ex.records.push_back({i, kind, tokens[i]});
    }
  }
  return ex;
}

WordClass class_of(MaskKind kind) {
  switch (kind) {
    case MaskKind::kColor: return WordClass::kColor;
    case MaskKind::kCharacter: return WordClass::kCharacter;
    default: return WordClass::kNoun;
  }
}

}  // namespace

std::string mask_token(MaskKind kind) { return "[MASK_" + mask_code(kind) + "]"; }

std::string mask_code(MaskKind kind) {
  switch (kind) {
    case MaskKind::kColor: return "C";
    case MaskKind::kCharacter: return "P";
    case MaskKind::kNoun: return "N";
    case MaskKind::kNounPlural: return "NS";
  }
  return "?";
}

MaskKind parse_mask_code(const std::string& code) {
  if (code == "C") return MaskKind::kColor;
  if (code == "P") return MaskKind::kCharacter;
  if (code == "N") return MaskKind::kNoun;
  if (code == "NS") return MaskKind::kNounPlural;
  throw ConfigError("unknown mask category '" + code + "'");
}

std::string format_forms(const FormGroups& groups) {
  std::vector<std::string> parts;
  for (const auto& g : groups) parts.push_back(boost::algorithm::join(g, ","));
  return boost::algorithm::join(parts, ";");
}

FormGroups parse_forms(const std::string& text) {
  FormGroups groups;
  std::vector<std::string> parts;
  boost::split(parts, text, boost::is_any_of(";"));
  for (const auto& p : parts) {
    std::vector<std::string> forms;
    boost::split(forms, p, boost::is_any_of(","));
    std::vector<std::string> kept;
    for (auto& f : forms) {
      boost::trim(f);
      if (!f.empty()) kept.push_back(f);
    }
    if (!kept.empty()) groups.push_back(std::move(kept));
  }
  return groups;
}

std::string normalize_word(const std::string& word) { return boost::algorithm::to_lower_copy(word); }

const std::vector<std::string>& MaskLexicon::default_characters() {
  static const std::vector<std::string> words{"man", "woman", "people", "men", "girl", "boy"};
  return words;
}

void MaskLexicon::add(LexiconEntry entry) {
  entry.word = normalize_word(entry.word);
  const auto key = std::make_pair(entry.word_class, entry.word);
  if (index_.count(key)) {
    throw ConfigError(std::string("duplicate ") + class_name(entry.word_class) + " entry '" + entry.word + "'");
  }
  if (entry.forms.empty()) throw ConfigError("lexicon word '" + entry.word + "' has no target forms");
  index_[key] = entries_.size();
  entries_.push_back(std::move(entry));
}

const LexiconEntry* MaskLexicon::find(WordClass cls, const std::string& word) const {
  const auto it = index_.find({cls, word});
  return it == index_.end() ? nullptr : &entries_[it->second];
}

std::vector<std::string> MaskLexicon::all_forms() const {
  std::set<std::string> forms;
  for (const auto& e : entries_) {
    for (const auto& g : e.forms) forms.insert(g.begin(), g.end());
  }
  return {forms.begin(), forms.end()};
}

void MaskLexicon::validate(bool custom_characters) const {
  for (const auto& e : entries_) {
    if (e.word_class == WordClass::kColor) continue;
    if (find(WordClass::kColor, e.word)) {
      throw ConfigError("'" + e.word + "' is listed both as a color and as a " + class_name(e.word_class));
    }
  }
  if (custom_characters) return;
  std::set<std::string> chars;
  for (const auto& e : entries_) {
    if (e.word_class == WordClass::kCharacter) chars.insert(e.word);
  }
  const auto& expected = default_characters();
  if (chars != std::set<std::string>(expected.begin(), expected.end())) {
    throw ConfigError("character entries must be exactly: " + boost::algorithm::join(expected, ", "));
  }
}

MaskLexicon MaskLexicon::parse(std::istream& in, bool custom_characters) {
  MaskLexicon lex;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!valid_utf8(line)) throw IoError("lexicon line " + std::to_string(line_no) + " is not valid UTF-8");
    std::vector<std::string> cols;
    boost::split(cols, line, boost::is_any_of("\t"));
    if (cols.size() != 5) {
      throw IoError("lexicon line " + std::to_string(line_no) + ": expected 5 tab-separated columns, found " +
                    std::to_string(cols.size()));
    }
    LexiconEntry e;
    e.word_class = parse_class(cols[0], line_no);
    e.word = cols[1];
    if (cols[2].size() != 1 || std::string("sp-").find(cols[2][0]) == std::string::npos) {
      throw IoError("lexicon line " + std::to_string(line_no) + ": number tag must be s, p or -");
    }
    e.number = cols[2][0];
    try {
      const long rank = std::stol(cols[3]);
      if (rank < 0) throw std::invalid_argument("negative");
      e.frequency_rank = std::uint32_t(rank);
    } catch (const std::exception&) {
      throw IoError("lexicon line " + std::to_string(line_no) + ": bad frequency rank '" + cols[3] + "'");
    }
    e.forms = parse_forms(cols[4]);
    try {
      lex.add(std::move(e));
    } catch (const ConfigError& err) {
      throw IoError("lexicon line " + std::to_string(line_no) + ": " + err.what());
    }
  }
  lex.validate(custom_characters);
  return lex;
}

MaskLexicon MaskLexicon::load(const std::filesystem::path& path, bool custom_characters) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open lexicon '" + path.string() + "'");
  return parse(in, custom_characters);
}

std::vector<std::string> MaskedExample::restore() const {
  std::vector<std::string> out = masked;
  for (const auto& r : records) out.at(r.position) = r.original;
  return out;
}

MaskedExample mask_color(const std::vector<std::string>& tokens, const MaskLexicon& lex) {
  return mask_matching(tokens, lex, WordClass::kColor, MaskKind::kColor);
}

MaskedExample mask_character(const std::vector<std::string>& tokens, const MaskLexicon& lex) {
  return mask_matching(tokens, lex, WordClass::kCharacter, MaskKind::kCharacter);
}

MaskedExample mask_nouns(const std::vector<std::string>& tokens, const MaskLexicon& lex, int k) {
  if (k < 1 || k > 4) throw ConfigError("noun masking level must be 1..4, got " + std::to_string(k));
  struct Candidate {
    std::uint32_t rank;
    std::size_t position;
    const LexiconEntry* entry;
  };
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (const auto* e = lex.find(WordClass::kNoun, normalize_word(tokens[i]))) cands.push_back({e->frequency_rank, i, e});
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    return a.rank != b.rank ? a.rank < b.rank : a.position < b.position;
  });
  cands.resize(std::min<std::size_t>(cands.size(), std::size_t(k)));
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.position < b.position; });
  MaskedExample ex{tokens, tokens, {}};
  for (const auto& c : cands) {
    const MaskKind kind = c.entry->number == 'p' ? MaskKind::kNounPlural : MaskKind::kNoun;
    ex.masked[c.position] = mask_token(kind);
    ex.records.push_back({c.position, kind, tokens[c.position]});
  }
  return ex;
}

ProbingTask ProbingTask::parse(const std::string& name, int k) {
  if (name == "color") return {WordClass::kColor, 0};
  if (name == "character") return {WordClass::kCharacter, 0};
  if (name == "noun") {
    if (k < 1 || k > 4) throw ConfigError("noun task needs a level k in 1..4");
    return {WordClass::kNoun, k};
  }
  throw ConfigError("unknown probing task '" + name + "' (color, character, noun)");
}

std::string ProbingTask::name() const {
  return word_class == WordClass::kNoun ? "noun" + std::to_string(k) : class_name(word_class);
}

MaskedExample apply_task(const std::vector<std::string>& tokens, const MaskLexicon& lex, const ProbingTask& task) {
  switch (task.word_class) {
    case WordClass::kColor: return mask_color(tokens, lex);
    case WordClass::kCharacter: return mask_character(tokens, lex);
    case WordClass::kNoun: return mask_nouns(tokens, lex, task.k);
  }
  throw ConfigError("unknown probing task");
}

std::size_t ProbingCorpus::altered() const {
  return static_cast<std::size_t>(
      std::count_if(examples.begin(), examples.end(), [](const MaskedExample& e) { return !e.records.empty(); }));
}

std::vector<std::vector<std::string>> read_corpus(std::istream& in, const std::string& name) {
  std::vector<std::vector<std::string>> lines;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!valid_utf8(line)) throw IoError(name + " line " + std::to_string(line_no) + " is not valid UTF-8");
    lines.push_back(split_tokens(line));
  }
  if (in.bad()) throw IoError("read error in " + name + " after line " + std::to_string(line_no));
  return lines;
}

std::vector<std::vector<std::string>> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus '" + path.string() + "'");
  return read_corpus(in, path.string());
}

void write_corpus(const std::vector<std::vector<std::string>>& lines, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& l : lines) out << join_tokens(l) << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

ProbingCorpus build_probing_corpus(const std::vector<std::vector<std::string>>& corpus, const MaskLexicon& lex,
                                   const ProbingTask& task) {
  ProbingCorpus out;
  out.examples.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    MaskedExample ex = apply_task(corpus[i], lex, task);
    for (const auto& r : ex.records) {
      const auto* e = lex.find(class_of(r.kind), normalize_word(r.original));
      out.sidecar.push_back({i + 1, r.position, r.kind, r.original, e->forms});
    }
    out.examples.push_back(std::move(ex));
  }
  return out;
}

void write_masked_corpus(const ProbingCorpus& corpus, const std::filesystem::path& path) {
  std::vector<std::vector<std::string>> lines;
  for (const auto& e : corpus.examples) lines.push_back(e.masked);
  write_corpus(lines, path);
}

void write_sidecar(const std::vector<SidecarRecord>& sidecar, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "line_no\tposition\tcategory\toriginal\ttarget_forms\n";
  for (const auto& r : sidecar) {
    out << r.line_no << '\t' << r.position << '\t' << mask_code(r.kind) << '\t' << r.original << '\t'
        << format_forms(r.forms) << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<SidecarRecord> read_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open sidecar '" + path.string() + "'");
  std::vector<SidecarRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && boost::starts_with(line, "line_no\t")) continue;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    boost::split(cols, line, boost::is_any_of("\t"));
    if (cols.size() != 5) throw IoError("sidecar line " + std::to_string(line_no) + ": expected 5 columns");
    try {
      out.push_back({std::stoul(cols[0]), std::stoul(cols[1]), parse_mask_code(cols[2]), cols[3], parse_forms(cols[4])});
    } catch (const std::exception& e) {
      throw IoError("sidecar line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mmt
