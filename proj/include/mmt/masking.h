#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace mmt {

enum class WordClass { kColor, kCharacter, kNoun };
// Mask symbol written in place of a word.
enum class MaskKind { kColor, kCharacter, kNoun, kNounPlural };

std::string mask_token(MaskKind kind);   // "[MASK_C]" ...
std::string mask_code(MaskKind kind);    // "C", "P", "N", "NS"
MaskKind parse_mask_code(const std::string& code);

// Target-side forms of one source word; each inner list is one lemma group.
using FormGroups = std::vector<std::vector<std::string>>;
std::string format_forms(const FormGroups& groups);  // "a,b;c"
FormGroups parse_forms(const std::string& text);

struct LexiconEntry {
  WordClass word_class = WordClass::kNoun;
  std::string word;
  char number = '-';  // 's', 'p' or '-'
  std::uint32_t frequency_rank = 0;  // 1 = most frequent
  FormGroups forms;
};

// Color, character and noun inventories. A word may be both a character and
// a noun; colors are disjoint from both.
class MaskLexicon {
 public:
  static const std::vector<std::string>& default_characters();

  // TSV rows: class, source_word, number_tag, frequency_rank, target_forms.
  // Blank lines and lines starting with '#' are skipped.
  static MaskLexicon parse(std::istream& in, bool custom_characters = false);
  static MaskLexicon load(const std::filesystem::path& path, bool custom_characters = false);
  void add(LexiconEntry entry);

  const LexiconEntry* find(WordClass cls, const std::string& word) const;
  const std::vector<LexiconEntry>& entries() const { return entries_; }
  // Every target form of every entry, for scoring.
  std::vector<std::string> all_forms() const;

 private:
  void validate(bool custom_characters) const;

  std::vector<LexiconEntry> entries_;
  std::map<std::pair<WordClass, std::string>, std::size_t> index_;
};

struct MaskRecord {
  std::size_t position = 0;
  MaskKind kind = MaskKind::kColor;
  std::string original;
  bool operator==(const MaskRecord&) const = default;
};

struct MaskedExample {
  std::vector<std::string> original;
  std::vector<std::string> masked;
  std::vector<MaskRecord> records;  // sorted by position
  // Original sentence rebuilt from the masked one and the records.
  std::vector<std::string> restore() const;
};

std::string normalize_word(const std::string& word);

MaskedExample mask_color(const std::vector<std::string>& tokens, const MaskLexicon& lex);
MaskedExample mask_character(const std::vector<std::string>& tokens, const MaskLexicon& lex);
// Masks the min(k, candidates) most frequent lexicon nouns; ties go to the
// earlier position. Plural-tagged nouns get MASK_NS.
MaskedExample mask_nouns(const std::vector<std::string>& tokens, const MaskLexicon& lex, int k);

struct ProbingTask {
  WordClass word_class = WordClass::kColor;
  int k = 0;  // noun level 1..4

  // "color", "character", or "noun" with k in 1..4.
  static ProbingTask parse(const std::string& name, int k = 0);
  std::string name() const;
};

MaskedExample apply_task(const std::vector<std::string>& tokens, const MaskLexicon& lex, const ProbingTask& task);

// One row of the alignment sidecar.
struct SidecarRecord {
  std::size_t line_no = 0;  // 1-based
  std::size_t position = 0;
  MaskKind kind = MaskKind::kColor;
  std::string original;
  FormGroups forms;
  bool operator==(const SidecarRecord&) const = default;
};

struct ProbingCorpus {
  std::vector<MaskedExample> examples;
  std::vector<SidecarRecord> sidecar;
  std::size_t altered() const;
};

// Reads one tokenized sentence per line. Throws IoError naming the line for
// undecodable input.
std::vector<std::vector<std::string>> read_corpus(const std::filesystem::path& path);
std::vector<std::vector<std::string>> read_corpus(std::istream& in, const std::string& name = "<stream>");
void write_corpus(const std::vector<std::vector<std::string>>& lines, const std::filesystem::path& path);

ProbingCorpus build_probing_corpus(const std::vector<std::vector<std::string>>& corpus, const MaskLexicon& lex,
                                   const ProbingTask& task);
void write_masked_corpus(const ProbingCorpus& corpus, const std::filesystem::path& path);
void write_sidecar(const std::vector<SidecarRecord>& sidecar, const std::filesystem::path& path);
std::vector<SidecarRecord> read_sidecar(const std::filesystem::path& path);

}  // namespace mmt
