#include "mmt/vocab.h"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "mmt/errors.h"

namespace mmt {

namespace {
const char* const kSpecials[] = {"<pad>", "<s>", "</s>", "<unk>"};
}

Vocab::Vocab() {
  for (const char* s : kSpecials) add(s);
}

void Vocab::add(const std::string& token) {
  if (index_.count(token)) return;
  index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(token);
}

Vocab Vocab::build(const std::vector<std::vector<std::string>>& sentences, std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : sentences) {
    for (const auto& t : s) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> order(counts.begin(), counts.end());
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [tok, n] : order) {
    if (n >= min_count) v.add(tok);
  }
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  Vocab v;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no <= std::size(kSpecials)) {
      if (line != kSpecials[line_no - 1]) {
        throw IoError(path.string() + ":" + std::to_string(line_no) + ": expected special token " +
                      kSpecials[line_no - 1]);
      }
      continue;
    }
    if (line.empty()) throw IoError(path.string() + ":" + std::to_string(line_no) + ": empty token");
    v.add(line);
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

TokenId Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocab::decode(const std::vector<TokenId>& ids) const {
  std::vector<std::string> out;
  for (TokenId id : ids) {
    if (id == kEos) break;
    if (id == kBos || id == kPad) continue;
    out.push_back(token(id));
  }
  return out;
}

std::vector<std::string> split_tokens(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string t;
  while (is >> t) out.push_back(t);
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace mmt
