#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmt/ops.h"

namespace mmt {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;

class Vocab {
 public:
  Vocab();

  // Specials first, then corpus tokens by descending count, ties by token.
  static Vocab build(const std::vector<std::vector<std::string>>& sentences,
                     std::size_t min_count = 1);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  TokenId id(const std::string& token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  std::vector<TokenId> encode(const std::vector<std::string>& tokens) const;
  // Stops at EOS; drops BOS and PAD.
  std::vector<std::string> decode(const std::vector<TokenId>& ids) const;

 private:
  void add(const std::string& token);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

std::vector<std::string> split_tokens(const std::string& line);
std::string join_tokens(const std::vector<std::string>& tokens);

}  // namespace mmt
