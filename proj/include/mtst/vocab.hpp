#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mtst {

using TokenId = std::size_t;

// Token <-> id map with four reserved ids at the front.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kReserved = 4;

  Vocab();

  // Every word occurring at least min_freq times across texts, sorted
  // lexicographically so the id assignment does not depend on input order.
  static Vocab build(std::span<const std::string> texts, std::size_t min_freq = 1);

  // One token per line; line i holds id i + kReserved.
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  TokenId add(std::string_view token);
  std::optional<TokenId> find(std::string_view token) const;
  TokenId lookup(std::string_view token) const;  // kUnk when absent
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// Lowercases ASCII and splits on whitespace and ASCII punctuation.
std::vector<std::string> split_words(std::string_view text);

// [BOS, words..., EOS], truncated to max_len while keeping the closing EOS.
std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab, std::size_t max_len);

// Space-joined tokens with reserved ids dropped.
std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab);

}  // namespace mtst
