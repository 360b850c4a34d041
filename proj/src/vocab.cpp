#include "mtst/vocab.hpp"

#include <cctype>
#include <fstream>
#include <map>

#include "mtst/error.hpp"

namespace mtst {

namespace {
constexpr std::string_view kReservedTokens[] = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

Vocab::Vocab() {
  for (auto t : kReservedTokens) add(t);
}

Vocab Vocab::build(std::span<const std::string> texts, std::size_t min_freq) {
  std::map<std::string, std::size_t> counts;
  for (const auto& text : texts) {
    for (auto& w : split_words(text)) ++counts[std::move(w)];
  }
  Vocab vocab;
  for (const auto& [word, count] : counts) {
    if (count >= min_freq) vocab.add(word);
  }
  return vocab;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocab file " + path.string());
  Vocab vocab;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw ParseError(path.string(), line_no, "empty token");
    if (vocab.find(line)) throw ParseError(path.string(), line_no, "duplicate token '" + line + "'");
    vocab.add(line);
  }
  return vocab;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocab file " + path.string());
  for (std::size_t i = kReserved; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

TokenId Vocab::add(std::string_view token) {
  if (auto existing = find(token)) return *existing;
  const TokenId id = tokens_.size();
  tokens_.emplace_back(token);
  ids_.emplace(tokens_.back(), id);
  return id;
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::lookup(std::string_view token) const { return find(token).value_or(kUnk); }

const std::string& Vocab::token(TokenId id) const {
  if (id >= tokens_.size()) throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 0x80 && (std::isspace(u) || std::ispunct(u))) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 2) throw ContractError("tokenize: max_len must be at least 2");
  std::vector<TokenId> ids{Vocab::kBos};
  for (const auto& w : split_words(text)) {
    if (ids.size() + 1 >= max_len) break;
    ids.push_back(vocab.lookup(w));
  }
  ids.push_back(Vocab::kEos);
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id < Vocab::kReserved) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

}  // namespace mtst
