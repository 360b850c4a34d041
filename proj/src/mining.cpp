#include "mtst/mining.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "mtst/error.hpp"
#include "mtst/rng.hpp"

namespace mtst::mining {

using nlohmann::json;

std::string_view to_string(PairOrigin origin) {
  switch (origin) {
    case PairOrigin::set:
      return "set";
    case PairOrigin::category:
      return "category";
    case PairOrigin::label:
      return "label";
  }
  return "set";
}

std::optional<PairOrigin> parse_origin(std::string_view text) {
  if (text == "set") return PairOrigin::set;
  if (text == "category") return PairOrigin::category;
  if (text == "label") return PairOrigin::label;
  return std::nullopt;
}

Provenance provenance_of(PairOrigin origin) {
  switch (origin) {
    case PairOrigin::set:
      return Provenance::set;
    case PairOrigin::category:
      return Provenance::category;
    case PairOrigin::label:
      return Provenance::label;
  }
  return Provenance::set;
}

namespace {

void check_unique_ids(std::span<const ImageRecord> corpus) {
  std::unordered_set<std::string_view> seen;
  for (const auto& r : corpus) {
    if (!seen.insert(r.id).second) throw ContractError("duplicate image id '" + r.id + "' in corpus");
  }
}

void emit_all_pairs(std::span<const ImageRecord* const> members, PairOrigin origin, std::vector<PairSpec>& out) {
  for (const ImageRecord* a : members)
    for (const ImageRecord* b : members)
      if (a != b) out.push_back({a->id, b->id, origin});
}

// Groups records by key, keeping groups in order of first appearance.
template <class KeyFn>
std::vector<std::vector<const ImageRecord*>> group_by(std::span<const ImageRecord> corpus, KeyFn key) {
  std::vector<std::vector<const ImageRecord*>> groups;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& r : corpus) {
    const std::optional<std::string>& k = key(r);
    if (!k) continue;
    auto [it, fresh] = index.emplace(*k, groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(&r);
  }
  return groups;
}

}  // namespace

std::vector<PairSpec> mine_set_pairs(std::span<const ImageRecord> corpus) {
  check_unique_ids(corpus);
  std::vector<PairSpec> out;
  for (const auto& members : group_by(corpus, [](const ImageRecord& r) -> const auto& { return r.set_id; })) {
    emit_all_pairs(members, PairOrigin::set, out);
  }
  return out;
}

std::vector<PairSpec> mine_category_pairs(std::span<const ImageRecord> corpus, std::size_t set_size,
                                          std::uint64_t seed) {
  if (set_size < 2) throw ContractError("mine_category_pairs: set_size must be at least 2");
  check_unique_ids(corpus);
  // Categories in sorted order so the seed stream does not depend on corpus order.
  std::map<std::string, std::vector<const ImageRecord*>> by_category;
  for (const auto& r : corpus) {
    if (r.category) by_category[*r.category].push_back(&r);
  }
  Rng rng(seed);
  std::vector<PairSpec> out;
  for (auto& [category, members] : by_category) {
    std::sort(members.begin(), members.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
    rng.shuffle(members);
    for (std::size_t start = 0; start + set_size <= members.size(); start += set_size) {
      emit_all_pairs(std::span(members).subspan(start, set_size), PairOrigin::category, out);
    }
  }
  return out;
}

std::uint64_t label_pair_budget(std::uint64_t n, double cap_factor) {
  if (!(cap_factor > 0.0)) throw ContractError("cap_factor must be positive");
  const std::uint64_t all = n < 2 ? 0 : n * (n - 1);
  if (std::isinf(cap_factor)) return all;
  const double cap = std::floor(cap_factor * static_cast<double>(n));
  return cap >= static_cast<double>(all) ? all : static_cast<std::uint64_t>(cap);
}

std::vector<PairSpec> mine_label_pairs_capped(std::span<const ImageRecord> corpus, double cap_factor,
                                              std::uint64_t seed) {
  check_unique_ids(corpus);
  std::map<std::string, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    for (const auto& l : corpus[i].labels) by_label[l].push_back(i);

  Rng rng(seed);
  std::vector<PairSpec> out;
  std::unordered_set<std::uint64_t> emitted;
  for (const auto& [label, members] : by_label) {
    const std::uint64_t n = members.size();
    const std::uint64_t all = n < 2 ? 0 : n * (n - 1);
    const std::uint64_t take = label_pair_budget(n, cap_factor);
    // Candidate index c enumerates ordered pairs (i, j != i) of this label.
    std::vector<std::uint64_t> picks;
    if (take == all) {
      picks.resize(all);
      for (std::uint64_t c = 0; c < all; ++c) picks[c] = c;
    } else {
      // Floyd's sampling without replacement.
      std::unordered_set<std::uint64_t> chosen;
      for (std::uint64_t j = all - take; j < all; ++j) {
        const std::uint64_t t = rng.below(j + 1);
        chosen.insert(chosen.count(t) ? j : t);
      }
      picks.assign(chosen.begin(), chosen.end());
      std::sort(picks.begin(), picks.end());
    }
    for (std::uint64_t c : picks) {
      const std::uint64_t i = c / (n - 1);
      const std::uint64_t r = c % (n - 1);
      const std::uint64_t j = r < i ? r : r + 1;
      const std::size_t a = members[i], b = members[j];
      if (!emitted.insert((static_cast<std::uint64_t>(a) << 32) | b).second) continue;
      out.push_back({corpus[a].id, corpus[b].id, PairOrigin::label});
    }
  }
  return out;
}

namespace {

std::size_t utf8_length(std::string_view s) {
  std::size_t count = 0;
  for (unsigned char c : s) count += (c & 0xC0) != 0x80;
  return count;
}

}  // namespace

CorpusStats corpus_stats(std::span<const Triplet> triplets) {
  CorpusStats stats;
  stats.n_triplets = triplets.size();
  if (triplets.empty()) return stats;
  std::unordered_set<std::string_view> images;
  std::unordered_set<std::string> words;
  double chars = 0.0;
  for (const auto& t : triplets) {
    images.insert(t.ref_id);
    images.insert(t.target_id);
    chars += static_cast<double>(utf8_length(t.modifier));
    std::string word;
    for (char ch : t.modifier + " ") {
      const auto u = static_cast<unsigned char>(ch);
      if (u < 0x80 && std::isspace(u)) {
        if (!word.empty()) words.insert(std::move(word));
        word.clear();
      } else {
        word.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
      }
    }
  }
  stats.n_unique_images = images.size();
  stats.avg_length = chars / static_cast<double>(triplets.size());
  stats.n_unique_words = words.size();
  return stats;
}

json to_json(const CorpusStats& s) {
  return json{{"n_triplets", s.n_triplets},
              {"n_unique_images", s.n_unique_images},
              {"avg_length", s.avg_length},
              {"n_unique_words", s.n_unique_words}};
}

json to_json(const PairSpec& p) {
  return json{{"ref_id", p.ref_id}, {"target_id", p.target_id}, {"origin", std::string(to_string(p.origin))}};
}

void save_pairs(const std::filesystem::path& path, std::span<const PairSpec> pairs) {
  std::vector<json> rows;
  rows.reserve(pairs.size());
  for (const auto& p : pairs) rows.push_back(to_json(p));
  write_jsonl(path, rows);
}

std::vector<PairSpec> load_pairs(const std::filesystem::path& path) {
  std::vector<PairSpec> out;
  for_each_jsonl(path, [&](const json& row, std::size_t line) {
    auto field = [&](const char* key) {
      auto it = row.find(key);
      if (it == row.end() || !it->is_string()) {
        throw ParseError(path.string(), line, std::string("missing string field '") + key + "'");
      }
      return it->get<std::string>();
    };
    PairSpec p{field("ref_id"), field("target_id"), PairOrigin::set};
    const auto origin = parse_origin(field("origin"));
    if (!origin) throw ParseError(path.string(), line, "unknown origin");
    p.origin = *origin;
    if (p.ref_id == p.target_id) throw ParseError(path.string(), line, "self-pair");
    out.push_back(std::move(p));
  });
  return out;
}

}  // namespace mtst::mining
