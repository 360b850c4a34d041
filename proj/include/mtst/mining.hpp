#pragma once

// Image-pair mining for synthetic triplet corpora, and corpus statistics.
//
// All strategies emit ordered pairs: (A, B) and (B, A) are distinct. A set of
// k images contributes k * (k - 1) pairs.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mtst/records.hpp"

namespace mtst::mining {

enum class PairOrigin { set, category, label };

std::string_view to_string(PairOrigin origin);
std::optional<PairOrigin> parse_origin(std::string_view text);
Provenance provenance_of(PairOrigin origin);

struct PairSpec {
  std::string ref_id;
  std::string target_id;
  PairOrigin origin = PairOrigin::set;

  bool operator==(const PairSpec&) const = default;
};

// All ordered pairs inside each set_id cluster. Records without a set_id are
// ignored. Sets are visited in order of first appearance.
std::vector<PairSpec> mine_set_pairs(std::span<const ImageRecord> corpus);

// Images sharing a category are shuffled with the seed, cut into synthetic
// sets of set_size (the remainder is dropped) and paired as in mine_set_pairs.
std::vector<PairSpec> mine_category_pairs(std::span<const ImageRecord> corpus, std::size_t set_size = 6,
                                          std::uint64_t seed = 0);

// For every label with n images, a uniform sample without replacement of
// min(n(n-1), floor(cap_factor * n)) ordered pairs, unioned over labels with
// duplicates removed. An infinite cap_factor keeps every pair.
std::vector<PairSpec> mine_label_pairs_capped(std::span<const ImageRecord> corpus, double cap_factor = 3.0,
                                              std::uint64_t seed = 0);

inline constexpr double kUncapped = std::numeric_limits<double>::infinity();

// Pairs emitted for a single label of n images.
std::uint64_t label_pair_budget(std::uint64_t n, double cap_factor);

struct CorpusStats {
  std::size_t n_triplets = 0;
  std::size_t n_unique_images = 0;
  double avg_length = 0.0;  // characters (UTF-8 code points) per modifier
  std::size_t n_unique_words = 0;

  bool operator==(const CorpusStats&) const = default;
};

CorpusStats corpus_stats(std::span<const Triplet> triplets);

nlohmann::json to_json(const CorpusStats& stats);
nlohmann::json to_json(const PairSpec& pair);

void save_pairs(const std::filesystem::path& path, std::span<const PairSpec> pairs);
std::vector<PairSpec> load_pairs(const std::filesystem::path& path);

}  // namespace mtst::mining
