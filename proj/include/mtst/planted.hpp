#pragma once

// Synthetic corpus with known structure for end-to-end runs.
//
// Image (g, v) carries labels {"group<g>", "style<v>"} and set_id "set<g>".
// Every ordered pair inside a group becomes a triplet whose modifier is the
// template oracle's description; the reverse description is cached. A
// seeded shuffle moves val and test pairs out of the training list. Each
// held-out query's subset is its group without the reference, so exactly one
// gallery image other than the reference carries both the kept and the added
// label.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "mtst/evaluator.hpp"
#include "mtst/records.hpp"

namespace mtst::planted {

struct PlantedOptions {
  std::size_t groups = 20;
  std::size_t variants = 10;
  std::size_t val_queries = 50;
  std::size_t test_queries = 50;
  std::uint64_t seed = 7;
};

struct PlantedData {
  std::vector<ImageRecord> corpus;
  std::vector<Triplet> train;
  std::vector<eval::EvalQuery> val;
  std::vector<eval::EvalQuery> test;
};

PlantedData make_planted(const PlantedOptions& options = {});

// corpus.jsonl, triplets.jsonl, val.jsonl and test.jsonl under dir.
void write_planted(const PlantedData& data, const std::filesystem::path& dir);

}  // namespace mtst::planted
