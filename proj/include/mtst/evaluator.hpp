#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mtst/encoders.hpp"
#include "mtst/losses.hpp"
#include "mtst/ndcore.hpp"

namespace mtst::eval {

// Candidate features keyed by image id. All features share one N x d shape
// and are immutable once added.
class Gallery {
 public:
  Gallery() = default;

  void add(std::string id, nd::Tensor feature);
  // f_t for every image the stack knows, in table order.
  static Gallery encode(const EncoderStack& stack);
  static Gallery encode(const EncoderStack& stack, std::span<const std::string> ids);

  // Embedding file: "MTSE", u32 version, u64 count, u32 N, u32 d, then per
  // image u16 id length, id bytes, N*d float32. Little-endian throughout.
  static Gallery load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  bool contains(std::string_view id) const;
  const std::vector<std::string>& ids() const { return ids_; }
  const nd::Tensor& feature(std::string_view id) const;
  const nd::Tensor& feature_at(std::size_t index) const { return features_.at(index); }
  std::size_t tokens() const { return tokens_; }
  std::size_t width() const { return width_; }

 private:
  std::vector<std::string> ids_;
  std::vector<nd::Tensor> features_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t tokens_ = 0;
  std::size_t width_ = 0;
};

inline constexpr std::uint32_t kEmbeddingVersion = 1;

struct EvalQuery {
  std::string ref_id;
  std::string modifier;
  std::string target_id;
  std::optional<std::vector<std::string>> subset_ids;
  std::optional<std::string> category;
};

std::vector<EvalQuery> load_queries(const std::filesystem::path& path);
void save_queries(const std::filesystem::path& path, std::span<const EvalQuery> queries);
nlohmann::json to_json(const EvalQuery& query);

// f_q for a query, evaluated without recording a graph.
nd::Tensor query_feature(const EvalQuery& query, const EncoderStack& stack);

struct ScoredId {
  std::string id;
  double score = 0.0;
};

// Scores of every candidate against f_q, sorted by descending score with
// ascending id breaking ties. The reference is dropped when exclude is set.
std::vector<ScoredId> score_candidates(const nd::Tensor& f_q, const Gallery& gallery,
                                       std::span<const std::string> candidates, loss::Pooling pooling,
                                       std::string_view exclude = {});

// Whole-gallery ranking with the reference image excluded.
std::vector<std::string> rank_gallery(const EvalQuery& query, const Gallery& gallery, const EncoderStack& stack,
                                      loss::Pooling pooling);

struct Ranking {
  std::vector<std::string> ids;
  std::string target_id;
};

// Fraction of rankings whose target sits in the first K entries; K beyond a
// ranking's length counts the whole ranking.
double recall_at_k(std::span<const Ranking> rankings, std::size_t k);

struct SubsetOptions {
  bool include_reference = false;
};

struct SubsetRecall {
  double value = 0.0;
  std::size_t evaluated = 0;
  std::vector<std::string> skipped;  // one message per query without a usable subset
};

// Recall inside each query's subset_ids. Queries without subset_ids are
// skipped and reported.
SubsetRecall recall_subset_at_k(std::span<const EvalQuery> queries, const Gallery& gallery,
                                const EncoderStack& stack, std::size_t k, loss::Pooling pooling,
                                const SubsetOptions& options = {});

struct EvalReport {
  std::size_t n_queries = 0;
  std::map<std::size_t, double> recall;         // K in {1, 5, 10, 50}
  std::map<std::size_t, double> recall_subset;  // K in {1, 2, 3}; empty without subsets
  std::optional<double> avg_cirr;               // (R@5 + Rsub@1) / 2
  std::map<std::string, std::pair<double, double>> per_category;  // R@10, R@50
  std::optional<double> avg_fiq;                                   // (mean R@10 + mean R@50) / 2

  // avg_cirr when subsets exist, else avg_fiq, else (R@10 + R@50) / 2.
  double headline() const;
};

inline constexpr std::size_t kRecallKs[] = {1, 5, 10, 50};
inline constexpr std::size_t kSubsetKs[] = {1, 2, 3};

EvalReport evaluate(std::span<const EvalQuery> queries, const Gallery& gallery, const EncoderStack& stack,
                    loss::Pooling pooling, const SubsetOptions& options = {});

nlohmann::json to_json(const EvalReport& report);

}  // namespace mtst::eval
