#include "mtst/evaluator.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mtst/binary_io.hpp"
#include "mtst/error.hpp"

namespace mtst::eval {

using nd::Tensor;
using nlohmann::json;

// ---- Gallery -------------------------------------------------------------------

void Gallery::add(std::string id, Tensor feature) {
  if (feature.rank() != 2) throw DimensionError("gallery feature must be [N x d], got " + nd::shape_str(feature.shape()));
  if (ids_.empty()) {
    tokens_ = feature.dim(0);
    width_ = feature.dim(1);
  } else if (feature.dim(0) != tokens_ || feature.dim(1) != width_) {
    throw DimensionError("gallery feature for '" + id + "' is " + nd::shape_str(feature.shape()) + ", expected " +
                         nd::shape_str({tokens_, width_}));
  }
  if (index_.count(id)) throw ContractError("duplicate gallery id '" + id + "'");
  index_.emplace(id, ids_.size());
  ids_.push_back(std::move(id));
  features_.push_back(nd::detach(feature));
}

Gallery Gallery::encode(const EncoderStack& stack) { return encode(stack, stack.image_ids()); }

Gallery Gallery::encode(const EncoderStack& stack, std::span<const std::string> ids) {
  nd::NoGradGuard guard;
  Gallery g;
  for (const auto& id : ids) g.add(id, stack.encode_target(id));
  return g;
}

bool Gallery::contains(std::string_view id) const { return index_.count(std::string(id)) != 0; }

const Tensor& Gallery::feature(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) throw MissingEmbeddingError(std::string(id));
  return features_[it->second];
}

Gallery Gallery::load(const std::filesystem::path& path) {
  io::Reader in(path);
  in.expect_magic("MTSE");
  const std::uint64_t version_at = in.offset();
  const std::uint32_t version = in.u32();
  if (version != kEmbeddingVersion) {
    throw FormatError(path.string(), version_at, "unsupported embedding file version " + std::to_string(version));
  }
  const std::uint64_t count = in.u64();
  const std::uint64_t dims_at = in.offset();
  const std::uint32_t n = in.u32();
  const std::uint32_t d = in.u32();
  if (count > 0 && (n == 0 || d == 0)) throw FormatError(path.string(), dims_at, "zero feature dimension");
  Gallery g;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t record_at = in.offset();
    const std::uint16_t len = in.u16();
    std::string id = in.bytes(len);
    if (id.empty()) throw FormatError(path.string(), record_at, "empty image id");
    if (g.contains(id)) throw FormatError(path.string(), record_at, "duplicate image id '" + id + "'");
    std::vector<double> values = in.f32_array(static_cast<std::size_t>(n) * d);
    g.add(std::move(id), Tensor({n, d}, std::move(values)));
  }
  in.expect_end();
  return g;
}

void Gallery::save(const std::filesystem::path& path) const {
  io::Writer out;
  out.raw("MTSE");
  out.u32(kEmbeddingVersion);
  out.u64(ids_.size());
  out.u32(static_cast<std::uint32_t>(tokens_));
  out.u32(static_cast<std::uint32_t>(width_));
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i].size() > UINT16_MAX) throw ContractError("image id longer than 65535 bytes");
    out.u16(static_cast<std::uint16_t>(ids_[i].size()));
    out.raw(ids_[i]);
    out.f32_array(features_[i].values());
  }
  out.write_to(path);
}

// ---- queries --------------------------------------------------------------------

json to_json(const EvalQuery& q) {
  json row{{"ref_id", q.ref_id}, {"modifier", q.modifier}, {"target_id", q.target_id}};
  if (q.subset_ids) row["subset_ids"] = *q.subset_ids;
  if (q.category) row["category"] = *q.category;
  return row;
}

std::vector<EvalQuery> load_queries(const std::filesystem::path& path) {
  std::vector<EvalQuery> out;
  for_each_jsonl(path, [&](const json& row, std::size_t line) {
    auto text = [&](const char* key) {
      auto it = row.find(key);
      if (it == row.end() || !it->is_string()) {
        throw ParseError(path.string(), line, std::string("missing string field '") + key + "'");
      }
      return it->get<std::string>();
    };
    EvalQuery q{text("ref_id"), text("modifier"), text("target_id"), std::nullopt, std::nullopt};
    if (auto it = row.find("subset_ids"); it != row.end() && !it->is_null()) {
      if (!it->is_array()) throw ParseError(path.string(), line, "field 'subset_ids' is not an array");
      std::vector<std::string> ids;
      for (const auto& v : *it) {
        if (!v.is_string()) throw ParseError(path.string(), line, "field 'subset_ids' holds a non-string");
        ids.push_back(v.get<std::string>());
      }
      q.subset_ids = std::move(ids);
    }
    if (auto it = row.find("category"); it != row.end() && it->is_string()) q.category = it->get<std::string>();
    out.push_back(std::move(q));
  });
  return out;
}

void save_queries(const std::filesystem::path& path, std::span<const EvalQuery> queries) {
  std::vector<json> rows;
  for (const auto& q : queries) rows.push_back(to_json(q));
  write_jsonl(path, rows);
}

// ---- ranking ----------------------------------------------------------------------

Tensor query_feature(const EvalQuery& query, const EncoderStack& stack) {
  nd::NoGradGuard guard;
  const auto ids = stack.tokenize(query.modifier);
  return stack.encode_query(stack.encode_multimodal(query.ref_id, ids), ids);
}

std::vector<ScoredId> score_candidates(const Tensor& f_q, const Gallery& gallery,
                                       std::span<const std::string> candidates, loss::Pooling pooling,
                                       std::string_view exclude) {
  nd::NoGradGuard guard;
  const Tensor q = nd::l2_normalize(loss::query_vector(f_q, pooling));
  const Tensor column = nd::reshape(q, {q.size(), 1});
  std::vector<ScoredId> scored;
  scored.reserve(candidates.size());
  for (const auto& id : candidates) {
    if (!exclude.empty() && id == exclude) continue;
    const Tensor t = nd::l2_normalize(gallery.feature(id));
    scored.push_back({id, nd::max(nd::matmul(t, column)).item()});
  }
  std::sort(scored.begin(), scored.end(), [](const ScoredId& a, const ScoredId& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  return scored;
}

std::vector<std::string> rank_gallery(const EvalQuery& query, const Gallery& gallery, const EncoderStack& stack,
                                      loss::Pooling pooling) {
  if (gallery.empty()) throw ContractError("rank_gallery: empty gallery");
  const auto scored = score_candidates(query_feature(query, stack), gallery, gallery.ids(), pooling, query.ref_id);
  std::vector<std::string> ids;
  ids.reserve(scored.size());
  for (const auto& s : scored) ids.push_back(s.id);
  return ids;
}

double recall_at_k(std::span<const Ranking> rankings, std::size_t k) {
  if (k < 1) throw ContractError("recall_at_k: K must be at least 1");
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& r : rankings) {
    const std::size_t depth = std::min(k, r.ids.size());
    if (std::find(r.ids.begin(), r.ids.begin() + static_cast<std::ptrdiff_t>(depth), r.target_id) !=
        r.ids.begin() + static_cast<std::ptrdiff_t>(depth)) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

namespace {

// Candidate list for the subset protocol, or an explanation of why the query
// cannot be evaluated.
std::optional<std::string> subset_candidates(const EvalQuery& q, const Gallery& gallery, const SubsetOptions& options,
                                             std::vector<std::string>& out) {
  if (!q.subset_ids) return "query " + q.ref_id + " -> " + q.target_id + " has no subset_ids";
  out.clear();
  for (const auto& id : *q.subset_ids) {
    if (!gallery.contains(id)) return "subset id '" + id + "' not in gallery";
    if (id != q.ref_id) out.push_back(id);
  }
  if (std::find(out.begin(), out.end(), q.target_id) == out.end()) {
    return "query " + q.ref_id + " -> " + q.target_id + " subset does not contain the target";
  }
  if (options.include_reference) {
    if (!gallery.contains(q.ref_id)) return "reference '" + q.ref_id + "' not in gallery";
    out.push_back(q.ref_id);
  }
  return std::nullopt;
}

Ranking subset_ranking(const Tensor& f_q, const EvalQuery& q, const Gallery& gallery,
                       std::span<const std::string> candidates, loss::Pooling pooling) {
  Ranking r{{}, q.target_id};
  for (auto& s : score_candidates(f_q, gallery, candidates, pooling)) r.ids.push_back(std::move(s.id));
  return r;
}

}  // namespace

SubsetRecall recall_subset_at_k(std::span<const EvalQuery> queries, const Gallery& gallery,
                                const EncoderStack& stack, std::size_t k, loss::Pooling pooling,
                                const SubsetOptions& options) {
  if (k < 1) throw ContractError("recall_subset_at_k: K must be at least 1");
  SubsetRecall result;
  std::vector<Ranking> rankings;
  std::vector<std::string> candidates;
  for (const auto& q : queries) {
    if (auto problem = subset_candidates(q, gallery, options, candidates)) {
      result.skipped.push_back(std::move(*problem));
      continue;
    }
    rankings.push_back(subset_ranking(query_feature(q, stack), q, gallery, candidates, pooling));
  }
  result.evaluated = rankings.size();
  result.value = recall_at_k(rankings, k);
  return result;
}

double EvalReport::headline() const {
  if (avg_cirr) return *avg_cirr;
  if (avg_fiq) return *avg_fiq;
  return (recall.at(10) + recall.at(50)) / 2.0;
}

EvalReport evaluate(std::span<const EvalQuery> queries, const Gallery& gallery, const EncoderStack& stack,
                    loss::Pooling pooling, const SubsetOptions& options) {
  if (gallery.empty()) throw ContractError("evaluate: empty gallery");
  EvalReport report;
  report.n_queries = queries.size();
  std::vector<Ranking> full, subset;
  std::map<std::string, std::vector<Ranking>> by_category;
  std::vector<std::string> candidates;
  bool all_have_subsets = !queries.empty();
  for (const auto& q : queries) {
    if (!gallery.contains(q.target_id)) throw MissingEmbeddingError(q.target_id);
    const Tensor f_q = query_feature(q, stack);
    Ranking r{{}, q.target_id};
    for (auto& s : score_candidates(f_q, gallery, gallery.ids(), pooling, q.ref_id)) r.ids.push_back(std::move(s.id));
    if (q.category) by_category[*q.category].push_back(r);
    full.push_back(std::move(r));
    if (subset_candidates(q, gallery, options, candidates)) {
      all_have_subsets = false;
    } else {
      subset.push_back(subset_ranking(f_q, q, gallery, candidates, pooling));
    }
  }
  for (std::size_t k : kRecallKs) report.recall[k] = recall_at_k(full, k);
  if (all_have_subsets) {
    for (std::size_t k : kSubsetKs) report.recall_subset[k] = recall_at_k(subset, k);
    report.avg_cirr = (report.recall[5] + report.recall_subset[1]) / 2.0;
  }
  if (!by_category.empty()) {
    double r10 = 0.0, r50 = 0.0;
    for (const auto& [category, rankings] : by_category) {
      const auto pair = std::make_pair(recall_at_k(rankings, 10), recall_at_k(rankings, 50));
      report.per_category[category] = pair;
      r10 += pair.first;
      r50 += pair.second;
    }
    const double c = static_cast<double>(by_category.size());
    report.avg_fiq = (r10 / c + r50 / c) / 2.0;
  }
  return report;
}

json to_json(const EvalReport& r) {
  json out{{"n_queries", r.n_queries}};
  for (const auto& [k, v] : r.recall) out["recall@" + std::to_string(k)] = v;
  for (const auto& [k, v] : r.recall_subset) out["recall_subset@" + std::to_string(k)] = v;
  if (r.avg_cirr) out["avg_cirr"] = *r.avg_cirr;
  if (!r.per_category.empty()) {
    json cats = json::object();
    for (const auto& [name, pair] : r.per_category) cats[name] = {{"recall@10", pair.first}, {"recall@50", pair.second}};
    out["per_category"] = cats;
  }
  if (r.avg_fiq) out["avg_fiq"] = *r.avg_fiq;
  return out;
}

}  // namespace mtst::eval
