#include "mtst/losses.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include "mtst/error.hpp"

namespace mtst::loss {

using nd::Tensor;

std::string_view to_string(Pooling p) { return p == Pooling::cls ? "cls" : "avg_with_cls"; }

std::optional<Pooling> parse_pooling(std::string_view text) {
  if (text == "cls") return Pooling::cls;
  if (text == "avg_with_cls") return Pooling::avg_with_cls;
  return std::nullopt;
}

double clamp_tau(double tau) { return std::clamp(tau, kTauMin, kTauMax); }

Tensor query_vector(const Tensor& f_q, Pooling pooling) {
  if (f_q.rank() != 2) throw DimensionError("query_vector: expected [N x d], got " + nd::shape_str(f_q.shape()));
  const Tensor cls = nd::row(f_q, 0);
  if (pooling == Pooling::cls) return cls;
  const double n = static_cast<double>(f_q.dim(0));
  // (N * mean + cls) / (N + 1)
  return nd::scale(nd::add(nd::scale(nd::mean_rows(f_q), n), cls), 1.0 / (n + 1.0));
}

Tensor sim(const Tensor& f_q, const Tensor& f_t, Pooling pooling) {
  if (f_t.rank() != 2 || f_q.cols() != f_t.cols()) {
    throw DimensionError("sim: incompatible features " + nd::shape_str(f_q.shape()) + " and " +
                         nd::shape_str(f_t.shape()));
  }
  const Tensor q = nd::l2_normalize(query_vector(f_q, pooling));
  const Tensor t = nd::l2_normalize(f_t);
  return nd::max(nd::matmul(t, nd::reshape(q, {q.size(), 1})));
}

Tensor similarity_matrix(std::span<const Tensor> queries, std::span<const Tensor> targets, Pooling pooling) {
  if (queries.empty() || targets.empty()) throw EmptyInputError("similarity_matrix: empty batch");
  std::vector<Tensor> qs;
  qs.reserve(queries.size());
  for (const auto& f_q : queries) qs.push_back(nd::l2_normalize(query_vector(f_q, pooling)));
  const Tensor q = nd::stack(qs);  // [B x d]
  std::vector<Tensor> columns;
  columns.reserve(targets.size());
  for (const auto& f_t : targets) {
    if (f_t.rank() != 2 || f_t.cols() != q.cols()) {
      throw DimensionError("similarity_matrix: target " + nd::shape_str(f_t.shape()) + " vs queries " +
                           nd::shape_str(q.shape()));
    }
    // [B x N] cosines against every token of this target, max over tokens.
    columns.push_back(nd::max_rows(nd::matmul(q, nd::transpose(nd::l2_normalize(f_t)))));
  }
  return nd::transpose(nd::stack(columns));
}

Tensor contrastive(const Tensor& sims, const Tensor& tau) {
  if (sims.rank() != 2 || sims.dim(0) != sims.dim(1)) {
    throw DimensionError("contrastive: expected a square similarity matrix, got " + nd::shape_str(sims.shape()));
  }
  if (tau.size() != 1 || !(tau.values()[0] > 0.0)) throw ContractError("contrastive: tau must be positive");
  std::vector<std::size_t> diagonal(sims.dim(0));
  for (std::size_t i = 0; i < diagonal.size(); ++i) diagonal[i] = i;
  return nd::cross_entropy(nd::div_scalar(sims, tau), diagonal);
}

namespace {

Tensor contrastive_against_targets(std::span<const FeatureBundle> batch, const Tensor& tau, Pooling pooling,
                                   Tensor FeatureBundle::*query) {
  if (batch.empty()) throw EmptyInputError("contrastive loss over an empty batch");
  std::vector<Tensor> queries, targets;
  for (const auto& b : batch) {
    if (!(b.*query).defined()) throw ContractError("feature bundle lacks the query feature for this loss");
    queries.push_back(b.*query);
    targets.push_back(b.f_t);
  }
  return contrastive(similarity_matrix(queries, targets, pooling), tau);
}

}  // namespace

Tensor loss_q2t(std::span<const FeatureBundle> batch, const Tensor& tau, Pooling pooling) {
  return contrastive_against_targets(batch, tau, pooling, &FeatureBundle::f_q);
}

Tensor loss_t2t(std::span<const FeatureBundle> batch, const Tensor& tau, Pooling pooling) {
  return contrastive_against_targets(batch, tau, pooling, &FeatureBundle::f_m);
}

Tensor loss_p2p(std::span<const FeatureBundle> batch) {
  if (batch.empty()) throw EmptyInputError("loss_p2p over an empty batch");
  std::vector<Tensor> terms;
  terms.reserve(batch.size());
  for (const auto& b : batch) {
    if (!b.f_t2r) throw ConfigError("loss_p2p: feature bundle has no f_t2r");
    if (b.f_r2t.shape() != b.f_t2r->shape()) {
      throw DimensionError("loss_p2p: f_r2t " + nd::shape_str(b.f_r2t.shape()) + " vs f_t2r " +
                           nd::shape_str(b.f_t2r->shape()));
    }
    const Tensor diff = nd::sub(nd::mean_rows(b.f_r2t), nd::mean_rows(nd::detach(*b.f_t2r)));
    terms.push_back(nd::sum(nd::mul(diff, diff)));
  }
  return nd::scale(nd::sum(nd::stack(terms)), 1.0 / static_cast<double>(batch.size()));
}

TotalLoss total_loss(std::span<const FeatureBundle> batch, const LossConfig& config, const Tensor& tau) {
  if (config.alpha < 0.0 || config.w_t2t < 0.0) throw ConfigError("loss weights must be non-negative");
  const bool has_reverse =
      !batch.empty() && std::all_of(batch.begin(), batch.end(), [](const auto& b) { return b.f_t2r.has_value(); });
  if (config.alpha > 0.0 && !has_reverse) {
    throw ConfigError("alpha > 0 requires reverse-text features (f_t2r) for every example");
  }
  const bool has_text_only =
      std::all_of(batch.begin(), batch.end(), [](const auto& b) { return b.f_m.defined(); });

  TotalLoss out;
  auto& br = out.breakdown;
  br.alpha = config.alpha;
  br.w_t2t = config.w_t2t;
  br.tau = tau.item();

  Tensor total = loss_q2t(batch, tau, config.pooling);
  br.q2t = total.item();

  if (config.w_t2t > 0.0) {
    const Tensor t2t = loss_t2t(batch, tau, config.pooling);
    br.t2t = t2t.item();
    total = nd::add(total, nd::scale(t2t, config.w_t2t));
  } else if (has_text_only) {
    nd::NoGradGuard guard;
    br.t2t = loss_t2t(batch, tau, config.pooling).item();
  }

  if (config.alpha > 0.0) {
    const Tensor p2p = loss_p2p(batch);
    br.p2p = p2p.item();
    total = nd::add(total, nd::scale(p2p, config.alpha));
  } else if (has_reverse) {
    nd::NoGradGuard guard;
    br.p2p = loss_p2p(batch).item();
  }

  br.total = total.item();
  out.value = std::move(total);
  return out;
}

}  // namespace mtst::loss
