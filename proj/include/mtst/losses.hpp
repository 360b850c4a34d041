#pragma once

#include <optional>
#include <span>
#include <string_view>

#include "mtst/encoders.hpp"
#include "mtst/ndcore.hpp"

namespace mtst::loss {

// How the query vector is read from f_q before the max-over-tokens cosine.
//   cls           row 0
//   avg_with_cls  mean of the N rows together with the CLS row, (sum + cls) / (N + 1)
enum class Pooling { cls, avg_with_cls };

std::string_view to_string(Pooling p);
std::optional<Pooling> parse_pooling(std::string_view text);

inline constexpr double kTauMin = 1e-3;
inline constexpr double kTauMax = 10.0;

struct LossConfig {
  double alpha = 0.5;   // weight of the prototype loss
  double w_t2t = 0.4;   // weight of the text-to-target loss
  double w_q2t = 1.0;   // fixed
  double tau_init = 0.07;
  Pooling pooling = Pooling::cls;
};

double clamp_tau(double tau);

nd::Tensor query_vector(const nd::Tensor& f_q, Pooling pooling);

// max_k cos(q, f_t[k]) where q is the pooled query vector.
nd::Tensor sim(const nd::Tensor& f_q, const nd::Tensor& f_t, Pooling pooling);

// S[i][j] = sim(queries[i], targets[j]), shape [B x B'].
nd::Tensor similarity_matrix(std::span<const nd::Tensor> queries, std::span<const nd::Tensor> targets,
                             Pooling pooling);

// In-batch contrastive loss over a square similarity matrix whose diagonal
// holds the positives: -(1/B) sum_i log softmax_j(S[i][j] / tau)[i].
nd::Tensor contrastive(const nd::Tensor& sims, const nd::Tensor& tau);

nd::Tensor loss_q2t(std::span<const FeatureBundle> batch, const nd::Tensor& tau, Pooling pooling);
nd::Tensor loss_t2t(std::span<const FeatureBundle> batch, const nd::Tensor& tau, Pooling pooling);

// (1/B) sum_i || mean_rows(f_r2t_i) - mean_rows(f_t2r_i) ||^2 with f_t2r detached.
nd::Tensor loss_p2p(std::span<const FeatureBundle> batch);

struct LossBreakdown {
  double q2t = 0.0;
  double t2t = 0.0;
  double p2p = 0.0;
  double w_t2t = 0.0;
  double alpha = 0.0;
  double total = 0.0;
  double tau = 0.0;

  double t2t_contribution() const { return w_t2t * t2t; }
  double p2p_contribution() const { return alpha * p2p; }
};

struct TotalLoss {
  nd::Tensor value;
  LossBreakdown breakdown;
};

// L = L_q2t + w_t2t * L_t2t + alpha * L_p2p. Terms with zero weight are still
// evaluated for the breakdown when their features exist, but are kept out of
// the graph so they contribute no gradient at all.
TotalLoss total_loss(std::span<const FeatureBundle> batch, const LossConfig& config, const nd::Tensor& tau);

}  // namespace mtst::loss
