#pragma once

// Toy stand-ins for the image encoder E_I, the multimodal encoder E_M and the
// text encoder E_T of the retrieval model.
//
//   E_I(I)        = image_table[I] * proj_img + b                  [N x d]
//   E_M(X, T)     = tanh([X | tile(mean(tok(T)))] * fuse + b)      [N x d]
//   E_T(P, T)     = tanh([P | tile(mean(tok(T)))] * text_head + b) [N x d]
//
// An empty text slot (target encoding) and an empty prompt (text-only
// encoding) are zero blocks. Row 0 of every output is the CLS row.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtst/ndcore.hpp"
#include "mtst/records.hpp"
#include "mtst/rng.hpp"
#include "mtst/vocab.hpp"

namespace mtst {

struct EncoderConfig {
  std::size_t tokens = 32;       // N
  std::size_t width = 64;        // d
  std::size_t image_width = 64;  // d_img
  std::size_t max_text_len = 32;
  double image_init = 1.0;  // image and token tables ~ U(-s, s)
  double token_init = 1.0;
  // Registers a learnable offset that only the reverse-text branch reads.
  // Behind the detach it can never receive gradient; used to audit that.
  bool reverse_probe = false;
};

// Features of one training example. f_t2r is only present in finetuning.
struct FeatureBundle {
  nd::Tensor f_r2t;
  std::optional<nd::Tensor> f_t2r;
  nd::Tensor f_q;
  nd::Tensor f_t;
  nd::Tensor f_m;
};

class EncoderStack {
 public:
  // Registers every parameter under prefix + "." in params and draws initial
  // values from rng.
  EncoderStack(const EncoderConfig& config, Vocab vocab, std::span<const std::string> image_ids,
               nd::ParameterStore& params, Rng& rng, const std::string& prefix = "retrieval");

  const EncoderConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }
  std::size_t tokens() const { return config_.tokens; }
  std::size_t width() const { return config_.width; }

  std::vector<TokenId> tokenize(std::string_view text) const;

  bool has_image(std::string_view id) const;
  const std::vector<std::string>& image_ids() const { return image_order_; }
  const nd::Tensor& image_embedding(std::string_view id) const;

  // E_I
  nd::Tensor encode_image(std::string_view id) const;
  // mean over token embeddings, [d]
  nd::Tensor text_mean(std::span<const TokenId> ids) const;
  // E_M over already-encoded image tokens; text may be null for an empty slot.
  nd::Tensor fuse(const nd::Tensor& image_tokens, const nd::Tensor* text) const;
  // E_T over prompt rows; prompt may be null for a text-only pass.
  nd::Tensor text_head(const nd::Tensor* prompt, const nd::Tensor& text) const;

  // f_r2t = E_M(E_I(I), T)
  nd::Tensor encode_multimodal(std::string_view image_id, std::span<const TokenId> modifier) const;
  // f_q = E_T(f_r2t, T)
  nd::Tensor encode_query(const nd::Tensor& f_r2t, std::span<const TokenId> modifier) const;
  // f_t = E_M(E_I(I))
  nd::Tensor encode_target(std::string_view image_id) const;
  // f_m = E_T(-, T)
  nd::Tensor encode_text_only(std::span<const TokenId> modifier) const;

  // All features for one triplet; f_t2r only when reverse text is given.
  // f_t2r is returned already detached.
  FeatureBundle encode_triplet(const Triplet& triplet, bool with_reverse, bool with_text_only = true) const;

 private:
  EncoderConfig config_;
  Vocab vocab_;
  std::vector<std::string> image_order_;
  std::unordered_map<std::string, nd::Tensor> image_table_;
  nd::Tensor proj_w_, proj_b_;
  nd::Tensor token_table_;
  nd::Tensor fuse_w_, fuse_b_;
  nd::Tensor head_w_, head_b_;
  nd::Tensor reverse_probe_;  // undefined unless config.reverse_probe
};

// Xavier-uniform matrix [fan_in x fan_out].
nd::Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);
nd::Tensor uniform_tensor(nd::Shape shape, double bound, Rng& rng);

}  // namespace mtst
