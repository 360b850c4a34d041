#include "mtst/encoders.hpp"

#include <cmath>

#include "mtst/error.hpp"

namespace mtst {

using nd::Tensor;

Tensor uniform_tensor(nd::Shape shape, double bound, Rng& rng) {
  std::vector<double> values(nd::element_count(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(values));
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_tensor({fan_in, fan_out}, bound, rng);
}

EncoderStack::EncoderStack(const EncoderConfig& config, Vocab vocab, std::span<const std::string> image_ids,
                           nd::ParameterStore& params, Rng& rng, const std::string& prefix)
    : config_(config), vocab_(std::move(vocab)) {
  const std::size_t n = config_.tokens, d = config_.width, di = config_.image_width;
  if (n == 0 || d == 0 || di == 0) throw ContractError("encoder dimensions must be positive");
  for (const auto& id : image_ids) {
    if (image_table_.count(id)) throw ContractError("duplicate image id '" + id + "' in encoder table");
    image_table_.emplace(id, params.add(prefix + ".image." + id, uniform_tensor({n, di}, config_.image_init, rng)));
    image_order_.push_back(id);
  }
  proj_w_ = params.add(prefix + ".proj_img.w", xavier_uniform(di, d, rng));
  proj_b_ = params.add(prefix + ".proj_img.b", Tensor::zeros({d}));
  token_table_ = params.add(prefix + ".token_table", uniform_tensor({vocab_.size(), d}, config_.token_init, rng));
  const double bound = std::sqrt(6.0 / static_cast<double>(3 * d));
  fuse_w_ = params.add(prefix + ".fuse.w", uniform_tensor({2 * d, d}, bound, rng));
  fuse_b_ = params.add(prefix + ".fuse.b", Tensor::zeros({d}));
  head_w_ = params.add(prefix + ".text_head.w", uniform_tensor({2 * d, d}, bound, rng));
  head_b_ = params.add(prefix + ".text_head.b", Tensor::zeros({d}));
  if (config_.reverse_probe) reverse_probe_ = params.add(prefix + ".reverse_probe", Tensor::zeros({d}));
}

std::vector<TokenId> EncoderStack::tokenize(std::string_view text) const {
  return mtst::tokenize(text, vocab_, config_.max_text_len);
}

bool EncoderStack::has_image(std::string_view id) const { return image_table_.count(std::string(id)) != 0; }

const Tensor& EncoderStack::image_embedding(std::string_view id) const {
  auto it = image_table_.find(std::string(id));
  if (it == image_table_.end()) throw MissingEmbeddingError(std::string(id));
  return it->second;
}

Tensor EncoderStack::encode_image(std::string_view id) const {
  return nd::affine(image_embedding(id), proj_w_, proj_b_);
}

Tensor EncoderStack::text_mean(std::span<const TokenId> ids) const {
  if (ids.empty()) throw ContractError("text_mean: empty id sequence");
  for (TokenId id : ids) {
    if (id >= vocab_.size()) {
      throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(vocab_.size()));
    }
  }
  return nd::mean_rows(nd::gather_rows(token_table_, ids));
}

namespace {

// [block | tile(text)] * [w_top; w_bottom] + b, evaluated as
// block * w_top + b + tile(text * w_bottom) so the text half of the (2d x d)
// map acts on one mean vector instead of N identical rows.
Tensor block_affine(const Tensor* block, const Tensor* text, const Tensor& w, const Tensor& b, std::size_t rows,
                    std::size_t d) {
  const Tensor w_top = nd::slice_rows(w, 0, d);
  const Tensor w_bottom = nd::slice_rows(w, d, d);
  Tensor text_part;
  if (text) text_part = nd::matmul(nd::reshape(*text, {1, d}), w_bottom);
  if (!block) {
    // Every row is identical: evaluate once, then tile.
    Tensor one = text ? nd::add(nd::reshape(text_part, {d}), b) : b;
    return nd::tile_rows(nd::tanh(one), rows);
  }
  Tensor out = nd::affine(*block, w_top, b);
  if (text) out = nd::add(out, nd::tile_rows(nd::reshape(text_part, {d}), rows));
  return nd::tanh(out);
}

}  // namespace

Tensor EncoderStack::fuse(const Tensor& image_tokens, const Tensor* text) const {
  if (image_tokens.shape() != nd::Shape{config_.tokens, config_.width}) {
    throw DimensionError("fuse: expected image tokens " + nd::shape_str({config_.tokens, config_.width}) + ", got " +
                         nd::shape_str(image_tokens.shape()));
  }
  return block_affine(&image_tokens, text, fuse_w_, fuse_b_, config_.tokens, config_.width);
}

Tensor EncoderStack::text_head(const Tensor* prompt, const Tensor& text) const {
  if (prompt && prompt->shape() != nd::Shape{config_.tokens, config_.width}) {
    throw DimensionError("text_head: expected prompt " + nd::shape_str({config_.tokens, config_.width}) +
                         ", got " + nd::shape_str(prompt->shape()));
  }
  return block_affine(prompt, &text, head_w_, head_b_, config_.tokens, config_.width);
}

Tensor EncoderStack::encode_multimodal(std::string_view image_id, std::span<const TokenId> modifier) const {
  const Tensor text = text_mean(modifier);
  return fuse(encode_image(image_id), &text);
}

Tensor EncoderStack::encode_query(const Tensor& f_r2t, std::span<const TokenId> modifier) const {
  return text_head(&f_r2t, text_mean(modifier));
}

Tensor EncoderStack::encode_target(std::string_view image_id) const {
  return fuse(encode_image(image_id), nullptr);
}

Tensor EncoderStack::encode_text_only(std::span<const TokenId> modifier) const {
  return text_head(nullptr, text_mean(modifier));
}

FeatureBundle EncoderStack::encode_triplet(const Triplet& triplet, bool with_reverse, bool with_text_only) const {
  const auto forward_ids = tokenize(triplet.modifier);
  const Tensor forward_text = text_mean(forward_ids);
  const Tensor target_tokens = encode_image(triplet.target_id);

  FeatureBundle bundle;
  bundle.f_r2t = fuse(encode_image(triplet.ref_id), &forward_text);
  bundle.f_q = text_head(&bundle.f_r2t, forward_text);
  bundle.f_t = fuse(target_tokens, nullptr);
  if (with_text_only) bundle.f_m = text_head(nullptr, forward_text);
  if (with_reverse) {
    if (!triplet.reverse_modifier) {
      throw ConfigError("triplet " + triplet.ref_id + " -> " + triplet.target_id + " has no reverse modifier");
    }
    const auto reverse_ids = tokenize(*triplet.reverse_modifier);
    Tensor reverse_text = text_mean(reverse_ids);
    if (reverse_probe_.defined()) reverse_text = nd::add(reverse_text, reverse_probe_);
    bundle.f_t2r = nd::detach(fuse(target_tokens, &reverse_text));
  }
  return bundle;
}

}  // namespace mtst
