#pragma once

// Desk-scale modification-text generator.
//
// The query encoder (an EncoderStack with its own parameters) turns the
// reference and target images into q_r and q_t, fuses both with the
// instruction into q_c, and FC_llm projects the 3N rows into the decoder
// width. The instruction's decoder embedding q_ins is appended:
//
//   input = FC_llm(q_r (+) q_t (+) q_c) (+) q_ins        [(3N + L_ins) x d_llm]
//
// A single-layer recurrent decoder conditioned on a block-pooled summary of
// that input is trained with teacher-forced next-token likelihood.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtst/encoders.hpp"
#include "mtst/ndcore.hpp"
#include "mtst/records.hpp"
#include "mtst/rng.hpp"
#include "mtst/vocab.hpp"

namespace mtst::textgen {

inline constexpr std::string_view kInstruction = "How to change from one image to another?";

struct GeneratorInput {
  nd::Tensor q_r;        // [N x d]
  nd::Tensor q_t;        // [N x d]
  nd::Tensor q_c;        // [N x d]
  nd::Tensor q_ins;      // [L_ins x d_llm]
  nd::Tensor projected;  // [(3N + L_ins) x d_llm]
  std::size_t tokens = 0;
};

class DecoderModel {
 public:
  // With zero_head the output head starts at zero, so every next-token
  // distribution is uniform until training moves it.
  DecoderModel(std::size_t vocab_size, std::size_t width, bool zero_head, nd::ParameterStore& params, Rng& rng,
               const std::string& prefix = "decoder");

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t width() const { return width_; }

  // Token embeddings in decoder space, [L x d_llm].
  nd::Tensor embed(std::span<const TokenId> ids) const;
  // Initial state from the mean of each of the four input blocks, [d_llm].
  nd::Tensor initial_state(const GeneratorInput& input) const;
  // h' = tanh([h | e(prev)] W + b)
  nd::Tensor advance(const nd::Tensor& state, TokenId previous) const;
  // [V] logits for the token following state.
  nd::Tensor logits(const nd::Tensor& state) const;

 private:
  std::size_t vocab_size_;
  std::size_t width_;
  nd::Tensor token_embed_;
  nd::Tensor context_w_, context_b_;
  nd::Tensor state_w_, state_b_;
  nd::Tensor head_w_, head_b_;
};

struct GeneratorConfig {
  EncoderConfig encoder;
  std::size_t llm_width = 64;
  std::size_t max_text_len = 48;
  bool zero_output_head = true;
};

class Generator {
 public:
  Generator(const GeneratorConfig& config, Vocab vocab, std::span<const std::string> image_ids,
            nd::ParameterStore& params, Rng& rng, const std::string& prefix = "generator");

  const GeneratorConfig& config() const { return config_; }
  const Vocab& vocab() const { return encoder_.vocab(); }
  const EncoderStack& query_encoder() const { return encoder_; }
  const DecoderModel& decoder() const { return decoder_; }

  std::vector<TokenId> tokenize(std::string_view text) const;
  std::vector<TokenId> instruction_ids() const { return tokenize(kInstruction); }

  // q_c from [q_r | q_t | tile(mean(instruction))]
  nd::Tensor compose(const nd::Tensor& q_r, const nd::Tensor& q_t, std::span<const TokenId> instruction) const;
  // FC_llm, applied row-wise
  nd::Tensor project(const nd::Tensor& rows) const;

  // Greedy text for an image pair, detokenized.
  std::string describe(std::string_view ref_id, std::string_view target_id) const;

 private:
  GeneratorConfig config_;
  EncoderStack encoder_;
  nd::Tensor compose_w_, compose_b_;
  nd::Tensor fc_w_, fc_b_;
  DecoderModel decoder_;
};

GeneratorInput assemble_input(std::string_view ref_id, std::string_view target_id,
                              std::span<const TokenId> instruction_ids, const Generator& generator);

// Mean over positions of -log P(t_m | input, t_<m), teacher forced. The
// sequence is [BOS, t_1, ..., t_M] and every t_m with m >= 1 is predicted.
nd::Tensor lm_loss(const GeneratorInput& input, std::span<const TokenId> modifier, const DecoderModel& model);

// Argmax decoding from BOS until EOS or max_len tokens. PAD and BOS are never
// emitted; ties go to the lowest id. Returns the tokens without BOS and EOS.
std::vector<TokenId> generate_greedy(const GeneratorInput& input, const DecoderModel& model, std::size_t max_len);

// "keep {shared}; remove {ref only}; add {target only}", label groups sorted,
// empty groups omitted, lowercase.
std::string template_oracle(const ImageRecord& ref, const ImageRecord& target);

struct LineIssue {
  std::size_t line = 0;
  std::string message;
};

struct IngestReport {
  std::vector<Triplet> triplets;
  std::vector<LineIssue> errors;
  std::size_t duplicates = 0;
};

// Reads modifiers produced offline. Malformed lines are reported and skipped;
// repeated (ref, target, modifier) rows are kept once.
IngestReport ingest_external(const std::filesystem::path& path);

struct GeneratorTraining {
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  double lr = 0.01;
  std::uint64_t seed = 0;
};

// Adam on the mean lm_loss of sampled mini-batches. Returns the per-step loss.
std::vector<double> train_generator(const Generator& generator, const nd::ParameterStore& params,
                                    std::span<const Triplet> examples, const GeneratorTraining& options);

}  // namespace mtst::textgen
