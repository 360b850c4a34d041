#include "mtst/textgen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>
#include <tuple>

#include <nlohmann/json.hpp>

#include "mtst/error.hpp"
#include "mtst/optim.hpp"

namespace mtst::textgen {

using nd::Tensor;

// ---- DecoderModel ---------------------------------------------------------------

DecoderModel::DecoderModel(std::size_t vocab_size, std::size_t width, bool zero_head, nd::ParameterStore& params,
                           Rng& rng, const std::string& prefix)
    : vocab_size_(vocab_size), width_(width) {
  if (vocab_size <= Vocab::kReserved || width == 0) throw ContractError("decoder needs a vocabulary and a width");
  token_embed_ = params.add(prefix + ".token_embed", uniform_tensor({vocab_size, width}, 1.0, rng));
  context_w_ = params.add(prefix + ".context.w", xavier_uniform(4 * width, width, rng));
  context_b_ = params.add(prefix + ".context.b", Tensor::zeros({width}));
  state_w_ = params.add(prefix + ".state.w", xavier_uniform(2 * width, width, rng));
  state_b_ = params.add(prefix + ".state.b", Tensor::zeros({width}));
  head_w_ = params.add(prefix + ".head.w",
                       zero_head ? Tensor::zeros({width, vocab_size}) : xavier_uniform(width, vocab_size, rng));
  head_b_ = params.add(prefix + ".head.b", Tensor::zeros({vocab_size}));
}

Tensor DecoderModel::embed(std::span<const TokenId> ids) const {
  for (TokenId id : ids) {
    if (id >= vocab_size_) throw ContractError("token id " + std::to_string(id) + " outside decoder vocabulary");
  }
  return nd::gather_rows(token_embed_, ids);
}

Tensor DecoderModel::initial_state(const GeneratorInput& input) const {
  const std::size_t n = input.tokens;
  const std::size_t total = input.projected.dim(0);
  if (n == 0 || total <= 3 * n) throw DimensionError("generator input has no instruction rows");
  Tensor pooled = nd::mean_rows(nd::slice_rows(input.projected, 0, n));
  pooled = nd::concat_cols(nd::reshape(pooled, {1, width_}),
                           nd::reshape(nd::mean_rows(nd::slice_rows(input.projected, n, n)), {1, width_}));
  pooled = nd::concat_cols(pooled, nd::reshape(nd::mean_rows(nd::slice_rows(input.projected, 2 * n, n)), {1, width_}));
  pooled = nd::concat_cols(
      pooled, nd::reshape(nd::mean_rows(nd::slice_rows(input.projected, 3 * n, total - 3 * n)), {1, width_}));
  return nd::reshape(nd::tanh(nd::affine(pooled, context_w_, context_b_)), {width_});
}

Tensor DecoderModel::advance(const Tensor& state, TokenId previous) const {
  const TokenId ids[] = {previous};
  const Tensor x = nd::concat_cols(nd::reshape(state, {1, width_}), embed(ids));
  return nd::reshape(nd::tanh(nd::affine(x, state_w_, state_b_)), {width_});
}

Tensor DecoderModel::logits(const Tensor& state) const {
  return nd::reshape(nd::affine(nd::reshape(state, {1, width_}), head_w_, head_b_), {vocab_size_});
}

// ---- Generator ------------------------------------------------------------------

Generator::Generator(const GeneratorConfig& config, Vocab vocab, std::span<const std::string> image_ids,
                     nd::ParameterStore& params, Rng& rng, const std::string& prefix)
    : config_(config),
      encoder_(config.encoder, std::move(vocab), image_ids, params, rng, prefix + ".query_encoder"),
      compose_w_(params.add(prefix + ".compose.w", xavier_uniform(3 * config.encoder.width, config.encoder.width, rng))),
      compose_b_(params.add(prefix + ".compose.b", Tensor::zeros({config.encoder.width}))),
      fc_w_(params.add(prefix + ".fc_llm.w", xavier_uniform(config.encoder.width, config.llm_width, rng))),
      fc_b_(params.add(prefix + ".fc_llm.b", Tensor::zeros({config.llm_width}))),
      decoder_(encoder_.vocab().size(), config.llm_width, config.zero_output_head, params, rng, prefix + ".decoder") {}

std::vector<TokenId> Generator::tokenize(std::string_view text) const {
  return mtst::tokenize(text, vocab(), config_.max_text_len);
}

Tensor Generator::compose(const Tensor& q_r, const Tensor& q_t, std::span<const TokenId> instruction) const {
  const Tensor text = nd::tile_rows(encoder_.text_mean(instruction), q_r.dim(0));
  return nd::tanh(nd::affine(nd::concat_cols(nd::concat_cols(q_r, q_t), text), compose_w_, compose_b_));
}

Tensor Generator::project(const Tensor& rows) const { return nd::affine(rows, fc_w_, fc_b_); }

std::string Generator::describe(std::string_view ref_id, std::string_view target_id) const {
  nd::NoGradGuard guard;
  const auto input = assemble_input(ref_id, target_id, instruction_ids(), *this);
  const auto ids = generate_greedy(input, decoder_, config_.max_text_len);
  return detokenize(ids, vocab());
}

GeneratorInput assemble_input(std::string_view ref_id, std::string_view target_id,
                              std::span<const TokenId> instruction_ids, const Generator& generator) {
  if (instruction_ids.empty()) throw ContractError("assemble_input: empty instruction");
  const auto& enc = generator.query_encoder();
  GeneratorInput in;
  in.tokens = enc.tokens();
  in.q_r = enc.encode_target(ref_id);
  in.q_t = enc.encode_target(target_id);
  in.q_c = generator.compose(in.q_r, in.q_t, instruction_ids);
  in.q_ins = generator.decoder().embed(instruction_ids);
  const Tensor visual[] = {in.q_r, in.q_t, in.q_c};
  const Tensor parts[] = {generator.project(nd::concat_rows(visual)), in.q_ins};
  in.projected = nd::concat_rows(parts);
  return in;
}

Tensor lm_loss(const GeneratorInput& input, std::span<const TokenId> modifier, const DecoderModel& model) {
  if (modifier.size() < 2) throw ContractError("lm_loss: modifier needs at least one token after BOS");
  for (TokenId id : modifier) {
    if (id >= model.vocab_size()) {
      throw ContractError("lm_loss: token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(model.vocab_size()));
    }
  }
  Tensor state = model.initial_state(input);
  std::vector<Tensor> rows;
  std::vector<std::size_t> targets;
  rows.reserve(modifier.size() - 1);
  for (std::size_t m = 1; m < modifier.size(); ++m) {
    state = model.advance(state, modifier[m - 1]);
    rows.push_back(model.logits(state));
    targets.push_back(modifier[m]);
  }
  return nd::cross_entropy(nd::stack(rows), targets);
}

std::vector<TokenId> generate_greedy(const GeneratorInput& input, const DecoderModel& model, std::size_t max_len) {
  if (max_len < 1) throw ContractError("generate_greedy: max_len must be at least 1");
  nd::NoGradGuard guard;
  std::vector<TokenId> out;
  Tensor state = model.initial_state(input);
  TokenId previous = Vocab::kBos;
  while (out.size() < max_len) {
    state = model.advance(state, previous);
    const Tensor logits = model.logits(state);
    const auto z = logits.values();
    TokenId best = Vocab::kEos;
    for (TokenId id = 0; id < z.size(); ++id) {
      if (id == Vocab::kPad || id == Vocab::kBos) continue;
      if (z[id] > z[best] || (z[id] == z[best] && id < best)) best = id;
    }
    if (best == Vocab::kEos) break;
    out.push_back(best);
    previous = best;
  }
  return out;
}

// ---- template oracle ------------------------------------------------------------

std::string template_oracle(const ImageRecord& ref, const ImageRecord& target) {
  std::set<std::string> a(ref.labels.begin(), ref.labels.end());
  std::set<std::string> b(target.labels.begin(), target.labels.end());
  if (a.empty() && b.empty()) return "no visible attribute change";
  std::vector<std::string> keep, remove, add;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(keep));
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(remove));
  std::set_difference(b.begin(), b.end(), a.begin(), a.end(), std::back_inserter(add));
  std::string out;
  auto group = [&out](std::string_view verb, const std::vector<std::string>& items) {
    if (items.empty()) return;
    if (!out.empty()) out += "; ";
    out += verb;
    for (std::size_t i = 0; i < items.size(); ++i) {
      out += i == 0 ? " " : ", ";
      out += items[i];
    }
  };
  group("keep", keep);
  group("remove", remove);
  group("add", add);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
  });
  return out;
}

// ---- external ingestion ----------------------------------------------------------

IngestReport ingest_external(const std::filesystem::path& path) {
  IngestReport report;
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto row = nlohmann::json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.is_object()) {
      report.errors.push_back({line_no, "not a JSON object"});
      continue;
    }
    if (!row.contains("source")) row["source"] = "external";
    try {
      Triplet t = triplet_from_json(row);
      t.source = Provenance::external;
      if (!seen.emplace(t.ref_id, t.target_id, t.modifier).second) {
        ++report.duplicates;
        continue;
      }
      report.triplets.push_back(std::move(t));
    } catch (const std::invalid_argument& e) {
      report.errors.push_back({line_no, e.what()});
    }
  }
  return report;
}

// ---- training ---------------------------------------------------------------------

std::vector<double> train_generator(const Generator& generator, const nd::ParameterStore& params,
                                    std::span<const Triplet> examples, const GeneratorTraining& options) {
  if (examples.empty()) throw ContractError("train_generator: no examples");
  Rng rng(options.seed);
  train::Optimizer optimizer({.kind = train::OptimizerKind::adam});
  const auto instruction = generator.instruction_ids();
  std::vector<double> history;
  history.reserve(options.steps);
  const std::size_t batch = std::max<std::size_t>(1, std::min(options.batch_size, examples.size()));
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<Tensor> losses;
    for (std::size_t k = 0; k < batch; ++k) {
      const auto& ex = examples[rng.below(examples.size())];
      const auto input = assemble_input(ex.ref_id, ex.target_id, instruction, generator);
      losses.push_back(lm_loss(input, generator.tokenize(ex.modifier), generator.decoder()));
    }
    const Tensor loss = nd::scale(nd::sum(nd::stack(losses)), 1.0 / static_cast<double>(losses.size()));
    history.push_back(loss.item());
    optimizer.step(params, nd::backward(loss, params), options.lr);
  }
  return history;
}

}  // namespace mtst::textgen
