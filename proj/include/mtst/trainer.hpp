#pragma once

// Two-stage optimization of an EncoderStack: contrastive pretraining on
// synthetic triplets, then finetuning with the prototype loss.
//
// A run directory holds
//   config.snapshot   the resolved configuration, key=value
//   vocab.txt         the vocabulary the model was built with
//   losses.jsonl      one loss breakdown per step
//   eval.jsonl        one validation report per evaluation
//   checkpoint.bin    parameters of the best validation step
//   report.json       test-split report of that checkpoint (when configured)

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtst/encoders.hpp"
#include "mtst/evaluator.hpp"
#include "mtst/losses.hpp"
#include "mtst/ndcore.hpp"
#include "mtst/optim.hpp"
#include "mtst/records.hpp"
#include "mtst/rng.hpp"
#include "mtst/vocab.hpp"

namespace mtst::train {

enum class Stage { pretrain, finetune };
enum class LrSchedule { constant, linear };

std::string_view to_string(Stage stage);
std::optional<Stage> parse_stage(std::string_view text);

struct TrainConfig {
  Stage stage = Stage::pretrain;
  std::size_t batch_size = 16;
  std::size_t steps = 500;
  std::size_t pretrain_steps = 500;  // pretraining length inside ablation_matrix
  double lr = 0.01;
  LrSchedule schedule = LrSchedule::constant;
  std::uint64_t seed = 0;
  loss::LossConfig loss;
  OptimizerConfig optimizer;
  EncoderConfig encoder;
  std::size_t eval_every = 50;
  // Lets a pretraining run keep nonzero alpha and w_t2t.
  bool ablation = false;
  // Abort on triplets naming unknown images instead of dropping them.
  bool strict = true;
  bool include_reference = false;

  std::filesystem::path corpus;
  std::filesystem::path triplets;
  std::filesystem::path vocab;
  std::filesystem::path val_queries;
  std::filesystem::path test_queries;
  std::filesystem::path init_checkpoint;

  // Keys assigned by a config file or override, in the order first seen.
  std::vector<std::string> explicit_keys;

  bool is_explicit(std::string_view key) const;
};

// Applies one key=value assignment. Unknown keys and unparsable values raise
// ConfigError naming the key.
void apply_setting(TrainConfig& config, std::string_view key, std::string_view value);

// "key=value" overrides, applied in order.
void apply_overrides(TrainConfig& config, std::span<const std::string> overrides);

// Plain text, one key=value per line, '#' starts a comment. Errors carry the
// source name and line. Relative paths resolve against base_dir.
TrainConfig parse_config(std::string_view text, const std::string& source = "<config>",
                         const std::filesystem::path& base_dir = {});
TrainConfig load_config(const std::filesystem::path& path);

// Stage defaults: a pretraining run optimizes L_q2t alone, so alpha and
// w_t2t are forced to zero unless ablation is set.
TrainConfig resolve(TrainConfig config);

// Every key with its current value, in a fixed order; parse_config accepts it.
std::string snapshot(const TrainConfig& config);

// ---- checkpoints --------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

// File layout, little-endian:
//   "MTST", u32 version, u64 param count,
//   per param: u32 name length, name, u32 rank, u64 extents..., float32 values,
//   u64 step, u64 fingerprint, u64 FNV-1a of all preceding bytes.
struct Checkpoint {
  struct Param {
    std::string name;
    nd::Shape shape;
    std::vector<double> values;

    bool operator==(const Param&) const = default;
  };

  std::vector<Param> params;
  std::uint64_t step = 0;
  std::uint64_t fingerprint = 0;

  // Values narrowed to float32 exactly as they will be written.
  static Checkpoint capture(const nd::ParameterStore& store, std::uint64_t step);
  static Checkpoint load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string serialize() const;

  // Copies values into store. Names and shapes must match exactly; a
  // mismatch raises ConfigError with both fingerprints and the first
  // differing parameter.
  void restore(const nd::ParameterStore& store) const;

  bool operator==(const Checkpoint&) const = default;
};

// FNV-1a over parameter names and shapes, in registration order.
std::uint64_t architecture_fingerprint(const nd::ParameterStore& store);

// ---- batches ----------------------------------------------------------------------

// Epoch-wise shuffled mini-batches in which no target image repeats. A
// triplet whose target is already in the batch waits for the next batch.
class BatchSampler {
 public:
  BatchSampler(std::span<const Triplet> triplets, std::size_t batch_size, Rng rng);

  std::size_t batch_size() const { return batch_size_; }
  std::vector<Triplet> next();

 private:
  void refill();

  std::vector<Triplet> triplets_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> waiting_;
};

struct ResolveReport {
  std::vector<Triplet> kept;
  std::vector<std::string> dropped;  // one message per unresolvable triplet
};

// Triplets whose ids the stack cannot embed are dropped with a message, or
// raise MissingEmbeddingError when strict.
ResolveReport resolve_triplets(std::span<const Triplet> triplets, const EncoderStack& stack, bool strict);

// ---- trainer ------------------------------------------------------------------------

struct StepResult {
  loss::LossBreakdown breakdown;
  nd::GradientMap grads;
};

class Trainer {
 public:
  Trainer(const TrainConfig& config, Vocab vocab, std::span<const std::string> image_ids);

  const TrainConfig& config() const { return config_; }
  const EncoderStack& stack() const { return stack_; }
  const nd::ParameterStore& params() const { return params_; }
  double tau() const { return tau_.item(); }
  std::size_t steps_taken() const { return steps_; }

  // Loss and gradients on a batch without touching the parameters.
  StepResult evaluate_batch(std::span<const Triplet> batch, Stage stage) const;

  // L_q2t (and L_t2t in ablation mode) then one optimizer step.
  StepResult pretrain_step(std::span<const Triplet> batch);
  // The full weighted objective with detached reverse features, then one step.
  StepResult finetune_step(std::span<const Triplet> batch);
  StepResult step(std::span<const Triplet> batch);

  Checkpoint checkpoint() const { return Checkpoint::capture(params_, steps_); }
  void restore(const Checkpoint& checkpoint);

  double learning_rate(std::size_t step) const;

 private:
  StepResult apply(std::span<const Triplet> batch, Stage stage);

  TrainConfig config_;
  nd::ParameterStore params_;
  Rng rng_;
  EncoderStack stack_;
  nd::Tensor tau_;
  Optimizer optimizer_;
  std::size_t steps_ = 0;
};

// ---- runs -----------------------------------------------------------------------

struct RunResult {
  Checkpoint best;
  std::size_t best_step = 0;
  std::optional<double> best_headline;
  std::vector<loss::LossBreakdown> losses;
  std::vector<std::pair<std::size_t, eval::EvalReport>> validation;
  std::optional<eval::EvalReport> test;
  std::vector<std::string> dropped;
};

// Runs config.steps steps, evaluating the validation queries at step 0,
// every eval_every steps and at the end. The checkpoint of the best headline
// score (latest on ties) is kept; without validation queries the final
// parameters are. Refuses to reuse a directory that already has losses.jsonl.
RunResult run_stage(const TrainConfig& config, const std::filesystem::path& out_dir);

// Loss-flag triple of an ablation cell: which of q2t, t2t, p2p are active.
struct LossFlags {
  bool q2t = true;
  bool t2t = false;
  bool p2p = false;

  bool operator==(const LossFlags&) const = default;
};

struct AblationRow {
  bool pretrained = false;
  LossFlags flags;
  std::string name;
  eval::EvalReport report;
  double final_total = 0.0;
};

inline constexpr LossFlags kAblationFlags[] = {
    {true, false, false}, {true, true, false}, {true, false, true}, {true, true, true}};

// {without, with} pretraining x the four loss combinations. Inactive terms
// get zero weight; active ones keep the base weights. Every cell uses the
// base seed. Reports come from the test queries when given, else validation.
std::vector<AblationRow> ablation_matrix(const TrainConfig& base, const std::filesystem::path& out_dir);

nlohmann::json to_json(const loss::LossBreakdown& breakdown, std::size_t step);
nlohmann::json to_json(const AblationRow& row);

}  // namespace mtst::train
