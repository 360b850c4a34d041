#include "mtst/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "mtst/binary_io.hpp"
#include "mtst/error.hpp"

namespace mtst::train {

namespace fs = std::filesystem;
using nd::Tensor;
using nlohmann::json;

std::string_view to_string(Stage stage) { return stage == Stage::pretrain ? "pretrain" : "finetune"; }

std::optional<Stage> parse_stage(std::string_view text) {
  if (text == "pretrain") return Stage::pretrain;
  if (text == "finetune") return Stage::finetune;
  return std::nullopt;
}

bool TrainConfig::is_explicit(std::string_view key) const {
  return std::find(explicit_keys.begin(), explicit_keys.end(), key) != explicit_keys.end();
}

// ---- configuration -------------------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(value) + "' as " +
                    std::string(expected));
}

std::uint64_t parse_uint(std::string_view key, std::string_view value) {
  std::uint64_t out = 0;
  const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || end != value.data() + value.size()) bad_value(key, value, "a non-negative integer");
  return out;
}

double parse_double(std::string_view key, std::string_view value) {
  double out = 0.0;
  const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || end != value.data() + value.size() || !std::isfinite(out)) {
    bad_value(key, value, "a finite number");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "a boolean");
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void apply_setting(TrainConfig& c, std::string_view key, std::string_view value) {
  value = trim(value);
  key = trim(key);
  if (key == "stage") {
    const auto s = parse_stage(value);
    if (!s) bad_value(key, value, "pretrain|finetune");
    c.stage = *s;
  } else if (key == "batch_size") {
    c.batch_size = parse_uint(key, value);
    if (c.batch_size == 0) bad_value(key, value, "a positive integer");
  } else if (key == "steps") {
    c.steps = parse_uint(key, value);
  } else if (key == "pretrain_steps") {
    c.pretrain_steps = parse_uint(key, value);
  } else if (key == "lr") {
    c.lr = parse_double(key, value);
    if (c.lr < 0.0) bad_value(key, value, "a non-negative number");
  } else if (key == "schedule") {
    if (value == "constant") {
      c.schedule = LrSchedule::constant;
    } else if (value == "linear") {
      c.schedule = LrSchedule::linear;
    } else {
      bad_value(key, value, "constant|linear");
    }
  } else if (key == "seed") {
    c.seed = parse_uint(key, value);
  } else if (key == "alpha") {
    c.loss.alpha = parse_double(key, value);
    if (c.loss.alpha < 0.0) bad_value(key, value, "a non-negative number");
  } else if (key == "w_t2t") {
    c.loss.w_t2t = parse_double(key, value);
    if (c.loss.w_t2t < 0.0) bad_value(key, value, "a non-negative number");
  } else if (key == "tau_init") {
    c.loss.tau_init = parse_double(key, value);
    if (c.loss.tau_init <= 0.0) bad_value(key, value, "a positive number");
  } else if (key == "pooling") {
    const auto p = loss::parse_pooling(value);
    if (!p) bad_value(key, value, "cls|avg_with_cls");
    c.loss.pooling = *p;
  } else if (key == "optimizer") {
    const auto k = parse_optimizer(value);
    if (!k) bad_value(key, value, "sgd|adam");
    c.optimizer.kind = *k;
  } else if (key == "momentum") {
    c.optimizer.momentum = parse_double(key, value);
  } else if (key == "beta1") {
    c.optimizer.beta1 = parse_double(key, value);
  } else if (key == "beta2") {
    c.optimizer.beta2 = parse_double(key, value);
  } else if (key == "tokens") {
    c.encoder.tokens = parse_uint(key, value);
    if (c.encoder.tokens == 0) bad_value(key, value, "a positive integer");
  } else if (key == "width") {
    c.encoder.width = parse_uint(key, value);
    if (c.encoder.width == 0) bad_value(key, value, "a positive integer");
  } else if (key == "image_width") {
    c.encoder.image_width = parse_uint(key, value);
    if (c.encoder.image_width == 0) bad_value(key, value, "a positive integer");
  } else if (key == "max_text_len") {
    c.encoder.max_text_len = parse_uint(key, value);
    if (c.encoder.max_text_len < 2) bad_value(key, value, "an integer of at least 2");
  } else if (key == "reverse_probe") {
    c.encoder.reverse_probe = parse_bool(key, value);
  } else if (key == "eval_every") {
    c.eval_every = parse_uint(key, value);
    if (c.eval_every == 0) bad_value(key, value, "a positive integer");
  } else if (key == "ablation") {
    c.ablation = parse_bool(key, value);
  } else if (key == "strict") {
    c.strict = parse_bool(key, value);
  } else if (key == "include_reference") {
    c.include_reference = parse_bool(key, value);
  } else if (key == "corpus") {
    c.corpus = std::string(value);
  } else if (key == "triplets") {
    c.triplets = std::string(value);
  } else if (key == "vocab") {
    c.vocab = std::string(value);
  } else if (key == "val_queries") {
    c.val_queries = std::string(value);
  } else if (key == "test_queries") {
    c.test_queries = std::string(value);
  } else if (key == "init_checkpoint") {
    c.init_checkpoint = std::string(value);
  } else {
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }
  if (!c.is_explicit(key)) c.explicit_keys.emplace_back(key);
}

void apply_overrides(TrainConfig& config, std::span<const std::string> overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    apply_setting(config, std::string_view(o).substr(0, eq), std::string_view(o).substr(eq + 1));
  }
}

TrainConfig parse_config(std::string_view text, const std::string& source, const fs::path& base_dir) {
  TrainConfig c;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find('\n', start), text.size());
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(source, line_no, "expected key=value");
    try {
      apply_setting(c, line.substr(0, eq), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ParseError(source, line_no, e.what());
    }
  }
  if (!base_dir.empty()) {
    for (fs::path* p : {&c.corpus, &c.triplets, &c.vocab, &c.val_queries, &c.test_queries, &c.init_checkpoint}) {
      if (!p->empty() && p->is_relative()) *p = base_dir / *p;
    }
  }
  return c;
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string(), path.parent_path());
}

TrainConfig resolve(TrainConfig config) {
  if (config.stage == Stage::pretrain && !config.ablation) {
    config.loss.alpha = 0.0;
    config.loss.w_t2t = 0.0;
  }
  return config;
}

std::string snapshot(const TrainConfig& c) {
  std::ostringstream os;
  os << "stage=" << to_string(c.stage) << '\n'
     << "batch_size=" << c.batch_size << '\n'
     << "steps=" << c.steps << '\n'
     << "pretrain_steps=" << c.pretrain_steps << '\n'
     << "lr=" << format_double(c.lr) << '\n'
     << "schedule=" << (c.schedule == LrSchedule::constant ? "constant" : "linear") << '\n'
     << "seed=" << c.seed << '\n'
     << "alpha=" << format_double(c.loss.alpha) << '\n'
     << "w_t2t=" << format_double(c.loss.w_t2t) << '\n'
     << "tau_init=" << format_double(c.loss.tau_init) << '\n'
     << "pooling=" << loss::to_string(c.loss.pooling) << '\n'
     << "optimizer=" << to_string(c.optimizer.kind) << '\n'
     << "momentum=" << format_double(c.optimizer.momentum) << '\n'
     << "beta1=" << format_double(c.optimizer.beta1) << '\n'
     << "beta2=" << format_double(c.optimizer.beta2) << '\n'
     << "tokens=" << c.encoder.tokens << '\n'
     << "width=" << c.encoder.width << '\n'
     << "image_width=" << c.encoder.image_width << '\n'
     << "max_text_len=" << c.encoder.max_text_len << '\n'
     << "reverse_probe=" << (c.encoder.reverse_probe ? "true" : "false") << '\n'
     << "eval_every=" << c.eval_every << '\n'
     << "ablation=" << (c.ablation ? "true" : "false") << '\n'
     << "strict=" << (c.strict ? "true" : "false") << '\n'
     << "include_reference=" << (c.include_reference ? "true" : "false") << '\n';
  auto path = [&os](const char* key, const fs::path& p) {
    if (!p.empty()) os << key << '=' << p.string() << '\n';
  };
  path("corpus", c.corpus);
  path("triplets", c.triplets);
  path("vocab", c.vocab);
  path("val_queries", c.val_queries);
  path("test_queries", c.test_queries);
  path("init_checkpoint", c.init_checkpoint);
  return os.str();
}

// ---- checkpoints ----------------------------------------------------------------------

namespace {

void hash_shape(std::string& buf, const std::string& name, const nd::Shape& shape) {
  buf += name;
  buf += '\0';
  buf += nd::shape_str(shape);
  buf += '\n';
}

std::uint64_t fingerprint_of(std::span<const Checkpoint::Param> params) {
  std::string buf;
  for (const auto& p : params) hash_shape(buf, p.name, p.shape);
  return io::fnv1a(buf);
}

}  // namespace

std::uint64_t architecture_fingerprint(const nd::ParameterStore& store) {
  std::string buf;
  for (const auto& e : store.entries()) hash_shape(buf, e.name, e.tensor.shape());
  return io::fnv1a(buf);
}

Checkpoint Checkpoint::capture(const nd::ParameterStore& store, std::uint64_t step) {
  Checkpoint c;
  c.step = step;
  for (const auto& e : store.entries()) {
    Param p{e.name, e.tensor.shape(), {}};
    p.values.reserve(e.tensor.size());
    for (double v : e.tensor.values()) p.values.push_back(static_cast<double>(static_cast<float>(v)));
    c.params.push_back(std::move(p));
  }
  c.fingerprint = architecture_fingerprint(store);
  return c;
}

std::string Checkpoint::serialize() const {
  io::Writer out;
  out.raw("MTST");
  out.u32(kCheckpointVersion);
  out.u64(params.size());
  for (const auto& p : params) {
    out.u32(static_cast<std::uint32_t>(p.name.size()));
    out.raw(p.name);
    out.u32(static_cast<std::uint32_t>(p.shape.size()));
    for (std::size_t extent : p.shape) out.u64(extent);
    if (p.values.size() != nd::element_count(p.shape)) {
      throw DimensionError("checkpoint parameter '" + p.name + "' has " + std::to_string(p.values.size()) +
                           " values for shape " + nd::shape_str(p.shape));
    }
    out.f32_array(p.values);
  }
  out.u64(step);
  out.u64(fingerprint);
  std::string bytes = out.buffer();
  io::Writer tail;
  tail.u64(io::fnv1a(bytes));
  bytes += tail.buffer();
  return bytes;
}

void Checkpoint::save(const fs::path& path) const {
  const std::string bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint Checkpoint::load(const fs::path& path) {
  io::Reader in(path);
  in.expect_magic("MTST");
  const auto version_at = in.offset();
  const auto version = in.u32();
  if (version != kCheckpointVersion) in.fail(version_at, "unsupported checkpoint version " + std::to_string(version));
  const auto count_at = in.offset();
  const auto count = in.u64();
  // Every record takes at least 8 bytes, which bounds a sane count.
  if (count > in.remaining() / 8) in.fail(count_at, "parameter count " + std::to_string(count) + " exceeds file size");
  Checkpoint c;
  std::unordered_set<std::string> names;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto record_at = in.offset();
    const auto name_len = in.u32();
    if (name_len == 0) in.fail(record_at, "empty parameter name");
    Param p{in.bytes(name_len), {}, {}};
    if (!names.insert(p.name).second) in.fail(record_at, "duplicate parameter '" + p.name + "'");
    const auto rank_at = in.offset();
    const auto rank = in.u32();
    if (rank > 8) in.fail(rank_at, "rank " + std::to_string(rank) + " of '" + p.name + "' is implausible");
    std::uint64_t elements = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto extent_at = in.offset();
      const auto extent = in.u64();
      if (extent == 0) in.fail(extent_at, "zero extent in '" + p.name + "'");
      if (extent > in.remaining() / 4 || elements > in.remaining() / 4 / extent) {
        in.fail(extent_at, "shape of '" + p.name + "' exceeds file size");
      }
      elements *= extent;
      p.shape.push_back(static_cast<std::size_t>(extent));
    }
    p.values = in.f32_array(static_cast<std::size_t>(elements));
    c.params.push_back(std::move(p));
  }
  c.step = in.u64();
  const auto fingerprint_at = in.offset();
  c.fingerprint = in.u64();
  if (c.fingerprint != fingerprint_of(c.params)) {
    in.fail(fingerprint_at, "fingerprint does not match the parameter records");
  }
  const auto checksum = io::fnv1a(in.consumed());
  const auto checksum_at = in.offset();
  if (in.u64() != checksum) in.fail(checksum_at, "checksum mismatch");
  in.expect_end();
  return c;
}

void Checkpoint::restore(const nd::ParameterStore& store) const {
  const auto model = architecture_fingerprint(store);
  auto mismatch = [&](const std::string& detail) {
    std::ostringstream os;
    os << "checkpoint fingerprint mismatch: checkpoint " << std::hex << fingerprint << ", model " << model << std::dec
       << "; " << detail;
    throw ConfigError(os.str());
  };
  const auto entries = store.entries();
  for (std::size_t i = 0; i < std::max(entries.size(), params.size()); ++i) {
    if (i >= params.size()) mismatch("model parameter '" + entries[i].name + "' missing from checkpoint");
    if (i >= entries.size()) mismatch("checkpoint parameter '" + params[i].name + "' unknown to model");
    if (entries[i].name != params[i].name) {
      mismatch("parameter " + std::to_string(i) + " is '" + params[i].name + "' in checkpoint, '" + entries[i].name +
               "' in model");
    }
    if (entries[i].tensor.shape() != params[i].shape) {
      mismatch("'" + params[i].name + "' has shape " + nd::shape_str(params[i].shape) + " in checkpoint, " +
               nd::shape_str(entries[i].tensor.shape()) + " in model");
    }
  }
  if (fingerprint != model) mismatch("stored fingerprint differs");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = entries[i].tensor;
    t.assign(params[i].values);
  }
}

// ---- batches ----------------------------------------------------------------------

BatchSampler::BatchSampler(std::span<const Triplet> triplets, std::size_t batch_size, Rng rng)
    : triplets_(triplets.begin(), triplets.end()), batch_size_(batch_size), rng_(rng) {
  if (triplets_.empty()) throw ContractError("BatchSampler: no triplets");
  if (batch_size == 0) throw ContractError("BatchSampler: batch size must be positive");
  std::unordered_set<std::string_view> targets;
  for (const auto& t : triplets_) targets.insert(t.target_id);
  batch_size_ = std::min(batch_size_, targets.size());
  refill();
}

void BatchSampler::refill() {
  order_.resize(triplets_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  rng_.shuffle(order_);
  cursor_ = 0;
}

std::vector<Triplet> BatchSampler::next() {
  std::vector<Triplet> batch;
  std::unordered_set<std::string_view> targets;
  std::vector<std::size_t> deferred;
  auto offer = [&](std::size_t idx) {
    if (batch.size() < batch_size_ && targets.insert(triplets_[idx].target_id).second) {
      batch.push_back(triplets_[idx]);
    } else {
      deferred.push_back(idx);
    }
  };
  for (std::size_t idx : waiting_) offer(idx);
  while (batch.size() < batch_size_) {
    if (cursor_ == order_.size()) refill();
    offer(order_[cursor_++]);
  }
  waiting_ = std::move(deferred);
  return batch;
}

ResolveReport resolve_triplets(std::span<const Triplet> triplets, const EncoderStack& stack, bool strict) {
  ResolveReport report;
  for (const auto& t : triplets) {
    const std::string* missing = !stack.has_image(t.ref_id)      ? &t.ref_id
                                 : !stack.has_image(t.target_id) ? &t.target_id
                                                                 : nullptr;
    if (!missing) {
      report.kept.push_back(t);
      continue;
    }
    if (strict) throw MissingEmbeddingError(*missing);
    report.dropped.push_back("triplet " + t.ref_id + " -> " + t.target_id + ": no embedding for '" + *missing + "'");
  }
  return report;
}

// ---- trainer -----------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& config, Vocab vocab, std::span<const std::string> image_ids)
    : config_(config),
      rng_(config.seed),
      stack_(config.encoder, std::move(vocab), image_ids, params_, rng_),
      tau_(params_.add("loss.tau", Tensor::scalar(loss::clamp_tau(config.loss.tau_init)))),
      optimizer_(config.optimizer) {}

double Trainer::learning_rate(std::size_t step) const {
  if (config_.schedule == LrSchedule::constant || config_.steps == 0) return config_.lr;
  const double done = static_cast<double>(std::min(step, config_.steps) - (step > 0 ? 1 : 0));
  return config_.lr * (1.0 - done / static_cast<double>(config_.steps));
}

StepResult Trainer::evaluate_batch(std::span<const Triplet> batch, Stage stage) const {
  if (batch.empty()) throw ContractError("empty batch");
  loss::LossConfig lc = config_.loss;
  if (stage == Stage::pretrain && !config_.ablation) {
    lc.alpha = 0.0;
    lc.w_t2t = 0.0;
  }
  const bool all_reverse =
      std::all_of(batch.begin(), batch.end(), [](const Triplet& t) { return t.reverse_modifier.has_value(); });
  bool with_reverse = lc.alpha > 0.0;
  if (stage == Stage::finetune) with_reverse = with_reverse || all_reverse;
  std::vector<FeatureBundle> features;
  features.reserve(batch.size());
  for (const auto& t : batch) features.push_back(stack_.encode_triplet(t, with_reverse));
  auto total = loss::total_loss(features, lc, tau_);
  return {total.breakdown, nd::backward(total.value, params_)};
}

StepResult Trainer::apply(std::span<const Triplet> batch, Stage stage) {
  StepResult r = evaluate_batch(batch, stage);
  optimizer_.step(params_, r.grads, learning_rate(steps_ + 1));
  ++steps_;
  tau_.mutable_values()[0] = loss::clamp_tau(tau_.item());
  return r;
}

StepResult Trainer::pretrain_step(std::span<const Triplet> batch) { return apply(batch, Stage::pretrain); }
StepResult Trainer::finetune_step(std::span<const Triplet> batch) { return apply(batch, Stage::finetune); }
StepResult Trainer::step(std::span<const Triplet> batch) { return apply(batch, config_.stage); }

void Trainer::restore(const Checkpoint& checkpoint) { checkpoint.restore(params_); }

// ---- runs ---------------------------------------------------------------------------------

json to_json(const loss::LossBreakdown& b, std::size_t step) {
  return json{{"step", step}, {"L_q2t", b.q2t}, {"L_t2t", b.t2t}, {"L_p2p", b.p2p}, {"total", b.total},
              {"tau", b.tau}};
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

Vocab run_vocab(const TrainConfig& c, std::span<const Triplet> triplets) {
  if (!c.vocab.empty()) return Vocab::load(c.vocab);
  if (!c.init_checkpoint.empty()) {
    const auto beside = c.init_checkpoint.parent_path() / "vocab.txt";
    if (fs::exists(beside)) return Vocab::load(beside);
  }
  std::vector<std::string> texts;
  for (const auto& t : triplets) {
    texts.push_back(t.modifier);
    if (t.reverse_modifier) texts.push_back(*t.reverse_modifier);
  }
  return Vocab::build(texts);
}

std::vector<std::string> run_images(const TrainConfig& c, std::span<const Triplet> triplets,
                                    std::span<const eval::EvalQuery> val, std::span<const eval::EvalQuery> test) {
  std::vector<std::string> ids;
  if (!c.corpus.empty()) {
    for (auto& r : load_corpus(c.corpus)) ids.push_back(std::move(r.id));
    return ids;
  }
  std::set<std::string> all;
  for (const auto& t : triplets) all.insert({t.ref_id, t.target_id});
  for (auto queries : {val, test}) {
    for (const auto& q : queries) {
      all.insert({q.ref_id, q.target_id});
      if (q.subset_ids) all.insert(q.subset_ids->begin(), q.subset_ids->end());
    }
  }
  return {all.begin(), all.end()};
}

json report_row(const eval::EvalReport& report, std::size_t step) {
  json row{{"step", step}};
  row.update(eval::to_json(report));
  row["headline"] = report.headline();
  return row;
}

}  // namespace

RunResult run_stage(const TrainConfig& config, const fs::path& out_dir) {
  const TrainConfig cfg = resolve(config);
  if (cfg.triplets.empty()) throw ConfigError("config key 'triplets' is required for training");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create run directory " + out_dir.string() + ": " + ec.message());
  if (fs::exists(out_dir / "losses.jsonl")) {
    throw ContractError("run directory " + out_dir.string() + " already holds losses.jsonl; use a fresh --out");
  }

  const auto triplets = load_triplets(cfg.triplets);
  const auto val = cfg.val_queries.empty() ? std::vector<eval::EvalQuery>{} : eval::load_queries(cfg.val_queries);
  const auto test = cfg.test_queries.empty() ? std::vector<eval::EvalQuery>{} : eval::load_queries(cfg.test_queries);
  Vocab vocab = run_vocab(cfg, triplets);
  const auto images = run_images(cfg, triplets, val, test);

  Trainer trainer(cfg, vocab, images);
  if (!cfg.init_checkpoint.empty()) trainer.restore(Checkpoint::load(cfg.init_checkpoint));

  RunResult result;
  auto resolved = resolve_triplets(triplets, trainer.stack(), cfg.strict);
  result.dropped = std::move(resolved.dropped);
  if (cfg.steps > 0 && resolved.kept.empty()) throw ContractError("no usable triplets in " + cfg.triplets.string());

  write_text(out_dir / "config.snapshot", snapshot(cfg));
  vocab.save(out_dir / "vocab.txt");

  std::ofstream losses(out_dir / "losses.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream evals(out_dir / "eval.jsonl", std::ios::binary | std::ios::trunc);
  if (!losses || !evals) throw IoError("cannot write logs in " + out_dir.string());

  const eval::SubsetOptions subset{cfg.include_reference};
  auto validate = [&](std::size_t step) {
    const auto gallery = eval::Gallery::encode(trainer.stack());
    auto report = eval::evaluate(val, gallery, trainer.stack(), cfg.loss.pooling, subset);
    evals << report_row(report, step).dump() << '\n';
    const double h = report.headline();
    if (!result.best_headline || h >= *result.best_headline) {
      result.best_headline = h;
      result.best = trainer.checkpoint();
      result.best_step = step;
    }
    result.validation.emplace_back(step, std::move(report));
  };

  if (!val.empty()) validate(0);
  if (cfg.steps > 0) {
    Rng data_rng(cfg.seed);
    BatchSampler sampler(resolved.kept, cfg.batch_size, data_rng.split(0xba7c4));
    for (std::size_t s = 1; s <= cfg.steps; ++s) {
      const auto batch = sampler.next();
      const auto r = trainer.step(batch);
      losses << to_json(r.breakdown, s).dump() << '\n';
      result.losses.push_back(r.breakdown);
      if (!val.empty() && (s % cfg.eval_every == 0 || s == cfg.steps)) validate(s);
    }
  }
  if (val.empty()) {
    result.best = trainer.checkpoint();
    result.best_step = cfg.steps;
  }
  losses.close();
  evals.close();
  if (!losses || !evals) throw IoError("write failed for logs in " + out_dir.string());
  result.best.save(out_dir / "checkpoint.bin");

  if (!test.empty()) {
    trainer.restore(result.best);
    const auto gallery = eval::Gallery::encode(trainer.stack());
    result.test = eval::evaluate(test, gallery, trainer.stack(), cfg.loss.pooling, subset);
    json row = report_row(*result.test, result.best_step);
    row["split"] = "test";
    write_text(out_dir / "report.json", row.dump(2) + "\n");
  }
  return result;
}

json to_json(const AblationRow& row) {
  json out{{"cell", row.name},
           {"pretrained", row.pretrained},
           {"loss_flags", {{"q2t", row.flags.q2t}, {"t2t", row.flags.t2t}, {"p2p", row.flags.p2p}}},
           {"final_total", row.final_total}};
  out["report"] = eval::to_json(row.report);
  out["headline"] = row.report.headline();
  return out;
}

std::vector<AblationRow> ablation_matrix(const TrainConfig& base, const fs::path& out_dir) {
  if (base.val_queries.empty() && base.test_queries.empty()) {
    throw ConfigError("ablation needs val_queries or test_queries for its reports");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  TrainConfig pre = base;
  pre.stage = Stage::pretrain;
  pre.steps = base.pretrain_steps;
  pre.ablation = false;
  const fs::path pre_dir = out_dir / "pretrain";
  run_stage(pre, pre_dir);

  std::vector<AblationRow> rows;
  for (bool pretrained : {false, true}) {
    for (const LossFlags& flags : kAblationFlags) {
      TrainConfig cell = base;
      cell.stage = Stage::finetune;
      cell.loss.w_t2t = flags.t2t ? base.loss.w_t2t : 0.0;
      cell.loss.alpha = flags.p2p ? base.loss.alpha : 0.0;
      cell.init_checkpoint.clear();
      if (pretrained) {
        cell.init_checkpoint = pre_dir / "checkpoint.bin";
        cell.vocab = pre_dir / "vocab.txt";
      }
      AblationRow row;
      row.pretrained = pretrained;
      row.flags = flags;
      row.name = std::string(pretrained ? "pretrain" : "scratch") + "_q2t" + (flags.t2t ? "_t2t" : "") +
                 (flags.p2p ? "_p2p" : "");
      const auto r = run_stage(cell, out_dir / row.name);
      if (r.test) {
        row.report = *r.test;
      } else {
        for (const auto& [step, report] : r.validation) {
          if (step == r.best_step) row.report = report;
        }
      }
      row.final_total = r.losses.empty() ? 0.0 : r.losses.back().total;
      rows.push_back(std::move(row));
    }
  }
  std::vector<json> lines;
  for (const auto& row : rows) lines.push_back(to_json(row));
  write_jsonl(out_dir / "ablation.jsonl", lines);
  return rows;
}

}  // namespace mtst::train
