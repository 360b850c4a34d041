// End-to-end acceptance checks. Prints one PASS or FAIL line per criterion and
// exits nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "metric_oracle.hpp"
#include "mtst/error.hpp"
#include "mtst/gradcheck.hpp"
#include "mtst/losses.hpp"
#include "mtst/mining.hpp"
#include "mtst/planted.hpp"
#include "mtst/textgen.hpp"
#include "mtst/trainer.hpp"
#include "support.hpp"

using namespace mtst;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void report(int id, bool ok, const std::string& detail) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void guarded(int id, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(id, false, std::string("exception: ") + e.what());
  }
}

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

// ---- 1: pair counts ------------------------------------------------------------------

void pair_counts() {
  const auto start = Clock::now();
  std::vector<ImageRecord> sets;
  for (int s = 0; s < 3345; ++s)
    for (int i = 0; i < 6; ++i)
      sets.push_back(make_image("s" + std::to_string(s) + "_" + std::to_string(i), {}, "set" + std::to_string(s)));
  const auto set_pairs = mining::mine_set_pairs(sets).size();

  std::vector<ImageRecord> label;
  for (int i = 0; i < 1006; ++i) label.push_back(make_image("l" + std::to_string(i), {"shared"}));
  const auto uncapped = mining::mine_label_pairs_capped(label, mining::kUncapped, 1).size();
  const auto capped = mining::mine_label_pairs_capped(label, 3.0, 1).size();
  const bool budget = mining::label_pair_budget(1006, mining::kUncapped) == 1011030 &&
                      mining::label_pair_budget(1006, 3.0) == 3018;
  const double secs = seconds_since(start);
  report(1, set_pairs == 100350 && uncapped == 1011030 && capped == 3018 && budget && secs < 10.0,
         fmt("set pairs %zu, label pairs %zu uncapped / %zu capped, %.2f s", set_pairs, uncapped, capped, secs));
}

// ---- 2: gradient suite ---------------------------------------------------------------

void gradient_suite() {
  const auto start = Clock::now();
  const auto r = gradcheck::run_suite({});
  const double secs = seconds_since(start);
  report(2, r.max_rel_error < 1e-4 && r.instances >= 100 && secs < 60.0,
         fmt("max relative error %.3e over %zu instances in %zu cases, %.1f s", r.max_rel_error, r.instances,
             r.cases.size(), secs));
}

// ---- planted data --------------------------------------------------------------------

const fs::path& root() {
  static const fs::path dir = test::scratch_dir("acceptance");
  return dir;
}

const fs::path& planted_dir() {
  static const fs::path dir = [] {
    const auto d = root() / "planted";
    planted::write_planted(planted::make_planted({}), d);
    return d;
  }();
  return dir;
}

train::TrainConfig planted_config() {
  train::TrainConfig c;
  c.encoder.tokens = 8;
  c.encoder.width = 64;
  c.encoder.image_width = 64;
  c.batch_size = 64;
  c.optimizer.kind = train::OptimizerKind::adam;
  c.lr = 0.01;
  c.steps = 500;
  c.pretrain_steps = 500;
  c.seed = 7;
  c.loss.alpha = 0.5;
  c.loss.w_t2t = 0.4;
  const auto& d = planted_dir();
  c.corpus = d / "corpus.jsonl";
  c.triplets = d / "triplets.jsonl";
  c.val_queries = d / "val.jsonl";
  c.test_queries = d / "test.jsonl";
  return c;
}

struct PipelineResult {
  train::RunResult finetune;
  double seconds = 0.0;
};

// Pretraining followed by finetuning from its best checkpoint.
PipelineResult pipeline(const train::TrainConfig& base, const fs::path& dir) {
  const auto start = Clock::now();
  auto pre = base;
  pre.stage = train::Stage::pretrain;
  pre.steps = base.pretrain_steps;
  train::run_stage(pre, dir / "pretrain");
  auto fine = base;
  fine.stage = train::Stage::finetune;
  fine.init_checkpoint = dir / "pretrain" / "checkpoint.bin";
  fine.vocab = dir / "pretrain" / "vocab.txt";
  PipelineResult out{train::run_stage(fine, dir / "finetune"), 0.0};
  out.seconds = seconds_since(start);
  return out;
}

// ---- 3: reverse branch stays frozen --------------------------------------------------

void reverse_branch_frozen() {
  auto cfg = planted_config();
  cfg.stage = train::Stage::finetune;
  cfg.encoder.reverse_probe = true;
  const auto data = planted::make_planted({});
  std::vector<std::string> ids, texts;
  for (const auto& r : data.corpus) ids.push_back(r.id);
  for (const auto& t : data.train) {
    texts.push_back(t.modifier);
    texts.push_back(*t.reverse_modifier);
  }
  train::Trainer trainer(cfg, Vocab::build(texts), ids);
  const std::string probe = "retrieval.reverse_probe";
  const auto initial = test::values(trainer.params().get(probe));
  train::BatchSampler sampler(data.train, cfg.batch_size, Rng(cfg.seed));
  std::size_t zero_steps = 0;
  for (int s = 0; s < 50; ++s) {
    const auto r = trainer.finetune_step(sampler.next());
    const auto g = test::values(r.grads.at(probe));
    bool all_zero = r.breakdown.alpha > 0.0;
    for (double x : g) all_zero = all_zero && x == 0.0 && !std::signbit(x);
    zero_steps += all_zero;
  }
  const bool unchanged = test::values(trainer.params().get(probe)) == initial;
  report(3, zero_steps == 50 && unchanged,
         fmt("reverse-only gradient exactly zero on %zu of 50 steps with alpha 0.5, values %s", zero_steps,
             unchanged ? "unchanged" : "changed"));
}

// ---- 4: closed forms -----------------------------------------------------------------

void closed_forms() {
  nd::ParameterStore params;
  Rng rng(4);
  EncoderConfig ec;
  ec.tokens = 4;
  ec.width = 8;
  ec.image_width = 8;
  const std::vector<std::string> ids{"a", "b"};
  const std::vector<std::string> words{"add red remove blue"};
  EncoderStack stack(ec, Vocab::build(words), ids, params, rng);
  const auto tau = nd::Tensor::scalar(0.07);
  const Triplet t{"a", "b", "add red", Provenance::oracle, "remove red"};
  const auto bundle = stack.encode_triplet(t, false);
  const std::vector<FeatureBundle> one{bundle};
  const double l1 = loss::loss_q2t(one, tau, loss::Pooling::cls).item();
  const std::vector<FeatureBundle> two{bundle, bundle};
  const double l2 = loss::loss_q2t(two, tau, loss::Pooling::cls).item();

  textgen::GeneratorConfig gc;
  gc.encoder = ec;
  gc.llm_width = 8;
  gc.zero_output_head = true;
  nd::ParameterStore gen_params;
  textgen::Generator gen(gc, Vocab::build(words), ids, gen_params, rng);
  const auto in = textgen::assemble_input("a", "b", gen.instruction_ids(), gen);
  const auto tokens = gen.tokenize("add red remove blue");
  const double lm = textgen::lm_loss(in, tokens, gen.decoder()).item();
  const double ln_v = std::log(static_cast<double>(gen.vocab().size()));

  report(4, l1 == 0.0 && std::abs(l2 - std::log(2.0)) <= 1e-6 && std::abs(lm - ln_v) <= 1e-3,
         fmt("q2t %.3g at |B|=1, %.9f at |B|=2 (ln 2 = %.9f), lm %.6f vs ln|V| %.6f", l1, l2, std::log(2.0), lm,
             ln_v));
}

// ---- 5: metric oracle ----------------------------------------------------------------

void metric_oracle() {
  Rng rng(5);
  std::size_t agree = 0, monotone = 0;
  const std::size_t n = 1000;
  for (std::size_t i = 0; i < n; ++i) {
    const auto inst = test::random_metric_instance(rng, 50);
    const auto c = test::check_metric_instance(*inst);
    agree += c.rankings_match && c.recall_match && c.subset_match;
    monotone += c.monotone;
  }
  report(5, agree == n && monotone == n,
         fmt("%zu of %zu instances match brute force, %zu monotone in K", agree, n, monotone));
}

// ---- 6 and 9: planted run and determinism ---------------------------------------------

// Reports criterion 6 and returns the determinism verdict for criterion 9.
std::pair<bool, std::string> planted_runs() {
  const auto cfg = planted_config();
  const auto a = pipeline(cfg, root() / "run_a");
  const auto b = pipeline(cfg, root() / "run_b");
  auto frozen = cfg;
  frozen.lr = 0.0;
  const auto z = pipeline(frozen, root() / "run_lr0");

  const std::size_t gallery = planted::make_planted({}).corpus.size();
  const double r1 = a.finetune.test->recall.at(1);
  const double r1_frozen = z.finetune.test->recall.at(1);
  const double chance = 3.0 / static_cast<double>(gallery);
  report(6, r1 >= 0.9 && r1_frozen <= chance && a.seconds < 300.0,
         fmt("R@1 %.3f on %zu test queries, lr=0 R@1 %.3f (bound %.4f), %.1f s", r1, a.finetune.test->n_queries,
             r1_frozen, chance, a.seconds));

  bool same = true;
  for (const char* stage : {"pretrain", "finetune"})
    for (const char* file : {"losses.jsonl", "eval.jsonl"})
      same = same && test::read_file(root() / "run_a" / stage / file) == test::read_file(root() / "run_b" / stage / file);
  return {same, same ? "losses.jsonl and eval.jsonl byte-identical across two runs"
                     : "log files differ between two identical runs"};
}

// ---- 7: ablation matrix --------------------------------------------------------------

void ablation() {
  const auto dir = root() / "ablation";
  planted::write_planted(planted::make_planted({.groups = 5, .variants = 5, .val_queries = 10, .test_queries = 10}),
                         dir / "data");
  train::TrainConfig c;
  c.encoder.tokens = 4;
  c.encoder.width = 16;
  c.encoder.image_width = 16;
  c.batch_size = 16;
  c.optimizer.kind = train::OptimizerKind::adam;
  c.steps = 30;
  c.pretrain_steps = 30;
  c.eval_every = 10;
  c.seed = 7;
  c.corpus = dir / "data" / "corpus.jsonl";
  c.triplets = dir / "data" / "triplets.jsonl";
  c.val_queries = dir / "data" / "val.jsonl";
  c.test_queries = dir / "data" / "test.jsonl";
  const auto rows = train::ablation_matrix(c, dir / "grid");
  const auto lines = test::lines(test::read_file(dir / "grid" / "ablation.jsonl"));

  auto plain = c;
  plain.stage = train::Stage::finetune;
  plain.loss.alpha = 0.0;
  plain.loss.w_t2t = 0.0;
  const auto p = train::run_stage(plain, dir / "plain");
  const bool same_log = test::read_file(dir / "plain" / "losses.jsonl") ==
                        test::read_file(dir / "grid" / "scratch_q2t" / "losses.jsonl");
  const bool same_report =
      !rows.empty() && rows[0].name == "scratch_q2t" && p.test &&
      eval::to_json(*p.test).dump() == eval::to_json(rows[0].report).dump();
  report(7, rows.size() == 8 && lines.size() == 8 && same_log && same_report,
         fmt("%zu reports, %zu ablation lines, scratch q2t-only cell %s the plain run", rows.size(), lines.size(),
             same_log && same_report ? "equals" : "differs from"));
}

// ---- 8: file round trips -------------------------------------------------------------

std::optional<std::uint64_t> load_offset(const std::function<void()>& load) {
  try {
    load();
  } catch (const FormatError& e) {
    return e.offset();
  }
  return std::nullopt;
}

void round_trips() {
  const auto dir = root() / "files";
  fs::create_directories(dir);
  auto cfg = planted_config();
  const auto data = planted::make_planted({});
  std::vector<std::string> ids, texts;
  for (const auto& r : data.corpus) ids.push_back(r.id);
  for (const auto& t : data.train) texts.push_back(t.modifier);
  train::Trainer trainer(cfg, Vocab::build(texts), ids);
  train::BatchSampler sampler(data.train, cfg.batch_size, Rng(1));
  for (int s = 0; s < 3; ++s) trainer.step(sampler.next());

  const auto ck = trainer.checkpoint();
  ck.save(dir / "a.bin");
  const auto ck_back = train::Checkpoint::load(dir / "a.bin");
  ck_back.save(dir / "b.bin");
  const auto ck_bytes = test::read_file(dir / "a.bin");
  const bool ck_ok = ck_back == ck && ck_bytes == test::read_file(dir / "b.bin");

  const auto g = eval::Gallery::encode(trainer.stack());
  g.save(dir / "g.bin");
  const auto g_back = eval::Gallery::load(dir / "g.bin");
  g_back.save(dir / "h.bin");
  const auto g_bytes = test::read_file(dir / "g.bin");
  const bool g_ok = g_bytes == test::read_file(dir / "h.bin") && g_back.ids() == g.ids();

  auto corrupt = [&](std::string bytes, std::size_t at, char value, const fs::path& path) {
    bytes[at] = value;
    test::write_file(path, bytes);
  };
  corrupt(ck_bytes, 0, 'X', dir / "bad_magic.bin");
  corrupt(ck_bytes, 4, 9, dir / "bad_version.bin");
  corrupt(g_bytes, 0, 'X', dir / "bad_gmagic.bin");
  corrupt(g_bytes, 4, 9, dir / "bad_gversion.bin");
  const auto o1 = load_offset([&] { train::Checkpoint::load(dir / "bad_magic.bin"); });
  const auto o2 = load_offset([&] { train::Checkpoint::load(dir / "bad_version.bin"); });
  const auto o3 = load_offset([&] { eval::Gallery::load(dir / "bad_gmagic.bin"); });
  const auto o4 = load_offset([&] { eval::Gallery::load(dir / "bad_gversion.bin"); });
  const bool offsets = o1 == 0u && o2 == 4u && o3 == 0u && o4 == 4u;
  report(8, ck_ok && g_ok && offsets,
         fmt("checkpoint %s, embeddings %s, corrupt headers %s", ck_ok ? "bit-exact" : "differs",
             g_ok ? "bit-exact" : "differs", offsets ? "rejected at offsets 0 and 4" : "not rejected at the header"));
}

}  // namespace

int main() {
  guarded(1, pair_counts);
  guarded(2, gradient_suite);
  guarded(3, reverse_branch_frozen);
  guarded(4, closed_forms);
  guarded(5, metric_oracle);
  std::pair<bool, std::string> determinism;
  try {
    determinism = planted_runs();
  } catch (const std::exception& e) {
    report(6, false, std::string("exception: ") + e.what());
    determinism = {false, std::string("exception: ") + e.what()};
  }
  guarded(7, ablation);
  guarded(8, round_trips);
  report(9, determinism.first, determinism.second);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
