#include "mtst/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "mtst/error.hpp"
#include "mtst/evaluator.hpp"
#include "mtst/gradcheck.hpp"
#include "mtst/mining.hpp"
#include "mtst/records.hpp"
#include "mtst/textgen.hpp"
#include "mtst/trainer.hpp"

namespace mtst::cli {

namespace fs = std::filesystem;
using nlohmann::json;

bool is_verb(std::string_view word) {
  return std::find(std::begin(kVerbs), std::end(kVerbs), word) != std::end(kVerbs);
}

namespace {

constexpr const char* kUsage =
    "usage: mtst <verb> [options]\n"
    "verbs: mine, synth, stats, pretrain, finetune, eval, ablate, gradcheck\n"
    "run 'mtst <verb> --help' for the options of a verb\n";

std::shared_ptr<spdlog::logger> make_logger(std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto log = std::make_shared<spdlog::logger>("mtst", sink);
  log->set_pattern("[%l] %v");
  const char* env = std::getenv("MTST_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    log->set_level(spdlog::level::err);
  } else if (level == "debug") {
    log->set_level(spdlog::level::debug);
  } else {
    log->set_level(spdlog::level::info);
    if (level != "info") log->warn("MTST_LOG='{}' is not one of error, info, debug; using info", level);
  }
  return log;
}

// Flags shared by the training verbs, applied on top of the config file.
struct TrainFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> pooling;
  std::optional<double> alpha;
  std::optional<double> w_t2t;
  std::vector<std::string> overrides;
};

void add_train_flags(CLI::App& app, TrainFlags& f, bool needs_out = true) {
  app.add_option("--config", f.config, "key=value configuration file");
  auto* out = app.add_option("--out", f.out, "output directory");
  if (needs_out) out->required();
  app.add_option("--seed", f.seed, "random seed");
  app.add_option("--pooling", f.pooling, "query pooling")->check(CLI::IsMember({"cls", "avg_with_cls"}));
  app.add_option("--alpha", f.alpha, "prototype loss weight");
  app.add_option("--w-t2t", f.w_t2t, "text-to-target loss weight");
  app.add_option("overrides", f.overrides, "key=value settings applied after the config file");
}

train::TrainConfig build_config(const TrainFlags& f) {
  train::TrainConfig cfg = f.config.empty() ? train::TrainConfig{} : train::load_config(f.config);
  train::apply_overrides(cfg, f.overrides);
  if (f.seed) train::apply_setting(cfg, "seed", std::to_string(*f.seed));
  if (f.pooling) train::apply_setting(cfg, "pooling", *f.pooling);
  if (f.alpha) train::apply_setting(cfg, "alpha", json(*f.alpha).dump());
  if (f.w_t2t) train::apply_setting(cfg, "w_t2t", json(*f.w_t2t).dump());
  return cfg;
}

double parse_cap(const std::string& text) {
  if (text == "inf" || text == "none") return mining::kUncapped;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || !(v > 0.0)) throw ConfigError("--cap: expected a positive number or 'inf', got '" + text + "'");
  return v;
}

std::vector<mining::PairSpec> mine(const std::vector<ImageRecord>& corpus, const std::string& strategy, double cap,
                                   std::size_t set_size, std::uint64_t seed) {
  if (strategy == "set") return mining::mine_set_pairs(corpus);
  if (strategy == "category") return mining::mine_category_pairs(corpus, set_size, seed);
  return mining::mine_label_pairs_capped(corpus, cap, seed);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

Vocab model_vocab(const train::TrainConfig& cfg, const fs::path& checkpoint) {
  if (!cfg.vocab.empty()) return Vocab::load(cfg.vocab);
  const auto beside = checkpoint.parent_path() / "vocab.txt";
  if (!fs::exists(beside)) {
    throw ConfigError("no vocabulary: set 'vocab' in the config or keep vocab.txt next to " + checkpoint.string());
  }
  return Vocab::load(beside);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.empty()) {
    err << kUsage;
    return kExitUsage;
  }
  if (args[0] == "--help" || args[0] == "-h") {
    out << kUsage;
    return kExitOk;
  }
  const std::string verb = args[0];
  if (!is_verb(verb)) {
    err << "error: unknown verb '" << verb << "'\n" << kUsage;
    return kExitUsage;
  }
  auto log = make_logger(err);

  CLI::App app{"mtst " + verb, "mtst " + verb};
  std::function<int()> action;

  // mine
  std::string corpus, strategy = "set", cap_text = "3", pairs_path, triplets_path, external_path, generator = "oracle";
  std::string out_path, checkpoint_path, queries_path, embeddings_path;
  std::uint64_t seed = 0;
  std::size_t set_size = 6, gen_steps = 200, instances = 100;
  TrainFlags tf;

  if (verb == "mine") {
    app.add_option("--corpus", corpus, "corpus JSONL")->required();
    app.add_option("--strategy", strategy)->check(CLI::IsMember({"set", "category", "label"}));
    app.add_option("--cap", cap_text, "label pairs per image, or 'inf'");
    app.add_option("--set-size", set_size, "synthetic set size for the category strategy");
    app.add_option("--seed", seed);
    app.add_option("--out", out_path, "pairs JSONL")->required();
    action = [&] {
      const auto records = load_corpus(corpus);
      const auto pairs = mine(records, strategy, parse_cap(cap_text), set_size, seed);
      mining::save_pairs(out_path, pairs);
      log->info("mined {} {} pairs from {} images", pairs.size(), strategy, records.size());
      out << json{{"pairs", pairs.size()}, {"strategy", strategy}, {"images", records.size()}}.dump() << '\n';
      return kExitOk;
    };
  } else if (verb == "synth") {
    app.add_option("--corpus", corpus, "corpus JSONL");
    app.add_option("--pairs", pairs_path, "pairs JSONL from 'mine'; mined on the fly when absent");
    app.add_option("--strategy", strategy)->check(CLI::IsMember({"set", "category", "label"}));
    app.add_option("--cap", cap_text);
    app.add_option("--set-size", set_size);
    app.add_option("--generator", generator)->check(CLI::IsMember({"oracle", "model", "external"}));
    app.add_option("--external", external_path, "modifier JSONL for --generator external");
    app.add_option("--gen-steps", gen_steps, "training steps of the model generator");
    app.add_option("--seed", seed);
    app.add_option("--out", out_path, "triplets JSONL")->required();
    action = [&] {
      std::vector<Triplet> triplets;
      json summary{{"generator", generator}};
      if (generator == "external") {
        if (external_path.empty()) throw ConfigError("--generator external needs --external PATH");
        auto report = textgen::ingest_external(external_path);
        for (const auto& e : report.errors) log->warn("{}:{}: {}", external_path, e.line, e.message);
        std::map<std::pair<std::string, std::string>, std::string> by_pair;
        for (const auto& t : report.triplets) by_pair.emplace(std::make_pair(t.ref_id, t.target_id), t.modifier);
        for (auto& t : report.triplets) {
          if (t.reverse_modifier) continue;
          auto it = by_pair.find({t.target_id, t.ref_id});
          if (it != by_pair.end()) t.reverse_modifier = it->second;
        }
        triplets = std::move(report.triplets);
        summary["errors"] = report.errors.size();
        summary["duplicates"] = report.duplicates;
      } else {
        if (corpus.empty()) throw ConfigError("--generator " + generator + " needs --corpus");
        const auto records = load_corpus(corpus);
        const auto pairs = pairs_path.empty() ? mine(records, strategy, parse_cap(cap_text), set_size, seed)
                                              : mining::load_pairs(pairs_path);
        std::map<std::string, const ImageRecord*> index;
        for (const auto& r : records) index.emplace(r.id, &r);
        auto record = [&](const std::string& id) -> const ImageRecord& {
          auto it = index.find(id);
          if (it == index.end()) throw MissingEmbeddingError(id);
          return *it->second;
        };
        for (const auto& p : pairs) {
          const auto& a = record(p.ref_id);
          const auto& b = record(p.target_id);
          triplets.push_back({p.ref_id, p.target_id, textgen::template_oracle(a, b), Provenance::oracle,
                              textgen::template_oracle(b, a)});
        }
        if (generator == "model") {
          std::vector<std::string> texts, ids;
          for (const auto& t : triplets) texts.push_back(t.modifier);
          for (const auto& r : records) ids.push_back(r.id);
          textgen::GeneratorConfig gc;
          gc.encoder.tokens = 8;
          gc.encoder.width = 32;
          gc.encoder.image_width = 32;
          gc.llm_width = 32;
          nd::ParameterStore params;
          Rng rng(seed);
          textgen::Generator gen(gc, Vocab::build(texts), ids, params, rng);
          const auto history = textgen::train_generator(gen, params, triplets, {gen_steps, 8, 0.01, seed});
          if (!history.empty()) log->info("generator loss {:.4f} -> {:.4f}", history.front(), history.back());
          for (auto& t : triplets) {
            t.modifier = gen.describe(t.ref_id, t.target_id);
            t.reverse_modifier = gen.describe(t.target_id, t.ref_id);
            t.source = Provenance::model;
          }
        }
      }
      save_triplets(out_path, triplets);
      summary["triplets"] = triplets.size();
      out << summary.dump() << '\n';
      return kExitOk;
    };
  } else if (verb == "stats") {
    app.add_option("--triplets", triplets_path, "triplets JSONL")->required();
    app.add_option("--out", out_path, "also write the statistics to this file");
    action = [&] {
      const auto stats = mining::corpus_stats(load_triplets(triplets_path));
      const std::string text = mining::to_json(stats).dump();
      if (!out_path.empty()) write_file(out_path, text + "\n");
      out << text << '\n';
      return kExitOk;
    };
  } else if (verb == "pretrain" || verb == "finetune") {
    add_train_flags(app, tf);
    action = [&] {
      auto cfg = build_config(tf);
      cfg.stage = verb == "pretrain" ? train::Stage::pretrain : train::Stage::finetune;
      if (cfg.stage == train::Stage::pretrain && !cfg.ablation &&
          ((cfg.is_explicit("alpha") && cfg.loss.alpha > 0) || (cfg.is_explicit("w_t2t") && cfg.loss.w_t2t > 0))) {
        log->warn("pretraining optimizes L_q2t only; alpha and w_t2t are zeroed (set ablation=true to keep them)");
      }
      log->info("{}: {} steps, batch {}, seed {}", verb, cfg.steps, cfg.batch_size, cfg.seed);
      const auto result = train::run_stage(cfg, tf.out);
      for (const auto& d : result.dropped) log->warn("dropped {}", d);
      json summary{{"stage", verb}, {"steps", cfg.steps}, {"best_step", result.best_step}, {"out", tf.out}};
      if (result.best_headline) summary["best_headline"] = *result.best_headline;
      if (!result.losses.empty()) summary["final"] = train::to_json(result.losses.back(), cfg.steps);
      if (result.test) summary["test"] = eval::to_json(*result.test);
      out << summary.dump() << '\n';
      return kExitOk;
    };
  } else if (verb == "eval") {
    add_train_flags(app, tf);
    app.add_option("--checkpoint", checkpoint_path, "checkpoint.bin")->required();
    app.add_option("--queries", queries_path, "query JSONL; defaults to test_queries from the config");
    app.add_option("--embeddings", embeddings_path, "gallery embedding file to rank against");
    action = [&] {
      const auto cfg = build_config(tf);
      const fs::path qpath = queries_path.empty() ? cfg.test_queries : fs::path(queries_path);
      if (qpath.empty()) throw ConfigError("eval needs --queries or test_queries in the config");
      const auto queries = eval::load_queries(qpath);
      std::vector<std::string> ids;
      if (!cfg.corpus.empty()) {
        for (auto& r : load_corpus(cfg.corpus)) ids.push_back(std::move(r.id));
      } else {
        std::set<std::string> all;
        for (const auto& q : queries) {
          all.insert({q.ref_id, q.target_id});
          if (q.subset_ids) all.insert(q.subset_ids->begin(), q.subset_ids->end());
        }
        ids.assign(all.begin(), all.end());
      }
      train::Trainer model(cfg, model_vocab(cfg, checkpoint_path), ids);
      model.restore(train::Checkpoint::load(checkpoint_path));
      std::error_code ec;
      fs::create_directories(tf.out, ec);
      if (ec) throw IoError("cannot create " + tf.out + ": " + ec.message());
      eval::Gallery gallery;
      if (embeddings_path.empty()) {
        gallery = eval::Gallery::encode(model.stack());
        gallery.save(fs::path(tf.out) / "gallery.bin");
      } else {
        gallery = eval::Gallery::load(embeddings_path);
      }
      const auto report =
          eval::evaluate(queries, gallery, model.stack(), cfg.loss.pooling, {cfg.include_reference});
      json row = eval::to_json(report);
      row["headline"] = report.headline();
      write_file(fs::path(tf.out) / "report.json", row.dump(2) + "\n");
      out << row.dump() << '\n';
      return kExitOk;
    };
  } else if (verb == "ablate") {
    add_train_flags(app, tf);
    action = [&] {
      const auto rows = train::ablation_matrix(build_config(tf), tf.out);
      for (const auto& row : rows) out << train::to_json(row).dump() << '\n';
      return kExitOk;
    };
  } else {  // gradcheck
    seed = 7;
    app.add_option("--seed", seed);
    app.add_option("--instances", instances, "random instances per case")->check(CLI::PositiveNumber);
    app.add_option("--out", out_path, "write the full report to this file");
    action = [&] {
      gradcheck::Options options;
      options.seed = seed;
      options.instances = instances;
      const auto report = gradcheck::run_suite(options);
      for (const auto& c : report.cases) log->debug("{}: {:.3e} over {} instances", c.name, c.max_rel_error, c.instances);
      json summary = gradcheck::to_json(report);
      summary["passed"] = report.passed();
      if (!out_path.empty()) write_file(out_path, summary.dump(2) + "\n");
      out << json{{"max_rel_error", report.max_rel_error},
                  {"instances", report.instances},
                  {"passed", report.passed()}}
                 .dump()
          << '\n';
      return report.passed() ? kExitOk : kExitUsage;
    };
  }

  std::vector<std::string> rest(args.rbegin(), args.rend() - 1);
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << verb << ": " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    return action();
  } catch (const IoError& e) {
    log->error("{}", e.what());
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    log->error("{}", e.what());
    return kExitIo;
  } catch (const Error& e) {
    log->error("{}", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    log->error("{}", e.what());
    return kExitUsage;
  }
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace mtst::cli
