#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "mtst/cli.hpp"
#include "mtst/planted.hpp"
#include "mtst/records.hpp"
#include "support.hpp"

using namespace mtst;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path planted_data(const std::string& name) {
  const auto dir = test::scratch_dir(name);
  planted::write_planted(planted::make_planted({.groups = 3, .variants = 4, .val_queries = 4, .test_queries = 4}),
                         dir / "data");
  test::write_file(dir / "run.cfg",
                   "corpus = data/corpus.jsonl\ntriplets = data/triplets.jsonl\nval_queries = data/val.jsonl\n"
                   "test_queries = data/test.jsonl\nsteps = 6\nbatch_size = 4\ntokens = 2\nwidth = 6\n"
                   "image_width = 6\neval_every = 3\noptimizer = adam\n");
  return dir;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("unknown verbs are rejected before any work") {
    const auto r = run_cli({"train", "--out", "/nonexistent/should_not_exist"});
    CHECK(r.code == cli::kExitUsage);
    CHECK(r.err.find("unknown verb 'train'") != std::string::npos);
    CHECK_FALSE(fs::exists("/nonexistent/should_not_exist"));
    CHECK(run_cli({}).code == cli::kExitUsage);
    CHECK(run_cli({"--help"}).code == cli::kExitOk);
  }

  TEST_CASE("flag errors name the flag") {
    const auto r = run_cli({"mine", "--corpus", "c.jsonl"});
    CHECK(r.code == cli::kExitUsage);
    CHECK(r.err.find("--out") != std::string::npos);
    CHECK(run_cli({"mine", "--help"}).code == cli::kExitOk);
  }

  TEST_CASE("stats on an empty file") {
    const auto dir = test::scratch_dir("cli_stats");
    test::write_file(dir / "empty.jsonl", "");
    const auto r = run_cli({"stats", "--triplets", (dir / "empty.jsonl").string()});
    CHECK(r.code == cli::kExitOk);
    const auto j = json::parse(r.out);
    CHECK(j["n_triplets"] == 0);
    CHECK(j["n_unique_images"] == 0);
  }

  TEST_CASE("mine writes one line per pair") {
    const auto dir = test::scratch_dir("cli_mine");
    std::vector<ImageRecord> corpus;
    for (int s = 0; s < 5; ++s)
      for (int i = 0; i < 6; ++i)
        corpus.push_back(make_image("s" + std::to_string(s) + "i" + std::to_string(i), {}, "set" + std::to_string(s)));
    save_corpus(dir / "c.jsonl", corpus);
    const auto r = run_cli({"mine", "--strategy", "set", "--corpus", (dir / "c.jsonl").string(), "--out",
                            (dir / "pairs.jsonl").string()});
    CHECK(r.code == cli::kExitOk);
    CHECK(json::parse(r.out)["pairs"] == 150);
    CHECK(test::lines(test::read_file(dir / "pairs.jsonl")).size() == 150);
    CHECK(run_cli({"mine", "--strategy", "label", "--cap", "zero", "--corpus", (dir / "c.jsonl").string(), "--out",
                   (dir / "p2.jsonl").string()})
              .code == cli::kExitUsage);
  }

  TEST_CASE("missing inputs are I/O failures naming the file") {
    const auto r = run_cli({"stats", "--triplets", "/no/such/file.jsonl"});
    CHECK(r.code == cli::kExitIo);
    CHECK(r.err.find("/no/such/file.jsonl") != std::string::npos);
    CHECK(run_cli({"pretrain", "--config", "/no/such.cfg", "--out", "/tmp/x"}).code == cli::kExitIo);
  }

  TEST_CASE("malformed inputs are usage failures naming the line") {
    const auto dir = test::scratch_dir("cli_bad");
    test::write_file(dir / "t.jsonl", "{\"ref_id\":\"a\"}\n");
    const auto r = run_cli({"stats", "--triplets", (dir / "t.jsonl").string()});
    CHECK(r.code == cli::kExitUsage);
    CHECK(r.err.find("t.jsonl:1") != std::string::npos);
    test::write_file(dir / "bad.cfg", "steps=1\nlr=fast\n");
    const auto c = run_cli({"pretrain", "--config", (dir / "bad.cfg").string(), "--out", (dir / "o").string()});
    CHECK(c.code == cli::kExitUsage);
    CHECK(c.err.find("bad.cfg:2") != std::string::npos);
  }

  TEST_CASE("synth with the oracle tags provenance and caches reverse text") {
    const auto dir = planted_data("cli_synth");
    const auto r = run_cli({"synth", "--corpus", (dir / "data" / "corpus.jsonl").string(), "--generator", "oracle",
                            "--out", (dir / "t.jsonl").string()});
    CHECK(r.code == cli::kExitOk);
    const auto ts = load_triplets(dir / "t.jsonl");
    CHECK(ts.size() == 3 * 4 * 3);
    for (const auto& t : ts) {
      CHECK(t.source == Provenance::oracle);
      CHECK(t.reverse_modifier.has_value());
    }
  }

  TEST_CASE("synth from external modifiers") {
    const auto dir = test::scratch_dir("cli_external");
    test::write_file(dir / "ext.jsonl", R"({"ref_id":"a","target_id":"b","modifier":"make it red"})" "\n"
                                        R"({"ref_id":"b","target_id":"a","modifier":"make it blue"})" "\n");
    const auto r = run_cli({"synth", "--generator", "external", "--external", (dir / "ext.jsonl").string(), "--out",
                            (dir / "t.jsonl").string()});
    CHECK(r.code == cli::kExitOk);
    const auto ts = load_triplets(dir / "t.jsonl");
    REQUIRE(ts.size() == 2);
    CHECK(ts[0].source == Provenance::external);
    CHECK(ts[0].reverse_modifier == "make it blue");
  }

  TEST_CASE("synth with the trained generator") {
    const auto dir = planted_data("cli_model");
    const auto r = run_cli({"synth", "--corpus", (dir / "data" / "corpus.jsonl").string(), "--generator", "model",
                            "--gen-steps", "5", "--seed", "3", "--out", (dir / "t.jsonl").string()});
    CHECK(r.code == cli::kExitOk);
    const auto ts = load_triplets(dir / "t.jsonl");
    CHECK_FALSE(ts.empty());
    for (const auto& t : ts) CHECK(t.source == Provenance::model);
  }

  TEST_CASE("pretrain, finetune and eval chain") {
    const auto dir = planted_data("cli_chain");
    const auto cfg = (dir / "run.cfg").string();
    const auto pre = run_cli({"pretrain", "--config", cfg, "--out", (dir / "pre").string(), "--seed", "4"});
    REQUIRE(pre.code == cli::kExitOk);
    CHECK(json::parse(pre.out)["stage"] == "pretrain");
    CHECK(test::read_file(dir / "pre" / "config.snapshot").find("seed=4") != std::string::npos);

    const auto ck = (dir / "pre" / "checkpoint.bin").string();
    const auto fine = run_cli({"finetune", "--config", cfg, "--out", (dir / "fine").string(), "--alpha", "0.5",
                               "--w-t2t", "0.4", "--pooling", "avg_with_cls", "init_checkpoint=" + ck});
    REQUIRE(fine.code == cli::kExitOk);
    const auto snap = test::read_file(dir / "fine" / "config.snapshot");
    CHECK(snap.find("pooling=avg_with_cls") != std::string::npos);
    CHECK(snap.find("alpha=0.5") != std::string::npos);

    const auto best = (dir / "fine" / "checkpoint.bin").string();
    const auto ev = run_cli({"eval", "--config", cfg, "--checkpoint", best, "--pooling", "avg_with_cls", "--out",
                             (dir / "eval").string()});
    REQUIRE(ev.code == cli::kExitOk);
    CHECK(fs::exists(dir / "eval" / "gallery.bin"));
    const auto again = run_cli({"eval", "--config", cfg, "--checkpoint", best, "--pooling", "avg_with_cls",
                                "--embeddings", (dir / "eval" / "gallery.bin").string(), "--out",
                                (dir / "eval2").string()});
    REQUIRE(again.code == cli::kExitOk);
    CHECK(json::parse(ev.out)["recall@1"] == json::parse(again.out)["recall@1"]);

    test::write_file(dir / "fine" / "junk.bin", "MTSX");
    const auto bad = run_cli({"eval", "--config", cfg, "--checkpoint", (dir / "fine" / "junk.bin").string(), "--out",
                              (dir / "eval3").string()});
    CHECK(bad.code == cli::kExitUsage);
    CHECK(bad.err.find("@ byte 0") != std::string::npos);
    CHECK(run_cli({"pretrain", "--config", cfg, "--out", (dir / "pre").string()}).code == cli::kExitUsage);
  }

  TEST_CASE("gradcheck verb") {
    const auto r = run_cli({"gradcheck", "--seed", "7", "--instances", "2"});
    CHECK(r.code == cli::kExitOk);
    const auto j = json::parse(r.out);
    CHECK(j["passed"] == true);
    CHECK(j["max_rel_error"].get<double>() < 1e-4);
  }
}
