#include <cmath>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mtst/cli.hpp"
#include "mtst/error.hpp"
#include "mtst/evaluator.hpp"
#include "mtst/gradcheck.hpp"
#include "mtst/mining.hpp"
#include "mtst/planted.hpp"
#include "mtst/records.hpp"
#include "mtst/textgen.hpp"
#include "mtst/trainer.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::tuple<std::string, std::string, std::string>> mine_pairs(const fs::path& corpus,
                                                                          const std::string& strategy, double cap,
                                                                          std::size_t set_size, std::uint64_t seed) {
  const auto records = mtst::load_corpus(corpus);
  std::vector<mtst::mining::PairSpec> pairs;
  if (strategy == "set") {
    pairs = mtst::mining::mine_set_pairs(records);
  } else if (strategy == "category") {
    pairs = mtst::mining::mine_category_pairs(records, set_size, seed);
  } else if (strategy == "label") {
    pairs = mtst::mining::mine_label_pairs_capped(records, cap, seed);
  } else {
    throw mtst::ConfigError("unknown strategy '" + strategy + "'; expected set, category or label");
  }
  std::vector<std::tuple<std::string, std::string, std::string>> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.emplace_back(p.ref_id, p.target_id, std::string(mtst::mining::to_string(p.origin)));
  return out;
}

std::string run_stage(const fs::path& config_path, const fs::path& out_dir, const std::string& stage,
                      const std::vector<std::string>& overrides) {
  auto cfg = mtst::train::load_config(config_path);
  mtst::train::apply_overrides(cfg, overrides);
  const auto parsed = mtst::train::parse_stage(stage);
  if (!parsed) throw mtst::ConfigError("unknown stage '" + stage + "'; expected pretrain or finetune");
  cfg.stage = *parsed;
  const auto r = mtst::train::run_stage(cfg, out_dir);
  json summary{{"stage", stage}, {"best_step", r.best_step}, {"steps", r.losses.size()}};
  if (r.best_headline) summary["best_headline"] = *r.best_headline;
  if (!r.losses.empty()) summary["final"] = mtst::train::to_json(r.losses.back(), r.losses.size());
  if (r.test) summary["test"] = mtst::eval::to_json(*r.test);
  return summary.dump();
}

py::dict load_checkpoint(const fs::path& path) {
  const auto ck = mtst::train::Checkpoint::load(path);
  py::dict params;
  for (const auto& p : ck.params) params[py::str(p.name)] = py::make_tuple(p.shape, p.values);
  py::dict out;
  out["step"] = ck.step;
  out["fingerprint"] = ck.fingerprint;
  out["params"] = params;
  return out;
}

py::dict load_gallery(const fs::path& path) {
  const auto g = mtst::eval::Gallery::load(path);
  py::dict out;
  for (const auto& id : g.ids()) {
    const auto& f = g.feature(id);
    std::vector<std::vector<double>> rows(f.dim(0));
    for (std::size_t r = 0; r < f.dim(0); ++r)
      for (std::size_t c = 0; c < f.dim(1); ++c) rows[r].push_back(f.at(r, c));
    out[py::str(id)] = rows;
  }
  return out;
}

std::tuple<int, std::string, std::string> run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = mtst::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

PYBIND11_MODULE(_mtst, m) {
  m.doc() = "Composed-image retrieval with synthetic triplets";

  auto base = py::register_exception<mtst::Error>(m, "MtstError", PyExc_RuntimeError);
  py::register_exception<mtst::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<mtst::ContractError>(m, "ContractError", base.ptr());
  py::register_exception<mtst::ParseError>(m, "ParseError", base.ptr());
  py::register_exception<mtst::FormatError>(m, "FormatError", base.ptr());
  py::register_exception<mtst::IoError>(m, "IoError", base.ptr());

  m.attr("UNCAPPED") = mtst::mining::kUncapped;

  m.def("label_pair_budget", &mtst::mining::label_pair_budget, py::arg("n"), py::arg("cap_factor"),
        "Ordered pairs emitted for one label of n images.");
  m.def("mine_pairs", &mine_pairs, py::arg("corpus"), py::arg("strategy") = "set", py::arg("cap") = 3.0,
        py::arg("set_size") = 6, py::arg("seed") = 0, "Mines (ref, target, origin) pairs from a corpus JSONL.");
  m.def(
      "corpus_stats",
      [](const fs::path& triplets) { return mtst::mining::to_json(mtst::mining::corpus_stats(mtst::load_triplets(triplets))).dump(); },
      py::arg("triplets"), "Corpus statistics of a triplet JSONL, as a JSON string.");
  m.def(
      "template_oracle",
      [](const std::vector<std::string>& ref_labels, const std::vector<std::string>& target_labels) {
        return mtst::textgen::template_oracle(mtst::make_image("ref", ref_labels), mtst::make_image("target", target_labels));
      },
      py::arg("ref_labels"), py::arg("target_labels"), "Rule-based modifier text between two label sets.");
  m.def(
      "gradcheck",
      [](std::uint64_t seed, std::size_t instances) {
        mtst::gradcheck::Options o;
        o.seed = seed;
        o.instances = instances;
        py::gil_scoped_release release;
        auto j = mtst::gradcheck::to_json(mtst::gradcheck::run_suite(o));
        return j.dump();
      },
      py::arg("seed") = 7, py::arg("instances") = 100, "Finite-difference gradient report, as a JSON string.");
  m.def(
      "write_planted",
      [](const fs::path& dir, std::size_t groups, std::size_t variants, std::size_t val_queries,
         std::size_t test_queries, std::uint64_t seed) {
        mtst::planted::write_planted(
            mtst::planted::make_planted({groups, variants, val_queries, test_queries, seed}), dir);
      },
      py::arg("dir"), py::arg("groups") = 20, py::arg("variants") = 10, py::arg("val_queries") = 50,
      py::arg("test_queries") = 50, py::arg("seed") = 7, "Writes a synthetic corpus with known structure.");
  m.def(
      "run_stage",
      [](const fs::path& config, const fs::path& out, const std::string& stage, const std::vector<std::string>& overrides) {
        py::gil_scoped_release release;
        return run_stage(config, out, stage, overrides);
      },
      py::arg("config"), py::arg("out"), py::arg("stage") = "pretrain", py::arg("overrides") = std::vector<std::string>{},
      "Trains one stage into a run directory and returns a JSON summary.");
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"), "Reads a checkpoint into plain Python values.");
  m.def("load_gallery", &load_gallery, py::arg("path"), "Reads an embedding file into {id: rows}.");
  m.def("cli", &run_cli, py::arg("args"), "Runs a command-line verb; returns (exit code, stdout, stderr).");
}
