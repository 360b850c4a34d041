#include "mtst/planted.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include "mtst/error.hpp"
#include "mtst/mining.hpp"
#include "mtst/rng.hpp"
#include "mtst/textgen.hpp"

namespace mtst::planted {

namespace {

std::string numbered(const char* stem, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%02zu", stem, i);
  return buf;
}

}  // namespace

PlantedData make_planted(const PlantedOptions& o) {
  if (o.groups < 1 || o.variants < 2) throw ContractError("planted corpus needs a group of at least two images");
  PlantedData data;
  std::map<std::string, std::size_t> index;
  for (std::size_t g = 0; g < o.groups; ++g) {
    for (std::size_t v = 0; v < o.variants; ++v) {
      const std::string id = "img_" + numbered("g", g) + "_" + numbered("v", v);
      index.emplace(id, data.corpus.size());
      data.corpus.push_back(make_image(id, {numbered("group", g), numbered("style", v)}, numbered("set", g)));
    }
  }

  auto pairs = mining::mine_set_pairs(data.corpus);
  if (o.val_queries + o.test_queries >= pairs.size()) throw ContractError("planted corpus: too many held-out queries");
  Rng rng(o.seed);
  rng.shuffle(pairs);

  auto triplet = [&](const mining::PairSpec& p) {
    const auto& ref = data.corpus[index.at(p.ref_id)];
    const auto& tgt = data.corpus[index.at(p.target_id)];
    return Triplet{p.ref_id, p.target_id, textgen::template_oracle(ref, tgt), Provenance::oracle,
                   textgen::template_oracle(tgt, ref)};
  };
  auto query = [&](const mining::PairSpec& p) {
    const auto& ref = data.corpus[index.at(p.ref_id)];
    std::vector<std::string> subset;
    for (const auto& r : data.corpus) {
      if (r.set_id == ref.set_id && r.id != ref.id) subset.push_back(r.id);
    }
    return eval::EvalQuery{p.ref_id, triplet(p).modifier, p.target_id, std::move(subset), std::nullopt};
  };

  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (i < o.val_queries) {
      data.val.push_back(query(pairs[i]));
    } else if (i < o.val_queries + o.test_queries) {
      data.test.push_back(query(pairs[i]));
    } else {
      data.train.push_back(triplet(pairs[i]));
    }
  }
  return data;
}

void write_planted(const PlantedData& data, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  save_corpus(dir / "corpus.jsonl", data.corpus);
  save_triplets(dir / "triplets.jsonl", data.train);
  eval::save_queries(dir / "val.jsonl", data.val);
  eval::save_queries(dir / "test.jsonl", data.test);
}

}  // namespace mtst::planted
