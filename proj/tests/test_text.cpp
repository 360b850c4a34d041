#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "mtst/error.hpp"
#include "mtst/records.hpp"
#include "mtst/textgen.hpp"
#include "mtst/vocab.hpp"
#include "support.hpp"

using namespace mtst;
using nd::Tensor;

namespace {

Vocab small_vocab() {
  const std::vector<std::string> texts{"same logo", "zebra stripes", "keep red add blue remove green",
                                       "How to change from one image to another?"};
  return Vocab::build(texts);
}

struct GenFixture {
  nd::ParameterStore params;
  Rng rng{3};
  std::vector<std::string> ids{"a", "b", "c"};
  std::unique_ptr<textgen::Generator> gen;

  explicit GenFixture(bool zero_head = true, std::size_t tokens = 4) {
    textgen::GeneratorConfig cfg;
    cfg.encoder.tokens = tokens;
    cfg.encoder.width = 6;
    cfg.encoder.image_width = 5;
    cfg.llm_width = 7;
    cfg.zero_output_head = zero_head;
    gen = std::make_unique<textgen::Generator>(cfg, small_vocab(), ids, params, rng);
  }
};

// Plain-double replay of the decoder for the teacher-forced likelihood.
double lm_loss_oracle(const textgen::GeneratorInput& in, const std::vector<TokenId>& seq,
                      const nd::ParameterStore& p, std::size_t d, std::size_t v) {
  const auto P = in.projected.values();
  const std::size_t n = in.tokens, total = in.projected.dim(0);
  auto block_mean = [&](std::size_t start, std::size_t count) {
    std::vector<double> m(d, 0.0);
    for (std::size_t r = start; r < start + count; ++r)
      for (std::size_t j = 0; j < d; ++j) m[j] += P[r * d + j] / static_cast<double>(count);
    return m;
  };
  std::vector<double> pooled;
  for (auto [s, c] : {std::pair{0ul, n}, {n, n}, {2 * n, n}, {3 * n, total - 3 * n}}) {
    const auto m = block_mean(s, c);
    pooled.insert(pooled.end(), m.begin(), m.end());
  }
  auto dense = [](const std::vector<double>& x, std::span<const double> w, std::span<const double> b,
                  std::size_t out) {
    std::vector<double> y(b.begin(), b.end());
    for (std::size_t j = 0; j < out; ++j)
      for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * w[i * out + j];
    return y;
  };
  const std::string pre = "generator.decoder.";
  auto h = dense(pooled, p.get(pre + "context.w").values(), p.get(pre + "context.b").values(), d);
  for (auto& x : h) x = std::tanh(x);
  const auto E = p.get(pre + "token_embed").values();
  double total_nll = 0.0;
  for (std::size_t m = 1; m < seq.size(); ++m) {
    std::vector<double> x = h;
    for (std::size_t j = 0; j < d; ++j) x.push_back(E[seq[m - 1] * d + j]);
    h = dense(x, p.get(pre + "state.w").values(), p.get(pre + "state.b").values(), d);
    for (auto& e : h) e = std::tanh(e);
    const auto z = dense(h, p.get(pre + "head.w").values(), p.get(pre + "head.b").values(), v);
    double zmax = z[0];
    for (double e : z) zmax = std::max(zmax, e);
    double s = 0.0;
    for (double e : z) s += std::exp(e - zmax);
    total_nll += -(z[seq[m]] - zmax - std::log(s));
  }
  return total_nll / static_cast<double>(seq.size() - 1);
}

}  // namespace

TEST_SUITE("vocab") {
  TEST_CASE("tokenize examples") {
    const Vocab vocab = small_vocab();
    CHECK(tokenize("", vocab, 32) == std::vector<TokenId>{Vocab::kBos, Vocab::kEos});
    CHECK(tokenize("Same logo", vocab, 32) ==
          std::vector<TokenId>{Vocab::kBos, *vocab.find("same"), *vocab.find("logo"), Vocab::kEos});
    const TokenId z = *vocab.find("zebra");
    CHECK(tokenize("zebra zebra qux", vocab, 32) ==
          std::vector<TokenId>{Vocab::kBos, z, z, Vocab::kUnk, Vocab::kEos});
  }

  TEST_CASE("truncation keeps EOS") {
    const Vocab vocab = small_vocab();
    const auto ids = tokenize("keep red add blue remove green", vocab, 4);
    CHECK(ids.size() == 4);
    CHECK(ids.front() == Vocab::kBos);
    CHECK(ids.back() == Vocab::kEos);
  }

  TEST_CASE("build is order independent and round-trips through a file") {
    const std::vector<std::string> a{"b a", "c"}, b{"c", "a b"};
    CHECK(Vocab::build(a) == Vocab::build(b));
    const auto dir = test::scratch_dir("vocab");
    const Vocab v = small_vocab();
    v.save(dir / "vocab.txt");
    CHECK(Vocab::load(dir / "vocab.txt") == v);
    CHECK(detokenize(tokenize("same logo", v, 8), v) == "same logo");
  }
}

TEST_SUITE("records") {
  TEST_CASE("triplet json round trip and provenance") {
    const Triplet t{"a", "b", "make it red", Provenance::model, "make it blue"};
    CHECK(triplet_from_json(to_json(t)) == t);
    for (auto p : {Provenance::set, Provenance::category, Provenance::label, Provenance::external,
                   Provenance::oracle, Provenance::model})
      CHECK(parse_provenance(to_string(p)) == p);
    CHECK_FALSE(parse_provenance("bogus"));
  }

  TEST_CASE("malformed corpus line reports its line number") {
    const auto dir = test::scratch_dir("records");
    test::write_file(dir / "c.jsonl", "{\"id\":\"a\"}\n\nnot json\n");
    try {
      load_corpus(dir / "c.jsonl");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(load_corpus(dir / "missing.jsonl"), IoError);
  }
}

TEST_SUITE("textgen") {
  TEST_CASE("template oracle") {
    const auto ref = make_image("r", {"logo", "short-sleeve"});
    const auto tgt = make_image("t", {"logo", "long-sleeve"});
    CHECK(textgen::template_oracle(ref, tgt) == "keep logo; remove short-sleeve; add long-sleeve");
    CHECK(textgen::template_oracle(ref, ref) == "keep logo, short-sleeve");
    CHECK(textgen::template_oracle(make_image("x", {"a"}), make_image("y", {"b"})) == "remove a; add b");
    CHECK(textgen::template_oracle(make_image("x"), make_image("y")) == "no visible attribute change");
  }

  TEST_CASE("assemble_input shapes and identical inputs") {
    GenFixture f;
    const auto ins = f.gen->tokenize("How to change");
    REQUIRE(ins.size() == 5);
    const std::vector<TokenId> three(ins.begin(), ins.begin() + 3);
    const auto in = textgen::assemble_input("a", "b", three, *f.gen);
    CHECK(in.projected.dim(0) == 15);
    const auto same = textgen::assemble_input("c", "c", three, *f.gen);
    CHECK(test::values(same.q_r) == test::values(same.q_t));
    CHECK_THROWS_AS(textgen::assemble_input("a", "zz", three, *f.gen), MissingEmbeddingError);
  }

  TEST_CASE("uniform logits give ln V per token") {
    GenFixture f(true);
    const auto in = textgen::assemble_input("a", "b", f.gen->instruction_ids(), *f.gen);
    const auto ids = f.gen->tokenize("keep red add blue");
    const double v = static_cast<double>(f.gen->vocab().size());
    CHECK(std::abs(textgen::lm_loss(in, ids, f.gen->decoder()).item() - std::log(v)) < 1e-12);
  }

  TEST_CASE("lm_loss matches a scalar replay") {
    GenFixture f(false);
    const auto in = textgen::assemble_input("b", "a", f.gen->instruction_ids(), *f.gen);
    const auto ids = f.gen->tokenize("add blue");
    REQUIRE(ids.size() == 4);
    const double got = textgen::lm_loss(in, ids, f.gen->decoder()).item();
    const double expect = lm_loss_oracle(in, ids, f.params, 7, f.gen->vocab().size());
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    const std::vector<TokenId> bad{Vocab::kBos, 999};
    CHECK_THROWS_AS(textgen::lm_loss(in, bad, f.gen->decoder()), ContractError);
  }

  TEST_CASE("confident logits drive the loss towards zero") {
    GenFixture f(true);
    const auto in = textgen::assemble_input("a", "b", f.gen->instruction_ids(), *f.gen);
    const std::vector<TokenId> ids{Vocab::kBos, Vocab::kEos};
    auto head_b = f.params.get("generator.decoder.head.b");
    std::vector<double> b(f.gen->vocab().size(), 0.0);
    b[Vocab::kEos] = 40.0;
    head_b.assign(b);
    CHECK(textgen::lm_loss(in, ids, f.gen->decoder()).item() < 1e-12);
    CHECK(textgen::generate_greedy(in, f.gen->decoder(), 10).empty());
  }

  TEST_CASE("greedy decoding is deterministic and memorizes one example") {
    GenFixture f(true, 2);
    const Triplet ex{"a", "b", "keep red add blue", Provenance::oracle, std::nullopt};
    const std::vector<Triplet> examples{ex};
    const auto history = textgen::train_generator(*f.gen, f.params, examples, {.steps = 500, .batch_size = 1, .lr = 0.02});
    const auto in = textgen::assemble_input("a", "b", f.gen->instruction_ids(), *f.gen);
    CHECK(textgen::lm_loss(in, f.gen->tokenize(ex.modifier), f.gen->decoder()).item() < 0.01);
    CHECK(f.gen->describe("a", "b") == ex.modifier);
    CHECK(f.gen->describe("a", "b") == f.gen->describe("a", "b"));
    CHECK(history.front() > history.back());
  }

  TEST_CASE("external ingestion") {
    const auto dir = test::scratch_dir("ingest");
    test::write_file(dir / "empty.jsonl", "");
    CHECK(textgen::ingest_external(dir / "empty.jsonl").triplets.empty());

    const std::string good1 = R"({"ref_id":"a","target_id":"b","modifier":"x"})";
    const std::string good2 = R"({"ref_id":"b","target_id":"a","modifier":"y"})";
    test::write_file(dir / "mixed.jsonl", good1 + "\n" + R"({"ref_id":"a"})" + "\n" + good2 + "\n");
    const auto mixed = textgen::ingest_external(dir / "mixed.jsonl");
    CHECK(mixed.triplets.size() == 2);
    REQUIRE(mixed.errors.size() == 1);
    CHECK(mixed.errors[0].line == 2);
    CHECK(mixed.triplets[0].source == Provenance::external);

    test::write_file(dir / "dup.jsonl", good1 + "\n" + good1 + "\n");
    const auto dup = textgen::ingest_external(dir / "dup.jsonl");
    CHECK(dup.triplets.size() == 1);
    CHECK(dup.duplicates == 1);
  }
}
