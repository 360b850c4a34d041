#include <bit>
#include <cstring>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "metric_oracle.hpp"
#include "mtst/binary_io.hpp"
#include "mtst/error.hpp"
#include "mtst/evaluator.hpp"
#include "support.hpp"

using namespace mtst;
using nd::Tensor;

namespace {

struct EvalFixture {
  nd::ParameterStore params;
  Rng rng{21};
  std::vector<std::string> ids;
  std::unique_ptr<EncoderStack> stack;

  explicit EvalFixture(std::size_t n_images = 10) {
    for (std::size_t i = 0; i < n_images; ++i) ids.push_back("im" + std::to_string(i));
    EncoderConfig cfg;
    cfg.tokens = 3;
    cfg.width = 4;
    cfg.image_width = 4;
    stack = std::make_unique<EncoderStack>(cfg, Vocab::build(std::vector<std::string>{"add red blue"}), ids, params,
                                           rng);
  }
};

std::string le32(std::uint32_t v) {
  std::string s(4, '\0');
  for (int i = 0; i < 4; ++i) s[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  return s;
}

std::string le64(std::uint64_t v) { return le32(static_cast<std::uint32_t>(v)) + le32(static_cast<std::uint32_t>(v >> 32)); }

std::string f32(float f) { return le32(std::bit_cast<std::uint32_t>(f)); }

}  // namespace

TEST_SUITE("evaluator") {
  TEST_CASE("single-candidate gallery and empty gallery") {
    EvalFixture f;
    eval::Gallery g;
    g.add("im3", f.stack->encode_target("im3"));
    const eval::EvalQuery q{"im0", "add red", "im3", std::nullopt, std::nullopt};
    CHECK(eval::rank_gallery(q, g, *f.stack, loss::Pooling::cls) == std::vector<std::string>{"im3"});
    CHECK_THROWS_AS(eval::rank_gallery(q, eval::Gallery{}, *f.stack, loss::Pooling::cls), ContractError);
  }

  TEST_CASE("equal scores rank by ascending id and the reference is excluded") {
    EvalFixture f;
    eval::Gallery g;
    const auto feat = f.stack->encode_target("im1");
    g.add("zeta", feat);
    g.add("alpha", feat);
    g.add("im0", f.stack->encode_target("im0"));
    const eval::EvalQuery q{"im0", "blue", "zeta", std::nullopt, std::nullopt};
    const auto ranking = eval::rank_gallery(q, g, *f.stack, loss::Pooling::cls);
    REQUIRE(ranking.size() == 2);
    CHECK(ranking[0] == "alpha");
    CHECK(ranking[1] == "zeta");
  }

  TEST_CASE("ten-item gallery ranking equals the brute-force order") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
      const auto inst = test::random_metric_instance(rng, 10);
      const auto check = test::check_metric_instance(*inst);
      CHECK(check.rankings_match);
      CHECK(check.recall_match);
      CHECK(check.subset_match);
      CHECK(check.monotone);
    }
  }

  TEST_CASE("recall at K") {
    const std::vector<eval::Ranking> first{{{"t", "x"}, "t"}, {{"u", "y"}, "u"}};
    CHECK(eval::recall_at_k(first, 1) == 1.0);
    const std::vector<eval::Ranking> any{{{"x", "y", "t"}, "t"}, {{"u", "y", "x"}, "x"}};
    CHECK(eval::recall_at_k(any, 3) == 1.0);
    CHECK(eval::recall_at_k(any, 100) == 1.0);

    // Target ranks 1, 3, 7 and 2.
    std::vector<eval::Ranking> four;
    for (std::size_t rank : {1, 3, 7, 2}) {
      eval::Ranking r;
      for (std::size_t i = 1; i <= 8; ++i) r.ids.push_back(i == rank ? "t" : "o" + std::to_string(i));
      r.target_id = "t";
      four.push_back(r);
    }
    CHECK(eval::recall_at_k(four, 3) == 0.75);
    CHECK_THROWS_AS(eval::recall_at_k(four, 0), ContractError);
  }

  TEST_CASE("subset recall") {
    EvalFixture f;
    const auto g = eval::Gallery::encode(*f.stack);
    const eval::EvalQuery only{"im0", "add", "im4", std::vector<std::string>{"im4"}, std::nullopt};
    const std::vector<eval::EvalQuery> one{only};
    CHECK(eval::recall_subset_at_k(one, g, *f.stack, 1, loss::Pooling::cls).value == 1.0);

    const eval::EvalQuery five{"im0", "add red", "im2", std::vector<std::string>{"im1", "im2", "im3", "im5", "im6"},
                               std::nullopt};
    const std::vector<eval::EvalQuery> qs{five};
    CHECK(eval::recall_subset_at_k(qs, g, *f.stack, 5, loss::Pooling::cls).value == 1.0);

    const eval::EvalQuery bare{"im0", "add", "im4", std::nullopt, std::nullopt};
    const std::vector<eval::EvalQuery> mixed{bare, only};
    const auto r = eval::recall_subset_at_k(mixed, g, *f.stack, 1, loss::Pooling::cls);
    CHECK(r.evaluated == 1);
    REQUIRE(r.skipped.size() == 1);
    CHECK(r.skipped[0].find("subset_ids") != std::string::npos);

    const auto with_ref = eval::recall_subset_at_k(one, g, *f.stack, 1, loss::Pooling::cls, {.include_reference = true});
    CHECK(with_ref.evaluated == 1);
  }

  TEST_CASE("evaluate reports and headline") {
    EvalFixture f;
    const auto g = eval::Gallery::encode(*f.stack);
    std::vector<eval::EvalQuery> qs{{"im0", "add", "im1", std::vector<std::string>{"im1", "im2"}, std::nullopt},
                                    {"im3", "red", "im4", std::vector<std::string>{"im4", "im5"}, std::nullopt}};
    const auto report = eval::evaluate(qs, g, *f.stack, loss::Pooling::cls);
    REQUIRE(report.avg_cirr);
    CHECK(*report.avg_cirr == (report.recall.at(5) + report.recall_subset.at(1)) / 2.0);
    CHECK(report.headline() == *report.avg_cirr);
    CHECK(report.recall.at(50) == 1.0);
    const auto j = eval::to_json(report);
    CHECK(j.contains("recall@1"));
    CHECK(j.contains("recall_subset@3"));

    for (auto& q : qs) {
      q.subset_ids.reset();
      q.category = "shirt";
    }
    const auto fiq = eval::evaluate(qs, g, *f.stack, loss::Pooling::cls);
    CHECK_FALSE(fiq.avg_cirr);
    REQUIRE(fiq.avg_fiq);
    CHECK(fiq.headline() == *fiq.avg_fiq);
  }

  TEST_CASE("embedding file round trip") {
    EvalFixture f;
    const auto dir = test::scratch_dir("gallery");
    const auto g = eval::Gallery::encode(*f.stack);
    g.save(dir / "a.bin");
    const auto back = eval::Gallery::load(dir / "a.bin");
    back.save(dir / "b.bin");
    CHECK(test::read_file(dir / "a.bin") == test::read_file(dir / "b.bin"));
    CHECK(back.ids() == g.ids());
    for (const auto& id : g.ids()) {
      const auto a = g.feature(id).values();
      const auto b = back.feature(id).values();
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == static_cast<double>(static_cast<float>(a[i])));
    }
  }

  TEST_CASE("hand-written embedding bytes") {
    const auto dir = test::scratch_dir("gallery_bytes");
    std::string bytes = "MTSE" + le32(1) + le64(3) + le32(1) + le32(2);
    const std::vector<std::pair<std::string, std::pair<float, float>>> rows{
        {"a", {1.5f, -2.0f}}, {"bb", {0.25f, 3.0f}}, {"ccc", {-0.125f, 8.0f}}};
    for (const auto& [id, v] : rows) {
      bytes += std::string{static_cast<char>(id.size()), '\0'} + id + f32(v.first) + f32(v.second);
    }
    test::write_file(dir / "g.bin", bytes);
    const auto g = eval::Gallery::load(dir / "g.bin");
    REQUIRE(g.size() == 3);
    for (const auto& [id, v] : rows) {
      CHECK(g.feature(id).at(0, 0) == v.first);
      CHECK(g.feature(id).at(0, 1) == v.second);
    }
  }

  TEST_CASE("corrupt embedding files carry byte offsets") {
    const auto dir = test::scratch_dir("gallery_bad");
    auto expect_offset = [&](const std::string& bytes, std::uint64_t offset) {
      test::write_file(dir / "x.bin", bytes);
      try {
        eval::Gallery::load(dir / "x.bin");
        FAIL("expected FormatError");
      } catch (const FormatError& e) {
        CHECK(e.offset() == offset);
      }
    };
    const std::string header = "MTSE" + le32(1) + le64(1) + le32(32) + le32(64);
    // Record starts at 24: u16 length, one id byte, then the payload at 27.
    expect_offset(header + std::string{1, '\0'} + "a" + std::string(100, '\0'), 27);
    expect_offset("MTSX" + header.substr(4), 0);
    expect_offset("MTSE" + le32(9) + header.substr(8), 4);
    expect_offset("MTSE" + le32(1) + le64(1) + le32(0) + le32(4), 16);
    expect_offset(header.substr(0, 10), 8);
    CHECK_THROWS_AS(eval::Gallery::load(dir / "does_not_exist.bin"), IoError);
  }

  TEST_CASE("query files round trip") {
    const auto dir = test::scratch_dir("queries");
    const std::vector<eval::EvalQuery> qs{{"a", "add red", "b", std::vector<std::string>{"b", "c"}, std::nullopt},
                                          {"c", "keep", "a", std::nullopt, "dress"}};
    eval::save_queries(dir / "q.jsonl", qs);
    const auto back = eval::load_queries(dir / "q.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[0].subset_ids == qs[0].subset_ids);
    CHECK(back[1].category == qs[1].category);
    CHECK(back[1].modifier == "keep");
  }
}
