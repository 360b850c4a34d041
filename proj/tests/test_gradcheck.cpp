#include <algorithm>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "mtst/error.hpp"
#include "mtst/gradcheck.hpp"
#include "support.hpp"

using namespace mtst;
using nd::Tensor;

TEST_SUITE("gradcheck") {
  TEST_CASE("relative error metric") {
    const std::vector<double> a{1.0, 2.0}, n{1.0, 2.5};
    CHECK(gradcheck::relative_error(a, n, 1e-3) == doctest::Approx(0.2));
    const std::vector<double> tiny_a{1e-9}, tiny_n{2e-9};
    CHECK(gradcheck::relative_error(tiny_a, tiny_n, 1e-3) == doctest::Approx(1e-6));
    CHECK_THROWS_AS(gradcheck::relative_error(a, tiny_n, 1e-3), DimensionError);
  }

  TEST_CASE("a correct gradient passes and a wrong one is caught") {
    Rng rng(1);
    auto x = test::random_tensor({5}, rng, true);
    gradcheck::Instance good{[x] { return nd::sum(nd::tanh(nd::mul(x, x))); }, {x}};
    CHECK(gradcheck::check_instance(good, {}, rng, 0) < 1e-6);

    // The detached factor hides half of the true derivative from backward().
    gradcheck::Instance wrong{[x] { return nd::sum(nd::mul(nd::detach(x), x)); }, {x}};
    CHECK(gradcheck::check_instance(wrong, {}, rng, 0) > 0.1);
  }

  TEST_CASE("every case passes on a reduced suite") {
    gradcheck::Options o;
    o.instances = 10;
    const auto report = gradcheck::run_suite(o);
    CHECK(report.cases.size() == gradcheck::case_names().size());
    CHECK(report.instances == 10 * report.cases.size());
    for (const auto& c : report.cases) {
      INFO(c.name);
      CHECK(c.max_rel_error < 1e-4);
      CHECK(c.coordinates > 0);
    }
    const auto j = gradcheck::to_json(report);
    CHECK(j.contains("max_rel_error"));
  }

  TEST_CASE("suites are reproducible and selectable") {
    gradcheck::Options o;
    o.instances = 3;
    const std::vector<std::string> names{"loss_p2p", "matmul"};
    const auto a = gradcheck::run_cases(names, o);
    const auto b = gradcheck::run_cases(names, o);
    REQUIRE(a.cases.size() == 2);
    CHECK(a.max_rel_error == b.max_rel_error);
    const std::vector<std::string> bad{"nope"};
    CHECK_THROWS_AS(gradcheck::run_cases(bad, o), ContractError);
  }

  TEST_CASE("the suite covers every operation and loss") {
    const auto names = gradcheck::case_names();
    for (const char* required : {"matmul", "mean_rows", "l2_normalize_vector", "l2_normalize_rows", "max_rows",
                                 "cross_entropy", "lm_loss", "sim_composed", "loss_q2t", "loss_t2t", "loss_p2p",
                                 "total_loss"})
      CHECK(std::find(names.begin(), names.end(), required) != names.end());
  }
}
