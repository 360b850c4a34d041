#pragma once

// Central finite-difference verification of the reverse-mode gradients.
//
// Each case draws random instances (every extent at most 8), builds a scalar
// from the operation under test, and compares the analytic adjoint of every
// input leaf with (f(x + h) - f(x - h)) / 2h. Tensor-valued operations are
// reduced with a fixed random weighting sum(out * R). The error of one
// instance is
//
//   max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, floor)
//
// over the checked coordinates. Features behind a stop-gradient are held at
// their base value while perturbing, which is what the detach promises.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mtst/ndcore.hpp"
#include "mtst/rng.hpp"

namespace mtst::gradcheck {

struct Options {
  std::uint64_t seed = 7;
  std::size_t instances = 100;  // per case
  double h = 1e-4;
  double floor = 1e-3;
  // Coordinates perturbed per instance of a model-level loss; op cases check
  // every coordinate.
  std::size_t max_coords = 48;
};

struct CaseResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
};

struct Report {
  std::vector<CaseResult> cases;
  double max_rel_error = 0.0;
  std::size_t instances = 0;

  bool passed(double tolerance = 1e-4) const { return max_rel_error < tolerance; }
};

double relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor);

struct Instance {
  std::function<nd::Tensor()> loss;  // rebuilt from the current leaf values on every call
  std::vector<nd::Tensor> leaves;
};

// Error of one instance; max_coords = 0 checks every coordinate.
double check_instance(const Instance& instance, const Options& options, Rng& rng, std::size_t max_coords,
                      std::size_t* coordinates = nullptr);

// Names of all cases, ops first, then the losses.
std::vector<std::string> case_names();

Report run_suite(const Options& options = {});
// Subset of cases by name; unknown names raise ContractError.
Report run_cases(std::span<const std::string> names, const Options& options = {});

nlohmann::json to_json(const Report& report);

}  // namespace mtst::gradcheck
