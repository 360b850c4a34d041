#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtst/ndcore.hpp"

namespace mtst::train {

enum class OptimizerKind { sgd, adam };

std::string_view to_string(OptimizerKind kind);
std::optional<OptimizerKind> parse_optimizer(std::string_view text);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;
  double eps = 1e-8;
};

// SGD with heavy-ball momentum, or Adam. State is keyed by parameter name.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  // Parameters without an entry in grads are left untouched.
  void step(const nd::ParameterStore& params, const nd::GradientMap& grads, double lr);

  std::size_t steps_taken() const { return steps_; }

 private:
  OptimizerConfig config_;
  std::unordered_map<std::string, std::vector<double>> first_;
  std::unordered_map<std::string, std::vector<double>> second_;
  std::size_t steps_ = 0;
};

}  // namespace mtst::train
