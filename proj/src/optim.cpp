#include "mtst/optim.hpp"

#include <cmath>

#include "mtst/error.hpp"

namespace mtst::train {

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

std::optional<OptimizerKind> parse_optimizer(std::string_view text) {
  if (text == "sgd") return OptimizerKind::sgd;
  if (text == "adam") return OptimizerKind::adam;
  return std::nullopt;
}

void Optimizer::step(const nd::ParameterStore& params, const nd::GradientMap& grads, double lr) {
  ++steps_;
  const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (const auto& entry : params.entries()) {
    auto it = grads.find(entry.name);
    if (it == grads.end()) continue;
    const auto g = it->second.values();
    nd::Tensor param = entry.tensor;
    auto w = param.mutable_values();
    if (g.size() != w.size()) throw DimensionError("gradient size mismatch for '" + entry.name + "'");
    auto& m = first_[entry.name];
    if (m.empty()) m.assign(w.size(), 0.0);
    if (config_.kind == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.momentum * m[i] + g[i];
        w[i] -= lr * m[i];
      }
    } else {
      auto& v = second_[entry.name];
      if (v.empty()) v.assign(w.size(), 0.0);
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        w[i] -= lr * (m[i] / bias1) / (std::sqrt(v[i] / bias2) + config_.eps);
      }
    }
  }
}

}  // namespace mtst::train
