#include "mtst/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <nlohmann/json.hpp>

#include "mtst/binary_io.hpp"
#include "mtst/encoders.hpp"
#include "mtst/error.hpp"
#include "mtst/losses.hpp"
#include "mtst/textgen.hpp"

namespace mtst::gradcheck {

using nd::Shape;
using nd::Tensor;

double relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
  if (analytic.size() != numeric.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

double check_instance(const Instance& instance, const Options& options, Rng& rng, std::size_t max_coords,
                      std::size_t* coordinates) {
  const Tensor loss = instance.loss();
  nd::backward(loss);

  struct Coord {
    std::size_t leaf, index;
    double analytic;
  };
  std::vector<Coord> all, nonzero;
  for (std::size_t l = 0; l < instance.leaves.size(); ++l) {
    const auto g = instance.leaves[l].grad();
    for (std::size_t i = 0; i < instance.leaves[l].size(); ++i) {
      const double a = i < g.size() ? g[i] : 0.0;
      all.push_back({l, i, a});
      if (a != 0.0) nonzero.push_back(all.back());
    }
  }

  std::vector<Coord> chosen;
  if (max_coords == 0 || all.size() <= max_coords) {
    chosen = all;
  } else {
    // Half from coordinates the loss actually touches, the rest uniform.
    rng.shuffle(nonzero);
    rng.shuffle(all);
    const std::size_t from_nonzero = std::min(nonzero.size(), max_coords / 2);
    chosen.assign(nonzero.begin(), nonzero.begin() + static_cast<std::ptrdiff_t>(from_nonzero));
    chosen.insert(chosen.end(), all.begin(), all.begin() + static_cast<std::ptrdiff_t>(max_coords - from_nonzero));
  }

  std::vector<double> analytic, numeric;
  nd::NoGradGuard guard;
  for (const auto& c : chosen) {
    Tensor leaf = instance.leaves[c.leaf];
    double& x = leaf.mutable_values()[c.index];
    const double saved = x;
    x = saved + options.h;
    const double plus = instance.loss().item();
    x = saved - options.h;
    const double minus = instance.loss().item();
    x = saved;
    analytic.push_back(c.analytic);
    numeric.push_back((plus - minus) / (2.0 * options.h));
  }
  if (coordinates) *coordinates += chosen.size();
  return relative_error(analytic, numeric, options.floor);
}

namespace {

std::size_t extent(Rng& rng, std::size_t lo = 1, std::size_t hi = 8) { return lo + rng.below(hi - lo + 1); }

Tensor random(Shape shape, Rng& rng, bool leaf = true, double bound = 1.0) {
  const Tensor init = uniform_tensor(shape, bound, rng);
  return Tensor(std::move(shape), {init.values().begin(), init.values().end()}, leaf);
}

// Entries bounded away from zero, random signs.
Tensor away_from_zero(Shape shape, Rng& rng) {
  std::vector<double> v(nd::element_count(shape));
  for (auto& x : v) x = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.2, 1.0);
  return Tensor(std::move(shape), std::move(v), true);
}

// Rows whose entries are separated by at least 0.05, so the argmax cannot
// move under a perturbation of size h.
Tensor separated(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> v;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> row(cols);
    for (std::size_t c = 0; c < cols; ++c) row[c] = 0.1 * static_cast<double>(c) + rng.uniform(0.0, 0.05);
    rng.shuffle(row);
    const double offset = rng.uniform(-1.0, 1.0);
    for (double x : row) v.push_back(x + offset);
  }
  return Tensor({rows, cols}, std::move(v), true);
}

Tensor weigh(const Tensor& out, const Tensor& weights) { return nd::sum(nd::mul(out, weights)); }

// Op instance reduced by a random weighting of its output.
Instance reduced(std::vector<Tensor> leaves, std::function<Tensor(const std::vector<Tensor>&)> op, Rng& rng) {
  Tensor probe;
  {
    nd::NoGradGuard guard;
    probe = op(leaves);
  }
  const Tensor weights = random(probe.shape(), rng, false);
  return {[leaves, op, weights] { return weigh(op(leaves), weights); }, leaves};
}

using CaseFn = std::function<Instance(Rng&)>;

std::vector<std::pair<std::string, CaseFn>> op_cases() {
  std::vector<std::pair<std::string, CaseFn>> c;
  c.emplace_back("matmul", [](Rng& r) {
    const auto m = extent(r), k = extent(r), n = extent(r);
    return reduced({random({m, k}, r), random({k, n}, r)}, [](auto& x) { return nd::matmul(x[0], x[1]); }, r);
  });
  c.emplace_back("transpose", [](Rng& r) {
    return reduced({random({extent(r), extent(r)}, r)}, [](auto& x) { return nd::transpose(x[0]); }, r);
  });
  c.emplace_back("reshape", [](Rng& r) {
    const auto m = extent(r), n = extent(r);
    return reduced({random({m, n}, r)}, [n, m](auto& x) { return nd::reshape(x[0], {n, m}); }, r);
  });
  c.emplace_back("add", [](Rng& r) {
    const Shape s{extent(r), extent(r)};
    return reduced({random(s, r), random(s, r)}, [](auto& x) { return nd::add(x[0], x[1]); }, r);
  });
  c.emplace_back("sub", [](Rng& r) {
    const Shape s{extent(r)};
    return reduced({random(s, r), random(s, r)}, [](auto& x) { return nd::sub(x[0], x[1]); }, r);
  });
  c.emplace_back("mul", [](Rng& r) {
    const Shape s{extent(r), extent(r)};
    return reduced({random(s, r), random(s, r)}, [](auto& x) { return nd::mul(x[0], x[1]); }, r);
  });
  c.emplace_back("scale", [](Rng& r) {
    const double f = r.uniform(-2.0, 2.0);
    return reduced({random({extent(r), extent(r)}, r)}, [f](auto& x) { return nd::scale(x[0], f); }, r);
  });
  c.emplace_back("mul_scalar", [](Rng& r) {
    return reduced({random({extent(r), extent(r)}, r), random({}, r)},
                   [](auto& x) { return nd::mul_scalar(x[0], x[1]); }, r);
  });
  c.emplace_back("div_scalar", [](Rng& r) {
    return reduced({random({extent(r), extent(r)}, r), away_from_zero({}, r)},
                   [](auto& x) { return nd::div_scalar(x[0], x[1]); }, r);
  });
  c.emplace_back("affine", [](Rng& r) {
    const auto m = extent(r), k = extent(r), n = extent(r);
    return reduced({random({m, k}, r), random({k, n}, r), random({n}, r)},
                   [](auto& x) { return nd::affine(x[0], x[1], x[2]); }, r);
  });
  c.emplace_back("tanh", [](Rng& r) {
    return reduced({random({extent(r), extent(r)}, r, true, 2.0)}, [](auto& x) { return nd::tanh(x[0]); }, r);
  });
  c.emplace_back("concat_cols", [](Rng& r) {
    const auto m = extent(r);
    return reduced({random({m, extent(r)}, r), random({m, extent(r)}, r)},
                   [](auto& x) { return nd::concat_cols(x[0], x[1]); }, r);
  });
  c.emplace_back("concat_rows", [](Rng& r) {
    const auto n = extent(r);
    return reduced({random({extent(r), n}, r), random({extent(r), n}, r), random({extent(r), n}, r)},
                   [](auto& x) { return nd::concat_rows(x); }, r);
  });
  c.emplace_back("stack", [](Rng& r) {
    const Shape s{extent(r)};
    return reduced({random(s, r), random(s, r), random(s, r)}, [](auto& x) { return nd::stack(x); }, r);
  });
  c.emplace_back("tile_rows", [](Rng& r) {
    const auto n = extent(r);
    return reduced({random({extent(r)}, r)}, [n](auto& x) { return nd::tile_rows(x[0], n); }, r);
  });
  c.emplace_back("row", [](Rng& r) {
    const auto m = extent(r);
    const auto i = r.below(m);
    return reduced({random({m, extent(r)}, r)}, [i](auto& x) { return nd::row(x[0], i); }, r);
  });
  c.emplace_back("slice_rows", [](Rng& r) {
    const auto m = extent(r);
    const auto start = r.below(m);
    const auto count = 1 + r.below(m - start);
    return reduced({random({m, extent(r)}, r)}, [start, count](auto& x) { return nd::slice_rows(x[0], start, count); },
                   r);
  });
  c.emplace_back("gather_rows", [](Rng& r) {
    const auto v = extent(r);
    std::vector<std::size_t> ids(extent(r));
    for (auto& id : ids) id = r.below(v);
    return reduced({random({v, extent(r)}, r)}, [ids](auto& x) { return nd::gather_rows(x[0], ids); }, r);
  });
  c.emplace_back("sum", [](Rng& r) {
    return reduced({random({extent(r), extent(r)}, r)}, [](auto& x) { return nd::sum(x[0]); }, r);
  });
  c.emplace_back("mean_rows", [](Rng& r) {
    return reduced({random({extent(r), extent(r)}, r)}, [](auto& x) { return nd::mean_rows(x[0]); }, r);
  });
  c.emplace_back("l2_normalize_vector", [](Rng& r) {
    return reduced({away_from_zero({extent(r)}, r)}, [](auto& x) { return nd::l2_normalize(x[0]); }, r);
  });
  c.emplace_back("l2_normalize_rows", [](Rng& r) {
    return reduced({away_from_zero({extent(r), extent(r)}, r)}, [](auto& x) { return nd::l2_normalize(x[0]); }, r);
  });
  c.emplace_back("max", [](Rng& r) {
    return reduced({separated(extent(r), extent(r), r)}, [](auto& x) { return nd::max(x[0]); }, r);
  });
  c.emplace_back("max_rows", [](Rng& r) {
    return reduced({separated(extent(r), extent(r), r)}, [](auto& x) { return nd::max_rows(x[0]); }, r);
  });
  c.emplace_back("cross_entropy", [](Rng& r) {
    const auto m = extent(r), n = extent(r, 2);
    std::vector<std::size_t> targets(m);
    for (auto& t : targets) t = r.below(n);
    return reduced({random({m, n}, r, true, 3.0)}, [targets](auto& x) { return nd::cross_entropy(x[0], targets); },
                   r);
  });
  return c;
}

// ---- model-level losses -------------------------------------------------------------

const std::vector<std::string>& words() {
  static const std::vector<std::string> w = {"keep", "remove", "add", "red", "blue", "long", "short", "dress",
                                             "shirt", "striped"};
  return w;
}

const std::vector<std::string>& images() {
  static const std::vector<std::string> ids = {"a", "b", "c", "d", "e", "f"};
  return ids;
}

std::string random_text(Rng& r) {
  std::string out;
  const auto n = 1 + r.below(4);
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += words()[r.below(words().size())];
  }
  return out;
}

EncoderConfig small_encoder(Rng& r) {
  EncoderConfig c;
  c.tokens = extent(r, 2, 5);
  c.width = extent(r, 2);
  c.image_width = extent(r, 2);
  c.max_text_len = 8;
  return c;
}

// Model, batch and fixed reverse features shared by the loss cases.
struct Fixture {
  std::shared_ptr<nd::ParameterStore> params = std::make_shared<nd::ParameterStore>();
  std::shared_ptr<EncoderStack> stack;
  Tensor tau;
  std::vector<Triplet> batch;
  std::vector<Tensor> reverse;  // base-value f_t2r per example
  loss::Pooling pooling = loss::Pooling::cls;

  std::vector<Tensor> leaves() const {
    std::vector<Tensor> out;
    for (const auto& e : params->entries()) out.push_back(e.tensor);
    return out;
  }

  std::vector<FeatureBundle> features() const {
    std::vector<FeatureBundle> out;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto f = stack->encode_triplet(batch[i], false);
      f.f_t2r = reverse[i];
      out.push_back(std::move(f));
    }
    return out;
  }
};

// Norm of the smallest vector that gets normalized and the gap between the
// best and second-best token cosine, over every similarity the losses read.
// Finite differences only mean something where both stay clear of zero.
bool well_posed(const Fixture& fx) {
  constexpr double kMinNorm = 0.05;
  constexpr double kMinGap = 0.02;
  nd::NoGradGuard guard;
  const auto features = fx.features();
  auto norm = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  std::vector<Tensor> queries;
  for (const auto& f : features) {
    queries.push_back(loss::query_vector(f.f_q, fx.pooling));
    queries.push_back(loss::query_vector(f.f_m, fx.pooling));
  }
  for (const auto& q : queries) {
    if (norm(q.values()) < kMinNorm) return false;
    for (const auto& f : features) {
      const Tensor t = f.f_t;
      for (std::size_t k = 0; k < t.dim(0); ++k) {
        if (norm(nd::row(t, k).values()) < kMinNorm) return false;
      }
      const Tensor cos = nd::matmul(nd::l2_normalize(t), nd::reshape(nd::l2_normalize(q), {q.size(), 1}));
      std::vector<double> sorted(cos.values().begin(), cos.values().end());
      std::sort(sorted.rbegin(), sorted.rend());
      if (sorted.size() > 1 && sorted[0] - sorted[1] < kMinGap) return false;
    }
  }
  return true;
}

Fixture draw_fixture(Rng& r, std::size_t max_batch) {
  Fixture fx;
  Rng init = r.split(1);
  fx.stack = std::make_shared<EncoderStack>(small_encoder(r), Vocab::build(words()), images(), *fx.params, init);
  fx.tau = fx.params->add("loss.tau", Tensor::scalar(r.uniform(0.05, 1.0)));
  fx.pooling = r.below(2) ? loss::Pooling::avg_with_cls : loss::Pooling::cls;
  std::vector<std::string> targets = images();
  r.shuffle(targets);
  const auto b = 1 + r.below(max_batch);
  for (std::size_t i = 0; i < b; ++i) {
    std::string ref = images()[r.below(images().size())];
    if (ref == targets[i]) ref = targets[(i + 1) % targets.size()];
    fx.batch.push_back({ref, targets[i], random_text(r), Provenance::oracle, random_text(r)});
  }
  nd::NoGradGuard guard;
  for (const auto& t : fx.batch) fx.reverse.push_back(*fx.stack->encode_triplet(t, true).f_t2r);
  return fx;
}

Fixture make_fixture(Rng& r, std::size_t max_batch) {
  for (;;) {
    Fixture fx = draw_fixture(r, max_batch);
    if (well_posed(fx)) return fx;
  }
}

std::vector<std::pair<std::string, CaseFn>> loss_cases() {
  std::vector<std::pair<std::string, CaseFn>> c;
  c.emplace_back("lm_loss", [](Rng& r) {
    auto params = std::make_shared<nd::ParameterStore>();
    textgen::GeneratorConfig config;
    config.encoder = small_encoder(r);
    config.llm_width = extent(r, 2);
    config.max_text_len = 8;
    config.zero_output_head = false;
    Rng init = r.split(2);
    auto gen = std::make_shared<textgen::Generator>(config, Vocab::build(words()), images(), *params, init);
    const std::string ref = images()[r.below(3)];
    const std::string tgt = images()[3 + r.below(3)];
    const auto modifier = gen->tokenize(random_text(r));
    std::vector<Tensor> leaves;
    for (const auto& e : params->entries()) leaves.push_back(e.tensor);
    return Instance{[gen, params, ref, tgt, modifier] {
                      const auto input = textgen::assemble_input(ref, tgt, gen->instruction_ids(), *gen);
                      return textgen::lm_loss(input, modifier, gen->decoder());
                    },
                    leaves};
  });
  c.emplace_back("sim_composed", [](Rng& r) {
    auto fx = std::make_shared<Fixture>(make_fixture(r, 1));
    return Instance{[fx] {
                      const auto f = fx->stack->encode_triplet(fx->batch[0], false, false);
                      return loss::sim(f.f_q, f.f_t, fx->pooling);
                    },
                    fx->leaves()};
  });
  c.emplace_back("loss_q2t", [](Rng& r) {
    auto fx = std::make_shared<Fixture>(make_fixture(r, 4));
    return Instance{[fx] { return loss::loss_q2t(fx->features(), fx->tau, fx->pooling); }, fx->leaves()};
  });
  c.emplace_back("loss_t2t", [](Rng& r) {
    auto fx = std::make_shared<Fixture>(make_fixture(r, 4));
    return Instance{[fx] { return loss::loss_t2t(fx->features(), fx->tau, fx->pooling); }, fx->leaves()};
  });
  c.emplace_back("loss_p2p", [](Rng& r) {
    auto fx = std::make_shared<Fixture>(make_fixture(r, 4));
    return Instance{[fx] { return loss::loss_p2p(fx->features()); }, fx->leaves()};
  });
  c.emplace_back("total_loss", [](Rng& r) {
    auto fx = std::make_shared<Fixture>(make_fixture(r, 4));
    loss::LossConfig config;
    config.alpha = r.uniform(0.1, 1.0);
    config.w_t2t = r.uniform(0.1, 1.0);
    config.pooling = fx->pooling;
    return Instance{[fx, config] { return loss::total_loss(fx->features(), config, fx->tau).value; }, fx->leaves()};
  });
  return c;
}

std::vector<std::pair<std::string, CaseFn>> all_cases() {
  auto c = op_cases();
  for (auto& l : loss_cases()) c.push_back(std::move(l));
  return c;
}

bool is_model_case(const std::string& name) {
  for (const auto& [n, fn] : loss_cases()) {
    if (n == name) return true;
  }
  return false;
}

}  // namespace

std::vector<std::string> case_names() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : all_cases()) names.push_back(name);
  return names;
}

Report run_cases(std::span<const std::string> names, const Options& options) {
  const auto cases = all_cases();
  Report report;
  for (const auto& name : names) {
    auto it = std::find_if(cases.begin(), cases.end(), [&](const auto& c) { return c.first == name; });
    if (it == cases.end()) throw ContractError("unknown gradcheck case '" + name + "'");
    // Each case gets its own stream so adding a case leaves the others unchanged.
    Rng rng(options.seed ^ io::fnv1a(name));
    CaseResult result{name, 0, 0, 0.0};
    const std::size_t coords = is_model_case(name) ? options.max_coords : 0;
    for (std::size_t i = 0; i < options.instances; ++i) {
      const Instance instance = it->second(rng);
      result.max_rel_error =
          std::max(result.max_rel_error, check_instance(instance, options, rng, coords, &result.coordinates));
      ++result.instances;
    }
    report.max_rel_error = std::max(report.max_rel_error, result.max_rel_error);
    report.instances += result.instances;
    report.cases.push_back(std::move(result));
  }
  return report;
}

Report run_suite(const Options& options) {
  const auto names = case_names();
  return run_cases(names, options);
}

nlohmann::json to_json(const Report& report) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : report.cases) {
    cases.push_back({{"case", c.name},
                     {"instances", c.instances},
                     {"coordinates", c.coordinates},
                     {"max_rel_error", c.max_rel_error}});
  }
  return {{"max_rel_error", report.max_rel_error}, {"instances", report.instances}, {"cases", cases}};
}

}  // namespace mtst::gradcheck
