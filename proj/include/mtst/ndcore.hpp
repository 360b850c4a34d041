#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// A Tensor is a shared handle onto a graph node. Operations allocate a new
// node that remembers its parents and a closure that pushes the incoming
// adjoint back to them. backward() orders the reachable nodes topologically
// and runs every closure exactly once. All storage and accumulation is
// double precision.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mtst::nd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t element_count(const Shape& shape);

inline constexpr double kDefaultNormEps = 1e-12;

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t dim(std::size_t axis) const;
  // Leading extent of a matrix; 1 for vectors and scalars.
  std::size_t rows() const;
  // Trailing extent; 1 for scalars.
  std::size_t cols() const;

  std::span<const double> values() const;
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const;
  bool is_leaf() const;
  // Adjoint written by the most recent backward() that reached this node.
  std::span<const double> grad() const;

  // In-place overwrite of a leaf. Used by optimizers and checkpoint loading;
  // never call between forward and backward of a graph that reads this leaf.
  void assign(std::span<const double> values);
  std::span<double> mutable_values();

  // Node identity; two handles compare equal iff they alias the same node.
  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Graph recording is thread-local; while a guard is alive, operations produce
// plain values with no parents.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Named leaf registry. Iteration order is registration order, which is also
// the serialization order of checkpoints.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  // Registers a copy of init as a trainable leaf and returns its handle.
  Tensor add(std::string name, const Tensor& init);
  const Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::span<const Entry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  // Deep copy of every parameter value into a fresh store.
  ParameterStore clone() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using GradientMap = std::map<std::string, Tensor>;

// Runs reverse accumulation from a scalar loss. Leaves reached from the loss
// get their adjoint in grad(); nodes cut off by detach() are never visited.
void backward(const Tensor& loss);

// As above, and returns one gradient per registered parameter. Parameters the
// loss does not reach get an all-zero tensor.
GradientMap backward(const Tensor& loss, const ParameterStore& params);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// Scalar-tensor broadcast; s must hold exactly one element.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor div_scalar(const Tensor& x, const Tensor& s);

// x[m x k] * w[k x n] + b[n] for every row of x.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor tanh(const Tensor& x);

Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(std::span<const Tensor> parts);
// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);
// Repeats a vector [d] into n identical rows [n x d].
Tensor tile_rows(const Tensor& v, std::size_t n);
Tensor row(const Tensor& x, std::size_t index);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
// Embedding lookup: one row of table per id.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);

Tensor sum(const Tensor& x);
Tensor mean_rows(const Tensor& x);
// Divides by max(norm, eps); rank-2 inputs are normalized row by row.
Tensor l2_normalize(const Tensor& x, double eps = kDefaultNormEps);
// Maximum over all elements; the adjoint goes to the first maximal entry.
Tensor max(const Tensor& x);
// Per-row maximum of a matrix [m x n] -> [m].
Tensor max_rows(const Tensor& x);
// Mean negative log-likelihood of targets under row-wise softmax of logits.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

// Value-identical copy that blocks all gradient flow to x's ancestors.
Tensor detach(const Tensor& x);

}  // namespace mtst::nd
