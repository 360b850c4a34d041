#include "mtst/ndcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "mtst/error.hpp"

namespace mtst::nd {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;
  const char* op = "leaf";
};

}  // namespace detail

using detail::Node;

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

void check_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw EmptyInputError("tensor shape " + shape_str(shape) + " has a zero extent");
  }
}

Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents, BackwardFn fn,
                   const char* op) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

// Adjoint buffer of a parent, or nullptr when the parent does not need one.
double* grad_of(const NodePtr& p) { return p->requires_grad ? p->grad.data() : nullptr; }

const Node& n(const Tensor& t) {
  if (!t.defined()) throw ContractError("operation on an undefined tensor");
  return *t.node();
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_scalar(const Tensor& s, const char* op) {
  if (s.size() != 1) {
    throw DimensionError(std::string(op) + ": expected a single-element tensor, got " + shape_str(s.shape()));
  }
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t nn) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * nn;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * nn;
      for (std::size_t j = 0; j < nn; ++j) ci[j] += av * bp[j];
    }
  }
}

// dA[m x k] += G[m x n] * B^T  (B is k x n)
void gemm_nt(const double* g, const double* b, double* da, std::size_t m, std::size_t k, std::size_t nn) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * nn;
    double* dai = da + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * nn;
      double acc = 0.0;
      for (std::size_t j = 0; j < nn; ++j) acc += gi[j] * bp[j];
      dai[p] += acc;
    }
  }
}

// dB[k x n] += A^T * G  (A is m x k, G is m x n)
void gemm_tn(const double* a, const double* g, double* db, std::size_t m, std::size_t k, std::size_t nn) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * nn;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* dbp = db + p * nn;
      for (std::size_t j = 0; j < nn; ++j) dbp[j] += av * gi[j];
    }
  }
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (element_count(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " needs " + std::to_string(element_count(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t count = element_count(shape);
  return Tensor(std::move(shape), std::vector<double>(count, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t count = element_count(shape);
  return Tensor(std::move(shape), std::vector<double>(count, value));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor(Shape{}, {value}, requires_grad); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> data;
  std::size_t width = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != width) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor(Shape{rows.size(), width}, std::move(data));
}

const Shape& Tensor::shape() const { return n(*this).shape; }
std::size_t Tensor::size() const { return n(*this).value.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::rows() const { return rank() >= 2 ? shape()[0] : 1; }
std::size_t Tensor::cols() const { return rank() >= 1 ? shape().back() : 1; }

std::span<const double> Tensor::values() const { return n(*this).value; }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t i) const { return n(*this).value.at(i); }
double Tensor::at(std::size_t i, std::size_t j) const { return n(*this).value.at(i * cols() + j); }

bool Tensor::requires_grad() const { return n(*this).requires_grad; }
bool Tensor::is_leaf() const { return n(*this).parents.empty() && !node_->backward; }
std::span<const double> Tensor::grad() const { return n(*this).grad; }

void Tensor::assign(std::span<const double> values) {
  if (!is_leaf()) throw ContractError("assign() on a non-leaf tensor");
  if (values.size() != node_->value.size()) {
    throw DimensionError("assign(): expected " + std::to_string(node_->value.size()) + " values, got " +
                         std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), node_->value.begin());
}

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw ContractError("mutable_values() on a non-leaf tensor");
  return node_->value;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- ParameterStore ----------------------------------------------------------

Tensor ParameterStore::add(std::string name, const Tensor& init) {
  if (index_.count(name)) throw ContractError("parameter '" + name + "' registered twice");
  std::vector<double> copy(init.values().begin(), init.values().end());
  Tensor leaf(init.shape(), std::move(copy), true);
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), leaf});
  return leaf;
}

const Tensor& ParameterStore::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return entries_[it->second].tensor;
}

bool ParameterStore::contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

std::size_t ParameterStore::scalar_count() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += e.tensor.size();
  return total;
}

ParameterStore ParameterStore::clone() const {
  ParameterStore out;
  for (const auto& e : entries_) out.add(e.name, e.tensor);
  return out;
}

// ---- backward ----------------------------------------------------------------

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

std::vector<Node*> run_backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward() on an undefined tensor");
  if (loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw ContractError("backward(): loss is not connected to any trainable tensor");
  Node* root = loss.node().get();
  std::vector<Node*> order = topo_order(root);
  for (Node* node : order) node->grad.assign(node->value.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
  return order;
}

}  // namespace

void backward(const Tensor& loss) { run_backward(loss); }

GradientMap backward(const Tensor& loss, const ParameterStore& params) {
  const std::vector<Node*> order = run_backward(loss);
  std::unordered_set<const Node*> reached(order.begin(), order.end());
  GradientMap grads;
  for (const auto& e : params.entries()) {
    const Node* node = e.tensor.node().get();
    if (reached.count(node)) {
      grads.emplace(e.name, Tensor(node->shape, node->grad));
    } else {
      grads.emplace(e.name, Tensor::zeros(node->shape));
    }
  }
  return grads;
}

// ---- operations --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), cols = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(m * cols, 0.0);
  gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, cols);
  auto pa = a.node(), pb = b.node();
  return make_result(
      {m, cols}, std::move(out), {pa, pb},
      [pa, pb, m, k, cols](Node& self) {
        if (double* ga = grad_of(pa)) gemm_nt(self.grad.data(), pb->value.data(), ga, m, k, cols);
        if (double* gb = grad_of(pb)) gemm_tn(pa->value.data(), self.grad.data(), gb, m, k, cols);
      },
      "matmul");
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  const auto v = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  auto px = x.node();
  return make_result(
      {c, r}, std::move(out), {px},
      [px, r, c](Node& self) {
        double* g = grad_of(px);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
      },
      "transpose");
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_shape(shape);
  if (element_count(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto px = x.node();
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(
      std::move(shape), std::move(out), {px},
      [px](Node& self) {
        double* g = grad_of(px);
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      },
      "reshape");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto pa = a.node(), pb = b.node();
  return make_result(
      a.shape(), std::move(out), {pa, pb},
      [pa, pb](Node& self) {
        for (const auto& p : {pa, pb}) {
          if (double* g = grad_of(p))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto pa = a.node(), pb = b.node();
  return make_result(
      a.shape(), std::move(out), {pa, pb},
      [pa, pb](Node& self) {
        if (double* g = grad_of(pa))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (double* g = grad_of(pb))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node(), pb = b.node();
  return make_result(
      a.shape(), std::move(out), {pa, pb},
      [pa, pb](Node& self) {
        if (double* g = grad_of(pa))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        if (double* g = grad_of(pb))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa->value[i];
      },
      "mul");
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= factor;
  auto px = x.node();
  return make_result(
      x.shape(), std::move(out), {px},
      [px, factor](Node& self) {
        double* g = grad_of(px);
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
      },
      "scale");
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  require_scalar(s, "mul_scalar");
  const double sv = s.values()[0];
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= sv;
  auto px = x.node(), ps = s.node();
  return make_result(
      x.shape(), std::move(out), {px, ps},
      [px, ps](Node& self) {
        const double sv = ps->value[0];
        if (double* g = grad_of(px))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * sv;
        if (double* g = grad_of(ps)) {
          double acc = 0.0;
          for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px->value[i];
          g[0] += acc;
        }
      },
      "mul_scalar");
}

Tensor div_scalar(const Tensor& x, const Tensor& s) {
  require_scalar(s, "div_scalar");
  const double sv = s.values()[0];
  if (sv == 0.0) throw ContractError("div_scalar: division by zero");
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v /= sv;
  auto px = x.node(), ps = s.node();
  return make_result(
      x.shape(), std::move(out), {px, ps},
      [px, ps](Node& self) {
        const double sv = ps->value[0];
        if (double* g = grad_of(px))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / sv;
        if (double* g = grad_of(ps)) {
          double acc = 0.0;
          for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px->value[i];
          g[0] -= acc / (sv * sv);
        }
      },
      "div_scalar");
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "affine");
  require_rank(w, 2, "affine");
  require_rank(b, 1, "affine");
  const std::size_t m = x.dim(0), k = x.dim(1), cols = w.dim(1);
  if (w.dim(0) != k || b.dim(0) != cols) {
    throw DimensionError("affine: incompatible shapes " + shape_str(x.shape()) + ", " + shape_str(w.shape()) +
                         ", " + shape_str(b.shape()));
  }
  std::vector<double> out(m * cols);
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * cols);
  gemm_nn(x.values().data(), w.values().data(), out.data(), m, k, cols);
  auto px = x.node(), pw = w.node(), pb = b.node();
  return make_result(
      {m, cols}, std::move(out), {px, pw, pb},
      [px, pw, pb, m, k, cols](Node& self) {
        if (double* gx = grad_of(px)) gemm_nt(self.grad.data(), pw->value.data(), gx, m, k, cols);
        if (double* gw = grad_of(pw)) gemm_tn(px->value.data(), self.grad.data(), gw, m, k, cols);
        if (double* gb = grad_of(pb))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < cols; ++j) gb[j] += self.grad[i * cols + j];
      },
      "affine");
}

Tensor tanh(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  auto px = x.node();
  return make_result(
      x.shape(), std::move(out), {px},
      [px](Node& self) {
        double* g = grad_of(px);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double y = self.value[i];
          g[i] += self.grad[i] * (1.0 - y * y);
        }
      },
      "tanh");
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: row counts differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), ca = a.dim(1), cb = b.dim(1), c = ca + cb;
  std::vector<double> out(m * c);
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(av.begin() + i * ca, ca, out.begin() + i * c);
    std::copy_n(bv.begin() + i * cb, cb, out.begin() + i * c + ca);
  }
  auto pa = a.node(), pb = b.node();
  return make_result(
      {m, c}, std::move(out), {pa, pb},
      [pa, pb, m, ca, cb, c](Node& self) {
        if (double* g = grad_of(pa))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += self.grad[i * c + j];
        if (double* g = grad_of(pb))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < cb; ++j) g[i * cb + j] += self.grad[i * c + ca + j];
      },
      "concat_cols");
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw EmptyInputError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total_rows = 0;
  std::vector<NodePtr> parents;
  std::vector<double> out;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.cols() != c) {
      throw DimensionError("concat_rows: column counts differ: " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total_rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p.node());
  }
  return make_result(
      {total_rows, c}, std::move(out), parents,
      [parents](Node& self) {
        std::size_t offset = 0;
        for (const auto& p : parents) {
          if (double* g = grad_of(p))
            for (std::size_t i = 0; i < p->value.size(); ++i) g[i] += self.grad[offset + i];
          offset += p->value.size();
        }
      },
      "concat_rows");
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw EmptyInputError("stack: no inputs");
  const Shape inner = parts[0].shape();
  std::vector<NodePtr> parents;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.shape() != inner) {
      throw DimensionError("stack: shapes differ: " + shape_str(inner) + " vs " + shape_str(p.shape()));
    }
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p.node());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  const std::size_t stride = element_count(inner);
  return make_result(
      std::move(shape), std::move(out), parents,
      [parents, stride](Node& self) {
        for (std::size_t k = 0; k < parents.size(); ++k) {
          if (double* g = grad_of(parents[k]))
            for (std::size_t i = 0; i < stride; ++i) g[i] += self.grad[k * stride + i];
        }
      },
      "stack");
}

Tensor tile_rows(const Tensor& v, std::size_t count) {
  require_rank(v, 1, "tile_rows");
  if (count == 0) throw EmptyInputError("tile_rows: zero rows requested");
  const std::size_t d = v.dim(0);
  std::vector<double> out;
  out.reserve(count * d);
  for (std::size_t i = 0; i < count; ++i) out.insert(out.end(), v.values().begin(), v.values().end());
  auto pv = v.node();
  return make_result(
      {count, d}, std::move(out), {pv},
      [pv, count, d](Node& self) {
        double* g = grad_of(pv);
        for (std::size_t i = 0; i < count; ++i)
          for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
      },
      "tile_rows");
}

Tensor row(const Tensor& x, std::size_t index) { return reshape(slice_rows(x, index, 1), {x.dim(1)}); }

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_rows");
  if (count == 0) throw EmptyInputError("slice_rows: zero rows requested");
  if (start + count > x.dim(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_str(x.shape()));
  }
  const std::size_t c = x.dim(1);
  std::vector<double> out(x.values().begin() + start * c, x.values().begin() + (start + count) * c);
  auto px = x.node();
  return make_result(
      {count, c}, std::move(out), {px},
      [px, start, c](Node& self) {
        double* g = grad_of(px) + start * c;
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      },
      "slice_rows");
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank(table, 2, "gather_rows");
  if (ids.empty()) throw EmptyInputError("gather_rows: no ids");
  const std::size_t rows = table.dim(0), c = table.dim(1);
  std::vector<double> out;
  out.reserve(ids.size() * c);
  for (std::size_t id : ids) {
    if (id >= rows) {
      throw ContractError("gather_rows: id " + std::to_string(id) + " outside table of " + std::to_string(rows) +
                          " rows");
    }
    out.insert(out.end(), table.values().begin() + id * c, table.values().begin() + (id + 1) * c);
  }
  auto pt = table.node();
  std::vector<std::size_t> index(ids.begin(), ids.end());
  return make_result(
      {ids.size(), c}, std::move(out), {pt},
      [pt, index = std::move(index), c](Node& self) {
        double* g = grad_of(pt);
        for (std::size_t k = 0; k < index.size(); ++k)
          for (std::size_t j = 0; j < c; ++j) g[index[k] * c + j] += self.grad[k * c + j];
      },
      "gather_rows");
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  auto px = x.node();
  return make_result(
      {}, {acc}, {px},
      [px](Node& self) {
        double* g = grad_of(px);
        const double up = self.grad[0];
        for (std::size_t i = 0; i < px->value.size(); ++i) g[i] += up;
      },
      "sum");
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (r == 0) throw EmptyInputError("mean_rows: no rows");
  std::vector<double> out(c, 0.0);
  const auto v = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += v[i * c + j];
  const double inv = 1.0 / static_cast<double>(r);
  for (double& o : out) o *= inv;
  auto px = x.node();
  return make_result(
      {c}, std::move(out), {px},
      [px, r, c, inv](Node& self) {
        double* g = grad_of(px);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j] * inv;
      },
      "mean_rows");
}

Tensor l2_normalize(const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw ContractError("l2_normalize: eps must be positive");
  if (x.rank() != 1 && x.rank() != 2) {
    throw DimensionError("l2_normalize: expected rank 1 or 2, got " + shape_str(x.shape()));
  }
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  std::vector<double> denom(r);
  std::vector<char> clamped(r);
  const auto v = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += v[i * c + j] * v[i * c + j];
    const double norm = std::sqrt(ss);
    clamped[i] = norm < eps;
    denom[i] = clamped[i] ? eps : norm;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = v[i * c + j] / denom[i];
  }
  auto px = x.node();
  return make_result(
      x.shape(), std::move(out), {px},
      [px, r, c, denom = std::move(denom), clamped = std::move(clamped)](Node& self) {
        double* g = grad_of(px);
        for (std::size_t i = 0; i < r; ++i) {
          const double* y = self.value.data() + i * c;
          const double* up = self.grad.data() + i * c;
          if (clamped[i]) {
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += up[j] / denom[i];
            continue;
          }
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += y[j] * up[j];
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += (up[j] - y[j] * dot) / denom[i];
        }
      },
      "l2_normalize");
}

Tensor max(const Tensor& x) {
  const auto v = x.values();
  const std::size_t arg = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  auto px = x.node();
  return make_result(
      {}, {v[arg]}, {px},
      [px, arg](Node& self) { grad_of(px)[arg] += self.grad[0]; }, "max");
}

Tensor max_rows(const Tensor& x) {
  require_rank(x, 2, "max_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r);
  std::vector<std::size_t> arg(r);
  const auto v = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    const auto first = v.begin() + i * c;
    arg[i] = static_cast<std::size_t>(std::max_element(first, first + c) - first);
    out[i] = v[i * c + arg[i]];
  }
  auto px = x.node();
  return make_result(
      {r}, std::move(out), {px},
      [px, c, arg = std::move(arg)](Node& self) {
        double* g = grad_of(px);
        for (std::size_t i = 0; i < arg.size(); ++i) g[i * c + arg[i]] += self.grad[i];
      },
      "max_rows");
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t r = logits.dim(0), c = logits.dim(1);
  if (targets.size() != r) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  std::vector<double> probs(r * c);
  const auto z = logits.values();
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] >= c) {
      throw ContractError("cross_entropy: target " + std::to_string(targets[i]) + " outside " + std::to_string(c) +
                          " classes");
    }
    const double* zi = z.data() + i * c;
    const double peak = *std::max_element(zi, zi + c);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(zi[j] - peak);
      denom += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= denom;
    total += std::log(denom) + peak - zi[targets[i]];
  }
  const double inv = 1.0 / static_cast<double>(r);
  auto pl = logits.node();
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_result(
      {}, {total * inv}, {pl},
      [pl, r, c, inv, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
        double* g = grad_of(pl);
        const double up = self.grad[0] * inv;
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += up * probs[i * c + j];
          g[i * c + tgt[i]] -= up;
        }
      },
      "cross_entropy");
}

Tensor detach(const Tensor& x) {
  std::vector<double> copy(x.values().begin(), x.values().end());
  return Tensor(x.shape(), std::move(copy), false);
}

}  // namespace mtst::nd
