#include "amdet/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "amdet/errors.hpp"

namespace amdet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NonFiniteError(std::string(op) + ": non-finite output");
  }
}

// Builds the result node; attaches history only when something upstream needs it.
Tensor finish(const char* op, Shape shape, std::vector<double> value,
              std::vector<std::shared_ptr<detail::Node>> parents,
              std::function<void(detail::Node&)> rule) {
  check_finite(value, op);
  auto n = make_node(std::move(shape), std::move(value));
  if (g_grad_enabled) {
    bool any = std::any_of(parents.begin(), parents.end(),
                           [](const auto& p) { return p->requires_grad; });
    if (any) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward = std::move(rule);
    }
  }
  return Tensor(std::move(n));
}

// Message is only built when the check fails.
#define REQUIRE_SHAPE(ok, msg)                \
  do {                                        \
    if (!(ok)) throw DimensionError(msg);     \
  } while (false)

void require_matrix(const Tensor& a, const char* op) {
  REQUIRE_SHAPE(a.defined() && a.rank() == 2, std::string(op) + ": expected a matrix, got " +
                                            (a.defined() ? shape_str(a.shape()) : "undefined"));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  REQUIRE_SHAPE(a.defined() && b.defined() && a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

void accumulate(detail::Node& p, const double* g, std::size_t n) {
  if (!p.requires_grad) return;
  auto& buf = p.grad_buffer();
  for (std::size_t i = 0; i < n; ++i) buf[i] += g[i];
}

}  // namespace

// ---- shapes / nodes -------------------------------------------------------

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  node_ = make_node(std::move(shape), std::vector<double>(n, fill));
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor: " + std::to_string(data.size()) + " values for shape " +
                         shape_str(shape));
  }
  node_ = make_node(std::move(shape), std::move(data));
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> vals;
  vals.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("matrix: ragged initializer");
    vals.insert(vals.end(), row.begin(), row.end());
  }
  return matrix(r, c, std::move(vals));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t.node_->value[i * n + i] = 1.0;
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("tensor: undefined handle");
  return node_->shape;
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows");
  return shape()[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols");
  return shape()[1];
}

std::span<const double> Tensor::data() const { return {node_->value.data(), node_->value.size()}; }

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw ContractError("mutable_data: tensor has recorded history");
  return {node_->value.data(), node_->value.size()};
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item: tensor has " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

double Tensor::at(std::size_t i) const {
  if (i >= numel()) throw DimensionError("at: index out of range");
  return node_->value[i];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2 || r >= shape()[0] || c >= shape()[1]) throw DimensionError("at: index out of range");
  return node_->value[r * shape()[1] + c];
}

std::vector<double> Tensor::to_vector() const { return node_->value; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("set_requires_grad: only leaves can be toggled");
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad: no gradient has been accumulated");
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

std::uint64_t Tensor::node_id() const { return node_ ? node_->id : 0; }

bool Tensor::is_leaf() const { return node_ && !node_->backward; }

Tensor Tensor::detach() const { return Tensor(shape(), node_->value, false); }

Tensor Tensor::clone(bool requires_grad) const { return Tensor(shape(), node_->value, requires_grad); }

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (!defined() || !other.defined() || shape() != other.shape()) return false;
  return std::memcmp(node_->value.data(), other.node_->value.data(),
                     node_->value.size() * sizeof(double)) == 0;
}

// ---- grad mode / tape -----------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.defined()) return tape;
  // Iterative post-order DFS so deep graphs don't recurse.
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (parent->requires_grad && seen.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

std::vector<std::uint64_t> Tape::node_ids() const {
  std::vector<std::uint64_t> ids;
  ids.reserve(nodes_.size());
  for (const auto& n : nodes_) ids.push_back(n->id);
  return ids;
}

void Tape::run_backward() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward && n.grad.size() == n.value.size()) n.backward(n);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar");
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any parameter");
  Tape tape = Tape::record(loss);
  auto& g = loss.node()->grad_buffer();
  g[0] += 1.0;
  tape.run_backward();
}

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  REQUIRE_SHAPE(b.rows() == k, "matmul: inner dimensions " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  auto an = a.node(), bn = b.node();
  return finish("matmul", {m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](detail::Node& self) {
    ConstMatMap g(self.grad.data(), m, n);
    if (an->requires_grad) {
      MatMap(an->grad_buffer().data(), m, k).noalias() += g * ConstMatMap(bn->value.data(), k, n).transpose();
    }
    if (bn->requires_grad) {
      MatMap(bn->grad_buffer().data(), k, n).noalias() += ConstMatMap(an->value.data(), m, k).transpose() * g;
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  REQUIRE_SHAPE(b.cols() == k, "matmul_nt: inner dimensions " + shape_str(a.shape()) + " · " +
                             shape_str(b.shape()) + "ᵀ");
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), n, k).transpose();
  auto an = a.node(), bn = b.node();
  return finish("matmul_nt", {m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](detail::Node& self) {
    ConstMatMap g(self.grad.data(), m, n);
    if (an->requires_grad) {
      MatMap(an->grad_buffer().data(), m, k).noalias() += g * ConstMatMap(bn->value.data(), n, k);
    }
    if (bn->requires_grad) {
      MatMap(bn->grad_buffer().data(), n, k).noalias() += g.transpose() * ConstMatMap(an->value.data(), m, k);
    }
  });
}

namespace {

template <class F, class GA, class GB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, GA ga, GB gb) {
  require_same(a, b, op);
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  auto an = a.node(), bn = b.node();
  return finish(op, a.shape(), std::move(out), {an, bn}, [an, bn, n, ga, gb](detail::Node& self) {
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += ga(self.grad[i], an->value[i], bn->value[i]);
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += gb(self.grad[i], an->value[i], bn->value[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; }, [](double g, double x, double) { return g * x; });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_matrix(a, "add_row");
  REQUIRE_SHAPE(row.defined() && row.rank() == 1 && row.numel() == a.cols(),
          "add_row: row " + shape_str(row.shape()) + " does not match " + shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  auto rv = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  auto an = a.node(), rn = row.node();
  return finish("add_row", a.shape(), std::move(out), {an, rn}, [an, rn, m, n](detail::Node& self) {
    accumulate(*an, self.grad.data(), m * n);
    if (rn->requires_grad) {
      auto& g = rn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& x : out) x *= s;
  auto an = a.node();
  return finish("scale", a.shape(), std::move(out), {an}, [an, s](detail::Node& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& x : out) x += s;
  auto an = a.node();
  return finish("add_scalar", a.shape(), std::move(out), {an},
                [an](detail::Node& self) { accumulate(*an, self.grad.data(), self.grad.size()); });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  MatMap(out.data(), n, m) = ConstMatMap(a.data().data(), m, n).transpose();
  auto an = a.node();
  return finish("transpose", {n, m}, std::move(out), {an}, [an, m, n](detail::Node& self) {
    MatMap(an->grad_buffer().data(), m, n) += ConstMatMap(self.grad.data(), n, m).transpose();
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  REQUIRE_SHAPE(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto an = a.node();
  return finish("reshape", std::move(shape), an->value, {an},
                [an](detail::Node& self) { accumulate(*an, self.grad.data(), self.grad.size()); });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  auto an = a.node();
  return finish("sum", Shape{}, {s}, {an}, [an](detail::Node& self) {
    auto& g = an->grad_buffer();
    for (double& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DegenerateInputError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor dot(const Tensor& a, const Tensor& b) {
  REQUIRE_SHAPE(a.defined() && b.defined() && a.numel() == b.numel(),
          "dot: size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double s = 0.0;
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  return finish("dot", Shape{}, {s}, {an, bn}, [an, bn](detail::Node& self) {
    const double g = self.grad[0];
    if (an->requires_grad) {
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * an->value[i];
    }
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * kInvSqrt2));
  auto an = a.node();
  return finish("gelu", a.shape(), std::move(out), {an}, [an](detail::Node& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = an->value[i];
      const double d = 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      g[i] += self.grad[i] * d;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  REQUIRE_SHAPE(gamma.numel() == n && beta.numel() == n, "layer_norm: affine size mismatch");
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return finish("layer_norm", x.shape(), std::move(out), {xn, gn, bn},
                [xn, gn, bn, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
                  const double* g = self.grad.data();
                  if (gn->requires_grad || bn->requires_grad) {
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) {
                        if (gn->requires_grad) gn->grad_buffer()[j] += g[i * n + j] * xhat[i * n + j];
                        if (bn->requires_grad) bn->grad_buffer()[j] += g[i * n + j];
                      }
                  }
                  if (!xn->requires_grad) return;
                  auto& gx = xn->grad_buffer();
                  const double inv_n = 1.0 / static_cast<double>(n);
                  for (std::size_t i = 0; i < m; ++i) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                      const double dh = g[i * n + j] * gn->value[j];
                      s1 += dh;
                      s2 += dh * xhat[i * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                      const double dh = g[i * n + j] * gn->value[j];
                      gx[i * n + j] += inv_std[i] * (dh - inv_n * s1 - xhat[i * n + j] * inv_n * s2);
                    }
                  }
                });
}

namespace {

// Row softmax with optional mask; returns the probabilities.
std::vector<double> softmax_rows(std::span<const double> x, std::size_t m, std::size_t n,
                                 const std::uint8_t* mask) {
  if (n == 0) throw DimensionError("softmax: empty axis");
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || mask[i * n + j]) mx = std::max(mx, x[i * n + j]);
    if (!std::isfinite(mx)) {
      throw DegenerateInputError("masked_softmax: row " + std::to_string(i) + " has no allowed entry");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !mask[i * n + j]) continue;
      out[i * n + j] = std::exp(x[i * n + j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return out;
}

Tensor softmax_matrix(const char* op, const Tensor& x, std::size_t m, std::size_t n, const std::uint8_t* mask) {
  std::vector<double> out = softmax_rows(x.data(), m, n, mask);
  auto xn = x.node();
  return finish(op, x.shape(), out, {xn}, [xn, m, n, p = out](detail::Node& self) {
    auto& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += self.grad[i * n + j] * p[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += p[i * n + j] * (self.grad[i * n + j] - s);
    }
  });
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  REQUIRE_SHAPE(x.defined() && (x.rank() == 1 || x.rank() == 2), "softmax: expected rank 1 or 2");
  if (x.rank() == 1) {
    REQUIRE_SHAPE(axis == 0, "softmax: axis out of range");
    return reshape(softmax_matrix("softmax", reshape(x, {1, x.numel()}), 1, x.numel(), nullptr), x.shape());
  }
  REQUIRE_SHAPE(axis <= 1, "softmax: axis out of range");
  if (axis == 1) return softmax_matrix("softmax", x, x.rows(), x.cols(), nullptr);
  return transpose(softmax_matrix("softmax", transpose(x), x.cols(), x.rows(), nullptr));
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> mask) {
  require_matrix(x, "masked_softmax");
  REQUIRE_SHAPE(mask.size() == x.numel(), "masked_softmax: mask size mismatch");
  return softmax_matrix("masked_softmax", x, x.rows(), x.cols(), mask.data());
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding_lookup");
  const std::size_t vocab = table.rows(), d = table.cols(), m = ids.size();
  std::vector<double> out(m * d);
  auto tv = table.data();
  for (std::size_t i = 0; i < m; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw VocabularyError("embedding_lookup: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                            std::to_string(vocab));
    }
    std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  }
  auto tn = table.node();
  std::vector<int> idx(ids.begin(), ids.end());
  return finish("embedding_lookup", {m, d}, std::move(out), {tn}, [tn, idx = std::move(idx), d](detail::Node& self) {
    auto& g = tn->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_rows");
  REQUIRE_SHAPE(begin <= end && end <= a.rows(), "slice_rows: range out of bounds");
  const std::size_t n = a.cols();
  auto av = a.data();
  std::vector<double> out(av.begin() + begin * n, av.begin() + end * n);
  auto an = a.node();
  return finish("slice_rows", {end - begin, n}, std::move(out), {an}, [an, begin, n](detail::Node& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_cols");
  REQUIRE_SHAPE(begin <= end && end <= a.cols(), "slice_cols: range out of bounds");
  const std::size_t m = a.rows(), n = a.cols(), w = end - begin;
  std::vector<double> out(m * w);
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(av.data() + i * n + begin, w, out.data() + i * w);
  auto an = a.node();
  return finish("slice_cols", {m, w}, std::move(out), {an}, [an, begin, m, n, w](detail::Node& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  REQUIRE_SHAPE(!parts.empty(), "concat_rows: nothing to concatenate");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    REQUIRE_SHAPE(p.cols() == n, "concat_rows: column mismatch");
    m += p.rows();
    nodes.push_back(p.node());
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return finish("concat_rows", {m, n}, std::move(out), nodes, [nodes](detail::Node& self) {
    std::size_t off = 0;
    for (const auto& p : nodes) {
      accumulate(*p, self.grad.data() + off, p->value.size());
      off += p->value.size();
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  REQUIRE_SHAPE(!parts.empty(), "concat_cols: nothing to concatenate");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    REQUIRE_SHAPE(p.rows() == m, "concat_cols: row mismatch");
    n += p.cols();
    nodes.push_back(p.node());
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.data().data() + i * w, w, out.data() + i * n + off);
    off += w;
  }
  return finish("concat_cols", {m, n}, std::move(out), nodes, [nodes, m, n](detail::Node& self) {
    std::size_t off = 0;
    for (const auto& p : nodes) {
      const std::size_t w = p->shape[1];
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * n + off + j];
      }
      off += w;
    }
  });
}

Tensor select_row(const Tensor& a, std::size_t i) {
  require_matrix(a, "select_row");
  REQUIRE_SHAPE(i < a.rows(), "select_row: row out of range");
  return reshape(slice_rows(a, i, i + 1), {a.cols()});
}

Tensor mean_rows(const Tensor& a) {
  require_matrix(a, "mean_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (m == 0) throw DegenerateInputError("mean_rows: no rows");
  std::vector<double> out(n, 0.0);
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (double& x : out) x *= inv;
  auto an = a.node();
  return finish("mean_rows", {n}, std::move(out), {an}, [an, m, n, inv](detail::Node& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += inv * self.grad[j];
  });
}

Tensor cosine(const Tensor& a, const Tensor& b) {
  REQUIRE_SHAPE(a.defined() && b.defined() && a.numel() == b.numel(),
          "cosine: size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto av = a.data(), bv = b.data();
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    ab += av[i] * bv[i];
    aa += av[i] * av[i];
    bb += bv[i] * bv[i];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  if (na < kCosineEps && nb < kCosineEps) throw DegenerateInputError("cosine: both inputs are zero");
  // sqrt of the product (not the product of roots) makes cosine(x, x) exactly 1.
  const double denom = std::max(std::sqrt(aa * bb), kCosineEps);
  const double raw = ab / denom;
  const double c = std::clamp(raw, -1.0, 1.0);
  auto an = a.node(), bn = b.node();
  const bool clamped = raw != c;
  return finish("cosine", Shape{}, {c}, {an, bn}, [an, bn, ab, aa, bb, denom, clamped](detail::Node& self) {
    if (clamped) return;
    const double g = self.grad[0];
    const double c = ab / denom;
    // d(ab/(|a||b|))/da = b/(|a||b|) - c·a/|a|²; only meaningful for non-zero norms.
    if (an->requires_grad && aa > 0.0) {
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (bn->value[i] / denom - c * an->value[i] / aa);
    }
    if (bn->requires_grad && bb > 0.0) {
      auto& gb = bn->grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * (an->value[i] / denom - c * bn->value[i] / bb);
    }
  });
}

Tensor normalize_rows(const Tensor& a) {
  require_matrix(a, "normalize_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n), norms(m);
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += av[i * n + j] * av[i * n + j];
    norms[i] = std::sqrt(s);
    if (norms[i] < kCosineEps) {
      throw DegenerateInputError("normalize_rows: row " + std::to_string(i) + " has zero norm");
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] / norms[i];
  }
  auto an = a.node();
  return finish("normalize_rows", a.shape(), out, {an},
                [an, m, n, u = out, norms = std::move(norms)](detail::Node& self) {
                  auto& g = an->grad_buffer();
                  for (std::size_t i = 0; i < m; ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += self.grad[i * n + j] * u[i * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                      g[i * n + j] += (self.grad[i * n + j] - s * u[i * n + j]) / norms[i];
                  }
                });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return mean(mul(d, d));
}

Tensor mae(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mae");
  const std::size_t n = a.numel();
  if (n == 0) throw DegenerateInputError("mae: empty input");
  double s = 0.0;
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < n; ++i) s += std::abs(av[i] - bv[i]);
  auto an = a.node(), bn = b.node();
  return finish("mae", Shape{}, {s / static_cast<double>(n)}, {an, bn}, [an, bn, n](detail::Node& self) {
    const double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = an->value[i] - bn->value[i];
      const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      if (an->requires_grad) an->grad_buffer()[i] += g * sgn;
      if (bn->requires_grad) bn->grad_buffer()[i] -= g * sgn;
    }
  });
}

}  // namespace amdet
