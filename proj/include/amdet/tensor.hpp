#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap shared handle to a node. Operations whose inputs
// require gradients record a backward rule on the result; backward() walks
// the recorded graph once in reverse topological order. The graph is rebuilt
// on every forward pass and is confined to the thread that built it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace amdet {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  // Mutable access is for leaves only (parameter updates, test perturbations).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  std::uint64_t node_id() const;
  bool is_leaf() const;

  // Fresh leaf with a copy of the values; no history, no gradient.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  // Same node (handle identity), not value equality.
  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  bool bitwise_equal(const Tensor& other) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Grad-mode switch, per thread. While disabled, operations record nothing.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Ordered record of the operations reachable from a root: inputs always
// precede the nodes that consume them.
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  std::vector<std::uint64_t> node_ids() const;
  // Runs every backward rule once, in reverse order. Root gradient must be seeded.
  void run_backward();

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// Populates .grad() on every requires_grad leaf reachable from `loss`.
void backward(const Tensor& loss);

// ---- primitives ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ without materialising the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Broadcast a length-n vector over the rows of an m×n matrix.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);

Tensor gelu(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Softmax over `axis` of a rank-1 or rank-2 tensor, max-subtracted.
Tensor softmax(const Tensor& x, std::size_t axis);
// Row softmax where entries with mask==0 are excluded and come out exactly 0.
// `mask` has one byte per element; every row needs at least one allowed entry.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> mask);

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Row i of a matrix as a rank-1 vector.
Tensor select_row(const Tensor& a, std::size_t i);
// Column-wise mean over rows: [m×n] -> [n].
Tensor mean_rows(const Tensor& a);

inline constexpr double kCosineEps = 1e-12;

// Cosine similarity of two same-size tensors (flattened), clamped to [-1, 1].
Tensor cosine(const Tensor& a, const Tensor& b);
// Each row divided by its norm; a zero row is a degenerate input.
Tensor normalize_rows(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor mae(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace amdet
