#pragma once

// Dense row-major float64 tensors with tape-free reverse-mode differentiation.
//
// A Tensor is a cheap shared handle to a graph node. Ops on tensors that
// require gradients record their parents and a backward closure; calling
// backward() on a scalar result walks the graph in reverse topological order.
// Tensors that do not require gradients never retain parents, so inference
// code pays nothing for the graph.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace driftlab {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}  // namespace detail

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t size() const;
  bool empty() const { return size() == 0; }
  // 2-D view helpers: a vector of length d is one row of width d.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  // Mutable access to the value buffer. Only meaningful for leaves (parameters,
  // inputs); mutating an interior node does not re-run its consumers.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;
  std::vector<double> row(std::size_t r) const;
  std::span<const double> row_span(std::size_t r) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Seeds d(self)/d(self) = 1 and accumulates into every reachable leaf.
  void backward() const;

  // Fresh leaf holding a copy of the values, detached from any graph.
  Tensor detach() const;
  Tensor reshape(Shape shape) const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// ---- differentiable ops ---------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a[n x d] + bias[d] broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& bias);
Tensor sum(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Concatenate along the last dimension; rows must agree.
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_cols(std::span<const Tensor> parts);
// Stack 2-D blocks vertically; widths must agree. Empty blocks are skipped.
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

// Gather rows of `table` [V x d] at `ids`.
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Row-wise gain * x / sqrt(mean(x^2) + eps). Accepts a vector or a matrix.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

// Rotary position embedding over interleaved pairs within each head.
Tensor rope(const Tensor& x, std::span<const int> positions, std::size_t n_heads,
            double base = 10000.0);

// Multi-head scaled dot-product attention. q is [n x H*dh], k and v are
// [m x H*dh], mask is n*m row-major with nonzero = admitted. When `probs` is
// non-null it receives the post-softmax weights laid out [head][query][key].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 std::span<const std::uint8_t> mask, std::vector<double>* probs = nullptr);

// sum_i weight_i * CE(target_i, softmax(logits_i)), targets are distributions.
Tensor cross_entropy_soft(const Tensor& logits, const Tensor& targets,
                          std::span<const double> weights);

// ---- plain numeric helpers --------------------------------------------------

// ||x||_2 / sqrt(d).
double rms(std::span<const double> x);

// Softmax restricted to the admitted positions; masked entries are exactly 0.
std::vector<double> softmax_row(std::span<const double> logits, std::span<const std::uint8_t> mask);
std::vector<double> softmax_row(std::span<const double> logits);

// Index of the maximum; ties resolve toward the lowest index.
int argmax(std::span<const double> values);

bool all_finite(std::span<const double> values);

}  // namespace driftlab
