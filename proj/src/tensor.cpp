#include "driftlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace driftlab {

using detail::Node;

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

using BackwardFn = std::function<void(Node&)>;

Tensor make_result(Shape shape, std::vector<double> data, std::vector<std::shared_ptr<Node>> parents,
                   BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [](const auto& p) { return p->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.ndim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

double stable_sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() : Tensor(Shape{0}, {}, false) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_product(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_string(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const auto n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->data.size(); }

std::size_t Tensor::rows() const {
  return ndim() >= 2 ? shape()[0] : 1;
}

std::size_t Tensor::cols() const {
  return ndim() == 0 ? 1 : shape().back();
}

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
  }
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

std::vector<double> Tensor::row(std::size_t r) const {
  const auto w = cols();
  return {node_->data.begin() + static_cast<std::ptrdiff_t>(r * w),
          node_->data.begin() + static_cast<std::ptrdiff_t>((r + 1) * w)};
}

std::span<const double> Tensor::row_span(std::size_t r) const {
  if (r >= rows()) throw DimensionError("row " + std::to_string(r) + " out of range for " + shape_string(shape()));
  return std::span<const double>(node_->data).subspan(r * cols(), cols());
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const {
  if (size() != 1) {
    throw DimensionError("backward: root must be a scalar, got " + shape_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward || node->grad.empty()) continue;
    node->backward(*node);
    // Interior gradients are consumed; clearing keeps repeated backward calls exact.
    node->grad.clear();
  }
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_product(new_shape) != size()) {
    throw DimensionError("reshape: " + shape_string(shape()) + " -> " + shape_string(new_shape));
  }
  auto self = node_;
  return make_result(std::move(new_shape), node_->data, {self}, [self](Node& out) {
    auto& g = self->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  });
}

// ---- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  auto an = a.node(), bn = b.node();
  return make_result(Shape{m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](Node& self) {
    const double* G = self.grad.data();
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      const double* B = bn->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B + p * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      const double* A = an->data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an, factor](Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  const std::size_t d = a.cols();
  if (bias.size() != d) {
    throw DimensionError("add_row: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(a.shape()));
  }
  const std::size_t n = a.rows();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a.data()[i * d + j] + bias.data()[j];
  auto an = a.node(), bn = bias.node();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn, n, d](Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  auto an = a.node();
  return make_result(Shape{1}, {total}, {an}, [an](Node& self) {
    auto& g = an->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(a.data()[i]);
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an](Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = self.data[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Tensor silu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = x * stable_sigmoid(x);
  }
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an](Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = an->data[i];
      const double s = stable_sigmoid(x);
      g[i] += self.grad[i] * (s + x * s * (1.0 - s));
    }
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat_cols(parts);
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t width = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    width += p.cols();
  }
  std::vector<double> out(n * width);
  std::vector<std::shared_ptr<Node>> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(i * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(i * width + off));
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += w;
  }
  Shape shape = parts[0].ndim() == 1 ? Shape{width} : Shape{n, width};
  auto captured = nodes;
  return make_result(std::move(shape), std::move(out), std::move(nodes),
                     [captured, offsets, n, width](Node& self) {
                       for (std::size_t k = 0; k < captured.size(); ++k) {
                         auto& p = *captured[k];
                         if (!p.requires_grad) continue;
                         const std::size_t w = p.shape.back();
                         auto& g = p.ensure_grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < w; ++j)
                             g[i * w + j] += self.grad[i * width + offsets[k] + j];
                       }
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  std::size_t width = 0;
  std::size_t total_rows = 0;
  bool have_width = false;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    require_matrix(p, "concat_rows");
    if (have_width && p.cols() != width) {
      throw DimensionError("concat_rows: width mismatch " + std::to_string(width) + " vs " +
                           shape_string(p.shape()));
    }
    width = p.cols();
    have_width = true;
    total_rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(total_rows * width);
  std::vector<std::shared_ptr<Node>> nodes;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    nodes.push_back(p.node());
  }
  auto captured = nodes;
  return make_result(Shape{total_rows, width}, std::move(out), std::move(nodes),
                     [captured, offsets](Node& self) {
                       for (std::size_t k = 0; k < captured.size(); ++k) {
                         auto& p = *captured[k];
                         if (!p.requires_grad) continue;
                         auto& g = p.ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
                       }
                     });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_rows");
  if (begin > end || end > a.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_string(a.shape()));
  }
  const std::size_t w = a.cols();
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * w),
                          a.data().begin() + static_cast<std::ptrdiff_t>(end * w));
  auto an = a.node();
  return make_result(Shape{end - begin, w}, std::move(out), {an}, [an, begin, w](Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * w + i] += self.grad[i];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("embedding: token id " + std::to_string(ids[i]) + " outside vocab " +
                           std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  auto tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result(Shape{ids.size(), d}, std::move(out), {tn}, [tn, idv, d](Node& self) {
    auto& g = tn->ensure_grad();
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[idv[i] * d + j] += self.grad[i * d + j];
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  const std::size_t d = x.cols();
  if (gain.size() != d) {
    throw DimensionError("rms_norm: gain " + shape_string(gain.shape()) + " does not match input " +
                         shape_string(x.shape()));
  }
  if (d == 0) throw DomainError("rms_norm: empty vector");
  const std::size_t n = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> inv_r(n);
  const double* X = x.data().data();
  const double* G = gain.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += X[i * d + j] * X[i * d + j];
    const double ms = ss / static_cast<double>(d) + eps;
    if (!(ms > 0.0)) throw DomainError("rms_norm: zero-magnitude row with eps = 0");
    inv_r[i] = 1.0 / std::sqrt(ms);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = G[j] * (X[i * d + j] * inv_r[i]);
  }
  auto xn = x.node(), gn = gain.node();
  return make_result(x.shape(), std::move(out), {xn, gn}, [xn, gn, inv_r, n, d](Node& self) {
    const double* X = xn->data.data();
    const double* G = gn->data.data();
    const double* dY = self.grad.data();
    if (gn->requires_grad) {
      auto& gg = gn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gg[j] += dY[i * d + j] * X[i * d + j] * inv_r[i];
    }
    if (xn->requires_grad) {
      auto& gx = xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += dY[i * d + j] * G[j] * X[i * d + j] * inv_r[i];
        dot /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double nrm = X[i * d + j] * inv_r[i];
          gx[i * d + j] += (dY[i * d + j] * G[j] - nrm * dot) * inv_r[i];
        }
      }
    }
  });
}

Tensor rope(const Tensor& x, std::span<const int> positions, std::size_t n_heads, double base) {
  require_matrix(x, "rope");
  const std::size_t n = x.rows(), width = x.cols();
  if (positions.size() != n) {
    throw DimensionError("rope: " + std::to_string(positions.size()) + " positions for " +
                         shape_string(x.shape()));
  }
  if (n_heads == 0 || width % n_heads != 0 || (width / n_heads) % 2 != 0) {
    throw DimensionError("rope: width " + std::to_string(width) + " incompatible with " +
                         std::to_string(n_heads) + " heads");
  }
  const std::size_t dh = width / n_heads, half = dh / 2;
  std::vector<double> cosv(n * half), sinv(n * half);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < half; ++f) {
      const double inv_freq = std::pow(base, -2.0 * static_cast<double>(f) / static_cast<double>(dh));
      const double angle = static_cast<double>(positions[i]) * inv_freq;
      cosv[i * half + f] = std::cos(angle);
      sinv[i * half + f] = std::sin(angle);
    }
  }
  std::vector<double> out(x.size());
  const double* X = x.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t f = 0; f < half; ++f) {
        const std::size_t c0 = i * width + h * dh + 2 * f;
        const double c = cosv[i * half + f], s = sinv[i * half + f];
        out[c0] = X[c0] * c - X[c0 + 1] * s;
        out[c0 + 1] = X[c0] * s + X[c0 + 1] * c;
      }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {xn},
                     [xn, cosv, sinv, n, n_heads, dh, half, width](Node& self) {
                       auto& g = xn->ensure_grad();
                       const double* dY = self.grad.data();
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t h = 0; h < n_heads; ++h)
                           for (std::size_t f = 0; f < half; ++f) {
                             const std::size_t c0 = i * width + h * dh + 2 * f;
                             const double c = cosv[i * half + f], s = sinv[i * half + f];
                             g[c0] += dY[c0] * c + dY[c0 + 1] * s;
                             g[c0 + 1] += -dY[c0] * s + dY[c0 + 1] * c;
                           }
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 std::span<const std::uint8_t> mask, std::vector<double>* probs_out) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t n = q.rows(), m = k.rows(), width = q.cols();
  if (k.cols() != width || v.cols() != width || v.rows() != m) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) +
                         ", v " + shape_string(v.shape()));
  }
  if (n_heads == 0 || width % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " not divisible by heads");
  }
  if (mask.size() != n * m) {
    throw DimensionError("attention: mask holds " + std::to_string(mask.size()) + " entries, need " +
                         std::to_string(n * m));
  }
  const std::size_t dh = width / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(n_heads * n * m, 0.0);
  std::vector<double> out(n * width, 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  std::vector<double> scores(m);
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* qi = Q + i * width + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < m; ++j) {
        if (!mask[i * m + j]) continue;
        const double* kj = K + j * width + h * dh;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        scores[j] = s * inv_sqrt;
        mx = std::max(mx, scores[j]);
        any = true;
      }
      if (!any) throw DomainError("attention: query row " + std::to_string(i) + " has no admitted key");
      double z = 0.0;
      double* prow = probs.data() + (h * n + i) * m;
      for (std::size_t j = 0; j < m; ++j) {
        if (!mask[i * m + j]) continue;
        prow[j] = std::exp(scores[j] - mx);
        z += prow[j];
      }
      double* orow = out.data() + i * width + h * dh;
      for (std::size_t j = 0; j < m; ++j) {
        if (!mask[i * m + j]) continue;
        prow[j] /= z;
        const double* vj = V + j * width + h * dh;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += prow[j] * vj[c];
      }
    }
  }
  if (probs_out) *probs_out = probs;
  auto qn = q.node(), kn = k.node(), vn = v.node();
  std::vector<std::uint8_t> maskv(mask.begin(), mask.end());
  return make_result(
      Shape{n, width}, std::move(out), {qn, kn, vn},
      [qn, kn, vn, probs = std::move(probs), maskv = std::move(maskv), n, m, width, n_heads, dh,
       inv_sqrt](Node& self) {
        const double* Q = qn->data.data();
        const double* K = kn->data.data();
        const double* V = vn->data.data();
        const double* dO = self.grad.data();
        double* gq = qn->requires_grad ? qn->ensure_grad().data() : nullptr;
        double* gk = kn->requires_grad ? kn->ensure_grad().data() : nullptr;
        double* gv = vn->requires_grad ? vn->ensure_grad().data() : nullptr;
        std::vector<double> dp(m);
        for (std::size_t h = 0; h < n_heads; ++h) {
          for (std::size_t i = 0; i < n; ++i) {
            const double* prow = probs.data() + (h * n + i) * m;
            const double* doi = dO + i * width + h * dh;
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              if (!maskv[i * m + j]) continue;
              const double* vj = V + j * width + h * dh;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
              dp[j] = s;
              dot += prow[j] * s;
              if (gv) {
                double* gvj = gv + j * width + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += prow[j] * doi[c];
              }
            }
            const double* qi = Q + i * width + h * dh;
            for (std::size_t j = 0; j < m; ++j) {
              if (!maskv[i * m + j]) continue;
              const double ds = prow[j] * (dp[j] - dot) * inv_sqrt;
              if (ds == 0.0) continue;
              if (gq) {
                const double* kj = K + j * width + h * dh;
                double* gqi = gq + i * width + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
              }
              if (gk) {
                double* gkj = gk + j * width + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

Tensor cross_entropy_soft(const Tensor& logits, const Tensor& targets,
                          std::span<const double> weights) {
  require_same_shape(logits, targets, "cross_entropy_soft");
  const std::size_t n = logits.rows(), vocab = logits.cols();
  if (weights.size() != n) {
    throw DimensionError("cross_entropy_soft: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(n) + " rows");
  }
  const double* L = logits.data().data();
  const double* T = targets.data().data();
  std::vector<double> softmax(n * vocab, 0.0);
  std::vector<double> tmass(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    const double* li = L + i * vocab;
    const double mx = *std::max_element(li, li + vocab);
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) z += std::exp(li[v] - mx);
    const double lse = mx + std::log(z);
    double row = 0.0, mass = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) {
      const double t = T[i * vocab + v];
      softmax[i * vocab + v] = std::exp(li[v] - lse);
      if (t != 0.0) row += t * (lse - li[v]);
      mass += t;
    }
    tmass[i] = mass;
    total += weights[i] * row;
  }
  auto ln = logits.node(), tn = targets.node();
  std::vector<double> w(weights.begin(), weights.end());
  return make_result(Shape{1}, {total}, {ln, tn},
                     [ln, tn, softmax = std::move(softmax), tmass = std::move(tmass),
                      w = std::move(w), n, vocab](Node& self) {
                       const double g0 = self.grad[0];
                       if (ln->requires_grad) {
                         auto& gl = ln->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           if (w[i] == 0.0) continue;
                           for (std::size_t v = 0; v < vocab; ++v)
                             gl[i * vocab + v] += g0 * w[i] *
                                                  (softmax[i * vocab + v] * tmass[i] - tn->data[i * vocab + v]);
                         }
                       }
                       if (tn->requires_grad) {
                         auto& gt = tn->ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           if (w[i] == 0.0) continue;
                           const double* li = ln->data.data() + i * vocab;
                           const double mx = *std::max_element(li, li + vocab);
                           double z = 0.0;
                           for (std::size_t v = 0; v < vocab; ++v) z += std::exp(li[v] - mx);
                           const double lse = mx + std::log(z);
                           for (std::size_t v = 0; v < vocab; ++v)
                             gt[i * vocab + v] += g0 * w[i] * (lse - li[v]);
                         }
                       }
                     });
}

// ---- helpers ------------------------------------------------------------------

double rms(std::span<const double> x) {
  if (x.empty()) throw DomainError("rms: empty vector");
  double ss = 0.0;
  for (double v : x) ss += v * v;
  return std::sqrt(ss / static_cast<double>(x.size()));
}

std::vector<double> softmax_row(std::span<const double> logits, std::span<const std::uint8_t> mask) {
  if (mask.size() != logits.size()) {
    throw DimensionError("softmax_row: mask length " + std::to_string(mask.size()) + " vs logits " +
                         std::to_string(logits.size()));
  }
  double mx = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!mask[i]) continue;
    mx = std::max(mx, logits[i]);
    any = true;
  }
  if (!any) throw DomainError("softmax_row: every position is masked");
  std::vector<double> out(logits.size(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!mask[i]) continue;
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (auto& v : out) v /= z;
  return out;
}

std::vector<double> softmax_row(std::span<const double> logits) {
  std::vector<std::uint8_t> mask(logits.size(), 1);
  return softmax_row(logits, mask);
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw DomainError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return static_cast<int>(best);
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace driftlab
