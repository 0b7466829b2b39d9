#include "cbag/compute.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "cbag/error.hpp"

namespace cbag::compute {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> make_node(Shape shape) {
  auto node = std::make_shared<Node<T>>();
  node->value.assign(element_count(shape), T(0));
  node->shape = std::move(shape);
  return node;
}

// Attaches parents and a backward rule when any input requires gradients.
template <typename T>
void record(Node<T>& out, std::vector<NodePtr<T>> parents, std::function<void(Node<T>&)> fn) {
  if (!g_grad_enabled) return;
  bool any = std::any_of(parents.begin(), parents.end(),
                         [](const NodePtr<T>& p) { return p->requires_grad; });
  if (!any) return;
  out.requires_grad = true;
  out.is_leaf = false;
  out.parents = std::move(parents);
  out.backward_fn = std::move(fn);
}

std::string shapes_message(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

// C[M,N] += A[M,K] B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,K] += A[M,N] B[K,N]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T B[M,N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  auto node = make_node<T>(std::move(shape));
  node->requires_grad = requires_grad;
  return Tensor(node);
}

template <typename T>
Tensor<T> Tensor<T>::from_values(Shape shape, std::vector<T> values, bool requires_grad) {
  if (element_count(shape) != values.size()) {
    throw ShapeError("from_values: shape " + to_string(shape) + " holds " +
                     std::to_string(element_count(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(node);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return node_->shape;
}
template <typename T>
std::size_t Tensor<T>::size() const {
  return node_->value.size();
}
template <typename T>
std::size_t Tensor<T>::cols() const {
  return node_->shape.empty() ? 1 : node_->shape.back();
}
template <typename T>
std::size_t Tensor<T>::rows() const {
  const auto c = cols();
  return c == 0 ? 0 : size() / c;
}
template <typename T>
std::span<const T> Tensor<T>::values() const {
  return node_->value;
}
template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  return node_->value;
}
template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return node_->grad;
}
template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return node_->ensure_grad();
}
template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_->requires_grad;
}
template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}
template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not scalar");
  return node_->value[0];
}

// ---- operations -----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (b.shape().size() != 2 || a.shape().empty() || a.cols() != b.shape()[0]) {
    throw ShapeError(shapes_message("matmul", a.shape(), b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.shape()[1];
  Shape out_shape = a.shape();
  out_shape.back() = n;
  auto out = make_node<T>(out_shape);
  gemm_nn(m, n, k, a.values().data(), b.values().data(), out->value.data());
  record<T>(*out, {a.node(), b.node()}, [m, n, k](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) gemm_nt(m, n, k, self.grad.data(), pb.value.data(), pa.ensure_grad().data());
    if (pb.requires_grad) gemm_tn(m, n, k, pa.value.data(), self.grad.data(), pb.ensure_grad().data());
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (a.shape() != b.shape()) throw ShapeError(shapes_message("add", a.shape(), b.shape()));
  auto out = make_node<T>(a.shape());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
  record<T>(*out, {a.node(), b.node()}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (a.shape() != b.shape()) throw ShapeError(shapes_message("mul", a.shape(), b.shape()));
  auto out = make_node<T>(a.shape());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
  record<T>(*out, {a.node(), b.node()}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  require_defined(a, "scale");
  auto out = make_node<T>(a.shape());
  auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * factor;
  record<T>(*out, {a.node()}, [factor](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  require_defined(a, "sum");
  auto out = make_node<T>({1});
  T total = T(0);
  for (T v : a.values()) total += v;
  out->value[0] = total;
  record<T>(*out, {a.node()}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& x : g) x += self.grad[0];
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  require_defined(a, "relu");
  auto out = make_node<T>(a.shape());
  auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] > T(0) ? av[i] : T(0);
  record<T>(*out, {a.node()}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.value[i] > T(0)) g[i] += self.grad[i];
    }
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, T p, std::mt19937_64* rng) {
  require_defined(a, "dropout");
  if (rng == nullptr || p <= T(0)) return a;
  if (p >= T(1)) throw UsageError("dropout: probability must be < 1");
  auto out = make_node<T>(a.shape());
  std::vector<T> keep(a.size());
  std::bernoulli_distribution draw(1.0 - static_cast<double>(p));
  const T inv = T(1) / (T(1) - p);
  auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    keep[i] = draw(*rng) ? inv : T(0);
    out->value[i] = av[i] * keep[i];
  }
  record<T>(*out, {a.node()}, [keep = std::move(keep)](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * keep[i];
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_defined(table, "embedding_gather");
  if (table.shape().size() != 2) {
    throw ShapeError("embedding_gather: table must be 2-D, got " + to_string(table.shape()));
  }
  const std::size_t vocab = table.shape()[0], dim = table.shape()[1];
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw UsageError("embedding_gather: id " + std::to_string(id) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
  }
  auto out = make_node<T>({ids.size(), dim});
  auto tv = table.values();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[r] * dim), dim,
                out->value.begin() + static_cast<std::ptrdiff_t>(r * dim));
  }
  record<T>(*out, {table.node()},
            [index = std::vector<std::int32_t>(ids.begin(), ids.end()), dim](Node<T>& self) {
              auto& g = self.parents[0]->ensure_grad();
              for (std::size_t r = 0; r < index.size(); ++r) {
                T* dst = g.data() + static_cast<std::size_t>(index[r]) * dim;
                const T* src = self.grad.data() + r * dim;
                for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
              }
            });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> concat_lastdim(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_defined(p, "concat_lastdim");
    if (p.rows() != rows || p.shape().size() != parts[0].shape().size()) {
      throw ShapeError(shapes_message("concat_lastdim", parts[0].shape(), p.shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  Shape shape = parts[0].shape();
  shape.back() = total;
  auto out = make_node<T>(shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].values();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(r * widths[k]), widths[k],
                  out->value.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += widths[k];
  }
  std::vector<NodePtr<T>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  record<T>(*out, std::move(parents), [widths, rows, total](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (p.requires_grad) {
        auto& g = p.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[k]; ++j) g[r * widths[k] + j] += self.grad[r * total + off + j];
        }
      }
      off += widths[k];
    }
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  require_defined(x, "softmax_lastdim");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (cols == 0) throw ShapeError("softmax_lastdim: empty last dimension");
  auto out = make_node<T>(x.shape());
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * cols;
    T* o = out->value.data() + r * cols;
    T mx = in[0];
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::isfinite(in[j])) throw NumericalError("softmax_lastdim: non-finite input");
      mx = std::max(mx, in[j]);
    }
    T z = T(0);
    for (std::size_t j = 0; j < cols; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) o[j] /= z;
  }
  record<T>(*out, {x.node()}, [rows, cols](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * cols;
      const T* dy = self.grad.data() + r * cols;
      T dot = T(0);
      for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] += y[j] * (dy[j] - dot);
    }
  });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_defined(x, "layer_norm");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.size() != cols || bias.size() != cols) {
    throw ShapeError(shapes_message("layer_norm", x.shape(), gain.shape()));
  }
  auto out = make_node<T>(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * cols;
    T mean = T(0);
    for (std::size_t j = 0; j < cols; ++j) mean += in[j];
    mean /= static_cast<T>(cols);
    T var = T(0);
    for (std::size_t j = 0; j < cols; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(cols);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < cols; ++j) {
      const T h = (in[j] - mean) * is;
      xhat[r * cols + j] = h;
      out->value[r * cols + j] = gv[j] * h + bv[j];
    }
  }
  record<T>(*out, {x.node(), gain.node(), bias.node()},
            [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
              auto& px = *self.parents[0];
              auto& pg = *self.parents[1];
              auto& pb = *self.parents[2];
              if (pg.requires_grad) {
                auto& g = pg.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                  for (std::size_t j = 0; j < cols; ++j) g[j] += self.grad[r * cols + j] * xhat[r * cols + j];
              }
              if (pb.requires_grad) {
                auto& g = pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                  for (std::size_t j = 0; j < cols; ++j) g[j] += self.grad[r * cols + j];
              }
              if (px.requires_grad) {
                auto& g = px.ensure_grad();
                const T n = static_cast<T>(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                  const T* dy = self.grad.data() + r * cols;
                  const T* h = xhat.data() + r * cols;
                  T mean_d = T(0), mean_dh = T(0);
                  for (std::size_t j = 0; j < cols; ++j) {
                    const T d = dy[j] * pg.value[j];
                    mean_d += d;
                    mean_dh += d * h[j];
                  }
                  mean_d /= n;
                  mean_dh /= n;
                  for (std::size_t j = 0; j < cols; ++j) {
                    const T d = dy[j] * pg.value[j];
                    g[r * cols + j] += inv_std[r] * (d - mean_d - h[j] * mean_dh);
                  }
                }
              }
            });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels,
                        std::span<const std::uint8_t> mask) {
  require_defined(logits, "cross_entropy");
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (labels.size() != rows || mask.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(rows) + " logit rows but " +
                     std::to_string(labels.size()) + " labels and " + std::to_string(mask.size()) +
                     " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++count;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) {
      throw UsageError("cross_entropy: label " + std::to_string(labels[r]) + " outside " +
                       std::to_string(cols) + " classes");
    }
  }
  if (count == 0) throw UsageError("cross_entropy: every position is padding");
  auto out = make_node<T>({1});
  std::vector<T> probs(rows * cols, T(0));
  auto lv = logits.values();
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* in = lv.data() + r * cols;
    T mx = in[0];
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, in[j]);
    T z = T(0);
    for (std::size_t j = 0; j < cols; ++j) z += (probs[r * cols + j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) probs[r * cols + j] /= z;
    total += -(in[labels[r]] - mx - std::log(z));
  }
  const T inv_count = T(1) / static_cast<T>(count);
  out->value[0] = total * inv_count;
  if (!std::isfinite(out->value[0])) throw NumericalError("cross_entropy: non-finite loss");
  record<T>(*out, {logits.node()},
            [rows, cols, inv_count, probs = std::move(probs),
             lab = std::vector<std::int32_t>(labels.begin(), labels.end()),
             msk = std::vector<std::uint8_t>(mask.begin(), mask.end())](Node<T>& self) {
              auto& g = self.parents[0]->ensure_grad();
              const T up = self.grad[0] * inv_count;
              for (std::size_t r = 0; r < rows; ++r) {
                if (!msk[r]) continue;
                for (std::size_t j = 0; j < cols; ++j) g[r * cols + j] += up * probs[r * cols + j];
                g[r * cols + static_cast<std::size_t>(lab[r])] -= up;
              }
            });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, std::int32_t label) {
  const std::int32_t labels[1] = {label};
  const std::uint8_t mask[1] = {1};
  Tensor<T> row = logits;
  if (logits.rows() != 1) {
    throw ShapeError("cross_entropy_logits: expected a single row, got " + to_string(logits.shape()));
  }
  return cross_entropy(row, std::span<const std::int32_t>(labels), std::span<const std::uint8_t>(mask));
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionLayout& layout) {
  require_defined(q, "attention");
  require_defined(k, "attention");
  require_defined(v, "attention");
  const std::size_t d = q.cols(), dv_all = v.cols();
  const std::size_t B = layout.batch, Lq = layout.query_len, Lk = layout.key_len, H = layout.heads;
  if (H == 0 || d % H != 0 || dv_all % H != 0) {
    throw ShapeError("attention: widths " + std::to_string(d) + "/" + std::to_string(dv_all) +
                     " not divisible by " + std::to_string(H) + " heads");
  }
  if (k.cols() != d || q.rows() != B * Lq || k.rows() != B * Lk) {
    throw ShapeError(shapes_message("attention", q.shape(), k.shape()));
  }
  if (v.rows() != k.rows()) throw ShapeError(shapes_message("attention", k.shape(), v.shape()));
  if (!layout.key_lengths.empty() && layout.key_lengths.size() != B) {
    throw ShapeError("attention: key_lengths size does not match batch");
  }
  const std::size_t dk = d / H, dv = dv_all / H;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));

  auto out = make_node<T>({B * Lq, dv_all});
  // Attention weights per (b, h, i, j), zero at masked keys.
  std::vector<T> probs(B * H * Lq * Lk, T(0));
  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();
  std::vector<T> scores(Lk);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t klen = layout.key_lengths.empty() ? Lk : std::min(layout.key_lengths[b], Lk);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < Lq; ++i) {
        const std::size_t limit = layout.causal ? std::min(klen, i + 1) : klen;
        if (limit == 0) throw ShapeError("attention: query has no visible keys");
        const T* qrow = qv.data() + (b * Lq + i) * d + h * dk;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < limit; ++j) {
          const T* krow = kv.data() + (b * Lk + j) * d + h * dk;
          T s = T(0);
          for (std::size_t c = 0; c < dk; ++c) s += qrow[c] * krow[c];
          s *= inv_sqrt;
          scores[j] = s;
          mx = std::max(mx, s);
        }
        if (!std::isfinite(mx)) throw NumericalError("attention: non-finite score");
        T* p = probs.data() + ((b * H + h) * Lq + i) * Lk;
        T z = T(0);
        for (std::size_t j = 0; j < limit; ++j) z += (p[j] = std::exp(scores[j] - mx));
        T* orow = out->value.data() + (b * Lq + i) * dv_all + h * dv;
        for (std::size_t j = 0; j < limit; ++j) {
          p[j] /= z;
          const T* vrow = vv.data() + (b * Lk + j) * dv_all + h * dv;
          for (std::size_t c = 0; c < dv; ++c) orow[c] += p[j] * vrow[c];
        }
      }
    }
  }
  record<T>(*out, {q.node(), k.node(), v.node()},
            [B, Lq, Lk, H, d, dk, dv_all, dv, inv_sqrt, probs = std::move(probs)](Node<T>& self) {
              auto& pq = *self.parents[0];
              auto& pk = *self.parents[1];
              auto& pv = *self.parents[2];
              std::vector<T>* gq = pq.requires_grad ? &pq.ensure_grad() : nullptr;
              std::vector<T>* gk = pk.requires_grad ? &pk.ensure_grad() : nullptr;
              std::vector<T>* gv = pv.requires_grad ? &pv.ensure_grad() : nullptr;
              std::vector<T> dp(Lk);
              for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t h = 0; h < H; ++h) {
                  for (std::size_t i = 0; i < Lq; ++i) {
                    const T* p = probs.data() + ((b * H + h) * Lq + i) * Lk;
                    const T* dout = self.grad.data() + (b * Lq + i) * dv_all + h * dv;
                    T dot = T(0);
                    for (std::size_t j = 0; j < Lk; ++j) {
                      if (p[j] == T(0)) {
                        dp[j] = T(0);
                        continue;
                      }
                      const T* vrow = pv.value.data() + (b * Lk + j) * dv_all + h * dv;
                      T s = T(0);
                      for (std::size_t c = 0; c < dv; ++c) s += dout[c] * vrow[c];
                      dp[j] = s;
                      dot += s * p[j];
                      if (gv) {
                        T* g = gv->data() + (b * Lk + j) * dv_all + h * dv;
                        for (std::size_t c = 0; c < dv; ++c) g[c] += p[j] * dout[c];
                      }
                    }
                    const T* qrow = pq.value.data() + (b * Lq + i) * d + h * dk;
                    T* gqrow = gq ? gq->data() + (b * Lq + i) * d + h * dk : nullptr;
                    for (std::size_t j = 0; j < Lk; ++j) {
                      if (p[j] == T(0)) continue;
                      const T ds = p[j] * (dp[j] - dot) * inv_sqrt;
                      const T* krow = pk.value.data() + (b * Lk + j) * d + h * dk;
                      if (gqrow)
                        for (std::size_t c = 0; c < dk; ++c) gqrow[c] += ds * krow[c];
                      if (gk) {
                        T* g = gk->data() + (b * Lk + j) * d + h * dk;
                        for (std::size_t c = 0; c < dk; ++c) g[c] += ds * qrow[c];
                      }
                    }
                  }
                }
              }
            });
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, bool causal) {
  require_defined(q, "attention");
  require_defined(k, "attention");
  require_defined(v, "attention");
  if (q.cols() != k.cols()) throw ShapeError(shapes_message("attention", q.shape(), k.shape()));
  if (k.rows() != v.rows()) throw ShapeError(shapes_message("attention", k.shape(), v.shape()));
  AttentionLayout layout;
  layout.query_len = q.rows();
  layout.key_len = k.rows();
  layout.causal = causal;
  return multi_head_attention(q, k, v, layout);
}

template <typename T>
void backward(const Tensor<T>& loss) {
  require_defined(loss, "backward");
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  Node<T>* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* node : order) {
    if (!node->is_leaf) node->grad.assign(node->value.size(), T(0));
  }
  if (root->is_leaf) {
    root->ensure_grad()[0] += T(1);
    return;
  }
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& f,
                                  std::span<Tensor<T>> params, double step, std::size_t samples,
                                  std::uint64_t seed, double floor) {
  for (auto& p : params) p.zero_grad();
  backward(f());
  std::vector<std::vector<T>> analytic;
  std::size_t total = 0;
  for (auto& p : params) {
    auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(p.size(), T(0));
    total += p.size();
  }
  GradCheckResult result;
  if (total == 0) return result;

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  const std::size_t n = std::min(samples, total);
  NoGradGuard no_grad;
  for (std::size_t s = 0; s < n; ++s) {
    // Exhaustive when samples covers every coordinate, random otherwise.
    std::size_t flat = samples >= total ? s : pick(rng);
    std::size_t pi = 0;
    while (flat >= params[pi].size()) flat -= params[pi++].size();
    auto values = params[pi].mutable_values();
    const T original = values[flat];
    auto at = [&](double offset) {
      values[flat] = static_cast<T>(original + offset);
      return static_cast<double>(f().item());
    };
    // five-point central stencil, error O(step^4)
    const double numeric =
        (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
    values[flat] = original;
    const double a = static_cast<double>(analytic[pi][flat]);
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    ++result.checked;
    if (rel >= result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_param = pi;
      result.worst_index = flat;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

#define CBAG_INSTANTIATE(T)                                                                      \
  template struct Node<T>;                                                                       \
  template class Tensor<T>;                                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> dropout(const Tensor<T>&, T, std::mt19937_64*);                             \
  template Tensor<T> embedding_gather(const Tensor<T>&, std::span<const std::int32_t>);          \
  template Tensor<T> concat_lastdim(std::span<const Tensor<T>>);                                 \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                          \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> cross_entropy_logits(const Tensor<T>&, std::int32_t);                       \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>,              \
                                   std::span<const std::uint8_t>);                               \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                          const AttentionLayout&);                               \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, bool);      \
  template void backward(const Tensor<T>&);                                                      \
  template GradCheckResult finite_diff_check(const std::function<Tensor<T>()>&,                  \
                                             std::span<Tensor<T>>, double, std::size_t,          \
                                             std::uint64_t, double);

CBAG_INSTANTIATE(float)
CBAG_INSTANTIATE(double)

#undef CBAG_INSTANTIATE

}  // namespace cbag::compute
