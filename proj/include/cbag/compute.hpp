#pragma once

// Shaped arrays with reverse-mode differentiation.
//
// A Tensor is a reference-counted handle to a graph node. Operations on
// tensors that require gradients record a backward rule; backward() walks the
// recorded graph in reverse topological order and accumulates gradients into
// every reachable leaf. Two precisions are instantiated: double for gradient
// checks and float for training.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cbag::compute {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct Node;

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  // Last dimension, and the product of all leading dimensions.
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<const T> values() const;
  std::span<T> mutable_values();
  // Empty until a gradient has been accumulated.
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  bool requires_grad() const;
  void zero_grad();
  T item() const;

  // Internal: graph access for operation implementations.
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

// Disables graph recording on the current thread for its lifetime.
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

// a: (..., K), b: (K, N) -> (..., N)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise, identical shapes.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// Sum of all elements, as a scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> relu(const Tensor<T>& a);

// Inverted dropout. A null rng or p == 0 returns the input unchanged.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, T p, std::mt19937_64* rng);

// table: (V, D); returns (ids.size(), D).
template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const std::int32_t> ids);

template <typename T>
Tensor<T> concat_lastdim(std::span<const Tensor<T>> parts);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

// Normalizes each row over the last dimension, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

// -log softmax(logits)[label] for a single row of logits.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, std::int32_t label);

// Mean over rows with mask != 0 of -log softmax(logits[row])[labels[row]].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels,
                        std::span<const std::uint8_t> mask);

// Layout of a batched multi-head attention call. Queries are packed as
// (batch * query_len, d) and keys/values as (batch * key_len, d); head h
// uses columns [h*d/heads, (h+1)*d/heads). Keys at positions >= key_lengths[b]
// are masked; causal additionally masks keys after the query position.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t query_len = 0;
  std::size_t key_len = 0;
  std::size_t heads = 1;
  bool causal = false;
  std::vector<std::size_t> key_lengths;  // empty = all keys valid
};

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionLayout& layout);

// softmax(q k^T / sqrt(d_k) + mask) v for one sequence and one head.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, bool causal);

// Accumulates d(loss)/d(leaf) into every reachable leaf requiring gradients.
template <typename T>
void backward(const Tensor<T>& loss);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares backward() gradients of f against five-point central differences on up to
// `samples` randomly chosen coordinates across `params`. f must be
// deterministic. Relative error is |a - n| / max(|a|, |n|, floor).
template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& f,
                                  std::span<Tensor<T>> params, double step, std::size_t samples,
                                  std::uint64_t seed, double floor = 1e-6);

}  // namespace cbag::compute
