#pragma once

// Condition encoder / masked decoder transformer with four output heads
// (next token, POS tag, dependency label, entity label).

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cbag/compute.hpp"
#include "cbag/corpus.hpp"
#include "cbag/error.hpp"

namespace cbag {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t heads = 2;
  std::size_t encoder_blocks = 2;
  std::size_t decoder_blocks = 2;
  std::size_t ff_size = 256;
  double dropout = 0.1;
  std::size_t max_seq = 32;
  std::size_t token_vocab = 0;
  std::size_t pos_vocab = 0;
  std::size_t dep_vocab = 0;
  std::size_t ent_vocab = 0;
  // Year + keyword entries; the model adds one learned null-condition row.
  std::size_t condition_vocab = 0;
  double layer_norm_eps = 1e-5;
  double init_std = 0.02;

  // Throws UsageError naming the first offending field.
  void validate() const;
  std::size_t null_condition() const { return condition_vocab; }
};

template <typename T>
struct AttentionParams {
  compute::Tensor<T> wq, wk, wv, wo;  // (d, d); head h owns columns [h*d/k, (h+1)*d/k)
};

template <typename T>
struct LayerNormParams {
  compute::Tensor<T> gain, bias;  // (d)
};

template <typename T>
struct FeedForwardParams {
  compute::Tensor<T> w1;  // (d, ff)
  compute::Tensor<T> w2;  // (ff, d)
};

template <typename T>
struct EncoderBlockParams {
  AttentionParams<T> self_attn;
  LayerNormParams<T> norm1;
  FeedForwardParams<T> ff;
  LayerNormParams<T> norm2;
};

template <typename T>
struct DecoderBlockParams {
  AttentionParams<T> self_attn;
  LayerNormParams<T> norm1;
  AttentionParams<T> cross_attn;
  LayerNormParams<T> norm2;
  FeedForwardParams<T> ff;
  LayerNormParams<T> norm3;
};

template <typename T>
struct NamedParameter {
  std::string name;
  compute::Tensor<T> tensor;
  bool decay;  // false for layer-norm gains and biases
};

template <typename T>
struct ModelParameters {
  compute::Tensor<T> token_embedding;      // (token_vocab, d)
  compute::Tensor<T> condition_embedding;  // (condition_vocab + 1, d)
  std::vector<EncoderBlockParams<T>> encoder;
  std::vector<DecoderBlockParams<T>> decoder;
  compute::Tensor<T> head_token, head_pos, head_dep, head_ent;  // (d, vocab)

  // Fixed order; defines checkpoint layout and initialization order.
  std::vector<NamedParameter<T>> list() const;
};

template <typename T>
struct ForwardOutput {
  // (batch * seq_len, vocab) each, row-major over (batch, position).
  compute::Tensor<T> token_logits, pos_logits, dep_logits, ent_logits;
};

template <typename T>
struct LossTerms {
  compute::Tensor<T> total;
  double token = 0.0, pos = 0.0, dep = 0.0, ent = 0.0;
};

enum class Mode { kTrain, kEval };

// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same).
template <typename T>
compute::Tensor<T> positional_encoding(std::size_t n, std::size_t d_model);

// Projections, attention over Y from queries X, output projection.
template <typename T>
compute::Tensor<T> multi_head(const compute::Tensor<T>& x, const compute::Tensor<T>& y, const AttentionParams<T>& p,
                              const compute::AttentionLayout& layout);

template <typename T>
compute::Tensor<T> feed_forward(const compute::Tensor<T>& x, const FeedForwardParams<T>& p);

// Dropout probability p with a null rng disables dropout.
template <typename T>
compute::Tensor<T> encoder_block(const compute::Tensor<T>& x, const EncoderBlockParams<T>& p,
                                 const compute::AttentionLayout& self_layout, T eps, T dropout,
                                 std::mt19937_64* rng);

template <typename T>
compute::Tensor<T> decoder_block(const compute::Tensor<T>& x, const compute::Tensor<T>& enc,
                                 const DecoderBlockParams<T>& p, const compute::AttentionLayout& self_layout,
                                 const compute::AttentionLayout& cross_layout, T eps, T dropout,
                                 std::mt19937_64* rng);

template <typename T>
class Model {
 public:
  Model() = default;
  // Normal(0, init_std) weights drawn in double precision, gains 1, biases 0.
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelParameters<T>& params() { return params_; }
  const ModelParameters<T>& params() const { return params_; }
  std::vector<NamedParameter<T>> parameters() const { return params_.list(); }
  std::size_t parameter_count() const;

  // Copies parameter values from a model of the same configuration.
  template <typename U>
  void copy_values_from(const Model<U>& other);

  // Uses input_ids, lengths, condition_ids and condition_lengths of the batch.
  // In training mode dropout draws from rng.
  ForwardOutput<T> forward(const Batch& batch, Mode mode, std::mt19937_64* rng = nullptr) const;

  // Sum of the four per-task mean cross entropies over unpadded positions.
  LossTerms<T> loss(const ForwardOutput<T>& out, const Batch& batch) const;

 private:
  ModelConfig config_;
  ModelParameters<T> params_;
};

// One-row batch for inference: no targets, no padding.
Batch single_sequence(std::span<const TokenId> ids, std::span<const std::int32_t> condition_ids);

template <typename T>
template <typename U>
void Model<T>::copy_values_from(const Model<U>& other) {
  auto dst = parameters();
  auto src = other.parameters();
  if (dst.size() != src.size()) throw ShapeError("copy_values_from: parameter lists differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].tensor.shape() != src[i].tensor.shape()) {
      throw ShapeError("copy_values_from: shape mismatch at " + dst[i].name);
    }
    auto out = dst[i].tensor.mutable_values();
    auto in = src[i].tensor.values();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>(in[j]);
  }
}

}  // namespace cbag
