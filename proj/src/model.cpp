#include "cbag/model.hpp"

#include <algorithm>
#include <cmath>

#include "cbag/error.hpp"

namespace cbag {

using compute::AttentionLayout;
using compute::Tensor;

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw UsageError(std::string("model config: ") + name + " must be >= 1");
  };
  positive(d_model, "d_model");
  positive(heads, "heads");
  positive(encoder_blocks, "encoder_blocks");
  positive(decoder_blocks, "decoder_blocks");
  positive(ff_size, "ff_size");
  positive(max_seq, "max_seq");
  positive(token_vocab, "token_vocab");
  positive(pos_vocab, "pos_vocab");
  positive(dep_vocab, "dep_vocab");
  positive(ent_vocab, "ent_vocab");
  positive(condition_vocab, "condition_vocab");
  if (d_model % heads != 0) throw UsageError("model config: d_model must be divisible by heads");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("model config: dropout must lie in [0, 1)");
  if (!(layer_norm_eps > 0.0)) throw UsageError("model config: layer_norm_eps must be positive");
  if (!(init_std > 0.0)) throw UsageError("model config: init_std must be positive");
}

template <typename T>
std::vector<NamedParameter<T>> ModelParameters<T>::list() const {
  std::vector<NamedParameter<T>> out;
  auto add = [&](std::string name, const Tensor<T>& t, bool decay) { out.push_back({std::move(name), t, decay}); };
  auto add_attn = [&](const std::string& prefix, const AttentionParams<T>& a) {
    add(prefix + ".wq", a.wq, true);
    add(prefix + ".wk", a.wk, true);
    add(prefix + ".wv", a.wv, true);
    add(prefix + ".wo", a.wo, true);
  };
  auto add_norm = [&](const std::string& prefix, const LayerNormParams<T>& n) {
    add(prefix + ".gain", n.gain, false);
    add(prefix + ".bias", n.bias, false);
  };
  auto add_ff = [&](const std::string& prefix, const FeedForwardParams<T>& f) {
    add(prefix + ".w1", f.w1, true);
    add(prefix + ".w2", f.w2, true);
  };
  add("token_embedding", token_embedding, true);
  add("condition_embedding", condition_embedding, true);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const std::string p = "encoder." + std::to_string(i);
    add_attn(p + ".self_attn", encoder[i].self_attn);
    add_norm(p + ".norm1", encoder[i].norm1);
    add_ff(p + ".ff", encoder[i].ff);
    add_norm(p + ".norm2", encoder[i].norm2);
  }
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const std::string p = "decoder." + std::to_string(i);
    add_attn(p + ".self_attn", decoder[i].self_attn);
    add_norm(p + ".norm1", decoder[i].norm1);
    add_attn(p + ".cross_attn", decoder[i].cross_attn);
    add_norm(p + ".norm2", decoder[i].norm2);
    add_ff(p + ".ff", decoder[i].ff);
    add_norm(p + ".norm3", decoder[i].norm3);
  }
  add("head_token", head_token, true);
  add("head_pos", head_pos, true);
  add("head_dep", head_dep, true);
  add("head_ent", head_ent, true);
  return out;
}

template <typename T>
Tensor<T> positional_encoding(std::size_t n, std::size_t d_model) {
  std::vector<T> v(n * d_model);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; 2 * i < d_model; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      v[pos * d_model + 2 * i] = static_cast<T>(std::sin(angle));
      if (2 * i + 1 < d_model) v[pos * d_model + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return Tensor<T>::from_values({n, d_model}, std::move(v));
}

template <typename T>
Tensor<T> multi_head(const Tensor<T>& x, const Tensor<T>& y, const AttentionParams<T>& p,
                     const AttentionLayout& layout) {
  auto q = compute::matmul(x, p.wq);
  auto k = compute::matmul(y, p.wk);
  auto v = compute::matmul(y, p.wv);
  return compute::matmul(compute::multi_head_attention(q, k, v, layout), p.wo);
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardParams<T>& p) {
  return compute::matmul(compute::relu(compute::matmul(x, p.w1)), p.w2);
}

namespace {

template <typename T>
Tensor<T> add_norm(const Tensor<T>& sublayer, const Tensor<T>& residual, const LayerNormParams<T>& n, T eps,
                   T dropout, std::mt19937_64* rng) {
  return compute::layer_norm(compute::add(compute::dropout(sublayer, dropout, rng), residual), n.gain, n.bias, eps);
}

}  // namespace

template <typename T>
Tensor<T> encoder_block(const Tensor<T>& x, const EncoderBlockParams<T>& p, const AttentionLayout& self_layout, T eps,
                        T dropout, std::mt19937_64* rng) {
  auto alpha = add_norm(multi_head(x, x, p.self_attn, self_layout), x, p.norm1, eps, dropout, rng);
  return add_norm(feed_forward(alpha, p.ff), alpha, p.norm2, eps, dropout, rng);
}

template <typename T>
Tensor<T> decoder_block(const Tensor<T>& x, const Tensor<T>& enc, const DecoderBlockParams<T>& p,
                        const AttentionLayout& self_layout, const AttentionLayout& cross_layout, T eps, T dropout,
                        std::mt19937_64* rng) {
  auto beta = add_norm(multi_head(x, x, p.self_attn, self_layout), x, p.norm1, eps, dropout, rng);
  auto alpha = add_norm(multi_head(beta, enc, p.cross_attn, cross_layout), beta, p.norm2, eps, dropout, rng);
  return add_norm(feed_forward(alpha, p.ff), alpha, p.norm3, eps, dropout, rng);
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, config_.init_std);
  auto weight = [&](std::size_t r, std::size_t c) {
    std::vector<T> v(r * c);
    for (auto& x : v) x = static_cast<T>(normal(rng));
    return Tensor<T>::from_values({r, c}, std::move(v), true);
  };
  auto norm = [&] {
    return LayerNormParams<T>{Tensor<T>::from_values({d}, std::vector<T>(d, T(1)), true),
                              Tensor<T>::zeros({d}, true)};
  };
  auto attn = [&] { return AttentionParams<T>{weight(d, d), weight(d, d), weight(d, d), weight(d, d)}; };
  auto ff = [&] { return FeedForwardParams<T>{weight(d, config_.ff_size), weight(config_.ff_size, d)}; };

  params_.token_embedding = weight(config_.token_vocab, d);
  params_.condition_embedding = weight(config_.condition_vocab + 1, d);
  for (std::size_t i = 0; i < config_.encoder_blocks; ++i) {
    EncoderBlockParams<T> b;
    b.self_attn = attn();
    b.norm1 = norm();
    b.ff = ff();
    b.norm2 = norm();
    params_.encoder.push_back(std::move(b));
  }
  for (std::size_t i = 0; i < config_.decoder_blocks; ++i) {
    DecoderBlockParams<T> b;
    b.self_attn = attn();
    b.norm1 = norm();
    b.cross_attn = attn();
    b.norm2 = norm();
    b.ff = ff();
    b.norm3 = norm();
    params_.decoder.push_back(std::move(b));
  }
  params_.head_token = weight(d, config_.token_vocab);
  params_.head_pos = weight(d, config_.pos_vocab);
  params_.head_dep = weight(d, config_.dep_vocab);
  params_.head_ent = weight(d, config_.ent_vocab);
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.size();
  return n;
}

template <typename T>
ForwardOutput<T> Model<T>::forward(const Batch& batch, Mode mode, std::mt19937_64* rng) const {
  const std::size_t B = batch.batch_size, L = batch.seq_len, d = config_.d_model;
  if (B == 0 || L == 0) throw UsageError("forward: empty batch");
  if (L > config_.max_seq) {
    throw UsageError("forward: sequence length " + std::to_string(L) + " exceeds max_seq " +
                     std::to_string(config_.max_seq));
  }
  if (batch.input_ids.size() != B * L) throw ShapeError("forward: input_ids size does not match batch shape");
  std::mt19937_64* drop_rng = mode == Mode::kTrain ? rng : nullptr;
  const T p = static_cast<T>(config_.dropout);
  const T eps = static_cast<T>(config_.layer_norm_eps);

  // Decoder input: token embeddings plus sinusoidal positions.
  auto pe = positional_encoding<T>(L, d);
  std::vector<T> pe_tiled(B * L * d);
  for (std::size_t b = 0; b < B; ++b) std::copy(pe.values().begin(), pe.values().end(), pe_tiled.begin() + b * L * d);
  auto x = compute::add(compute::embedding_gather(params_.token_embedding, batch.input_ids),
                        Tensor<T>::from_values({B * L, d}, std::move(pe_tiled)));
  x = compute::dropout(x, p, drop_rng);

  // Encoder input: null condition followed by the condition entries.
  const std::size_t M = batch.condition_len + 1;
  std::vector<std::int32_t> cond(B * M, static_cast<std::int32_t>(config_.null_condition()));
  std::vector<std::size_t> cond_lengths(B, 1);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = batch.condition_lengths.empty() ? batch.condition_len : batch.condition_lengths[b];
    for (std::size_t j = 0; j < len; ++j) {
      const auto id = batch.condition_ids[b * batch.condition_len + j];
      if (id < 0 || static_cast<std::size_t>(id) >= config_.condition_vocab) {
        throw UsageError("forward: condition id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(config_.condition_vocab) + ")");
      }
      cond[b * M + 1 + j] = id;
    }
    // The condition is a set. A canonical order makes the result independent
    // of how the caller listed it, down to the last bit.
    const auto row = cond.begin() + static_cast<std::ptrdiff_t>(b * M + 1);
    std::sort(row, row + static_cast<std::ptrdiff_t>(len));
    cond_lengths[b] = len + 1;
  }
  auto e = compute::dropout(compute::embedding_gather(params_.condition_embedding, cond), p, drop_rng);

  AttentionLayout enc_layout{B, M, M, config_.heads, false, cond_lengths};
  for (const auto& block : params_.encoder) e = encoder_block(e, block, enc_layout, eps, p, drop_rng);

  AttentionLayout self_layout{B, L, L, config_.heads, true, batch.lengths};
  AttentionLayout cross_layout{B, L, M, config_.heads, false, cond_lengths};
  for (const auto& block : params_.decoder) x = decoder_block(x, e, block, self_layout, cross_layout, eps, p, drop_rng);

  return {compute::matmul(x, params_.head_token), compute::matmul(x, params_.head_pos),
          compute::matmul(x, params_.head_dep), compute::matmul(x, params_.head_ent)};
}

template <typename T>
LossTerms<T> Model<T>::loss(const ForwardOutput<T>& out, const Batch& batch) const {
  auto token = compute::cross_entropy(out.token_logits, batch.target_ids, batch.mask);
  auto pos = compute::cross_entropy(out.pos_logits, batch.target_pos, batch.mask);
  auto dep = compute::cross_entropy(out.dep_logits, batch.target_dep, batch.mask);
  auto ent = compute::cross_entropy(out.ent_logits, batch.target_ent, batch.mask);
  LossTerms<T> terms;
  terms.total = compute::add(compute::add(token, pos), compute::add(dep, ent));
  terms.token = static_cast<double>(token.item());
  terms.pos = static_cast<double>(pos.item());
  terms.dep = static_cast<double>(dep.item());
  terms.ent = static_cast<double>(ent.item());
  return terms;
}

Batch single_sequence(std::span<const TokenId> ids, std::span<const std::int32_t> condition_ids) {
  if (ids.empty()) throw UsageError("single_sequence: empty input");
  Batch b;
  b.batch_size = 1;
  b.seq_len = ids.size();
  b.condition_len = condition_ids.size();
  b.input_ids.assign(ids.begin(), ids.end());
  b.mask.assign(ids.size(), 1);
  b.lengths = {ids.size()};
  b.condition_ids.assign(condition_ids.begin(), condition_ids.end());
  b.condition_lengths = {condition_ids.size()};
  return b;
}

#define CBAG_INSTANTIATE_MODEL(T)                                                                           \
  template struct ModelParameters<T>;                                                                       \
  template class Model<T>;                                                                                  \
  template Tensor<T> positional_encoding<T>(std::size_t, std::size_t);                                      \
  template Tensor<T> multi_head(const Tensor<T>&, const Tensor<T>&, const AttentionParams<T>&,              \
                                const AttentionLayout&);                                                    \
  template Tensor<T> feed_forward(const Tensor<T>&, const FeedForwardParams<T>&);                           \
  template Tensor<T> encoder_block(const Tensor<T>&, const EncoderBlockParams<T>&, const AttentionLayout&, T, \
                                   T, std::mt19937_64*);                                                    \
  template Tensor<T> decoder_block(const Tensor<T>&, const Tensor<T>&, const DecoderBlockParams<T>&,        \
                                   const AttentionLayout&, const AttentionLayout&, T, T, std::mt19937_64*);

CBAG_INSTANTIATE_MODEL(float)
CBAG_INSTANTIATE_MODEL(double)

}  // namespace cbag
