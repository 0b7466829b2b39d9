#include "cbag/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cbag/error.hpp"

namespace cbag {

double lr_at(std::size_t step, double peak, std::size_t warmup) {
  if (warmup == 0) return peak;
  return peak * static_cast<double>(std::min(step, warmup)) / static_cast<double>(warmup);
}

template <typename T>
double lamb_update(std::span<T> w, std::span<const T> g, std::span<T> m, std::span<T> v, std::size_t t, double lr,
                   const LambOptions& opt, bool decay) {
  const std::size_t n = w.size();
  if (t == 0) throw UsageError("lamb_update: step must be >= 1");
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  const double lambda = decay ? opt.weight_decay : 0.0;
  std::vector<double> r(n);
  double w_norm = 0.0, r_norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
    const double mi = opt.beta1 * static_cast<double>(m[i]) + (1.0 - opt.beta1) * gi;
    const double vi = opt.beta2 * static_cast<double>(v[i]) + (1.0 - opt.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double wi = static_cast<double>(w[i]);
    r[i] = (mi / c1) / (std::sqrt(vi / c2) + opt.eps) + lambda * wi;
    w_norm += wi * wi;
    r_norm += r[i] * r[i];
  }
  w_norm = std::sqrt(w_norm);
  r_norm = std::sqrt(r_norm);
  const double trust = (w_norm > 0.0 && r_norm > 0.0) ? w_norm / r_norm : 1.0;
  for (std::size_t i = 0; i < n; ++i) w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * trust * r[i]);
  return trust;
}

template <typename T>
Lamb<T>::Lamb(const LambOptions& options, const std::vector<NamedParameter<T>>& params) : options_(options) {
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.size(), T(0));
    v_.emplace_back(p.tensor.size(), T(0));
  }
}

template <typename T>
void Lamb<T>::step(const std::vector<NamedParameter<T>>& params) {
  if (params.size() != m_.size()) throw ShapeError("lamb: parameter list does not match optimizer state");
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericalError("lamb: non-finite gradient in " + p.name + " at step " + std::to_string(step_ + 1));
      }
    }
  }
  ++step_;
  const double lr = current_lr();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto tensor = params[i].tensor;
    lamb_update<T>(tensor.mutable_values(), tensor.grad(), m_[i], v_[i], step_, lr, options_, params[i].decay);
  }
}

void TrainingConfig::validate() const {
  model.validate();
  if (batch_size < 1) throw UsageError("training config: batch_size must be >= 1");
  if (checkpoint_every < 1) throw UsageError("training config: checkpoint_every must be >= 1");
  if (!(epoch_fraction > 0.0 && epoch_fraction <= 1.0)) {
    throw UsageError("training config: epoch_fraction must lie in (0, 1]");
  }
  if (!(segmentation_temperature >= 0.0)) throw UsageError("training config: segmentation_temperature must be >= 0");
  if (!(lamb.peak_lr > 0.0)) throw UsageError("training config: lr must be positive");
  if (!(lamb.beta1 >= 0.0 && lamb.beta1 < 1.0)) throw UsageError("training config: beta1 must lie in [0, 1)");
  if (!(lamb.beta2 >= 0.0 && lamb.beta2 < 1.0)) throw UsageError("training config: beta2 must lie in [0, 1)");
  if (!(lamb.eps >= 0.0)) throw UsageError("training config: eps must be >= 0");
  if (!(lamb.weight_decay >= 0.0)) throw UsageError("training config: weight_decay must be >= 0");
  if (model.max_seq < 2) throw UsageError("training config: max_seq must be >= 2");
}

std::string TrainingConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "d_model=" << model.d_model << '\n'
     << "heads=" << model.heads << '\n'
     << "encoder_blocks=" << model.encoder_blocks << '\n'
     << "decoder_blocks=" << model.decoder_blocks << '\n'
     << "ff_size=" << model.ff_size << '\n'
     << "dropout=" << model.dropout << '\n'
     << "max_seq=" << model.max_seq << '\n'
     << "token_vocab=" << model.token_vocab << '\n'
     << "pos_vocab=" << model.pos_vocab << '\n'
     << "dep_vocab=" << model.dep_vocab << '\n'
     << "ent_vocab=" << model.ent_vocab << '\n'
     << "condition_vocab=" << model.condition_vocab << '\n'
     << "layer_norm_eps=" << model.layer_norm_eps << '\n'
     << "init_std=" << model.init_std << '\n'
     << "lr=" << lamb.peak_lr << '\n'
     << "warmup=" << lamb.warmup << '\n'
     << "beta1=" << lamb.beta1 << '\n'
     << "beta2=" << lamb.beta2 << '\n'
     << "eps=" << lamb.eps << '\n'
     << "weight_decay=" << lamb.weight_decay << '\n'
     << "batch_size=" << batch_size << '\n'
     << "epoch_fraction=" << epoch_fraction << '\n'
     << "segmentation_temperature=" << segmentation_temperature << '\n'
     << "seed=" << seed << '\n';
  return os.str();
}

std::uint64_t TrainingConfig::hash() const {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

namespace {

std::size_t content_subwords(const AnnotatedRecord& r, const Tokenizer& tok, const LabelVocabs& labels) {
  return align_labels(r, tok, labels).ids.size() - 2;
}

}  // namespace

Trainer::Trainer(TrainingConfig config, std::vector<AnnotatedRecord> records, const Tokenizer& tok,
                 const ConditionVocab& cvocab, const LabelVocabs& labels)
    : config_(std::move(config)), tok_(&tok), cvocab_(&cvocab), labels_(&labels), rng_(config_.seed) {
  config_.model.token_vocab = tok.vocab_size();
  config_.model.pos_vocab = labels.pos.size();
  config_.model.dep_vocab = labels.dep.size();
  config_.model.ent_vocab = labels.ent.size();
  config_.model.condition_vocab = cvocab.total();
  config_.validate();
  for (auto& r : records) {
    if (!r.sentences.empty() && content_subwords(r, tok, labels) >= 2) records_.push_back(std::move(r));
  }
  if (records_.empty()) throw DataError("trainer: no usable training records");
  epoch_records_ = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(config_.epoch_fraction * static_cast<double>(records_.size()))));
  model_ = Model<float>(config_.model, config_.seed);
  lamb_ = Lamb<float>(config_.lamb, model_.parameters());
}

std::size_t Trainer::next_record() {
  if (cursor_.position >= cursor_.order.size()) {
    cursor_.order.resize(records_.size());
    std::iota(cursor_.order.begin(), cursor_.order.end(), 0u);
    std::shuffle(cursor_.order.begin(), cursor_.order.end(), rng_);
    cursor_.position = 0;
  }
  ++cursor_.records_seen;
  return cursor_.order[cursor_.position++];
}

StepLog Trainer::step() {
  std::vector<TrainingWindow> windows;
  windows.reserve(config_.batch_size);
  for (std::size_t i = 0; i < config_.batch_size; ++i) {
    const auto& record = records_[next_record()];
    windows.push_back(sample_window(record, *tok_, *cvocab_, *labels_, config_.model.max_seq, rng_,
                                    config_.segmentation_temperature));
  }
  const Batch batch = build_batch(windows);
  auto out = model_.forward(batch, Mode::kTrain, &rng_);
  auto terms = model_.loss(out, batch);
  const double total = static_cast<double>(terms.total.item());
  if (!std::isfinite(total)) {
    std::ostringstream os;
    os << "non-finite loss at step " << lamb_.step_count() + 1 << " (token " << terms.token << ", pos " << terms.pos
       << ", dep " << terms.dep << ", ent " << terms.ent << ")";
    throw NumericalError(os.str());
  }
  const auto params = model_.parameters();
  for (const auto& p : params) {
    auto t = p.tensor;
    t.zero_grad();
  }
  compute::backward(terms.total);
  lamb_.step(params);
  return {lamb_.step_count(), lamb_.current_lr(), total, terms.token, terms.pos, terms.dep, terms.ent};
}

void Trainer::run(std::size_t steps, const std::function<void(const StepLog&)>& on_step,
                  const std::function<void(std::size_t)>& on_epoch) {
  while (step_count() < steps) {
    const std::size_t before = epoch();
    const auto log = step();
    if (on_step) on_step(log);
    if (on_epoch && epoch() > before) on_epoch(epoch());
  }
}

TrainerCursor Trainer::cursor() const {
  TrainerCursor c = cursor_;
  std::ostringstream os;
  os << rng_;
  c.rng_state = os.str();
  return c;
}

void Trainer::restore_cursor(const TrainerCursor& cursor) {
  for (auto idx : cursor.order) {
    if (idx >= records_.size()) throw DataError("trainer: checkpointed record order does not match the data");
  }
  if (cursor.position > cursor.order.size()) throw DataError("trainer: checkpointed cursor out of range");
  std::istringstream is(cursor.rng_state);
  std::mt19937_64 rng;
  if (!(is >> rng)) throw DataError("trainer: unreadable rng state");
  rng_ = rng;
  cursor_ = cursor;
  cursor_.rng_state.clear();
}

EvalLoss evaluate_loss(const Model<float>& model, std::span<const AnnotatedRecord> records, const Tokenizer& tok,
                       const ConditionVocab& cvocab, const LabelVocabs& labels, std::size_t batch_size) {
  compute::NoGradGuard no_grad;
  std::vector<TrainingWindow> all;
  for (const auto& r : records) {
    const auto stream = align_labels(r, tok, labels);
    if (stream.ids.size() < 4) continue;
    const auto cond = cvocab.lookup(r.year, r.keywords);
    for (auto start : stream.segment_starts) {
      auto w = make_window(stream, start, model.config().max_seq);
      w.condition_ids = cond;
      all.push_back(std::move(w));
    }
  }
  EvalLoss out;
  double weight = 0.0;
  for (std::size_t i = 0; i < all.size(); i += batch_size) {
    const std::size_t end = std::min(all.size(), i + batch_size);
    const Batch batch = build_batch(std::span<const TrainingWindow>(all).subspan(i, end - i));
    const auto terms = model.loss(model.forward(batch, Mode::kEval), batch);
    double positions = 0.0;
    for (auto m : batch.mask) positions += m;
    out.token += terms.token * positions;
    out.pos += terms.pos * positions;
    out.dep += terms.dep * positions;
    out.ent += terms.ent * positions;
    weight += positions;
  }
  if (weight > 0.0) {
    out.token /= weight;
    out.pos /= weight;
    out.dep /= weight;
    out.ent /= weight;
  }
  out.total = out.token + out.pos + out.dep + out.ent;
  out.windows = all.size();
  return out;
}

template double lamb_update<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                                   std::size_t, double, const LambOptions&, bool);
template double lamb_update<double>(std::span<double>, std::span<const double>, std::span<double>,
                                    std::span<double>, std::size_t, double, const LambOptions&, bool);
template class Lamb<float>;
template class Lamb<double>;

}  // namespace cbag
