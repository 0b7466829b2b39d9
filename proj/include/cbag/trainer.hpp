#pragma once

// LAMB optimizer, warmup schedule and the window-sampling training loop.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cbag/condition_vocab.hpp"
#include "cbag/corpus.hpp"
#include "cbag/model.hpp"
#include "cbag/tokenizer.hpp"

namespace cbag {

struct LambOptions {
  double peak_lr = 1e-3;
  std::size_t warmup = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
};

// Linear ramp from 0 at step 0 to peak at step `warmup`, constant afterwards.
double lr_at(std::size_t step, double peak, std::size_t warmup);

// One LAMB update of a single parameter block at optimizer step t >= 1.
// Moments are updated in place; returns the trust ratio that was applied.
template <typename T>
double lamb_update(std::span<T> w, std::span<const T> g, std::span<T> m, std::span<T> v, std::size_t t, double lr,
                   const LambOptions& opt, bool decay);

template <typename T>
class Lamb {
 public:
  Lamb() = default;
  Lamb(const LambOptions& options, const std::vector<NamedParameter<T>>& params);

  // Increments the step counter and updates every parameter from its
  // accumulated gradient (missing gradient = zero). Throws NumericalError
  // before touching any parameter if a gradient is non-finite.
  void step(const std::vector<NamedParameter<T>>& params);

  const LambOptions& options() const { return options_; }
  std::size_t step_count() const { return step_; }
  double current_lr() const { return lr_at(step_, options_.peak_lr, options_.warmup); }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  void set_step_count(std::size_t step) { step_ = step; }

 private:
  LambOptions options_;
  std::size_t step_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

struct TrainingConfig {
  ModelConfig model;
  LambOptions lamb;
  std::size_t batch_size = 16;
  std::size_t steps = 2000;
  // Share of the training records that makes up one epoch; a checkpoint is
  // written at the end of each epoch.
  double epoch_fraction = 0.05;
  // Subword sampling temperature for training windows; 0 uses Viterbi.
  double segmentation_temperature = 1.0;
  std::uint64_t seed = 1;
  std::size_t log_every = 50;
  // Checkpoint after every this many epochs.
  std::size_t checkpoint_every = 1;

  void validate() const;
  // key=value lines covering every field that shapes the training
  // trajectory; `steps`, `log_every` and `checkpoint_every` are excluded.
  std::string canonical() const;
  std::uint64_t hash() const;
};

struct StepLog {
  std::size_t step = 0;
  double lr = 0.0;
  double total = 0.0, token = 0.0, pos = 0.0, dep = 0.0, ent = 0.0;
};

// Everything besides parameters and moments needed to resume bit-exactly.
struct TrainerCursor {
  std::string rng_state;
  std::vector<std::uint32_t> order;  // current record permutation
  std::size_t position = 0;          // next index into order
  std::size_t records_seen = 0;
};

class Trainer {
 public:
  // Fills the vocabulary sizes of config.model from the given vocabularies.
  // Records whose Viterbi stream holds fewer than 2 subwords are dropped.
  Trainer(TrainingConfig config, std::vector<AnnotatedRecord> records, const Tokenizer& tok,
          const ConditionVocab& cvocab, const LabelVocabs& labels);

  StepLog step();
  // Runs until `steps` optimizer steps have been taken in total.
  // on_epoch fires whenever another epoch's worth of records has been seen.
  void run(std::size_t steps, const std::function<void(const StepLog&)>& on_step,
           const std::function<void(std::size_t epoch)>& on_epoch = {});

  const TrainingConfig& config() const { return config_; }
  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  Lamb<float>& optimizer() { return lamb_; }
  const Lamb<float>& optimizer() const { return lamb_; }
  std::size_t step_count() const { return lamb_.step_count(); }
  std::size_t records_per_epoch() const { return epoch_records_; }
  std::size_t epoch() const { return cursor_.records_seen / epoch_records_; }
  std::span<const AnnotatedRecord> records() const { return records_; }

  TrainerCursor cursor() const;
  void restore_cursor(const TrainerCursor& cursor);

 private:
  std::size_t next_record();

  TrainingConfig config_;
  std::vector<AnnotatedRecord> records_;
  const Tokenizer* tok_;
  const ConditionVocab* cvocab_;
  const LabelVocabs* labels_;
  Model<float> model_;
  Lamb<float> lamb_;
  std::mt19937_64 rng_;
  TrainerCursor cursor_;
  std::size_t epoch_records_ = 1;
};

struct EvalLoss {
  double total = 0.0, token = 0.0, pos = 0.0, dep = 0.0, ent = 0.0;
  std::size_t windows = 0;
};

// Eval-mode loss over every segment-start window of every record, with
// Viterbi segmentation, batched by `batch_size`.
EvalLoss evaluate_loss(const Model<float>& model, std::span<const AnnotatedRecord> records, const Tokenizer& tok,
                       const ConditionVocab& cvocab, const LabelVocabs& labels, std::size_t batch_size = 16);

}  // namespace cbag
