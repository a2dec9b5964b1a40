#pragma once

// Training orchestration. Pre-training walks shuffled batches through
// stats-guided pairing, curriculum mixed masking (difficulty cache feedback),
// the twin-decoder graph and an EMA teacher; fine-tuning retrains the student
// encoder plus a fresh classification head with cross-entropy.
//
// Every stochastic choice is drawn from a stream derived from (seed, purpose,
// epoch/step/sample), so a run restored from a checkpoint continues bitwise
// identically to the uninterrupted one.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mmae/eval/metrics.hpp"
#include "mmae/features/side_channel.hpp"
#include "mmae/ingest/flow.hpp"
#include "mmae/model/model.hpp"
#include "mmae/nn/optim.hpp"
#include "mmae/train/checkpoint.hpp"

namespace mmae::train {

class LabelOutOfRange : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int64_t epochs = 10;
  int64_t steps = 0;         // > 0 overrides epochs * steps_per_epoch
  int64_t batch_size = 16;   // pre-train desk default; paper uses 128
  double base_lr = 1e-3;     // fine-tune default is 2e-3
  double weight_decay = 0.01;
  double m_base = 0.96;
  double m_final = 0.99;
  double r_max = 0.2;   // curriculum hard-mask ceiling
  double r_rand = 0.7;  // random mask floor
  double mask_cap = 0.9;
  double eta = mix::kHardNoiseOffset;  // hard-position noise offset, > 1
  int64_t rank_pairs_per_seq = 1024;
  uint64_t seed = 1;
  int64_t checkpoint_every = 0;  // steps; 0 = final checkpoint only
  double warmup_frac = 0.05;
  double val_frac = 0.1;  // fine-tune validation split
  bool frozen_encoder = false;

  void validate() const;  // throws ConfigError
};

// One training example: fixed-size record plus its side-channel features.
struct Sample {
  ingest::FlowRecord rec;
  sidechan::FeatureVector feat{};
};

// Joins an MMFR record file with its features CSV by flow id.
std::vector<Sample> load_dataset(const std::string& records_path,
                                 const std::string& features_csv);

// m_final + (m_base - m_final) * (1 + cos(pi t / T)) / 2
double momentum_schedule(int64_t t, int64_t t_total, double m_base,
                         double m_final);

// Linear warmup over ceil(warmup_frac * total) steps, then cosine decay.
double lr_at(int64_t t, int64_t t_total, double base_lr, double warmup_frac);

// theta_T <- m * theta_T + (1 - m) * theta_S, elementwise.
void ema_update(nn::Tensor<float>& teacher, const nn::Tensor<float>& student,
                double m);
void ema_update(model::ModelState<float>& state, double m);

struct StepLog {
  int64_t step = 0;
  double l_rec = 0, l_pred = 0, l_align = 0, l_pre = 0;
  double m_t = 0, r_hard = 0;
};

std::string step_log_header();
std::string step_log_row(const StepLog& log);

class Pretrainer {
 public:
  Pretrainer(const model::ModelConfig& mc, const TrainConfig& tc);
  // Resumes counters, parameters, optimizer moments and difficulty cache.
  Pretrainer(const std::string& checkpoint_path, const TrainConfig& tc);

  // One optimizer step on the given sample indices. epoch drives the
  // curriculum hard ratio; the step counter advances internally.
  StepLog step(const std::vector<Sample>& data,
               const std::vector<int64_t>& idxs, int64_t epoch);

  // Full loop: shuffled epochs, drop-last batching, per-step CSV log,
  // periodic and final checkpoints. Returns the executed step logs.
  std::vector<StepLog> run(const std::vector<Sample>& data,
                           const std::string& out_dir);

  int64_t steps_per_epoch(int64_t n_samples) const;
  int64_t total_steps(int64_t n_samples) const;
  std::vector<int64_t> epoch_order(int64_t n_samples, int64_t epoch) const;

  model::ModelState<float>& state() { return state_; }
  nn::AdamW<float>& optimizer() { return opt_; }
  DifficultyCache& cache() { return cache_; }
  int64_t current_step() const { return step_; }

  void save(const std::string& path);

 private:
  void init_optimizer();

  TrainConfig tc_;
  model::ModelState<float> state_;
  nn::AdamW<float> opt_;
  DifficultyCache cache_;
  int64_t step_ = 0;
};

struct FinetuneResult {
  int64_t num_classes = 0;
  int64_t best_epoch = -1;
  double best_val_accuracy = 0.0;
  evalkit::ConfusionMatrix cm{1};  // validation set, best parameters
  evalkit::Metrics metrics;
  nn::LinearLayer<float> head;
};

// Trains a fresh head (and, unless frozen_encoder, the embedding + student
// encoder) with cross-entropy; returns the best-validation model. PMP,
// teacher, decoder and matcher parameters are never touched. When out_dir is
// non-empty, writes the best checkpoint (with head) and a metrics CSV there.
FinetuneResult finetune(model::ModelState<float>& state,
                        const std::vector<Sample>& data, const TrainConfig& tc,
                        const std::string& out_dir = "");

// Argmax predictions over a dataset, batched, no gradient tracking.
std::vector<int> predict(model::ModelState<float>& state,
                         const nn::LinearLayer<float>& head,
                         const std::vector<Sample>& data, int64_t batch_size);

evalkit::ConfusionMatrix evaluate(model::ModelState<float>& state,
                                  const nn::LinearLayer<float>& head,
                                  const std::vector<Sample>& data,
                                  int64_t num_classes, int64_t batch_size);

}  // namespace mmae::train
