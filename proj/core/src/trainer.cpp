#include "mmae/train/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include "mmae/ingest/record_io.hpp"
#include "mmae/match/flow_matcher.hpp"
#include "mmae/mix/flowmix.hpp"

namespace mmae::train {

namespace {

// RNG stream purposes, combined with (epoch, step, sample index) as needed
constexpr uint64_t kShuffleStream = 1;
constexpr uint64_t kMaskStream = 2;
constexpr uint64_t kRankStream = 3;
constexpr uint64_t kSplitStream = 4;
constexpr uint64_t kFtShuffleStream = 5;
constexpr uint64_t kHeadStream = 6;

void shuffle_indices(std::vector<int64_t>& idx, Rng& rng) {
  for (size_t i = idx.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.uniform_int(i));
    std::swap(idx[i - 1], idx[j]);
  }
}

void fill_batch(const std::vector<Sample>& data,
                const std::vector<int64_t>& idxs, nn::Tensor<float>& bytes,
                std::vector<int64_t>* labels) {
  int64_t b = static_cast<int64_t>(idxs.size());
  float* dst = bytes.data().data();
  for (int64_t k = 0; k < b; ++k) {
    const auto& rec = data[static_cast<size_t>(idxs[k])].rec;
    if (static_cast<int64_t>(rec.bytes.size()) != ingest::kRecordBytes)
      throw nn::ShapeMismatch("record " + std::to_string(idxs[k]) + " holds " +
                              std::to_string(rec.bytes.size()) + " bytes");
    std::copy(rec.bytes.begin(), rec.bytes.end(),
              dst + k * ingest::kRecordBytes);
    if (labels) labels->push_back(rec.label);
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs <= 0) throw ConfigError("epochs must be positive");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (!(0 <= m_base && m_base <= m_final && m_final <= 1))
    throw ConfigError("need 0 <= m_base <= m_final <= 1");
  if (!(r_max >= 0 && r_max <= 1) || !(r_rand >= 0 && r_rand <= 1) ||
      !(mask_cap >= 0 && mask_cap <= 1))
    throw ConfigError("mask ratios must lie in [0, 1]");
  if (!(eta > 1)) throw ConfigError("eta must exceed 1");
  if (rank_pairs_per_seq <= 0)
    throw ConfigError("rank_pairs_per_seq must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint cadence < 0");
  if (!(warmup_frac >= 0 && warmup_frac < 1))
    throw ConfigError("warmup_frac must lie in [0, 1)");
  if (!(val_frac >= 0 && val_frac < 1))
    throw ConfigError("val_frac must lie in [0, 1)");
}

std::vector<Sample> load_dataset(const std::string& records_path,
                                 const std::string& features_csv) {
  auto records = ingest::load_records(records_path);
  auto [ids, feats] = sidechan::load_features_csv(features_csv);
  std::unordered_map<uint64_t, size_t> by_id;
  for (size_t i = 0; i < ids.size(); ++i) by_id[ids[i]] = i;
  std::vector<Sample> out;
  out.reserve(records.size());
  for (auto& rec : records) {
    auto it = by_id.find(rec.flow_id);
    if (it == by_id.end())
      throw IoError("flow " + std::to_string(rec.flow_id) +
                    " missing from features CSV");
    out.push_back(Sample{std::move(rec), feats[it->second]});
  }
  return out;
}

double momentum_schedule(int64_t t, int64_t t_total, double m_base,
                         double m_final) {
  if (t_total <= 0) throw ConfigError("momentum schedule needs T > 0");
  if (t <= 0) return m_base;
  if (t >= t_total) return m_final;
  double c = std::cos(M_PI * static_cast<double>(t) /
                      static_cast<double>(t_total));
  return m_final + 0.5 * (m_base - m_final) * (1.0 + c);
}

double lr_at(int64_t t, int64_t t_total, double base_lr, double warmup_frac) {
  if (t_total <= 0) throw ConfigError("lr schedule needs T > 0");
  int64_t w = std::max<int64_t>(
      1, static_cast<int64_t>(std::llround(warmup_frac *
                                           static_cast<double>(t_total))));
  if (t < w)
    return base_lr * static_cast<double>(t + 1) / static_cast<double>(w);
  int64_t span = std::max<int64_t>(1, t_total - w);
  double progress = static_cast<double>(t - w) / static_cast<double>(span);
  return 0.5 * base_lr * (1.0 + std::cos(M_PI * progress));
}

void ema_update(nn::Tensor<float>& teacher, const nn::Tensor<float>& student,
                double m) {
  if (teacher.shape() != student.shape())
    throw nn::ShapeMismatch("ema_update: teacher " +
                            nn::shape_str(teacher.shape()) + " vs student " +
                            nn::shape_str(student.shape()));
  auto& tv = teacher.data();
  const auto& sv = student.data();
  for (size_t i = 0; i < tv.size(); ++i)
    tv[i] = static_cast<float>(m * static_cast<double>(tv[i]) +
                               (1.0 - m) * static_cast<double>(sv[i]));
}

void ema_update(model::ModelState<float>& state, double m) {
  state.visit_ema_pairs([m](nn::Tensor<float>& stu, nn::Tensor<float>& tea) {
    ema_update(tea, stu, m);
  });
}

std::string step_log_header() {
  return "step,L_rec,L_pred,L_align,L_pre,m_t,r_hard";
}

std::string step_log_row(const StepLog& log) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "%" PRId64 ",%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", log.step,
                log.l_rec, log.l_pred, log.l_align, log.l_pre, log.m_t,
                log.r_hard);
  return buf;
}

Pretrainer::Pretrainer(const model::ModelConfig& mc, const TrainConfig& tc)
    : tc_(tc), state_(model::ModelState<float>::create(mc, tc.seed)) {
  tc_.validate();
  init_optimizer();
}

Pretrainer::Pretrainer(const std::string& checkpoint_path,
                       const TrainConfig& tc)
    : tc_(tc) {
  tc_.validate();
  auto ck = load_checkpoint(checkpoint_path);
  state_ = std::move(ck.state);
  step_ = ck.meta.step;
  cache_ = std::move(ck.cache);
  tc_.seed = ck.meta.seed;  // the stored trajectory owns its streams
  init_optimizer();
  if (ck.has_optimizer) restore_optimizer(opt_, ck);
}

void Pretrainer::init_optimizer() {
  std::vector<std::pair<std::string, nn::Tensor<float>>> params;
  state_.visit_trainable([&](const std::string& n, nn::Tensor<float>& t) {
    params.emplace_back(n, t);
  });
  nn::AdamWConfig<float> oc;
  oc.lr = static_cast<float>(tc_.base_lr);
  oc.weight_decay = static_cast<float>(tc_.weight_decay);
  opt_ = nn::AdamW<float>(std::move(params), oc);
}

int64_t Pretrainer::steps_per_epoch(int64_t n_samples) const {
  return n_samples / tc_.batch_size;  // last partial batch is dropped
}

int64_t Pretrainer::total_steps(int64_t n_samples) const {
  if (tc_.steps > 0) return tc_.steps;
  return tc_.epochs * steps_per_epoch(n_samples);
}

std::vector<int64_t> Pretrainer::epoch_order(int64_t n_samples,
                                             int64_t epoch) const {
  std::vector<int64_t> idx(static_cast<size_t>(n_samples));
  for (int64_t i = 0; i < n_samples; ++i) idx[static_cast<size_t>(i)] = i;
  Rng rng(derive_seed(tc_.seed, kShuffleStream, static_cast<uint64_t>(epoch)));
  shuffle_indices(idx, rng);
  return idx;
}

StepLog Pretrainer::step(const std::vector<Sample>& data,
                         const std::vector<int64_t>& idxs, int64_t epoch) {
  const auto& cfg = state_.cfg;
  int64_t b = static_cast<int64_t>(idxs.size());
  auto bytes = nn::Tensor<float>::zeros({b, ingest::kRecordBytes});
  fill_batch(data, idxs, bytes, nullptr);

  std::vector<sidechan::PacketSignals> sigs;
  sigs.reserve(static_cast<size_t>(b));
  auto feats = nn::Tensor<float>::zeros({b, sidechan::kFeatureCount});
  for (int64_t k = 0; k < b; ++k) {
    const auto& s = data[static_cast<size_t>(idxs[k])];
    sigs.push_back(sidechan::packet_signals(s.rec));
    for (int i = 0; i < sidechan::kFeatureCount; ++i)
      feats.data()[k * sidechan::kFeatureCount + i] =
          static_cast<float>(s.feat[static_cast<size_t>(i)]);
  }

  // stats encoder runs in train mode for its running statistics; pairing is
  // discrete routing, so no graph is kept
  std::vector<int64_t> pairs;
  {
    nn::NoGradGuard ng;
    auto emb = match::encode_stats(feats, state_.matcher, true);
    pairs = match::build_pairs(emb);
  }

  int64_t total = total_steps(static_cast<int64_t>(data.size()));
  int64_t spe = steps_per_epoch(static_cast<int64_t>(data.size()));
  int64_t epochs_eff = spe > 0 ? (total + spe - 1) / spe : tc_.epochs;
  mix::MaskSchedule sched{tc_.r_rand, tc_.r_max, tc_.mask_cap};
  double r_hard = sched.hard_at(epoch, epochs_eff);
  double r_mask = sched.mask_at(epoch, epochs_eff);
  std::vector<mix::MixMask> masks;
  masks.reserve(static_cast<size_t>(b));
  for (int64_t k = 0; k < b; ++k) {
    const std::vector<double>* diff = nullptr;
    auto it = cache_.find(idxs[static_cast<size_t>(k)]);
    if (it != cache_.end()) diff = &it->second.scores;
    Rng mrng(derive_seed(tc_.seed, kMaskStream, static_cast<uint64_t>(epoch),
                         static_cast<uint64_t>(idxs[static_cast<size_t>(k)])));
    masks.push_back(
        mix::build_mask(diff, cfg.n_x, r_mask, r_hard, mrng, tc_.eta));
  }

  Rng rrng(derive_seed(tc_.seed, kRankStream, static_cast<uint64_t>(step_)));
  auto rank_pairs =
      model::sample_rank_pairs(b, cfg.n_x, tc_.rank_pairs_per_seq, rrng);

  auto art = model::pretrain_graph(state_, bytes, sigs, masks, pairs,
                                   rank_pairs);

  StepLog log;
  log.step = step_;
  log.l_rec = static_cast<double>(art.l_rec.item());
  log.l_pred = static_cast<double>(art.l_pred.item());
  log.l_align = static_cast<double>(art.l_align.item());
  log.l_pre = static_cast<double>(art.l_pre.item());
  log.r_hard = r_hard;

  // difficulty predictions feed the next iteration's masks; copy before
  // backward frees the buffers
  std::vector<DifficultyEntry> fed(static_cast<size_t>(b));
  {
    const float* d = art.difficulty.data().data();
    for (int64_t k = 0; k < b; ++k) {
      auto& e = fed[static_cast<size_t>(k)];
      e.step_written = step_;
      e.scores.assign(d + k * cfg.n_x, d + (k + 1) * cfg.n_x);
    }
  }

  nn::backward(art.l_pre);
  opt_.set_lr(static_cast<float>(
      lr_at(step_, total, tc_.base_lr, tc_.warmup_frac)));
  opt_.step();
  opt_.zero_grad();

  log.m_t = momentum_schedule(step_, total, tc_.m_base, tc_.m_final);
  ema_update(state_, log.m_t);

  for (int64_t k = 0; k < b; ++k)
    cache_[idxs[static_cast<size_t>(k)]] = std::move(fed[static_cast<size_t>(k)]);

  ++step_;
  return log;
}

std::vector<StepLog> Pretrainer::run(const std::vector<Sample>& data,
                                     const std::string& out_dir) {
  int64_t n = static_cast<int64_t>(data.size());
  int64_t spe = steps_per_epoch(n);
  if (spe <= 0)
    throw ConfigError("dataset of " + std::to_string(n) +
                      " samples is smaller than one batch");
  int64_t total = total_steps(n);

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::string path = out_dir + "/pretrain_log.csv";
    csv.open(path, std::ios::app);
    if (!csv) throw IoError("cannot write " + path);
    if (csv.tellp() == 0) csv << step_log_header() << "\n";
  }

  std::vector<StepLog> logs;
  int64_t cur_epoch = -1;
  std::vector<int64_t> order;
  while (step_ < total) {
    int64_t epoch = step_ / spe;
    int64_t pos = step_ % spe;
    if (epoch != cur_epoch) {
      order = epoch_order(n, epoch);
      cur_epoch = epoch;
    }
    std::vector<int64_t> idxs(order.begin() + pos * tc_.batch_size,
                              order.begin() + (pos + 1) * tc_.batch_size);
    StepLog log;
    try {
      log = step(data, idxs, epoch);
    } catch (const NonFiniteLoss& e) {
      std::fprintf(stderr, "non-finite loss at step %" PRId64 ": %s\n",
                   step_, e.what());
      if (!logs.empty())
        std::fprintf(stderr, "last healthy step: %s\n",
                     step_log_row(logs.back()).c_str());
      if (csv.is_open()) csv.flush();
      throw;
    }
    logs.push_back(log);
    if (csv.is_open()) csv << step_log_row(log) << "\n";
    if (tc_.checkpoint_every > 0 && step_ < total &&
        step_ % tc_.checkpoint_every == 0 && !out_dir.empty())
      save(out_dir + "/checkpoint_" + std::to_string(step_) + ".mmck");
  }
  if (csv.is_open()) csv.flush();
  if (!out_dir.empty()) save(out_dir + "/checkpoint_final.mmck");
  return logs;
}

void Pretrainer::save(const std::string& path) {
  CheckpointMeta meta{tc_.seed, step_, 0};
  save_checkpoint(path, state_, meta, &opt_, &cache_);
}

std::vector<int> predict(model::ModelState<float>& state,
                         const nn::LinearLayer<float>& head,
                         const std::vector<Sample>& data, int64_t batch_size) {
  nn::NoGradGuard ng;
  std::vector<int> out;
  int64_t n = static_cast<int64_t>(data.size());
  out.reserve(static_cast<size_t>(n));
  for (int64_t at = 0; at < n; at += batch_size) {
    int64_t b = std::min(batch_size, n - at);
    std::vector<int64_t> idxs(static_cast<size_t>(b));
    for (int64_t k = 0; k < b; ++k) idxs[static_cast<size_t>(k)] = at + k;
    auto bytes = nn::Tensor<float>::zeros({b, ingest::kRecordBytes});
    fill_batch(data, idxs, bytes, nullptr);
    auto logits = model::finetune_logits(state, head, bytes);
    int64_t k_classes = logits.dim(1);
    const float* lp = logits.data().data();
    for (int64_t r = 0; r < b; ++r) {
      int best = 0;
      for (int64_t c = 1; c < k_classes; ++c)
        if (lp[r * k_classes + c] > lp[r * k_classes + best])
          best = static_cast<int>(c);
      out.push_back(best);
    }
  }
  return out;
}

evalkit::ConfusionMatrix evaluate(model::ModelState<float>& state,
                                  const nn::LinearLayer<float>& head,
                                  const std::vector<Sample>& data,
                                  int64_t num_classes, int64_t batch_size) {
  std::vector<int> y_true;
  y_true.reserve(data.size());
  for (const auto& s : data) {
    if (s.rec.label < 0 || s.rec.label >= num_classes)
      throw LabelOutOfRange("label " + std::to_string(s.rec.label) +
                            " outside [0, " + std::to_string(num_classes) +
                            ")");
    y_true.push_back(static_cast<int>(s.rec.label));
  }
  auto y_pred = predict(state, head, data, batch_size);
  return evalkit::ConfusionMatrix::from_predictions(
      y_true, y_pred, static_cast<int>(num_classes));
}

FinetuneResult finetune(model::ModelState<float>& state,
                        const std::vector<Sample>& data, const TrainConfig& tc,
                        const std::string& out_dir) {
  tc.validate();
  int64_t n = static_cast<int64_t>(data.size());
  if (n == 0) throw ConfigError("fine-tuning needs a non-empty dataset");

  int64_t k_classes = 0;
  for (const auto& s : data) {
    if (s.rec.label < 0)
      throw LabelOutOfRange("unlabeled record (label " +
                            std::to_string(s.rec.label) + ") in dataset");
    k_classes = std::max<int64_t>(k_classes, s.rec.label + 1);
  }

  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  Rng srng(derive_seed(tc.seed, kSplitStream));
  shuffle_indices(idx, srng);
  int64_t val_n = 0;
  if (n >= 2)
    val_n = std::clamp<int64_t>(
        static_cast<int64_t>(tc.val_frac * static_cast<double>(n)), 1, n - 1);
  std::vector<Sample> val, tr;
  for (int64_t i = 0; i < n; ++i) {
    const auto& s = data[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    (i < val_n ? val : tr).push_back(s);
  }
  if (val.empty()) val = tr;  // single-sample degenerate case

  Rng hrng(derive_seed(tc.seed, kHeadStream));
  auto head = nn::LinearLayer<float>::create(state.cfg.d, k_classes, hrng);

  std::vector<std::pair<std::string, nn::Tensor<float>>> params;
  head.visit("head", [&](const std::string& name, nn::Tensor<float>& t) {
    params.emplace_back(name, t);
  });
  if (!tc.frozen_encoder) {
    state.embed.visit("embed",
                      [&](const std::string& name, nn::Tensor<float>& t) {
                        params.emplace_back(name, t);
                      });
    state.enc_s.visit("student.enc",
                      [&](const std::string& name, nn::Tensor<float>& t) {
                        params.emplace_back(name, t);
                      });
  }
  nn::AdamWConfig<float> oc;
  oc.lr = static_cast<float>(tc.base_lr);
  oc.weight_decay = static_cast<float>(tc.weight_decay);
  nn::AdamW<float> opt(params, oc);

  int64_t tr_n = static_cast<int64_t>(tr.size());
  int64_t spe = std::max<int64_t>(1, tr_n / tc.batch_size);
  int64_t total = tc.epochs * spe;

  auto snapshot = [&] {
    std::vector<nn::AVec<float>> snap;
    snap.reserve(params.size());
    for (auto& [name, t] : params) snap.push_back(t.data());
    return snap;
  };
  auto restore = [&](const std::vector<nn::AVec<float>>& snap) {
    for (size_t i = 0; i < params.size(); ++i)
      params[i].second.data() = snap[i];
  };

  FinetuneResult res;
  res.num_classes = k_classes;
  std::vector<nn::AVec<float>> best = snapshot();

  int64_t t = 0;
  for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<int64_t> order(static_cast<size_t>(tr_n));
    for (int64_t i = 0; i < tr_n; ++i) order[static_cast<size_t>(i)] = i;
    Rng erng(derive_seed(tc.seed, kFtShuffleStream,
                         static_cast<uint64_t>(epoch)));
    shuffle_indices(order, erng);
    for (int64_t pos = 0; pos < spe; ++pos) {
      int64_t lo = pos * tc.batch_size;
      int64_t hi = std::min<int64_t>(tr_n, lo + tc.batch_size);
      if (tr_n >= tc.batch_size) hi = lo + tc.batch_size;  // drop last partial
      std::vector<int64_t> idxs(order.begin() + lo, order.begin() + hi);
      auto bytes =
          nn::Tensor<float>::zeros({static_cast<int64_t>(idxs.size()),
                                    ingest::kRecordBytes});
      std::vector<int64_t> labels;
      labels.reserve(idxs.size());
      fill_batch(tr, idxs, bytes, &labels);
      auto logits = model::finetune_logits(state, head, bytes);
      auto loss = nn::cross_entropy(logits, labels);
      if (!std::isfinite(static_cast<double>(loss.item())))
        throw NonFiniteLoss("fine-tune loss is not finite");
      nn::backward(loss);
      opt.set_lr(static_cast<float>(
          lr_at(t, total, tc.base_lr, tc.warmup_frac)));
      opt.step();
      opt.zero_grad();
      ++t;
    }

    auto preds = predict(state, head, val, tc.batch_size);
    int64_t hits = 0;
    for (size_t i = 0; i < val.size(); ++i)
      if (preds[i] == val[i].rec.label) ++hits;
    double acc = static_cast<double>(hits) / static_cast<double>(val.size());
    if (acc > res.best_val_accuracy || res.best_epoch < 0) {
      res.best_val_accuracy = acc;
      res.best_epoch = epoch;
      best = snapshot();
    }
  }

  restore(best);
  res.cm = evaluate(state, head, val, k_classes, tc.batch_size);
  res.metrics = evalkit::basic_metrics(res.cm);
  res.head = head;

  if (!out_dir.empty()) {
    CheckpointMeta meta{tc.seed, t, res.best_epoch};
    save_checkpoint(out_dir + "/finetune_best.mmck", state, meta, nullptr,
                    nullptr, &head, k_classes);
    evalkit::save_metrics_csv(out_dir + "/finetune_metrics.csv", res.metrics);
  }
  return res;
}

}  // namespace mmae::train
