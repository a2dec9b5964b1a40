#pragma once

// MMCK checkpoint file: model config, loop counters, every model tensor by
// name, optimizer moments, the PMP difficulty cache, and (after fine-tuning)
// the classification head. Restoring and continuing reproduces the
// uninterrupted run bitwise, so everything the trajectory depends on lives
// here.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mmae/model/model.hpp"
#include "mmae/nn/optim.hpp"

namespace mmae::train {

class IncompatibleCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DifficultyEntry {
  int64_t step_written = 0;
  std::vector<double> scores;  // one per patch
};

// keyed by dataset sample index
using DifficultyCache = std::map<int64_t, DifficultyEntry>;

struct CheckpointMeta {
  uint64_t seed = 0;
  int64_t step = 0;
  int64_t epoch = 0;
};

void save_checkpoint(const std::string& path, model::ModelState<float>& state,
                     const CheckpointMeta& meta,
                     nn::AdamW<float>* opt = nullptr,
                     const DifficultyCache* cache = nullptr,
                     const nn::LinearLayer<float>* head = nullptr,
                     int64_t num_classes = 0);

struct LoadedCheckpoint {
  model::ModelState<float> state;
  CheckpointMeta meta;
  bool has_optimizer = false;
  int64_t opt_step = 0;
  std::map<std::string, std::pair<std::vector<float>, std::vector<float>>>
      moments;
  DifficultyCache cache;
  int64_t num_classes = 0;  // 0 = no classification head stored
  nn::LinearLayer<float> head;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies stored moments into an optimizer built over the same parameter set.
void restore_optimizer(nn::AdamW<float>& opt, const LoadedCheckpoint& ck);

}  // namespace mmae::train
