#pragma once

// Central finite differences against the analytic gradient of the full
// pre-training loss, in double precision on a synthetic batch. The
// self-distillation target is frozen for the probe: the live teacher pass
// shares embedding parameters with the student, so a perturbed re-evaluation
// would otherwise move the target that backward() treats as constant.

#include <cstdint>
#include <vector>

#include "mmae/model/model.hpp"
#include "mmae/nn/grad_check.hpp"

namespace mmae::model {

struct FdProbeConfig {
  int64_t batch = 2;
  uint64_t data_seed = 55;
  uint64_t jitter_seed = 0;  // 0 = probe at initialization
  double jitter = 0.05;      // half-width of the uniform parameter offset
  // Adaptive ladder: tiny steps lose to roundoff, large ones to truncation
  // across GELU/softmax curvature; the rung closest to the analytic value
  // wins per coordinate.
  std::vector<double> steps = {1e-4, 2e-4, 4e-4, 1e-3, 3e-3, 1e-2};
};

struct FdProbeResult {
  nn::GradCheckReport report;     // over every non-matcher parameter
  bool teacher_grad_free = true;  // nothing reaches the EMA copy
  bool matcher_grad_zero = true;  // pairing is discrete, the loss can't see it
};

// Builds one fixed batch (bytes, signals, masks, pairing, rank pairs) from
// data_seed, optionally jitters all parameters off their symmetric init, and
// compares analytic and numeric gradients coordinate by coordinate.
FdProbeResult pretrain_fd_probe(const ModelConfig& cfg,
                                const FdProbeConfig& pc = {});

}  // namespace mmae::model
