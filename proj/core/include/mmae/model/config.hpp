#pragma once

#include <cstdint>
#include <string>

#include "mmae/common.hpp"

namespace mmae::model {

// What the reconstruction head predicts: raw normalized patch bytes
// (head D -> patch_size) or the detached embedded main tokens (head D -> D).
enum class ReconTarget { kRawBytes, kEmbeddedDetached };

const char* recon_target_name(ReconTarget t);
ReconTarget recon_target_from_name(const std::string& s);

struct ModelConfig {
  int64_t d = 32;
  int64_t encoder_depth = 2;
  int64_t decoder_depth = 1;
  int64_t heads = 4;
  int64_t n_x = 400;
  int64_t patch_size = 4;
  int64_t d_stat = 64;
  int64_t rank_r = 16;
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  ReconTarget recon_target = ReconTarget::kRawBytes;
  bool matcher_stop_gradient = false;

  // Laptop-scale default; what the tests run.
  static ModelConfig desk() { return ModelConfig{}; }

  // Published architecture scale.
  static ModelConfig paper() {
    ModelConfig c;
    c.d = 256;
    c.encoder_depth = 7;
    c.decoder_depth = 2;
    return c;
  }

  // Tiny profile for finite-difference checks of the full loss.
  static ModelConfig grad_check() {
    ModelConfig c;
    c.d = 8;
    c.encoder_depth = 2;
    c.decoder_depth = 1;
    c.heads = 2;
    c.n_x = 16;
    c.patch_size = 100;
    c.d_stat = 8;
    c.rank_r = 4;
    return c;
  }

  void validate() const;
};

}  // namespace mmae::model
