#include "mmae/model/config.hpp"

#ifdef __GLIBC__
#include <malloc.h>
namespace {
// Large activation buffers churn every step; keep them on the heap instead
// of round-tripping through mmap/munmap (page faults dominate otherwise).
struct MallocTuning {
  MallocTuning() {
    mallopt(M_MMAP_THRESHOLD, 1 << 29);
    mallopt(M_TRIM_THRESHOLD, 1 << 29);
  }
} g_malloc_tuning;
}  // namespace
#endif

namespace mmae::model {

const char* recon_target_name(ReconTarget t) {
  return t == ReconTarget::kRawBytes ? "raw_bytes" : "embedded_detached";
}

ReconTarget recon_target_from_name(const std::string& s) {
  if (s == "raw_bytes") return ReconTarget::kRawBytes;
  if (s == "embedded_detached") return ReconTarget::kEmbeddedDetached;
  throw ConfigError("unknown recon_target: " + s);
}

void ModelConfig::validate() const {
  if (d <= 0 || heads <= 0) throw ConfigError("d and heads must be positive");
  if (d % heads != 0)
    throw ConfigError("d (" + std::to_string(d) + ") not divisible by heads (" +
                      std::to_string(heads) + ")");
  if (encoder_depth < 0 || decoder_depth < 0)
    throw ConfigError("negative transformer depth");
  if (n_x <= 0 || patch_size <= 0 || n_x * patch_size != 1600)
    throw ConfigError("n_x * patch_size must tile the 1600-byte record, got " +
                      std::to_string(n_x) + " * " + std::to_string(patch_size));
  if (d_stat <= 0 || rank_r <= 0)
    throw ConfigError("d_stat and rank_r must be positive");
  if (!(lambda1 >= 0) || !(lambda2 >= 0))
    throw ConfigError("loss weights must be non-negative finite");
}

}  // namespace mmae::model
