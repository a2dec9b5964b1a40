// FlowMix: patch tiling, curriculum mask scheduling, per-sample binary mix
// masks (difficulty-guided hard part + random part), token mixing between a
// main flow and its paired support flow, and encoder input assembly.
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmae/common.hpp"
#include "mmae/nn/functional.hpp"
#include "mmae/nn/tensor.hpp"

namespace mmae::mix {

class RatioOutOfRange : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Noise offset added at hard positions; any value > 1 forces them to sort
// after every purely random position.
inline constexpr double kHardNoiseOffset = 10.0;

struct MixMask {
  std::vector<uint8_t> m;            // N_x entries, 1 = take support patch
  std::vector<int64_t> hard_indices; // Omega_hard, ascending
  int64_t n_mask = 0;
  int64_t n_keep = 0;
  double r_mask = 0, r_hard = 0, r_rand = 0;
};

// Linear curriculum: R_max * t / T_total for epoch t of T_total.
double hard_ratio(int64_t t, int64_t t_total, double r_max);

// Total-mask schedule r_mask(t) = min(r_rand + hard_ratio(t), cap) with the
// defaults 0.7 / 0.2 / 0.9.
struct MaskSchedule {
  double r_rand = 0.7;
  double r_hard_max = 0.2;
  double cap = 0.9;

  double hard_at(int64_t t, int64_t t_total) const {
    return hard_ratio(t, t_total, r_hard_max);
  }
  double mask_at(int64_t t, int64_t t_total) const {
    double r = r_rand + hard_at(t, t_total);
    return r < cap ? r : cap;
  }
};

// difficulty: per-patch scores (nullptr = no guidance, fully random mask).
// The K_hard = floor(n_x * r_hard) highest-difficulty patches are forced into
// the masked set; the rest of the floor(n_x * r_mask) masked positions are
// chosen by a stable ascending argsort of uniform noise. eta is the noise
// offset for hard positions and must stay > 1.
MixMask build_mask(const std::vector<double>* difficulty, int64_t n_x,
                   double r_mask, double r_hard, Rng& rng,
                   double eta = kHardNoiseOffset);

// 0/1 rows, one mask per line, space separated.
void save_mask_rows(const std::string& path, const std::vector<MixMask>& masks);

// [B, L] (or [L]) -> [B, L/patch, patch]; the tiling is a pure reshape.
template <class T>
nn::Tensor<T> patchify(const nn::Tensor<T>& bytes, int64_t patch_size) {
  if (patch_size <= 0) throw nn::ShapeMismatch("patch_size must be positive");
  if (bytes.ndim() == 1) {
    int64_t l = bytes.dim(0);
    if (l % patch_size != 0)
      throw nn::ShapeMismatch("record length " + std::to_string(l) +
                              " not divisible by patch size " +
                              std::to_string(patch_size));
    return nn::reshape(bytes, {l / patch_size, patch_size});
  }
  if (bytes.ndim() != 2)
    throw nn::ShapeMismatch("patchify expects [B, L] or [L], got " +
                            nn::shape_str(bytes.shape()));
  int64_t b = bytes.dim(0), l = bytes.dim(1);
  if (l % patch_size != 0)
    throw nn::ShapeMismatch("record length " + std::to_string(l) +
                            " not divisible by patch size " +
                            std::to_string(patch_size));
  return nn::reshape(bytes, {b, l / patch_size, patch_size});
}

// Per-batch masks as a broadcastable [B, N_x, 1] constant tensor.
template <class T>
nn::Tensor<T> masks_to_tensor(const std::vector<MixMask>& masks) {
  if (masks.empty()) throw nn::ShapeMismatch("masks_to_tensor on empty batch");
  int64_t b = static_cast<int64_t>(masks.size());
  int64_t n = static_cast<int64_t>(masks[0].m.size());
  auto t = nn::Tensor<T>::zeros({b, n, 1});
  T* d = t.data().data();
  for (int64_t i = 0; i < b; ++i) {
    if (static_cast<int64_t>(masks[i].m.size()) != n)
      throw nn::ShapeMismatch("masks_to_tensor: ragged mask lengths");
    for (int64_t j = 0; j < n; ++j) d[i * n + j] = static_cast<T>(masks[i].m[j]);
  }
  return t;
}

// Position i takes supp where m == 1, main where m == 0. m broadcasts over
// the feature axis; binary m makes the selection exact.
template <class T>
nn::Tensor<T> mix(const nn::Tensor<T>& main, const nn::Tensor<T>& supp,
                  const nn::Tensor<T>& m) {
  if (main.shape() != supp.shape())
    throw nn::ShapeMismatch("mix: main " + nn::shape_str(main.shape()) +
                            " vs supp " + nn::shape_str(supp.shape()));
  auto keep = nn::add_scalar(nn::neg(m), T(1));
  return nn::add(nn::mul(main, keep), nn::mul(supp, m));
}

template <class T>
nn::Tensor<T> mix(const nn::Tensor<T>& main, const nn::Tensor<T>& supp,
                  const MixMask& mask) {
  if (main.ndim() != 2)
    throw nn::ShapeMismatch("per-sample mix expects [N, D] tokens");
  if (main.dim(0) != static_cast<int64_t>(mask.m.size()))
    throw nn::ShapeMismatch("mix: mask length " +
                            std::to_string(mask.m.size()) + " vs tokens " +
                            nn::shape_str(main.shape()));
  auto mt = nn::Tensor<T>::zeros({main.dim(0), 1});
  for (int64_t i = 0; i < main.dim(0); ++i)
    mt.data()[i] = static_cast<T>(mask.m[static_cast<size_t>(i)]);
  return mix(main, supp, mt);
}

// Shared patch embedding, class token, and trainable positional table
// (sinusoidal init) used by both the student and teacher input paths.
template <class T>
struct EmbeddingParams {
  nn::LinearLayer<T> patch_proj;  // patch_size -> D
  nn::Tensor<T> x_cls;            // [1, D]
  nn::Tensor<T> e_pos;            // [N_x + 1, D]

  static EmbeddingParams create(int64_t patch_size, int64_t d, int64_t n_x,
                                Rng& rng) {
    EmbeddingParams e;
    e.patch_proj = nn::LinearLayer<T>::create(patch_size, d, rng);
    e.x_cls = nn::Tensor<T>::zeros({1, d}, true);
    nn::init_normal(e.x_cls, rng, T(0.02));
    e.e_pos = nn::Tensor<T>::zeros({n_x + 1, d}, true);
    nn::init_sinusoidal(e.e_pos);
    return e;
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& fn) {
    patch_proj.visit(prefix + ".patch_proj", fn);
    fn(prefix + ".x_cls", x_cls);
    fn(prefix + ".e_pos", e_pos);
  }
};

template <class T>
nn::Tensor<T> embed_patches(const nn::Tensor<T>& patches,
                            const EmbeddingParams<T>& embed) {
  return embed.patch_proj.forward(patches);
}

// [x_cls; tokens] + E_pos -> [B, N_x + 1, D].
template <class T>
nn::Tensor<T> assemble_student_input(const nn::Tensor<T>& mixed,
                                     const EmbeddingParams<T>& embed) {
  if (mixed.ndim() != 3)
    throw nn::ShapeMismatch("assemble expects [B, N_x, D] tokens, got " +
                            nn::shape_str(mixed.shape()));
  int64_t b = mixed.dim(0), d = mixed.dim(2);
  auto cls = nn::broadcast_to(nn::reshape(embed.x_cls, {1, 1, d}), {b, 1, d});
  auto seq = nn::concat<T>({cls, mixed}, 1);
  auto pos = nn::reshape(embed.e_pos, {1, mixed.dim(1) + 1, d});
  return nn::add(seq, pos);
}

// Teacher path: same parameters, unmixed main tokens.
template <class T>
nn::Tensor<T> assemble_teacher_input(const nn::Tensor<T>& main,
                                     const EmbeddingParams<T>& embed) {
  return assemble_student_input(main, embed);
}

}  // namespace mmae::mix
