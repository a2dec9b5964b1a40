// Statistics-based flow matcher: encodes 27-dim side-channel vectors into
// 91-dim embeddings (27 batch-normalized raw + 64 deep) and greedily pairs
// flows within a batch by cosine similarity.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mmae/common.hpp"
#include "mmae/nn/functional.hpp"
#include "mmae/nn/tensor.hpp"

namespace mmae::match {

class BatchTooSmall : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int64_t kStatDim = 27;
inline constexpr int64_t kDeepDim = 64;
inline constexpr int64_t kEmbedDim = kStatDim + kDeepDim;  // 91

template <class T>
struct MatcherParams {
  nn::BatchNorm1dLayer<T> bn;
  nn::Conv1dLayer<T> conv1;  // 1 -> 16, kernel 3, pad 1
  nn::Conv1dLayer<T> conv2;  // 16 -> 32, kernel 3, pad 1
  nn::LinearLayer<T> fc;     // 32*8 -> 64
  bool stop_gradient = false;

  static MatcherParams create(Rng& rng, bool stop_gradient = false) {
    MatcherParams p;
    p.bn = nn::BatchNorm1dLayer<T>::create(kStatDim);
    p.conv1 = nn::Conv1dLayer<T>::create(1, 16, 3, 1, 1, rng);
    p.conv2 = nn::Conv1dLayer<T>::create(16, 32, 3, 1, 1, rng);
    p.fc = nn::LinearLayer<T>::create_fan_in(32 * 8, kDeepDim, rng);
    p.stop_gradient = stop_gradient;
    return p;
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& fn) {
    bn.visit(prefix + ".bn", fn);
    conv1.visit(prefix + ".conv1", fn);
    conv2.visit(prefix + ".conv2", fn);
    fc.visit(prefix + ".fc", fn);
  }
  void visit_buffers(const std::string& prefix, const nn::ParamVisitor<T>& fn) {
    bn.visit_buffers(prefix + ".bn", fn);
  }
};

// x: [B, 27] raw side-channel features. Returns [B, 91]; the first 27
// columns are exactly the batch-norm output, the rest come from the conv
// stack (two convs + ReLU, adaptive max-pool to 8, linear to 64, ReLU).
template <class T>
nn::Tensor<T> encode_stats(const nn::Tensor<T>& x, MatcherParams<T>& params,
                           bool training) {
  if (x.ndim() != 2 || x.dim(1) != kStatDim)
    throw nn::ShapeMismatch("encode_stats expects [B, 27], got " +
                            nn::shape_str(x.shape()));
  int64_t b = x.dim(0);
  if (training && b < 2)
    throw BatchTooSmall("encode_stats needs batch >= 2 in train mode, got " +
                        std::to_string(b));
  auto x_norm = params.bn.forward(x, training);
  auto h = nn::reshape(x_norm, {b, 1, kStatDim});
  h = nn::relu(params.conv1.forward(h));
  h = nn::relu(params.conv2.forward(h));
  h = nn::adaptive_max_pool1d(h, 8);
  h = nn::reshape(h, {b, 32 * 8});
  auto deep = nn::relu(params.fc.forward(h));
  auto out = nn::concat<T>({x_norm, deep}, 1);
  if (params.stop_gradient) out = nn::detach(out);
  return out;
}

// Row-major first occurrence of the maximum entry.
std::pair<int64_t, int64_t> argmax_2d(const std::vector<std::vector<double>>& s);

// Greedy symmetric pairing: L2-normalize rows, S = F F^T with -inf diagonal,
// floor(B/2) rounds of global argmax, masking matched rows/columns. Leftover
// indices self-pair. Result p satisfies p[p[i]] == i.
std::vector<int64_t> build_pairs(const std::vector<std::vector<double>>& emb);

template <class T>
std::vector<int64_t> build_pairs(const nn::Tensor<T>& emb) {
  if (emb.ndim() != 2)
    throw nn::ShapeMismatch("build_pairs expects [B, E], got " +
                            nn::shape_str(emb.shape()));
  int64_t b = emb.dim(0), e = emb.dim(1);
  std::vector<std::vector<double>> rows(static_cast<size_t>(b));
  const T* d = emb.data().data();
  for (int64_t i = 0; i < b; ++i)
    rows[static_cast<size_t>(i)].assign(d + i * e, d + (i + 1) * e);
  return build_pairs(rows);
}

}  // namespace mmae::match
