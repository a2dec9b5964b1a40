#pragma once

// Parameterized layers built on the tensor ops: linear, norms, conv,
// multi-head self-attention with an optional additive score bias, and the
// pre-norm transformer block.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mmae/common.hpp"
#include "mmae/nn/tensor.hpp"

namespace mmae::nn {

template <class T>
using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;

template <class T>
inline void init_normal(Tensor<T>& t, Rng& rng, T std_dev) {
  for (auto& v : t.data()) v = static_cast<T>(rng.normal()) * std_dev;
}

template <class T>
inline void init_uniform_pm(Tensor<T>& t, Rng& rng, T bound) {
  for (auto& v : t.data())
    v = static_cast<T>(rng.uniform(-static_cast<double>(bound),
                                   static_cast<double>(bound)));
}

// Interleaved sin/cos position table, one row per position.
template <class T>
inline void init_sinusoidal(Tensor<T>& t) {
  int64_t n = t.dim(0), d = t.dim(-1);
  for (int64_t p = 0; p < n; ++p)
    for (int64_t j = 0; j < d; ++j) {
      double freq = std::pow(10000.0, -2.0 * static_cast<double>(j / 2) /
                                          static_cast<double>(d));
      double a = static_cast<double>(p) * freq;
      t.data()[p * d + j] =
          static_cast<T>(j % 2 == 0 ? std::sin(a) : std::cos(a));
    }
}

template <class T>
struct LinearLayer {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out] when biased

  // Transformer-style init: w ~ N(0, std), b = 0.
  static LinearLayer create(int64_t in, int64_t out, Rng& rng,
                            T std_dev = T(0.02), bool bias = true) {
    LinearLayer l;
    l.w = Tensor<T>::zeros({in, out}, true);
    init_normal(l.w, rng, std_dev);
    if (bias) l.b = Tensor<T>::zeros({out}, true);
    return l;
  }

  // Fan-in uniform init (torch linear default): w, b ~ U(+-1/sqrt(in)).
  static LinearLayer create_fan_in(int64_t in, int64_t out, Rng& rng,
                                   bool bias = true) {
    LinearLayer l;
    T bound = T(1) / std::sqrt(static_cast<T>(in));
    l.w = Tensor<T>::zeros({in, out}, true);
    init_uniform_pm(l.w, rng, bound);
    if (bias) {
      l.b = Tensor<T>::zeros({out}, true);
      init_uniform_pm(l.b, rng, bound);
    }
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w, b); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".w", w);
    if (b.defined()) fn(prefix + ".b", b);
  }
};

template <class T>
struct LayerNormLayer {
  Tensor<T> gamma, beta;
  T eps = T(1e-5);

  static LayerNormLayer create(int64_t d) {
    LayerNormLayer l;
    l.gamma = Tensor<T>::full({d}, T(1), true);
    l.beta = Tensor<T>::zeros({d}, true);
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return layer_norm(x, gamma, beta, eps);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

template <class T>
struct BatchNorm1dLayer {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;  // buffers, not differentiated
  T momentum = T(0.1);
  T eps = T(1e-5);

  static BatchNorm1dLayer create(int64_t c) {
    BatchNorm1dLayer l;
    l.gamma = Tensor<T>::full({c}, T(1), true);
    l.beta = Tensor<T>::zeros({c}, true);
    l.running_mean = Tensor<T>::zeros({c});
    l.running_var = Tensor<T>::full({c}, T(1));
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training,
                    bool update_running = true) const {
    return batch_norm1d(x, gamma, beta,
                        const_cast<AVec<T>&>(running_mean.data()),
                        const_cast<AVec<T>&>(running_var.data()),
                        training, training && update_running, momentum, eps);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
  void visit_buffers(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".running_mean", running_mean);
    fn(prefix + ".running_var", running_var);
  }
};

// Multi-head self-attention. `bias` (optional) is added to the pre-softmax
// scores and must broadcast against [B, H, N, N]; shape [B, 1, N, N] applies
// one bias matrix across all heads.
template <class T>
struct MultiHeadSelfAttention {
  int64_t dim = 0;
  int64_t heads = 1;
  LinearLayer<T> wq, wk, wv, proj;

  static MultiHeadSelfAttention create(int64_t d, int64_t h, Rng& rng) {
    if (d % h != 0) throw ShapeMismatch("attention dim not divisible by heads");
    MultiHeadSelfAttention a;
    a.dim = d;
    a.heads = h;
    a.wq = LinearLayer<T>::create(d, d, rng);
    a.wk = LinearLayer<T>::create(d, d, rng);
    a.wv = LinearLayer<T>::create(d, d, rng);
    a.proj = LinearLayer<T>::create(d, d, rng);
    return a;
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& bias = {}) const {
    int64_t B = x.dim(0), N = x.dim(1);
    int64_t dh = dim / heads;
    auto split = [&](const Tensor<T>& t) {
      return permute(reshape(t, {B, N, heads, dh}), {0, 2, 1, 3});
    };
    auto q = split(wq.forward(x));
    auto k = split(wk.forward(x));
    auto v = split(wv.forward(x));
    T scale_f = T(1) / std::sqrt(static_cast<T>(dh));
    auto scores = matmul(q, k, false, true, scale_f);  // [B,H,N,N]
    if (bias.defined()) scores = add(scores, bias);
    auto attn = softmax_lastdim(scores);
    auto ctx = matmul(attn, v);  // [B,H,N,dh]
    auto merged = reshape(permute(ctx, {0, 2, 1, 3}), {B, N, dim});
    return proj.forward(merged);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    wq.visit(prefix + ".wq", fn);
    wk.visit(prefix + ".wk", fn);
    wv.visit(prefix + ".wv", fn);
    proj.visit(prefix + ".proj", fn);
  }
};

// Pre-norm block: x += attn(ln1(x)); x += mlp(ln2(x)). MLP hidden is 4x dim
// with GELU.
template <class T>
struct TransformerBlock {
  LayerNormLayer<T> ln1, ln2;
  MultiHeadSelfAttention<T> attn;
  LinearLayer<T> fc1, fc2;

  static TransformerBlock create(int64_t d, int64_t heads, Rng& rng) {
    TransformerBlock blk;
    blk.ln1 = LayerNormLayer<T>::create(d);
    blk.ln2 = LayerNormLayer<T>::create(d);
    blk.attn = MultiHeadSelfAttention<T>::create(d, heads, rng);
    blk.fc1 = LinearLayer<T>::create(d, 4 * d, rng);
    blk.fc2 = LinearLayer<T>::create(4 * d, d, rng);
    return blk;
  }

  Tensor<T> forward(Tensor<T> x, const Tensor<T>& bias = {}) const {
    x = add(x, attn.forward(ln1.forward(x), bias));
    x = add(x, fc2.forward(gelu(fc1.forward(ln2.forward(x)))));
    return x;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    ln1.visit(prefix + ".ln1", fn);
    ln2.visit(prefix + ".ln2", fn);
    attn.visit(prefix + ".attn", fn);
    fc1.visit(prefix + ".fc1", fn);
    fc2.visit(prefix + ".fc2", fn);
  }
};

template <class T>
struct TransformerStack {
  std::vector<TransformerBlock<T>> blocks;

  static TransformerStack create(int64_t depth, int64_t d, int64_t heads,
                                 Rng& rng) {
    TransformerStack s;
    for (int64_t i = 0; i < depth; ++i)
      s.blocks.push_back(TransformerBlock<T>::create(d, heads, rng));
    return s;
  }

  Tensor<T> forward(Tensor<T> x, const Tensor<T>& bias = {}) const {
    for (const auto& blk : blocks) x = blk.forward(x, bias);
    return x;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(prefix + ".blk" + std::to_string(i), fn);
  }
};

template <class T>
struct Conv1dLayer {
  Tensor<T> w;  // [out, in, k]
  Tensor<T> b;  // [out]
  int64_t stride = 1;
  int64_t padding = 0;

  static Conv1dLayer create(int64_t in, int64_t out, int64_t k, int64_t stride,
                            int64_t padding, Rng& rng) {
    Conv1dLayer c;
    c.stride = stride;
    c.padding = padding;
    T bound = T(1) / std::sqrt(static_cast<T>(in * k));
    c.w = Tensor<T>::zeros({out, in, k}, true);
    init_uniform_pm(c.w, rng, bound);
    c.b = Tensor<T>::zeros({out}, true);
    init_uniform_pm(c.b, rng, bound);
    return c;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv1d(x, w, b, stride, padding);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
};

}  // namespace mmae::nn
