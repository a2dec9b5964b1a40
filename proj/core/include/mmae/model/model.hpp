// Twin masked autoencoder with statistics-guided mixing: student encoder /
// dual-view decoder with unmixing, packet-importance mask predictor (PMP)
// with a low-rank gated attention bias, EMA teacher, and the three loss
// terms (reconstruction, ranking, alignment).
#pragma once

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mmae/common.hpp"
#include "mmae/features/side_channel.hpp"
#include "mmae/match/flow_matcher.hpp"
#include "mmae/mix/flowmix.hpp"
#include "mmae/model/config.hpp"
#include "mmae/nn/functional.hpp"
#include "mmae/nn/tensor.hpp"

namespace mmae::model {

class EmptyPairSample : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kBiasClamp = 5.0;

// Stat-context + bias + difficulty predictor. The two convolutions read the
// broadcast per-byte signal channels with kernel == stride == patch_size, so
// each output position covers exactly one patch.
template <class T>
struct PmpParams {
  nn::Conv1dLayer<T> conv_time, conv_len;
  nn::Tensor<T> pe_t, pe_l;  // [N_x, D_stat]
  nn::LinearLayer<T> fuse;   // 2*D_stat -> D_stat
  nn::LayerNormLayer<T> ln;
  nn::LinearLayer<T> w_u_sup, w_y_sup, w_u_enh, w_y_enh;  // D_stat -> r
  nn::LinearLayer<T> sal;  // 1 -> 1 on token L2 norms
  nn::LinearLayer<T> ctx;  // D_stat -> 1
  nn::Tensor<T> w_a, w_b;  // [3, r] gating factors
  nn::Tensor<T> gamma_sup, gamma_enh;  // scalars, effective scale softplus(.)
  nn::TransformerStack<T> f_pmp;  // 2 blocks over D with bias injection
  nn::LinearLayer<T> head;        // D -> 1 difficulty

  static PmpParams create(const ModelConfig& cfg, Rng& rng) {
    PmpParams p;
    p.conv_time =
        nn::Conv1dLayer<T>::create(1, cfg.d_stat, cfg.patch_size,
                                   cfg.patch_size, 0, rng);
    p.conv_len = nn::Conv1dLayer<T>::create(1, cfg.d_stat, cfg.patch_size,
                                            cfg.patch_size, 0, rng);
    p.pe_t = nn::Tensor<T>::zeros({cfg.n_x, cfg.d_stat}, true);
    nn::init_sinusoidal(p.pe_t);
    p.pe_l = nn::Tensor<T>::zeros({cfg.n_x, cfg.d_stat}, true);
    nn::init_sinusoidal(p.pe_l);
    p.fuse = nn::LinearLayer<T>::create(2 * cfg.d_stat, cfg.d_stat, rng);
    p.ln = nn::LayerNormLayer<T>::create(cfg.d_stat);
    p.w_u_sup =
        nn::LinearLayer<T>::create(cfg.d_stat, cfg.rank_r, rng, T(0.02), false);
    p.w_y_sup =
        nn::LinearLayer<T>::create(cfg.d_stat, cfg.rank_r, rng, T(0.02), false);
    p.w_u_enh =
        nn::LinearLayer<T>::create(cfg.d_stat, cfg.rank_r, rng, T(0.02), false);
    p.w_y_enh =
        nn::LinearLayer<T>::create(cfg.d_stat, cfg.rank_r, rng, T(0.02), false);
    p.sal = nn::LinearLayer<T>::create(1, 1, rng);
    p.ctx = nn::LinearLayer<T>::create(cfg.d_stat, 1, rng);
    p.w_a = nn::Tensor<T>::zeros({3, cfg.rank_r}, true);
    nn::init_normal(p.w_a, rng, T(0.02));
    p.w_b = nn::Tensor<T>::zeros({3, cfg.rank_r}, true);
    nn::init_normal(p.w_b, rng, T(0.02));
    p.gamma_sup = nn::Tensor<T>::zeros({1}, true);
    p.gamma_enh = nn::Tensor<T>::zeros({1}, true);
    p.f_pmp = nn::TransformerStack<T>::create(2, cfg.d, cfg.heads, rng);
    p.head = nn::LinearLayer<T>::create(cfg.d, 1, rng);
    return p;
  }

  void visit(const std::string& prefix, const nn::ParamVisitor<T>& fn) {
    conv_time.visit(prefix + ".conv_time", fn);
    conv_len.visit(prefix + ".conv_len", fn);
    fn(prefix + ".pe_t", pe_t);
    fn(prefix + ".pe_l", pe_l);
    fuse.visit(prefix + ".fuse", fn);
    ln.visit(prefix + ".ln", fn);
    w_u_sup.visit(prefix + ".w_u_sup", fn);
    w_y_sup.visit(prefix + ".w_y_sup", fn);
    w_u_enh.visit(prefix + ".w_u_enh", fn);
    w_y_enh.visit(prefix + ".w_y_enh", fn);
    sal.visit(prefix + ".sal", fn);
    ctx.visit(prefix + ".ctx", fn);
    fn(prefix + ".w_a", w_a);
    fn(prefix + ".w_b", w_b);
    fn(prefix + ".gamma_sup", gamma_sup);
    fn(prefix + ".gamma_enh", gamma_enh);
    f_pmp.visit(prefix + ".f_pmp", fn);
    head.visit(prefix + ".head", fn);
  }
};

template <class T>
struct ModelState {
  ModelConfig cfg;
  mix::EmbeddingParams<T> embed;  // shared by student and teacher inputs
  nn::TransformerStack<T> enc_s, dec_s;
  nn::Tensor<T> e_mask;     // [1, D] mask token
  nn::Tensor<T> e_pos_dec;  // [N_x, D] decoder positions
  nn::LinearLayer<T> rec_head;
  nn::TransformerStack<T> enc_t, dec_t;  // teacher (EMA of student)
  nn::Tensor<T> e_pos_dec_t;
  PmpParams<T> pmp;
  match::MatcherParams<T> matcher;

  static ModelState create(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelState s;
    s.cfg = cfg;
    Rng rng(derive_seed(seed, 0x11));
    s.embed = mix::EmbeddingParams<T>::create(cfg.patch_size, cfg.d, cfg.n_x,
                                              rng);
    s.enc_s = nn::TransformerStack<T>::create(cfg.encoder_depth, cfg.d,
                                              cfg.heads, rng);
    s.dec_s = nn::TransformerStack<T>::create(cfg.decoder_depth, cfg.d,
                                              cfg.heads, rng);
    s.e_mask = nn::Tensor<T>::zeros({1, cfg.d}, true);
    nn::init_normal(s.e_mask, rng, T(0.02));
    s.e_pos_dec = nn::Tensor<T>::zeros({cfg.n_x, cfg.d}, true);
    nn::init_sinusoidal(s.e_pos_dec);
    int64_t rec_out = cfg.recon_target == ReconTarget::kRawBytes
                          ? cfg.patch_size
                          : cfg.d;
    s.rec_head = nn::LinearLayer<T>::create(cfg.d, rec_out, rng);
    s.pmp = PmpParams<T>::create(cfg, rng);
    s.matcher = match::MatcherParams<T>::create(rng, cfg.matcher_stop_gradient);

    // teacher starts as an exact copy of the student encoder/decoder
    s.enc_t = nn::TransformerStack<T>::create(cfg.encoder_depth, cfg.d,
                                              cfg.heads, rng);
    s.dec_t = nn::TransformerStack<T>::create(cfg.decoder_depth, cfg.d,
                                              cfg.heads, rng);
    s.e_pos_dec_t = nn::Tensor<T>::zeros({cfg.n_x, cfg.d});
    s.visit_ema_pairs([](nn::Tensor<T>& stu, nn::Tensor<T>& tea) {
      tea.data() = stu.data();
    });
    return s;
  }

  // Everything the pre-training optimizer updates.
  void visit_trainable(const nn::ParamVisitor<T>& fn) {
    embed.visit("embed", fn);
    enc_s.visit("student.enc", fn);
    dec_s.visit("student.dec", fn);
    fn("student.e_mask", e_mask);
    fn("student.e_pos_dec", e_pos_dec);
    rec_head.visit("student.rec_head", fn);
    pmp.visit("pmp", fn);
    matcher.visit("matcher", fn);
  }

  void visit_teacher(const nn::ParamVisitor<T>& fn) {
    enc_t.visit("teacher.enc", fn);
    dec_t.visit("teacher.dec", fn);
    fn("teacher.e_pos_dec", e_pos_dec_t);
  }

  // (student, teacher) tensor pairs in mirrored order for EMA updates.
  void visit_ema_pairs(
      const std::function<void(nn::Tensor<T>&, nn::Tensor<T>&)>& fn) {
    std::vector<nn::Tensor<T>*> stu, tea;
    auto grab = [](std::vector<nn::Tensor<T>*>& out) {
      return [&out](const std::string&, nn::Tensor<T>& t) { out.push_back(&t); };
    };
    enc_s.visit("", grab(stu));
    dec_s.visit("", grab(stu));
    stu.push_back(&e_pos_dec);
    enc_t.visit("", grab(tea));
    dec_t.visit("", grab(tea));
    tea.push_back(&e_pos_dec_t);
    if (stu.size() != tea.size())
      throw nn::ShapeMismatch("teacher does not mirror student");
    for (size_t i = 0; i < stu.size(); ++i) {
      if (stu[i]->shape() != tea[i]->shape())
        throw nn::ShapeMismatch("teacher shape mismatch at pair " +
                                std::to_string(i));
      fn(*stu[i], *tea[i]);
    }
  }

  // Full state for checkpointing (parameters + teacher + BN buffers).
  void visit_all(const nn::ParamVisitor<T>& fn) {
    visit_trainable(fn);
    visit_teacher(fn);
    matcher.visit_buffers("matcher", fn);
  }
};

template <class T>
nn::Tensor<T> student_encode(const ModelState<T>& state,
                             const nn::Tensor<T>& x) {
  return state.enc_s.forward(x);
}

template <class T>
struct ViewPair {
  nn::Tensor<T> v_main, v_supp;
};

// V_main keeps unmasked tokens and puts the mask token at masked slots;
// V_supp is the exact complement. m: [B, N_x, 1] binary.
template <class T>
ViewPair<T> make_views(const nn::Tensor<T>& z_patches, const nn::Tensor<T>& m,
                       const nn::Tensor<T>& e_mask) {
  int64_t d = z_patches.dim(-1);
  auto em = nn::reshape(e_mask, {1, 1, d});
  auto keep = nn::add_scalar(nn::neg(m), T(1));
  ViewPair<T> v;
  v.v_main = nn::add(nn::mul(z_patches, keep), nn::mul(em, m));
  v.v_supp = nn::add(nn::mul(z_patches, m), nn::mul(em, keep));
  return v;
}

// Both views pass the same decoder; they are concatenated along the batch
// axis so decoder batch statistics cannot differ between views.
template <class T>
std::pair<nn::Tensor<T>, nn::Tensor<T>> decode_views(
    const ModelState<T>& state, const nn::Tensor<T>& v_main,
    const nn::Tensor<T>& v_supp) {
  int64_t b = v_main.dim(0), n = v_main.dim(1), d = v_main.dim(2);
  auto pos = nn::reshape(state.e_pos_dec, {1, n, d});
  auto both = nn::concat<T>({nn::add(v_main, pos), nn::add(v_supp, pos)}, 0);
  auto h = state.dec_s.forward(both);
  return {nn::slice(h, 0, 0, b), nn::slice(h, 0, b, b)};
}

// H_aligned[b] = H_supp[pairs[b]]; output takes H_main at masked positions
// and the aligned support decoding elsewhere.
template <class T>
nn::Tensor<T> unmix(const nn::Tensor<T>& h_main, const nn::Tensor<T>& h_supp,
                    const nn::Tensor<T>& m, const std::vector<int64_t>& pairs) {
  if (h_main.dim(0) != static_cast<int64_t>(pairs.size()))
    throw nn::ShapeMismatch("unmix: pair index length " +
                            std::to_string(pairs.size()) + " vs batch " +
                            std::to_string(h_main.dim(0)));
  auto aligned = nn::index_select(h_supp, 0, pairs);
  auto keep = nn::add_scalar(nn::neg(m), T(1));
  return nn::add(nn::mul(h_main, m), nn::mul(aligned, keep));
}

template <class T>
struct RecLoss {
  nn::Tensor<T> scalar;     // mean over batch and patches
  nn::Tensor<T> per_patch;  // [B, N_x], mean over patch dims
};

template <class T>
RecLoss<T> loss_reconstruction(const nn::Tensor<T>& h_unmix,
                               const nn::Tensor<T>& target,
                               const nn::LinearLayer<T>& head) {
  auto pred = head.forward(h_unmix);
  if (pred.shape() != target.shape())
    throw nn::ShapeMismatch("reconstruction target " +
                            nn::shape_str(target.shape()) +
                            " vs prediction " + nn::shape_str(pred.shape()));
  RecLoss<T> out;
  out.per_patch = nn::mean_axes(nn::square(nn::sub(pred, target)), {-1});
  out.scalar = nn::mean_all(out.per_patch);
  return out;
}

// Standardize each signal over the batch (zero mean, unit variance,
// eps-guarded) and broadcast every packet value across its 320 bytes,
// yielding one [B, 1, 1600] channel per signal. No gradient flows here.
template <class T>
std::pair<nn::Tensor<T>, nn::Tensor<T>> broadcast_signals(
    const std::vector<sidechan::PacketSignals>& sigs) {
  int64_t b = static_cast<int64_t>(sigs.size());
  auto standardize = [&](bool time_sig) {
    std::vector<double> vals;
    vals.reserve(static_cast<size_t>(b) * ingest::kPacketsPerRecord);
    for (const auto& s : sigs)
      for (int i = 0; i < ingest::kPacketsPerRecord; ++i)
        vals.push_back(time_sig ? s.s_time[i] : s.s_len[i]);
    double mean = 0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(vals.size());
    double inv_sd = 1.0 / std::sqrt(var + 1e-8);
    auto ch = nn::Tensor<T>::zeros({b, 1, ingest::kRecordBytes});
    T* d = ch.data().data();
    for (int64_t s = 0; s < b; ++s)
      for (int p = 0; p < ingest::kPacketsPerRecord; ++p) {
        T z = static_cast<T>(
            (vals[static_cast<size_t>(s * ingest::kPacketsPerRecord + p)] -
             mean) *
            inv_sd);
        for (int64_t j = 0; j < ingest::kSegmentBytes; ++j)
          d[s * ingest::kRecordBytes + p * ingest::kSegmentBytes + j] = z;
      }
    return ch;
  };
  return {standardize(true), standardize(false)};
}

// Per-patch statistical context: conv per signal channel, positional tables,
// concat, fuse, layer norm. Output [B, N_x, D_stat].
template <class T>
nn::Tensor<T> stat_context(const std::vector<sidechan::PacketSignals>& sigs,
                           const PmpParams<T>& pmp, const ModelConfig& cfg) {
  auto [ch_t, ch_l] = broadcast_signals<T>(sigs);
  auto zt = nn::permute(pmp.conv_time.forward(ch_t), {0, 2, 1});
  auto zl = nn::permute(pmp.conv_len.forward(ch_l), {0, 2, 1});
  zt = nn::add(zt, nn::reshape(pmp.pe_t, {1, cfg.n_x, cfg.d_stat}));
  zl = nn::add(zl, nn::reshape(pmp.pe_l, {1, cfg.n_x, cfg.d_stat}));
  auto z = nn::concat<T>({zt, zl}, 2);
  return pmp.ln.forward(pmp.fuse.forward(z));
}

// Low-rank suppress/enhance maps gated per token pair:
//   Z^k = (Z_stat W_U^k)(Z_stat W_Y^k)^T / sqrt(r)
//   gate features: mean ReLU cosine, linear of token norm, linear of Z_stat
//   L_gate = (F W_a)(F W_b)^T, p_sup = sigmoid(L_gate)
//   B = clamp(p_sup (-softplus(g_sup) Z^sup) + (1-p_sup) softplus(g_enh) Z^enh)
template <class T>
nn::Tensor<T> pmp_bias(const nn::Tensor<T>& z_stat,
                       const nn::Tensor<T>& v_main, const PmpParams<T>& pmp,
                       const ModelConfig& cfg) {
  T inv_sqrt_r = T(1) / std::sqrt(static_cast<T>(cfg.rank_r));
  auto low_rank = [&](const nn::LinearLayer<T>& wu,
                      const nn::LinearLayer<T>& wy) {
    auto u = wu.forward(z_stat);
    auto y = wy.forward(z_stat);
    return nn::matmul(u, y, false, true, inv_sqrt_r);
  };
  auto z_sup = low_rank(pmp.w_u_sup, pmp.w_y_sup);
  auto z_enh = low_rank(pmp.w_u_enh, pmp.w_y_enh);

  auto norm = nn::sqrt_t(nn::add_scalar(
      nn::sum_axes(nn::square(v_main), {-1}, true), T(1e-8)));
  auto v_hat = nn::div(v_main, norm);
  auto cos = nn::matmul(v_hat, v_hat, false, true);
  auto f_sim = nn::mean_axes(nn::relu(cos), {-1}, true);
  auto f_sal = pmp.sal.forward(norm);
  auto f_ctx = pmp.ctx.forward(z_stat);
  auto f_gate = nn::concat<T>({f_sim, f_sal, f_ctx}, 2);

  auto ga = nn::matmul(f_gate, pmp.w_a);
  auto gb = nn::matmul(f_gate, pmp.w_b);
  auto p_sup = nn::sigmoid(nn::matmul(ga, gb, false, true));
  auto p_enh = nn::add_scalar(nn::neg(p_sup), T(1));

  auto sup_term = nn::mul(p_sup, nn::mul(nn::neg(nn::softplus(pmp.gamma_sup)),
                                         z_sup));
  auto enh_term = nn::mul(p_enh, nn::mul(nn::softplus(pmp.gamma_enh), z_enh));
  return nn::clamp(nn::add(sup_term, enh_term), T(-kBiasClamp), T(kBiasClamp));
}

// Difficulty per patch: 2 transformer blocks whose attention scores all get
// B_attn added, then a scalar head. Output [B, N_x].
template <class T>
nn::Tensor<T> pmp_predict(const nn::Tensor<T>& z_patches,
                          const nn::Tensor<T>& b_attn,
                          const PmpParams<T>& pmp) {
  int64_t b = z_patches.dim(0), n = z_patches.dim(1);
  auto bias = nn::reshape(b_attn, {b, 1, n, n});
  auto h = pmp.f_pmp.forward(z_patches, bias);
  return nn::reshape(pmp.head.forward(h), {b, n});
}

// Uniform (i, j) pairs with i != j, as flat [B*N_x] indices.
inline std::vector<std::pair<int64_t, int64_t>> sample_rank_pairs(
    int64_t batch, int64_t n_x, int64_t per_seq, Rng& rng) {
  std::vector<std::pair<int64_t, int64_t>> out;
  if (n_x < 2) return out;
  out.reserve(static_cast<size_t>(batch * per_seq));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t k = 0; k < per_seq; ++k) {
      int64_t i = static_cast<int64_t>(rng.uniform_int(
          static_cast<uint64_t>(n_x)));
      int64_t j = i;
      while (j == i)
        j = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n_x)));
      out.emplace_back(b * n_x + i, b * n_x + j);
    }
  return out;
}

// RankNet-style pairwise loss. per_patch_rec supplies the ordering targets
// only (values read, never differentiated). For a pair with d = d_i - d_j:
//   loss = BCE(sigmoid(d), I+) + BCE(1 - sigmoid(d), I-)
//        = softplus(d) - I+ d + softplus(-d) + I- d
// Ties (rec_i == rec_j) give I+ = I- = 0 and still contribute 2 ln 2 at d=0.
template <class T>
nn::Tensor<T> loss_rank(const nn::Tensor<T>& difficulty,
                        const nn::Tensor<T>& per_patch_rec,
                        const std::vector<std::pair<int64_t, int64_t>>& pairs) {
  if (pairs.empty())
    throw EmptyPairSample("loss_rank needs at least one sampled pair");
  if (difficulty.shape() != per_patch_rec.shape())
    throw nn::ShapeMismatch("difficulty " + nn::shape_str(difficulty.shape()) +
                            " vs per-patch loss " +
                            nn::shape_str(per_patch_rec.shape()));
  int64_t total = difficulty.numel();
  int64_t np = static_cast<int64_t>(pairs.size());
  std::vector<int64_t> is, js;
  is.reserve(pairs.size());
  js.reserve(pairs.size());
  auto pos = nn::Tensor<T>::zeros({np});  // I+
  auto neg_i = nn::Tensor<T>::zeros({np});  // I-
  const T* rec = per_patch_rec.data().data();
  for (int64_t k = 0; k < np; ++k) {
    auto [i, j] = pairs[static_cast<size_t>(k)];
    if (i < 0 || i >= total || j < 0 || j >= total)
      throw nn::ShapeMismatch("rank pair index out of range");
    is.push_back(i);
    js.push_back(j);
    if (rec[i] > rec[j])
      pos.data()[k] = T(1);
    else if (rec[i] < rec[j])
      neg_i.data()[k] = T(1);
  }
  auto flat = nn::reshape(difficulty, {total});
  auto delta = nn::sub(nn::index_select(flat, 0, is),
                       nn::index_select(flat, 0, js));
  auto loss = nn::add(nn::sub(nn::softplus(delta), nn::mul(pos, delta)),
                      nn::add(nn::softplus(nn::neg(delta)),
                              nn::mul(neg_i, delta)));
  return nn::mean_all(loss);
}

// Teacher pass over the clean (unmixed) token sequence: encoder, strip class
// token, decoder positions, decoder. Runs without gradient tracking; the
// output is fully detached from both teacher and student parameters.
template <class T>
nn::Tensor<T> teacher_forward(const ModelState<T>& state,
                              const nn::Tensor<T>& x_teacher) {
  nn::NoGradGuard guard;
  auto x = nn::detach(x_teacher);
  auto z = state.enc_t.forward(x);
  int64_t n = z.dim(1) - 1, d = z.dim(2);
  auto patches = nn::slice(z, 1, 1, n);
  auto pos = nn::reshape(state.e_pos_dec_t, {1, n, d});
  return state.dec_t.forward(nn::add(patches, pos));
}

// 1 - mean per-token cosine similarity along the feature axis.
template <class T>
nn::Tensor<T> loss_align(const nn::Tensor<T>& h_unmix,
                         const nn::Tensor<T>& h_teacher) {
  auto sim = nn::cosine_similarity_lastdim(h_unmix, h_teacher);
  return nn::add_scalar(nn::neg(nn::mean_all(sim)), T(1));
}

template <class T>
nn::Tensor<T> total_pretrain_loss(const nn::Tensor<T>& l_rec,
                                  const nn::Tensor<T>& l_pred,
                                  const nn::Tensor<T>& l_align, double lambda1,
                                  double lambda2) {
  auto l = nn::add(l_rec, nn::add(nn::scale(l_pred, static_cast<T>(lambda1)),
                                  nn::scale(l_align, static_cast<T>(lambda2))));
  if (!std::isfinite(static_cast<double>(l.data()[0])))
    throw NonFiniteLoss("pre-training loss is not finite");
  return l;
}

template <class T>
struct PretrainArtifacts {
  nn::Tensor<T> z_student, v_main, v_supp, h_main, h_supp, h_unmix, h_teacher;
  nn::Tensor<T> b_attn;         // [B, N_x, N_x], clamped
  nn::Tensor<T> difficulty;     // [B, N_x]
  nn::Tensor<T> per_patch_rec;  // [B, N_x]
  nn::Tensor<T> l_rec, l_pred, l_align, l_pre;  // scalars
};

// Builds the full differentiable pre-training graph for one batch, given the
// already-fixed discrete choices (masks, pairing, rank pair sample). Callers
// must copy any values they need before running backward, which releases
// intermediate buffers. `teacher_target` substitutes a precomputed alignment
// target for the teacher pass: finite-difference checks need the target held
// constant, since the live teacher input shares embedding parameters with
// the student while the gradient stops at the detach boundary.
template <class T>
PretrainArtifacts<T> pretrain_graph(
    ModelState<T>& state, const nn::Tensor<T>& bytes,
    const std::vector<sidechan::PacketSignals>& signals,
    const std::vector<mix::MixMask>& masks, const std::vector<int64_t>& pairs,
    const std::vector<std::pair<int64_t, int64_t>>& rank_pairs,
    const nn::Tensor<T>* teacher_target = nullptr) {
  const auto& cfg = state.cfg;
  PretrainArtifacts<T> art;

  auto patches = mix::patchify(bytes, cfg.patch_size);
  auto main_tokens = mix::embed_patches(patches, state.embed);
  auto supp_tokens = nn::index_select(main_tokens, 0, pairs);
  auto m = mix::masks_to_tensor<T>(masks);
  auto mixed = mix::mix(main_tokens, supp_tokens, m);
  auto x_student = mix::assemble_student_input(mixed, state.embed);
  auto x_teacher = mix::assemble_teacher_input(main_tokens, state.embed);

  art.z_student = student_encode(state, x_student);
  auto z_patches = nn::slice(art.z_student, 1, 1, cfg.n_x);
  auto views = make_views(z_patches, m, state.e_mask);
  art.v_main = views.v_main;
  art.v_supp = views.v_supp;
  auto [h_main, h_supp] = decode_views(state, art.v_main, art.v_supp);
  art.h_main = h_main;
  art.h_supp = h_supp;
  art.h_unmix = unmix(art.h_main, art.h_supp, m, pairs);
  for (T v : art.h_unmix.data())
    if (!std::isfinite(static_cast<double>(v)))
      throw NonFiniteLoss("non-finite value in unmixed decoding");

  nn::Tensor<T> target = cfg.recon_target == ReconTarget::kRawBytes
                             ? patches
                             : nn::detach(main_tokens);
  auto rec = loss_reconstruction(art.h_unmix, target, state.rec_head);
  art.l_rec = rec.scalar;
  art.per_patch_rec = rec.per_patch;

  auto z_stat = stat_context(signals, state.pmp, cfg);
  art.b_attn = pmp_bias(z_stat, art.v_main, state.pmp, cfg);
  for (T v : art.b_attn.data())
    if (!(std::abs(static_cast<double>(v)) <= kBiasClamp))
      throw NonFiniteLoss("attention bias escaped its clamp");
  art.difficulty = pmp_predict(z_patches, art.b_attn, state.pmp);
  art.l_pred = loss_rank(art.difficulty, art.per_patch_rec, rank_pairs);

  art.h_teacher = teacher_target ? nn::detach(*teacher_target)
                                 : teacher_forward(state, x_teacher);
  art.l_align = loss_align(art.h_unmix, art.h_teacher);
  art.l_pre = total_pretrain_loss(art.l_rec, art.l_pred, art.l_align,
                                  cfg.lambda1, cfg.lambda2);
  return art;
}

// Classification logits from the class token of the encoded record.
template <class T>
nn::Tensor<T> finetune_logits(const ModelState<T>& state,
                              const nn::LinearLayer<T>& head,
                              const nn::Tensor<T>& bytes) {
  auto patches = mix::patchify(bytes, state.cfg.patch_size);
  auto tokens = mix::embed_patches(patches, state.embed);
  auto x = mix::assemble_student_input(tokens, state.embed);
  auto z = student_encode(state, x);
  auto cls = nn::reshape(nn::slice(z, 1, 0, 1), {z.dim(0), z.dim(2)});
  return head.forward(cls);
}

}  // namespace mmae::model
