#include "mmae/model/fd_probe.hpp"

#include <string>
#include <utility>

namespace mmae::model {

FdProbeResult pretrain_fd_probe(const ModelConfig& cfg,
                                const FdProbeConfig& pc) {
  auto st = ModelState<double>::create(cfg, pc.data_seed);
  const int64_t b = pc.batch;
  Rng rng(derive_seed(pc.data_seed, 11));

  auto bytes = nn::Tensor<double>::zeros({b, ingest::kRecordBytes});
  for (auto& v : bytes.data()) v = rng.uniform();
  std::vector<sidechan::PacketSignals> sigs(b);
  for (auto& s : sigs)
    for (int i = 0; i < ingest::kPacketsPerRecord; ++i) {
      s.s_time[i] = static_cast<float>(rng.uniform());
      s.s_len[i] = static_cast<float>(rng.uniform() * 300);
    }
  std::vector<int64_t> pairs(b);
  for (int64_t i = 0; i < b; ++i) pairs[i] = (i % 2 == 0) ? i + 1 : i - 1;
  if (b % 2) pairs[b - 1] = b - 1;
  std::vector<mix::MixMask> masks;
  masks.reserve(b);
  for (int64_t i = 0; i < b; ++i)
    masks.push_back(mix::build_mask(nullptr, cfg.n_x, 0.7, 0.0, rng));
  auto rank_pairs = sample_rank_pairs(b, cfg.n_x, 32, rng);

  if (pc.jitter_seed) {
    Rng jit(pc.jitter_seed);
    st.visit_trainable([&](const std::string&, nn::Tensor<double>& t) {
      for (auto& v : t.data()) v += pc.jitter * (jit.uniform() * 2 - 1);
    });
  }

  nn::Tensor<double> frozen;
  {
    nn::NoGradGuard ng;
    auto warm = pretrain_graph(st, bytes, sigs, masks, pairs, rank_pairs);
    frozen = nn::Tensor<double>::zeros(warm.h_teacher.shape());
    frozen.data() = warm.h_teacher.data();
  }
  auto f = [&]() {
    return pretrain_graph(st, bytes, sigs, masks, pairs, rank_pairs, &frozen)
        .l_pre;
  };

  FdProbeResult res;
  {
    auto l = f();
    nn::backward(l);
    st.visit_teacher([&](const std::string&, nn::Tensor<double>& t) {
      if (!t.has_grad()) return;
      for (double g : t.raw()->grad)
        if (g != 0) res.teacher_grad_free = false;
    });
    st.visit_trainable([&](const std::string& n, nn::Tensor<double>& t) {
      if (n.rfind("matcher.", 0) == 0 && t.has_grad())
        for (double g : t.raw()->grad)
          if (g != 0) res.matcher_grad_zero = false;
      t.zero_grad();
    });
  }

  std::vector<std::pair<std::string, nn::Tensor<double>>> params;
  st.visit_trainable([&](const std::string& n, nn::Tensor<double>& t) {
    if (n.rfind("matcher.", 0) != 0) params.emplace_back(n, t);
  });
  res.report = nn::grad_check(f, params, pc.steps);
  return res;
}

}  // namespace mmae::model
