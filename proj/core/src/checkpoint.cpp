#include "mmae/train/checkpoint.hpp"

#include <fstream>
#include <unordered_map>

#include "mmae/nn/serialize.hpp"

namespace mmae::train {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_config(std::ostream& os, const model::ModelConfig& c) {
  nn::io::put_pod<int64_t>(os, c.d);
  nn::io::put_pod<int64_t>(os, c.encoder_depth);
  nn::io::put_pod<int64_t>(os, c.decoder_depth);
  nn::io::put_pod<int64_t>(os, c.heads);
  nn::io::put_pod<int64_t>(os, c.n_x);
  nn::io::put_pod<int64_t>(os, c.patch_size);
  nn::io::put_pod<int64_t>(os, c.d_stat);
  nn::io::put_pod<int64_t>(os, c.rank_r);
  nn::io::put_pod<double>(os, c.lambda1);
  nn::io::put_pod<double>(os, c.lambda2);
  nn::io::put_string(os, model::recon_target_name(c.recon_target));
  nn::io::put_pod<uint8_t>(os, c.matcher_stop_gradient ? 1 : 0);
}

model::ModelConfig get_config(std::istream& is) {
  model::ModelConfig c;
  c.d = nn::io::get_pod<int64_t>(is);
  c.encoder_depth = nn::io::get_pod<int64_t>(is);
  c.decoder_depth = nn::io::get_pod<int64_t>(is);
  c.heads = nn::io::get_pod<int64_t>(is);
  c.n_x = nn::io::get_pod<int64_t>(is);
  c.patch_size = nn::io::get_pod<int64_t>(is);
  c.d_stat = nn::io::get_pod<int64_t>(is);
  c.rank_r = nn::io::get_pod<int64_t>(is);
  c.lambda1 = nn::io::get_pod<double>(is);
  c.lambda2 = nn::io::get_pod<double>(is);
  c.recon_target = model::recon_target_from_name(nn::io::get_string(is));
  c.matcher_stop_gradient = nn::io::get_pod<uint8_t>(is) != 0;
  return c;
}

std::vector<std::pair<std::string, nn::Tensor<float>>> collect_all(
    model::ModelState<float>& state) {
  std::vector<std::pair<std::string, nn::Tensor<float>>> out;
  state.visit_all([&](const std::string& n, nn::Tensor<float>& t) {
    out.emplace_back(n, t);
  });
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, model::ModelState<float>& state,
                     const CheckpointMeta& meta, nn::AdamW<float>* opt,
                     const DifficultyCache* cache,
                     const nn::LinearLayer<float>* head,
                     int64_t num_classes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint: " + path);
  os.write(kMagic, 4);
  nn::io::put_pod<uint32_t>(os, kVersion);
  put_config(os, state.cfg);
  nn::io::put_pod<uint64_t>(os, meta.seed);
  nn::io::put_pod<int64_t>(os, meta.step);
  nn::io::put_pod<int64_t>(os, meta.epoch);

  nn::io::put_named_tensors(os, collect_all(state));

  nn::io::put_pod<uint8_t>(os, opt ? 1 : 0);
  if (opt) {
    nn::io::put_pod<int64_t>(os, opt->step_count());
    nn::io::put_pod<uint64_t>(os, static_cast<uint64_t>(opt->param_count()));
    for (size_t i = 0; i < opt->param_count(); ++i) {
      nn::io::put_string(os, opt->param_name(i));
      nn::io::put_vec(os, opt->moment1(i));
      nn::io::put_vec(os, opt->moment2(i));
    }
  }

  nn::io::put_pod<uint8_t>(os, cache ? 1 : 0);
  if (cache) {
    nn::io::put_pod<uint64_t>(os, static_cast<uint64_t>(cache->size()));
    for (const auto& [idx, entry] : *cache) {
      nn::io::put_pod<int64_t>(os, idx);
      nn::io::put_pod<int64_t>(os, entry.step_written);
      nn::io::put_vec(os, entry.scores);
    }
  }

  nn::io::put_pod<uint8_t>(os, head ? 1 : 0);
  if (head) {
    nn::io::put_pod<int64_t>(os, num_classes);
    auto* h = const_cast<nn::LinearLayer<float>*>(head);
    std::vector<std::pair<std::string, nn::Tensor<float>>> ht;
    h->visit("head", [&](const std::string& n, nn::Tensor<float>& t) {
      ht.emplace_back(n, t);
    });
    nn::io::put_named_tensors(os, ht);
  }
  if (!os) throw IoError("short write on checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != std::string(kMagic, 4))
    throw IncompatibleCheckpoint("bad magic in " + path);
  uint32_t ver = nn::io::get_pod<uint32_t>(is);
  if (ver != kVersion)
    throw IncompatibleCheckpoint("unsupported checkpoint version " +
                                 std::to_string(ver));
  auto cfg = get_config(is);
  cfg.validate();

  CheckpointMeta meta;
  meta.seed = nn::io::get_pod<uint64_t>(is);
  meta.step = nn::io::get_pod<int64_t>(is);
  meta.epoch = nn::io::get_pod<int64_t>(is);

  LoadedCheckpoint ck{model::ModelState<float>::create(cfg, meta.seed), meta};

  auto stored = nn::io::get_named_tensors<float>(is);
  std::unordered_map<std::string, nn::Tensor<float>*> live;
  std::vector<std::pair<std::string, nn::Tensor<float>>> live_list =
      collect_all(ck.state);
  for (auto& [n, t] : live_list) live[n] = &t;
  if (stored.size() != live.size())
    throw IncompatibleCheckpoint(
        "checkpoint holds " + std::to_string(stored.size()) +
        " tensors, model has " + std::to_string(live.size()));
  for (auto& [name, t] : stored) {
    auto it = live.find(name);
    if (it == live.end())
      throw IncompatibleCheckpoint("unknown tensor in checkpoint: " + name);
    if (it->second->shape() != t.shape())
      throw IncompatibleCheckpoint("shape mismatch for " + name + ": " +
                                   nn::shape_str(t.shape()) + " vs " +
                                   nn::shape_str(it->second->shape()));
    it->second->data() = t.data();
  }

  ck.has_optimizer = nn::io::get_pod<uint8_t>(is) != 0;
  if (ck.has_optimizer) {
    ck.opt_step = nn::io::get_pod<int64_t>(is);
    uint64_t n = nn::io::get_pod<uint64_t>(is);
    for (uint64_t i = 0; i < n; ++i) {
      std::string name = nn::io::get_string(is);
      auto m1 = nn::io::get_vec<float>(is);
      auto m2 = nn::io::get_vec<float>(is);
      ck.moments[name] = {std::move(m1), std::move(m2)};
    }
  }

  if (nn::io::get_pod<uint8_t>(is) != 0) {
    uint64_t n = nn::io::get_pod<uint64_t>(is);
    for (uint64_t i = 0; i < n; ++i) {
      int64_t idx = nn::io::get_pod<int64_t>(is);
      DifficultyEntry e;
      e.step_written = nn::io::get_pod<int64_t>(is);
      e.scores = nn::io::get_vec<double>(is);
      ck.cache.emplace(idx, std::move(e));
    }
  }

  if (nn::io::get_pod<uint8_t>(is) != 0) {
    ck.num_classes = nn::io::get_pod<int64_t>(is);
    auto ht = nn::io::get_named_tensors<float>(is);
    if (ht.size() != 2 || ht[0].first != "head.w" || ht[1].first != "head.b")
      throw IncompatibleCheckpoint("malformed head block");
    ck.head.w = ht[0].second;
    ck.head.b = ht[1].second;
    ck.head.w.raw()->requires_grad = true;
    ck.head.b.raw()->requires_grad = true;
  }
  return ck;
}

void restore_optimizer(nn::AdamW<float>& opt, const LoadedCheckpoint& ck) {
  if (!ck.has_optimizer)
    throw IncompatibleCheckpoint("checkpoint has no optimizer state");
  if (opt.param_count() != ck.moments.size())
    throw IncompatibleCheckpoint(
        "optimizer spans " + std::to_string(opt.param_count()) +
        " params, checkpoint stored " + std::to_string(ck.moments.size()));
  for (size_t i = 0; i < opt.param_count(); ++i) {
    auto it = ck.moments.find(opt.param_name(i));
    if (it == ck.moments.end())
      throw IncompatibleCheckpoint("no moments for param " +
                                   opt.param_name(i));
    if (it->second.first.size() != opt.moment1(i).size())
      throw IncompatibleCheckpoint("moment size mismatch for " +
                                   opt.param_name(i));
    opt.moment1(i) = it->second.first;
    opt.moment2(i) = it->second.second;
  }
  opt.set_step_count(ck.opt_step);
}

}  // namespace mmae::train
