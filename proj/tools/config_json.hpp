#pragma once

// JSON run configuration for the command-line verbs. Keys mirror the CLI
// flags one-to-one; unknown keys are rejected so a typo cannot silently run
// with defaults. Precedence is struct defaults < JSON file < explicit flags,
// and the fully resolved set is echoed to the output directory.

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mmae/common.hpp"
#include "mmae/model/config.hpp"
#include "mmae/train/trainer.hpp"

namespace mmaecli {

struct RunConfig {
  std::string profile = "desk";  // desk | paper
  mmae::train::TrainConfig train;
  double lambda1 = 1.0;  // mask-prediction loss weight
  double lambda2 = 0.1;  // alignment loss weight
  std::string recon_target = "raw_bytes";
};

inline mmae::model::ModelConfig make_model_config(const RunConfig& c) {
  mmae::model::ModelConfig mc;
  if (c.profile == "desk")
    mc = mmae::model::ModelConfig::desk();
  else if (c.profile == "paper")
    mc = mmae::model::ModelConfig::paper();
  else
    throw mmae::ConfigError("unknown profile '" + c.profile +
                            "' (expected desk or paper)");
  mc.lambda1 = c.lambda1;
  mc.lambda2 = c.lambda2;
  mc.recon_target = mmae::model::recon_target_from_name(c.recon_target);
  return mc;
}

inline void apply_config_json(RunConfig& c, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw mmae::IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw mmae::ConfigError(path + ": " + e.what());
  }
  if (!j.is_object())
    throw mmae::ConfigError(path + ": top level must be a JSON object");

  auto& t = c.train;
  for (const auto& [key, val] : j.items()) {
    try {
      if (key == "profile")
        c.profile = val.get<std::string>();
      else if (key == "seed")
        t.seed = val.get<uint64_t>();
      else if (key == "epochs")
        t.epochs = val.get<int64_t>();
      else if (key == "steps")
        t.steps = val.get<int64_t>();
      else if (key == "batch_size")
        t.batch_size = val.get<int64_t>();
      else if (key == "base_lr")
        t.base_lr = val.get<double>();
      else if (key == "weight_decay")
        t.weight_decay = val.get<double>();
      else if (key == "warmup_frac")
        t.warmup_frac = val.get<double>();
      else if (key == "m_base")
        t.m_base = val.get<double>();
      else if (key == "m_final")
        t.m_final = val.get<double>();
      else if (key == "mask_ratio")
        t.r_rand = val.get<double>();
      else if (key == "hard_ratio_max")
        t.r_max = val.get<double>();
      else if (key == "mask_cap")
        t.mask_cap = val.get<double>();
      else if (key == "eta")
        t.eta = val.get<double>();
      else if (key == "rank_pairs")
        t.rank_pairs_per_seq = val.get<int64_t>();
      else if (key == "checkpoint_every")
        t.checkpoint_every = val.get<int64_t>();
      else if (key == "val_frac")
        t.val_frac = val.get<double>();
      else if (key == "frozen_encoder")
        t.frozen_encoder = val.get<bool>();
      else if (key == "lambda1")
        c.lambda1 = val.get<double>();
      else if (key == "lambda2")
        c.lambda2 = val.get<double>();
      else if (key == "recon_target")
        c.recon_target = val.get<std::string>();
      else
        throw mmae::ConfigError(path + ": unknown key '" + key + "'");
    } catch (const nlohmann::json::type_error& e) {
      throw mmae::ConfigError(path + ": key '" + key + "': " + e.what());
    }
  }
}

inline nlohmann::json effective_json(const RunConfig& c) {
  const auto& t = c.train;
  return nlohmann::json{{"profile", c.profile},
                        {"seed", t.seed},
                        {"epochs", t.epochs},
                        {"steps", t.steps},
                        {"batch_size", t.batch_size},
                        {"base_lr", t.base_lr},
                        {"weight_decay", t.weight_decay},
                        {"warmup_frac", t.warmup_frac},
                        {"m_base", t.m_base},
                        {"m_final", t.m_final},
                        {"mask_ratio", t.r_rand},
                        {"hard_ratio_max", t.r_max},
                        {"mask_cap", t.mask_cap},
                        {"eta", t.eta},
                        {"rank_pairs", t.rank_pairs_per_seq},
                        {"checkpoint_every", t.checkpoint_every},
                        {"val_frac", t.val_frac},
                        {"frozen_encoder", t.frozen_encoder},
                        {"lambda1", c.lambda1},
                        {"lambda2", c.lambda2},
                        {"recon_target", c.recon_target}};
}

inline void write_effective_config(const std::string& path,
                                   const RunConfig& c) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw mmae::IoError("cannot open " + path + " for writing");
  out << effective_json(c).dump(2) << "\n";
}

}  // namespace mmaecli
