#include "mmae/mix/flowmix.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace mmae::mix {

double hard_ratio(int64_t t, int64_t t_total, double r_max) {
  if (t_total <= 0)
    throw RatioOutOfRange("hard_ratio: t_total must be positive");
  if (t < 0 || t > t_total)
    throw RatioOutOfRange("hard_ratio: epoch " + std::to_string(t) +
                          " outside [0, " + std::to_string(t_total) + "]");
  return r_max * static_cast<double>(t) / static_cast<double>(t_total);
}

MixMask build_mask(const std::vector<double>* difficulty, int64_t n_x,
                   double r_mask, double r_hard, Rng& rng, double eta) {
  if (!(eta > 1))
    throw RatioOutOfRange("eta must exceed 1, got " + std::to_string(eta));
  if (!(r_hard >= 0 && r_mask >= r_hard && r_mask <= 1))
    throw RatioOutOfRange("need 0 <= r_hard <= r_mask <= 1, got r_hard=" +
                          std::to_string(r_hard) + " r_mask=" +
                          std::to_string(r_mask));
  if (n_x <= 0) throw RatioOutOfRange("build_mask: n_x must be positive");
  if (difficulty && static_cast<int64_t>(difficulty->size()) != n_x)
    throw nn::ShapeMismatch("difficulty length " +
                            std::to_string(difficulty->size()) +
                            " does not match n_x " + std::to_string(n_x));

  MixMask out;
  out.r_mask = r_mask;
  out.r_hard = r_hard;
  out.r_rand = r_mask - r_hard;
  out.n_mask = static_cast<int64_t>(std::floor(n_x * r_mask));
  out.n_keep = n_x - out.n_mask;
  out.m.assign(static_cast<size_t>(n_x), 0);

  std::vector<double> noise(static_cast<size_t>(n_x));
  for (auto& v : noise) v = rng.uniform();

  if (difficulty) {
    int64_t k_hard = static_cast<int64_t>(std::floor(n_x * r_hard));
    if (k_hard > 0) {
      std::vector<int64_t> idx(static_cast<size_t>(n_x));
      std::iota(idx.begin(), idx.end(), 0);
      // stable sort keeps the lower index first among equal difficulties
      std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
        return (*difficulty)[static_cast<size_t>(a)] >
               (*difficulty)[static_cast<size_t>(b)];
      });
      idx.resize(static_cast<size_t>(k_hard));
      std::sort(idx.begin(), idx.end());
      out.hard_indices = idx;
      for (int64_t i : idx) noise[static_cast<size_t>(i)] += eta;
    }
  }

  std::vector<int64_t> order(static_cast<size_t>(n_x));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return noise[static_cast<size_t>(a)] < noise[static_cast<size_t>(b)];
  });
  for (int64_t i = out.n_keep; i < n_x; ++i)
    out.m[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
  return out;
}

void save_mask_rows(const std::string& path,
                    const std::vector<MixMask>& masks) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& mask : masks) {
    for (size_t i = 0; i < mask.m.size(); ++i) {
      if (i) out << ' ';
      out << static_cast<int>(mask.m[i]);
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace mmae::mix
