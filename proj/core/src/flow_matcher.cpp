#include "mmae/match/flow_matcher.hpp"

#include <cmath>
#include <limits>

namespace mmae::match {

std::pair<int64_t, int64_t> argmax_2d(
    const std::vector<std::vector<double>>& s) {
  int64_t br = 0, bc = 0;
  double best = -std::numeric_limits<double>::infinity();
  bool seen = false;
  for (size_t r = 0; r < s.size(); ++r)
    for (size_t c = 0; c < s[r].size(); ++c) {
      if (!seen || s[r][c] > best) {
        best = s[r][c];
        br = static_cast<int64_t>(r);
        bc = static_cast<int64_t>(c);
        seen = true;
      }
    }
  return {br, bc};
}

std::vector<int64_t> build_pairs(const std::vector<std::vector<double>>& emb) {
  const int64_t b = static_cast<int64_t>(emb.size());
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  std::vector<std::vector<double>> rows(emb);
  for (auto& r : rows) {
    double n2 = 0;
    for (double v : r) n2 += v * v;
    if (n2 > 0) {
      double inv = 1.0 / std::sqrt(n2);
      for (double& v : r) v *= inv;
    }
  }
  std::vector<std::vector<double>> s(static_cast<size_t>(b),
                                     std::vector<double>(static_cast<size_t>(b)));
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < b; ++j) {
      if (i == j) {
        s[i][j] = kNegInf;
        continue;
      }
      double dot = 0;
      for (size_t k = 0; k < rows[i].size(); ++k) dot += rows[i][k] * rows[j][k];
      s[i][j] = dot;
    }

  std::vector<int64_t> p(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) p[static_cast<size_t>(i)] = i;

  for (int64_t step = 0; step < b / 2; ++step) {
    auto [r, c] = argmax_2d(s);
    if (s[r][c] == kNegInf) break;
    p[static_cast<size_t>(r)] = c;
    p[static_cast<size_t>(c)] = r;
    for (int64_t k = 0; k < b; ++k) {
      s[static_cast<size_t>(r)][static_cast<size_t>(k)] = kNegInf;
      s[static_cast<size_t>(c)][static_cast<size_t>(k)] = kNegInf;
      s[static_cast<size_t>(k)][static_cast<size_t>(r)] = kNegInf;
      s[static_cast<size_t>(k)][static_cast<size_t>(c)] = kNegInf;
    }
  }
  return p;
}

}  // namespace mmae::match
