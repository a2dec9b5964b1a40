#pragma once

// Classification metrics over a confusion matrix. Zero-denominator classes
// contribute 0 to every averaged quantity.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmae::evalkit {

class EmptyMatrix : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConfusionMatrix {
  int k = 0;
  std::vector<int64_t> counts;  // k x k row-major; rows = true, cols = pred

  explicit ConfusionMatrix(int classes)
      : k(classes), counts(static_cast<size_t>(classes) * classes, 0) {}

  int64_t& at(int t, int p) { return counts[static_cast<size_t>(t) * k + p]; }
  int64_t at(int t, int p) const {
    return counts[static_cast<size_t>(t) * k + p];
  }
  int64_t total() const {
    int64_t n = 0;
    for (int64_t c : counts) n += c;
    return n;
  }

  static ConfusionMatrix from_predictions(const std::vector<int>& y_true,
                                          const std::vector<int>& y_pred,
                                          int k);
};

struct Metrics {
  double accuracy = 0;
  double macro_precision = 0;
  double macro_recall = 0;
  double weighted_precision = 0;
  double weighted_recall = 0;
  double weighted_f1 = 0;
};

// sum_i (n_i / N) * 2 P_i R_i / (P_i + R_i), with 0 where P_i + R_i == 0.
double weighted_f1(const ConfusionMatrix& cm);

Metrics basic_metrics(const ConfusionMatrix& cm);

std::string metrics_table(const Metrics& m);

void save_metrics_csv(const std::string& path, const Metrics& m);

}  // namespace mmae::evalkit
