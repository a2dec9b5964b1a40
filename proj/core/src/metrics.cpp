#include "mmae/eval/metrics.hpp"

#include <fstream>
#include <sstream>

#include "mmae/common.hpp"

namespace mmae::evalkit {

ConfusionMatrix ConfusionMatrix::from_predictions(
    const std::vector<int>& y_true, const std::vector<int>& y_pred, int k) {
  if (y_true.size() != y_pred.size())
    throw std::invalid_argument("prediction/label count mismatch");
  ConfusionMatrix cm(k);
  for (size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] < 0 || y_true[i] >= k || y_pred[i] < 0 || y_pred[i] >= k)
      throw std::invalid_argument("class index out of range");
    ++cm.at(y_true[i], y_pred[i]);
  }
  return cm;
}

namespace {

struct PerClass {
  std::vector<double> precision, recall, f1, weight;
};

PerClass per_class(const ConfusionMatrix& cm) {
  int64_t n = cm.total();
  if (n == 0) throw EmptyMatrix("confusion matrix has no observations");
  PerClass pc;
  pc.precision.resize(cm.k);
  pc.recall.resize(cm.k);
  pc.f1.resize(cm.k);
  pc.weight.resize(cm.k);
  for (int i = 0; i < cm.k; ++i) {
    int64_t row = 0, col = 0;
    for (int j = 0; j < cm.k; ++j) {
      row += cm.at(i, j);
      col += cm.at(j, i);
    }
    double tp = static_cast<double>(cm.at(i, i));
    pc.precision[i] = col > 0 ? tp / static_cast<double>(col) : 0.0;
    pc.recall[i] = row > 0 ? tp / static_cast<double>(row) : 0.0;
    double pr = pc.precision[i] + pc.recall[i];
    pc.f1[i] = pr > 0 ? 2.0 * pc.precision[i] * pc.recall[i] / pr : 0.0;
    pc.weight[i] = static_cast<double>(row) / static_cast<double>(n);
  }
  return pc;
}

}  // namespace

double weighted_f1(const ConfusionMatrix& cm) {
  PerClass pc = per_class(cm);
  double f1 = 0;
  for (int i = 0; i < cm.k; ++i) f1 += pc.weight[i] * pc.f1[i];
  return f1;
}

Metrics basic_metrics(const ConfusionMatrix& cm) {
  int64_t n = cm.total();
  PerClass pc = per_class(cm);
  Metrics m;
  int64_t correct = 0;
  for (int i = 0; i < cm.k; ++i) correct += cm.at(i, i);
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  for (int i = 0; i < cm.k; ++i) {
    m.macro_precision += pc.precision[i] / cm.k;
    m.macro_recall += pc.recall[i] / cm.k;
    m.weighted_precision += pc.weight[i] * pc.precision[i];
    m.weighted_recall += pc.weight[i] * pc.recall[i];
    m.weighted_f1 += pc.weight[i] * pc.f1[i];
  }
  return m;
}

std::string metrics_table(const Metrics& m) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  os << "accuracy            " << m.accuracy << '\n'
     << "macro precision     " << m.macro_precision << '\n'
     << "macro recall        " << m.macro_recall << '\n'
     << "weighted precision  " << m.weighted_precision << '\n'
     << "weighted recall     " << m.weighted_recall << '\n'
     << "weighted F1         " << m.weighted_f1 << '\n';
  return os.str();
}

void save_metrics_csv(const std::string& path, const Metrics& m) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.precision(10);
  f << "accuracy,macro_precision,macro_recall,weighted_precision,"
       "weighted_recall,weighted_f1\n";
  f << m.accuracy << ',' << m.macro_precision << ',' << m.macro_recall << ','
    << m.weighted_precision << ',' << m.weighted_recall << ','
    << m.weighted_f1 << '\n';
  if (!f) throw IoError("write failed for " + path);
}

}  // namespace mmae::evalkit
