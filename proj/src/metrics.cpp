#include "dsai/metrics.hpp"

#include <string>

namespace dsai {

namespace {

void check_lengths(const std::vector<int>& preds, const std::vector<int>& truth) {
  if (preds.size() != truth.size()) {
    throw DataError("metric inputs differ in length: " + std::to_string(preds.size()) +
                    " predictions vs " + std::to_string(truth.size()) + " labels");
  }
  if (preds.empty()) throw DataError("metric inputs are empty");
}

}  // namespace

std::vector<std::size_t> confusion(const std::vector<int>& preds, const std::vector<int>& truth,
                                   std::size_t n_classes) {
  check_lengths(preds, truth);
  std::vector<std::size_t> counts(n_classes * n_classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], t = truth[i];
    if (p < 0 || t < 0 || static_cast<std::size_t>(p) >= n_classes ||
        static_cast<std::size_t>(t) >= n_classes) {
      throw DataError("label outside [0, " + std::to_string(n_classes) + ") at position " +
                      std::to_string(i));
    }
    ++counts[static_cast<std::size_t>(t) * n_classes + static_cast<std::size_t>(p)];
  }
  return counts;
}

Real accuracy(const std::vector<int>& preds, const std::vector<int>& truth) {
  check_lengths(preds, truth);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == truth[i];
  return static_cast<Real>(hits) / static_cast<Real>(preds.size());
}

Real weighted_f1(const std::vector<int>& preds, const std::vector<int>& truth,
                 std::size_t n_classes) {
  const auto counts = confusion(preds, truth, n_classes);
  const auto total = static_cast<Real>(preds.size());
  Real score = 0.0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::size_t tp = counts[c * n_classes + c], support = 0, predicted = 0;
    for (std::size_t j = 0; j < n_classes; ++j) {
      support += counts[c * n_classes + j];
      predicted += counts[j * n_classes + c];
    }
    if (support == 0) continue;
    const Real precision = predicted == 0 ? 0.0 : static_cast<Real>(tp) / static_cast<Real>(predicted);
    const Real recall = static_cast<Real>(tp) / static_cast<Real>(support);
    const Real f1 = precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
    score += (static_cast<Real>(support) / total) * f1;
  }
  return score;
}

}  // namespace dsai
