#pragma once

#include <vector>

#include "dsai/common.hpp"

namespace dsai {

// Row-major K x K count matrix; rows index the true label, columns the
// prediction.
std::vector<std::size_t> confusion(const std::vector<int>& preds, const std::vector<int>& truth,
                                   std::size_t n_classes);

// Fraction of positions where prediction equals truth.
Real accuracy(const std::vector<int>& preds, const std::vector<int>& truth);

// Support-weighted mean of per-class F1 scores. Any 0/0 inside a class's
// precision, recall, or F1 resolves to 0; classes absent from the truth
// carry zero weight.
Real weighted_f1(const std::vector<int>& preds, const std::vector<int>& truth,
                 std::size_t n_classes);

}  // namespace dsai
