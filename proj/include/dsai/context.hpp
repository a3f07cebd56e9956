#pragma once

#include <string>
#include <vector>

#include "dsai/common.hpp"

namespace dsai {

// One attention-probability matrix as captured during a forward pass,
// recorded before attention dropout so rows are exactly stochastic.
struct AttentionMapRecord {
  std::string family;  // intra_fine | intra_coarse | cross_fine | cross_coarse
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t batch = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> weights;  // rows*cols, row-major
};

// Token-aggregation weights for one batch element of one branch.
struct AggWeightRecord {
  std::string branch;  // fine | coarse
  std::size_t batch = 0;
  std::vector<Real> weights;
};

struct ForwardCapture {
  std::vector<AttentionMapRecord> attention;
  std::vector<AggWeightRecord> aggregation;
};

// Per-call forward options. rng is required when train is set and the model
// has a nonzero dropout rate; capture, when non-null, collects attention and
// aggregation weights.
struct ForwardCtx {
  bool train = false;
  Rng* rng = nullptr;
  ForwardCapture* capture = nullptr;
};

}  // namespace dsai
