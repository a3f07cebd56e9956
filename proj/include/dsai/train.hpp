#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dsai/config.hpp"
#include "dsai/data.hpp"
#include "dsai/model.hpp"
#include "dsai/param_store.hpp"

namespace dsai {

// Adam moments, aligned with the parameter order of one ParamStore.
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
};

// One bias-corrected Adam update over every parameter. The L2 weight-decay
// term is added to the gradient (coupled form); with decoupled = true the
// decay is applied directly to the weights instead. Gradients are zeroed
// afterwards.
void adam_step(ParamStore& store, AdamState& state, Real lr, Real weight_decay,
               bool decoupled = false, Real beta1 = 0.9, Real beta2 = 0.999, Real eps = 1e-8);

// Everything observed during one training run.
struct RunRecord {
  std::uint64_t seed = 0;
  std::size_t fold = 0;
  std::uint64_t config_hash = 0;
  std::vector<Real> train_loss;  // one entry per epoch
  std::vector<Real> val_acc;     // one entry per epoch
  std::size_t best_epoch = 0;
  Real test_acc = 0.0;
  Real test_f1 = 0.0;
};

// Class predictions for the listed trials, evaluated in inference mode.
std::vector<int> predict(const Model& model, const TrialSet& data,
                         const std::vector<std::size_t>& indices, std::size_t batch_size);

// Trains one model on one split run: shuffled mini-batches, Adam, per-epoch
// validation accuracy, best-validation checkpoint selection, one final test
// evaluation. An empty val_subjects list carves a label-stratified
// validation share out of each training subject's trials. When log is given,
// one structured line is appended per epoch plus one per finished run. When
// out_model is given it receives the selected model state.
RunRecord train_run(const Config& cfg, const TrialSet& data, const SplitRun& split,
                    std::uint64_t seed, std::size_t fold = 0, std::ostream* log = nullptr,
                    Model* out_model = nullptr);

// Seed for one (protocol seed value, fold) cell of the run grid. Exposed so
// external orchestrators reproduce run_protocol's records run for run.
std::uint64_t fold_seed(std::uint64_t seed_value, std::size_t fold);

// Aggregate over folds and seeds.
struct ProtocolSummary {
  std::vector<RunRecord> records;
  Real acc_mean = 0.0, acc_std = 0.0;
  Real f1_mean = 0.0, f1_std = 0.0;
};

// Mean and population standard deviation of the test metrics over records.
void summarize(ProtocolSummary& summary);

// Runs the configured protocol: for each seed value base_seed + s the split
// manifest is regenerated (so the k-fold validation fold is re-randomized
// per seed) and every run in it is trained. Per-fold seeds are derived from
// the seed value and the fold index.
ProtocolSummary run_protocol(const Config& cfg, const TrialSet& data, std::ostream* log = nullptr);

// Fixed-width text table of the summary plus the per-record lines.
std::string summary_table(const ProtocolSummary& summary);

// Raises ConfigError unless the dataset geometry (channels, samples after
// optional windowing, classes) matches the architecture.
void check_geometry(const Config& cfg, const TrialSet& data);

// Applies the [data] section: optional windowed segmentation, then optional
// channel-wise z-scoring. Returns the prepared copy.
TrialSet prepare_data(const Config& cfg, const TrialSet& data);

}  // namespace dsai
