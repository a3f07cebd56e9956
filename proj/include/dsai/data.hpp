#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dsai/common.hpp"

namespace dsai {

// One labeled multichannel trial. The signal is channel-major (channel c
// occupies samples [c*samples, (c+1)*samples)) and is held in 64-bit form;
// files store it as 32-bit reals, so freshly loaded values are exactly
// float-representable.
struct EEGTrial {
  std::uint32_t subject = 0;
  std::uint32_t label = 0;
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<Real> signal;

  Real at(std::size_t channel, std::size_t t) const { return signal[channel * samples + t]; }
};

// A homogeneous collection of trials plus the dataset-level header fields.
struct TrialSet {
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::size_t n_classes = 0;
  Real sample_rate = 0.0;
  std::vector<EEGTrial> trials;

  std::vector<std::uint32_t> subject_ids() const;
};

// Binary trial container ("EEGT" magic, fixed header, then per-trial records
// of subject id, label, and channel-major little-endian 32-bit samples).
void save_trials(const std::string& path, const TrialSet& set);
TrialSet load_trials(const std::string& path);

// Channel-wise standardization in place: mean 0, standard deviation 1 per
// channel. Flat channels keep their centered zeros (the divisor is clamped
// to 1); the return value counts such channels so callers can report them.
std::size_t zscore(EEGTrial& trial);
std::size_t zscore(TrialSet& set);

// Cuts one long recording into fixed windows with fractional overlap. The
// stride is window*(1-overlap) rounded to whole samples and the trailing
// remainder is dropped.
std::vector<EEGTrial> segment(const EEGTrial& recording, std::size_t window, Real overlap);
TrialSet segment(const TrialSet& set, std::size_t window, Real overlap);

// One evaluation run: which subjects are trained on, validated on, and
// tested on. An empty validation list means validation trials are carved
// out of the training subjects' samples, label-stratified, at train time.
struct SplitRun {
  std::vector<std::uint32_t> train_subjects;
  std::vector<std::uint32_t> val_subjects;
  std::vector<std::uint32_t> test_subjects;
};

struct SplitManifest {
  std::string protocol;  // "loso" | "kfold"
  std::size_t folds = 0;
  std::uint64_t seed = 0;
  std::string val_mode;  // "subject" | "sample"
  Real val_fraction = 0.2;
  bool stratified = true;
  std::vector<SplitRun> runs;
};

// Builds the subject-disjoint evaluation runs. LOSO holds out each subject
// once for testing (validation happens at the sample level). kfold shuffles
// subjects into `folds` test folds and picks one of the remaining folds per
// run as the subject-level validation set.
SplitManifest make_splits(const std::vector<std::uint32_t>& subjects, const std::string& protocol,
                          std::size_t folds, std::uint64_t seed, Real val_fraction = 0.2);

// Structured-text form of a manifest; parse(serialize(m)) == m.
std::string serialize_manifest(const SplitManifest& m);
SplitManifest parse_manifest(const std::string& text);
void save_manifest(const std::string& path, const SplitManifest& m);
SplitManifest load_manifest(const std::string& path);

// Throws if any run has overlapping partitions or an empty train/test set.
void validate_manifest(const SplitManifest& m);

// Indices into set.trials whose subject is listed.
std::vector<std::size_t> trials_of(const TrialSet& set,
                                   const std::vector<std::uint32_t>& subjects);

// Label-stratified index split: per class, the first (1-fraction) share of
// a seeded shuffle goes left, the rest right. Every class with at least two
// members contributes to both sides.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    const std::vector<std::size_t>& indices, const std::vector<int>& labels, Real fraction,
    Rng& rng);

// Desk-scale benchmark generator: class k carries a unit-amplitude sinusoid
// at its class frequency on a class-specific channel block, on top of unit
// Gaussian noise. Subjects differ by a random gain in [0.5, 1.5] and a
// frequency jitter of up to +/-1 Hz. Labels are balanced per subject and
// samples are quantized to 32-bit reals so files reproduce byte-exactly.
TrialSet synth_generate(std::size_t n_subjects, std::size_t trials_per_subject, std::size_t channels,
                        std::size_t samples, std::size_t n_classes, std::uint64_t seed,
                        Real sample_rate = 250.0);

// The class frequencies and the channel block [k*width, (k+1)*width) that
// carries each class's sinusoid; channels past the last block stay pure
// noise so interpretability probes have a negative control.
Real synth_class_frequency(std::size_t k);
std::size_t synth_block_width(std::size_t channels, std::size_t n_classes);

// Matrix export (saliency vectors, attention maps): rows, cols, then
// row-major little-endian 32-bit reals.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> values;
};
void save_matrix(const std::string& path, const Matrix& m);
Matrix load_matrix(const std::string& path);

}  // namespace dsai
