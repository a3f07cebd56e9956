#include "dsai/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ostream>

#include <json.hpp>

#include "dsai/metrics.hpp"
#include "dsai/ops.hpp"

namespace dsai {

namespace {

using OrderedJson = nlohmann::ordered_json;

// Substream tags for the independent RNG lanes of one run.
constexpr std::uint64_t kInitStream = 0x1a17;
constexpr std::uint64_t kShuffleStream = 0x51f5;
constexpr std::uint64_t kDropoutStream = 0xd0a0;
constexpr std::uint64_t kValStream = 0x0a11;
constexpr std::uint64_t kFoldStream = 0xf01d;

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<Real>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

Tensor make_batch(const TrialSet& data, const std::vector<std::size_t>& indices,
                  std::size_t start, std::size_t count, std::vector<int>& labels) {
  const std::size_t c = data.channels, t = data.samples;
  Tensor x = Tensor::zeros({count, c, t});
  labels.clear();
  for (std::size_t b = 0; b < count; ++b) {
    const EEGTrial& trial = data.trials[indices[start + b]];
    std::memcpy(x.data() + b * c * t, trial.signal.data(), c * t * sizeof(Real));
    labels.push_back(static_cast<int>(trial.label));
  }
  return x;
}

std::vector<int> labels_at(const TrialSet& data, const std::vector<std::size_t>& indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(static_cast<int>(data.trials[i].label));
  return out;
}

}  // namespace

void adam_step(ParamStore& store, AdamState& state, Real lr, Real weight_decay, bool decoupled,
               Real beta1, Real beta2, Real eps) {
  const std::size_t n = store.params().size();
  if (state.m.size() != n) {
    state.m.assign(n, {});
    state.v.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
      state.m[i].assign(store.params()[i].second.size(), 0.0);
      state.v[i].assign(store.params()[i].second.size(), 0.0);
    }
  }
  ++state.step;
  const Real bc1 = 1.0 - std::pow(beta1, static_cast<Real>(state.step));
  const Real bc2 = 1.0 - std::pow(beta2, static_cast<Real>(state.step));
  for (std::size_t i = 0; i < n; ++i) {
    Tensor t = store.params()[i].second;
    if (!t.grad_allocated()) {
      throw ContractError("adam: parameter '" + store.params()[i].first + "' has no gradient");
    }
    Real* w = t.data();
    Real* g = t.grad();
    Real* m = state.m[i].data();
    Real* v = state.v[i].data();
    for (std::size_t j = 0; j < t.size(); ++j) {
      const Real grad = decoupled ? g[j] : g[j] + weight_decay * w[j];
      m[j] = beta1 * m[j] + (1.0 - beta1) * grad;
      v[j] = beta2 * v[j] + (1.0 - beta2) * grad * grad;
      const Real update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
      w[j] -= lr * (update + (decoupled ? weight_decay * w[j] : 0.0));
    }
  }
  store.zero_grads();
}

std::vector<int> predict(const Model& model, const TrialSet& data,
                         const std::vector<std::size_t>& indices, std::size_t batch_size) {
  std::vector<int> preds;
  preds.reserve(indices.size());
  const std::size_t k = model.config().n_classes;
  ForwardCtx ctx;
  std::vector<int> labels;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, indices.size() - start);
    Tensor logits = model.forward(make_batch(data, indices, start, count, labels), ctx);
    for (std::size_t b = 0; b < count; ++b) {
      const Real* row = logits.data() + b * k;
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (row[j] > row[best]) best = j;
      }
      preds.push_back(static_cast<int>(best));
    }
  }
  return preds;
}

void check_geometry(const Config& cfg, const TrialSet& data) {
  if (data.channels != cfg.arch.input_channels) {
    throw ConfigError("config expects " + std::to_string(cfg.arch.input_channels) +
                      " channels but the data has " + std::to_string(data.channels));
  }
  if (data.samples != cfg.arch.input_samples) {
    throw ConfigError("config expects " + std::to_string(cfg.arch.input_samples) +
                      " samples per trial but the data has " + std::to_string(data.samples));
  }
  if (data.n_classes != cfg.arch.n_classes) {
    throw ConfigError("config expects " + std::to_string(cfg.arch.n_classes) +
                      " classes but the data has " + std::to_string(data.n_classes));
  }
}

TrialSet prepare_data(const Config& cfg, const TrialSet& data) {
  TrialSet out = cfg.data.window > 0 ? segment(data, cfg.data.window, cfg.data.overlap) : data;
  if (cfg.data.zscore) zscore(out);
  return out;
}

RunRecord train_run(const Config& cfg, const TrialSet& data, const SplitRun& split,
                    std::uint64_t seed, std::size_t fold, std::ostream* log, Model* out_model) {
  validate(cfg);
  check_geometry(cfg, data);

  std::vector<std::size_t> train_idx, val_idx;
  if (split.val_subjects.empty()) {
    Rng val_rng(Rng::mix(seed, kValStream));
    for (std::uint32_t s : split.train_subjects) {
      const auto subject_idx = trials_of(data, {s});
      auto [left, right] =
          stratified_split(subject_idx, labels_at(data, subject_idx), cfg.train.val_fraction,
                           val_rng);
      train_idx.insert(train_idx.end(), left.begin(), left.end());
      val_idx.insert(val_idx.end(), right.begin(), right.end());
    }
  } else {
    train_idx = trials_of(data, split.train_subjects);
    val_idx = trials_of(data, split.val_subjects);
  }
  const std::vector<std::size_t> test_idx = trials_of(data, split.test_subjects);
  if (train_idx.empty()) throw ConfigError("training partition is empty");
  if (val_idx.empty()) throw ConfigError("validation partition is empty");
  if (test_idx.empty()) throw ConfigError("test partition is empty");

  Model model(cfg.arch, Rng::mix(seed, kInitStream));
  AdamState adam;
  Rng shuffle_rng(Rng::mix(seed, kShuffleStream));
  Rng dropout_rng(Rng::mix(seed, kDropoutStream));

  RunRecord rec;
  rec.seed = seed;
  rec.fold = fold;
  rec.config_hash = config_hash(cfg);
  const std::vector<int> val_truth = labels_at(data, val_idx);

  ParamStore best = model.params().clone();
  Real best_acc = -1.0;
  std::vector<int> labels;
  for (std::size_t epoch = 0; epoch < cfg.train.max_epochs; ++epoch) {
    shuffle(train_idx, shuffle_rng);
    Real loss_sum = 0.0;
    for (std::size_t start = 0; start < train_idx.size(); start += cfg.train.batch_size) {
      const std::size_t count = std::min(cfg.train.batch_size, train_idx.size() - start);
      Tensor x = make_batch(data, train_idx, start, count, labels);
      Tape tape;
      TapeScope scope(tape);
      ForwardCtx ctx;
      ctx.train = true;
      ctx.rng = &dropout_rng;
      Tensor loss = softmax_cross_entropy(model.forward(x, ctx), labels);
      loss_sum += loss.value() * static_cast<Real>(count);
      tape.backward(loss);
      adam_step(model.params(), adam, cfg.train.learning_rate, cfg.train.weight_decay,
                cfg.train.decoupled_decay);
    }
    rec.train_loss.push_back(loss_sum / static_cast<Real>(train_idx.size()));

    const Real val_acc =
        accuracy(predict(model, data, val_idx, cfg.train.batch_size), val_truth);
    rec.val_acc.push_back(val_acc);
    if (val_acc > best_acc) {
      best_acc = val_acc;
      rec.best_epoch = epoch;
      best.copy_values_from(model.params());
    }
    if (log) {
      OrderedJson line;
      line["event"] = "epoch";
      line["seed"] = seed;
      line["fold"] = fold;
      line["epoch"] = epoch;
      line["train_loss"] = rec.train_loss.back();
      line["val_acc"] = val_acc;
      *log << line.dump() << '\n';
    }
  }

  model.params().copy_values_from(best);
  const std::vector<int> preds = predict(model, data, test_idx, cfg.train.batch_size);
  const std::vector<int> truth = labels_at(data, test_idx);
  rec.test_acc = accuracy(preds, truth);
  rec.test_f1 = weighted_f1(preds, truth, cfg.arch.n_classes);
  if (log) {
    OrderedJson line;
    line["event"] = "run";
    line["seed"] = seed;
    line["fold"] = fold;
    line["config_hash"] = rec.config_hash;
    line["best_epoch"] = rec.best_epoch;
    line["test_acc"] = rec.test_acc;
    line["test_f1"] = rec.test_f1;
    *log << line.dump() << '\n';
  }
  if (out_model) *out_model = std::move(model);
  return rec;
}

std::uint64_t fold_seed(std::uint64_t seed_value, std::size_t fold) {
  return Rng::mix(seed_value, kFoldStream + fold);
}

void summarize(ProtocolSummary& summary) {
  const auto n = static_cast<Real>(summary.records.size());
  if (summary.records.empty()) return;
  Real acc = 0.0, f1 = 0.0;
  for (const RunRecord& r : summary.records) {
    acc += r.test_acc;
    f1 += r.test_f1;
  }
  summary.acc_mean = acc / n;
  summary.f1_mean = f1 / n;
  Real acc_var = 0.0, f1_var = 0.0;
  for (const RunRecord& r : summary.records) {
    acc_var += (r.test_acc - summary.acc_mean) * (r.test_acc - summary.acc_mean);
    f1_var += (r.test_f1 - summary.f1_mean) * (r.test_f1 - summary.f1_mean);
  }
  summary.acc_std = std::sqrt(acc_var / n);
  summary.f1_std = std::sqrt(f1_var / n);
}

ProtocolSummary run_protocol(const Config& cfg, const TrialSet& data, std::ostream* log) {
  validate(cfg);
  const TrialSet prepared = prepare_data(cfg, data);
  check_geometry(cfg, prepared);
  ProtocolSummary summary;
  const std::vector<std::uint32_t> subjects = prepared.subject_ids();
  for (std::size_t s = 0; s < cfg.train.seeds; ++s) {
    const std::uint64_t seed_value = cfg.train.base_seed + s;
    const SplitManifest manifest = make_splits(subjects, cfg.train.protocol, cfg.train.folds,
                                               seed_value, cfg.train.val_fraction);
    for (std::size_t f = 0; f < manifest.runs.size(); ++f) {
      summary.records.push_back(
          train_run(cfg, prepared, manifest.runs[f], fold_seed(seed_value, f), f, log));
    }
  }
  summarize(summary);
  return summary;
}

std::string summary_table(const ProtocolSummary& summary) {
  std::string out = "fold  seed                  test_acc  test_f1  best_epoch\n";
  char buf[128];
  for (const RunRecord& r : summary.records) {
    std::snprintf(buf, sizeof(buf), "%-4zu  %-20llu  %.4f    %.4f   %zu\n", r.fold,
                  static_cast<unsigned long long>(r.seed), r.test_acc, r.test_f1, r.best_epoch);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "mean  acc %.4f +/- %.4f   f1 %.4f +/- %.4f   (%zu runs)\n",
                summary.acc_mean, summary.acc_std, summary.f1_mean, summary.f1_std,
                summary.records.size());
  out += buf;
  return out;
}

}  // namespace dsai
