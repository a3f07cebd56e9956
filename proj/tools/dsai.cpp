// Operator tool: train/evaluate/inspect models, generate synthetic trial
// files, build split manifests, and export interpretability matrices.

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsai/config.hpp"
#include "dsai/data.hpp"
#include "dsai/metrics.hpp"
#include "dsai/model.hpp"
#include "dsai/train.hpp"

namespace fs = std::filesystem;
using OrderedJson = nlohmann::ordered_json;

namespace {

// Shared --config / --set handling. Overrides apply on top of the file (or
// the built-in defaults when no file is given), in command-line order.
struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", config_path, "Config file (sectioned key = value text)")
        ->check(CLI::ExistingFile);
    cmd.add_option("--set", overrides,
                   "Override one config key, e.g. --set arch.embed_dim=40 (repeatable)");
  }

  dsai::Config build() const {
    dsai::Config cfg;
    if (!config_path.empty()) cfg = dsai::load_config_file(config_path);
    for (const std::string& assignment : overrides) dsai::apply_override(cfg, assignment);
    dsai::validate(cfg);
    return cfg;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw dsai::DataError("cannot write " + path.string());
  out << text;
}

std::vector<std::size_t> all_indices(const dsai::TrialSet& set) {
  std::vector<std::size_t> idx(set.trials.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

dsai::Tensor trial_batch(const dsai::TrialSet& set, const std::vector<std::size_t>& indices,
                         std::size_t start, std::size_t count, std::vector<int>& labels) {
  dsai::Tensor x = dsai::Tensor::zeros({count, set.channels, set.samples});
  labels.clear();
  for (std::size_t b = 0; b < count; ++b) {
    const dsai::EEGTrial& t = set.trials[indices[start + b]];
    std::copy(t.signal.begin(), t.signal.end(), x.data() + b * set.channels * set.samples);
    labels.push_back(static_cast<int>(t.label));
  }
  return x;
}

// Loads a checkpoint and the trial file, applies the checkpoint's own data
// section, and verifies the geometry before anything touches the model.
struct EvalSetup {
  dsai::LoadedModel loaded;
  dsai::TrialSet data;
};

EvalSetup load_for_eval(const std::string& checkpoint, const std::string& data_path) {
  EvalSetup s{dsai::load_checkpoint(checkpoint), {}};
  s.data = dsai::prepare_data(s.loaded.config, dsai::load_trials(data_path));
  dsai::check_geometry(s.loaded.config, s.data);
  return s;
}

int cmd_gen_data(const std::string& out, std::size_t subjects, std::size_t trials,
                 std::size_t channels, std::size_t samples, std::size_t classes,
                 std::uint64_t seed, double rate) {
  const dsai::TrialSet set =
      dsai::synth_generate(subjects, trials, channels, samples, classes, seed, rate);
  dsai::save_trials(out, set);
  std::cout << "wrote " << set.trials.size() << " trials (" << subjects << " subjects, "
            << channels << " ch x " << samples << " samples, " << classes << " classes) to "
            << out << "\n";
  return 0;
}

int cmd_split(const std::string& data_path, std::size_t n_subjects, const std::string& protocol,
              std::size_t folds, std::uint64_t seed, double val_fraction,
              const std::string& out) {
  std::vector<std::uint32_t> subjects;
  if (!data_path.empty()) {
    subjects = dsai::load_trials(data_path).subject_ids();
  } else if (n_subjects > 0) {
    for (std::uint32_t s = 0; s < n_subjects; ++s) subjects.push_back(s);
  } else {
    throw dsai::ConfigError("split needs --data or --subjects");
  }
  const dsai::SplitManifest manifest =
      dsai::make_splits(subjects, protocol, folds, seed, val_fraction);
  dsai::save_manifest(out, manifest);
  std::cout << "wrote " << manifest.runs.size() << "-run " << protocol << " manifest for "
            << subjects.size() << " subjects to " << out << "\n";
  return 0;
}

int cmd_inspect(const ConfigArgs& args) {
  const dsai::Config cfg = args.build();
  const dsai::Model model(cfg.arch, 0);
  std::cout << "parameters: " << model.parameter_count() << "\n";
  std::cout << "macs: " << model.mac_count() << "\n";
  std::cout << "mac_convention: " << dsai::Model::mac_convention() << "\n";
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(dsai::config_hash(cfg)));
  std::cout << "config_hash: " << hash << "\n";
  return 0;
}

int cmd_train(const ConfigArgs& args, const std::string& data_path, const std::string& out_dir,
              std::size_t workers) {
  const dsai::Config cfg = args.build();
  fs::create_directories(out_dir);

  const dsai::TrialSet prepared = dsai::prepare_data(cfg, dsai::load_trials(data_path));
  dsai::check_geometry(cfg, prepared);
  const std::vector<std::uint32_t> subjects = prepared.subject_ids();

  struct Job {
    std::uint64_t seed_value = 0;
    std::size_t fold = 0;
    dsai::SplitRun run;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < cfg.train.seeds; ++s) {
    const std::uint64_t seed_value = cfg.train.base_seed + s;
    const dsai::SplitManifest manifest = dsai::make_splits(
        subjects, cfg.train.protocol, cfg.train.folds, seed_value, cfg.train.val_fraction);
    dsai::save_manifest(
        (fs::path(out_dir) / ("manifest_seed" + std::to_string(seed_value) + ".txt")).string(),
        manifest);
    for (std::size_t f = 0; f < manifest.runs.size(); ++f) {
      jobs.push_back({seed_value, f, manifest.runs[f]});
    }
  }

  std::vector<dsai::RunRecord> records(jobs.size());
  std::vector<std::string> logs(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto run_jobs = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        const Job& job = jobs[i];
        std::ostringstream log;
        dsai::Model picked(cfg.arch, 0);
        records[i] = dsai::train_run(cfg, prepared, job.run,
                                     dsai::fold_seed(job.seed_value, job.fold), job.fold, &log,
                                     &picked);
        const std::string name = "ckpt_s" + std::to_string(job.seed_value) + "_f" +
                                 std::to_string(job.fold) + ".bin";
        dsai::save_checkpoint((fs::path(out_dir) / name).string(), cfg, picked.params());
        logs[i] = log.str();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };

  if (workers <= 1) {
    run_jobs();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, jobs.size()); ++w) {
      pool.emplace_back(run_jobs);
    }
    for (std::thread& t : pool) t.join();
  }
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  dsai::ProtocolSummary summary;
  summary.records = std::move(records);
  dsai::summarize(summary);

  const std::string config_text = dsai::serialize_config(cfg);
  std::ofstream log_file(fs::path(out_dir) / "run_log.jsonl", std::ios::binary);
  OrderedJson header;
  header["event"] = "config";
  header["hash"] = dsai::config_hash(cfg);
  header["config"] = config_text;
  log_file << header.dump() << "\n";
  for (const std::string& chunk : logs) log_file << chunk;
  OrderedJson tail;
  tail["event"] = "summary";
  tail["runs"] = summary.records.size();
  tail["acc_mean"] = summary.acc_mean;
  tail["acc_std"] = summary.acc_std;
  tail["f1_mean"] = summary.f1_mean;
  tail["f1_std"] = summary.f1_std;
  log_file << tail.dump() << "\n";

  const std::string table = dsai::summary_table(summary);
  write_text(fs::path(out_dir) / "config.ini", config_text);
  write_text(fs::path(out_dir) / "summary.txt", table);
  std::cout << table;
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path,
             std::size_t batch_size) {
  const EvalSetup s = load_for_eval(checkpoint, data_path);
  const std::vector<std::size_t> idx = all_indices(s.data);
  if (idx.empty()) throw dsai::DataError("trial file holds no trials");
  const std::vector<int> preds = dsai::predict(s.loaded.model, s.data, idx, batch_size);
  std::vector<int> truth;
  for (std::size_t i : idx) truth.push_back(static_cast<int>(s.data.trials[i].label));
  std::cout << "trials: " << idx.size() << "\n";
  std::printf("accuracy: %.6f\n", dsai::accuracy(preds, truth));
  std::printf("weighted_f1: %.6f\n",
              dsai::weighted_f1(preds, truth, s.data.n_classes));
  return 0;
}

int cmd_saliency(const std::string& checkpoint, const std::string& data_path,
                 const std::string& out, std::size_t batch_size) {
  const EvalSetup s = load_for_eval(checkpoint, data_path);
  const std::vector<std::size_t> idx = all_indices(s.data);
  if (idx.empty()) throw dsai::DataError("trial file holds no trials");

  std::vector<dsai::Real> total(s.data.channels, 0.0);
  std::vector<int> labels;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, idx.size() - start);
    const dsai::Tensor x = trial_batch(s.data, idx, start, count, labels);
    const std::vector<dsai::Real> sal = s.loaded.model.saliency(x, labels);
    for (std::size_t c = 0; c < total.size(); ++c) {
      total[c] += sal[c] * static_cast<dsai::Real>(count);
    }
  }
  dsai::Matrix m;
  m.rows = s.data.channels;
  m.cols = 1;
  for (dsai::Real v : total) m.values.push_back(v / static_cast<dsai::Real>(idx.size()));
  dsai::save_matrix(out, m);
  std::cout << "wrote per-channel saliency (" << m.rows << " channels, " << idx.size()
            << " trials) to " << out << "\n";
  return 0;
}

int cmd_attn_export(const std::string& checkpoint, const std::string& data_path,
                    std::size_t trial, const std::string& out_dir) {
  const EvalSetup s = load_for_eval(checkpoint, data_path);
  if (trial >= s.data.trials.size()) {
    throw dsai::DataError("trial index " + std::to_string(trial) + " out of range (file holds " +
                          std::to_string(s.data.trials.size()) + ")");
  }
  fs::create_directories(out_dir);

  const dsai::EEGTrial& t = s.data.trials[trial];
  dsai::Tensor x = dsai::Tensor::from_data({t.channels, t.samples},
                                           std::vector<dsai::Real>(t.signal), false);
  dsai::ForwardCapture capture;
  dsai::ForwardCtx ctx;
  ctx.capture = &capture;
  s.loaded.model.forward_trial(x, ctx);

  for (const dsai::AttentionMapRecord& rec : capture.attention) {
    dsai::Matrix m;
    m.rows = rec.rows;
    m.cols = rec.cols;
    m.values = rec.weights;
    const std::string name = "attn_" + rec.family + "_l" + std::to_string(rec.layer) + "_h" +
                             std::to_string(rec.head) + ".mat";
    dsai::save_matrix((fs::path(out_dir) / name).string(), m);
  }
  for (const dsai::AggWeightRecord& rec : capture.aggregation) {
    dsai::Matrix m;
    m.rows = 1;
    m.cols = rec.weights.size();
    m.values = rec.weights;
    dsai::save_matrix((fs::path(out_dir) / ("agg_" + rec.branch + ".mat")).string(), m);
  }
  std::cout << "wrote " << capture.attention.size() << " attention maps and "
            << capture.aggregation.size() << " aggregation vectors to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-scale attentive EEG decoder"};
  app.require_subcommand(1);

  ConfigArgs train_cfg, inspect_cfg;
  std::string data_path, out_path, checkpoint;
  std::size_t workers = 1, batch_size = 32, trial_index = 0;

  CLI::App* train = app.add_subcommand("train", "Run the configured protocol over seeds and folds");
  train_cfg.attach(*train);
  train->add_option("--data", data_path, "Trial file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_path, "Output directory for checkpoints, logs, and the summary")
      ->required();
  train->add_option("--workers", workers, "Parallel workers over the seed x fold grid")
      ->check(CLI::PositiveNumber);
  // Shortcuts for the most-edited keys; anything else goes through --set.
  std::vector<std::pair<const char*, const char*>> shortcuts = {
      {"--seeds", "train.seeds"},           {"--base-seed", "train.base_seed"},
      {"--epochs", "train.max_epochs"},     {"--batch", "train.batch_size"},
      {"--lr", "train.learning_rate"},      {"--protocol", "train.protocol"},
      {"--folds", "train.folds"},           {"--val-fraction", "train.val_fraction"},
      {"--window", "data.window"},          {"--overlap", "data.overlap"},
      {"--zscore", "data.zscore"},
  };
  for (const auto& [flag, key] : shortcuts) {
    const std::string target(key);
    train
        ->add_option_function<std::string>(
            flag, [&train_cfg, target](const std::string& v) {
              train_cfg.overrides.push_back(target + "=" + v);
            },
            std::string("Sets ") + key)
        ->type_name("VALUE");
  }
  train->callback([&]() { cmd_train(train_cfg, data_path, out_path, workers); });

  CLI::App* eval = app.add_subcommand("eval", "Score a checkpoint on a trial file");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--data", data_path, "Trial file")->required()->check(CLI::ExistingFile);
  eval->add_option("--batch", batch_size, "Evaluation batch size")->check(CLI::PositiveNumber);
  eval->callback([&]() { cmd_eval(checkpoint, data_path, batch_size); });

  CLI::App* inspect = app.add_subcommand("inspect", "Report parameter and multiply counts");
  inspect_cfg.attach(*inspect);
  inspect->callback([&]() { cmd_inspect(inspect_cfg); });

  CLI::App* saliency = app.add_subcommand("saliency", "Export per-channel input-gradient saliency");
  saliency->add_option("--checkpoint", checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  saliency->add_option("--data", data_path, "Trial file")->required()->check(CLI::ExistingFile);
  saliency->add_option("--out", out_path, "Output matrix file")->required();
  saliency->add_option("--batch", batch_size, "Batch size")->check(CLI::PositiveNumber);
  saliency->callback([&]() { cmd_saliency(checkpoint, data_path, out_path, batch_size); });

  CLI::App* attn = app.add_subcommand("attn-export", "Export attention maps for one trial");
  attn->add_option("--checkpoint", checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  attn->add_option("--data", data_path, "Trial file")->required()->check(CLI::ExistingFile);
  attn->add_option("--trial", trial_index, "Trial index within the file");
  attn->add_option("--out", out_path, "Output directory")->required();
  attn->callback([&]() { cmd_attn_export(checkpoint, data_path, trial_index, out_path); });

  std::size_t subjects = 12, trials = 100, channels = 8, samples = 500, classes = 2;
  std::uint64_t seed = 0;
  double rate = 250.0;
  CLI::App* gen = app.add_subcommand("gen-data", "Synthesize a class-coded trial file");
  gen->add_option("--out", out_path, "Output trial file")->required();
  gen->add_option("--subjects", subjects, "Subject count");
  gen->add_option("--trials", trials, "Trials per subject");
  gen->add_option("--channels", channels, "Channel count");
  gen->add_option("--samples", samples, "Samples per trial");
  gen->add_option("--classes", classes, "Class count");
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--rate", rate, "Sample rate in Hz");
  gen->callback([&]() {
    cmd_gen_data(out_path, subjects, trials, channels, samples, classes, seed, rate);
  });

  std::string protocol = "loso";
  std::size_t n_subjects = 0, folds = 4;
  double val_fraction = 0.2;
  CLI::App* split = app.add_subcommand("split", "Build a cross-validation manifest");
  split->add_option("--data", data_path, "Trial file to read subject ids from")
      ->check(CLI::ExistingFile);
  split->add_option("--subjects", n_subjects, "Subject count (ids 0..n-1) instead of --data");
  split->add_option("--protocol", protocol, "loso or kfold");
  split->add_option("--k,--folds", folds, "Fold count for kfold");
  split->add_option("--seed", seed, "Shuffle seed");
  split->add_option("--val-fraction", val_fraction, "Held-out validation share");
  split->add_option("--out", out_path, "Output manifest file")->required();
  split->callback(
      [&]() { cmd_split(data_path, n_subjects, protocol, folds, seed, val_fraction, out_path); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
