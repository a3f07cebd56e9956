#include "dsai/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace dsai {

namespace {

constexpr char kTrialMagic[4] = {'E', 'E', 'G', 'T'};
constexpr std::uint32_t kTrialVersion = 1;
constexpr Real kTwoPi = 6.283185307179586476925286766559;

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw DataError(std::string("truncated file while reading ") + what);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

float get_f32(std::istream& in, const char* what) {
  const std::uint32_t v = get_u32(in, what);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

std::string real_str(Real v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void append_ids(std::string& out, const char* key, const std::vector<std::uint32_t>& ids) {
  out += key;
  out += " =";
  for (std::uint32_t id : ids) {
    out += ' ';
    out += std::to_string(id);
  }
  out += '\n';
}

std::vector<std::uint32_t> parse_ids(const std::string& value, std::size_t line_no) {
  std::vector<std::uint32_t> ids;
  std::istringstream in(value);
  std::string tok;
  while (in >> tok) {
    std::uint32_t id = 0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), id);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
      throw DataError("manifest line " + std::to_string(line_no) + ": bad subject id '" + tok +
                      "'");
    }
    ids.push_back(id);
  }
  return ids;
}

}  // namespace

std::vector<std::uint32_t> TrialSet::subject_ids() const {
  std::set<std::uint32_t> ids;
  for (const EEGTrial& t : trials) ids.insert(t.subject);
  return {ids.begin(), ids.end()};
}

void save_trials(const std::string& path, const TrialSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(kTrialMagic, 4);
  put_u32(out, kTrialVersion);
  put_u32(out, static_cast<std::uint32_t>(set.channels));
  put_u32(out, static_cast<std::uint32_t>(set.samples));
  put_u32(out, static_cast<std::uint32_t>(set.trials.size()));
  put_u32(out, static_cast<std::uint32_t>(set.n_classes));
  put_f32(out, static_cast<float>(set.sample_rate));
  for (std::size_t i = 0; i < set.trials.size(); ++i) {
    const EEGTrial& t = set.trials[i];
    if (t.channels != set.channels || t.samples != set.samples ||
        t.signal.size() != set.channels * set.samples) {
      throw DataError("trial " + std::to_string(i) + " does not match the header geometry");
    }
    if (t.label >= set.n_classes) {
      throw DataError("trial " + std::to_string(i) + " has label " + std::to_string(t.label) +
                      " outside [0, " + std::to_string(set.n_classes) + ")");
    }
    put_u32(out, t.subject);
    put_u32(out, t.label);
    for (Real v : t.signal) {
      if (!std::isfinite(v)) {
        throw DataError("trial " + std::to_string(i) + " contains a non-finite sample");
      }
      put_f32(out, static_cast<float>(v));
    }
  }
  if (!out) throw DataError("write to '" + path + "' failed");
}

TrialSet load_trials(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kTrialMagic, 4) != 0) {
    throw DataError("'" + path + "' is not a trial container (bad magic)");
  }
  const std::uint32_t version = get_u32(in, "version");
  if (version != kTrialVersion) {
    throw DataError("unsupported trial container version " + std::to_string(version));
  }
  TrialSet set;
  set.channels = get_u32(in, "channel count");
  set.samples = get_u32(in, "sample count");
  const std::uint32_t n_trials = get_u32(in, "trial count");
  set.n_classes = get_u32(in, "class count");
  set.sample_rate = get_f32(in, "sample rate");
  set.trials.resize(n_trials);
  const std::size_t per_trial = set.channels * set.samples;
  for (std::uint32_t i = 0; i < n_trials; ++i) {
    EEGTrial& t = set.trials[i];
    t.subject = get_u32(in, "subject id");
    t.label = get_u32(in, "label");
    if (t.label >= set.n_classes) {
      throw DataError("trial " + std::to_string(i) + " has label " + std::to_string(t.label) +
                      " outside [0, " + std::to_string(set.n_classes) + ")");
    }
    t.channels = set.channels;
    t.samples = set.samples;
    t.signal.resize(per_trial);
    for (std::size_t j = 0; j < per_trial; ++j) {
      t.signal[j] = static_cast<Real>(get_f32(in, "samples"));
      if (!std::isfinite(t.signal[j])) {
        throw DataError("trial " + std::to_string(i) + " contains a non-finite sample");
      }
    }
  }
  return set;
}

std::size_t zscore(EEGTrial& trial) {
  std::size_t clamped = 0;
  for (std::size_t c = 0; c < trial.channels; ++c) {
    Real* ch = trial.signal.data() + c * trial.samples;
    const Real n = static_cast<Real>(trial.samples);
    Real mean = 0.0;
    for (std::size_t t = 0; t < trial.samples; ++t) mean += ch[t];
    mean /= n;
    Real var = 0.0;
    for (std::size_t t = 0; t < trial.samples; ++t) var += (ch[t] - mean) * (ch[t] - mean);
    Real stdev = std::sqrt(var / n);
    if (stdev < 1e-12) {
      stdev = 1.0;
      ++clamped;
    }
    for (std::size_t t = 0; t < trial.samples; ++t) ch[t] = (ch[t] - mean) / stdev;
  }
  return clamped;
}

std::size_t zscore(TrialSet& set) {
  std::size_t clamped = 0;
  for (EEGTrial& t : set.trials) clamped += zscore(t);
  return clamped;
}

std::vector<EEGTrial> segment(const EEGTrial& recording, std::size_t window, Real overlap) {
  if (overlap < 0.0 || overlap >= 1.0) {
    throw ConfigError("overlap must be in [0, 1), got " + real_str(overlap));
  }
  if (window == 0) throw ConfigError("window must be positive");
  if (window > recording.samples) {
    throw ConfigError("window " + std::to_string(window) + " exceeds the recording length " +
                      std::to_string(recording.samples));
  }
  const auto stride = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(static_cast<Real>(window) * (1.0 - overlap))));
  const std::size_t count = (recording.samples - window) / stride + 1;
  std::vector<EEGTrial> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    EEGTrial& seg = out[i];
    seg.subject = recording.subject;
    seg.label = recording.label;
    seg.channels = recording.channels;
    seg.samples = window;
    seg.signal.resize(recording.channels * window);
    const std::size_t start = i * stride;
    for (std::size_t c = 0; c < recording.channels; ++c) {
      std::memcpy(seg.signal.data() + c * window,
                  recording.signal.data() + c * recording.samples + start,
                  window * sizeof(Real));
    }
  }
  return out;
}

TrialSet segment(const TrialSet& set, std::size_t window, Real overlap) {
  TrialSet out;
  out.channels = set.channels;
  out.samples = window;
  out.n_classes = set.n_classes;
  out.sample_rate = set.sample_rate;
  for (const EEGTrial& t : set.trials) {
    for (EEGTrial& seg : segment(t, window, overlap)) out.trials.push_back(std::move(seg));
  }
  return out;
}

SplitManifest make_splits(const std::vector<std::uint32_t>& subjects, const std::string& protocol,
                          std::size_t folds, std::uint64_t seed, Real val_fraction) {
  std::vector<std::uint32_t> ids(subjects);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.empty()) throw ConfigError("cannot split an empty subject list");

  SplitManifest m;
  m.protocol = protocol;
  m.seed = seed;
  m.val_fraction = val_fraction;
  if (protocol == "loso") {
    if (ids.size() < 2) throw ConfigError("LOSO needs at least 2 subjects");
    m.folds = ids.size();
    m.val_mode = "sample";
    for (std::uint32_t held_out : ids) {
      SplitRun run;
      run.test_subjects = {held_out};
      for (std::uint32_t s : ids) {
        if (s != held_out) run.train_subjects.push_back(s);
      }
      m.runs.push_back(std::move(run));
    }
  } else if (protocol == "kfold") {
    if (folds < 2) throw ConfigError("kfold needs at least 2 folds");
    if (folds > ids.size()) {
      throw ConfigError("cannot make " + std::to_string(folds) + " folds from " +
                        std::to_string(ids.size()) + " subjects");
    }
    m.folds = folds;
    m.val_mode = "subject";
    Rng rng(Rng::mix(seed, 0x5b17));
    std::vector<std::uint32_t> order(ids);
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<Real>(i));
      std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }
    std::vector<std::vector<std::uint32_t>> fold_members(folds);
    for (std::size_t i = 0; i < order.size(); ++i) fold_members[i % folds].push_back(order[i]);

    for (std::size_t test_fold = 0; test_fold < folds; ++test_fold) {
      auto pick = static_cast<std::size_t>(rng.uniform() * static_cast<Real>(folds - 1));
      pick = std::min(pick, folds - 2);
      const std::size_t val_fold = pick < test_fold ? pick : pick + 1;
      SplitRun run;
      for (std::size_t f = 0; f < folds; ++f) {
        auto& dst = f == test_fold   ? run.test_subjects
                    : f == val_fold ? run.val_subjects
                                    : run.train_subjects;
        dst.insert(dst.end(), fold_members[f].begin(), fold_members[f].end());
      }
      std::sort(run.train_subjects.begin(), run.train_subjects.end());
      std::sort(run.val_subjects.begin(), run.val_subjects.end());
      std::sort(run.test_subjects.begin(), run.test_subjects.end());
      m.runs.push_back(std::move(run));
    }
  } else {
    throw ConfigError("unknown split protocol '" + protocol + "'");
  }
  validate_manifest(m);
  return m;
}

std::string serialize_manifest(const SplitManifest& m) {
  std::string out;
  out += "protocol = " + m.protocol + "\n";
  out += "folds = " + std::to_string(m.folds) + "\n";
  out += "seed = " + std::to_string(m.seed) + "\n";
  out += "val_mode = " + m.val_mode + "\n";
  out += "val_fraction = " + real_str(m.val_fraction) + "\n";
  out += std::string("stratified = ") + (m.stratified ? "true" : "false") + "\n";
  for (std::size_t i = 0; i < m.runs.size(); ++i) {
    out += "run = " + std::to_string(i) + "\n";
    append_ids(out, "train", m.runs[i].train_subjects);
    append_ids(out, "val", m.runs[i].val_subjects);
    append_ids(out, "test", m.runs[i].test_subjects);
  }
  return out;
}

SplitManifest parse_manifest(const std::string& text) {
  SplitManifest m;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  SplitRun* current = nullptr;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "protocol") {
      m.protocol = value;
    } else if (key == "folds") {
      m.folds = std::stoul(value);
    } else if (key == "seed") {
      m.seed = std::stoull(value);
    } else if (key == "val_mode") {
      m.val_mode = value;
    } else if (key == "val_fraction") {
      m.val_fraction = std::stod(value);
    } else if (key == "stratified") {
      m.stratified = value == "true";
    } else if (key == "run") {
      m.runs.emplace_back();
      current = &m.runs.back();
    } else if (key == "train" || key == "val" || key == "test") {
      if (!current) {
        throw DataError("manifest line " + std::to_string(line_no) + ": '" + key +
                        "' before any run");
      }
      auto ids = parse_ids(value, line_no);
      if (key == "train") {
        current->train_subjects = std::move(ids);
      } else if (key == "val") {
        current->val_subjects = std::move(ids);
      } else {
        current->test_subjects = std::move(ids);
      }
    } else {
      throw DataError("manifest line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  return m;
}

void save_manifest(const std::string& path, const SplitManifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << serialize_manifest(m);
  if (!out) throw DataError("write to '" + path + "' failed");
}

SplitManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str());
}

void validate_manifest(const SplitManifest& m) {
  for (std::size_t i = 0; i < m.runs.size(); ++i) {
    const SplitRun& run = m.runs[i];
    if (run.train_subjects.empty() || run.test_subjects.empty()) {
      throw ConfigError("run " + std::to_string(i) + " has an empty train or test partition");
    }
    std::set<std::uint32_t> seen;
    auto check = [&](const std::vector<std::uint32_t>& ids, const char* part) {
      for (std::uint32_t id : ids) {
        if (!seen.insert(id).second) {
          throw ConfigError("run " + std::to_string(i) + ": subject " + std::to_string(id) +
                            " appears in more than one partition (" + part + ")");
        }
      }
    };
    check(run.train_subjects, "train");
    check(run.val_subjects, "val");
    check(run.test_subjects, "test");
  }
}

std::vector<std::size_t> trials_of(const TrialSet& set,
                                   const std::vector<std::uint32_t>& subjects) {
  const std::set<std::uint32_t> wanted(subjects.begin(), subjects.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < set.trials.size(); ++i) {
    if (wanted.count(set.trials[i].subject)) out.push_back(i);
  }
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    const std::vector<std::size_t>& indices, const std::vector<int>& labels, Real fraction,
    Rng& rng) {
  if (indices.size() != labels.size()) {
    throw DataError("stratified split: " + std::to_string(indices.size()) + " indices vs " +
                    std::to_string(labels.size()) + " labels");
  }
  std::vector<int> classes(labels);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  std::vector<std::size_t> left, right;
  for (int cls : classes) {
    std::vector<std::size_t> members;
    for (std::size_t j = 0; j < indices.size(); ++j) {
      if (labels[j] == cls) members.push_back(indices[j]);
    }
    for (std::size_t i = members.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<Real>(i));
      std::swap(members[i - 1], members[std::min(j, i - 1)]);
    }
    std::size_t take = 0;
    if (members.size() >= 2) {
      take = static_cast<std::size_t>(
          std::llround(fraction * static_cast<Real>(members.size())));
      take = std::min(std::max<std::size_t>(take, 1), members.size() - 1);
    }
    right.insert(right.end(), members.begin(), members.begin() + take);
    left.insert(left.end(), members.begin() + take, members.end());
  }
  std::sort(left.begin(), left.end());
  std::sort(right.begin(), right.end());
  return {left, right};
}

Real synth_class_frequency(std::size_t k) {
  static constexpr Real kFreqs[4] = {10.0, 22.0, 6.0, 30.0};
  if (k >= 4) throw ContractError("no class frequency defined for class " + std::to_string(k));
  return kFreqs[k];
}

std::size_t synth_block_width(std::size_t channels, std::size_t n_classes) {
  return std::max<std::size_t>(1, channels / (2 * n_classes));
}

TrialSet synth_generate(std::size_t n_subjects, std::size_t trials_per_subject,
                        std::size_t channels, std::size_t samples, std::size_t n_classes,
                        std::uint64_t seed, Real sample_rate) {
  if (n_classes < 2 || n_classes > 4) {
    throw ConfigError("synthetic generator supports 2 to 4 classes, got " +
                      std::to_string(n_classes));
  }
  if (channels < n_classes) {
    throw ConfigError("need at least one channel per class: " + std::to_string(channels) +
                      " channels for " + std::to_string(n_classes) + " classes");
  }
  if (n_subjects == 0 || trials_per_subject == 0 || samples == 0) {
    throw ConfigError("synthetic generator needs subjects, trials, and samples all positive");
  }

  TrialSet set;
  set.channels = channels;
  set.samples = samples;
  set.n_classes = n_classes;
  set.sample_rate = sample_rate;
  set.trials.reserve(n_subjects * trials_per_subject);

  const std::size_t width = synth_block_width(channels, n_classes);
  Rng rng(seed);
  for (std::size_t s = 0; s < n_subjects; ++s) {
    const Real gain = rng.uniform(0.5, 1.5);
    const Real jitter = rng.uniform(-1.0, 1.0);
    for (std::size_t i = 0; i < trials_per_subject; ++i) {
      EEGTrial t;
      t.subject = static_cast<std::uint32_t>(s);
      t.label = static_cast<std::uint32_t>(i % n_classes);
      t.channels = channels;
      t.samples = samples;
      t.signal.resize(channels * samples);
      const Real freq = synth_class_frequency(t.label) + jitter;
      const Real phase = rng.uniform(0.0, kTwoPi);
      const std::size_t lo = t.label * width, hi = (t.label + 1) * width;
      for (std::size_t c = 0; c < channels; ++c) {
        const bool carries = c >= lo && c < hi;
        for (std::size_t n = 0; n < samples; ++n) {
          Real v = rng.normal();
          if (carries) {
            v += gain * std::sin(kTwoPi * freq * static_cast<Real>(n) / sample_rate + phase);
          }
          t.signal[c * samples + n] = static_cast<Real>(static_cast<float>(v));
        }
      }
      set.trials.push_back(std::move(t));
    }
  }
  return set;
}

void save_matrix(const std::string& path, const Matrix& m) {
  if (m.values.size() != m.rows * m.cols) {
    throw ContractError("matrix export: " + std::to_string(m.values.size()) + " values for " +
                        std::to_string(m.rows) + "x" + std::to_string(m.cols));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  put_u32(out, static_cast<std::uint32_t>(m.rows));
  put_u32(out, static_cast<std::uint32_t>(m.cols));
  for (Real v : m.values) put_f32(out, static_cast<float>(v));
  if (!out) throw DataError("write to '" + path + "' failed");
}

Matrix load_matrix(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  Matrix m;
  m.rows = get_u32(in, "row count");
  m.cols = get_u32(in, "column count");
  m.values.resize(m.rows * m.cols);
  for (Real& v : m.values) v = static_cast<Real>(get_f32(in, "matrix values"));
  return m;
}

}  // namespace dsai
