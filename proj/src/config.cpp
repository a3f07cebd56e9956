#include "dsai/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace dsai {

namespace {

std::string fmt_real(Real v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string fmt_size(std::size_t v) { return std::to_string(v); }

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

std::string fmt_size_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& text) {
  std::size_t v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + text + "'");
  }
  return v;
}

Real parse_real(const std::string& key, const std::string& text) {
  try {
    std::size_t pos = 0;
    const Real v = std::stod(text, &pos);
    if (pos != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + text + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + text + "'");
}

std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    out.push_back(parse_size(key, item));
  }
  if (out.empty()) throw ConfigError("config: '" + key + "' expects a comma-separated list");
  return out;
}

struct KeyDef {
  const char* section;
  const char* key;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

#define SIZE_KEY(section, field, name)                                    \
  KeyDef {                                                                \
    #section, #name, [](const Config& c) { return fmt_size(c.field); },  \
        [](Config& c, const std::string& v) { c.field = parse_size(#name, v); } \
  }
#define REAL_KEY(section, field, name)                                    \
  KeyDef {                                                                \
    #section, #name, [](const Config& c) { return fmt_real(c.field); },  \
        [](Config& c, const std::string& v) { c.field = parse_real(#name, v); } \
  }
#define BOOL_KEY(section, field, name)                                    \
  KeyDef {                                                                \
    #section, #name, [](const Config& c) { return fmt_bool(c.field); },  \
        [](Config& c, const std::string& v) { c.field = parse_bool(#name, v); } \
  }

const std::vector<KeyDef>& registry() {
  static const std::vector<KeyDef> defs = {
      SIZE_KEY(arch, arch.input_channels, input_channels),
      SIZE_KEY(arch, arch.input_samples, input_samples),
      SIZE_KEY(arch, arch.n_classes, n_classes),
      SIZE_KEY(arch, arch.f1, f1),
      SIZE_KEY(arch, arch.depth_multiplier, depth_multiplier),
      SIZE_KEY(arch, arch.temporal_kernel1, temporal_kernel1),
      SIZE_KEY(arch, arch.temporal_kernel2, temporal_kernel2),
      SIZE_KEY(arch, arch.pool1, pool1),
      SIZE_KEY(arch, arch.pool2, pool2),
      SIZE_KEY(arch, arch.embed_dim, embed_dim),
      SIZE_KEY(arch, arch.n_heads, n_heads),
      SIZE_KEY(arch, arch.ffn_ratio, ffn_ratio),
      SIZE_KEY(arch, arch.attn_layers, attn_layers),
      KeyDef{"arch", "fine_kernels",
             [](const Config& c) { return fmt_size_list(c.arch.fine_kernels); },
             [](Config& c, const std::string& v) {
               c.arch.fine_kernels = parse_size_list("fine_kernels", v);
             }},
      KeyDef{"arch", "coarse_kernels",
             [](const Config& c) { return fmt_size_list(c.arch.coarse_kernels); },
             [](Config& c, const std::string& v) {
               c.arch.coarse_kernels = parse_size_list("coarse_kernels", v);
             }},
      SIZE_KEY(arch, arch.expansion_ratio, expansion_ratio),
      SIZE_KEY(arch, arch.groups, groups),
      REAL_KEY(arch, arch.dropout, dropout),
      REAL_KEY(arch, arch.residual_init, residual_init),
      REAL_KEY(arch, arch.interaction_init, interaction_init),

      SIZE_KEY(train, train.batch_size, batch_size),
      REAL_KEY(train, train.learning_rate, learning_rate),
      SIZE_KEY(train, train.max_epochs, max_epochs),
      REAL_KEY(train, train.weight_decay, weight_decay),
      BOOL_KEY(train, train.decoupled_decay, decoupled_decay),
      SIZE_KEY(train, train.seeds, seeds),
      KeyDef{"train", "base_seed",
             [](const Config& c) { return std::to_string(c.train.base_seed); },
             [](Config& c, const std::string& v) { c.train.base_seed = parse_u64("base_seed", v); }},
      KeyDef{"train", "protocol", [](const Config& c) { return c.train.protocol; },
             [](Config& c, const std::string& v) { c.train.protocol = v; }},
      SIZE_KEY(train, train.folds, folds),
      REAL_KEY(train, train.val_fraction, val_fraction),

      BOOL_KEY(data, data.zscore, zscore),
      SIZE_KEY(data, data.window, window),
      REAL_KEY(data, data.overlap, overlap),

      BOOL_KEY(ablation, arch.fine_branch, fine_branch),
      BOOL_KEY(ablation, arch.coarse_branch, coarse_branch),
      BOOL_KEY(ablation, arch.intra_attention, intra_attention),
      BOOL_KEY(ablation, arch.inter_attention, inter_attention),
      BOOL_KEY(ablation, arch.positional_encoding, positional_encoding),
      BOOL_KEY(ablation, arch.reinjection, reinjection),
      KeyDef{"ablation", "aggregation", [](const Config& c) { return c.arch.aggregation; },
             [](Config& c, const std::string& v) { c.arch.aggregation = v; }},
  };
  return defs;
}

#undef SIZE_KEY
#undef REAL_KEY
#undef BOOL_KEY

const KeyDef* find_key(const std::string& section, const std::string& key) {
  for (const KeyDef& def : registry()) {
    if (section == def.section && key == def.key) return &def;
  }
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

Config parse_config(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(t.substr(1, t.size() - 2));
      if (section != "arch" && section != "train" && section != "data" &&
          section != "ablation") {
        throw ConfigError("config line " + std::to_string(line_no) + ": unknown section [" +
                          section + "]");
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (section.empty()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": key '" + key +
                        "' appears before any section header");
    }
    const KeyDef* def = find_key(section, key);
    if (!def) {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key +
                        "' in section [" + section + "]");
    }
    def->set(cfg, value);
  }
  return cfg;
}

Config load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

void apply_override(Config& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "': expected section.key=value");
  }
  const std::string path = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  const auto dot = path.find('.');
  if (dot == std::string::npos) {
    throw ConfigError("override '" + assignment + "': expected section.key=value");
  }
  const std::string section = path.substr(0, dot);
  const std::string key = path.substr(dot + 1);
  const KeyDef* def = find_key(section, key);
  if (!def) {
    throw ConfigError("override: unknown key '" + section + "." + key + "'");
  }
  def->set(cfg, value);
}

std::string serialize_config(const Config& cfg) {
  std::string out;
  std::string section;
  for (const KeyDef& def : registry()) {
    if (section != def.section) {
      if (!out.empty()) out += '\n';
      section = def.section;
      out += '[' + section + "]\n";
    }
    out += std::string(def.key) + " = " + def.get(cfg) + '\n';
  }
  return out;
}

std::uint64_t config_hash(const Config& cfg) { return fnv1a(serialize_config(cfg)); }

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("config: " + msg);
}

}  // namespace

void validate(const Config& cfg) {
  const ModelConfig& a = cfg.arch;
  require(a.input_channels >= 1, "input_channels must be >= 1");
  require(a.n_classes >= 2, "n_classes must be >= 2, got " + std::to_string(a.n_classes));
  require(a.f1 >= 1 && a.depth_multiplier >= 1, "f1 and depth_multiplier must be >= 1");
  require(a.temporal_kernel1 >= 1 && a.temporal_kernel2 >= 1, "temporal kernels must be >= 1");
  require(a.pool1 >= 1 && a.pool2 >= 1, "pool sizes must be >= 1");
  const std::size_t min_samples = 2 * a.pool1 * a.pool2;
  require(a.input_samples >= min_samples,
          "input_samples " + std::to_string(a.input_samples) + " below minimum " +
              std::to_string(min_samples) + " (need at least 2 tokens after pooling by " +
              std::to_string(a.pool1) + " and " + std::to_string(a.pool2) + ")");
  require(a.embed_dim >= 1, "embed_dim must be >= 1");
  require(a.n_heads >= 1 && a.embed_dim % a.n_heads == 0,
          "n_heads " + std::to_string(a.n_heads) + " must divide embed_dim " +
              std::to_string(a.embed_dim));
  require(a.ffn_ratio >= 1, "ffn_ratio must be >= 1");
  require(a.attn_layers >= 1, "attn_layers must be >= 1");
  require(a.expansion_ratio >= 1, "expansion_ratio must be >= 1");
  require(a.groups >= 1 && a.embed_dim % a.groups == 0 &&
              (a.embed_dim * a.expansion_ratio) % a.groups == 0,
          "groups " + std::to_string(a.groups) + " must divide embed_dim " +
              std::to_string(a.embed_dim) + " and its expansion " +
              std::to_string(a.embed_dim * a.expansion_ratio));
  require(a.dropout >= 0.0 && a.dropout < 1.0, "dropout must be in [0, 1)");
  require(a.fine_branch || a.coarse_branch, "at least one branch must be enabled");
  const std::size_t n = a.n_tokens();
  auto check_kernels = [&](const std::vector<std::size_t>& ks, const char* which, bool enabled) {
    if (!enabled) return;
    for (std::size_t k : ks) {
      require(k >= 3 && k % 2 == 1, std::string(which) + " kernel " + std::to_string(k) +
                                        " must be odd and >= 3");
      require(k <= 2 * n - 1, std::string(which) + " kernel " + std::to_string(k) +
                                  " exceeds the padded token span " + std::to_string(2 * n - 1) +
                                  " for " + std::to_string(n) + " tokens");
    }
  };
  check_kernels(a.fine_kernels, "fine", a.fine_branch);
  check_kernels(a.coarse_kernels, "coarse", a.coarse_branch);
  require(a.aggregation == "adaptive" || a.aggregation == "mean",
          "aggregation must be adaptive or mean, got '" + a.aggregation + "'");

  const TrainConfig& t = cfg.train;
  require(t.batch_size >= 1, "batch_size must be >= 1");
  require(t.learning_rate >= 0.0, "learning_rate must be >= 0");
  require(t.max_epochs >= 1, "max_epochs must be >= 1");
  require(t.weight_decay >= 0.0, "weight_decay must be >= 0");
  require(t.seeds >= 1, "seeds must be >= 1");
  require(t.protocol == "kfold" || t.protocol == "loso",
          "protocol must be kfold or loso, got '" + t.protocol + "'");
  if (t.protocol == "kfold") require(t.folds >= 2, "folds must be >= 2");
  require(t.val_fraction > 0.0 && t.val_fraction < 1.0, "val_fraction must be in (0, 1)");

  const DataConfig& d = cfg.data;
  require(d.overlap >= 0.0 && d.overlap < 1.0, "overlap must be in [0, 1)");
}

ModelConfig toggle_branch(ModelConfig cfg, const std::string& branch) {
  if (branch == "fine") {
    cfg.fine_branch = !cfg.fine_branch;
  } else if (branch == "coarse") {
    cfg.coarse_branch = !cfg.coarse_branch;
  } else {
    throw ConfigError("toggle_branch: branch must be fine or coarse, got '" + branch + "'");
  }
  return cfg;
}

}  // namespace dsai
