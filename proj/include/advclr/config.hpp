#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "advclr/attack.hpp"
#include "advclr/data.hpp"
#include "advclr/eval.hpp"
#include "advclr/model.hpp"
#include "advclr/train.hpp"

// Run configuration: a plain-text file of [section] headers and
// `key = value` lines. `#` starts a comment (at line start or after
// whitespace). Keys before the first header are global.
//
//   seed = 1
//   [data]
//   dataset = synthetic
//   [model]
//   encoder = toy_conv
//
// Lists are comma-separated. Booleans accept true/false, yes/no, on/off, 1/0.

namespace advclr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string dataset;  // synthetic | cifar10; required
  std::filesystem::path dir;
  std::size_t num_classes = 10;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  std::size_t image_size = 8;
  std::uint64_t seed = 0;  // synthetic sample draw
  double noise = 0.04;
  std::size_t train_limit = 0;  // 0 keeps everything
  std::size_t test_limit = 0;
};

struct AttackGridConfig {
  std::vector<AttackKind> kinds{AttackKind::fgsm, AttackKind::pgd, AttackKind::cw};
  std::vector<double> epsilons{0.03, 0.06, 0.08};
  std::size_t steps = 10;
  double kappa = 0.0;
  bool random_start = true;

  std::vector<AttackConfig> expand() const {
    return attack_grid(kinds, epsilons, steps, kappa, random_start);
  }
};

struct EvalConfig {
  std::size_t batch_size = 256;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_root = "runs";
  DataConfig data;
  EncoderSpec model;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  AttackGridConfig attacks;
  EvalConfig eval;
  std::set<std::string> present;  // "section.key" entries given explicitly

  bool has(std::string_view qualified) const { return present.count(std::string(qualified)) > 0; }
};

namespace detail {

struct TypeMismatch {
  std::string expected;
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(trim(s.substr(start, comma == std::string_view::npos ? s.npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (out.size() == 1 && out[0].empty()) out.clear();
  return out;
}

inline std::uint64_t parse_uint(std::string_view s) {
  std::uint64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc() || p != end) throw TypeMismatch{"a non-negative integer"};
  return v;
}

inline double parse_double(std::string_view s) {
  double v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc() || p != end) throw TypeMismatch{"a number"};
  return v;
}

inline bool parse_bool(std::string_view s) {
  if (s == "true" || s == "yes" || s == "on" || s == "1") return true;
  if (s == "false" || s == "no" || s == "off" || s == "0") return false;
  throw TypeMismatch{"a boolean"};
}

template <class F>
auto parse_enum(std::string_view s, F from_string, const char* what) {
  try {
    return from_string(s);
  } catch (const std::invalid_argument&) {
    throw TypeMismatch{what};
  }
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class Seq, class F>
std::string join(const Seq& xs, F f) {
  std::string out;
  for (const auto& x : xs) {
    if (!out.empty()) out += ",";
    out += f(x);
  }
  return out;
}

struct KeyDef {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;

  std::string qualified() const { return section.empty() ? key : section + "." + key; }
};

inline const std::vector<std::string>& config_sections() {
  static const std::vector<std::string> s{"data", "model", "pretrain", "finetune", "attacks", "eval"};
  return s;
}

#define ADVCLR_UINT(sec, name, field)                                                  \
  KeyDef{sec, name, [](RunConfig& c, std::string_view v) { c.field = parse_uint(v); }, \
         [](const RunConfig& c) { return std::to_string(c.field); }}
#define ADVCLR_DOUBLE(sec, name, field)                                                  \
  KeyDef{sec, name, [](RunConfig& c, std::string_view v) { c.field = parse_double(v); }, \
         [](const RunConfig& c) { return fmt_double(c.field); }}
#define ADVCLR_BOOL(sec, name, field)                                                  \
  KeyDef{sec, name, [](RunConfig& c, std::string_view v) { c.field = parse_bool(v); }, \
         [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }}

inline const std::vector<KeyDef>& config_keys() {
  static const std::vector<KeyDef> keys = [] {
    std::vector<KeyDef> k;
    k.push_back(ADVCLR_UINT("", "seed", seed));
    k.push_back({"", "output_root",
                 [](RunConfig& c, std::string_view v) { c.output_root = std::string(v); },
                 [](const RunConfig& c) { return c.output_root.string(); }});

    k.push_back({"data", "dataset",
                 [](RunConfig& c, std::string_view v) {
                   if (v != "synthetic" && v != "cifar10") throw TypeMismatch{"synthetic or cifar10"};
                   c.data.dataset = std::string(v);
                 },
                 [](const RunConfig& c) { return c.data.dataset; }});
    k.push_back({"data", "dir", [](RunConfig& c, std::string_view v) { c.data.dir = std::string(v); },
                 [](const RunConfig& c) { return c.data.dir.string(); }});
    k.push_back(ADVCLR_UINT("data", "num_classes", data.num_classes));
    k.push_back(ADVCLR_UINT("data", "train_per_class", data.train_per_class));
    k.push_back(ADVCLR_UINT("data", "test_per_class", data.test_per_class));
    k.push_back(ADVCLR_UINT("data", "image_size", data.image_size));
    k.push_back(ADVCLR_UINT("data", "seed", data.seed));
    k.push_back(ADVCLR_DOUBLE("data", "noise", data.noise));
    k.push_back(ADVCLR_UINT("data", "train_limit", data.train_limit));
    k.push_back(ADVCLR_UINT("data", "test_limit", data.test_limit));

    k.push_back({"model", "encoder",
                 [](RunConfig& c, std::string_view v) {
                   c.model.kind = parse_enum(v, encoder_kind_from_string, "toy_conv or resnet_small");
                 },
                 [](const RunConfig& c) { return std::string(to_string(c.model.kind)); }});
    k.push_back({"model", "widths",
                 [](RunConfig& c, std::string_view v) {
                   std::vector<std::size_t> w;
                   for (const auto& s : split_list(v)) w.push_back(parse_uint(s));
                   if (w.empty()) throw TypeMismatch{"a list of integers"};
                   c.model.widths = w;
                 },
                 [](const RunConfig& c) {
                   return join(c.model.widths, [](std::size_t x) { return std::to_string(x); });
                 }});
    k.push_back(ADVCLR_UINT("model", "depth", model.depth));

    k.push_back(ADVCLR_UINT("pretrain", "epochs", pretrain.epochs));
    k.push_back(ADVCLR_UINT("pretrain", "batch_size", pretrain.batch_size));
    k.push_back(ADVCLR_DOUBLE("pretrain", "lr0", pretrain.lr0));
    k.push_back(ADVCLR_DOUBLE("pretrain", "momentum", pretrain.momentum));
    k.push_back(ADVCLR_DOUBLE("pretrain", "temperature", pretrain.temperature));
    k.push_back({"pretrain", "epsilon",
                 [](RunConfig& c, std::string_view v) {
                   c.pretrain.pgd_view.epsilon = c.pretrain.cw_view.epsilon = parse_double(v);
                 },
                 [](const RunConfig& c) { return fmt_double(c.pretrain.pgd_view.epsilon); }});
    k.push_back(ADVCLR_UINT("pretrain", "pgd_steps", pretrain.pgd_view.num_steps));
    k.push_back(ADVCLR_DOUBLE("pretrain", "pgd_step_size", pretrain.pgd_view.step_size));
    k.push_back(ADVCLR_BOOL("pretrain", "pgd_random_start", pretrain.pgd_view.random_start));
    k.push_back(ADVCLR_UINT("pretrain", "cw_steps", pretrain.cw_view.num_steps));
    k.push_back(ADVCLR_DOUBLE("pretrain", "cw_step_size", pretrain.cw_view.step_size));
    k.push_back(ADVCLR_DOUBLE("pretrain", "cw_kappa", pretrain.cw_view.kappa));
    k.push_back(ADVCLR_BOOL("pretrain", "cw_use_negatives", pretrain.cw_view.objective.use_negatives));
    k.push_back(ADVCLR_BOOL("pretrain", "augment", pretrain.augment.enabled));
    k.push_back(ADVCLR_UINT("pretrain", "crop_pad", pretrain.augment.crop_pad));
    k.push_back(ADVCLR_DOUBLE("pretrain", "hflip_prob", pretrain.augment.hflip_prob));
    k.push_back(ADVCLR_UINT("pretrain", "checkpoint_every", pretrain.checkpoint_every));

    k.push_back(ADVCLR_UINT("finetune", "epochs", finetune.epochs));
    k.push_back(ADVCLR_UINT("finetune", "batch_size", finetune.batch_size));
    k.push_back(ADVCLR_DOUBLE("finetune", "lr", finetune.lr));
    k.push_back(ADVCLR_DOUBLE("finetune", "beta1", finetune.adam.beta1));
    k.push_back(ADVCLR_DOUBLE("finetune", "beta2", finetune.adam.beta2));
    k.push_back(ADVCLR_DOUBLE("finetune", "adam_eps", finetune.adam.eps));

    k.push_back({"attacks", "kinds",
                 [](RunConfig& c, std::string_view v) {
                   std::vector<AttackKind> ks;
                   for (const auto& s : split_list(v))
                     ks.push_back(parse_enum(s, attack_kind_from_string, "a list of fgsm, pgd, cw"));
                   if (ks.empty()) throw TypeMismatch{"a list of fgsm, pgd, cw"};
                   c.attacks.kinds = ks;
                 },
                 [](const RunConfig& c) {
                   return join(c.attacks.kinds, [](AttackKind a) { return std::string(to_string(a)); });
                 }});
    k.push_back({"attacks", "epsilon",
                 [](RunConfig& c, std::string_view v) {
                   std::vector<double> es;
                   for (const auto& s : split_list(v)) es.push_back(parse_double(s));
                   if (es.empty()) throw TypeMismatch{"a list of numbers"};
                   c.attacks.epsilons = es;
                 },
                 [](const RunConfig& c) { return join(c.attacks.epsilons, [](double e) { return fmt_double(e); }); }});
    k.push_back(ADVCLR_UINT("attacks", "steps", attacks.steps));
    k.push_back(ADVCLR_DOUBLE("attacks", "kappa", attacks.kappa));
    k.push_back(ADVCLR_BOOL("attacks", "random_start", attacks.random_start));

    k.push_back(ADVCLR_UINT("eval", "batch_size", eval.batch_size));
    return k;
  }();
  return keys;
}

#undef ADVCLR_UINT
#undef ADVCLR_DOUBLE
#undef ADVCLR_BOOL

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] != b[j - 1] ? 1u : 0u)});
      diag = up;
    }
  }
  return row[b.size()];
}

inline std::string closest(std::string_view word, const std::vector<std::string>& candidates) {
  std::string best;
  std::size_t best_d = std::max<std::size_t>(3, word.size() / 3) + 1;
  for (const auto& c : candidates) {
    const auto d = edit_distance(word, c);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

inline const KeyDef* find_key(std::string_view section, std::string_view key) {
  for (const auto& k : config_keys())
    if (k.section == section && k.key == key) return &k;
  return nullptr;
}

inline std::string unknown_key_message(std::string_view section, std::string_view key) {
  std::vector<std::string> same, all;
  for (const auto& k : config_keys()) {
    if (k.section == section) same.push_back(k.key);
    all.push_back(k.qualified());
  }
  std::string msg = "unknown key '" + std::string(key) + "'";
  msg += section.empty() ? " (global)" : " in [" + std::string(section) + "]";
  std::string hint = closest(key, same);
  if (hint.empty()) {
    hint = closest(section.empty() ? std::string(key) : std::string(section) + "." + std::string(key), all);
  }
  if (!hint.empty()) msg += "; did you mean '" + hint + "'?";
  return msg;
}

inline void assign(RunConfig& cfg, std::string_view section, std::string_view key,
                   std::string_view value, const std::string& where) {
  const KeyDef* def = find_key(section, key);
  if (!def) throw ConfigError(where + unknown_key_message(section, key));
  try {
    def->set(cfg, value);
  } catch (const TypeMismatch& tm) {
    throw ConfigError(where + "[" + (section.empty() ? std::string("global") : std::string(section)) +
                      "] " + std::string(key) + " expects " + tm.expected + ", got '" +
                      std::string(value) + "'");
  }
  cfg.present.insert(def->qualified());
}

inline std::string strip_comment(std::string_view line) {
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '#' && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) {
      return trim(line.substr(0, i));
    }
  }
  return trim(line);
}

}  // namespace detail

/// Parses config text. Unknown sections and keys, malformed lines,
/// duplicates and badly typed values are rejected with the line number.
inline RunConfig parse_config_text(std::string_view text, const std::string& origin = "<config>") {
  RunConfig cfg;
  std::string section;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    const std::string line = detail::strip_comment(raw);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "syntax error: unterminated section header");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      const auto& secs = detail::config_sections();
      if (std::find(secs.begin(), secs.end(), section) == secs.end()) {
        std::string msg = where + "unknown section [" + section + "]";
        const auto hint = detail::closest(section, secs);
        if (!hint.empty()) msg += "; did you mean [" + hint + "]?";
        throw ConfigError(msg);
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + "syntax error: expected 'key = value' or '[section]'");
    }
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "syntax error: empty key");
    const std::string q = section.empty() ? key : section + "." + key;
    if (!seen.insert(q).second) throw ConfigError(where + "duplicate key '" + q + "'");
    detail::assign(cfg, section, key, value, where);
  }
  return cfg;
}

/// Applies a `section.key=value` (or `key=value` for globals) override.
inline void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "': expected key=value");
  }
  const std::string lhs = detail::trim(assignment.substr(0, eq));
  const std::string value = detail::trim(assignment.substr(eq + 1));
  const auto dot = lhs.find('.');
  const std::string section = dot == std::string::npos ? "" : lhs.substr(0, dot);
  const std::string key = dot == std::string::npos ? lhs : lhs.substr(dot + 1);
  detail::assign(cfg, section, key, value, "override: ");
}

/// Fills derived fields and checks the base requirements (global seed,
/// dataset, encoder) plus the per-module invariants.
inline void finalize_config(RunConfig& cfg) {
  for (const char* req : {"seed", "data.dataset", "model.encoder"}) {
    if (!cfg.has(req)) {
      const std::string q = req;
      const auto dot = q.find('.');
      throw ConfigError(dot == std::string::npos
                            ? "missing required key '" + q + "' (global)"
                            : "missing required key '" + q.substr(dot + 1) + "' in [" +
                                  q.substr(0, dot) + "]");
    }
  }
  if (cfg.data.dataset == "cifar10") {
    if (cfg.data.dir.empty()) throw ConfigError("missing required key 'dir' in [data] for cifar10");
    cfg.data.image_size = kCifarSide;
    cfg.data.num_classes = 10;
  }
  if (cfg.data.num_classes < 2) throw ConfigError("[data] num_classes must be >= 2");
  if (cfg.data.image_size < 2) throw ConfigError("[data] image_size must be >= 2");
  cfg.model.image_size = cfg.data.image_size;
  if (!cfg.model.widths.empty()) cfg.model.embedding_dim = cfg.model.widths.back();
  if (!cfg.has("pretrain.pgd_step_size")) {
    cfg.pretrain.pgd_view.step_size = cfg.pretrain.pgd_view.epsilon / 4.0;
  }
  if (!cfg.has("pretrain.cw_step_size")) {
    cfg.pretrain.cw_view.step_size = cfg.pretrain.cw_view.epsilon / 4.0;
  }
  cfg.pretrain.pgd_view.objective.temperature = cfg.pretrain.temperature;
  cfg.pretrain.seed = cfg.seed;
  cfg.finetune.seed = cfg.seed;
  try {
    cfg.model.validate();
    if (cfg.pretrain.epochs > 0) cfg.pretrain.validate();
    if (cfg.finetune.epochs > 0) cfg.finetune.validate();
    cfg.pretrain.augment.validate();
    for (const auto& a : cfg.attacks.expand()) a.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (cfg.eval.batch_size < 1) throw ConfigError("[eval] batch_size must be >= 1");
}

/// Requires `<section>.epochs` for the training stages.
inline void require_stage(const RunConfig& cfg, std::string_view stage) {
  const std::string q = std::string(stage) + ".epochs";
  if (!cfg.has(q)) {
    throw ConfigError("missing required key 'epochs' in [" + std::string(stage) + "]");
  }
}

struct ConfigSources {
  std::vector<std::string> overrides;  // applied after the file and environment
  bool use_environment = true;         // ADVCLR_DATA_DIR
};

/// File, then ADVCLR_DATA_DIR, then overrides; finalized.
inline RunConfig parse_config(const std::filesystem::path& path, const ConfigSources& src = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg = parse_config_text(ss.str(), path.string());
  if (src.use_environment) {
    if (const char* env = std::getenv("ADVCLR_DATA_DIR"); env && *env) {
      cfg.data.dir = env;
      cfg.present.insert("data.dir");
    }
  }
  for (const auto& o : src.overrides) apply_override(cfg, o);
  finalize_config(cfg);
  return cfg;
}

/// Canonical text with every key; parses back to the same configuration.
inline std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& k : detail::config_keys()) {
    if (k.section != section) {
      section = k.section;
      out += "\n[" + section + "]\n";
    }
    out += k.key + " = " + k.get(cfg) + "\n";
  }
  return out;
}

/// FNV-1a of the canonical text, as 16 hex digits.
inline std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : config_to_text(cfg)) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Train and test splits described by the [data] section.
inline std::pair<Dataset, Dataset> load_datasets(const DataConfig& d) {
  std::pair<Dataset, Dataset> out;
  if (d.dataset == "cifar10") {
    out = load_cifar10(d.dir);
  } else if (d.dataset == "synthetic") {
    SyntheticOptions opt;
    opt.noise = static_cast<float>(d.noise);
    opt.split = Split::train;
    out.first = make_synthetic(d.num_classes, d.train_per_class, d.image_size, 2 * d.seed + 1, opt);
    opt.split = Split::test;
    out.second = make_synthetic(d.num_classes, d.test_per_class, d.image_size, 2 * d.seed + 2, opt);
  } else {
    throw ConfigError("[data] dataset must be synthetic or cifar10");
  }
  if (d.train_limit > 0 && d.train_limit < out.first.size()) out.first = out.first.head(d.train_limit);
  if (d.test_limit > 0 && d.test_limit < out.second.size()) out.second = out.second.head(d.test_limit);
  return out;
}

}  // namespace advclr
