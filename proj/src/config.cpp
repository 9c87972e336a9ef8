#include <algorithm>
#include <fstream>
#include <sstream>

#include "kshield/harness.hpp"

namespace kshield {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t comment = line.find_first_of("#;");
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    }
    cfg.values_[section.empty() ? key : section + "." + key] = value;
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

bool KeyValueConfig::has(const std::string& key) const {
  return values_.count(key) > 0;
}

std::string KeyValueConfig::get(const std::string& key,
                                const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string KeyValueConfig::require(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not an integer: " + it->second);
  }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not a number: " + it->second);
  }
}

uint64_t KeyValueConfig::get_u64(const std::string& key, uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return std::stoull(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not an unsigned integer: " +
                      it->second);
  }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: " + it->second);
}

std::vector<int> KeyValueConfig::get_int_list(
    const std::string& key, const std::vector<int>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<int> out;
  std::stringstream ss(it->second);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' has a non-integer entry: " + tok);
    }
  }
  return out;
}

std::string KeyValueConfig::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) {  // std::map iterates sorted
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

uint64_t KeyValueConfig::hash() const {
  const std::string canon = canonical();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : canon) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Config-file builders
// ---------------------------------------------------------------------------

ModelSpec spec_from_config(const KeyValueConfig& cfg) {
  ModelSpec spec;
  spec.in_channels = cfg.get_int("dataset.channels", 3);
  spec.in_h = cfg.get_int("dataset.height", 8);
  spec.in_w = cfg.get_int("dataset.width", 8);
  spec.num_classes = cfg.get_int("dataset.classes", 4);
  spec.width = cfg.get_int("model.width", 8);
  spec.width_deep = cfg.get_int("model.width_deep", 0);
  spec.validate();
  return spec;
}

SyntheticSplits dataset_from_config(const KeyValueConfig& cfg) {
  const std::string kind = cfg.get("dataset.kind", "synthetic-blobs");
  if (kind == "cifar10-subset") {
    SyntheticSplits s;
    const int train_count = cfg.get_int("dataset.train", 0);
    const int test_count = cfg.get_int("dataset.test", 0);
    const int val_count = cfg.get_int("dataset.validation", 0);
    s.train = ingest_cifar10(cfg.require("dataset.path_train"), train_count,
                             cfg.get_bool("dataset.balanced", true), Split::Train);
    Dataset test = ingest_cifar10(cfg.require("dataset.path_test"),
                                  test_count + val_count,
                                  cfg.get_bool("dataset.balanced", true),
                                  Split::Test);
    // Validation points are segmented off the test pool.
    s.validation.name = test.name;
    s.validation.split = Split::Validation;
    s.validation.num_classes = test.num_classes;
    s.test.name = test.name;
    s.test.split = Split::Test;
    s.test.num_classes = test.num_classes;
    for (size_t i = 0; i < test.images.size(); ++i) {
      if (static_cast<int>(i) < val_count) {
        s.validation.images.push_back(std::move(test.images[i]));
        s.validation.labels.push_back(test.labels[i]);
      } else {
        s.test.images.push_back(std::move(test.images[i]));
        s.test.labels.push_back(test.labels[i]);
      }
    }
    return s;
  }
  SyntheticKind sk;
  if (kind == "synthetic-blobs") {
    sk = SyntheticKind::Blobs;
  } else if (kind == "synthetic-rings") {
    sk = SyntheticKind::Rings;
  } else {
    throw ConfigError("unknown dataset kind '" + kind + "'");
  }
  return make_synthetic_splits(
      sk, cfg.get_int("dataset.train", 240), cfg.get_int("dataset.validation", 80),
      cfg.get_int("dataset.test", 400), cfg.get_int("dataset.classes", 4),
      cfg.get_double("dataset.noise", 0.08), cfg.get_u64("dataset.seed", 7),
      cfg.get_int("dataset.channels", 3), cfg.get_int("dataset.height", 8),
      cfg.get_int("dataset.width", 8));
}

DefenseConfig defense_from_config(const KeyValueConfig& cfg) {
  DefenseConfig d;
  d.c1 = cfg.get_double("defense.c1", d.c1);
  d.c2 = cfg.get_double("defense.c2", d.c2);
  d.c3 = cfg.get_int("defense.c3", d.c3);
  d.transform_iterations = cfg.get_int("defense.iterations", d.transform_iterations);
  d.tap_layers = cfg.get_int_list("defense.layers", d.tap_layers);
  d.kernel.e = cfg.get_double("defense.kernel_e", d.kernel.e);
  d.kernel.d = cfg.get_int("defense.kernel_d", d.kernel.d);
  d.rmsprop_rho = cfg.get_double("defense.rho", d.rmsprop_rho);
  d.rmsprop_lr = cfg.get_double("defense.lr", d.rmsprop_lr);
  d.smoother_window = cfg.get_int("defense.window", d.smoother_window);
  d.sample_seed = cfg.get_u64("defense.sample_seed", d.sample_seed);
  d.fixed_samples = cfg.get_bool("defense.fixed_samples", d.fixed_samples);
  d.normalize_kernel_loss =
      cfg.get_bool("defense.normalize_loss", d.normalize_kernel_loss);
  return d;
}

TrainConfig train_from_config(const KeyValueConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.get_int("train.epochs", t.epochs);
  t.batch_size = cfg.get_int("train.batch", t.batch_size);
  t.lr = cfg.get_double("train.lr", t.lr);
  t.momentum = cfg.get_double("train.momentum", t.momentum);
  t.seed = cfg.get_u64("train.seed", t.seed);
  t.accuracy_margin = cfg.get_double("train.accuracy_margin", t.accuracy_margin);
  return t;
}

AdvTrainConfig adv_train_from_config(const KeyValueConfig& cfg) {
  AdvTrainConfig a;
  a.base = train_from_config(cfg);
  a.base.epochs = cfg.get_int("train_adv.epochs", a.base.epochs);
  a.replays = cfg.get_int("train_adv.replays", a.replays);
  a.trades_lambda = cfg.get_double("train_adv.lambda", a.trades_lambda);
  a.epsilon = cfg.get_double("train_adv.epsilon", a.epsilon);
  return a;
}

std::vector<NamedAttack> attacks_from_config(const KeyValueConfig& cfg) {
  // Attack sections are named [attack.<name>]; keys are addressed as
  // "attack.<name>.<key>".
  std::vector<NamedAttack> out;
  std::vector<std::string> names;
  for (const auto& [key, value] : cfg.values()) {
    (void)value;
    if (key.rfind("attack.", 0) != 0) continue;
    const size_t dot = key.find('.', 7);
    if (dot == std::string::npos) continue;
    const std::string name = key.substr(7, dot - 7);
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      names.push_back(name);
    }
  }
  std::sort(names.begin(), names.end());
  for (const std::string& name : names) {
    const std::string p = "attack." + name + ".";
    NamedAttack na;
    na.name = name;
    na.config.kind = attack_kind_from_string(cfg.get(p + "kind", "bim"));
    na.config.epsilon = cfg.get_double(p + "epsilon", 0.0);
    na.config.alpha = cfg.get_double(p + "alpha", 0.0);
    na.config.iterations = cfg.get_int(p + "iterations", 1);
    na.config.init_radius = cfg.get_double(p + "init_radius", -1.0);
    na.config.restarts = cfg.get_int(p + "restarts", 1);
    na.config.eot_samples = cfg.get_int(p + "eot_samples", 1);
    na.config.deepfool_overshoot = cfg.get_double(p + "overshoot", 0.02);
    na.config.deepfool_max_iterations = cfg.get_int(p + "iterations", 50);
    na.config.cw.confidence = cfg.get_double(p + "confidence", 0.0);
    na.config.cw.binary_search_steps = cfg.get_int(p + "binary_steps", 15);
    na.config.cw.initial_c = cfg.get_double(p + "initial_c", 0.01);
    na.config.cw.lr = cfg.get_double(p + "cw_lr", 0.05);
    na.config.cw.iterations = cfg.get_int(p + "iterations", 100);
    out.push_back(std::move(na));
  }
  return out;
}

ExperimentPlan plan_from_config(const KeyValueConfig& cfg) {
  ExperimentPlan plan;
  plan.spec = spec_from_config(cfg);
  plan.defense = defense_from_config(cfg);
  plan.attacks = attacks_from_config(cfg);
  plan.eval_count = cfg.get_int("evaluate.count", 200);
  plan.seed = cfg.get_u64("evaluate.seed", 0);
  plan.threads = cfg.get_int("evaluate.threads", 2);
  plan.config_hash = cfg.hash();
  return plan;
}

HyperGrid grid_from_config(const KeyValueConfig& cfg) {
  HyperGrid g;
  auto doubles = [&](const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(cfg.get(key, ""));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (!tok.empty()) out.push_back(std::stod(tok));
    }
    return out;
  };
  g.c1 = doubles("validate.c1");
  g.c2 = doubles("validate.c2");
  g.c3 = cfg.get_int_list("validate.c3", {});
  g.iterations = cfg.get_int_list("validate.iterations", {});
  // Layer subsets separated by '|', e.g. "0,1,2|1,2,3,4,5".
  const std::string subsets = cfg.get("validate.layer_subsets", "");
  std::stringstream ss(subsets);
  std::string group;
  while (std::getline(ss, group, '|')) {
    std::vector<int> layers;
    std::stringstream gs(group);
    std::string tok;
    while (std::getline(gs, tok, ',')) {
      if (!tok.empty()) layers.push_back(std::stoi(tok));
    }
    if (!layers.empty()) g.layer_subsets.push_back(std::move(layers));
  }
  return g;
}

}  // namespace kshield
