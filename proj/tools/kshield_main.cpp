#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "kshield/harness.hpp"
#include "kshield/rng.hpp"

using namespace kshield;

namespace {

Dataset smoothing_doubled(const Dataset& train, int window) {
  Dataset out = train;
  for (size_t i = 0; i < train.images.size(); ++i) {
    out.images.push_back(median_filter(train.images[i], window));
    out.labels.push_back(train.labels[i]);
  }
  return out;
}

int cmd_train(const std::string& config_path, const std::string& kind,
              const std::string& out_path, uint64_t seed_override, bool has_seed) {
  KeyValueConfig cfg = KeyValueConfig::parse_file(config_path);
  ModelSpec spec = spec_from_config(cfg);
  SyntheticSplits data = dataset_from_config(cfg);
  TrainConfig tc = train_from_config(cfg);
  if (has_seed) tc.seed = seed_override;
  Model model(spec, Rng::split(tc.seed, 0x1717));
  Checkpoint ckpt;
  TrainReport report;
  const int window = cfg.get_int("train.smooth_window", 2);
  if (kind == "std") {
    ckpt = train_standard(model, data.train, tc, &report);
  } else if (kind == "smooth") {
    ckpt = train_smoothing_augmented(model, data.train, window, tc, &report);
  } else if (kind == "adv") {
    AdvTrainConfig ac = adv_train_from_config(cfg);
    if (has_seed) ac.base.seed = seed_override;
    ckpt = train_adversarial(model, smoothing_doubled(data.train, window), ac,
                             &report);
  } else {
    throw ConfigError("train: unknown kind '" + kind + "' (std|smooth|adv)");
  }
  save_checkpoint(out_path, ckpt);
  std::printf("trained %s model: train accuracy %.1f%%, final loss %.4f -> %s\n",
              kind.c_str(), 100.0 * report.train_accuracy, report.final_loss,
              out_path.c_str());
  return 0;
}

int cmd_attack(const std::string& config_path, const std::string& ckpt_path,
               const std::string& attack_name, int count, uint64_t seed,
               const std::string& out_path, double epsilon, double alpha,
               int iterations) {
  KeyValueConfig cfg = KeyValueConfig::parse_file(config_path);
  ModelSpec spec = spec_from_config(cfg);
  SyntheticSplits data = dataset_from_config(cfg);
  Model model = load_model(ckpt_path, spec);
  std::vector<NamedAttack> attacks = attacks_from_config(cfg);
  const NamedAttack* chosen = nullptr;
  for (const NamedAttack& a : attacks) {
    if (a.name == attack_name) chosen = &a;
  }
  if (!chosen) throw ConfigError("attack '" + attack_name + "' not in config");
  NamedAttack attack = *chosen;
  if (epsilon >= 0.0) attack.config.epsilon = epsilon;
  if (alpha >= 0.0) attack.config.alpha = alpha;
  if (iterations >= 0) {
    attack.config.iterations = iterations;
    attack.config.deepfool_max_iterations = iterations;
    attack.config.cw.iterations = iterations;
  }
  count = std::min<int>(count, static_cast<int>(data.test.size()));

  std::string csv = "id,label,clean_pred,adv_pred,success,l2,linf,iterations\n";
  int successes = 0;
  for (int i = 0; i < count; ++i) {
    const Tensor& img = data.test.images[static_cast<size_t>(i)];
    const int label = data.test.labels[static_cast<size_t>(i)];
    AttackOutcome o = run_attack(model, attack, img, label,
                                 Rng::split(seed, static_cast<uint64_t>(i)));
    const int clean_pred = model.predict_label(img);
    const int adv_pred = model.predict_label(o.adversarial);
    successes += adv_pred != label;
    char line[160];
    std::snprintf(line, sizeof(line), "%d,%d,%d,%d,%d,%.6f,%.6f,%d\n", i, label,
                  clean_pred, adv_pred, adv_pred != label ? 1 : 0, o.l2, o.linf,
                  o.iterations_used);
    csv += line;
  }
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw DataError("attack: cannot write " + out_path);
    out << csv;
  } else {
    std::cout << csv;
  }
  std::fprintf(stderr, "attack %s: %d/%d adversarial successes\n",
               attack_name.c_str(), successes, count);
  return 0;
}

struct DefenseOverrides {
  double c1 = -1.0, c2 = -1.0, lr = -1.0, rho = -1.0;
  int c3 = -1, iterations = -1, window = -1, kernel_d = -1;
  double kernel_e = -1.0;
  std::vector<int> layers;

  void apply(DefenseConfig& cfg) const {
    if (c1 >= 0.0) cfg.c1 = c1;
    if (c2 >= 0.0) cfg.c2 = c2;
    if (c3 >= 0) cfg.c3 = c3;
    if (iterations >= 0) cfg.transform_iterations = iterations;
    if (window >= 0) cfg.smoother_window = window;
    if (!layers.empty()) cfg.tap_layers = layers;
    if (kernel_e >= 0.0) cfg.kernel.e = kernel_e;
    if (kernel_d >= 0) cfg.kernel.d = kernel_d;
    if (lr >= 0.0) cfg.rmsprop_lr = lr;
    if (rho >= 0.0) cfg.rmsprop_rho = rho;
  }
};

int cmd_defend(const std::string& config_path, const std::string& ckpt_path,
               int count, uint64_t seed, const std::string& diagnostics_path,
               const DefenseOverrides& overrides) {
  KeyValueConfig cfg = KeyValueConfig::parse_file(config_path);
  ModelSpec spec = spec_from_config(cfg);
  SyntheticSplits data = dataset_from_config(cfg);
  Model model = load_model(ckpt_path, spec);
  DefenseConfig dcfg = defense_from_config(cfg);
  overrides.apply(dcfg);
  dcfg.sample_seed = seed;
  DefensePipeline pipeline(model, dcfg, data.train);
  count = std::min<int>(count, static_cast<int>(data.test.size()));

  std::string diag = "input_id,copy_class,initial_loss,final_loss,layer_shares,prediction\n";
  int bare_ok = 0, defended_ok = 0, overruled = 0;
  for (int i = 0; i < count; ++i) {
    const Tensor& img = data.test.images[static_cast<size_t>(i)];
    const int label = data.test.labels[static_cast<size_t>(i)];
    CommitteeResult r = pipeline.classify(img, static_cast<uint64_t>(i));
    bare_ok += r.original == label;
    defended_ok += r.final_label == label;
    overruled += r.overruled;
    for (const auto& c : r.copies) {
      double total = 0.0;
      for (const auto& [tap, loss] : c.initial_layer_loss) total += loss;
      std::string shares;
      for (const auto& [tap, loss] : c.initial_layer_loss) {
        if (!shares.empty()) shares += " ";
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%d:%.1f%%", tap,
                      total > 0 ? 100.0 * loss / total : 0.0);
        shares += buf;
      }
      char line[256];
      std::snprintf(line, sizeof(line), "%d,%d,%.6g,%.6g,\"%s\",%d\n", i,
                    c.target_class, c.initial_loss, c.final_loss, shares.c_str(),
                    c.prediction);
      diag += line;
    }
  }
  if (!diagnostics_path.empty()) {
    std::ofstream out(diagnostics_path, std::ios::trunc);
    if (!out) throw DataError("defend: cannot write " + diagnostics_path);
    out << diag;
  }
  std::printf("defended %d inputs: bare accuracy %.1f%%, defended accuracy %.1f%%, "
              "%d committee overrules\n",
              count, 100.0 * bare_ok / count, 100.0 * defended_ok / count,
              overruled);
  return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& std_ckpt,
                 const std::string& adv_ckpt, uint64_t seed,
                 const std::string& out_path, const std::string& format) {
  KeyValueConfig cfg = KeyValueConfig::parse_file(config_path);
  ExperimentPlan plan = plan_from_config(cfg);
  plan.seed = seed;
  SyntheticSplits data = dataset_from_config(cfg);
  Model std_model = load_model(std_ckpt, plan.spec);
  Model adv_model = load_model(adv_ckpt, plan.spec);
  ResultsTable table =
      run_experiment(plan, std_model, adv_model, data.train, data.test);
  write_report(out_path, table, format);
  std::fprintf(stderr, "evaluation finished in %.1fs -> %s\n", table.wall_seconds,
               out_path.c_str());
  return 0;
}

int cmd_validate(const std::string& config_path, const std::string& ckpt_path,
                 uint64_t seed, const std::string& scores_path) {
  KeyValueConfig cfg = KeyValueConfig::parse_file(config_path);
  ModelSpec spec = spec_from_config(cfg);
  SyntheticSplits data = dataset_from_config(cfg);
  Model model = load_model(ckpt_path, spec);
  DefenseConfig base = defense_from_config(cfg);
  HyperGrid grid = grid_from_config(cfg);
  std::vector<NamedAttack> mix = attacks_from_config(cfg);
  // Only bare-model attacks participate in the validation mix.
  std::vector<NamedAttack> usable;
  for (const NamedAttack& a : mix) {
    if (a.config.kind != AttackKind::BPDA_adaptive) usable.push_back(a);
  }
  std::vector<GridScore> scores;
  DefenseConfig best =
      validate_hyperparameters(model, data.train, data.validation, grid, usable,
                               base, seed, cfg.get_int("evaluate.threads", 2),
                               &scores);
  std::string csv = "c1,c2,c3,iterations,layers,score\n";
  for (const GridScore& s : scores) {
    std::string layers;
    for (size_t i = 0; i < s.config.tap_layers.size(); ++i) {
      if (i) layers += " ";
      layers += std::to_string(s.config.tap_layers[i]);
    }
    char line[160];
    std::snprintf(line, sizeof(line), "%.4f,%.4f,%d,%d,\"%s\",%.2f\n", s.config.c1,
                  s.config.c2, s.config.c3, s.config.transform_iterations,
                  layers.c_str(), s.score);
    csv += line;
  }
  if (!scores_path.empty()) {
    std::ofstream out(scores_path, std::ios::trunc);
    if (!out) throw DataError("validate: cannot write " + scores_path);
    out << csv;
  }
  std::printf("best defense config: c1=%.4f c2=%.4f c3=%d iterations=%d\n", best.c1,
              best.c2, best.c3, best.transform_iterations);
  return 0;
}

int cmd_report(const std::string& in_path, const std::string& out_path,
               const std::string& format) {
  std::ifstream in(in_path);
  if (!in) throw DataError("report: cannot open " + in_path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  ResultsTable table = parse_results_csv(text);
  write_report(out_path, table, format);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"polynomial-kernel transform defense sandbox"};
  app.require_subcommand(1);

  std::string config_path, out_path, ckpt_path, std_ckpt, adv_ckpt;
  std::string kind = "std", attack_name, format = "csv", diagnostics_path;
  std::string in_path;
  uint64_t seed = 0;
  int count = 100;
  double atk_epsilon = -1.0, atk_alpha = -1.0;
  int atk_iterations = -1;
  DefenseOverrides dov;

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path)->required();
  train->add_option("--kind", kind, "std|smooth|adv");
  train->add_option("--out", out_path)->required();
  auto* train_seed = train->add_option("--seed", seed);

  auto* attack = app.add_subcommand("attack", "attack the bare model");
  attack->add_option("--config", config_path)->required();
  attack->add_option("--ckpt", ckpt_path)->required();
  attack->add_option("--attack", attack_name)->required();
  attack->add_option("--count", count);
  attack->add_option("--seed", seed)->required();
  attack->add_option("--out", out_path);
  attack->add_option("--epsilon", atk_epsilon, "override the config epsilon");
  attack->add_option("--alpha", atk_alpha, "override the config step size");
  attack->add_option("--iterations", atk_iterations, "override the iteration count");

  auto* defend = app.add_subcommand("defend", "run defended classification");
  defend->add_option("--config", config_path)->required();
  defend->add_option("--ckpt", ckpt_path)->required();
  defend->add_option("--count", count);
  defend->add_option("--seed", seed)->required();
  defend->add_option("--diagnostics", diagnostics_path,
                     "per-copy CSV diagnostics stream");
  defend->add_option("--c1", dov.c1, "override the L1 budget");
  defend->add_option("--c2", dov.c2, "override the L-inf budget");
  defend->add_option("--c3", dov.c3, "override the vote quorum");
  defend->add_option("--iterations", dov.iterations, "override transform iterations");
  defend->add_option("--layers", dov.layers, "override the tap subset");
  defend->add_option("--window", dov.window, "override the smoothing window");
  defend->add_option("--kernel-e", dov.kernel_e, "override the kernel shift e");
  defend->add_option("--kernel-d", dov.kernel_d, "override the kernel degree d");

  auto* evaluate = app.add_subcommand("evaluate", "full experiment table");
  evaluate->add_option("--config", config_path)->required();
  evaluate->add_option("--std-ckpt", std_ckpt)->required();
  evaluate->add_option("--adv-ckpt", adv_ckpt)->required();
  evaluate->add_option("--seed", seed)->required();
  evaluate->add_option("--out", out_path)->required();
  evaluate->add_option("--format", format, "csv|markdown");

  auto* validate = app.add_subcommand("validate", "defense hyperparameter grid");
  validate->add_option("--config", config_path)->required();
  validate->add_option("--ckpt", ckpt_path)->required();
  validate->add_option("--seed", seed)->required();
  validate->add_option("--scores", out_path, "grid scores CSV path");

  auto* report = app.add_subcommand("report", "convert a results CSV");
  report->add_option("--in", in_path)->required();
  report->add_option("--out", out_path)->required();
  report->add_option("--format", format, "csv|markdown");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      return cmd_train(config_path, kind, out_path, seed, !train_seed->empty());
    }
    if (attack->parsed()) {
      return cmd_attack(config_path, ckpt_path, attack_name, count, seed, out_path,
                        atk_epsilon, atk_alpha, atk_iterations);
    }
    if (defend->parsed()) {
      return cmd_defend(config_path, ckpt_path, count, seed, diagnostics_path, dov);
    }
    if (evaluate->parsed()) {
      return cmd_evaluate(config_path, std_ckpt, adv_ckpt, seed, out_path, format);
    }
    if (validate->parsed()) {
      return cmd_validate(config_path, ckpt_path, seed, out_path);
    }
    if (report->parsed()) {
      return cmd_report(in_path, out_path, format);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return 3;
  }
  return 0;
}
