#include "kshield/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "kshield/rng.hpp"

namespace kshield {

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (true) {
      const int i = next.fetch_add(1);
      if (i >= n) break;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

AttackOutcome run_attack(const Classifier& model, const NamedAttack& attack,
                         const Tensor& image, int label, uint64_t seed) {
  AttackConfig cfg = attack.config;
  cfg.seed = seed;
  switch (cfg.kind) {
    case AttackKind::FGSM:
      return fgsm(model, image, label, cfg.alpha > 0.0 ? cfg.alpha : cfg.epsilon);
    case AttackKind::BIM:
      return bim(model, image, label, cfg);
    case AttackKind::PGD:
      return pgd(model, image, label, cfg);
    case AttackKind::DeepFool:
      return deepfool(model, image, cfg, label);
    case AttackKind::CW_L2:
      return cw_l2(model, image, label, cfg);
    case AttackKind::BPDA_adaptive:
      throw ConfigError("run_attack: bpda_adaptive needs the defense pipeline");
  }
  throw ConfigError("run_attack: unknown attack kind");
}

namespace {

uint64_t cell_key(const std::string& name) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool is_linf_bounded(AttackKind k) {
  return k == AttackKind::FGSM || k == AttackKind::BIM || k == AttackKind::PGD;
}

struct EvalSet {
  std::vector<Tensor> images;
  std::vector<int> labels;
};

// Accuracy of the bare model on an image set.
double bare_accuracy(const Model& model, const EvalSet& s, int threads) {
  std::vector<char> ok(s.images.size(), 0);
  parallel_for(static_cast<int>(s.images.size()), threads, [&](int i) {
    ok[static_cast<size_t>(i)] =
        model.predict_label(s.images[static_cast<size_t>(i)]) ==
        s.labels[static_cast<size_t>(i)];
  });
  int correct = 0;
  for (char c : ok) correct += c;
  return 100.0 * correct / static_cast<double>(s.images.size());
}

// Accuracy of the defended pipeline on an image set; stream ids follow input
// order so the result is independent of the worker count.
double defended_accuracy(const DefensePipeline& pipeline, const EvalSet& s,
                         int threads) {
  std::vector<char> ok(s.images.size(), 0);
  parallel_for(static_cast<int>(s.images.size()), threads, [&](int i) {
    CommitteeResult r =
        pipeline.classify(s.images[static_cast<size_t>(i)], static_cast<uint64_t>(i));
    ok[static_cast<size_t>(i)] = r.final_label == s.labels[static_cast<size_t>(i)];
  });
  int correct = 0;
  for (char c : ok) correct += c;
  return 100.0 * correct / static_cast<double>(s.images.size());
}

std::string layers_str(const std::vector<int>& layers) {
  std::string out;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (i) out += " ";
    out += std::to_string(layers[i]);
  }
  return out;
}

}  // namespace

ResultsTable run_experiment(const ExperimentPlan& plan, const Model& std_model,
                            const Model& adv_model, const Dataset& train,
                            const Dataset& eval_set) {
  const auto t0 = std::chrono::steady_clock::now();
  if (plan.eval_count > static_cast<int>(eval_set.size())) {
    throw ConfigError("run_experiment: eval count exceeds the split size");
  }
  if (std_model.spec().hash() != plan.spec.hash() ||
      adv_model.spec().hash() != plan.spec.hash()) {
    throw DataError("run_experiment: checkpoint/config hash mismatch");
  }

  EvalSet clean;
  for (int i = 0; i < plan.eval_count; ++i) {
    clean.images.push_back(eval_set.images[static_cast<size_t>(i)]);
    clean.labels.push_back(eval_set.labels[static_cast<size_t>(i)]);
  }

  ResultsTable table;
  table.seed = plan.seed;
  table.config_hash = plan.config_hash;
  table.columns.push_back("Clean");
  for (const NamedAttack& a : plan.attacks) table.columns.push_back(a.name);

  struct ModelUnderTest {
    const Model* model;
    std::string training;
  };
  const std::vector<ModelUnderTest> muts = {{&std_model, "Std"},
                                            {&adv_model, "Adv"}};

  for (const ModelUnderTest& mut : muts) {
    const Model& model = *mut.model;
    DefenseConfig dcfg = plan.defense;
    dcfg.sample_seed = Rng::split(plan.seed, cell_key("defense." + mut.training));
    DefensePipeline pipeline(model, dcfg, train);

    // Scenario-A adversaries against the bare network. The defense must not
    // be touched while these are generated.
    const uint64_t before = pipeline.invocations();
    std::vector<EvalSet> adv_sets(plan.attacks.size());
    for (size_t a = 0; a < plan.attacks.size(); ++a) {
      const NamedAttack& attack = plan.attacks[a];
      EvalSet& s = adv_sets[a];
      s.images.resize(clean.images.size());
      s.labels = clean.labels;
      const uint64_t base =
          Rng::split(plan.seed, cell_key(mut.training + ".A." + attack.name));
      parallel_for(plan.eval_count, plan.threads, [&](int i) {
        AttackOutcome o =
            run_attack(model, attack, clean.images[static_cast<size_t>(i)],
                       clean.labels[static_cast<size_t>(i)],
                       Rng::split(base, static_cast<uint64_t>(i)));
        s.images[static_cast<size_t>(i)] = std::move(o.adversarial);
      });
    }
    if (pipeline.invocations() != before) {
      throw NumericError("run_experiment: scenario-A generation touched the defense");
    }

    // Row 1: bare network.
    ResultsRow bare_row;
    bare_row.system = "No Defense";
    bare_row.training = mut.training;
    bare_row.scenario = "A";
    bare_row.layers = "-";
    bare_row.cells.push_back(bare_accuracy(model, clean, plan.threads));
    for (size_t a = 0; a < plan.attacks.size(); ++a) {
      bare_row.cells.push_back(bare_accuracy(model, adv_sets[a], plan.threads));
    }
    table.rows.push_back(std::move(bare_row));

    // Row 2: defended, scenario A (same adversaries, defended inference).
    const double defended_clean = defended_accuracy(pipeline, clean, plan.threads);
    ResultsRow a_row;
    a_row.system = "Full e,d=" + std::to_string(plan.defense.kernel.e).substr(0, 3) +
                   "," + std::to_string(plan.defense.kernel.d);
    a_row.training = mut.training;
    a_row.scenario = "A";
    a_row.layers = layers_str(plan.defense.tap_layers);
    a_row.cells.push_back(defended_clean);
    for (size_t a = 0; a < plan.attacks.size(); ++a) {
      a_row.cells.push_back(defended_accuracy(pipeline, adv_sets[a], plan.threads));
    }
    table.rows.push_back(std::move(a_row));

    // Row 3: defended, scenario B (adaptive end-to-end attacks; only the
    // L-inf-bounded attacks have an adaptive analog here).
    ResultsRow b_row;
    b_row.system = table.rows.back().system;
    b_row.training = mut.training;
    b_row.scenario = "B";
    b_row.layers = table.rows.back().layers;
    b_row.cells.push_back(defended_clean);
    for (size_t a = 0; a < plan.attacks.size(); ++a) {
      const NamedAttack& attack = plan.attacks[a];
      if (!is_linf_bounded(attack.config.kind)) {
        b_row.cells.push_back(std::nan(""));
        continue;
      }
      const uint64_t base =
          Rng::split(plan.seed, cell_key(mut.training + ".B." + attack.name));
      std::vector<char> ok(clean.images.size(), 0);
      parallel_for(plan.eval_count, plan.threads, [&](int i) {
        AttackConfig bcfg = attack.config;
        bcfg.seed = Rng::split(base, static_cast<uint64_t>(i));
        AttackOutcome o = bpda_adaptive(pipeline, clean.images[static_cast<size_t>(i)],
                                        clean.labels[static_cast<size_t>(i)], bcfg);
        CommitteeResult r = pipeline.classify(o.adversarial, static_cast<uint64_t>(i));
        ok[static_cast<size_t>(i)] = r.final_label == clean.labels[static_cast<size_t>(i)];
      });
      int correct = 0;
      for (char c : ok) correct += c;
      b_row.cells.push_back(100.0 * correct / static_cast<double>(clean.images.size()));
    }
    table.rows.push_back(std::move(b_row));
  }

  // Accounting: every cell covered the full plan count.
  for (const ResultsRow& row : table.rows) {
    if (row.cells.size() != table.columns.size()) {
      throw NumericError("run_experiment: row cell count mismatch");
    }
  }
  table.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return table;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

std::string format_cell(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string results_to_csv(const ResultsTable& table) {
  std::string out;
  out += "#meta,seed=" + std::to_string(table.seed) +
         ",config_hash=" + std::to_string(table.config_hash) + "\n";
  out += "System,Training,Scenario,Layers";
  for (const std::string& c : table.columns) out += "," + csv_quote(c);
  out += "\n";
  for (const ResultsRow& row : table.rows) {
    out += csv_quote(row.system) + "," + csv_quote(row.training) + "," +
           csv_quote(row.scenario) + "," + csv_quote(row.layers);
    for (double v : row.cells) out += "," + format_cell(v);
    out += "\n";
  }
  return out;
}

std::string results_to_markdown(const ResultsTable& table) {
  std::string out;
  out += "seed: " + std::to_string(table.seed) +
         ", config hash: " + std::to_string(table.config_hash) + "\n\n";
  out += "| System | Training | Scenario | Layers |";
  for (const std::string& c : table.columns) out += " " + c + " |";
  out += "\n|---|---|---|---|";
  for (size_t i = 0; i < table.columns.size(); ++i) out += "---|";
  out += "\n";
  for (const ResultsRow& row : table.rows) {
    out += "| " + row.system + " | " + row.training + " | " + row.scenario +
           " | " + row.layers + " |";
    for (double v : row.cells) {
      const std::string cell = format_cell(v);
      out += " " + (cell.empty() ? std::string("-") : cell) + " |";
    }
    out += "\n";
  }
  return out;
}

ResultsTable parse_results_csv(const std::string& text) {
  ResultsTable table;
  std::istringstream in(text);
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("#meta,", 0) == 0) {
      std::stringstream ss(line.substr(6));
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        if (tok.rfind("seed=", 0) == 0) table.seed = std::stoull(tok.substr(5));
        if (tok.rfind("config_hash=", 0) == 0) {
          table.config_hash = std::stoull(tok.substr(12));
        }
      }
      continue;
    }
    std::vector<std::string> cells = csv_split(line);
    if (!have_header) {
      if (cells.size() < 4) throw DataError("results csv: malformed header");
      for (size_t i = 4; i < cells.size(); ++i) table.columns.push_back(cells[i]);
      have_header = true;
      continue;
    }
    if (cells.size() != 4 + table.columns.size()) {
      throw DataError("results csv: row width mismatch");
    }
    ResultsRow row;
    row.system = cells[0];
    row.training = cells[1];
    row.scenario = cells[2];
    row.layers = cells[3];
    for (size_t i = 4; i < cells.size(); ++i) {
      row.cells.push_back(cells[i].empty() ? std::nan("") : std::stod(cells[i]));
    }
    table.rows.push_back(std::move(row));
  }
  if (!have_header) throw DataError("results csv: missing header");
  return table;
}

void write_report(const std::string& path, const ResultsTable& table,
                  const std::string& format) {
  std::string body;
  if (format == "csv") {
    body = results_to_csv(table);
  } else if (format == "markdown" || format == "md") {
    body = results_to_markdown(table);
  } else {
    throw ConfigError("report: unknown format '" + format + "'");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("report: cannot write " + path);
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw DataError("report: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Hyperparameter validation
// ---------------------------------------------------------------------------

DefenseConfig validate_hyperparameters(const Model& model, const Dataset& train,
                                       const Dataset& validation,
                                       const HyperGrid& grid,
                                       const std::vector<NamedAttack>& attack_mix,
                                       const DefenseConfig& base, uint64_t seed,
                                       int threads,
                                       std::vector<GridScore>* scores) {
  if (validation.images.empty()) {
    throw DataError("validate: empty validation split");
  }
  auto or_default = [](auto values, auto fallback) {
    if (values.empty()) values.push_back(fallback);
    return values;
  };
  const std::vector<double> c1s = or_default(grid.c1, base.c1);
  const std::vector<double> c2s = or_default(grid.c2, base.c2);
  const std::vector<int> c3s = or_default(grid.c3, base.c3);
  const std::vector<int> iters = or_default(grid.iterations, base.transform_iterations);
  std::vector<std::vector<int>> subsets = grid.layer_subsets;
  if (subsets.empty()) subsets.push_back(base.tap_layers);

  // The attack mix is generated once against the bare model and shared by
  // every grid point.
  EvalSet clean;
  clean.images = validation.images;
  clean.labels = validation.labels;
  std::vector<EvalSet> adv_sets(attack_mix.size());
  for (size_t a = 0; a < attack_mix.size(); ++a) {
    adv_sets[a].images.resize(clean.images.size());
    adv_sets[a].labels = clean.labels;
    const uint64_t base_seed = Rng::split(seed, cell_key("validate." + attack_mix[a].name));
    parallel_for(static_cast<int>(clean.images.size()), threads, [&](int i) {
      AttackOutcome o = run_attack(model, attack_mix[a],
                                   clean.images[static_cast<size_t>(i)],
                                   clean.labels[static_cast<size_t>(i)],
                                   Rng::split(base_seed, static_cast<uint64_t>(i)));
      adv_sets[a].images[static_cast<size_t>(i)] = std::move(o.adversarial);
    });
  }

  DefenseConfig best = base;
  double best_score = -1.0;
  for (double c1 : c1s) {
    for (double c2 : c2s) {
      for (int c3 : c3s) {
        for (int it : iters) {
          for (const std::vector<int>& layers : subsets) {
            DefenseConfig cfg = base;
            cfg.c1 = c1;
            cfg.c2 = c2;
            cfg.c3 = c3;
            cfg.transform_iterations = it;
            cfg.tap_layers = layers;
            cfg.sample_seed = Rng::split(seed, cell_key("validate.defense"));
            DefensePipeline pipeline(model, cfg, train);
            double score = defended_accuracy(pipeline, clean, threads);
            for (const EvalSet& s : adv_sets) {
              score += defended_accuracy(pipeline, s, threads);
            }
            score /= static_cast<double>(1 + adv_sets.size());
            if (scores) scores->push_back({cfg, score});
            if (score > best_score) {
              best_score = score;
              best = cfg;
            }
          }
        }
      }
    }
  }
  return best;
}

}  // namespace kshield
