#pragma once

#include <cstdint>
#include <functional>
#include <map>

#include <string>
#include <vector>

#include "kshield/attacks.hpp"
#include "kshield/dataset.hpp"
#include "kshield/defense.hpp"
#include "kshield/network.hpp"

namespace kshield {

// Ordered fan-out over [0, n): results keyed by index, so the output is
// deterministic regardless of worker count.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

// Flat key-value configuration with [section] headers; keys are addressed as
// "section.key". '#' and ';' start comments.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig parse_file(const std::string& path);

  bool has(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  std::string require(const std::string& key) const;
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key,
                                const std::vector<int>& fallback) const;

  // Canonical serialization (sorted keys) and its FNV-1a hash, used for
  // result provenance.
  std::string canonical() const;
  uint64_t hash() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

enum class Scenario { A, B };

struct NamedAttack {
  std::string name;
  AttackConfig config;
};

struct ExperimentPlan {
  ModelSpec spec;
  DefenseConfig defense;
  std::vector<NamedAttack> attacks;
  int eval_count = 200;
  uint64_t seed = 0;
  int threads = 2;
  uint64_t config_hash = 0;
};

struct ResultsRow {
  std::string system;
  std::string training;
  std::string scenario;
  std::string layers;
  std::vector<double> cells;  // NaN = not applicable
};

struct ResultsTable {
  std::vector<std::string> columns;  // "Clean" plus attack names
  std::vector<ResultsRow> rows;
  uint64_t seed = 0;
  uint64_t config_hash = 0;
  double wall_seconds = 0.0;  // informational; never serialized
};

// Full evaluation protocol: per training kind, the bare network row plus
// defended scenario-A and scenario-B rows. Scenario-A adversaries are
// generated without touching the defense (checked via its invocation
// counter); scenario-B uses the adaptive end-to-end attack for the
// L-inf-bounded attack configs.
ResultsTable run_experiment(const ExperimentPlan& plan, const Model& std_model,
                            const Model& adv_model, const Dataset& train,
                            const Dataset& eval_set);

std::string results_to_csv(const ResultsTable& table);
std::string results_to_markdown(const ResultsTable& table);
ResultsTable parse_results_csv(const std::string& text);
void write_report(const std::string& path, const ResultsTable& table,
                  const std::string& format);

struct HyperGrid {
  std::vector<double> c1;
  std::vector<double> c2;
  std::vector<int> c3;
  std::vector<int> iterations;
  std::vector<std::vector<int>> layer_subsets;
};

struct GridScore {
  DefenseConfig config;
  double score = 0.0;  // mean defended accuracy over clean + attack mix
};

// Grid search over defense hyperparameters maximizing defended validation
// accuracy under the attack mix (adversaries generated once against the bare
// model). Empty grid dimensions keep the base config's value.
DefenseConfig validate_hyperparameters(const Model& model, const Dataset& train,
                                       const Dataset& validation,
                                       const HyperGrid& grid,
                                       const std::vector<NamedAttack>& attack_mix,
                                       const DefenseConfig& base, uint64_t seed,
                                       int threads = 2,
                                       std::vector<GridScore>* scores = nullptr);

// Applies one named attack to one image against a bare classifier.
AttackOutcome run_attack(const Classifier& model, const NamedAttack& attack,
                         const Tensor& image, int label, uint64_t seed);

// Config-file builders.
ModelSpec spec_from_config(const KeyValueConfig& cfg);
SyntheticSplits dataset_from_config(const KeyValueConfig& cfg);
DefenseConfig defense_from_config(const KeyValueConfig& cfg);
TrainConfig train_from_config(const KeyValueConfig& cfg);
AdvTrainConfig adv_train_from_config(const KeyValueConfig& cfg);
std::vector<NamedAttack> attacks_from_config(const KeyValueConfig& cfg);
ExperimentPlan plan_from_config(const KeyValueConfig& cfg);
HyperGrid grid_from_config(const KeyValueConfig& cfg);

}  // namespace kshield
