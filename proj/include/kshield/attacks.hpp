#pragma once

#include <cstdint>
#include <string>

#include "kshield/defense.hpp"
#include "kshield/network.hpp"

namespace kshield {

enum class AttackKind { FGSM, BIM, PGD, DeepFool, CW_L2, BPDA_adaptive };

AttackKind attack_kind_from_string(const std::string& s);
std::string attack_kind_name(AttackKind k);

struct CwParams {
  double confidence = 0.0;      // kappa
  int binary_search_steps = 15;
  double initial_c = 0.01;
  double lr = 0.05;             // Adam step for the inner minimization
  int iterations = 100;
};

struct AttackConfig {
  AttackKind kind = AttackKind::FGSM;
  double epsilon = 0.0;   // L-inf budget where applicable
  double alpha = 0.0;     // step size
  int iterations = 1;
  double init_radius = -1.0;  // PGD random start radius; negative means epsilon
  int restarts = 1;
  CwParams cw;
  int eot_samples = 1;
  double deepfool_overshoot = 0.02;
  int deepfool_max_iterations = 50;
  uint64_t seed = 0;
  bool project_l2 = false;  // optional L2 projection for PGD
  double epsilon_l2 = 0.0;

  void validate() const;
};

struct AttackOutcome {
  Tensor adversarial;
  bool success = false;  // the attacked system misclassifies
  double l2 = 0.0;
  double linf = 0.0;
  int iterations_used = 0;
};

AttackOutcome fgsm(const Classifier& model, const Tensor& image, int label,
                   double alpha);
AttackOutcome bim(const Classifier& model, const Tensor& image, int label,
                  const AttackConfig& cfg);
AttackOutcome pgd(const Classifier& model, const Tensor& image, int label,
                  const AttackConfig& cfg);
// Untargeted multi-class DeepFool. The loop runs until the model's prediction
// changes; when `true_label` is given, an input that is already misclassified
// returns immediately with zero perturbation and success is judged against it.
AttackOutcome deepfool(const Classifier& model, const Tensor& image,
                       const AttackConfig& cfg, int true_label = -1);
AttackOutcome cw_l2(const Classifier& model, const Tensor& image, int label,
                    const AttackConfig& cfg);
// Ensemble logit aggregation used by the adaptive attack:
// sum_k Z_k / ||Z_k||_2 over per-copy logit vectors.
Graph::NodeId aggregate_logits(Graph& g, const std::vector<Graph::NodeId>& logits);

// Adaptive end-to-end attack on the full pipeline: true defense forward,
// median-filter subgradient + identity across the transforms backward (BPDA),
// cross-entropy on the aggregated logits sum_k Z_k / ||Z_k||, EOT-averaged.
AttackOutcome bpda_adaptive(const DefensePipeline& pipeline, const Tensor& image,
                            int label, const AttackConfig& cfg);

}  // namespace kshield
