#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kshield/dataset.hpp"
#include "kshield/kernels.hpp"
#include "kshield/network.hpp"

namespace kshield {

// Inference-time defense hyperparameters. Reference settings for 3x32x32
// inputs: c1 = 30.0, c2 = 0.02, c3 in {3, 9}, 10 iterations, RMSprop with
// rho = 0.1 and lr = 0.07, 2x2 median filter; c1 scales with pixel count.
struct DefenseConfig {
  double c1 = 30.0;              // L1 budget on the transform perturbation
  double c2 = 0.02;              // L-inf budget on the transform perturbation
  int c3 = 3;                    // vote quorum
  int transform_iterations = 10;
  std::vector<int> tap_layers = {1, 2, 3, 4, 5};
  KernelParams kernel;
  double rmsprop_rho = 0.1;
  double rmsprop_lr = 0.07;
  int smoother_window = 2;
  uint64_t sample_seed = 0;
  bool fixed_samples = false;     // reuse the same sample set for every input
  bool normalize_kernel_loss = false;

  void validate(int num_classes) const;
};

// Per-channel sliding-window median with edge replication (see
// median_filter_2d for the exact window semantics).
Tensor median_filter(const Tensor& image, int window);

// Euclidean projection onto the L1 ball of the given radius (sorted-threshold
// method). Inputs already inside the ball are returned unchanged.
std::vector<double> l1_ball_projection(std::vector<double> v, double radius);

// Quorum vote: H = copy predictions that differ from `original`; if the most
// common label in H has count >= c3 the vote overrules (ties break toward the
// lowest class index), otherwise the original stands.
std::pair<int, bool> vote(int original, const std::vector<int>& copy_predictions,
                          int c3);

// One sample image per class plus its precomputed kernel targets.
struct SampleSet {
  std::vector<Tensor> images;           // originals drawn from the pool
  std::vector<KernelTargetSet> targets; // computed from the smoothed samples
};

struct CommitteeResult {
  int original = 0;                   // bare prediction on raw x
  std::vector<int> copy_predictions;  // one per class copy
  std::vector<int> changed;           // multiset H
  int final_label = 0;
  bool overruled = false;

  struct CopyDiag {
    int target_class = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::map<int, double> initial_layer_loss;  // tap -> loss at iteration 0
    int prediction = 0;
    bool aborted = false;
  };
  std::vector<CopyDiag> copies;
};

// The correctly-classified smoothed training pool T_{R,c}: original training
// images whose smoothed form the bare model classifies correctly.
class SamplePool {
 public:
  SamplePool() = default;
  SamplePool(const Dataset& train, const Model& model, int smoother_window);
  int candidate_count(int cls) const;
  const Tensor& candidate(int cls, int i) const;
  int num_classes() const { return static_cast<int>(by_class_.size()); }

 private:
  std::vector<std::vector<Tensor>> by_class_;
};

class DefensePipeline {
 public:
  DefensePipeline(const Model& model, DefenseConfig config, const Dataset& train);

  // Full inference sequence: classify raw x, smooth, draw samples, transform
  // K copies, vote. `stream_id` drives per-input sampling randomness unless
  // fixed_samples is set.
  CommitteeResult classify(const Tensor& image, uint64_t stream_id = 0) const;

  SampleSet draw_samples(uint64_t seed) const;
  Tensor smooth(const Tensor& image) const;

  struct TransformOut {
    Tensor image;
    bool aborted = false;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::map<int, double> initial_layer_loss;
  };
  // All K copies transformed against their class targets; one batched graph
  // per iteration.
  std::vector<TransformOut> transform_copies(const Tensor& smoothed,
                                             const SampleSet& samples,
                                             uint64_t noise_seed) const;

  const Model& model() const { return *model_; }
  const DefenseConfig& config() const { return config_; }
  // Instrumentation: number of defense entry-point calls (classify,
  // draw_samples, transform_copies). Scenario-A generation must leave it
  // untouched.
  uint64_t invocations() const { return invocations_.load(); }

 private:
  SampleSet draw_impl(uint64_t seed) const;
  std::vector<TransformOut> transform_impl(const Tensor& smoothed,
                                           const SampleSet& samples,
                                           uint64_t noise_seed) const;

  const Model* model_;
  DefenseConfig config_;
  SamplePool pool_;
  mutable std::atomic<uint64_t> invocations_{0};
};

}  // namespace kshield
