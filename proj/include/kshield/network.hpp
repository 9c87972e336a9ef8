#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kshield/dataset.hpp"
#include "kshield/tensor.hpp"

namespace kshield {

// Logits, softmax probabilities, and the argmax label (ties break toward the
// lowest class index).
struct Prediction {
  Tensor logits;  // [K]
  Tensor probs;   // [K]
  int label = 0;
};

int argmax_lowest(const std::vector<double>& v);

// A differentiable multi-class scorer. Attacks are written against this
// interface; the CNN below and the affine test models implement it.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual int num_classes() const = 0;
  virtual Shape input_shape() const = 0;  // per-image shape
  // Builds logits [N,K] for a batch input node [N, ...input_shape].
  virtual Graph::NodeId build_logits(Graph& g, Graph::NodeId batch) const = 0;

  Prediction predict(const Tensor& image) const;
  int predict_label(const Tensor& image) const;
};

struct LayerDesc {
  enum class Kind { Conv, Relu, Block, Pool, Linear };
  Kind kind;
  int arg0 = 0;  // channels (Conv/Block), window (Pool), classes (Linear)
};

// Tappable 6-block CNN: conv -> relu -> 4 residual blocks -> pool -> linear.
// Tap indices 0..5: after the first convolution, after the first ReLU, and
// after each residual block. The last two blocks run at `width_deep`
// channels (the transition block carries a 1x1 projection skip), mirroring
// the widening of deeper stages in the reference architecture.
struct ModelSpec {
  int in_channels = 3;
  int in_h = 8;
  int in_w = 8;
  int width = 8;
  int width_deep = 0;  // 0 resolves to 2 * width
  int num_classes = 4;

  static constexpr int kNumTaps = 6;
  static constexpr int kBlocks = 4;

  int deep_width() const { return width_deep > 0 ? width_deep : 2 * width; }
  // Output channels of residual block b (0-based).
  int block_width(int b) const { return b < 2 ? width : deep_width(); }

  std::vector<LayerDesc> layers() const;
  std::vector<int> tap_indices() const { return {0, 1, 2, 3, 4, 5}; }
  Shape tap_shape(int tap) const;  // [C,H,W] of the tap activation
  int64_t param_count() const;
  int flattened_features() const;  // linear layer input size
  uint64_t hash() const;
  void validate() const;
};

class Model : public Classifier {
 public:
  Model(ModelSpec spec, uint64_t init_seed);

  const ModelSpec& spec() const { return spec_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }

  int num_classes() const override { return spec_.num_classes; }
  Shape input_shape() const override {
    return {spec_.in_channels, spec_.in_h, spec_.in_w};
  }
  Graph::NodeId build_logits(Graph& g, Graph::NodeId batch) const override;

  // Adds the parameters to the graph as leaves (requires_grad as asked).
  std::vector<Graph::NodeId> param_nodes(Graph& g, bool requires_grad) const;

  struct Built {
    Graph::NodeId logits = -1;                 // [N,K]
    std::array<Graph::NodeId, ModelSpec::kNumTaps> taps{};
  };
  Built build_with(Graph& g, Graph::NodeId batch,
                   const std::vector<Graph::NodeId>& params) const;

  std::vector<Prediction> predict_batch(const Tensor& batch) const;
  Prediction forward_with_taps(const Tensor& image,
                               std::vector<Tensor>& taps_out) const;

 private:
  ModelSpec spec_;
  std::vector<Tensor> params_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

enum class TrainKind : uint8_t { Std = 0, Adv = 1 };

struct Checkpoint {
  uint32_t version = 1;
  uint64_t spec_hash = 0;
  std::vector<Tensor> params;
  uint32_t epochs = 0;
  TrainKind kind = TrainKind::Std;
  uint64_t seed = 0;
};

Checkpoint snapshot(const Model& model, uint32_t epochs, TrainKind kind,
                    uint64_t seed);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
// Loads and validates against the expected architecture.
Model load_model(const std::string& path, const ModelSpec& spec);
void restore(Model& model, const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  double lr = 0.02;
  double momentum = 0.5;
  uint64_t seed = 1;
  // Required margin of final training accuracy over chance (1/K); checked
  // only when epochs >= 1. Negative disables the check.
  double accuracy_margin = 0.0;
};

struct AdvTrainConfig {
  TrainConfig base;
  int replays = 5;          // free adversarial training m
  double trades_lambda = 1.0;
  double epsilon = 0.05;    // L-inf ball for training perturbations
};

struct TrainReport {
  double final_loss = 0.0;
  double train_accuracy = 0.0;
};

Checkpoint train_standard(Model& model, const Dataset& data,
                          const TrainConfig& cfg, TrainReport* report = nullptr);
// Each epoch iterates over the originals and their median-filtered copies.
Checkpoint train_smoothing_augmented(Model& model, const Dataset& data,
                                     int smoother_window, const TrainConfig& cfg,
                                     TrainReport* report = nullptr);
// Free adversarial training fused with a TRADES-style loss:
// CE(clean logits, label) + lambda * KL(softmax(adv) || softmax(clean)).
// The observer, when set, sees the live perturbation buffer after each replay.
Checkpoint train_adversarial(
    Model& model, const Dataset& data, const AdvTrainConfig& cfg,
    TrainReport* report = nullptr,
    const std::function<void(const std::vector<double>&)>& replay_observer = {});

double accuracy(const Model& model, const Dataset& data);
double accuracy_on(const Model& model, const std::vector<Tensor>& images,
                   const std::vector<int>& labels);

}  // namespace kshield
