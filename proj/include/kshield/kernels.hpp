#pragma once

#include <map>
#include <vector>

#include "kshield/tensor.hpp"

namespace kshield {

// Polynomial kernel parameters: kappa(u, v) = (<u, v> + e)^d.
struct KernelParams {
  double e = 0.0;
  int d = 1;
  void validate() const {
    if (e < 0.0) throw ConfigError("kernel parameter e must be >= 0");
    if (d < 1) throw ConfigError("kernel parameter d must be >= 1");
  }
};

// C x C kernel matrix of one tapped layer's feature maps.
struct KernelMatrix {
  int layer = 0;
  Tensor G;  // [C, C]
};

// Per-class transform target: tap index -> kernel matrix, computed once from
// the class sample image.
struct KernelTargetSet {
  int label = 0;
  std::map<int, KernelMatrix> targets;
};

// kappa(v_i, v_j) on flattened feature maps.
double kernel_fn(const Tensor& vi, const Tensor& vj, const KernelParams& params);

// Eager kernel matrix from features [C, H, W] (or [C, N]).
Tensor kernel_matrix(const Tensor& features, const KernelParams& params);

// Graph ops (differentiable w.r.t. the feature node).
Graph::NodeId kernel_matrix_node(Graph& g, Graph::NodeId features,
                                 const KernelParams& params);
// Squared-error kernel loss against a fixed target matrix. With `normalize`
// the sum is divided by (C*N)^2 where N is the per-map element count.
Graph::NodeId kernel_loss_node(Graph& g, Graph::NodeId features,
                               const Tensor& target, const KernelParams& params,
                               bool normalize = false);

struct KernelLossBreakdown {
  Graph::NodeId total = -1;
  std::vector<std::pair<int, Graph::NodeId>> per_layer;  // tap -> loss node
};

// Unweighted sum of per-layer kernel losses over `layer_subset`.
KernelLossBreakdown total_kernel_loss_node(
    Graph& g, const std::map<int, Graph::NodeId>& taps,
    const KernelTargetSet& targets, const std::vector<int>& layer_subset,
    const KernelParams& params, bool normalize = false);

// Explicit feature mapping phi with <phi(u), phi(v)> == kappa(u, v) exactly
// (multinomial coefficients; e absorbed as a constant pseudo-coordinate).
// Test oracle only; enforces binom(N+d, d) <= 100000.
std::vector<double> explicit_phi(const std::vector<double>& v,
                                 const KernelParams& params);

// Dimension of phi's output, binom(N+d, d); throws above the enumeration bound.
int64_t explicit_phi_dim(int n, int d);

}  // namespace kshield
