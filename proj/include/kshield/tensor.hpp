#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kshield/errors.hpp"

namespace kshield {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense n-dimensional array of doubles. `grad` is empty unless allocated and
// then always matches `data` in length.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  static Tensor from(Shape s, std::vector<double> values);
  static Tensor scalar(double v);

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }
  bool is_scalar() const { return size() == 1; }
  double item() const;

  void ensure_grad();
  void zero_grad();
  void check_invariants() const;  // product(shape) == data.size(), dims >= 1
};

enum class Op : uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  PowInt,
  Relu,
  Tanh,
  MatMul,
  MatMulNT,
  Linear,
  Conv2d,
  MaxPool2d,
  Reshape,
  Sum,
  Mean,
  Inner,
  Concat0,
  Slice0,
  Gather,
  MaxReduce,
  Softmax,
  LogSoftmax,
  SoftmaxCrossEntropy,
  L2Normalize,
  MedianFilter,
  WeightStandardize,
};

// Reverse-mode tape over tensors. Nodes are appended in construction order,
// which is a topological order by definition; backward() walks the list in
// exact reverse order. Values are computed eagerly when a node is created.
//
// Gradient semantics: backward(seed) zeroes the per-node scratch buffers,
// seeds the scalar output with 1 and propagates. At the end the gradient of
// every requires_grad leaf is accumulated into its Tensor::grad, so repeated
// backward calls accumulate until zero_grad().
class Graph {
 public:
  using NodeId = int32_t;

  NodeId leaf(Tensor t);
  NodeId constant(Tensor t);
  NodeId scalar_const(double v) { return constant(Tensor::scalar(v)); }

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId add_scalar(NodeId a, double s);
  NodeId pow_int(NodeId a, int d);
  NodeId relu(NodeId a);
  NodeId tanh_op(NodeId a);
  NodeId matmul(NodeId a, NodeId b);     // [M,K] x [K,N]
  NodeId matmul_nt(NodeId a, NodeId b);  // [M,K] x [N,K]^T -> [M,N]
  NodeId linear(NodeId x, NodeId w, NodeId b);  // x[N,D], w[K,D], b[K]
  NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride, int padding);
  NodeId max_pool2d(NodeId x, int window, int stride);
  NodeId reshape(NodeId a, Shape s);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId inner(NodeId a, NodeId b);  // flat inner product -> scalar
  NodeId concat0(const std::vector<NodeId>& parts);
  NodeId slice0(NodeId a, int index);  // drop leading dim
  NodeId gather(NodeId a, int flat_index);
  NodeId max_reduce(NodeId a);
  NodeId softmax(NodeId logits);      // row-wise over [N,K]
  NodeId log_softmax(NodeId logits);  // row-wise over [N,K]
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int> labels);
  NodeId l2_normalize(NodeId a);  // flat vector / its L2 norm
  NodeId median_filter(NodeId a, int window);  // over trailing [H,W]
  // Per-filter weight standardization over [F, fan_in]:
  // y_f = (w_f - mean(w_f)) / sqrt(sum((w_f - mean)^2) + eps), so each output
  // row has (near-)unit L2 norm regardless of the raw weight scale.
  NodeId weight_standardize(NodeId w);

  const Tensor& val(NodeId id) const;
  Tensor& val(NodeId id);
  // Persistent gradient of a requires_grad leaf (valid after backward()).
  const std::vector<double>& leaf_grad(NodeId id) const;
  // Scratch gradient of any node from the most recent backward().
  const std::vector<double>& node_grad(NodeId id) const;

  void backward(NodeId seed);
  void zero_grad();

  int node_count() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Op op = Op::Leaf;
    std::array<NodeId, 3> in{-1, -1, -1};
    std::vector<NodeId> in_list;  // Concat0 only
    Tensor out;
    std::vector<double> gbuf;
    bool needs_grad = false;
    int i0 = 0, i1 = 0, i2 = 0;    // op attributes (stride, window, index...)
    double a0 = 0.0;               // scalar attribute
    std::vector<int> labels;       // SoftmaxCrossEntropy
    std::vector<int32_t> sel;      // selection indices for routing ops
    Shape saved_shape;             // Reshape input shape
  };

  NodeId push(Node n);
  const Node& node(NodeId id) const;
  Node& node(NodeId id);
  void check_id(NodeId id) const;
  void backward_node(Node& n);

  std::vector<Node> nodes_;
};

// Shared routine for the median filter: same-size output with edge
// replication; the selected source index per output element is recorded for
// subgradient routing. `window` >= 1; windows cover
// [i - (window-1)/2, i - (window-1)/2 + window) per axis, indices clamped.
// The median is element (window*window - 1) / 2 of the window values sorted
// by (value, flat index) — the lower median for even window sizes.
void median_filter_2d(const double* in, double* out, int32_t* sel, int64_t batch,
                      int h, int w, int window);

}  // namespace kshield
