#include "kshield/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace kshield {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
  for (int d : shape) {
    if (d < 1) throw ShapeError("tensor dimension < 1 in " + shape_str(shape));
  }
  data.assign(static_cast<size_t>(numel(shape)), fill);
}

Tensor Tensor::from(Shape s, std::vector<double> values) {
  Tensor t;
  t.shape = std::move(s);
  for (int d : t.shape) {
    if (d < 1) throw ShapeError("tensor dimension < 1 in " + shape_str(t.shape));
  }
  if (numel(t.shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(t.shape));
  }
  t.data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::item() const {
  if (!is_scalar()) throw ShapeError("item() on non-scalar " + shape_str(shape));
  return data[0];
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

void Tensor::check_invariants() const {
  for (int d : shape) {
    if (d < 1) throw ShapeError("tensor dimension < 1 in " + shape_str(shape));
  }
  if (numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data length does not match shape " + shape_str(shape));
  }
  if (!grad.empty() && grad.size() != data.size()) {
    throw ShapeError("grad length does not match data length");
  }
}

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace

Graph::NodeId Graph::push(Node n) {
  for (NodeId in : n.in) {
    if (in >= 0 && in >= static_cast<NodeId>(nodes_.size())) {
      throw ShapeError("graph input id out of order");
    }
  }
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Graph::Node& Graph::node(NodeId id) const {
  check_id(id);
  return nodes_[static_cast<size_t>(id)];
}

Graph::Node& Graph::node(NodeId id) {
  check_id(id);
  return nodes_[static_cast<size_t>(id)];
}

void Graph::check_id(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) {
    throw ShapeError("invalid node id " + std::to_string(id));
  }
}

Graph::NodeId Graph::leaf(Tensor t) {
  t.check_invariants();
  Node n;
  n.op = Op::Leaf;
  n.needs_grad = t.requires_grad;
  if (t.requires_grad) t.ensure_grad();
  n.out = std::move(t);
  return push(std::move(n));
}

Graph::NodeId Graph::constant(Tensor t) {
  t.requires_grad = false;
  return leaf(std::move(t));
}

const Tensor& Graph::val(NodeId id) const { return node(id).out; }
Tensor& Graph::val(NodeId id) { return node(id).out; }

const std::vector<double>& Graph::leaf_grad(NodeId id) const {
  const Node& n = node(id);
  if (n.op != Op::Leaf || !n.out.requires_grad) {
    throw ShapeError("leaf_grad on non-leaf or non-grad node");
  }
  return n.out.grad;
}

const std::vector<double>& Graph::node_grad(NodeId id) const {
  return node(id).gbuf;
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

Graph::NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(same_shape(ta.shape, tb.shape),
          "add: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.op = Op::Add;
  n.in = {a, b, -1};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) n.out.data[i] = ta.data[i] + tb.data[i];
  return push(std::move(n));
}

Graph::NodeId Graph::sub(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(same_shape(ta.shape, tb.shape),
          "sub: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.op = Op::Sub;
  n.in = {a, b, -1};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) n.out.data[i] = ta.data[i] - tb.data[i];
  return push(std::move(n));
}

Graph::NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(same_shape(ta.shape, tb.shape),
          "mul: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.op = Op::Mul;
  n.in = {a, b, -1};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) n.out.data[i] = ta.data[i] * tb.data[i];
  return push(std::move(n));
}

Graph::NodeId Graph::scale(NodeId a, double s) {
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::Scale;
  n.in = {a, -1, -1};
  n.a0 = s;
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) n.out.data[i] = s * ta.data[i];
  return push(std::move(n));
}

Graph::NodeId Graph::add_scalar(NodeId a, double s) {
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::AddScalar;
  n.in = {a, -1, -1};
  n.a0 = s;
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) n.out.data[i] = ta.data[i] + s;
  return push(std::move(n));
}

Graph::NodeId Graph::pow_int(NodeId a, int d) {
  if (d < 1) throw ShapeError("pow_int: exponent must be >= 1");
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::PowInt;
  n.in = {a, -1, -1};
  n.i0 = d;
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) {
    double v = ta.data[i];
    double p = v;
    for (int k = 1; k < d; ++k) p *= v;
    n.out.data[i] = p;
  }
  return push(std::move(n));
}

Graph::NodeId Graph::relu(NodeId a) {
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::Relu;
  n.in = {a, -1, -1};
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i)
    n.out.data[i] = ta.data[i] > 0.0 ? ta.data[i] : 0.0;
  return push(std::move(n));
}

Graph::NodeId Graph::tanh_op(NodeId a) {
  const Tensor& ta = val(a);
  Node n;
  n.op = Op::Tanh;
  n.in = {a, -1, -1};
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) n.out.data[i] = std::tanh(ta.data[i]);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Graph::NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.ndim() == 2 && tb.ndim() == 2, "matmul: inputs must be 2-D");
  const int m = ta.dim(0), k = ta.dim(1);
  require(tb.dim(0) == k, "matmul: inner dimensions disagree");
  const int p = tb.dim(1);
  Node n;
  n.op = Op::MatMul;
  n.in = {a, b, -1};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = Tensor({m, p});
  const double* A = ta.data.data();
  const double* B = tb.data.data();
  double* Y = n.out.data.data();
  for (int i = 0; i < m; ++i) {
    for (int t = 0; t < k; ++t) {
      const double av = A[i * k + t];
      const double* brow = B + t * p;
      double* yrow = Y + i * p;
      for (int j = 0; j < p; ++j) yrow[j] += av * brow[j];
    }
  }
  return push(std::move(n));
}

Graph::NodeId Graph::matmul_nt(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.ndim() == 2 && tb.ndim() == 2, "matmul_nt: inputs must be 2-D");
  const int m = ta.dim(0), k = ta.dim(1);
  require(tb.dim(1) == k, "matmul_nt: inner dimensions disagree");
  const int p = tb.dim(0);
  Node n;
  n.op = Op::MatMulNT;
  n.in = {a, b, -1};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = Tensor({m, p});
  const double* A = ta.data.data();
  const double* B = tb.data.data();
  double* Y = n.out.data.data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < p; ++j) {
      const double* arow = A + i * k;
      const double* brow = B + j * k;
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += arow[t] * brow[t];
      Y[i * p + j] = acc;
    }
  }
  return push(std::move(n));
}

Graph::NodeId Graph::linear(NodeId x, NodeId w, NodeId b) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  const Tensor& tb = val(b);
  require(tx.ndim() == 2 && tw.ndim() == 2 && tb.ndim() == 1,
          "linear: expected x[N,D], w[K,D], b[K]");
  const int nrows = tx.dim(0), d = tx.dim(1), k = tw.dim(0);
  require(tw.dim(1) == d, "linear: inner dimensions disagree (" +
                              shape_str(tx.shape) + " vs " + shape_str(tw.shape) + ")");
  require(tb.dim(0) == k, "linear: bias length mismatch");
  Node n;
  n.op = Op::Linear;
  n.in = {x, w, b};
  n.needs_grad =
      node(x).needs_grad || node(w).needs_grad || node(b).needs_grad;
  n.out = Tensor({nrows, k});
  const double* X = tx.data.data();
  const double* W = tw.data.data();
  const double* B = tb.data.data();
  double* Y = n.out.data.data();
  for (int i = 0; i < nrows; ++i) {
    for (int j = 0; j < k; ++j) {
      const double* xrow = X + i * d;
      const double* wrow = W + j * d;
      double acc = B[j];
      for (int t = 0; t < d; ++t) acc += xrow[t] * wrow[t];
      Y[i * k + j] = acc;
    }
  }
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Convolution / pooling / filtering
// ---------------------------------------------------------------------------

Graph::NodeId Graph::conv2d(NodeId x, NodeId w, NodeId b, int stride, int padding) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  const Tensor& tb = val(b);
  require(tx.ndim() == 4, "conv2d: input must be [N,C,H,W]");
  require(tw.ndim() == 4, "conv2d: weight must be [F,C,kh,kw]");
  require(tb.ndim() == 1, "conv2d: bias must be [F]");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  const int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  const int F = tw.dim(0), kh = tw.dim(2), kw = tw.dim(3);
  require(tw.dim(1) == C, "conv2d: input channels " + std::to_string(C) +
                              " do not match weight channels " +
                              std::to_string(tw.dim(1)));
  require(tb.dim(0) == F, "conv2d: bias length mismatch");
  require(kh <= H + 2 * padding && kw <= W + 2 * padding,
          "conv2d: kernel larger than padded input");
  const int OH = (H + 2 * padding - kh) / stride + 1;
  const int OW = (W + 2 * padding - kw) / stride + 1;

  Node n;
  n.op = Op::Conv2d;
  n.in = {x, w, b};
  n.i0 = stride;
  n.i1 = padding;
  n.needs_grad =
      node(x).needs_grad || node(w).needs_grad || node(b).needs_grad;
  n.out = Tensor({N, F, OH, OW});
  const double* X = tx.data.data();
  const double* Wt = tw.data.data();
  const double* B = tb.data.data();
  double* Y = n.out.data.data();
  for (int nn = 0; nn < N; ++nn) {
    for (int f = 0; f < F; ++f) {
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow) {
          double acc = B[f];
          const int ih0 = oh * stride - padding;
          const int iw0 = ow * stride - padding;
          for (int c = 0; c < C; ++c) {
            const double* xc = X + ((nn * C + c) * H) * W;
            const double* wc = Wt + ((f * C + c) * kh) * kw;
            for (int r = 0; r < kh; ++r) {
              const int ih = ih0 + r;
              if (ih < 0 || ih >= H) continue;
              const double* xrow = xc + ih * W;
              const double* wrow = wc + r * kw;
              for (int s = 0; s < kw; ++s) {
                const int iw = iw0 + s;
                if (iw < 0 || iw >= W) continue;
                acc += xrow[iw] * wrow[s];
              }
            }
          }
          Y[((nn * F + f) * OH + oh) * OW + ow] = acc;
        }
      }
    }
  }
  return push(std::move(n));
}

Graph::NodeId Graph::max_pool2d(NodeId x, int window, int stride) {
  const Tensor& tx = val(x);
  require(tx.ndim() == 4, "max_pool2d: input must be [N,C,H,W]");
  if (window < 1 || stride < 1) throw ShapeError("max_pool2d: window and stride must be >= 1");
  const int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  require(window <= H && window <= W, "max_pool2d: window larger than input");
  const int OH = (H - window) / stride + 1;
  const int OW = (W - window) / stride + 1;
  Node n;
  n.op = Op::MaxPool2d;
  n.in = {x, -1, -1};
  n.i0 = window;
  n.i1 = stride;
  n.needs_grad = node(x).needs_grad;
  n.out = Tensor({N, C, OH, OW});
  n.sel.assign(n.out.data.size(), 0);
  const double* X = tx.data.data();
  double* Y = n.out.data.data();
  int64_t oi = 0;
  for (int nn = 0; nn < N; ++nn) {
    for (int c = 0; c < C; ++c) {
      const double* xc = X + ((nn * C + c) * H) * W;
      const int64_t base = (static_cast<int64_t>(nn) * C + c) * H * W;
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow, ++oi) {
          int bi = -1;
          double bv = 0.0;
          for (int r = 0; r < window; ++r) {
            const int ih = oh * stride + r;
            for (int s = 0; s < window; ++s) {
              const int iw = ow * stride + s;
              const double v = xc[ih * W + iw];
              if (bi < 0 || v > bv) {
                bv = v;
                bi = ih * W + iw;
              }
            }
          }
          Y[oi] = bv;
          n.sel[static_cast<size_t>(oi)] = static_cast<int32_t>(base + bi);
        }
      }
    }
  }
  return push(std::move(n));
}

void median_filter_2d(const double* in, double* out, int32_t* sel, int64_t batch,
                      int h, int w, int window) {
  if (window < 1) throw ShapeError("median_filter: window must be >= 1");
  if (window > h || window > w) {
    throw ShapeError("median_filter: window " + std::to_string(window) +
                     " larger than image " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  const int off = (window - 1) / 2;
  const int count = window * window;
  const int mid = (count - 1) / 2;
  std::vector<std::pair<double, int32_t>> vals(static_cast<size_t>(count));
  for (int64_t b = 0; b < batch; ++b) {
    const double* src = in + b * h * w;
    double* dst = out + b * h * w;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        int m = 0;
        for (int r = 0; r < window; ++r) {
          int ih = i - off + r;
          ih = ih < 0 ? 0 : (ih >= h ? h - 1 : ih);
          for (int s = 0; s < window; ++s) {
            int iw = j - off + s;
            iw = iw < 0 ? 0 : (iw >= w ? w - 1 : iw);
            vals[static_cast<size_t>(m++)] = {src[ih * w + iw],
                                              static_cast<int32_t>(ih * w + iw)};
          }
        }
        std::sort(vals.begin(), vals.end());
        dst[i * w + j] = vals[static_cast<size_t>(mid)].first;
        if (sel) {
          sel[b * h * w + i * w + j] =
              static_cast<int32_t>(b * h * w) + vals[static_cast<size_t>(mid)].second;
        }
      }
    }
  }
}

Graph::NodeId Graph::median_filter(NodeId a, int window) {
  const Tensor& ta = val(a);
  require(ta.ndim() >= 2, "median_filter: input must have >= 2 dims");
  const int h = ta.dim(ta.ndim() - 2);
  const int w = ta.dim(ta.ndim() - 1);
  const int64_t batch = ta.size() / (static_cast<int64_t>(h) * w);
  Node n;
  n.op = Op::MedianFilter;
  n.in = {a, -1, -1};
  n.i0 = window;
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor(ta.shape);
  n.sel.assign(ta.data.size(), 0);
  median_filter_2d(ta.data.data(), n.out.data.data(), n.sel.data(), batch, h, w,
                   window);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Shape and reduction ops
// ---------------------------------------------------------------------------

Graph::NodeId Graph::reshape(NodeId a, Shape s) {
  const Tensor& ta = val(a);
  require(numel(s) == ta.size(), "reshape: element count mismatch " +
                                     shape_str(ta.shape) + " -> " + shape_str(s));
  Node n;
  n.op = Op::Reshape;
  n.in = {a, -1, -1};
  n.saved_shape = ta.shape;
  n.needs_grad = node(a).needs_grad;
  n.out = ta;
  n.out.requires_grad = false;
  n.out.grad.clear();
  n.out.shape = std::move(s);
  return push(std::move(n));
}

Graph::NodeId Graph::sum(NodeId a) {
  const Tensor& ta = val(a);
  double acc = 0.0;
  for (double v : ta.data) acc += v;
  Node n;
  n.op = Op::Sum;
  n.in = {a, -1, -1};
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor::scalar(acc);
  return push(std::move(n));
}

Graph::NodeId Graph::mean(NodeId a) {
  const Tensor& ta = val(a);
  double acc = 0.0;
  for (double v : ta.data) acc += v;
  Node n;
  n.op = Op::Mean;
  n.in = {a, -1, -1};
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor::scalar(acc / static_cast<double>(ta.size()));
  return push(std::move(n));
}

Graph::NodeId Graph::inner(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.size() == tb.size(),
          "inner: element count mismatch " + shape_str(ta.shape) + " vs " +
              shape_str(tb.shape));
  double acc = 0.0;
  for (size_t i = 0; i < ta.data.size(); ++i) acc += ta.data[i] * tb.data[i];
  Node n;
  n.op = Op::Inner;
  n.in = {a, b, -1};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = Tensor::scalar(acc);
  return push(std::move(n));
}

Graph::NodeId Graph::concat0(const std::vector<NodeId>& parts) {
  require(!parts.empty(), "concat0: empty input list");
  const Tensor& t0 = val(parts[0]);
  Shape tail(t0.shape.begin() + 1, t0.shape.end());
  int total0 = 0;
  bool ng = false;
  for (NodeId p : parts) {
    const Tensor& tp = val(p);
    require(tp.ndim() == t0.ndim(), "concat0: rank mismatch");
    Shape ptail(tp.shape.begin() + 1, tp.shape.end());
    require(ptail == tail, "concat0: trailing shape mismatch");
    total0 += tp.dim(0);
    ng = ng || node(p).needs_grad;
  }
  Shape out_shape;
  out_shape.push_back(total0);
  out_shape.insert(out_shape.end(), tail.begin(), tail.end());
  Node n;
  n.op = Op::Concat0;
  n.in_list = parts;
  n.needs_grad = ng;
  n.out = Tensor(out_shape);
  size_t off = 0;
  for (NodeId p : parts) {
    const Tensor& tp = val(p);
    std::copy(tp.data.begin(), tp.data.end(), n.out.data.begin() + off);
    off += tp.data.size();
  }
  return push(std::move(n));
}

Graph::NodeId Graph::slice0(NodeId a, int index) {
  const Tensor& ta = val(a);
  require(ta.ndim() >= 1, "slice0: input must have >= 1 dim");
  require(index >= 0 && index < ta.dim(0), "slice0: index out of range");
  Shape out_shape(ta.shape.begin() + 1, ta.shape.end());
  if (out_shape.empty()) out_shape.push_back(1);
  const int64_t stride = numel(out_shape);
  Node n;
  n.op = Op::Slice0;
  n.in = {a, -1, -1};
  n.i0 = index;
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor(out_shape);
  std::copy(ta.data.begin() + index * stride,
            ta.data.begin() + (index + 1) * stride, n.out.data.begin());
  return push(std::move(n));
}

Graph::NodeId Graph::gather(NodeId a, int flat_index) {
  const Tensor& ta = val(a);
  require(flat_index >= 0 && flat_index < ta.size(), "gather: index out of range");
  Node n;
  n.op = Op::Gather;
  n.in = {a, -1, -1};
  n.i0 = flat_index;
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor::scalar(ta.data[static_cast<size_t>(flat_index)]);
  return push(std::move(n));
}

Graph::NodeId Graph::max_reduce(NodeId a) {
  const Tensor& ta = val(a);
  int bi = 0;
  for (size_t i = 1; i < ta.data.size(); ++i) {
    if (ta.data[i] > ta.data[static_cast<size_t>(bi)]) bi = static_cast<int>(i);
  }
  Node n;
  n.op = Op::MaxReduce;
  n.in = {a, -1, -1};
  n.sel = {static_cast<int32_t>(bi)};
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor::scalar(ta.data[static_cast<size_t>(bi)]);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace {

// Row-wise softmax with max subtraction; `p` may alias nothing.
void softmax_rows(const double* z, double* p, int nrows, int k) {
  for (int i = 0; i < nrows; ++i) {
    const double* zr = z + i * k;
    double* pr = p + i * k;
    double m = zr[0];
    for (int j = 1; j < k; ++j) m = std::max(m, zr[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      pr[j] = std::exp(zr[j] - m);
      s += pr[j];
    }
    for (int j = 0; j < k; ++j) pr[j] /= s;
  }
}

}  // namespace

Graph::NodeId Graph::softmax(NodeId logits) {
  const Tensor& tz = val(logits);
  require(tz.ndim() == 2, "softmax: input must be [N,K]");
  Node n;
  n.op = Op::Softmax;
  n.in = {logits, -1, -1};
  n.needs_grad = node(logits).needs_grad;
  n.out = Tensor(tz.shape);
  softmax_rows(tz.data.data(), n.out.data.data(), tz.dim(0), tz.dim(1));
  return push(std::move(n));
}

Graph::NodeId Graph::log_softmax(NodeId logits) {
  const Tensor& tz = val(logits);
  require(tz.ndim() == 2, "log_softmax: input must be [N,K]");
  const int nrows = tz.dim(0), k = tz.dim(1);
  Node n;
  n.op = Op::LogSoftmax;
  n.in = {logits, -1, -1};
  n.needs_grad = node(logits).needs_grad;
  n.out = Tensor(tz.shape);
  for (int i = 0; i < nrows; ++i) {
    const double* zr = tz.data.data() + i * k;
    double* yr = n.out.data.data() + i * k;
    double m = zr[0];
    for (int j = 1; j < k; ++j) m = std::max(m, zr[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(zr[j] - m);
    const double lse = m + std::log(s);
    for (int j = 0; j < k; ++j) yr[j] = zr[j] - lse;
  }
  return push(std::move(n));
}

Graph::NodeId Graph::softmax_cross_entropy(NodeId logits, std::vector<int> labels) {
  const Tensor& tz = val(logits);
  require(tz.ndim() == 2, "softmax_cross_entropy: logits must be [N,K]");
  const int nrows = tz.dim(0), k = tz.dim(1);
  require(static_cast<int>(labels.size()) == nrows,
          "softmax_cross_entropy: label count mismatch");
  for (int y : labels) {
    if (y < 0 || y >= k) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) +
                       " out of range [0," + std::to_string(k) + ")");
    }
  }
  double loss = 0.0;
  for (int i = 0; i < nrows; ++i) {
    const double* zr = tz.data.data() + i * k;
    double m = zr[0];
    for (int j = 1; j < k; ++j) m = std::max(m, zr[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(zr[j] - m);
    loss += m + std::log(s) - zr[labels[static_cast<size_t>(i)]];
  }
  Node n;
  n.op = Op::SoftmaxCrossEntropy;
  n.in = {logits, -1, -1};
  n.labels = std::move(labels);
  n.needs_grad = node(logits).needs_grad;
  n.out = Tensor::scalar(loss / static_cast<double>(nrows));
  return push(std::move(n));
}

Graph::NodeId Graph::l2_normalize(NodeId a) {
  const Tensor& ta = val(a);
  double sq = 0.0;
  for (double v : ta.data) sq += v * v;
  const double nrm = std::sqrt(sq);
  if (!(nrm > 0.0)) throw NumericError("l2_normalize: zero-norm input");
  Node n;
  n.op = Op::L2Normalize;
  n.in = {a, -1, -1};
  n.a0 = nrm;
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor(ta.shape);
  for (size_t i = 0; i < ta.data.size(); ++i) n.out.data[i] = ta.data[i] / nrm;
  return push(std::move(n));
}

Graph::NodeId Graph::weight_standardize(NodeId w) {
  const Tensor& tw = val(w);
  require(tw.ndim() >= 2, "weight_standardize: input must have >= 2 dims");
  const int f = tw.dim(0);
  const int fan = static_cast<int>(tw.size() / f);
  Node n;
  n.op = Op::WeightStandardize;
  n.in = {w, -1, -1};
  n.needs_grad = node(w).needs_grad;
  n.out = Tensor(tw.shape);
  for (int i = 0; i < f; ++i) {
    const double* row = tw.data.data() + static_cast<size_t>(i) * fan;
    double* out = n.out.data.data() + static_cast<size_t>(i) * fan;
    double mu = 0.0;
    for (int j = 0; j < fan; ++j) mu += row[j];
    mu /= fan;
    double ss = 0.0;
    for (int j = 0; j < fan; ++j) ss += (row[j] - mu) * (row[j] - mu);
    const double s = std::sqrt(ss + 1e-8);
    for (int j = 0; j < fan; ++j) out[j] = (row[j] - mu) / s;
  }
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void Graph::zero_grad() {
  for (Node& n : nodes_) {
    if (n.op == Op::Leaf && n.out.requires_grad) n.out.zero_grad();
  }
}

void Graph::backward(NodeId seed) {
  Node& s = node(seed);
  if (!s.out.is_scalar()) {
    throw ShapeError("backward: seed must be a scalar (got " +
                     shape_str(s.out.shape) + ")");
  }
  for (NodeId i = 0; i <= seed; ++i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needs_grad) continue;
    n.gbuf.assign(n.out.data.size(), 0.0);
  }
  if (!s.needs_grad) return;  // nothing upstream requires gradients
  s.gbuf[0] = 1.0;
  for (NodeId i = seed; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needs_grad || n.gbuf.empty()) continue;
    backward_node(n);
  }
  for (NodeId i = 0; i <= seed; ++i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.op == Op::Leaf && n.out.requires_grad && !n.gbuf.empty()) {
      n.out.ensure_grad();
      for (size_t j = 0; j < n.gbuf.size(); ++j) n.out.grad[j] += n.gbuf[j];
    }
  }
}

void Graph::backward_node(Node& n) {
  auto in_needs = [&](int slot) {
    const NodeId id = slot < 3 ? n.in[static_cast<size_t>(slot)] : -1;
    return id >= 0 && node(id).needs_grad;
  };
  auto gin = [&](int slot) -> std::vector<double>& {
    return node(n.in[static_cast<size_t>(slot)]).gbuf;
  };
  auto vin = [&](int slot) -> const Tensor& {
    return node(n.in[static_cast<size_t>(slot)]).out;
  };
  const std::vector<double>& g = n.gbuf;

  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::Add: {
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (in_needs(1)) {
        auto& gb = gin(1);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
      break;
    }
    case Op::Sub: {
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (in_needs(1)) {
        auto& gb = gin(1);
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
      break;
    }
    case Op::Mul: {
      const Tensor& a = vin(0);
      const Tensor& b = vin(1);
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data[i];
      }
      if (in_needs(1)) {
        auto& gb = gin(1);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data[i];
      }
      break;
    }
    case Op::Scale: {
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += n.a0 * g[i];
      }
      break;
    }
    case Op::AddScalar: {
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      break;
    }
    case Op::PowInt: {
      if (in_needs(0)) {
        const Tensor& a = vin(0);
        auto& ga = gin(0);
        const int d = n.i0;
        for (size_t i = 0; i < g.size(); ++i) {
          double p = 1.0;
          for (int k = 1; k < d; ++k) p *= a.data[i];
          ga[i] += static_cast<double>(d) * p * g[i];
        }
      }
      break;
    }
    case Op::Relu: {
      if (in_needs(0)) {
        const Tensor& a = vin(0);
        auto& ga = gin(0);
        for (size_t i = 0; i < g.size(); ++i) {
          if (a.data[i] > 0.0) ga[i] += g[i];
        }
      }
      break;
    }
    case Op::Tanh: {
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (size_t i = 0; i < g.size(); ++i) {
          const double y = n.out.data[i];
          ga[i] += (1.0 - y * y) * g[i];
        }
      }
      break;
    }
    case Op::MatMul: {
      const Tensor& a = vin(0);
      const Tensor& b = vin(1);
      const int m = a.dim(0), k = a.dim(1), p = b.dim(1);
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < p; ++j) {
            const double gv = g[static_cast<size_t>(i * p + j)];
            if (gv == 0.0) continue;
            for (int t = 0; t < k; ++t)
              ga[static_cast<size_t>(i * k + t)] += gv * b.data[static_cast<size_t>(t * p + j)];
          }
        }
      }
      if (in_needs(1)) {
        auto& gb = gin(1);
        for (int i = 0; i < m; ++i) {
          for (int t = 0; t < k; ++t) {
            const double av = a.data[static_cast<size_t>(i * k + t)];
            if (av == 0.0) continue;
            for (int j = 0; j < p; ++j)
              gb[static_cast<size_t>(t * p + j)] += av * g[static_cast<size_t>(i * p + j)];
          }
        }
      }
      break;
    }
    case Op::MatMulNT: {
      const Tensor& a = vin(0);
      const Tensor& b = vin(1);
      const int m = a.dim(0), k = a.dim(1), p = b.dim(0);
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < p; ++j) {
            const double gv = g[static_cast<size_t>(i * p + j)];
            if (gv == 0.0) continue;
            const double* brow = b.data.data() + static_cast<size_t>(j) * k;
            double* garow = ga.data() + static_cast<size_t>(i) * k;
            for (int t = 0; t < k; ++t) garow[t] += gv * brow[t];
          }
        }
      }
      if (in_needs(1)) {
        auto& gb = gin(1);
        for (int i = 0; i < m; ++i) {
          const double* arow = a.data.data() + static_cast<size_t>(i) * k;
          for (int j = 0; j < p; ++j) {
            const double gv = g[static_cast<size_t>(i * p + j)];
            if (gv == 0.0) continue;
            double* gbrow = gb.data() + static_cast<size_t>(j) * k;
            for (int t = 0; t < k; ++t) gbrow[t] += gv * arow[t];
          }
        }
      }
      break;
    }
    case Op::Linear: {
      const Tensor& x = vin(0);
      const Tensor& w = vin(1);
      const int nrows = x.dim(0), d = x.dim(1), k = w.dim(0);
      if (in_needs(0)) {
        auto& gx = gin(0);
        for (int i = 0; i < nrows; ++i) {
          for (int j = 0; j < k; ++j) {
            const double gv = g[static_cast<size_t>(i * k + j)];
            if (gv == 0.0) continue;
            const double* wrow = w.data.data() + static_cast<size_t>(j) * d;
            double* gxrow = gx.data() + static_cast<size_t>(i) * d;
            for (int t = 0; t < d; ++t) gxrow[t] += gv * wrow[t];
          }
        }
      }
      if (in_needs(1)) {
        auto& gw = gin(1);
        for (int i = 0; i < nrows; ++i) {
          const double* xrow = x.data.data() + static_cast<size_t>(i) * d;
          for (int j = 0; j < k; ++j) {
            const double gv = g[static_cast<size_t>(i * k + j)];
            if (gv == 0.0) continue;
            double* gwrow = gw.data() + static_cast<size_t>(j) * d;
            for (int t = 0; t < d; ++t) gwrow[t] += gv * xrow[t];
          }
        }
      }
      if (in_needs(2)) {
        auto& gb = gin(2);
        for (int i = 0; i < nrows; ++i) {
          for (int j = 0; j < k; ++j) gb[static_cast<size_t>(j)] += g[static_cast<size_t>(i * k + j)];
        }
      }
      break;
    }
    case Op::Conv2d: {
      const Tensor& x = vin(0);
      const Tensor& w = vin(1);
      const int stride = n.i0, padding = n.i1;
      const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
      const int OH = n.out.dim(2), OW = n.out.dim(3);
      const bool need_x = in_needs(0);
      const bool need_w = in_needs(1);
      const bool need_b = in_needs(2);
      auto* gx = need_x ? gin(0).data() : nullptr;
      auto* gw = need_w ? gin(1).data() : nullptr;
      auto* gb = need_b ? gin(2).data() : nullptr;
      for (int nn = 0; nn < N; ++nn) {
        for (int f = 0; f < F; ++f) {
          for (int oh = 0; oh < OH; ++oh) {
            for (int ow = 0; ow < OW; ++ow) {
              const double gv =
                  g[static_cast<size_t>(((nn * F + f) * OH + oh) * OW + ow)];
              if (gv == 0.0) continue;
              if (gb) gb[f] += gv;
              if (!need_x && !need_w) continue;
              const int ih0 = oh * stride - padding;
              const int iw0 = ow * stride - padding;
              for (int c = 0; c < C; ++c) {
                const int64_t xoff = (static_cast<int64_t>(nn) * C + c) * H * W;
                const int64_t woff = (static_cast<int64_t>(f) * C + c) * kh * kw;
                for (int r = 0; r < kh; ++r) {
                  const int ih = ih0 + r;
                  if (ih < 0 || ih >= H) continue;
                  for (int s = 0; s < kw; ++s) {
                    const int iw = iw0 + s;
                    if (iw < 0 || iw >= W) continue;
                    if (gx) gx[xoff + ih * W + iw] += gv * w.data[static_cast<size_t>(woff + r * kw + s)];
                    if (gw) gw[woff + r * kw + s] += gv * x.data[static_cast<size_t>(xoff + ih * W + iw)];
                  }
                }
              }
            }
          }
        }
      }
      break;
    }
    case Op::MaxPool2d:
    case Op::MedianFilter: {
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (size_t i = 0; i < g.size(); ++i) ga[static_cast<size_t>(n.sel[i])] += g[i];
      }
      break;
    }
    case Op::Reshape: {
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      break;
    }
    case Op::Sum: {
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
      }
      break;
    }
    case Op::Mean: {
      if (in_needs(0)) {
        auto& ga = gin(0);
        const double s = g[0] / static_cast<double>(ga.size());
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += s;
      }
      break;
    }
    case Op::Inner: {
      const Tensor& a = vin(0);
      const Tensor& b = vin(1);
      if (in_needs(0)) {
        auto& ga = gin(0);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * b.data[i];
      }
      if (in_needs(1)) {
        auto& gb = gin(1);
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * a.data[i];
      }
      break;
    }
    case Op::Concat0: {
      size_t off = 0;
      for (NodeId p : n.in_list) {
        Node& pn = node(p);
        const size_t len = pn.out.data.size();
        if (pn.needs_grad) {
          for (size_t i = 0; i < len; ++i) pn.gbuf[i] += g[off + i];
        }
        off += len;
      }
      break;
    }
    case Op::Slice0: {
      if (in_needs(0)) {
        auto& ga = gin(0);
        const size_t off = static_cast<size_t>(n.i0) * g.size();
        for (size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
      }
      break;
    }
    case Op::Gather: {
      if (in_needs(0)) gin(0)[static_cast<size_t>(n.i0)] += g[0];
      break;
    }
    case Op::MaxReduce: {
      if (in_needs(0)) gin(0)[static_cast<size_t>(n.sel[0])] += g[0];
      break;
    }
    case Op::Softmax: {
      if (in_needs(0)) {
        auto& gz = gin(0);
        const int nrows = n.out.dim(0), k = n.out.dim(1);
        for (int i = 0; i < nrows; ++i) {
          const double* p = n.out.data.data() + static_cast<size_t>(i) * k;
          const double* gr = g.data() + static_cast<size_t>(i) * k;
          double dot = 0.0;
          for (int j = 0; j < k; ++j) dot += p[j] * gr[j];
          double* gzr = gz.data() + static_cast<size_t>(i) * k;
          for (int j = 0; j < k; ++j) gzr[j] += p[j] * (gr[j] - dot);
        }
      }
      break;
    }
    case Op::LogSoftmax: {
      if (in_needs(0)) {
        auto& gz = gin(0);
        const int nrows = n.out.dim(0), k = n.out.dim(1);
        for (int i = 0; i < nrows; ++i) {
          const double* y = n.out.data.data() + static_cast<size_t>(i) * k;
          const double* gr = g.data() + static_cast<size_t>(i) * k;
          double gsum = 0.0;
          for (int j = 0; j < k; ++j) gsum += gr[j];
          double* gzr = gz.data() + static_cast<size_t>(i) * k;
          for (int j = 0; j < k; ++j) gzr[j] += gr[j] - std::exp(y[j]) * gsum;
        }
      }
      break;
    }
    case Op::SoftmaxCrossEntropy: {
      if (in_needs(0)) {
        const Tensor& z = vin(0);
        auto& gz = gin(0);
        const int nrows = z.dim(0), k = z.dim(1);
        std::vector<double> p(static_cast<size_t>(nrows) * k);
        softmax_rows(z.data.data(), p.data(), nrows, k);
        const double gv = g[0] / static_cast<double>(nrows);
        for (int i = 0; i < nrows; ++i) {
          for (int j = 0; j < k; ++j) {
            double d = p[static_cast<size_t>(i * k + j)];
            if (j == n.labels[static_cast<size_t>(i)]) d -= 1.0;
            gz[static_cast<size_t>(i * k + j)] += gv * d;
          }
        }
      }
      break;
    }
    case Op::L2Normalize: {
      if (in_needs(0)) {
        auto& ga = gin(0);
        const double nrm = n.a0;
        double dot = 0.0;
        for (size_t i = 0; i < g.size(); ++i) dot += n.out.data[i] * g[i];
        for (size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] / nrm - n.out.data[i] * dot / nrm;
        }
      }
      break;
    }
    case Op::WeightStandardize: {
      if (in_needs(0)) {
        const Tensor& w = vin(0);
        auto& gw = gin(0);
        const int f = w.dim(0);
        const int fan = static_cast<int>(w.size() / f);
        for (int i = 0; i < f; ++i) {
          const double* row = w.data.data() + static_cast<size_t>(i) * fan;
          const double* y = n.out.data.data() + static_cast<size_t>(i) * fan;
          const double* gr = g.data() + static_cast<size_t>(i) * fan;
          double mu = 0.0;
          for (int j = 0; j < fan; ++j) mu += row[j];
          mu /= fan;
          double ss = 0.0;
          for (int j = 0; j < fan; ++j) ss += (row[j] - mu) * (row[j] - mu);
          const double s = std::sqrt(ss + 1e-8);
          double gbar = 0.0, gy = 0.0;
          for (int j = 0; j < fan; ++j) {
            gbar += gr[j];
            gy += gr[j] * y[j];
          }
          gbar /= fan;
          double* out = gw.data() + static_cast<size_t>(i) * fan;
          for (int j = 0; j < fan; ++j) {
            out[j] += (gr[j] - gbar) / s - y[j] * gy / s;
          }
        }
      }
      break;
    }
  }
}

}  // namespace kshield
