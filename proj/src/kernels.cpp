#include "kshield/kernels.hpp"

#include <cmath>

namespace kshield {

double kernel_fn(const Tensor& vi, const Tensor& vj, const KernelParams& params) {
  params.validate();
  if (vi.shape != vj.shape) {
    throw ShapeError("kernel_fn: shape mismatch " + shape_str(vi.shape) +
                     " vs " + shape_str(vj.shape));
  }
  double dot = 0.0;
  for (size_t i = 0; i < vi.data.size(); ++i) dot += vi.data[i] * vj.data[i];
  double base = dot + params.e;
  double out = base;
  for (int k = 1; k < params.d; ++k) out *= base;
  return out;
}

namespace {

// Features [C, ...] viewed as C rows of N elements.
std::pair<int, int> feature_rows(const Tensor& f) {
  if (f.ndim() < 1) throw ShapeError("kernel_matrix: features must have >= 1 dim");
  const int c = f.dim(0);
  const int n = static_cast<int>(f.size() / c);
  if (c < 1 || n < 1) throw ShapeError("kernel_matrix: empty features");
  return {c, n};
}

}  // namespace

Tensor kernel_matrix(const Tensor& features, const KernelParams& params) {
  params.validate();
  auto [c, n] = feature_rows(features);
  Tensor g({c, c});
  for (int i = 0; i < c; ++i) {
    for (int j = i; j < c; ++j) {
      double dot = 0.0;
      const double* ri = features.data.data() + static_cast<size_t>(i) * n;
      const double* rj = features.data.data() + static_cast<size_t>(j) * n;
      for (int t = 0; t < n; ++t) dot += ri[t] * rj[t];
      double base = dot + params.e;
      double v = base;
      for (int k = 1; k < params.d; ++k) v *= base;
      g.data[static_cast<size_t>(i * c + j)] = v;
      g.data[static_cast<size_t>(j * c + i)] = v;
    }
  }
  return g;
}

Graph::NodeId kernel_matrix_node(Graph& g, Graph::NodeId features,
                                 const KernelParams& params) {
  params.validate();
  auto [c, n] = feature_rows(g.val(features));
  Graph::NodeId flat = g.reshape(features, {c, n});
  Graph::NodeId gram = g.matmul_nt(flat, flat);
  Graph::NodeId shifted = params.e != 0.0 ? g.add_scalar(gram, params.e) : gram;
  return params.d != 1 ? g.pow_int(shifted, params.d) : shifted;
}

Graph::NodeId kernel_loss_node(Graph& g, Graph::NodeId features,
                               const Tensor& target, const KernelParams& params,
                               bool normalize) {
  auto [c, n] = feature_rows(g.val(features));
  if (target.ndim() != 2 || target.dim(0) != c || target.dim(1) != c) {
    throw ShapeError("kernel_loss: target is " + shape_str(target.shape) +
                     " but features have " + std::to_string(c) + " channels");
  }
  Graph::NodeId gm = kernel_matrix_node(g, features, params);
  Graph::NodeId diff = g.sub(gm, g.constant(target));
  Graph::NodeId loss = g.inner(diff, diff);
  if (normalize) {
    const double denom = static_cast<double>(c) * static_cast<double>(n);
    loss = g.scale(loss, 1.0 / (denom * denom));
  }
  return loss;
}

KernelLossBreakdown total_kernel_loss_node(
    Graph& g, const std::map<int, Graph::NodeId>& taps,
    const KernelTargetSet& targets, const std::vector<int>& layer_subset,
    const KernelParams& params, bool normalize) {
  if (layer_subset.empty()) {
    throw ConfigError("total_kernel_loss: empty layer subset");
  }
  KernelLossBreakdown out;
  for (int layer : layer_subset) {
    auto tap_it = taps.find(layer);
    if (tap_it == taps.end()) {
      throw ConfigError("total_kernel_loss: tap " + std::to_string(layer) +
                        " not available");
    }
    auto tgt_it = targets.targets.find(layer);
    if (tgt_it == targets.targets.end()) {
      throw ConfigError("total_kernel_loss: no target for tap " +
                        std::to_string(layer));
    }
    Graph::NodeId loss =
        kernel_loss_node(g, tap_it->second, tgt_it->second.G, params, normalize);
    out.per_layer.emplace_back(layer, loss);
    out.total = out.total < 0 ? loss : g.add(out.total, loss);
  }
  return out;
}

int64_t explicit_phi_dim(int n, int d) {
  // binom(n + d, d) with overflow-free small arguments.
  int64_t num = 1;
  for (int i = 1; i <= d; ++i) {
    num = num * (n + i) / i;  // exact: product of i consecutive ints divisible by i!
    if (num > 100000) {
      throw ConfigError("explicit_phi: enumeration bound binom(N+d,d) <= 1e5 exceeded");
    }
  }
  return num;
}

namespace {

void enumerate_multi_indices(int vars, int remaining, std::vector<int>& cur,
                             std::vector<std::vector<int>>& out) {
  if (static_cast<int>(cur.size()) == vars - 1) {
    cur.push_back(remaining);
    out.push_back(cur);
    cur.pop_back();
    return;
  }
  for (int a = 0; a <= remaining; ++a) {
    cur.push_back(a);
    enumerate_multi_indices(vars, remaining - a, cur, out);
    cur.pop_back();
  }
}

double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

}  // namespace

std::vector<double> explicit_phi(const std::vector<double>& v,
                                 const KernelParams& params) {
  params.validate();
  const int n = static_cast<int>(v.size());
  if (n < 1) throw ShapeError("explicit_phi: empty input");
  const int d = params.d;
  explicit_phi_dim(n, d);

  // Extend with the constant coordinate sqrt(e); then
  // (<u,v> + e)^d = sum over multi-indices |a| = d of
  //   multinomial(d, a) * prod u_i^{a_i} * prod v_i^{a_i},
  // so phi_a(v) = sqrt(multinomial(d, a)) * prod v_i^{a_i} with
  // v_{n+1} = sqrt(e).
  std::vector<double> ext(v);
  ext.push_back(std::sqrt(params.e));
  const int vars = n + 1;

  std::vector<std::vector<int>> indices;
  std::vector<int> cur;
  enumerate_multi_indices(vars, d, cur, indices);

  std::vector<double> phi;
  phi.reserve(indices.size());
  const double dfact = factorial(d);
  for (const auto& a : indices) {
    double coeff = dfact;
    double mono = 1.0;
    for (int i = 0; i < vars; ++i) {
      coeff /= factorial(a[static_cast<size_t>(i)]);
      for (int k = 0; k < a[static_cast<size_t>(i)]; ++k) mono *= ext[static_cast<size_t>(i)];
    }
    phi.push_back(std::sqrt(coeff) * mono);
  }
  return phi;
}

}  // namespace kshield
