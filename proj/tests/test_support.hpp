#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "kshield/network.hpp"
#include "kshield/rng.hpp"
#include "kshield/tensor.hpp"

namespace kshield::test {

inline Tensor random_tensor(const Shape& shape, uint64_t seed, double lo = -1.0,
                            double hi = 1.0) {
  Rng rng(seed);
  Tensor t(shape);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Random tensor with every entry kept away from zero (for kink-free
// finite-difference checks of relu/max-style ops).
inline Tensor random_tensor_nonzero(const Shape& shape, uint64_t seed,
                                    double min_abs = 1e-2) {
  Rng rng(seed);
  Tensor t(shape);
  for (double& v : t.data) {
    double x = rng.uniform(-1.0, 1.0);
    while (std::abs(x) < min_abs) x = rng.uniform(-1.0, 1.0);
    v = x;
  }
  return t;
}

// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> finite_diff(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& x, double step = 1e-6) {
  std::vector<double> g(x.size());
  std::vector<double> p = x;
  for (size_t i = 0; i < x.size(); ++i) {
    const double x0 = p[i];
    p[i] = x0 + step;
    const double fp = f(p);
    p[i] = x0 - step;
    const double fm = f(p);
    p[i] = x0;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
};

// Compares reverse-mode gradients of a scalar-valued graph builder against
// central finite differences. The builder must construct the same function
// for any input leaf of the given shape.
inline GradCheckResult check_gradient(
    const Shape& shape, const Tensor& x0,
    const std::function<Graph::NodeId(Graph&, Graph::NodeId)>& build,
    double step = 1e-6, double analytic_floor = 1e-8) {
  auto eval = [&](const std::vector<double>& xdata) {
    Graph g;
    Tensor t = Tensor::from(shape, xdata);
    Graph::NodeId x = g.leaf(std::move(t));
    return g.val(build(g, x)).item();
  };
  Graph g;
  Tensor t = Tensor::from(shape, x0.data);
  t.requires_grad = true;
  Graph::NodeId x = g.leaf(std::move(t));
  Graph::NodeId y = build(g, x);
  g.backward(y);
  const std::vector<double>& analytic = g.leaf_grad(x);
  const std::vector<double> numeric = finite_diff(eval, x0.data, step);

  GradCheckResult res;
  for (size_t i = 0; i < analytic.size(); ++i) {
    if (std::abs(analytic[i]) <= analytic_floor) continue;
    const double denom = std::max(std::abs(analytic[i]), std::abs(numeric[i]));
    res.max_rel_error =
        std::max(res.max_rel_error, std::abs(analytic[i] - numeric[i]) / denom);
    ++res.checked;
  }
  return res;
}

// Jacobi eigenvalue iteration for a symmetric n x n matrix (row-major).
inline std::vector<double> sym_eigenvalues(std::vector<double> a, int n) {
  auto at = [&](int i, int j) -> double& { return a[static_cast<size_t>(i * n + j)]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
    }
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(at(p, q)) < 1e-300) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * at(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) eig[static_cast<size_t>(i)] = at(i, i);
  return eig;
}

// Affine K-class scorer over flat inputs; the test stand-in for a network.
class AffineClassifier : public Classifier {
 public:
  AffineClassifier(Tensor w, Tensor b) : w_(std::move(w)), b_(std::move(b)) {}

  int num_classes() const override { return w_.dim(0); }
  Shape input_shape() const override { return {w_.dim(1)}; }
  Graph::NodeId build_logits(Graph& g, Graph::NodeId batch) const override {
    return g.linear(batch, g.constant(w_), g.constant(b_));
  }

  const Tensor& weight() const { return w_; }
  const Tensor& bias() const { return b_; }

 private:
  Tensor w_;
  Tensor b_;
};

}  // namespace kshield::test
