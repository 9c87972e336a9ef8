#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kshield/kernels.hpp"
#include "kshield/network.hpp"
#include "kshield/rng.hpp"
#include "test_support.hpp"

using namespace kshield;
using test::random_tensor;

TEST_CASE("kernel_fn examples") {
  KernelParams p;
  CHECK(kernel_fn(Tensor({2}), Tensor({2}), p) == 0.0);  // zero maps, e=0

  Tensor u = Tensor::from({2}, {1, 2});
  Tensor v = Tensor::from({2}, {3, 4});
  CHECK(kernel_fn(u, v, {0.0, 1}) == doctest::Approx(11.0));
  CHECK(kernel_fn(u, v, {1.0, 3}) == doctest::Approx(1728.0));

  CHECK_THROWS_AS(kernel_fn(Tensor({2}), Tensor({3}), p), ShapeError);
  CHECK_THROWS_AS(kernel_fn(u, v, KernelParams{-1.0, 1}), ConfigError);
  CHECK_THROWS_AS(kernel_fn(u, v, KernelParams{0.0, 0}), ConfigError);
}

TEST_CASE("explicit_phi dimensions and degenerate case") {
  CHECK(explicit_phi_dim(2, 3) == 10);
  CHECK(explicit_phi(std::vector<double>{1.0, 2.0}, {1.0, 3}).size() == 10);
  // N=1, d=1, e=0: phi(v) = (v, sqrt(0)) -> effectively v itself.
  auto phi = explicit_phi(std::vector<double>{0.75}, {0.0, 1});
  REQUIRE(phi.size() == 2);
  double nonzero = 0.0;
  for (double c : phi) nonzero += std::abs(c);
  CHECK(nonzero == doctest::Approx(0.75));
  CHECK_THROWS_AS(explicit_phi_dim(100, 5), ConfigError);
}

TEST_CASE("Mercer property: <phi(u),phi(v)> equals kappa(u,v) on 200 cases") {
  Rng rng(42);
  int cases = 0;
  while (cases < 200) {
    const int n = 1 + rng.uniform_int(4);   // N <= 4
    const int d = 1 + rng.uniform_int(3);   // d <= 3
    const double e = rng.uniform_int(2) == 0 ? 0.0 : 1.0;
    std::vector<double> u(static_cast<size_t>(n)), v(static_cast<size_t>(n));
    for (double& x : u) x = rng.uniform(-1.5, 1.5);
    for (double& x : v) x = rng.uniform(-1.5, 1.5);
    const KernelParams p{e, d};
    const auto pu = explicit_phi(u, p);
    const auto pv = explicit_phi(v, p);
    REQUIRE(pu.size() == pv.size());
    double dot = 0.0;
    for (size_t i = 0; i < pu.size(); ++i) dot += pu[i] * pv[i];
    const double kap = kernel_fn(Tensor::from({n}, u), Tensor::from({n}, v), p);
    CHECK(std::abs(dot - kap) <= 1e-9 * (1.0 + std::abs(kap)));
    ++cases;
  }
}

TEST_CASE("kernel_matrix examples") {
  // Single all-ones feature map, C=1, N=4, e=0, d=1 -> G = [[4]].
  Tensor ones = Tensor::from({1, 2, 2}, {1, 1, 1, 1});
  Tensor g = kernel_matrix(ones, {0.0, 1});
  REQUIRE(g.shape == Shape{1, 1});
  CHECK(g.data[0] == doctest::Approx(4.0));

  // Gram identity for e=0, d=1.
  Tensor f = random_tensor({3, 4, 4}, 7);
  Tensor gm = kernel_matrix(f, {0.0, 1});
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int t = 0; t < 16; ++t) dot += f.data[i * 16 + t] * f.data[j * 16 + t];
      CHECK(std::abs(gm.data[i * 3 + j] - dot) <= 1e-12);
    }
  }

  // Entries match pairwise kernel_fn calls.
  const KernelParams p{0.5, 2};
  Tensor f2 = random_tensor({3, 2, 3}, 8);
  Tensor g2 = kernel_matrix(f2, p);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      Tensor vi = Tensor::from({6}, std::vector<double>(
                                        f2.data.begin() + i * 6,
                                        f2.data.begin() + (i + 1) * 6));
      Tensor vj = Tensor::from({6}, std::vector<double>(
                                        f2.data.begin() + j * 6,
                                        f2.data.begin() + (j + 1) * 6));
      CHECK(std::abs(g2.data[i * 3 + j] - kernel_fn(vi, vj, p)) <= 1e-12);
    }
  }
}

TEST_CASE("kernel matrix symmetry and PSD on random features") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = 2 + rng.uniform_int(4);
    const int n = 3 + rng.uniform_int(6);
    for (int d : {1, 2, 3}) {
      for (double e : {0.0, 1.0}) {
        Tensor f = random_tensor({c, n}, 1000 + static_cast<uint64_t>(trial * 10 + d));
        Tensor g = kernel_matrix(f, {e, d});
        for (int i = 0; i < c; ++i) {
          for (int j = 0; j < c; ++j) {
            CHECK(std::abs(g.data[i * c + j] - g.data[j * c + i]) <= 1e-10);
          }
        }
        auto eig = test::sym_eigenvalues(g.data, c);
        double lmax = 0.0;
        for (double v : eig) lmax = std::max(lmax, std::abs(v));
        for (double v : eig) CHECK(v >= -1e-8 * lmax);
      }
    }
  }
}

TEST_CASE("graph kernel matrix equals the eager one and is differentiable") {
  Tensor f = random_tensor({3, 2, 2}, 17);
  const KernelParams p{1.0, 2};
  Tensor eager = kernel_matrix(f, p);
  Graph g;
  Graph::NodeId fn = g.leaf(f);
  const Tensor& graphed = g.val(kernel_matrix_node(g, fn, p));
  for (size_t i = 0; i < eager.data.size(); ++i) {
    CHECK(graphed.data[i] == doctest::Approx(eager.data[i]).epsilon(1e-12));
  }

  auto res = test::check_gradient({3, 4}, random_tensor({3, 4}, 18),
                                  [&](Graph& gg, Graph::NodeId x) {
                                    Tensor target = kernel_matrix(
                                        random_tensor({3, 4}, 19), p);
                                    return kernel_loss_node(gg, x, target, p);
                                  });
  CHECK(res.checked > 0);
  CHECK(res.max_rel_error <= 1e-4);
}

TEST_CASE("kernel_loss examples") {
  const KernelParams p{0.0, 1};
  // Exact target -> zero loss and zero gradient.
  Tensor f = random_tensor({2, 3}, 20);
  Tensor target = kernel_matrix(f, p);
  Graph g;
  Tensor fx = f;
  fx.requires_grad = true;
  Graph::NodeId x = g.leaf(std::move(fx));
  Graph::NodeId loss = kernel_loss_node(g, x, target, p);
  CHECK(g.val(loss).item() == doctest::Approx(0.0));
  g.backward(loss);
  for (double v : g.leaf_grad(x)) CHECK(std::abs(v) <= 1e-18);

  // 1x1 case: (3 - 1)^2 = 4 with d=1 features sqrt arrangement.
  Tensor single = Tensor::from({1, 1}, {std::sqrt(3.0)});
  Tensor tmat = Tensor::from({1, 1}, {1.0});
  Graph g2;
  CHECK(g2.val(kernel_loss_node(g2, g2.leaf(single), tmat, p)).item() ==
        doctest::Approx(4.0));

  // Channel-count mismatch.
  Graph g3;
  CHECK_THROWS_AS(kernel_loss_node(g3, g3.leaf(Tensor({2, 3})),
                                   Tensor({3, 3}), p),
                  ShapeError);
}

TEST_CASE("total kernel loss: single layer, additivity, empty subset") {
  const KernelParams p{0.0, 1};
  Graph g;
  std::map<int, Graph::NodeId> taps;
  KernelTargetSet targets;
  targets.label = 0;
  for (int tap : {0, 1, 2}) {
    Tensor f = random_tensor({2, 4}, 30 + static_cast<uint64_t>(tap));
    taps[tap] = g.leaf(f);
    KernelMatrix km;
    km.layer = tap;
    km.G = kernel_matrix(random_tensor({2, 4}, 40 + static_cast<uint64_t>(tap)), p);
    targets.targets[tap] = km;
  }

  auto one = total_kernel_loss_node(g, taps, targets, {1}, p);
  CHECK(g.val(one.total).item() ==
        doctest::Approx(g.val(one.per_layer[0].second).item()));

  auto a = total_kernel_loss_node(g, taps, targets, {0}, p);
  auto b = total_kernel_loss_node(g, taps, targets, {1, 2}, p);
  auto all = total_kernel_loss_node(g, taps, targets, {0, 1, 2}, p);
  CHECK(g.val(all.total).item() ==
        doctest::Approx(g.val(a.total).item() + g.val(b.total).item())
            .epsilon(1e-12));

  CHECK_THROWS_AS(total_kernel_loss_node(g, taps, targets, {}, p), ConfigError);
  CHECK_THROWS_AS(total_kernel_loss_node(g, taps, targets, {5}, p), ConfigError);
}

TEST_CASE("normalized kernel loss divides by (C*N)^2") {
  const KernelParams p{0.0, 1};
  Tensor f = random_tensor({3, 5}, 61);
  Tensor target = kernel_matrix(random_tensor({3, 5}, 62), p);
  Graph g;
  Graph::NodeId x = g.leaf(f);
  const double raw = g.val(kernel_loss_node(g, x, target, p, false)).item();
  const double norm = g.val(kernel_loss_node(g, x, target, p, true)).item();
  CHECK(norm == doctest::Approx(raw / (15.0 * 15.0)).epsilon(1e-12));
}

TEST_CASE("kernel loss through the full network passes finite differences") {
  ModelSpec spec;
  spec.in_channels = 2;
  spec.in_h = 6;
  spec.in_w = 6;
  spec.width = 3;
  spec.num_classes = 3;
  Model model(spec, 123);
  const KernelParams p{0.0, 1};

  // Targets from a fixed reference image.
  Tensor ref = random_tensor({2, 6, 6}, 50, 0.0, 1.0);
  std::vector<Tensor> ref_taps;
  model.forward_with_taps(ref, ref_taps);
  KernelTargetSet targets;
  for (int tap : {0, 3, 5}) {
    KernelMatrix km;
    km.layer = tap;
    km.G = kernel_matrix(ref_taps[static_cast<size_t>(tap)], p);
    targets.targets[tap] = km;
  }

  auto build = [&](Graph& g, Graph::NodeId x) {
    Graph::NodeId batch = g.reshape(x, {1, 2, 6, 6});
    auto built = model.build_with(g, batch, model.param_nodes(g, false));
    std::map<int, Graph::NodeId> taps;
    for (int tap : {0, 3, 5}) {
      taps[tap] = g.slice0(built.taps[static_cast<size_t>(tap)], 0);
    }
    return total_kernel_loss_node(g, taps, targets, {0, 3, 5}, p).total;
  };
  auto res = test::check_gradient({2, 6, 6}, random_tensor({2, 6, 6}, 51, 0.1, 0.9),
                                  build);
  CHECK(res.checked > 0);
  CHECK(res.max_rel_error <= 1e-4);
}
