// Acceptance gate: one pass/fail line per criterion, nonzero exit on any
// failure. Each criterion pins its tolerances and runtime budget in code.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "kshield/attacks.hpp"
#include "kshield/harness.hpp"
#include "kshield/rng.hpp"
#include "test_support.hpp"

using namespace kshield;
using test::check_gradient;
using test::random_tensor;
using test::random_tensor_nonzero;

namespace {

struct CriterionResult {
  bool pass = false;
  std::string detail;
};

int g_failures = 0;

void run_criterion(int number, const std::string& name, double budget_seconds,
                   const std::function<CriterionResult()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  CriterionResult res;
  try {
    res = fn();
  } catch (const std::exception& e) {
    res.pass = false;
    res.detail = std::string("exception: ") + e.what();
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs > budget_seconds) {
    res.pass = false;
    res.detail += (res.detail.empty() ? "" : "; ") + std::string("over budget");
  }
  std::printf("[%s] criterion %d: %s (%.1fs / %.0fs budget)%s%s\n",
              res.pass ? "PASS" : "FAIL", number, name.c_str(), secs,
              budget_seconds, res.detail.empty() ? "" : " — ",
              res.detail.c_str());
  std::fflush(stdout);
  if (!res.pass) ++g_failures;
}

// ---------------------------------------------------------------------------
// Criterion 1: autodiff gradient checks
// ---------------------------------------------------------------------------

Graph::NodeId project_scalar(Graph& g, Graph::NodeId y, uint64_t seed) {
  Tensor w = random_tensor(g.val(y).shape, seed, 0.1, 1.0);
  return g.inner(y, g.constant(w));
}

CriterionResult criterion_autodiff() {
  CriterionResult res;
  double worst = 0.0;
  int failures = 0;
  auto run = [&](const Shape& shape, const Tensor& x0,
                 std::function<Graph::NodeId(Graph&, Graph::NodeId)> build) {
    auto r = check_gradient(shape, x0, build);
    worst = std::max(worst, r.max_rel_error);
    if (r.checked == 0 || r.max_rel_error > 1e-4) ++failures;
  };

  // Every differentiable primitive.
  run({2, 3}, random_tensor({2, 3}, 1), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.add(x, g.constant(random_tensor({2, 3}, 91))), 7);
  });
  run({2, 3}, random_tensor({2, 3}, 2), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.sub(g.constant(random_tensor({2, 3}, 92)), x), 7);
  });
  run({2, 3}, random_tensor({2, 3}, 3), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.mul(x, x), 7);
  });
  run({4}, random_tensor({4}, 4), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.scale(x, -2.5), 7);
  });
  run({4}, random_tensor({4}, 5), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.add_scalar(x, 0.7), 7);
  });
  run({5}, random_tensor({5}, 6, 0.2, 1.2), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.pow_int(x, 3), 7);
  });
  run({6}, random_tensor_nonzero({6}, 7), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.relu(x), 7);
  });
  run({6}, random_tensor({6}, 8), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.tanh_op(x), 7);
  });
  run({3, 4}, random_tensor({3, 4}, 9), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.matmul(x, g.constant(random_tensor({4, 2}, 93))), 7);
  });
  run({3, 4}, random_tensor({3, 4}, 11), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.matmul_nt(x, x), 7);
  });
  run({2, 3}, random_tensor({2, 3}, 12), [](Graph& g, Graph::NodeId x) {
    return project_scalar(
        g,
        g.linear(x, g.constant(random_tensor({4, 3}, 95)),
                 g.constant(random_tensor({4}, 96))),
        7);
  });
  run({1, 2, 5, 5}, random_tensor({1, 2, 5, 5}, 15), [](Graph& g, Graph::NodeId x) {
    return project_scalar(
        g,
        g.conv2d(x, g.constant(random_tensor({3, 2, 3, 3}, 98)),
                 g.constant(random_tensor({3}, 99)), 2, 1),
        7);
  });
  run({3, 2, 3, 3}, random_tensor({3, 2, 3, 3}, 16), [](Graph& g, Graph::NodeId w) {
    return project_scalar(
        g,
        g.conv2d(g.constant(random_tensor({1, 2, 5, 5}, 98)), w,
                 g.constant(random_tensor({3}, 99)), 1, 1),
        7);
  });
  run({1, 2, 6, 6}, random_tensor_nonzero({1, 2, 6, 6}, 18),
      [](Graph& g, Graph::NodeId x) {
        return project_scalar(g, g.max_pool2d(x, 2, 2), 7);
      });
  run({2, 6}, random_tensor({2, 6}, 19), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.reshape(x, {3, 4}), 7);
  });
  run({5}, random_tensor({5}, 20), [](Graph& g, Graph::NodeId x) { return g.sum(x); });
  run({5}, random_tensor({5}, 21), [](Graph& g, Graph::NodeId x) { return g.mean(x); });
  run({6}, random_tensor({6}, 22), [](Graph& g, Graph::NodeId x) {
    return g.inner(x, g.constant(random_tensor({6}, 90)));
  });
  run({2, 3}, random_tensor({2, 3}, 23), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.concat0({x, g.constant(random_tensor({1, 3}, 89)), x}), 7);
  });
  run({3, 4}, random_tensor({3, 4}, 24), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.slice0(x, 1), 7);
  });
  run({5}, random_tensor({5}, 25), [](Graph& g, Graph::NodeId x) {
    return g.gather(x, 2);
  });
  run({5}, random_tensor_nonzero({5}, 26), [](Graph& g, Graph::NodeId x) {
    return g.max_reduce(x);
  });
  run({2, 4}, random_tensor({2, 4}, 27), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.softmax(x), 7);
  });
  run({2, 4}, random_tensor({2, 4}, 28), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.log_softmax(x), 7);
  });
  run({3, 5}, random_tensor({3, 5}, 29), [](Graph& g, Graph::NodeId x) {
    return g.softmax_cross_entropy(x, {1, 0, 4});
  });
  run({6}, random_tensor_nonzero({6}, 30), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.l2_normalize(x), 7);
  });
  run({1, 4, 4}, random_tensor_nonzero({1, 4, 4}, 31), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.median_filter(x, 2), 7);
  });
  run({3, 2, 2, 2}, random_tensor({3, 2, 2, 2}, 33), [](Graph& g, Graph::NodeId x) {
    return project_scalar(g, g.weight_standardize(x), 7);
  });

  // End-to-end loss 1: full CNN cross-entropy, every parameter swept.
  ModelSpec spec;
  spec.in_channels = 2;
  spec.in_h = 6;
  spec.in_w = 6;
  spec.width = 3;
  spec.num_classes = 3;
  Model model(spec, 9);
  if (spec.param_count() > 2000) ++failures;
  Tensor batch = random_tensor({2, 2, 6, 6}, 10, 0.0, 1.0);
  const std::vector<int> labels = {0, 2};
  for (size_t target = 0; target < model.params().size(); ++target) {
    auto build = [&](Graph& g, Graph::NodeId x) {
      std::vector<Graph::NodeId> pids;
      for (size_t i = 0; i < model.params().size(); ++i) {
        if (i == target) {
          pids.push_back(x);
        } else {
          Tensor t = model.params()[i];
          t.requires_grad = false;
          pids.push_back(g.leaf(std::move(t)));
        }
      }
      return g.softmax_cross_entropy(
          model.build_with(g, g.constant(batch), pids).logits, labels);
    };
    auto r = check_gradient(model.params()[target].shape, model.params()[target],
                            build);
    worst = std::max(worst, r.max_rel_error);
    if (r.max_rel_error > 1e-4) ++failures;
  }

  // End-to-end loss 2: multi-layer kernel loss w.r.t. the input image.
  {
    KernelParams kp{1.0, 2};
    Tensor ref = random_tensor({2, 6, 6}, 50, 0.0, 1.0);
    std::vector<Tensor> ref_taps;
    model.forward_with_taps(ref, ref_taps);
    KernelTargetSet targets;
    for (int tap : {1, 3, 5}) {
      KernelMatrix km;
      km.layer = tap;
      km.G = kernel_matrix(ref_taps[static_cast<size_t>(tap)], kp);
      targets.targets[tap] = km;
    }
    auto build = [&](Graph& g, Graph::NodeId x) {
      auto built = model.build_with(g, g.reshape(x, {1, 2, 6, 6}),
                                    model.param_nodes(g, false));
      std::map<int, Graph::NodeId> taps;
      for (int tap : {1, 3, 5}) {
        taps[tap] = g.slice0(built.taps[static_cast<size_t>(tap)], 0);
      }
      return total_kernel_loss_node(g, taps, targets, {1, 3, 5}, kp).total;
    };
    auto r = check_gradient({2, 6, 6}, random_tensor({2, 6, 6}, 51, 0.1, 0.9), build);
    worst = std::max(worst, r.max_rel_error);
    if (r.checked == 0 || r.max_rel_error > 1e-4) ++failures;
  }

  // End-to-end loss 3: TRADES-style combined loss w.r.t. the perturbed input.
  {
    Tensor clean = random_tensor({2, 2, 6, 6}, 52, 0.0, 1.0);
    auto build = [&](Graph& g, Graph::NodeId x) {
      auto pids = model.param_nodes(g, false);
      auto clean_built = model.build_with(g, g.constant(clean), pids);
      auto adv_built = model.build_with(g, x, pids);
      Graph::NodeId ce = g.softmax_cross_entropy(clean_built.logits, {0, 1});
      Graph::NodeId pa = g.softmax(adv_built.logits);
      Graph::NodeId la = g.log_softmax(adv_built.logits);
      Graph::NodeId lc = g.log_softmax(clean_built.logits);
      Graph::NodeId kl = g.scale(g.sum(g.mul(pa, g.sub(la, lc))), 0.5);
      return g.add(ce, kl);
    };
    auto r = check_gradient({2, 2, 6, 6}, random_tensor({2, 2, 6, 6}, 53, 0.1, 0.9),
                            build);
    worst = std::max(worst, r.max_rel_error);
    if (r.checked == 0 || r.max_rel_error > 1e-4) ++failures;
  }

  char buf[128];
  std::snprintf(buf, sizeof(buf), "max relative error %.2e, %d failing checks",
                worst, failures);
  res.detail = buf;
  res.pass = failures == 0;
  return res;
}

// ---------------------------------------------------------------------------
// Criterion 2: kernel identities
// ---------------------------------------------------------------------------

CriterionResult criterion_kernels() {
  CriterionResult res;
  Rng rng(2024);
  int failures = 0;

  // (a) Gram identity at e=0, d=1 to 1e-12.
  for (int trial = 0; trial < 20; ++trial) {
    const int c = 2 + rng.uniform_int(4);
    const int n = 4 + rng.uniform_int(8);
    Tensor f = random_tensor({c, n}, 3000 + static_cast<uint64_t>(trial));
    Tensor g = kernel_matrix(f, {0.0, 1});
    for (int i = 0; i < c; ++i) {
      for (int j = 0; j < c; ++j) {
        double dot = 0.0;
        for (int t = 0; t < n; ++t) {
          dot += f.data[static_cast<size_t>(i * n + t)] *
                 f.data[static_cast<size_t>(j * n + t)];
        }
        if (std::abs(g.data[static_cast<size_t>(i * c + j)] - dot) > 1e-12) ++failures;
      }
    }
  }

  // (b) Mercer property on 200 random cases to 1e-9.
  int cases = 0;
  while (cases < 200) {
    const int n = 1 + rng.uniform_int(4);
    const int d = 1 + rng.uniform_int(3);
    const double e = rng.uniform_int(2) == 0 ? 0.0 : 1.0;
    std::vector<double> u(static_cast<size_t>(n)), v(static_cast<size_t>(n));
    for (double& x : u) x = rng.uniform(-1.5, 1.5);
    for (double& x : v) x = rng.uniform(-1.5, 1.5);
    const KernelParams p{e, d};
    const auto pu = explicit_phi(u, p);
    const auto pv = explicit_phi(v, p);
    double dot = 0.0;
    for (size_t i = 0; i < pu.size(); ++i) dot += pu[i] * pv[i];
    const double kap = kernel_fn(Tensor::from({n}, u), Tensor::from({n}, v), p);
    if (std::abs(dot - kap) > 1e-9 * (1.0 + std::abs(kap))) ++failures;
    ++cases;
  }

  // (c) PSD on 50 random feature sets for d in {1,2,3}.
  for (int trial = 0; trial < 50; ++trial) {
    const int c = 2 + rng.uniform_int(5);
    const int n = 3 + rng.uniform_int(8);
    for (int d : {1, 2, 3}) {
      const double e = trial % 2 == 0 ? 0.0 : 1.0;
      Tensor f = random_tensor({c, n}, 4000 + static_cast<uint64_t>(trial * 4 + d));
      Tensor g = kernel_matrix(f, {e, d});
      auto eig = test::sym_eigenvalues(g.data, c);
      double lmax = 0.0;
      for (double v : eig) lmax = std::max(lmax, std::abs(v));
      for (double v : eig) {
        if (v < -1e-8 * lmax) ++failures;
      }
    }
  }

  res.pass = failures == 0;
  res.detail = std::to_string(failures) + " failing identities";
  return res;
}

// ---------------------------------------------------------------------------
// Criterion 3: projection oracles
// ---------------------------------------------------------------------------

CriterionResult criterion_projections() {
  CriterionResult res;
  Rng rng(31337);
  int failures = 0;

  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + rng.uniform_int(20);
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = rng.uniform(-2.0, 2.0);
    const double radius = 0.1 + rng.uniform() * 3.0;
    const std::vector<double> got = l1_ball_projection(v, radius);

    // Bisection oracle for the soft threshold.
    double l1 = 0.0, hi = 0.0;
    for (double x : v) {
      l1 += std::abs(x);
      hi = std::max(hi, std::abs(x));
    }
    std::vector<double> want = v;
    if (l1 > radius) {
      double lo = 0.0;
      for (int it = 0; it < 200 && hi - lo > 1e-10; ++it) {
        const double mid = 0.5 * (lo + hi);
        double s = 0.0;
        for (double x : v) s += std::max(std::abs(x) - mid, 0.0);
        (s > radius ? lo : hi) = mid;
      }
      const double theta = 0.5 * (lo + hi);
      for (size_t i = 0; i < v.size(); ++i) {
        const double mag = std::max(std::abs(v[i]) - theta, 0.0);
        want[i] = v[i] >= 0.0 ? mag : -mag;
      }
    }
    for (size_t i = 0; i < got.size(); ++i) {
      if (std::abs(got[i] - want[i]) > 1e-8) ++failures;
    }
    // No random ball sample may be closer than the projection.
    double got_d = 0.0;
    for (size_t i = 0; i < got.size(); ++i) {
      got_d += (v[i] - got[i]) * (v[i] - got[i]);
    }
    for (int probe = 0; probe < 10; ++probe) {
      std::vector<double> q(static_cast<size_t>(n));
      double qs = 0.0;
      for (double& x : q) {
        x = rng.uniform(-1.0, 1.0);
        qs += std::abs(x);
      }
      const double s = qs > 0.0 ? rng.uniform() * radius / qs : 0.0;
      double qd = 0.0;
      for (size_t i = 0; i < q.size(); ++i) {
        q[i] *= s;
        qd += (v[i] - q[i]) * (v[i] - q[i]);
      }
      if (qd < got_d - 1e-9) ++failures;
    }
  }

  // Median filter vs the naive sort oracle, exact, on 100 random images.
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 4 + rng.uniform_int(5);
    const int w = 4 + rng.uniform_int(5);
    const int window = 1 + rng.uniform_int(3);
    Tensor img = random_tensor({2, h, w}, 5000 + static_cast<uint64_t>(trial), 0.0, 1.0);
    Tensor got = median_filter(img, window);
    const int off = (window - 1) / 2;
    for (int b = 0; b < 2; ++b) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          std::vector<double> vals;
          for (int r = 0; r < window; ++r) {
            for (int s = 0; s < window; ++s) {
              const int ih = std::clamp(i - off + r, 0, h - 1);
              const int iw = std::clamp(j - off + s, 0, w - 1);
              vals.push_back(img.data[static_cast<size_t>((b * h + ih) * w + iw)]);
            }
          }
          std::sort(vals.begin(), vals.end());
          if (got.data[static_cast<size_t>((b * h + i) * w + j)] !=
              vals[(vals.size() - 1) / 2]) {
            ++failures;
          }
        }
      }
    }
  }

  res.pass = failures == 0;
  res.detail = std::to_string(failures) + " oracle disagreements";
  return res;
}

// ---------------------------------------------------------------------------
// Toy experiment configuration shared by criteria 4, 5, 7, 8
// ---------------------------------------------------------------------------

struct ToyConfig {
  static ModelSpec spec() {
    ModelSpec s;
    s.in_channels = 3;
    s.in_h = 8;
    s.in_w = 8;
    s.width = 5;
    s.width_deep = 10;
    s.num_classes = 4;
    return s;
  }
  static constexpr double kEpsilon = 0.08;
  static constexpr int kAttackIters = 20;   // BIM/CW iteration count
  static constexpr int kDeepFoolIters = 50;

  static SyntheticSplits data(uint64_t rep_seed) {
    return make_synthetic_splits(SyntheticKind::Blobs, 240, 40, 400, 4, 0.08,
                                 Rng::split(rep_seed, 1));
  }

  static Dataset smoothing_doubled(const Dataset& train) {
    Dataset out = train;
    for (size_t i = 0; i < train.images.size(); ++i) {
      out.images.push_back(median_filter(train.images[i], 2));
      out.labels.push_back(train.labels[i]);
    }
    return out;
  }

  static Model train_std(const SyntheticSplits& data, uint64_t rep_seed) {
    Model model(spec(), Rng::split(rep_seed, 3));
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.batch_size = 16;
    cfg.seed = Rng::split(rep_seed, 2);
    train_smoothing_augmented(model, data.train, 2, cfg);
    return model;
  }

  static Model train_adv(const SyntheticSplits& data, uint64_t rep_seed) {
    Model model(spec(), Rng::split(rep_seed, 3));
    AdvTrainConfig cfg;
    cfg.base.epochs = 8;
    cfg.base.batch_size = 16;
    cfg.base.seed = Rng::split(rep_seed, 2);
    cfg.replays = 5;
    cfg.trades_lambda = 1.0;
    cfg.epsilon = kEpsilon;
    train_adversarial(model, smoothing_doubled(data.train), cfg);
    return model;
  }

  static DefenseConfig defense(int c3, uint64_t seed) {
    DefenseConfig d;
    d.c1 = 4.0;
    d.c2 = 0.05;
    d.c3 = c3;
    d.transform_iterations = 10;
    d.tap_layers = {1, 2, 3, 4, 5};
    d.smoother_window = 2;
    d.sample_seed = seed;
    return d;
  }

  static NamedAttack bim_attack() {
    NamedAttack a;
    a.name = "bim";
    a.config.kind = AttackKind::BIM;
    a.config.epsilon = kEpsilon;
    a.config.alpha = kEpsilon / 5.0;
    a.config.iterations = kAttackIters;
    return a;
  }

  static NamedAttack deepfool_attack() {
    NamedAttack a;
    a.name = "deepfool";
    a.config.kind = AttackKind::DeepFool;
    a.config.iterations = kDeepFoolIters;
    a.config.deepfool_max_iterations = kDeepFoolIters;
    return a;
  }
};

// ---------------------------------------------------------------------------
// Criterion 4: attack contracts
// ---------------------------------------------------------------------------

CriterionResult criterion_attacks() {
  CriterionResult res;
  int failures = 0;
  Rng rng(777);

  // DeepFool matches the affine closed form to 1e-6 on 50 random models.
  AttackConfig df;
  df.kind = AttackKind::DeepFool;
  int affine_checked = 0;
  while (affine_checked < 50) {
    const int d = 2 + rng.uniform_int(5);
    Tensor w({2, d});
    Tensor b({2});
    for (double& v : w.data) v = rng.uniform(-1.0, 1.0);
    b.data[0] = rng.uniform(-0.1, 0.1);
    b.data[1] = rng.uniform(-0.1, 0.1);
    test::AffineClassifier model(w, b);
    Tensor x({d});
    for (double& v : x.data) v = rng.uniform(0.4, 0.6);
    const Prediction p = model.predict(x);
    const double fdiff = std::abs(p.logits.data[0] - p.logits.data[1]);
    double wnorm = 0.0;
    for (int i = 0; i < d; ++i) {
      const double diff =
          w.data[static_cast<size_t>(i)] - w.data[static_cast<size_t>(d + i)];
      wnorm += diff * diff;
    }
    wnorm = std::sqrt(wnorm);
    if (wnorm < 1e-6 || fdiff / wnorm > 0.2) continue;
    AttackOutcome o = deepfool(model, x, df);
    const double expected = fdiff / wnorm * (1.0 + df.deepfool_overshoot);
    if (std::abs(o.l2 - expected) > 1e-6 * std::max(1.0, expected)) ++failures;
    ++affine_checked;
  }

  // Toy-model contracts: box and budget on every output, BIM(1, alpha=eps)
  // bitwise-equals FGSM, CW respects its margin.
  auto data = ToyConfig::data(11);
  Model model = ToyConfig::train_std(data, 11);

  AttackConfig bim1;
  bim1.kind = AttackKind::BIM;
  bim1.epsilon = 0.05;
  bim1.alpha = 0.05;
  bim1.iterations = 1;

  AttackConfig bim20 = ToyConfig::bim_attack().config;
  AttackConfig pgd20 = bim20;
  pgd20.kind = AttackKind::PGD;
  pgd20.seed = 99;

  AttackConfig cw = ToyConfig::bim_attack().config;
  cw.kind = AttackKind::CW_L2;
  cw.cw.iterations = 40;
  cw.cw.binary_search_steps = 6;

  int cw_solutions = 0;
  for (int i = 0; i < 12; ++i) {
    const Tensor& img = data.test.images[static_cast<size_t>(i)];
    const int label = data.test.labels[static_cast<size_t>(i)];

    AttackOutcome a = bim(model, img, label, bim1);
    AttackOutcome b = fgsm(model, img, label, 0.05);
    if (std::memcmp(a.adversarial.data.data(), b.adversarial.data.data(),
                    a.adversarial.data.size() * sizeof(double)) != 0) {
      ++failures;
    }

    for (const AttackOutcome& o :
         {bim(model, img, label, bim20), pgd(model, img, label, pgd20),
          deepfool(model, img, df, label), cw_l2(model, img, label, cw)}) {
      for (double v : o.adversarial.data) {
        if (v < 0.0 || v > 1.0) ++failures;
      }
    }
    AttackOutcome bo = bim(model, img, label, bim20);
    if (bo.linf > bim20.epsilon + 1e-9) ++failures;

    AttackOutcome co = cw_l2(model, img, label, cw);
    if (co.success && model.predict_label(img) == label) {
      Prediction p = model.predict(co.adversarial);
      double zt = p.logits.data[static_cast<size_t>(label)];
      double zo = -1e300;
      for (int c = 0; c < 4; ++c) {
        if (c != label) zo = std::max(zo, p.logits.data[static_cast<size_t>(c)]);
      }
      if (zo - zt < cw.cw.confidence - 1e-6) ++failures;
      ++cw_solutions;
    }
  }
  if (cw_solutions == 0) ++failures;

  res.pass = failures == 0;
  res.detail = std::to_string(failures) + " contract violations (" +
               std::to_string(cw_solutions) + " CW solutions checked)";
  return res;
}

// ---------------------------------------------------------------------------
// Criterion 5: directional reproduction of the evaluation-table structure
// ---------------------------------------------------------------------------

struct RepOutcome {
  double std_bare_bim = 0.0, adv_bare_bim = 0.0;
  double adv_bare_df = 0.0;
  double adv_defA_bim = 0.0, adv_defA_df = 0.0;
  double std_defB_bim = 0.0, adv_defB_bim = 0.0;
  double std_bare_clean = 0.0, std_def_clean = 0.0;
  double adv_bare_clean = 0.0, adv_def_clean = 0.0;
};

RepOutcome run_rep(uint64_t rep_seed, int eval_count, int threads) {
  auto data = ToyConfig::data(rep_seed);
  Model std_model = ToyConfig::train_std(data, rep_seed);
  Model adv_model = ToyConfig::train_adv(data, rep_seed);

  ExperimentPlan plan;
  plan.spec = ToyConfig::spec();
  plan.defense = ToyConfig::defense(2, 0);
  plan.attacks = {ToyConfig::bim_attack(), ToyConfig::deepfool_attack()};
  plan.eval_count = eval_count;
  plan.seed = Rng::split(rep_seed, 4);
  plan.threads = threads;

  // Std rows with the Std quorum, Adv rows with the Adv quorum (the
  // adversarially trained system runs with the stricter vote threshold).
  ResultsTable t_std =
      run_experiment(plan, std_model, adv_model, data.train, data.test);
  plan.defense = ToyConfig::defense(4, 0);
  ResultsTable t_adv =
      run_experiment(plan, std_model, adv_model, data.train, data.test);

  // Row layout per model: 0 bare, 1 defended-A, 2 defended-B; columns:
  // 0 Clean, 1 bim, 2 deepfool. Std rows are 0..2, Adv rows are 3..5.
  RepOutcome out;
  out.std_bare_clean = t_std.rows[0].cells[0];
  out.std_bare_bim = t_std.rows[0].cells[1];
  out.std_def_clean = t_std.rows[1].cells[0];
  out.std_defB_bim = t_std.rows[2].cells[1];
  out.adv_bare_clean = t_adv.rows[3].cells[0];
  out.adv_bare_bim = t_adv.rows[3].cells[1];
  out.adv_bare_df = t_adv.rows[3].cells[2];
  out.adv_def_clean = t_adv.rows[4].cells[0];
  out.adv_defA_bim = t_adv.rows[4].cells[1];
  out.adv_defA_df = t_adv.rows[4].cells[2];
  out.adv_defB_bim = t_adv.rows[5].cells[1];
  return out;
}

CriterionResult criterion_directional() {
  CriterionResult res;
  int a_pass = 0, b_pass = 0, c_pass = 0, d_pass = 0;
  const int reps = 3;
  std::string log;
  for (uint64_t rep = 1; rep <= reps; ++rep) {
    RepOutcome o = run_rep(rep, 200, 2);
    const bool a = o.adv_bare_bim > o.std_bare_bim;
    const bool b = o.adv_defA_bim >= o.adv_bare_bim &&
                   o.adv_defA_df >= o.adv_bare_df;
    const bool c = o.std_defB_bim <= 10.0 &&
                   o.adv_defB_bim >= o.adv_bare_bim - 2.0;
    const bool d = o.std_def_clean >= o.std_bare_clean - 5.0 &&
                   o.adv_def_clean >= o.adv_bare_clean - 5.0;
    a_pass += a;
    b_pass += b;
    c_pass += c;
    d_pass += d;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "rep%llu[a=%d b=%d c=%d d=%d | stdBIM %.1f advBIM %.1f "
                  "defA-BIM %.1f defA-DF %.1f vs %.1f stdB %.1f advB %.1f]",
                  static_cast<unsigned long long>(rep), a, b, c, d,
                  o.std_bare_bim, o.adv_bare_bim, o.adv_defA_bim, o.adv_defA_df,
                  o.adv_bare_df, o.std_defB_bim, o.adv_defB_bim);
    if (!log.empty()) log += " ";
    log += buf;
  }
  const int majority = reps / 2 + 1;
  res.pass = a_pass >= majority && b_pass >= majority && c_pass >= majority &&
             d_pass >= majority;
  res.detail = log;
  return res;
}

// ---------------------------------------------------------------------------
// Criterion 6: vote-rule truth table
// ---------------------------------------------------------------------------

CriterionResult criterion_vote() {
  CriterionResult res;
  auto brute = [](int original, const std::vector<int>& preds, int c3) {
    std::vector<int> count(16, 0);
    for (int p : preds) {
      if (p != original) ++count[static_cast<size_t>(p)];
    }
    int best = -1, bc = 0;
    for (int label = 0; label < 16; ++label) {
      if (count[static_cast<size_t>(label)] > bc) {
        bc = count[static_cast<size_t>(label)];
        best = label;
      }
    }
    if (bc >= c3) return std::make_pair(best, true);
    return std::make_pair(original, false);
  };

  int checked = 0, failures = 0;
  for (int k = 1; k <= 4; ++k) {
    std::vector<int> preds(static_cast<size_t>(k), 0);
    int total = 1;
    for (int i = 0; i < k; ++i) total *= k;
    for (int code = 0; code < total; ++code) {
      int c = code;
      for (int i = 0; i < k; ++i) {
        preds[static_cast<size_t>(i)] = c % k;
        c /= k;
      }
      for (int original = 0; original < k; ++original) {
        for (int c3 = 1; c3 <= 4; ++c3) {
          if (vote(original, preds, c3) != brute(original, preds, c3)) ++failures;
          ++checked;
        }
      }
    }
  }
  res.pass = failures == 0;
  res.detail = std::to_string(checked) + " compositions checked, " +
               std::to_string(failures) + " disagreements";
  return res;
}

// ---------------------------------------------------------------------------
// Criterion 7: loss-share direction
// ---------------------------------------------------------------------------

CriterionResult criterion_loss_share() {
  CriterionResult res;
  const uint64_t rep_seed = 21;
  auto data = ToyConfig::data(rep_seed);
  Model adv_model = ToyConfig::train_adv(data, rep_seed);

  DefenseConfig dcfg = ToyConfig::defense(4, Rng::split(rep_seed, 9));
  dcfg.tap_layers = {0, 1, 2, 3, 4, 5};  // span the full tap range
  DefensePipeline pipeline(adv_model, dcfg, data.train);

  const AttackConfig bim_cfg = ToyConfig::bim_attack().config;
  int wins = 0, total = 0;
  std::vector<char> ok(100, 0);
  parallel_for(100, 2, [&](int i) {
    const Tensor& img = data.test.images[static_cast<size_t>(i)];
    AttackOutcome o =
        bim(adv_model, img, data.test.labels[static_cast<size_t>(i)], bim_cfg);
    CommitteeResult r = pipeline.classify(o.adversarial, static_cast<uint64_t>(i));
    double deep = 0.0, shallow = 0.0, total_loss = 0.0;
    for (const auto& c : r.copies) {
      shallow += c.initial_layer_loss.at(0);
      deep += c.initial_layer_loss.at(5);
      for (const auto& [tap, loss] : c.initial_layer_loss) total_loss += loss;
    }
    // Share comparison: same denominator, so compare sums directly.
    ok[static_cast<size_t>(i)] = deep > shallow ? 1 : 0;
  });
  for (char c : ok) wins += c;
  total = 100;

  res.pass = wins >= 60;
  res.detail = "deepest tap's initial share exceeded the shallowest on " +
               std::to_string(wins) + "/" + std::to_string(total) + " inputs";
  return res;
}

// ---------------------------------------------------------------------------
// Criterion 8: determinism of full pipeline runs
// ---------------------------------------------------------------------------

CriterionResult criterion_determinism() {
  CriterionResult res;
  const uint64_t rep_seed = 5;
  auto data = ToyConfig::data(rep_seed);
  Model std_model = ToyConfig::train_std(data, rep_seed);
  Model adv_model = ToyConfig::train_adv(data, rep_seed);

  ExperimentPlan plan;
  plan.spec = ToyConfig::spec();
  plan.defense = ToyConfig::defense(2, 0);
  plan.attacks = {ToyConfig::bim_attack()};
  plan.eval_count = 25;
  plan.seed = 31;
  plan.threads = 2;

  ResultsTable t1 = run_experiment(plan, std_model, adv_model, data.train, data.test);
  ResultsTable t2 = run_experiment(plan, std_model, adv_model, data.train, data.test);
  const std::string r1 = results_to_csv(t1);
  const std::string r2 = results_to_csv(t2);
  const std::string m1 = results_to_markdown(t1);
  const std::string m2 = results_to_markdown(t2);
  res.pass = r1 == r2 && m1 == m2;
  res.detail = res.pass ? "csv and markdown reports byte-identical"
                        : "reports differ between identical runs";
  return res;
}

}  // namespace

int main() {
  std::printf("acceptance suite\n");
  run_criterion(1, "autodiff finite-difference gradient checks", 120.0,
                criterion_autodiff);
  run_criterion(2, "kernel identities (Gram, Mercer, PSD)", 60.0, criterion_kernels);
  run_criterion(3, "projection oracles (L1 ball, median filter)", 60.0,
                criterion_projections);
  run_criterion(4, "attack contracts (box, budget, closed forms, margins)", 300.0,
                criterion_attacks);
  run_criterion(5, "directional evaluation-table reproduction at toy scale",
                1800.0, criterion_directional);
  run_criterion(6, "vote-rule truth table", 10.0, criterion_vote);
  run_criterion(7, "kernel-loss share direction across depth", 300.0,
                criterion_loss_share);
  run_criterion(8, "byte-identical reports under fixed seeds", 600.0,
                criterion_determinism);
  if (g_failures == 0) {
    std::printf("all acceptance criteria passed\n");
    return 0;
  }
  std::printf("%d acceptance criteria failed\n", g_failures);
  return 1;
}
