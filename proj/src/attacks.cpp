#include "kshield/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kshield/rng.hpp"

namespace kshield {

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "fgsm") return AttackKind::FGSM;
  if (s == "bim") return AttackKind::BIM;
  if (s == "pgd") return AttackKind::PGD;
  if (s == "deepfool") return AttackKind::DeepFool;
  if (s == "cw_l2" || s == "cw") return AttackKind::CW_L2;
  if (s == "bpda" || s == "bpda_adaptive") return AttackKind::BPDA_adaptive;
  throw ConfigError("unknown attack kind '" + s + "'");
}

std::string attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::FGSM: return "fgsm";
    case AttackKind::BIM: return "bim";
    case AttackKind::PGD: return "pgd";
    case AttackKind::DeepFool: return "deepfool";
    case AttackKind::CW_L2: return "cw_l2";
    case AttackKind::BPDA_adaptive: return "bpda_adaptive";
  }
  return "?";
}

void AttackConfig::validate() const {
  if (epsilon < 0.0) throw ConfigError("attack: epsilon must be >= 0");
  if (iterations < 1) throw ConfigError("attack: iterations must be >= 1");
  if ((kind == AttackKind::BIM || kind == AttackKind::PGD ||
       kind == AttackKind::BPDA_adaptive) &&
      alpha > epsilon) {
    throw ConfigError("attack: alpha must be <= epsilon for BIM/PGD");
  }
  if (eot_samples < 1) throw ConfigError("attack: eot_samples must be >= 1");
  if (restarts < 1) throw ConfigError("attack: restarts must be >= 1");
}

namespace {

double linf_dist(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  }
  return m;
}

double l2_dist(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return std::sqrt(s);
}

void clamp01(Tensor& t) {
  for (double& v : t.data) v = std::clamp(v, 0.0, 1.0);
}

// Clamps `adv` into the epsilon L-inf ball around `orig` and into [0,1].
void project_linf(Tensor& adv, const Tensor& orig, double epsilon) {
  for (size_t i = 0; i < adv.data.size(); ++i) {
    const double lo = std::max(0.0, orig.data[i] - epsilon);
    const double hi = std::min(1.0, orig.data[i] + epsilon);
    adv.data[i] = std::clamp(adv.data[i], lo, hi);
  }
}

void project_l2_ball(Tensor& adv, const Tensor& orig, double radius) {
  double norm = l2_dist(adv, orig);
  if (norm > radius && norm > 0.0) {
    const double s = radius / norm;
    for (size_t i = 0; i < adv.data.size(); ++i) {
      adv.data[i] = orig.data[i] + s * (adv.data[i] - orig.data[i]);
    }
  }
  clamp01(adv);
}

AttackOutcome finish(const Classifier& model, const Tensor& orig, Tensor adv,
                     int label, int iterations_used, double epsilon_bound = -1.0) {
  clamp01(adv);
  AttackOutcome out;
  out.l2 = l2_dist(adv, orig);
  out.linf = linf_dist(adv, orig);
  if (epsilon_bound >= 0.0 && out.linf > epsilon_bound + 1e-9) {
    throw NumericError("attack: output violates its L-inf budget");
  }
  out.success = model.predict_label(adv) != label;
  out.adversarial = std::move(adv);
  out.iterations_used = iterations_used;
  return out;
}

// Gradient of the cross-entropy loss at `point` w.r.t. the input pixels.
std::vector<double> input_gradient(const Classifier& model, const Tensor& point,
                                   int label) {
  Graph g;
  Tensor in = point;
  in.requires_grad = true;
  in.grad.clear();
  Shape bshape;
  bshape.push_back(1);
  bshape.insert(bshape.end(), point.shape.begin(), point.shape.end());
  in.shape = bshape;
  Graph::NodeId input = g.leaf(std::move(in));
  Graph::NodeId logits = model.build_logits(g, input);
  Graph::NodeId loss = g.softmax_cross_entropy(logits, {label});
  if (!std::isfinite(g.val(loss).item())) {
    throw NumericError("attack: loss is not finite");
  }
  g.backward(loss);
  std::vector<double> grad = g.leaf_grad(input);
  for (double v : grad) {
    if (!std::isfinite(v)) throw NumericError("attack: gradient is not finite");
  }
  return grad;
}

}  // namespace

AttackOutcome fgsm(const Classifier& model, const Tensor& image, int label,
                   double alpha) {
  std::vector<double> grad = input_gradient(model, image, label);
  Tensor adv = image;
  for (size_t i = 0; i < adv.data.size(); ++i) {
    const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
    adv.data[i] += alpha * s;
  }
  return finish(model, image, std::move(adv), label, 1,
                alpha >= 0.0 ? alpha : -1.0);
}

namespace {

AttackOutcome iterated_linf(const Classifier& model, const Tensor& image,
                            int label, const AttackConfig& cfg, double init_radius,
                            uint64_t seed) {
  Tensor adv = image;
  if (init_radius > 0.0) {
    Rng rng(seed);
    for (double& v : adv.data) v += rng.uniform(-init_radius, init_radius);
    project_linf(adv, image, cfg.epsilon);
  }
  int used = 0;
  for (int it = 0; it < cfg.iterations; ++it, ++used) {
    std::vector<double> grad = input_gradient(model, adv, label);
    for (size_t i = 0; i < adv.data.size(); ++i) {
      const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
      adv.data[i] += cfg.alpha * s;
    }
    project_linf(adv, image, cfg.epsilon);
    if (cfg.project_l2 && cfg.epsilon_l2 > 0.0) {
      project_l2_ball(adv, image, cfg.epsilon_l2);
    }
  }
  return finish(model, image, std::move(adv), label, used, cfg.epsilon);
}

}  // namespace

AttackOutcome bim(const Classifier& model, const Tensor& image, int label,
                  const AttackConfig& cfg) {
  cfg.validate();
  return iterated_linf(model, image, label, cfg, 0.0, 0);
}

AttackOutcome pgd(const Classifier& model, const Tensor& image, int label,
                  const AttackConfig& cfg) {
  cfg.validate();
  const double radius = cfg.init_radius < 0.0 ? cfg.epsilon : cfg.init_radius;
  AttackOutcome best;
  bool have = false;
  for (int r = 0; r < cfg.restarts; ++r) {
    AttackOutcome o = iterated_linf(model, image, label, cfg, radius,
                                    Rng::split(cfg.seed, static_cast<uint64_t>(r)));
    if (!have || (o.success && !best.success) ||
        (o.success == best.success && o.l2 < best.l2)) {
      best = std::move(o);
      have = true;
    }
    if (best.success) break;  // keep the first successful restart
  }
  return best;
}

AttackOutcome deepfool(const Classifier& model, const Tensor& image,
                       const AttackConfig& cfg, int true_label) {
  const int k = model.num_classes();
  if (k < 2) throw ConfigError("deepfool: need >= 2 classes");
  const double overshoot = cfg.deepfool_overshoot;
  const int max_iter = cfg.deepfool_max_iterations;
  const int orig_label = model.predict_label(image);
  const int judged_label = true_label >= 0 ? true_label : orig_label;
  if (true_label >= 0 && orig_label != true_label) {
    Tensor adv = image;
    return finish(model, image, std::move(adv), judged_label, 0);
  }
  const int64_t n = image.size();

  std::vector<double> r_total(static_cast<size_t>(n), 0.0);
  auto perturbed = [&]() {
    Tensor x = image;
    for (int64_t i = 0; i < n; ++i) {
      x.data[static_cast<size_t>(i)] += (1.0 + overshoot) * r_total[static_cast<size_t>(i)];
    }
    return x;
  };

  int used = 0;
  for (int it = 0; it < max_iter; ++it) {
    Tensor x = perturbed();
    clamp01(x);
    if (model.predict_label(x) != orig_label) break;
    ++used;

    // Logits and per-class input gradients at the current point.
    Graph g;
    Tensor in = x;
    in.requires_grad = true;
    in.grad.clear();
    Shape bshape;
    bshape.push_back(1);
    bshape.insert(bshape.end(), image.shape.begin(), image.shape.end());
    in.shape = bshape;
    Graph::NodeId input = g.leaf(std::move(in));
    Graph::NodeId logits = model.build_logits(g, input);
    const Tensor z = g.val(logits);  // copy: gather() below grows the node list

    std::vector<std::vector<double>> grads(static_cast<size_t>(k));
    for (int c = 0; c < k; ++c) {
      g.zero_grad();
      g.backward(g.gather(logits, c));
      grads[static_cast<size_t>(c)] = g.leaf_grad(input);
    }

    double best_ratio = std::numeric_limits<double>::infinity();
    int best_c = -1;
    double best_fdiff = 0.0;
    double best_wnorm2 = 0.0;
    for (int c = 0; c < k; ++c) {
      if (c == orig_label) continue;
      double wnorm2 = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double w = grads[static_cast<size_t>(c)][static_cast<size_t>(i)] -
                         grads[static_cast<size_t>(orig_label)][static_cast<size_t>(i)];
        wnorm2 += w * w;
      }
      const double fdiff = z.data[static_cast<size_t>(c)] -
                           z.data[static_cast<size_t>(orig_label)];
      if (wnorm2 <= 1e-300) {
        throw NumericError("deepfool: zero gradient difference between classes " +
                           std::to_string(c) + " and " + std::to_string(orig_label));
      }
      const double ratio = std::abs(fdiff) / std::sqrt(wnorm2);
      if (ratio < best_ratio) {
        best_ratio = ratio;
        best_c = c;
        best_fdiff = fdiff;
        best_wnorm2 = wnorm2;
      }
    }
    const double scale = std::abs(best_fdiff) / best_wnorm2;
    for (int64_t i = 0; i < n; ++i) {
      const double w = grads[static_cast<size_t>(best_c)][static_cast<size_t>(i)] -
                       grads[static_cast<size_t>(orig_label)][static_cast<size_t>(i)];
      r_total[static_cast<size_t>(i)] += scale * w;
    }
  }

  Tensor adv = perturbed();
  return finish(model, image, std::move(adv), judged_label, used);
}

AttackOutcome cw_l2(const Classifier& model, const Tensor& image, int label,
                    const AttackConfig& cfg) {
  const CwParams& cw = cfg.cw;
  const int k = model.num_classes();
  const int64_t n = image.size();

  // tanh-space variable w with x_adv = (tanh(w) + 1) / 2, seeded at the
  // original image (nudged off the box boundary for atanh).
  std::vector<double> w0(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double x = std::clamp(image.data[static_cast<size_t>(i)], 1e-6, 1.0 - 1e-6);
    w0[static_cast<size_t>(i)] = std::atanh(2.0 * x - 1.0);
  }
  Tensor mask({k});
  for (int c = 0; c < k; ++c) {
    mask.data[static_cast<size_t>(c)] = c == label ? -1e30 : 0.0;
  }

  double lo = 0.0;
  double hi = -1.0;  // unset
  double c_cur = cw.initial_c;
  Tensor best_adv = image;
  double best_l2 = std::numeric_limits<double>::infinity();
  bool found = false;
  double best_margin = -std::numeric_limits<double>::infinity();
  Tensor best_effort = image;
  int used = 0;

  for (int step = 0; step < cw.binary_search_steps; ++step) {
    std::vector<double> wv = w0;
    std::vector<double> m(static_cast<size_t>(n), 0.0), v(static_cast<size_t>(n), 0.0);
    bool success_here = false;
    for (int it = 0; it < cw.iterations; ++it, ++used) {
      Graph g;
      Tensor wt = Tensor::from({static_cast<int>(n)}, wv);
      wt.requires_grad = true;
      Graph::NodeId wn = g.leaf(std::move(wt));
      Graph::NodeId xadv_flat =
          g.scale(g.add_scalar(g.tanh_op(wn), 1.0), 0.5);
      Shape bshape;
      bshape.push_back(1);
      bshape.insert(bshape.end(), image.shape.begin(), image.shape.end());
      Graph::NodeId xadv = g.reshape(xadv_flat, bshape);
      Tensor orig_flat = image;
      orig_flat.shape = {static_cast<int>(n)};
      Graph::NodeId diff = g.sub(xadv_flat, g.constant(orig_flat));
      Graph::NodeId dist = g.inner(diff, diff);
      Graph::NodeId logits = model.build_logits(g, xadv);
      Graph::NodeId row = g.slice0(logits, 0);
      Graph::NodeId z_true = g.gather(row, label);
      Graph::NodeId z_other = g.max_reduce(g.add(row, g.constant(mask)));
      Graph::NodeId hinge =
          g.relu(g.add_scalar(g.sub(z_true, z_other), cw.confidence));
      Graph::NodeId obj = g.add(dist, g.scale(hinge, c_cur));
      g.backward(obj);

      // Track the attack state at this iterate.
      const Tensor& xv = g.val(xadv_flat);
      const Tensor& zrow = g.val(row);
      double zt = zrow.data[static_cast<size_t>(label)];
      double zo = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        if (c != label) zo = std::max(zo, zrow.data[static_cast<size_t>(c)]);
      }
      const double margin = zo - zt;
      if (margin >= cw.confidence) {
        success_here = true;
        double l2 = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          const double d = xv.data[static_cast<size_t>(i)] - image.data[static_cast<size_t>(i)];
          l2 += d * d;
        }
        l2 = std::sqrt(l2);
        if (l2 < best_l2) {
          best_l2 = l2;
          best_adv = Tensor::from(image.shape, xv.data);
          found = true;
        }
      }
      if (margin > best_margin) {
        best_margin = margin;
        best_effort = Tensor::from(image.shape, xv.data);
      }

      // Adam step on w.
      const std::vector<double>& gw = g.leaf_grad(wn);
      const double b1 = 0.9, b2 = 0.999;
      const double t = static_cast<double>(it + 1);
      for (int64_t i = 0; i < n; ++i) {
        const size_t ii = static_cast<size_t>(i);
        m[ii] = b1 * m[ii] + (1.0 - b1) * gw[ii];
        v[ii] = b2 * v[ii] + (1.0 - b2) * gw[ii] * gw[ii];
        const double mh = m[ii] / (1.0 - std::pow(b1, t));
        const double vh = v[ii] / (1.0 - std::pow(b2, t));
        wv[ii] -= cw.lr * mh / (std::sqrt(vh) + 1e-12);
      }
    }
    if (success_here) {
      hi = c_cur;
      c_cur = (lo + hi) / 2.0;
    } else {
      lo = c_cur;
      c_cur = hi < 0.0 ? c_cur * 10.0 : (lo + hi) / 2.0;
    }
  }

  Tensor adv = found ? best_adv : best_effort;
  AttackOutcome out = finish(model, image, std::move(adv), label, used);
  if (!found) out.success = model.predict_label(out.adversarial) != label;
  return out;
}

Graph::NodeId aggregate_logits(Graph& g, const std::vector<Graph::NodeId>& logits) {
  if (logits.empty()) throw ShapeError("aggregate_logits: empty ensemble");
  Graph::NodeId agg = -1;
  for (Graph::NodeId z : logits) {
    Graph::NodeId zn = g.l2_normalize(z);
    agg = agg < 0 ? zn : g.add(agg, zn);
  }
  return agg;
}

AttackOutcome bpda_adaptive(const DefensePipeline& pipeline, const Tensor& image,
                            int label, const AttackConfig& cfg) {
  cfg.validate();
  const Model& model = pipeline.model();
  const DefenseConfig& dcfg = pipeline.config();
  const int k = model.num_classes();
  const int64_t n = image.size();

  Tensor adv = image;
  const double radius = cfg.init_radius < 0.0 ? cfg.epsilon : cfg.init_radius;
  if (radius > 0.0) {
    Rng rng(Rng::split(cfg.seed, 0xb9daULL));
    for (double& v : adv.data) v += rng.uniform(-radius, radius);
    project_linf(adv, image, cfg.epsilon);
  }

  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<double> avg_grad(static_cast<size_t>(n), 0.0);
    for (int s = 0; s < cfg.eot_samples; ++s) {
      // True defense forward: smooth, draw, transform.
      const uint64_t draw_seed =
          dcfg.fixed_samples
              ? dcfg.sample_seed
              : Rng::split(cfg.seed, 1000003ULL * static_cast<uint64_t>(it) +
                                         static_cast<uint64_t>(s) + 17);
      Tensor x_r = pipeline.smooth(adv);
      SampleSet samples = pipeline.draw_samples(draw_seed);
      auto transforms =
          pipeline.transform_copies(x_r, samples, Rng::split(draw_seed, 0x7fffULL));

      // BPDA backward: the transform output is x_R plus a constant, so the
      // gradient flows through the median filter's subgradient only.
      Graph g;
      Tensor in = adv;
      in.requires_grad = true;
      in.grad.clear();
      Graph::NodeId input = g.leaf(std::move(in));
      Graph::NodeId smoothed = g.median_filter(input, dcfg.smoother_window);
      std::vector<Graph::NodeId> copies;
      copies.reserve(static_cast<size_t>(k));
      for (int copy = 0; copy < k; ++copy) {
        Tensor delta(image.shape);
        const Tensor& timg = transforms[static_cast<size_t>(copy)].image;
        for (int64_t i = 0; i < n; ++i) {
          delta.data[static_cast<size_t>(i)] =
              timg.data[static_cast<size_t>(i)] - x_r.data[static_cast<size_t>(i)];
        }
        Graph::NodeId u = g.add(smoothed, g.constant(delta));
        Shape bshape;
        bshape.push_back(1);
        bshape.insert(bshape.end(), image.shape.begin(), image.shape.end());
        copies.push_back(g.reshape(u, bshape));
      }
      Graph::NodeId batch = g.concat0(copies);
      Graph::NodeId logits = model.build_logits(g, batch);  // [K, K]
      std::vector<Graph::NodeId> rows;
      rows.reserve(static_cast<size_t>(k));
      for (int copy = 0; copy < k; ++copy) rows.push_back(g.slice0(logits, copy));
      Graph::NodeId agg = aggregate_logits(g, rows);
      Graph::NodeId loss =
          g.softmax_cross_entropy(g.reshape(agg, {1, k}), {label});
      g.backward(loss);
      const std::vector<double>& gx = g.leaf_grad(input);
      for (int64_t i = 0; i < n; ++i) {
        avg_grad[static_cast<size_t>(i)] += gx[static_cast<size_t>(i)];
      }
    }

    for (int64_t i = 0; i < n; ++i) {
      const double gv = avg_grad[static_cast<size_t>(i)];
      const double s = gv > 0.0 ? 1.0 : (gv < 0.0 ? -1.0 : 0.0);
      adv.data[static_cast<size_t>(i)] += cfg.alpha * s;
    }
    project_linf(adv, image, cfg.epsilon);
  }

  clamp01(adv);
  AttackOutcome out;
  out.l2 = l2_dist(adv, image);
  out.linf = linf_dist(adv, image);
  if (out.linf > cfg.epsilon + 1e-9) {
    throw NumericError("bpda: output violates its L-inf budget");
  }
  // Success is judged by the full defended system.
  CommitteeResult res = pipeline.classify(adv, Rng::split(cfg.seed, 0xfeedULL));
  out.success = res.final_label != label;
  out.adversarial = std::move(adv);
  out.iterations_used = cfg.iterations;
  return out;
}

}  // namespace kshield
