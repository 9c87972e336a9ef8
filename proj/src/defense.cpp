#include "kshield/defense.hpp"

#include <algorithm>
#include <cmath>

#include "kshield/rng.hpp"

namespace kshield {

void DefenseConfig::validate(int num_classes) const {
  if (c1 <= 0.0) throw ConfigError("defense: c1 must be > 0");
  if (c2 <= 0.0) throw ConfigError("defense: c2 must be > 0");
  if (c3 < 1 || c3 > num_classes) {
    throw ConfigError("defense: c3 must be in [1, K]");
  }
  if (transform_iterations < 0) {
    throw ConfigError("defense: transform iterations must be >= 0");
  }
  if (tap_layers.empty()) throw ConfigError("defense: tap layer subset is empty");
  for (int t : tap_layers) {
    if (t < 0 || t >= ModelSpec::kNumTaps) {
      throw ConfigError("defense: tap index " + std::to_string(t) + " out of range");
    }
  }
  kernel.validate();
  if (smoother_window < 1) throw ConfigError("defense: smoother window must be >= 1");
  if (rmsprop_rho < 0.0 || rmsprop_rho >= 1.0) {
    throw ConfigError("defense: rmsprop rho must be in [0,1)");
  }
  if (rmsprop_lr <= 0.0) throw ConfigError("defense: rmsprop lr must be > 0");
}

Tensor median_filter(const Tensor& image, int window) {
  if (image.ndim() < 2) throw ShapeError("median_filter: input must have >= 2 dims");
  const int h = image.dim(image.ndim() - 2);
  const int w = image.dim(image.ndim() - 1);
  Tensor out(image.shape);
  median_filter_2d(image.data.data(), out.data.data(), nullptr,
                   image.size() / (static_cast<int64_t>(h) * w), h, w, window);
  return out;
}

std::vector<double> l1_ball_projection(std::vector<double> v, double radius) {
  if (radius <= 0.0) throw ConfigError("l1_ball_projection: radius must be > 0");
  double l1 = 0.0;
  for (double x : v) l1 += std::abs(x);
  if (l1 <= radius) return v;

  std::vector<double> u(v.size());
  for (size_t i = 0; i < v.size(); ++i) u[i] = std::abs(v[i]);
  std::sort(u.begin(), u.end(), std::greater<double>());
  double cum = 0.0;
  double theta = 0.0;
  for (size_t j = 0; j < u.size(); ++j) {
    cum += u[j];
    const double t = (cum - radius) / static_cast<double>(j + 1);
    if (u[j] > t) theta = t;
  }
  for (double& x : v) {
    const double mag = std::abs(x) - theta;
    x = mag > 0.0 ? (x > 0.0 ? mag : -mag) : 0.0;
  }
  return v;
}

std::pair<int, bool> vote(int original, const std::vector<int>& copy_predictions,
                          int c3) {
  if (c3 < 1) throw ConfigError("vote: c3 must be >= 1");
  std::map<int, int> counts;
  for (int p : copy_predictions) {
    if (p != original) ++counts[p];
  }
  int best_label = -1;
  int best_count = 0;
  for (const auto& [label, count] : counts) {
    if (count > best_count) {  // map order gives lowest-index tie-break
      best_label = label;
      best_count = count;
    }
  }
  if (best_count >= c3) return {best_label, true};
  return {original, false};
}

// ---------------------------------------------------------------------------
// SamplePool
// ---------------------------------------------------------------------------

SamplePool::SamplePool(const Dataset& train, const Model& model,
                       int smoother_window) {
  by_class_.resize(static_cast<size_t>(model.num_classes()));
  for (size_t i = 0; i < train.images.size(); ++i) {
    const Tensor& img = train.images[i];
    Tensor sm = median_filter(img, smoother_window);
    if (model.predict_label(sm) == train.labels[i]) {
      by_class_[static_cast<size_t>(train.labels[i])].push_back(img);
    }
  }
}

int SamplePool::candidate_count(int cls) const {
  return static_cast<int>(by_class_.at(static_cast<size_t>(cls)).size());
}

const Tensor& SamplePool::candidate(int cls, int i) const {
  return by_class_.at(static_cast<size_t>(cls)).at(static_cast<size_t>(i));
}

// ---------------------------------------------------------------------------
// DefensePipeline
// ---------------------------------------------------------------------------

DefensePipeline::DefensePipeline(const Model& model, DefenseConfig config,
                                 const Dataset& train)
    : model_(&model), config_(std::move(config)) {
  config_.validate(model.num_classes());
  pool_ = SamplePool(train, model, config_.smoother_window);
}

Tensor DefensePipeline::smooth(const Tensor& image) const {
  return median_filter(image, config_.smoother_window);
}

SampleSet DefensePipeline::draw_samples(uint64_t seed) const {
  ++invocations_;
  return draw_impl(seed);
}

SampleSet DefensePipeline::draw_impl(uint64_t seed) const {
  Rng rng(seed);
  SampleSet out;
  const int k = model_->num_classes();
  for (int cls = 0; cls < k; ++cls) {
    const int count = pool_.candidate_count(cls);
    if (count == 0) {
      throw ConfigError(
          "defense: the correctly-classified smoothed training pool is empty "
          "for class " + std::to_string(cls));
    }
    const Tensor& sample = pool_.candidate(cls, rng.uniform_int(count));
    out.images.push_back(sample);
    Tensor smoothed = median_filter(sample, config_.smoother_window);
    std::vector<Tensor> taps;
    model_->forward_with_taps(smoothed, taps);
    KernelTargetSet targets;
    targets.label = cls;
    for (int tap : config_.tap_layers) {
      KernelMatrix km;
      km.layer = tap;
      km.G = kernel_matrix(taps[static_cast<size_t>(tap)], config_.kernel);
      targets.targets[tap] = std::move(km);
    }
    out.targets.push_back(std::move(targets));
  }
  return out;
}

std::vector<DefensePipeline::TransformOut> DefensePipeline::transform_copies(
    const Tensor& smoothed, const SampleSet& samples, uint64_t noise_seed) const {
  ++invocations_;
  return transform_impl(smoothed, samples, noise_seed);
}

namespace {

struct BatchLoss {
  double total = 0.0;
  std::vector<double> per_copy;
  std::vector<std::map<int, double>> per_copy_layer;
};

// One forward pass over all K copies with per-copy kernel losses; when
// `want_grad` the summed loss is backpropagated to the batch leaf and the
// gradient copied to `grad_out`.
BatchLoss kernel_loss_pass(const Model& model, const DefenseConfig& cfg,
                           const Tensor& batch, const SampleSet& samples,
                           bool want_grad, std::vector<double>* grad_out) {
  const int k = model.num_classes();
  Graph g;
  Tensor in = batch;
  in.requires_grad = want_grad;
  in.grad.clear();
  Graph::NodeId input = g.leaf(std::move(in));
  auto built = model.build_with(g, input, model.param_nodes(g, false));

  BatchLoss out;
  out.per_copy.resize(static_cast<size_t>(k));
  out.per_copy_layer.resize(static_cast<size_t>(k));
  Graph::NodeId total = -1;
  for (int copy = 0; copy < k; ++copy) {
    std::map<int, Graph::NodeId> taps;
    for (int tap : cfg.tap_layers) {
      taps[tap] = g.slice0(built.taps[static_cast<size_t>(tap)], copy);
    }
    KernelLossBreakdown bd = total_kernel_loss_node(
        g, taps, samples.targets[static_cast<size_t>(copy)], cfg.tap_layers,
        cfg.kernel, cfg.normalize_kernel_loss);
    out.per_copy[static_cast<size_t>(copy)] = g.val(bd.total).item();
    for (const auto& [tap, node] : bd.per_layer) {
      out.per_copy_layer[static_cast<size_t>(copy)][tap] = g.val(node).item();
    }
    total = total < 0 ? bd.total : g.add(total, bd.total);
  }
  out.total = g.val(total).item();
  if (want_grad) {
    g.backward(total);
    *grad_out = g.leaf_grad(input);
  }
  return out;
}

}  // namespace

std::vector<DefensePipeline::TransformOut> DefensePipeline::transform_impl(
    const Tensor& smoothed, const SampleSet& samples, uint64_t noise_seed) const {
  const int k = model_->num_classes();
  const int64_t img_size = smoothed.size();
  const double c1 = config_.c1;
  const double c2 = config_.c2;

  // Batch of K copies, each initialized as x_R plus uniform noise in the
  // L-inf ball, then run through the constraint chain once.
  Shape bshape;
  bshape.push_back(k);
  bshape.insert(bshape.end(), smoothed.shape.begin(), smoothed.shape.end());
  Tensor batch(bshape);
  std::vector<char> aborted(static_cast<size_t>(k), 0);

  auto constrain_copy = [&](int copy) {
    double* x = batch.data.data() + static_cast<int64_t>(copy) * img_size;
    std::vector<double> delta(static_cast<size_t>(img_size));
    for (int64_t j = 0; j < img_size; ++j) delta[static_cast<size_t>(j)] = x[j] - smoothed.data[static_cast<size_t>(j)];
    delta = l1_ball_projection(std::move(delta), c1);
    for (int64_t j = 0; j < img_size; ++j) {
      double d = std::clamp(delta[static_cast<size_t>(j)], -c2, c2);
      x[j] = std::clamp(smoothed.data[static_cast<size_t>(j)] + d, 0.0, 1.0);
    }
  };

  for (int copy = 0; copy < k; ++copy) {
    Rng rng(Rng::split(noise_seed, static_cast<uint64_t>(copy)));
    double* x = batch.data.data() + static_cast<int64_t>(copy) * img_size;
    for (int64_t j = 0; j < img_size; ++j) {
      x[j] = smoothed.data[static_cast<size_t>(j)] + rng.uniform(-c2, c2);
    }
    constrain_copy(copy);
  }

  // RMSprop state per copy.
  std::vector<std::vector<double>> vstate(
      static_cast<size_t>(k), std::vector<double>(static_cast<size_t>(img_size), 0.0));

  std::vector<TransformOut> out(static_cast<size_t>(k));
  bool have_initial = false;

  const int iters = config_.transform_iterations;
  for (int iter = 0; iter < iters; ++iter) {
    std::vector<double> grad;
    BatchLoss loss = kernel_loss_pass(*model_, config_, batch, samples, true, &grad);
    if (iter == 0) {
      for (int copy = 0; copy < k; ++copy) {
        out[static_cast<size_t>(copy)].initial_loss = loss.per_copy[static_cast<size_t>(copy)];
        out[static_cast<size_t>(copy)].initial_layer_loss =
            loss.per_copy_layer[static_cast<size_t>(copy)];
      }
      have_initial = true;
    }
    for (int copy = 0; copy < k; ++copy) {
      if (aborted[static_cast<size_t>(copy)]) continue;
      if (!std::isfinite(loss.per_copy[static_cast<size_t>(copy)])) {
        // Abort this copy: it reverts to the unmodified smoothed image and
        // later votes with the original prediction.
        aborted[static_cast<size_t>(copy)] = 1;
        double* x = batch.data.data() + static_cast<int64_t>(copy) * img_size;
        std::copy(smoothed.data.begin(), smoothed.data.end(), x);
        continue;
      }
      double* x = batch.data.data() + static_cast<int64_t>(copy) * img_size;
      const double* gx = grad.data() + static_cast<int64_t>(copy) * img_size;
      std::vector<double>& v = vstate[static_cast<size_t>(copy)];
      for (int64_t j = 0; j < img_size; ++j) {
        const double gj = gx[j];
        v[static_cast<size_t>(j)] =
            config_.rmsprop_rho * v[static_cast<size_t>(j)] +
            (1.0 - config_.rmsprop_rho) * gj * gj;
        x[j] -= config_.rmsprop_lr * gj / (std::sqrt(v[static_cast<size_t>(j)]) + 1e-8);
      }
      constrain_copy(copy);
    }
  }

  // Diagnostic pass for the final (and, with zero iterations, initial) loss.
  BatchLoss final_loss = kernel_loss_pass(*model_, config_, batch, samples, false, nullptr);
  for (int copy = 0; copy < k; ++copy) {
    TransformOut& t = out[static_cast<size_t>(copy)];
    if (!have_initial) {
      t.initial_loss = final_loss.per_copy[static_cast<size_t>(copy)];
      t.initial_layer_loss = final_loss.per_copy_layer[static_cast<size_t>(copy)];
    }
    t.final_loss = final_loss.per_copy[static_cast<size_t>(copy)];
    t.aborted = aborted[static_cast<size_t>(copy)] != 0;
    Tensor img(smoothed.shape);
    std::copy(batch.data.begin() + static_cast<int64_t>(copy) * img_size,
              batch.data.begin() + static_cast<int64_t>(copy + 1) * img_size,
              img.data.begin());
    t.image = std::move(img);

    // Budget invariants, asserted per copy per call.
    double linf = 0.0, l1 = 0.0;
    for (int64_t j = 0; j < img_size; ++j) {
      const double d = t.image.data[static_cast<size_t>(j)] - smoothed.data[static_cast<size_t>(j)];
      linf = std::max(linf, std::abs(d));
      l1 += std::abs(d);
    }
    if (linf > c2 + 1e-9 || l1 > c1 + 1e-6) {
      throw NumericError("defense: transform output violates its budget");
    }
  }
  return out;
}

CommitteeResult DefensePipeline::classify(const Tensor& image,
                                          uint64_t stream_id) const {
  ++invocations_;
  CommitteeResult res;
  res.original = model_->predict_label(image);

  Tensor x_r = smooth(image);
  const uint64_t seed = config_.fixed_samples
                            ? config_.sample_seed
                            : Rng::split(config_.sample_seed, stream_id + 1);
  SampleSet samples = draw_impl(seed);
  auto transforms = transform_impl(x_r, samples, Rng::split(seed, 0x7fffULL));

  const int k = model_->num_classes();
  for (int copy = 0; copy < k; ++copy) {
    const auto& t = transforms[static_cast<size_t>(copy)];
    CommitteeResult::CopyDiag diag;
    diag.target_class = copy;
    diag.initial_loss = t.initial_loss;
    diag.final_loss = t.final_loss;
    diag.initial_layer_loss = t.initial_layer_loss;
    diag.aborted = t.aborted;
    diag.prediction = t.aborted ? res.original : model_->predict_label(t.image);
    res.copy_predictions.push_back(diag.prediction);
    res.copies.push_back(std::move(diag));
  }
  for (int p : res.copy_predictions) {
    if (p != res.original) res.changed.push_back(p);
  }
  auto [final_label, overruled] = vote(res.original, res.copy_predictions, config_.c3);
  res.final_label = final_label;
  res.overruled = overruled;
  return res;
}

}  // namespace kshield
