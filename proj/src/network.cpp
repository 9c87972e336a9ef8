#include "kshield/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>

#include "kshield/rng.hpp"

namespace kshield {

int argmax_lowest(const std::vector<double>& v) {
  int best = 0;
  for (size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

Prediction Classifier::predict(const Tensor& image) const {
  Graph g;
  Shape batch_shape;
  batch_shape.push_back(1);
  batch_shape.insert(batch_shape.end(), image.shape.begin(), image.shape.end());
  Tensor b = image;
  b.requires_grad = false;
  b.grad.clear();
  b.shape = batch_shape;
  Graph::NodeId logits = build_logits(g, g.leaf(std::move(b)));
  Graph::NodeId probs = g.softmax(logits);
  Prediction p;
  p.logits = g.val(g.slice0(logits, 0));
  p.probs = g.val(g.slice0(probs, 0));
  p.label = argmax_lowest(p.probs.data);
  return p;
}

int Classifier::predict_label(const Tensor& image) const {
  return predict(image).label;
}

// ---------------------------------------------------------------------------
// ModelSpec
// ---------------------------------------------------------------------------

void ModelSpec::validate() const {
  if (in_channels < 1 || width < 1 || num_classes < 2) {
    throw ConfigError("model spec: need channels >= 1, width >= 1, classes >= 2");
  }
  if (in_h < 4 || in_w < 4 || in_h % 2 != 0 || in_w % 2 != 0) {
    throw ConfigError("model spec: input height/width must be even and >= 4");
  }
}

std::vector<LayerDesc> ModelSpec::layers() const {
  std::vector<LayerDesc> out;
  out.push_back({LayerDesc::Kind::Conv, width});
  out.push_back({LayerDesc::Kind::Relu, 0});
  for (int b = 0; b < kBlocks; ++b) {
    out.push_back({LayerDesc::Kind::Block, block_width(b)});
  }
  out.push_back({LayerDesc::Kind::Pool, 2});
  out.push_back({LayerDesc::Kind::Linear, num_classes});
  return out;
}

Shape ModelSpec::tap_shape(int tap) const {
  if (tap < 0 || tap >= kNumTaps) {
    throw ConfigError("invalid tap index " + std::to_string(tap));
  }
  if (tap <= 1) return {width, in_h, in_w};
  return {block_width(tap - 2), in_h, in_w};
}

int ModelSpec::flattened_features() const {
  return deep_width() * (in_h / 2) * (in_w / 2);
}

int64_t ModelSpec::param_count() const {
  int64_t count = static_cast<int64_t>(width) * in_channels * 9 + width;
  int in_c = width;
  for (int b = 0; b < kBlocks; ++b) {
    const int out_c = block_width(b);
    count += static_cast<int64_t>(out_c) * in_c * 9 + out_c;   // conv1
    count += static_cast<int64_t>(out_c) * out_c * 9 + out_c;  // conv2
    if (in_c != out_c) count += static_cast<int64_t>(out_c) * in_c + out_c;
    in_c = out_c;
  }
  count += static_cast<int64_t>(num_classes) * flattened_features() + num_classes;
  return count;
}

uint64_t ModelSpec::hash() const {
  std::string canon = "kshd-ws|in:" + std::to_string(in_channels) + "x" +
                      std::to_string(in_h) + "x" + std::to_string(in_w) +
                      "|classes:" + std::to_string(num_classes) + "|";
  for (const LayerDesc& l : layers()) {
    switch (l.kind) {
      case LayerDesc::Kind::Conv: canon += "conv" + std::to_string(l.arg0) + ";"; break;
      case LayerDesc::Kind::Relu: canon += "relu;"; break;
      case LayerDesc::Kind::Block: canon += "block" + std::to_string(l.arg0) + ";"; break;
      case LayerDesc::Kind::Pool: canon += "pool" + std::to_string(l.arg0) + ";"; break;
      case LayerDesc::Kind::Linear: canon += "linear" + std::to_string(l.arg0) + ";"; break;
    }
  }
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : canon) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelSpec spec, uint64_t init_seed) : spec_(spec) {
  spec_.validate();
  Rng rng(init_seed);
  auto conv_pair = [&](int out_c, int in_c, int k) {
    Tensor w({out_c, in_c, k, k});
    const double std = std::sqrt(2.0 / (in_c * k * k));
    for (double& v : w.data) v = std * rng.normal();
    params_.push_back(std::move(w));
    params_.push_back(Tensor({out_c}));
  };
  conv_pair(spec_.width, spec_.in_channels, 3);
  int in_c = spec_.width;
  for (int b = 0; b < ModelSpec::kBlocks; ++b) {
    const int out_c = spec_.block_width(b);
    conv_pair(out_c, in_c, 3);
    conv_pair(out_c, out_c, 3);
    if (in_c != out_c) conv_pair(out_c, in_c, 1);  // projection skip
    in_c = out_c;
  }
  const int f = spec_.flattened_features();
  Tensor lw({spec_.num_classes, f});
  const double std = std::sqrt(2.0 / f);
  for (double& v : lw.data) v = std * rng.normal();
  params_.push_back(std::move(lw));
  params_.push_back(Tensor({spec_.num_classes}));
}

std::vector<Graph::NodeId> Model::param_nodes(Graph& g, bool requires_grad) const {
  std::vector<Graph::NodeId> ids;
  ids.reserve(params_.size());
  for (const Tensor& p : params_) {
    Tensor t = p;
    t.requires_grad = requires_grad;
    t.grad.clear();
    ids.push_back(g.leaf(std::move(t)));
  }
  return ids;
}

Model::Built Model::build_with(Graph& g, Graph::NodeId batch,
                               const std::vector<Graph::NodeId>& params) const {
  const Tensor& in = g.val(batch);
  if (in.ndim() != 4 || in.dim(1) != spec_.in_channels || in.dim(2) != spec_.in_h ||
      in.dim(3) != spec_.in_w) {
    throw ShapeError("model: input batch is " + shape_str(in.shape) +
                     ", expected [N," + std::to_string(spec_.in_channels) + "," +
                     std::to_string(spec_.in_h) + "," + std::to_string(spec_.in_w) + "]");
  }
  const int n = in.dim(0);
  Built out;
  size_t pi = 0;
  auto next = [&]() { return params[pi++]; };
  // Weight-standardized convolutions keep per-layer activation scales fixed
  // by construction (no batch statistics needed at this scale). The sqrt(2)
  // gain compensates the ReLU halving.
  const double kReluGain = std::sqrt(2.0);
  auto std_w = [&](Graph::NodeId w, double gain) {
    return g.scale(g.weight_standardize(w), gain);
  };

  Graph::NodeId w0 = next(), b0 = next();
  Graph::NodeId x = g.conv2d(batch, std_w(w0, kReluGain), b0, 1, 1);
  out.taps[0] = x;
  x = g.relu(x);
  out.taps[1] = x;
  int in_c = spec_.width;
  for (int b = 0; b < ModelSpec::kBlocks; ++b) {
    const int out_c = spec_.block_width(b);
    Graph::NodeId w1 = next(), b1 = next(), w2 = next(), b2 = next();
    Graph::NodeId h = g.relu(g.conv2d(x, std_w(w1, kReluGain), b1, 1, 1));
    Graph::NodeId y = g.conv2d(h, std_w(w2, kReluGain), b2, 1, 1);
    Graph::NodeId skip = x;
    if (in_c != out_c) {
      Graph::NodeId ws = next(), bs = next();
      skip = g.conv2d(x, std_w(ws, 1.0), bs, 1, 0);
    }
    x = g.relu(g.add(skip, y));
    out.taps[static_cast<size_t>(2 + b)] = x;
    in_c = out_c;
  }
  x = g.max_pool2d(x, 2, 2);
  x = g.reshape(x, {n, spec_.flattened_features()});
  Graph::NodeId lw = next(), lb = next();
  out.logits = g.linear(x, lw, lb);
  return out;
}

Graph::NodeId Model::build_logits(Graph& g, Graph::NodeId batch) const {
  return build_with(g, batch, param_nodes(g, false)).logits;
}

std::vector<Prediction> Model::predict_batch(const Tensor& batch) const {
  Graph g;
  Tensor b = batch;
  b.requires_grad = false;
  b.grad.clear();
  Graph::NodeId logits = build_logits(g, g.leaf(std::move(b)));
  Graph::NodeId probs = g.softmax(logits);
  const int n = g.val(logits).dim(0);
  std::vector<Prediction> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)].logits = g.val(g.slice0(logits, i));
    out[static_cast<size_t>(i)].probs = g.val(g.slice0(probs, i));
    out[static_cast<size_t>(i)].label =
        argmax_lowest(out[static_cast<size_t>(i)].probs.data);
  }
  return out;
}

Prediction Model::forward_with_taps(const Tensor& image,
                                    std::vector<Tensor>& taps_out) const {
  Graph g;
  Tensor b = image;
  b.requires_grad = false;
  b.grad.clear();
  Shape batch_shape;
  batch_shape.push_back(1);
  batch_shape.insert(batch_shape.end(), image.shape.begin(), image.shape.end());
  b.shape = batch_shape;
  Built built = build_with(g, g.leaf(std::move(b)), param_nodes(g, false));
  taps_out.clear();
  for (Graph::NodeId tap : built.taps) {
    taps_out.push_back(g.val(g.slice0(tap, 0)));
  }
  Graph::NodeId probs = g.softmax(built.logits);
  Prediction p;
  p.logits = g.val(g.slice0(built.logits, 0));
  p.probs = g.val(g.slice0(probs, 0));
  p.label = argmax_lowest(p.probs.data);
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& buf, size_t& off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[off++])) << (8 * i);
  return v;
}

uint64_t get_u64(const std::string& buf, size_t& off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[off++])) << (8 * i);
  return v;
}

}  // namespace

Checkpoint snapshot(const Model& model, uint32_t epochs, TrainKind kind,
                    uint64_t seed) {
  Checkpoint c;
  c.spec_hash = model.spec().hash();
  c.params = model.params();
  for (Tensor& t : c.params) {
    t.requires_grad = false;
    t.grad.clear();
  }
  c.epochs = epochs;
  c.kind = kind;
  c.seed = seed;
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string buf;
  buf += "KSHD";
  put_u32(buf, ckpt.version);
  put_u64(buf, ckpt.spec_hash);
  int64_t count = 0;
  for (const Tensor& t : ckpt.params) count += t.size();
  put_u64(buf, static_cast<uint64_t>(count));
  for (const Tensor& t : ckpt.params) {
    for (double v : t.data) put_u64(buf, std::bit_cast<uint64_t>(v));
  }
  put_u32(buf, ckpt.epochs);
  buf.push_back(static_cast<char>(ckpt.kind));
  put_u64(buf, ckpt.seed);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 24 || buf.compare(0, 4, "KSHD") != 0) {
    throw DataError("checkpoint: bad magic in " + path);
  }
  size_t off = 4;
  Checkpoint c;
  c.version = get_u32(buf, off);
  if (c.version != 1) {
    throw DataError("checkpoint: unsupported version " + std::to_string(c.version));
  }
  c.spec_hash = get_u64(buf, off);
  const uint64_t count = get_u64(buf, off);
  if (buf.size() < off + count * 8 + 13) {
    throw DataError("checkpoint: truncated file " + path);
  }
  Tensor flat({count > 0 ? static_cast<int>(count) : 1});
  for (uint64_t i = 0; i < count; ++i) {
    flat.data[static_cast<size_t>(i)] = std::bit_cast<double>(get_u64(buf, off));
  }
  c.params.clear();
  c.params.push_back(std::move(flat));  // reshaped by restore() against a spec
  c.epochs = get_u32(buf, off);
  c.kind = static_cast<TrainKind>(static_cast<unsigned char>(buf[off++]));
  c.seed = get_u64(buf, off);
  return c;
}

void restore(Model& model, const Checkpoint& ckpt) {
  if (ckpt.spec_hash != model.spec().hash()) {
    throw DataError("checkpoint: spec hash mismatch (config-hash mismatch)");
  }
  // Flat layout or per-layer layout both restore in declared order.
  std::vector<double> flat;
  for (const Tensor& t : ckpt.params) {
    flat.insert(flat.end(), t.data.begin(), t.data.end());
  }
  if (static_cast<int64_t>(flat.size()) != model.spec().param_count()) {
    throw DataError("checkpoint: parameter count " + std::to_string(flat.size()) +
                    " does not match spec count " +
                    std::to_string(model.spec().param_count()));
  }
  size_t off = 0;
  for (Tensor& p : model.params()) {
    std::copy(flat.begin() + static_cast<int64_t>(off),
              flat.begin() + static_cast<int64_t>(off) + p.size(), p.data.begin());
    off += static_cast<size_t>(p.size());
  }
}

Model load_model(const std::string& path, const ModelSpec& spec) {
  Checkpoint c = load_checkpoint(path);
  Model m(spec, 0);
  restore(m, c);
  return m;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct Sgd {
  double lr;
  double momentum;
  std::vector<std::vector<double>> velocity;

  explicit Sgd(const std::vector<Tensor>& params, double lr_, double momentum_)
      : lr(lr_), momentum(momentum_) {
    for (const Tensor& p : params) velocity.emplace_back(p.data.size(), 0.0);
  }

  void step(std::vector<Tensor>& params, Graph& g,
            const std::vector<Graph::NodeId>& ids) {
    for (size_t i = 0; i < params.size(); ++i) {
      const std::vector<double>& grad = g.leaf_grad(ids[i]);
      std::vector<double>& vel = velocity[i];
      std::vector<double>& w = params[i].data;
      for (size_t j = 0; j < w.size(); ++j) {
        vel[j] = momentum * vel[j] - lr * grad[j];
        w[j] += vel[j];
      }
    }
  }
};

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i) {
    const int j = rng.uniform_int(i + 1);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
}

double dataset_accuracy(const Model& model, const std::vector<Tensor>& images,
                        const std::vector<int>& labels) {
  if (images.empty()) return 0.0;
  int correct = 0;
  const int chunk = 32;
  for (size_t start = 0; start < images.size(); start += chunk) {
    const size_t end = std::min(images.size(), start + chunk);
    Shape s = images[start].shape;
    Shape bs;
    bs.push_back(static_cast<int>(end - start));
    bs.insert(bs.end(), s.begin(), s.end());
    Tensor batch(bs);
    const int64_t stride = numel(s);
    for (size_t i = start; i < end; ++i) {
      std::copy(images[i].data.begin(), images[i].data.end(),
                batch.data.begin() + static_cast<int64_t>(i - start) * stride);
    }
    auto preds = model.predict_batch(batch);
    for (size_t i = start; i < end; ++i) {
      if (preds[i - start].label == labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

Checkpoint train_loop(Model& model, const std::vector<Tensor>& images,
                      const std::vector<int>& labels, const TrainConfig& cfg,
                      TrainKind kind, TrainReport* report) {
  if (images.empty()) throw DataError("train: empty dataset");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  Rng rng(cfg.seed);
  Sgd opt(model.params(), cfg.lr, cfg.momentum);
  std::vector<int> idx(images.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);

  double last_loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_indices(idx, rng);
    int batch_no = 0;
    for (size_t start = 0; start < idx.size(); start += cfg.batch_size, ++batch_no) {
      const size_t end = std::min(idx.size(), start + cfg.batch_size);
      std::vector<int> bidx(idx.begin() + static_cast<int64_t>(start),
                            idx.begin() + static_cast<int64_t>(end));
      Shape s = images[static_cast<size_t>(bidx[0])].shape;
      Shape bs;
      bs.push_back(static_cast<int>(bidx.size()));
      bs.insert(bs.end(), s.begin(), s.end());
      Tensor batch(bs);
      std::vector<int> blabels(bidx.size());
      const int64_t stride = numel(s);
      for (size_t i = 0; i < bidx.size(); ++i) {
        const Tensor& img = images[static_cast<size_t>(bidx[i])];
        std::copy(img.data.begin(), img.data.end(),
                  batch.data.begin() + static_cast<int64_t>(i) * stride);
        blabels[i] = labels[static_cast<size_t>(bidx[i])];
      }
      Graph g;
      auto pids = model.param_nodes(g, true);
      Graph::NodeId input = g.leaf(std::move(batch));
      auto built = model.build_with(g, input, pids);
      Graph::NodeId loss = g.softmax_cross_entropy(built.logits, blabels);
      last_loss = g.val(loss).item();
      if (!std::isfinite(last_loss)) {
        throw TrainingError("training loss is not finite", epoch, batch_no);
      }
      g.backward(loss);
      opt.step(model.params(), g, pids);
    }
  }
  const double acc = dataset_accuracy(model, images, labels);
  if (report) {
    report->final_loss = last_loss;
    report->train_accuracy = acc;
  }
  if (cfg.epochs >= 1 && cfg.accuracy_margin >= 0.0) {
    const double chance = 1.0 / model.num_classes();
    if (acc <= chance + cfg.accuracy_margin) {
      throw TrainingError("training accuracy " + std::to_string(acc) +
                              " did not exceed chance by the configured margin",
                          cfg.epochs - 1, -1);
    }
  }
  return snapshot(model, static_cast<uint32_t>(cfg.epochs), kind, cfg.seed);
}

}  // namespace

double accuracy(const Model& model, const Dataset& data) {
  return dataset_accuracy(model, data.images, data.labels);
}

double accuracy_on(const Model& model, const std::vector<Tensor>& images,
                   const std::vector<int>& labels) {
  return dataset_accuracy(model, images, labels);
}

Checkpoint train_standard(Model& model, const Dataset& data, const TrainConfig& cfg,
                          TrainReport* report) {
  return train_loop(model, data.images, data.labels, cfg, TrainKind::Std, report);
}

Checkpoint train_smoothing_augmented(Model& model, const Dataset& data,
                                     int smoother_window, const TrainConfig& cfg,
                                     TrainReport* report) {
  if (data.images.empty()) throw DataError("train: empty dataset");
  std::vector<Tensor> images = data.images;
  std::vector<int> labels = data.labels;
  images.reserve(2 * images.size());
  for (size_t i = 0; i < data.images.size(); ++i) {
    const Tensor& img = data.images[i];
    Tensor sm(img.shape);
    const int h = img.dim(img.ndim() - 2);
    const int w = img.dim(img.ndim() - 1);
    median_filter_2d(img.data.data(), sm.data.data(), nullptr,
                     img.size() / (static_cast<int64_t>(h) * w), h, w,
                     smoother_window);
    images.push_back(std::move(sm));
    labels.push_back(data.labels[i]);
  }
  return train_loop(model, images, labels, cfg, TrainKind::Std, report);
}

Checkpoint train_adversarial(Model& model, const Dataset& data,
                             const AdvTrainConfig& cfg, TrainReport* report,
                             const std::function<void(const std::vector<double>&)>&
                                 replay_observer) {
  if (data.images.empty()) throw DataError("train: empty dataset");
  if (cfg.replays < 1) throw ConfigError("train_adversarial: m must be >= 1");
  if (cfg.epsilon < 0.0) throw ConfigError("train_adversarial: epsilon must be >= 0");
  const TrainConfig& base = cfg.base;
  Rng rng(base.seed);
  Sgd opt(model.params(), base.lr, base.momentum);
  std::vector<int> idx(data.images.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);

  // Free adversarial training keeps the perturbation alive across batches.
  const int64_t img_size = data.images[0].size();
  std::vector<double> delta(static_cast<size_t>(base.batch_size) * img_size, 0.0);

  double last_loss = 0.0;
  for (int epoch = 0; epoch < base.epochs; ++epoch) {
    shuffle_indices(idx, rng);
    int batch_no = 0;
    for (size_t start = 0; start < idx.size(); start += base.batch_size, ++batch_no) {
      const size_t end = std::min(idx.size(), start + base.batch_size);
      const int bsize = static_cast<int>(end - start);
      Shape s = data.images[0].shape;
      Shape bs;
      bs.push_back(bsize);
      bs.insert(bs.end(), s.begin(), s.end());
      Tensor clean(bs);
      std::vector<int> blabels(static_cast<size_t>(bsize));
      for (int i = 0; i < bsize; ++i) {
        const Tensor& img = data.images[static_cast<size_t>(idx[start + static_cast<size_t>(i)])];
        std::copy(img.data.begin(), img.data.end(),
                  clean.data.begin() + static_cast<int64_t>(i) * img_size);
        blabels[static_cast<size_t>(i)] = data.labels[static_cast<size_t>(idx[start + static_cast<size_t>(i)])];
      }

      for (int replay = 0; replay < cfg.replays; ++replay) {
        Graph g;
        auto pids = model.param_nodes(g, true);
        Graph::NodeId clean_in = g.constant(clean);
        auto clean_built = model.build_with(g, clean_in, pids);
        Graph::NodeId loss =
            g.softmax_cross_entropy(clean_built.logits, blabels);

        // The weight loss is CE(clean) + lambda * KL(adv || clean); the
        // perturbation follows the same loss when lambda > 0, otherwise it
        // climbs the classification loss of the perturbed batch directly.
        Graph::NodeId adv_in = -1;
        Graph::NodeId delta_loss = -1;
        if (cfg.epsilon > 0.0 || cfg.trades_lambda != 0.0) {
          Tensor adv = clean;
          for (size_t j = 0; j < adv.data.size(); ++j) {
            adv.data[j] = std::clamp(adv.data[j] + delta[j], 0.0, 1.0);
          }
          adv.requires_grad = true;
          adv_in = g.leaf(std::move(adv));
          auto adv_built = model.build_with(g, adv_in, pids);
          if (cfg.trades_lambda != 0.0) {
            Graph::NodeId pa = g.softmax(adv_built.logits);
            Graph::NodeId la = g.log_softmax(adv_built.logits);
            Graph::NodeId lc = g.log_softmax(clean_built.logits);
            Graph::NodeId kl =
                g.scale(g.sum(g.mul(pa, g.sub(la, lc))), 1.0 / bsize);
            loss = g.add(loss, g.scale(kl, cfg.trades_lambda));
            delta_loss = loss;
          } else {
            delta_loss = g.softmax_cross_entropy(adv_built.logits, blabels);
          }
        }
        last_loss = g.val(loss).item();
        if (!std::isfinite(last_loss)) {
          throw TrainingError("adversarial training loss is not finite", epoch,
                              batch_no);
        }
        g.backward(loss);
        opt.step(model.params(), g, pids);
        if (adv_in >= 0 && cfg.epsilon > 0.0) {
          if (delta_loss != loss) {
            g.zero_grad();
            g.backward(delta_loss);
          }
          const std::vector<double>& gx = g.leaf_grad(adv_in);
          for (int i = 0; i < bsize; ++i) {
            for (int64_t j = 0; j < img_size; ++j) {
              const size_t k = static_cast<size_t>(i) * static_cast<size_t>(img_size) +
                               static_cast<size_t>(j);
              const double gv = gx[k];
              const double step = gv > 0.0 ? cfg.epsilon : (gv < 0.0 ? -cfg.epsilon : 0.0);
              delta[k] = std::clamp(delta[k] + step, -cfg.epsilon, cfg.epsilon);
            }
          }
        }
        if (replay_observer) {
          replay_observer(std::vector<double>(
              delta.begin(), delta.begin() + static_cast<int64_t>(bsize) * img_size));
        }
      }
    }
  }
  const double acc = dataset_accuracy(model, data.images, data.labels);
  if (report) {
    report->final_loss = last_loss;
    report->train_accuracy = acc;
  }
  if (base.epochs >= 1 && base.accuracy_margin >= 0.0) {
    const double chance = 1.0 / model.num_classes();
    if (acc <= chance + base.accuracy_margin) {
      throw TrainingError("adversarial training accuracy " + std::to_string(acc) +
                              " did not exceed chance by the configured margin",
                          base.epochs - 1, -1);
    }
  }
  return snapshot(model, static_cast<uint32_t>(base.epochs), TrainKind::Adv,
                  base.seed);
}

}  // namespace kshield
