#include "kshield/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "kshield/rng.hpp"

namespace kshield {

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

void Dataset::check_invariants() const {
  if (images.size() != labels.size()) {
    throw DataError("dataset: image/label count mismatch");
  }
  for (size_t i = 0; i < images.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw DataError("dataset: label out of range at index " + std::to_string(i));
    }
    for (double v : images[i].data) {
      if (v < 0.0 || v > 1.0) {
        throw DataError("dataset: pixel outside [0,1] at index " + std::to_string(i));
      }
    }
  }
}

Tensor Dataset::batch(const std::vector<int>& indices) const {
  if (indices.empty()) throw DataError("dataset: empty batch");
  const Shape& s = images[static_cast<size_t>(indices[0])].shape;
  Shape out_shape;
  out_shape.push_back(static_cast<int>(indices.size()));
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor out(out_shape);
  const int64_t stride = numel(s);
  for (size_t i = 0; i < indices.size(); ++i) {
    const Tensor& img = images[static_cast<size_t>(indices[i])];
    std::copy(img.data.begin(), img.data.end(),
              out.data.begin() + static_cast<int64_t>(i) * stride);
  }
  return out;
}

namespace {

// Low-frequency per-class template: coarse random grid, bilinearly upsampled,
// mapped into [0.2, 0.8] so attacks and transforms have room inside the box.
Tensor blob_template(int channels, int h, int w, uint64_t seed) {
  Rng rng(seed);
  const int gh = 3, gw = 3;
  std::vector<double> grid(static_cast<size_t>(channels) * gh * gw);
  for (double& v : grid) v = rng.uniform();
  Tensor t({channels, h, w});
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const double fy = h > 1 ? static_cast<double>(i) / (h - 1) * (gh - 1) : 0.0;
        const double fx = w > 1 ? static_cast<double>(j) / (w - 1) * (gw - 1) : 0.0;
        const int y0 = std::min(static_cast<int>(fy), gh - 2);
        const int x0 = std::min(static_cast<int>(fx), gw - 2);
        const double dy = fy - y0, dx = fx - x0;
        auto at = [&](int gy, int gx) {
          return grid[static_cast<size_t>((c * gh + gy) * gw + gx)];
        };
        const double v = at(y0, x0) * (1 - dy) * (1 - dx) +
                         at(y0 + 1, x0) * dy * (1 - dx) +
                         at(y0, x0 + 1) * (1 - dy) * dx +
                         at(y0 + 1, x0 + 1) * dy * dx;
        t.data[static_cast<size_t>((c * h + i) * w + j)] = 0.2 + 0.6 * v;
      }
    }
  }
  return t;
}

// Concentric ring pattern; the class sets the ring radius per channel.
Tensor ring_template(int channels, int h, int w, int cls, int num_classes) {
  Tensor t({channels, h, w});
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double max_r = std::sqrt(cy * cy + cx * cx);
  for (int c = 0; c < channels; ++c) {
    const double r0 = max_r * (0.25 + 0.6 * (cls + 0.5 * c / std::max(1, channels)) /
                                          std::max(1, num_classes));
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const double d = std::sqrt((i - cy) * (i - cy) + (j - cx) * (j - cx));
        const double v = std::exp(-(d - r0) * (d - r0) / (0.35 * max_r));
        t.data[static_cast<size_t>((c * h + i) * w + j)] = 0.2 + 0.6 * v;
      }
    }
  }
  return t;
}

}  // namespace

Dataset make_synthetic(SyntheticKind kind, int n, int num_classes, double noise,
                       uint64_t seed, int channels, int height, int width) {
  if (num_classes < 2) throw ConfigError("make_synthetic: need >= 2 classes");
  if (n < num_classes) throw ConfigError("make_synthetic: n must be >= K");
  Dataset ds;
  ds.name = kind == SyntheticKind::Blobs ? "synthetic-blobs" : "synthetic-rings";
  ds.num_classes = num_classes;
  std::vector<Tensor> templates;
  templates.reserve(static_cast<size_t>(num_classes));
  for (int k = 0; k < num_classes; ++k) {
    templates.push_back(kind == SyntheticKind::Blobs
                            ? blob_template(channels, height, width,
                                            Rng::split(seed, 1000 + static_cast<uint64_t>(k)))
                            : ring_template(channels, height, width, k, num_classes));
  }
  ds.images.reserve(static_cast<size_t>(n));
  ds.labels.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int cls = i % num_classes;
    Rng rng(Rng::split(seed, 50000 + static_cast<uint64_t>(i)));
    Tensor img = templates[static_cast<size_t>(cls)];
    if (noise > 0.0) {
      for (double& v : img.data) {
        v = std::clamp(v + noise * rng.normal(), 0.0, 1.0);
      }
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(cls);
  }
  return ds;
}

SyntheticSplits make_synthetic_splits(SyntheticKind kind, int n_train, int n_val,
                                      int n_test, int num_classes, double noise,
                                      uint64_t seed, int channels, int height,
                                      int width) {
  // One logical noise stream indexed by example number; the splits take
  // disjoint index ranges, so they are disjoint while sharing the same
  // per-class templates.
  SyntheticSplits s;
  s.train = make_synthetic(kind, n_train, num_classes, noise, seed, channels,
                           height, width);
  s.train.split = Split::Train;
  Dataset val = make_synthetic(kind, n_train + n_val, num_classes, noise, seed,
                               channels, height, width);
  Dataset test = make_synthetic(kind, n_train + n_val + n_test, num_classes,
                                noise, seed, channels, height, width);
  s.validation.name = val.name;
  s.validation.split = Split::Validation;
  s.validation.num_classes = num_classes;
  for (int i = n_train; i < n_train + n_val; ++i) {
    s.validation.images.push_back(std::move(val.images[static_cast<size_t>(i)]));
    s.validation.labels.push_back(val.labels[static_cast<size_t>(i)]);
  }
  s.test.name = test.name;
  s.test.split = Split::Test;
  s.test.num_classes = num_classes;
  for (int i = n_train + n_val; i < n_train + n_val + n_test; ++i) {
    s.test.images.push_back(std::move(test.images[static_cast<size_t>(i)]));
    s.test.labels.push_back(test.labels[static_cast<size_t>(i)]);
  }
  return s;
}

Dataset ingest_cifar10(const std::string& path, int max_count, bool class_balanced,
                       Split split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cifar10: cannot open " + path);
  in.seekg(0, std::ios::end);
  const int64_t size = static_cast<int64_t>(in.tellg());
  in.seekg(0);
  constexpr int64_t kRecord = 3073;
  if (size == 0 || size % kRecord != 0) {
    throw DataError("cifar10: bad file length " + std::to_string(size) +
                    " (not a multiple of 3073; trailing bytes at offset " +
                    std::to_string(size - size % kRecord) + ")");
  }
  const int64_t records = size / kRecord;
  Dataset ds;
  ds.name = "cifar10-subset";
  ds.split = split;
  ds.num_classes = 10;
  std::vector<int> per_class(10, 0);
  const int per_class_cap =
      class_balanced && max_count > 0 ? std::max(1, max_count / 10) : 0;
  std::vector<unsigned char> rec(kRecord);
  for (int64_t r = 0; r < records; ++r) {
    in.read(reinterpret_cast<char*>(rec.data()), kRecord);
    if (!in) {
      throw DataError("cifar10: short read at offset " + std::to_string(r * kRecord));
    }
    const int label = rec[0];
    if (label > 9) {
      throw DataError("cifar10: bad label byte " + std::to_string(label) +
                      " at offset " + std::to_string(r * kRecord));
    }
    if (per_class_cap > 0 && per_class[static_cast<size_t>(label)] >= per_class_cap) {
      continue;
    }
    Tensor img({3, 32, 32});
    for (int i = 0; i < 3072; ++i) {
      img.data[static_cast<size_t>(i)] = static_cast<double>(rec[static_cast<size_t>(1 + i)]) / 255.0;
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
    ++per_class[static_cast<size_t>(label)];
    if (max_count > 0 && static_cast<int>(ds.images.size()) >= max_count) break;
  }
  return ds;
}

}  // namespace kshield
