#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kshield/tensor.hpp"

namespace kshield {

enum class Split { Train, Validation, Test };

std::string split_name(Split s);

// Labeled image set. Images are [C,H,W] tensors with values in [0,1].
struct Dataset {
  std::string name;  // cifar10-subset | synthetic-blobs | synthetic-rings
  Split split = Split::Train;
  int num_classes = 0;
  std::vector<Tensor> images;
  std::vector<int> labels;

  size_t size() const { return images.size(); }
  void check_invariants() const;
  // [B,C,H,W] batch from the given indices.
  Tensor batch(const std::vector<int>& indices) const;
};

enum class SyntheticKind { Blobs, Rings };

// Class-balanced synthetic images built from per-class templates plus
// Gaussian pixel noise, clamped to [0,1]. Disjoint seeds give disjoint sets.
Dataset make_synthetic(SyntheticKind kind, int n, int num_classes, double noise,
                       uint64_t seed, int channels = 3, int height = 8,
                       int width = 8);

struct SyntheticSplits {
  Dataset train;
  Dataset validation;
  Dataset test;
};

SyntheticSplits make_synthetic_splits(SyntheticKind kind, int n_train, int n_val,
                                      int n_test, int num_classes, double noise,
                                      uint64_t seed, int channels = 3,
                                      int height = 8, int width = 8);

// CIFAR-10 binary batch ingestion: 3073-byte records, one label byte then
// 3072 channel-major pixel bytes scaled to [0,1]. `max_count` 0 means all;
// `class_balanced` keeps an equal number per class.
Dataset ingest_cifar10(const std::string& path, int max_count = 0,
                       bool class_balanced = false, Split split = Split::Train);

}  // namespace kshield
