#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ksanc/tensor.hpp"

namespace ksanc {

enum class Split { train, test };
std::string_view to_string(Split split);

/// Per-channel statistics of a training split.
struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> std;
};

struct Dataset {
  /// [M,c,H,W] single precision, values in [0,1].
  Tensor images;
  std::vector<int> labels;
  Split split = Split::train;
  std::size_t num_classes = 0;
  NormalizationStats stats;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  /// Images of class k, counted.
  std::vector<std::size_t> class_counts() const;
};

/// Mean and population standard deviation per channel. A channel with zero
/// spread gets std 1 so normalization stays finite.
NormalizationStats compute_stats(const Tensor& images);

/// (x - mean[c]) / std[c], in the dtype of `images`.
Tensor normalize(const Tensor& images, const NormalizationStats& stats);

struct RecordLayout {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 10;
};

/// Fixed-size records of one label byte followed by channels*height*width
/// pixel bytes, channel-major then row-major. Pixels are scaled by 1/255.
/// Stats are computed from the loaded images; callers loading a test split
/// overwrite them with the training stats.
Dataset load_cifar_like(const std::filesystem::path& path, const RecordLayout& layout,
                        Split split);

/// Big-endian IDX pair: an unsigned-byte image file with 3 dims [M,H,W] or
/// 4 dims [M,c,H,W], and a 1-dim label file [M].
Dataset load_idx_like(const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path, std::size_t num_classes,
                      Split split);

/// Writes records readable by load_cifar_like; pixels are rounded to bytes.
void save_cifar_like(const std::filesystem::path& path, const Dataset& data);

struct TrainTestPair {
  Dataset train;
  Dataset test;
};

/// Gives the test split the training split's stats.
void share_stats(TrainTestPair& pair);

struct SynthSpec {
  std::size_t classes = 4;
  std::size_t samples = 100;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  /// Standard deviation of additive pixel noise.
  double noise = 0.1;
  /// In [0,1]; scales the per-image randomness of pattern phase, centre
  /// offset and colour. Zero gives one fixed image per class before noise.
  double jitter = 0.5;
  std::uint64_t seed = 0;
};

/// Class-conditional textures: horizontal gratings, vertical gratings,
/// plaid, and rings, each family repeated at higher frequency for classes
/// beyond the first four. Every family maps to itself under horizontal
/// flips. Classes are balanced (label = index mod classes, then shuffled).
Dataset synth_dataset(const SynthSpec& spec, Split split);

/// Train and test splits from one spec; the test split uses a derived seed
/// and `test_samples` images.
TrainTestPair synth_train_test(const SynthSpec& spec, std::size_t test_samples);

struct AugmentPolicy {
  std::size_t pad = 4;
  /// Crop size; zero means the input size.
  std::size_t crop_h = 0;
  std::size_t crop_w = 0;
  double hflip_prob = 0.5;
  bool enabled = true;
};

/// Reflect-pads by `pad`, crops a uniformly placed window, and mirrors it
/// horizontally with probability hflip_prob, independently per image.
Tensor augment(const Tensor& batch, const AugmentPolicy& policy, std::mt19937_64& rng);

/// Mirrors every image left-right.
Tensor hflip(const Tensor& batch);

/// Permutation of [0,n) for one epoch, a pure function of (seed, epoch).
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch);

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

/// Copies the selected images and labels.
Batch gather(const Dataset& data, std::span<const std::size_t> indices);

/// Index ranges of consecutive batches; the last batch may be short.
std::vector<std::span<const std::size_t>> split_batches(std::span<const std::size_t> order,
                                                        std::size_t batch_size);

}  // namespace ksanc
