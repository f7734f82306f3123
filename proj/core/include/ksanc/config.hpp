#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ksanc/data.hpp"
#include "ksanc/losses.hpp"
#include "ksanc/nets.hpp"
#include "ksanc/optim.hpp"

namespace ksanc {

/// Everything a run needs, in file form one `key = value` per line. Lines
/// starting with '#' and blank lines are ignored. Lists are comma separated.
/// Every key except `dataset` and `output` has a default.
struct RunConfig {
  // Data.
  std::string dataset;                 // "synthetic" or a path to the training file
  std::string dataset_format = "cifar";  // cifar | idx
  std::string dataset_labels;          // idx label file of the training split
  std::string test_dataset;            // test file; required for file datasets
  std::string test_labels;             // idx label file of the test split
  std::size_t num_classes = 4;
  std::size_t image_channels = 3;
  std::size_t image_height = 16;
  std::size_t image_width = 16;
  std::size_t synth_train_samples = 2000;
  std::size_t synth_test_samples = 1000;
  double synth_noise = 0.1;
  double synth_jitter = 0.5;
  std::uint64_t data_seed = 1234;
  bool augment = true;
  std::size_t augment_pad = 4;
  double hflip_prob = 0.5;

  // Networks.
  std::vector<std::size_t> teacher_channels{8, 16, 32};
  std::vector<std::size_t> teacher_units{3, 3, 3};
  std::vector<std::size_t> student_channels{8, 16, 32};
  std::vector<std::size_t> student_units{1, 1, 1};
  DType dtype = DType::f32;

  // Optimization.
  std::size_t epochs = 30;
  std::size_t teacher_epochs = 30;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_student = 0.1;
  double lr_discriminator = 1e-3;
  double lr_teacher = 0.1;
  /// Empty means 40% and 80% of the stage's epoch count.
  std::vector<std::size_t> lr_milestones;
  std::vector<std::size_t> teacher_lr_milestones;
  double lr_decay = 0.1;
  LossWeights weights;
  /// Student steps : discriminator steps per batch.
  std::size_t student_steps = 1;
  std::size_t discriminator_steps = 1;
  LossMask loss_mask;

  // Runs.
  std::uint64_t seed = 0;
  std::size_t runs = 5;
  std::string output;

  /// Parses file text. `source` names the file in diagnostics
  /// ("source:line: ..."). Unknown or repeated keys are errors.
  static RunConfig parse(std::string_view text, std::string_view source = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  /// Every key with its effective value, in a fixed order; parse() of the
  /// result reproduces this config.
  std::string to_text() const;

  /// Hash over every key that affects training results (all keys except
  /// output and runs).
  std::string hash() const;
  /// Hash over the keys that define the data and teacher architecture;
  /// a teacher checkpoint is usable by any config with the same value.
  std::string teacher_hash() const;

  BackboneSpec teacher_spec() const;
  BackboneSpec student_spec() const;
  std::vector<std::size_t> teacher_milestones() const;
  std::vector<std::size_t> student_milestones() const;
  AugmentPolicy augment_policy() const;
  SgdOptions sgd() const { return {momentum, weight_decay}; }
};

/// Loads the configured train and test splits; the test split gets the
/// training statistics.
TrainTestPair load_data(const RunConfig& config);

}  // namespace ksanc
