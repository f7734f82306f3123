#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "ksanc/attention.hpp"
#include "ksanc/config.hpp"
#include "ksanc/losses.hpp"
#include "ksanc/metrics.hpp"
#include "ksanc/nets.hpp"
#include "ksanc/optim.hpp"

namespace ksanc {

/// A backbone with its attention subnet.
struct Network {
  std::unique_ptr<Backbone> backbone;
  std::unique_ptr<AttentionSubnet> attention;

  /// Names are prefixed "backbone." and "attention.".
  std::vector<Parameter> parameters() const;
  std::vector<Parameter> state() const;
  std::size_t parameter_count() const;
  void set_trainable(bool trainable);
  void zero_grad();
};

/// Teacher estimators emit descriptors at the student's block widths.
Network build_teacher(const RunConfig& config, std::uint64_t seed);
Network build_student(const RunConfig& config, std::uint64_t seed);

/// Independent stream seed for one purpose ("teacher", "student", ...).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose);

/// Batch after augmentation and normalization, in the run's dtype.
Tensor prepare_images(const Tensor& raw, const NormalizationStats& stats,
                      const AugmentPolicy* augment, std::mt19937_64* rng, DType dtype);

/// Top-1 error of `net` on `data` in evaluation mode.
double evaluate_error(Network& net, const Dataset& data, DType dtype,
                      std::size_t chunk = 250);

/// Called after each backward pass and before the matching parameter
/// update.
using StepObserver = std::function<void(const LossBundle& bundle)>;

/// Shared epoch bookkeeping of both training stages.
class TrainerBase {
 public:
  virtual ~TrainerBase() = default;

  /// Trains one epoch, evaluates on the test split and appends metrics.
  virtual void run_epoch() = 0;
  /// Runs epochs until the configured count is reached.
  void train();
  bool finished() const { return epoch_ >= total_epochs(); }
  virtual std::size_t total_epochs() const = 0;

  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return step_; }
  const RunMetrics& metrics() const { return metrics_; }
  const RunConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  void set_step_observer(StepObserver observer) { observer_ = std::move(observer); }

  /// Full training state for bitwise resume.
  void save_state(const std::filesystem::path& path) const;
  /// Restores a state written by save_state for the same config and seed.
  void load_state(const std::filesystem::path& path);

 protected:
  TrainerBase(RunConfig config, const TrainTestPair& data, std::uint64_t seed, std::string kind);

  virtual std::vector<Parameter> state_entries() const = 0;
  void log_step(const LossBundle& bundle, double lr);
  void finish_epoch(double test_error, double train_error, double lr);
  std::vector<std::vector<std::size_t>> epoch_batches() const;

  RunConfig config_;
  const TrainTestPair& data_;
  std::uint64_t seed_;
  std::string kind_;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
  std::mt19937_64 augment_rng_;
  RunMetrics metrics_;
  StepObserver observer_;
  std::size_t epoch_first_step_ = 0;
};

/// Stage 1: supervised teacher training with cross-entropy on the backbone
/// logits plus cross-entropy of an auxiliary head on the squeezed
/// descriptors.
class TeacherTrainer : public TrainerBase {
 public:
  TeacherTrainer(const RunConfig& config, const TrainTestPair& data, std::uint64_t seed);

  void run_epoch() override;
  std::size_t total_epochs() const override { return config_.teacher_epochs; }

  Network& teacher() { return teacher_; }
  AuxHead& aux_head() { return *aux_; }
  /// Auxiliary-head top-1 error on the test split.
  double aux_error();

  /// Writes the teacher without its auxiliary head.
  void export_teacher(const std::filesystem::path& path) const;

 protected:
  std::vector<Parameter> state_entries() const override;

 private:
  Network teacher_;
  std::unique_ptr<AuxHead> aux_;
  std::unique_ptr<Sgd> optimizer_;
  MilestoneSchedule schedule_;
};

/// Rebuilds a teacher from export_teacher output. Throws ConfigError if the
/// checkpoint was made under a different data or architecture setup.
Network load_teacher(const std::filesystem::path& path, const RunConfig& config);

/// Stage 2: per batch, discriminator step(s) then student step(s), with the
/// teacher frozen in evaluation mode. The supervised baseline mask trains
/// the student on labels only.
class StudentTrainer : public TrainerBase {
 public:
  /// `teacher` may be null only for the supervised baseline.
  StudentTrainer(const RunConfig& config, const TrainTestPair& data, Network* teacher,
                 std::uint64_t seed);

  void run_epoch() override;
  std::size_t total_epochs() const override { return config_.epochs; }

  Network& student() { return student_; }
  Discriminator& discriminator() { return *disc_; }
  const LossMask& mask() const { return config_.loss_mask; }

  void save_student(const std::filesystem::path& path) const;

 protected:
  std::vector<Parameter> state_entries() const override;

 private:
  void train_batch(const Batch& batch, double lr_student, double lr_disc, std::size_t& mistakes);

  Network* teacher_;
  Network student_;
  std::unique_ptr<Discriminator> disc_;
  std::unique_ptr<Sgd> student_opt_;
  std::unique_ptr<Sgd> disc_opt_;
  MilestoneSchedule student_schedule_;
  MilestoneSchedule disc_schedule_;
};

struct AblationRow {
  LossMask mask;
  std::vector<double> errors;  // final test error per run
  double mean = 0;
  double median = 0;
};

struct AblationResult {
  std::vector<double> teacher_errors;
  std::vector<AblationRow> rows;
};

/// The five variants compared by default: supervised student, b, b+is,
/// b+adv, b+adv+is.
std::vector<LossMask> default_variants();

/// For run r (seed = config.seed + r) trains one teacher, then every variant
/// from the same student initialization. When `out_dir` is non-empty,
/// writes teachers/seed<s>/ and runs/<variant>-seed<s>/ under it.
AblationResult run_ablation(const RunConfig& config, const std::vector<LossMask>& variants,
                            std::size_t runs, const std::filesystem::path& out_dir = {},
                            const std::function<void(const std::string&)>& progress = {});

}  // namespace ksanc
