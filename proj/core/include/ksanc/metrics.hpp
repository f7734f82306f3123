#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ksanc/losses.hpp"
#include "ksanc/tensor.hpp"

namespace ksanc {

/// Fraction of rows whose label is not among the k largest logits. Ties are
/// ranked by lower class index first, so a tied label counts as a hit only
/// when its index is low enough to land inside the top k.
double top_k_error(const Tensor& logits, std::span<const int> labels, std::size_t k);

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  LossRecord losses;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double test_error = 0;
  double train_error = 0;
  double lr = 0;
  /// Means over the epoch's student-side steps (student, supervised or
  /// teacher role).
  double L_b = 0, L_adv = 0, L_is = 0, L_sup = 0, total = 0;
};

struct RunMetrics {
  std::string run_id;
  std::uint64_t seed = 0;
  /// Loss mask of a student run ("b+adv+is", "sup", ...) or "teacher".
  std::string variant;
  std::string config_hash;
  std::vector<EpochMetrics> epochs;
  std::vector<StepMetrics> steps;

  std::optional<double> final_test_error() const;
};

/// Spans epochs [begin, end), 0-based. A negative begin counts from the
/// end of the shortest run; an absent end means the end of that run.
struct EpochWindow {
  long begin = 0;
  std::optional<long> end;

  /// Parses "a:b", "a:", ":b", ":" or "-k:".
  static EpochWindow parse(std::string_view text);
  std::string to_string() const;
};

struct StabilityReport {
  /// Resolved window.
  std::size_t begin = 0, end = 0;
  /// max - min of test error across runs, one entry per epoch of the window.
  std::vector<double> range;
  /// Population variance of `range`.
  double S = 0;
};

StabilityReport stability(std::span<const RunMetrics> runs, const EpochWindow& window);

/// Writes curve.csv, steps.csv and summary.json into `dir` (created if
/// needed). Doubles are written in shortest round-trip form.
void export_run(const RunMetrics& run, const std::filesystem::path& dir);
/// Reads what export_run wrote. Errors name the offending file and line.
RunMetrics import_run(const std::filesystem::path& dir);

/// Loads every subdirectory of `runs_dir` holding a summary.json, sorted by
/// directory name.
std::vector<RunMetrics> import_runs(const std::filesystem::path& runs_dir);

struct VariantSummary {
  std::string variant;
  std::size_t runs = 0;
  double mean_error = 0;
  double median_error = 0;
  double min_error = 0;
  double max_error = 0;
  /// Present when the variant has at least two runs.
  std::optional<StabilityReport> stability;
};

/// Groups runs by variant in first-seen order.
std::vector<VariantSummary> summarize(std::span<const RunMetrics> runs, const EpochWindow& window);

void write_report_csv(std::span<const VariantSummary> rows, const std::filesystem::path& path);

double median(std::vector<double> values);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view text);

}  // namespace ksanc
