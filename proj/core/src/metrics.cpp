#include "ksanc/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace ksanc {

using nlohmann::json;

double top_k_error(const Tensor& logits, std::span<const int> labels, std::size_t k) {
  if (logits.rank() != 2) throw ShapeError("top_k_error: logits must be [B,C]");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (k < 1 || k >= c) {
    throw Error("top_k_error: k=" + std::to_string(k) + " outside [1," + std::to_string(c) + ")");
  }
  if (labels.size() != b) {
    throw ShapeError("top_k_error: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " rows");
  }
  if (b == 0) return 0.0;
  const auto values = logits.to_vector();
  std::size_t misses = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw Error("top_k_error: label " + std::to_string(y) + " out of range");
    }
    const double ly = values[i * c + static_cast<std::size_t>(y)];
    // Classes ranked ahead of y: larger logit, or equal logit and lower index.
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double lj = values[i * c + j];
      if (lj > ly || (lj == ly && j < static_cast<std::size_t>(y))) ++ahead;
    }
    if (ahead >= k) ++misses;
  }
  return static_cast<double>(misses) / static_cast<double>(b);
}

std::optional<double> RunMetrics::final_test_error() const {
  if (epochs.empty()) return std::nullopt;
  return epochs.back().test_error;
}

// Window ---------------------------------------------------------------------

EpochWindow EpochWindow::parse(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw ConfigError("window '" + std::string(text) + "' must look like a:b");
  }
  auto to_long = [&](std::string_view part) {
    long v = 0;
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (ec != std::errc() || ptr != part.data() + part.size()) {
      throw ConfigError("window '" + std::string(text) + "': '" + std::string(part) +
                        "' is not an integer");
    }
    return v;
  };
  EpochWindow w;
  const auto a = text.substr(0, colon), b = text.substr(colon + 1);
  if (!a.empty()) w.begin = to_long(a);
  if (!b.empty()) {
    w.end = to_long(b);
    if (*w.end < 0) throw ConfigError("window end must be >= 0");
  }
  return w;
}

std::string EpochWindow::to_string() const {
  return std::to_string(begin) + ":" + (end ? std::to_string(*end) : std::string());
}

StabilityReport stability(std::span<const RunMetrics> runs, const EpochWindow& window) {
  if (runs.size() < 2) {
    throw Error("stability needs at least 2 runs, got " + std::to_string(runs.size()));
  }
  std::size_t shortest = runs.front().epochs.size();
  for (const auto& r : runs) shortest = std::min(shortest, r.epochs.size());
  StabilityReport rep;
  const long begin = window.begin < 0 ? static_cast<long>(shortest) + window.begin : window.begin;
  const long end = window.end ? *window.end : static_cast<long>(shortest);
  if (begin < 0 || begin >= end) {
    throw Error("stability window " + window.to_string() + " is empty or negative");
  }
  for (const auto& r : runs) {
    if (static_cast<std::size_t>(end) > r.epochs.size()) {
      throw Error("stability window " + window.to_string() + " exceeds run '" + r.run_id +
                  "' with " + std::to_string(r.epochs.size()) + " epochs");
    }
  }
  rep.begin = static_cast<std::size_t>(begin);
  rep.end = static_cast<std::size_t>(end);
  for (std::size_t e = rep.begin; e < rep.end; ++e) {
    double lo = runs.front().epochs[e].test_error, hi = lo;
    for (const auto& r : runs) {
      lo = std::min(lo, r.epochs[e].test_error);
      hi = std::max(hi, r.epochs[e].test_error);
    }
    rep.range.push_back(hi - lo);
  }
  const double n = static_cast<double>(rep.range.size());
  const double mean = std::accumulate(rep.range.begin(), rep.range.end(), 0.0) / n;
  double var = 0;
  for (double v : rep.range) var += (v - mean) * (v - mean);
  rep.S = var / n;
  return rep;
}

// Formatting -----------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw Error("format_double failed");
  return std::string(buf, ptr);
}

double parse_double(std::string_view text) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error("'" + std::string(text) + "' is not a number");
  }
  return v;
}

double median(std::vector<double> values) {
  if (values.empty()) throw Error("median of empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// Export / import ----------------------------------------------------------------

namespace {

const char* const kCurveHeader = "epoch,test_error,train_error,lr,L_b,L_adv,L_is,L_sup,total";
const char* const kStepsHeader =
    "step,epoch,role,lr,L_b,L_adv_o,L_reg,L_adv_C,L_adv,L_is,L_sup,total";

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw Error("write failed for " + path.string());
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <typename Row>
std::vector<Row> read_csv(const std::filesystem::path& path, const char* header,
                          Row (*parse_row)(const std::vector<std::string>&)) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header) {
    throw DataError(path.string() + ":1: expected header '" + header + "'");
  }
  const std::size_t columns = split_csv(header).size();
  std::vector<Row> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    try {
      if (cells.size() != columns) {
        throw DataError("expected " + std::to_string(columns) + " fields, got " +
                        std::to_string(cells.size()));
      }
      rows.push_back(parse_row(cells));
    } catch (const Error& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

std::size_t parse_index(const std::string& s) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError("'" + s + "' is not a non-negative integer");
  }
  return v;
}

EpochMetrics parse_curve_row(const std::vector<std::string>& c) {
  EpochMetrics e;
  e.epoch = parse_index(c[0]);
  e.test_error = parse_double(c[1]);
  e.train_error = parse_double(c[2]);
  e.lr = parse_double(c[3]);
  e.L_b = parse_double(c[4]);
  e.L_adv = parse_double(c[5]);
  e.L_is = parse_double(c[6]);
  e.L_sup = parse_double(c[7]);
  e.total = parse_double(c[8]);
  return e;
}

StepMetrics parse_step_row(const std::vector<std::string>& c) {
  StepMetrics s;
  s.step = parse_index(c[0]);
  s.epoch = parse_index(c[1]);
  s.losses.role = parse_step_role(c[2]);
  s.lr = parse_double(c[3]);
  auto& l = s.losses;
  l.L_b = parse_double(c[4]);
  l.L_adv_o = parse_double(c[5]);
  l.L_reg = parse_double(c[6]);
  l.L_adv_C = parse_double(c[7]);
  l.L_adv = parse_double(c[8]);
  l.L_is = parse_double(c[9]);
  l.L_sup = parse_double(c[10]);
  l.total = parse_double(c[11]);
  return s;
}

}  // namespace

void export_run(const RunMetrics& run, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());

  const auto curve_path = dir / "curve.csv";
  auto curve = open_out(curve_path);
  curve << kCurveHeader << '\n';
  for (const auto& e : run.epochs) {
    curve << e.epoch << ',' << format_double(e.test_error) << ',' << format_double(e.train_error)
          << ',' << format_double(e.lr) << ',' << format_double(e.L_b) << ','
          << format_double(e.L_adv) << ',' << format_double(e.L_is) << ','
          << format_double(e.L_sup) << ',' << format_double(e.total) << '\n';
  }
  finish(curve, curve_path);

  const auto steps_path = dir / "steps.csv";
  auto steps = open_out(steps_path);
  steps << kStepsHeader << '\n';
  for (const auto& s : run.steps) {
    const auto& l = s.losses;
    steps << s.step << ',' << s.epoch << ',' << to_string(l.role) << ',' << format_double(s.lr)
          << ',' << format_double(l.L_b) << ',' << format_double(l.L_adv_o) << ','
          << format_double(l.L_reg) << ',' << format_double(l.L_adv_C) << ','
          << format_double(l.L_adv) << ',' << format_double(l.L_is) << ','
          << format_double(l.L_sup) << ',' << format_double(l.total) << '\n';
  }
  finish(steps, steps_path);

  json summary = {{"run_id", run.run_id},
                  {"seed", run.seed},
                  {"variant", run.variant},
                  {"config_hash", run.config_hash},
                  {"epochs", run.epochs.size()},
                  {"steps", run.steps.size()}};
  if (auto err = run.final_test_error()) {
    summary["final_test_error"] = format_double(*err);
  }
  const auto summary_path = dir / "summary.json";
  auto out = open_out(summary_path);
  out << summary.dump(2) << '\n';
  finish(out, summary_path);
}

RunMetrics import_run(const std::filesystem::path& dir) {
  const auto summary_path = dir / "summary.json";
  std::ifstream in(summary_path);
  if (!in) throw DataError("cannot open " + summary_path.string());
  RunMetrics run;
  try {
    const json j = json::parse(in);
    run.run_id = j.at("run_id").get<std::string>();
    run.seed = j.at("seed").get<std::uint64_t>();
    run.variant = j.at("variant").get<std::string>();
    run.config_hash = j.at("config_hash").get<std::string>();
    const auto epochs = j.at("epochs").get<std::size_t>();
    run.epochs = read_csv<EpochMetrics>(dir / "curve.csv", kCurveHeader, parse_curve_row);
    if (run.epochs.size() != epochs) {
      throw DataError("curve.csv has " + std::to_string(run.epochs.size()) + " rows, summary says " +
                      std::to_string(epochs));
    }
  } catch (const json::exception& e) {
    throw DataError(summary_path.string() + ": " + e.what());
  }
  for (std::size_t i = 0; i < run.epochs.size(); ++i) {
    if (run.epochs[i].epoch != i) {
      throw DataError((dir / "curve.csv").string() + ":" + std::to_string(i + 2) + ": epoch " +
                      std::to_string(run.epochs[i].epoch) + " out of sequence");
    }
  }
  run.steps = read_csv<StepMetrics>(dir / "steps.csv", kStepsHeader, parse_step_row);
  return run;
}

std::vector<RunMetrics> import_runs(const std::filesystem::path& runs_dir) {
  if (!std::filesystem::is_directory(runs_dir)) {
    throw DataError(runs_dir.string() + " is not a directory");
  }
  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(runs_dir)) {
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "summary.json")) {
      dirs.push_back(entry.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<RunMetrics> runs;
  for (const auto& d : dirs) runs.push_back(import_run(d));
  return runs;
}

std::vector<VariantSummary> summarize(std::span<const RunMetrics> runs,
                                      const EpochWindow& window) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<RunMetrics>> groups;
  for (const auto& r : runs) {
    if (!groups.count(r.variant)) order.push_back(r.variant);
    groups[r.variant].push_back(r);
  }
  std::vector<VariantSummary> out;
  for (const auto& name : order) {
    const auto& group = groups[name];
    VariantSummary v;
    v.variant = name;
    v.runs = group.size();
    std::vector<double> finals;
    for (const auto& r : group) {
      auto err = r.final_test_error();
      if (!err) throw Error("run '" + r.run_id + "' has no completed epochs");
      finals.push_back(*err);
    }
    v.mean_error = std::accumulate(finals.begin(), finals.end(), 0.0) / finals.size();
    v.median_error = median(finals);
    v.min_error = *std::min_element(finals.begin(), finals.end());
    v.max_error = *std::max_element(finals.begin(), finals.end());
    if (group.size() >= 2) v.stability = stability(group, window);
    out.push_back(std::move(v));
  }
  return out;
}

void write_report_csv(std::span<const VariantSummary> rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "variant,runs,mean_error,median_error,min_error,max_error,window_begin,window_end,S\n";
  for (const auto& v : rows) {
    out << v.variant << ',' << v.runs << ',' << format_double(v.mean_error) << ','
        << format_double(v.median_error) << ',' << format_double(v.min_error) << ','
        << format_double(v.max_error) << ',';
    if (v.stability) {
      out << v.stability->begin << ',' << v.stability->end << ',' << format_double(v.stability->S);
    } else {
      out << ",,";
    }
    out << '\n';
  }
  finish(out, path);
}

}  // namespace ksanc
