#include "ksanc/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>

#include "ksanc/trainer.hpp"

namespace ksanc::cli {
namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> runs;
  std::vector<std::string> loss_masks;
  std::string teacher;
  std::string output;
  std::string window = ":";
  std::string runs_dir;
  bool force = false;
  bool resume = false;
};

RunConfig effective_config(const Options& o) {
  RunConfig c = RunConfig::load(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.runs) c.runs = *o.runs;
  if (!o.output.empty()) c.output = o.output;
  if (o.loss_masks.size() == 1) c.loss_mask = LossMask::parse(o.loss_masks.front());
  c.validate();
  return c;
}

bool non_empty_dir(const fs::path& dir) {
  return fs::is_directory(dir) && fs::directory_iterator(dir) != fs::directory_iterator();
}

void claim_output(const fs::path& dir, const Options& o) {
  if (fs::exists(dir) && !fs::is_directory(dir))
    throw ConfigError("output: " + dir.string() + " exists and is not a directory");
  if (non_empty_dir(dir) && !o.force && !o.resume)
    throw ConfigError("output: " + dir.string() + " is not empty (pass --force to overwrite)");
  fs::create_directories(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw Error("cannot write " + path.string());
}

// Saves state after every epoch so a divergence leaves the last good one.
void train_with_state(TrainerBase& t, const fs::path& dir, const Options& o, std::ostream& out) {
  const auto state = dir / "state.ckpt";
  if (o.resume && fs::exists(state)) {
    t.load_state(state);
    out << "resumed at epoch " << t.epoch() << "\n";
  }
  while (!t.finished()) {
    try {
      t.run_epoch();
    } catch (const DivergenceError&) {
      export_run(t.metrics(), dir);
      throw;
    }
    t.save_state(state);
    const auto& e = t.metrics().epochs.back();
    out << "epoch " << e.epoch + 1 << "/" << t.total_epochs() << " test_error "
        << format_double(e.test_error) << " train_error " << format_double(e.train_error)
        << " lr " << format_double(e.lr) << "\n"
        << std::flush;
  }
  export_run(t.metrics(), dir);
}

void print_summary(std::span<const VariantSummary> rows, std::ostream& out) {
  out << std::left << std::setw(12) << "variant" << std::setw(6) << "runs" << std::setw(14)
      << "mean_error" << std::setw(14) << "median_error" << std::setw(10) << "window"
      << "S\n";
  for (const auto& r : rows) {
    std::string window = "-", s = "-";
    if (r.stability) {
      window = std::to_string(r.stability->begin) + ":" + std::to_string(r.stability->end);
      s = format_double(r.stability->S);
    }
    out << std::left << std::setw(12) << r.variant << std::setw(6) << r.runs << std::setw(14)
        << format_double(r.mean_error) << std::setw(14) << format_double(r.median_error)
        << std::setw(10) << window << s << "\n";
  }
}

int train_teacher(const Options& o, std::ostream& out) {
  const RunConfig c = effective_config(o);
  const fs::path dir = c.output;
  claim_output(dir, o);
  write_text(dir / "config.cfg", c.to_text());
  const auto data = load_data(c);
  TeacherTrainer t(c, data, c.seed);
  train_with_state(t, dir, o, out);
  t.export_teacher(dir / "teacher.ckpt");
  out << "teacher test error " << format_double(t.metrics().final_test_error().value_or(1.0))
      << " aux error " << format_double(t.aux_error()) << "\n"
      << "wrote " << (dir / "teacher.ckpt").string() << "\n";
  return kOk;
}

int distill(const Options& o, std::ostream& out) {
  if (o.loss_masks.size() > 1) throw ConfigError("--loss-mask: distill takes one mask");
  const RunConfig c = effective_config(o);
  const bool needs_teacher = !c.loss_mask.supervised;
  std::optional<Network> teacher;
  if (needs_teacher) {
    if (o.teacher.empty()) throw ConfigError("--teacher: required unless --loss-mask sup");
    if (!fs::is_regular_file(o.teacher)) throw ConfigError("--teacher: no such file " + o.teacher);
    teacher = load_teacher(o.teacher, c);
  }
  const fs::path dir = c.output;
  claim_output(dir, o);
  write_text(dir / "config.cfg", c.to_text());
  const auto data = load_data(c);
  StudentTrainer st(c, data, teacher ? &*teacher : nullptr, c.seed);
  train_with_state(st, dir, o, out);
  st.save_student(dir / "student.ckpt");
  out << st.metrics().run_id << " test error "
      << format_double(st.metrics().final_test_error().value_or(1.0)) << "\n"
      << "wrote " << (dir / "student.ckpt").string() << "\n";
  return kOk;
}

int report(const Options& o, std::ostream& out) {
  fs::path root = o.runs_dir;
  // An ablation directory keeps its runs one level down.
  if (fs::is_directory(root / "runs") && !fs::exists(root / "summary.json")) root /= "runs";
  const auto window = EpochWindow::parse(o.window);
  const auto runs = import_runs(root);
  if (runs.size() < 2)
    throw ConfigError("runs_dir: need at least 2 completed runs under " + root.string() + ", found " +
                      std::to_string(runs.size()));
  const auto rows = summarize(runs, window);
  const fs::path csv = o.output.empty() ? fs::path(o.runs_dir) / "report.csv" : fs::path(o.output);
  if (fs::exists(csv) && !o.force)
    throw ConfigError("output: " + csv.string() + " exists (pass --force to overwrite)");
  print_summary(rows, out);
  write_report_csv(rows, csv);
  out << "wrote " << csv.string() << "\n";
  return kOk;
}

int ablate(const Options& o, std::ostream& out) {
  Options single = o;
  single.loss_masks.clear();
  const RunConfig c = effective_config(single);
  std::vector<LossMask> variants;
  for (const auto& m : o.loss_masks) variants.push_back(LossMask::parse(m));
  if (variants.empty()) variants = default_variants();
  const auto window = EpochWindow::parse(o.window);
  const fs::path dir = c.output;
  claim_output(dir, o);
  write_text(dir / "config.cfg", c.to_text());
  const auto result = run_ablation(c, variants, c.runs, dir, [&](const std::string& line) {
    out << line << "\n" << std::flush;
  });
  const auto runs = import_runs(dir / "runs");
  const auto rows = summarize(runs, window);
  print_summary(rows, out);
  out << "teacher median error " << format_double(median(result.teacher_errors)) << "\n";
  write_report_csv(rows, dir / "report.csv");
  out << "wrote " << (dir / "report.csv").string() << "\n";
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarial distillation with attention-squeezed descriptors", "ksanc"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run config file (key = value lines)")->required();
    sub->add_option("--seed", o.seed, "Override the config seed");
    sub->add_option("--output", o.output, "Override the config output directory");
    sub->add_flag("--force", o.force, "Overwrite a non-empty output directory");
  };

  auto* teacher = app.add_subcommand("train-teacher", "Train a teacher from scratch");
  add_common(teacher);
  teacher->add_flag("--resume", o.resume, "Continue from output/state.ckpt");

  auto* dist = app.add_subcommand("distill", "Train a student against a frozen teacher");
  add_common(dist);
  dist->add_option("--teacher", o.teacher, "Teacher checkpoint from train-teacher");
  dist->add_option("--loss-mask", o.loss_masks, "Loss terms: sup, or a subset of b,adv,is")
      ->expected(1);
  dist->add_flag("--resume", o.resume, "Continue from output/state.ckpt");

  auto* rep = app.add_subcommand("report", "Summarize exported runs");
  rep->add_option("runs_dir", o.runs_dir, "Directory of run directories")->required();
  rep->add_option("--window", o.window, "Epoch window a:b for the stability measure");
  rep->add_option("--output", o.output, "Report CSV path (default runs_dir/report.csv)");
  rep->add_flag("--force", o.force, "Overwrite an existing report");

  auto* abl = app.add_subcommand("ablate", "Teacher plus every loss variant, over several seeds");
  add_common(abl);
  abl->add_option("--runs", o.runs, "Number of seeds");
  abl->add_option("--loss-mask", o.loss_masks, "Variant to include (repeatable)")->take_all();
  abl->add_option("--window", o.window, "Epoch window a:b for the stability measure");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*teacher) return train_teacher(o, out);
    if (*dist) return distill(o, out);
    if (*rep) return report(o, out);
    return ablate(o, out);
  } catch (const DivergenceError& e) {
    err << "error: training diverged (" << e.component() << "): " << e.what() << "\n";
    return kDiverged;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"ksanc"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace ksanc::cli
