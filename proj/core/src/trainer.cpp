#include "ksanc/trainer.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "ksanc/checkpoint.hpp"

namespace ksanc {

using nlohmann::json;

// Networks -------------------------------------------------------------------

std::vector<Parameter> Network::parameters() const {
  auto out = prefixed("backbone", backbone->parameters());
  auto att = prefixed("attention", attention->parameters());
  out.insert(out.end(), att.begin(), att.end());
  return out;
}

std::vector<Parameter> Network::state() const {
  auto out = prefixed("backbone", backbone->state());
  auto att = prefixed("attention", attention->state());
  out.insert(out.end(), att.begin(), att.end());
  return out;
}

std::size_t Network::parameter_count() const {
  return backbone->parameter_count() + attention->parameter_count();
}

void Network::set_trainable(bool trainable) {
  backbone->set_trainable(trainable);
  attention->set_trainable(trainable);
}

void Network::zero_grad() {
  backbone->zero_grad();
  attention->zero_grad();
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Network build_teacher(const RunConfig& config, std::uint64_t seed) {
  Network net;
  net.backbone = build_backbone(config.teacher_spec(), derive_seed(seed, "teacher"), config.dtype);
  net.attention = build_attention(*net.backbone, config.student_channels,
                                  derive_seed(seed, "teacher.attention"), config.dtype);
  return net;
}

Network build_student(const RunConfig& config, std::uint64_t seed) {
  Network net;
  net.backbone = build_backbone(config.student_spec(), derive_seed(seed, "student"), config.dtype);
  net.attention = build_attention(*net.backbone, config.student_channels,
                                  derive_seed(seed, "student.attention"), config.dtype);
  return net;
}

Tensor prepare_images(const Tensor& raw, const NormalizationStats& stats,
                      const AugmentPolicy* augment_policy, std::mt19937_64* rng, DType dtype) {
  Tensor x = raw;
  if (augment_policy && augment_policy->enabled) x = augment(x, *augment_policy, *rng);
  x = normalize(x, stats);
  return x.dtype() == dtype ? x : x.to(dtype);
}

double evaluate_error(Network& net, const Dataset& data, DType dtype, std::size_t chunk) {
  NoGradGuard no_grad;
  std::size_t mistakes = 0;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (auto part : split_batches(idx, chunk)) {
    const Batch b = gather(data, part);
    const Tensor x = prepare_images(b.images, data.stats, nullptr, nullptr, dtype);
    const auto bf = net.backbone->forward(x, Mode::eval);
    mistakes += static_cast<std::size_t>(
        std::lround(top_k_error(bf.logits, b.labels, 1) * static_cast<double>(part.size())));
  }
  return data.size() ? static_cast<double>(mistakes) / static_cast<double>(data.size()) : 0.0;
}

namespace {

std::size_t count_mistakes(const Tensor& logits, const std::vector<int>& labels) {
  return static_cast<std::size_t>(
      std::lround(top_k_error(logits, labels, 1) * static_cast<double>(labels.size())));
}

json to_json(const StepMetrics& s) {
  const auto& l = s.losses;
  return json{{"step", s.step},       {"epoch", s.epoch},   {"lr", s.lr},
              {"role", to_string(l.role)}, {"L_b", l.L_b}, {"L_adv_o", l.L_adv_o},
              {"L_reg", l.L_reg},     {"L_adv_C", l.L_adv_C}, {"L_adv", l.L_adv},
              {"L_is", l.L_is},       {"L_sup", l.L_sup},   {"total", l.total}};
}

StepMetrics step_from_json(const json& j) {
  StepMetrics s;
  s.step = j.at("step");
  s.epoch = j.at("epoch");
  s.lr = j.at("lr");
  auto& l = s.losses;
  l.role = parse_step_role(j.at("role").get<std::string>());
  l.L_b = j.at("L_b");
  l.L_adv_o = j.at("L_adv_o");
  l.L_reg = j.at("L_reg");
  l.L_adv_C = j.at("L_adv_C");
  l.L_adv = j.at("L_adv");
  l.L_is = j.at("L_is");
  l.L_sup = j.at("L_sup");
  l.total = j.at("total");
  return s;
}

json to_json(const EpochMetrics& e) {
  return json{{"epoch", e.epoch}, {"test_error", e.test_error}, {"train_error", e.train_error},
              {"lr", e.lr},       {"L_b", e.L_b},               {"L_adv", e.L_adv},
              {"L_is", e.L_is},   {"L_sup", e.L_sup},           {"total", e.total}};
}

EpochMetrics epoch_from_json(const json& j) {
  EpochMetrics e;
  e.epoch = j.at("epoch");
  e.test_error = j.at("test_error");
  e.train_error = j.at("train_error");
  e.lr = j.at("lr");
  e.L_b = j.at("L_b");
  e.L_adv = j.at("L_adv");
  e.L_is = j.at("L_is");
  e.L_sup = j.at("L_sup");
  e.total = j.at("total");
  return e;
}

}  // namespace

// TrainerBase ----------------------------------------------------------------

TrainerBase::TrainerBase(RunConfig config, const TrainTestPair& data, std::uint64_t seed,
                         std::string kind)
    : config_(std::move(config)),
      data_(data),
      seed_(seed),
      kind_(std::move(kind)),
      augment_rng_(derive_seed(seed, "augment")) {
  config_.validate();
  if (data.train.size() < 2 || data.test.size() == 0) {
    throw ConfigError("dataset: need at least 2 training and 1 test image");
  }
  const auto& in = data.train.images.shape();
  if (in[1] != config_.image_channels || in[2] != config_.image_height ||
      in[3] != config_.image_width) {
    throw ConfigError("image_channels: data is " + shape_str(in) + ", config expects " +
                      std::to_string(config_.image_channels) + "x" +
                      std::to_string(config_.image_height) + "x" +
                      std::to_string(config_.image_width));
  }
  metrics_.seed = seed;
  metrics_.config_hash = config_.hash();
}

void TrainerBase::train() {
  while (!finished()) run_epoch();
}

std::vector<std::vector<std::size_t>> TrainerBase::epoch_batches() const {
  const auto order = epoch_permutation(data_.train.size(), derive_seed(seed_, "shuffle"), epoch_);
  std::vector<std::vector<std::size_t>> out;
  for (auto part : split_batches(order, config_.batch_size)) {
    // A single leftover image cannot be batch-normalized; it is skipped.
    if (part.size() >= 2) out.emplace_back(part.begin(), part.end());
  }
  return out;
}

void TrainerBase::log_step(const LossBundle& bundle, double lr) {
  metrics_.steps.push_back({step_++, epoch_, lr, record_of(bundle)});
}

void TrainerBase::finish_epoch(double test_error, double train_error, double lr) {
  EpochMetrics e;
  e.epoch = epoch_;
  e.test_error = test_error;
  e.train_error = train_error;
  e.lr = lr;
  std::size_t n = 0;
  for (std::size_t i = epoch_first_step_; i < metrics_.steps.size(); ++i) {
    const auto& l = metrics_.steps[i].losses;
    if (l.role == StepRole::discriminator_step) continue;
    e.L_b += l.L_b;
    e.L_adv += l.L_adv;
    e.L_is += l.L_is;
    e.L_sup += l.L_sup;
    e.total += l.total;
    ++n;
  }
  if (n > 0) {
    const double inv = 1.0 / static_cast<double>(n);
    e.L_b *= inv;
    e.L_adv *= inv;
    e.L_is *= inv;
    e.L_sup *= inv;
    e.total *= inv;
  }
  metrics_.epochs.push_back(e);
  ++epoch_;
  epoch_first_step_ = metrics_.steps.size();
}

void TrainerBase::save_state(const std::filesystem::path& path) const {
  std::ostringstream rng;
  rng << augment_rng_;
  json steps = json::array(), epochs = json::array();
  for (const auto& s : metrics_.steps) steps.push_back(to_json(s));
  for (const auto& e : metrics_.epochs) epochs.push_back(to_json(e));
  const json header = {{"kind", kind_},         {"config_hash", config_.hash()},
                       {"seed", seed_},         {"epoch", epoch_},
                       {"step", step_},         {"augment_rng", rng.str()},
                       {"run_id", metrics_.run_id}, {"variant", metrics_.variant},
                       {"steps", steps},        {"epochs", epochs}};
  write_checkpoint(path, header.dump(), state_entries());
}

void TrainerBase::load_state(const std::filesystem::path& path) {
  const auto data = read_checkpoint(path);
  json header;
  try {
    header = json::parse(data.header);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": unreadable header: " + e.what());
  }
  try {
    if (header.at("kind") != kind_) {
      throw ConfigError(path.string() + ": holds a " + header.at("kind").get<std::string>() +
                        " state, expected " + kind_);
    }
    if (header.at("config_hash") != config_.hash()) {
      throw ConfigError(path.string() + ": config hash " +
                        header.at("config_hash").get<std::string>() + " does not match " +
                        config_.hash());
    }
    if (header.at("seed").get<std::uint64_t>() != seed_) {
      throw ConfigError(path.string() + ": saved for seed " +
                        std::to_string(header.at("seed").get<std::uint64_t>()) + ", not " +
                        std::to_string(seed_));
    }
    restore_entries(data, state_entries());
    epoch_ = header.at("epoch");
    step_ = header.at("step");
    std::istringstream rng(header.at("augment_rng").get<std::string>());
    rng >> augment_rng_;
    metrics_.run_id = header.at("run_id");
    metrics_.variant = header.at("variant");
    metrics_.steps.clear();
    metrics_.epochs.clear();
    for (const auto& s : header.at("steps")) metrics_.steps.push_back(step_from_json(s));
    for (const auto& e : header.at("epochs")) metrics_.epochs.push_back(epoch_from_json(e));
    epoch_first_step_ = metrics_.steps.size();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed header: " + e.what());
  }
}

// Teacher --------------------------------------------------------------------

TeacherTrainer::TeacherTrainer(const RunConfig& config, const TrainTestPair& data,
                               std::uint64_t seed)
    : TrainerBase(config, data, seed, "teacher_state"),
      teacher_(build_teacher(config_, seed)),
      aux_(build_aux_head(teacher_.attention->output_dim(), config_.num_classes,
                          derive_seed(seed, "aux"), config_.dtype)),
      schedule_(config_.lr_teacher, config_.teacher_milestones(), config_.lr_decay) {
  auto params = prefixed("teacher", teacher_.parameters());
  auto aux = prefixed("aux", aux_->parameters());
  params.insert(params.end(), aux.begin(), aux.end());
  optimizer_ = std::make_unique<Sgd>(std::move(params), config_.sgd());
  metrics_.variant = "teacher";
  metrics_.run_id = "teacher-seed" + std::to_string(seed);
}

void TeacherTrainer::run_epoch() {
  const double lr = schedule_.lr(epoch_);
  const auto policy = config_.augment_policy();
  std::size_t mistakes = 0, seen = 0;
  for (const auto& idx : epoch_batches()) {
    const Batch b = gather(data_.train, idx);
    const Tensor x =
        prepare_images(b.images, data_.train.stats, &policy, &augment_rng_, config_.dtype);
    const auto bf = teacher_.backbone->forward(x, Mode::train);
    const auto desc = teacher_.attention->forward(bf);
    LossParts parts;
    parts.L_sup = add(cross_entropy(bf.logits, b.labels),
                      cross_entropy(aux_->logits(desc.concatenated), b.labels));
    const auto bundle = total_loss(parts, config_.weights, StepRole::teacher_step, config_.dtype);
    optimizer_->zero_grad();
    bundle.total.backward();
    if (observer_) observer_(bundle);
    optimizer_->step(lr);
    log_step(bundle, lr);
    mistakes += count_mistakes(bf.logits, b.labels);
    seen += idx.size();
  }
  const double test_error = evaluate_error(teacher_, data_.test, config_.dtype);
  finish_epoch(test_error, seen ? static_cast<double>(mistakes) / seen : 0.0, lr);
}

double TeacherTrainer::aux_error() {
  NoGradGuard no_grad;
  std::size_t mistakes = 0;
  std::vector<std::size_t> idx(data_.test.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (auto part : split_batches(idx, 250)) {
    const Batch b = gather(data_.test, part);
    const Tensor x = prepare_images(b.images, data_.test.stats, nullptr, nullptr, config_.dtype);
    const auto bf = teacher_.backbone->forward(x, Mode::eval);
    const auto desc = teacher_.attention->forward(bf);
    mistakes += count_mistakes(aux_->logits(desc.concatenated), b.labels);
  }
  return static_cast<double>(mistakes) / static_cast<double>(data_.test.size());
}

std::vector<Parameter> TeacherTrainer::state_entries() const {
  auto out = prefixed("teacher", teacher_.state());
  auto aux = prefixed("aux", aux_->state());
  auto opt = prefixed("optimizer", optimizer_->state());
  out.insert(out.end(), aux.begin(), aux.end());
  out.insert(out.end(), opt.begin(), opt.end());
  return out;
}

void TeacherTrainer::export_teacher(const std::filesystem::path& path) const {
  json header = {{"kind", "teacher"},
                 {"teacher_hash", config_.teacher_hash()},
                 {"seed", seed_},
                 {"epoch", epoch_}};
  if (auto err = metrics_.final_test_error()) header["test_error"] = *err;
  write_checkpoint(path, header.dump(), prefixed("teacher", teacher_.state()));
}

Network load_teacher(const std::filesystem::path& path, const RunConfig& config) {
  const auto data = read_checkpoint(path);
  json header;
  try {
    header = json::parse(data.header);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": unreadable header: " + e.what());
  }
  if (header.value("kind", "") != "teacher") {
    throw ConfigError(path.string() + ": not a teacher checkpoint");
  }
  const std::string hash = header.value("teacher_hash", "");
  if (hash != config.teacher_hash()) {
    throw ConfigError(path.string() + ": teacher hash " + hash +
                      " does not match this config's data/architecture hash " +
                      config.teacher_hash());
  }
  Network net = build_teacher(config, header.value("seed", std::uint64_t{0}));
  restore_entries(data, prefixed("teacher", net.state()));
  net.set_trainable(false);
  return net;
}

// Student --------------------------------------------------------------------

StudentTrainer::StudentTrainer(const RunConfig& config, const TrainTestPair& data,
                               Network* teacher, std::uint64_t seed)
    : TrainerBase(config, data, seed, "student_state"),
      teacher_(teacher),
      student_(build_student(config_, seed)),
      disc_(build_discriminator(config_.num_classes, config_.num_classes,
                                derive_seed(seed, "discriminator"), config_.dtype)),
      student_schedule_(config_.lr_student, config_.student_milestones(), config_.lr_decay),
      disc_schedule_(config_.lr_discriminator, config_.student_milestones(), config_.lr_decay) {
  const auto& m = config_.loss_mask;
  if (!m.supervised && !m.backbone && !m.adversarial && !m.intermediate) {
    throw ConfigError("loss_mask: empty mask");
  }
  if (!m.supervised && teacher_ == nullptr) {
    throw ConfigError("teacher: distillation mask '" + m.to_string() + "' needs a teacher");
  }
  if (teacher_) {
    teacher_->zero_grad();
    teacher_->set_trainable(false);
  }
  student_opt_ = std::make_unique<Sgd>(prefixed("student", student_.parameters()), config_.sgd());
  disc_opt_ = std::make_unique<Sgd>(prefixed("discriminator", disc_->parameters()), config_.sgd());
  metrics_.variant = m.to_string();
  metrics_.run_id = metrics_.variant + "-seed" + std::to_string(seed);
}

void StudentTrainer::train_batch(const Batch& b, double lr_student, double lr_disc,
                                 std::size_t& mistakes) {
  const auto& mask = config_.loss_mask;
  const auto& w = config_.weights;
  const auto policy = config_.augment_policy();
  const Tensor x = prepare_images(b.images, data_.train.stats, &policy, &augment_rng_, config_.dtype);

  Tensor teacher_logits;
  SqueezedDescriptors teacher_desc;
  if (!mask.supervised) {
    NoGradGuard no_grad;
    const auto bf = teacher_->backbone->forward(x, Mode::eval);
    teacher_logits = bf.logits;
    if (mask.intermediate) teacher_desc = teacher_->attention->forward(bf);
  }

  BlockFeatures bf = student_.backbone->forward(x, Mode::train);
  mistakes += count_mistakes(bf.logits, b.labels);

  if (mask.supervised) {
    LossParts parts;
    parts.L_sup = cross_entropy(bf.logits, b.labels);
    const auto bundle = total_loss(parts, w, StepRole::supervised_step, config_.dtype);
    student_opt_->zero_grad();
    bundle.total.backward();
    if (observer_) observer_(bundle);
    student_opt_->step(lr_student);
    log_step(bundle, lr_student);
    return;
  }

  if (mask.adversarial) {
    for (std::size_t j = 0; j < config_.discriminator_steps; ++j) {
      const auto adv = adversarial_losses(*disc_, teacher_logits, bf.logits, b.labels, w,
                                          StepRole::discriminator_step);
      LossParts parts;
      parts.L_adv_o = adv.L_adv_o;
      parts.L_reg = adv.L_reg;
      parts.L_adv_C = adv.L_adv_C;
      const auto bundle = total_loss(parts, w, StepRole::discriminator_step, config_.dtype);
      disc_opt_->zero_grad();
      student_opt_->zero_grad();
      bundle.total.backward();
      if (observer_) observer_(bundle);
      disc_opt_->step(lr_disc);
      log_step(bundle, lr_disc);
    }
  }

  for (std::size_t i = 0; i < config_.student_steps; ++i) {
    if (i > 0) bf = student_.backbone->forward(x, Mode::train);
    FreezeGuard frozen(*disc_);
    LossParts parts;
    if (mask.backbone) parts.L_b = backbone_loss(bf.logits, teacher_logits);
    if (mask.adversarial) {
      const auto adv = adversarial_losses(*disc_, teacher_logits, bf.logits, b.labels, w,
                                          StepRole::student_step);
      parts.L_adv_o = adv.L_adv_o;
      parts.L_reg = adv.L_reg;
      parts.L_adv_C = adv.L_adv_C;
    }
    if (mask.intermediate) {
      parts.L_is = intermediate_loss(student_.attention->forward(bf), teacher_desc);
    }
    const auto bundle = total_loss(parts, w, StepRole::student_step, config_.dtype);
    student_opt_->zero_grad();
    disc_opt_->zero_grad();
    bundle.total.backward();
    if (observer_) observer_(bundle);
    student_opt_->step(lr_student);
    log_step(bundle, lr_student);
  }
}

void StudentTrainer::run_epoch() {
  const double lr_s = student_schedule_.lr(epoch_);
  const double lr_d = disc_schedule_.lr(epoch_);
  std::size_t mistakes = 0, seen = 0;
  for (const auto& idx : epoch_batches()) {
    train_batch(gather(data_.train, idx), lr_s, lr_d, mistakes);
    seen += idx.size();
  }
  const double test_error = evaluate_error(student_, data_.test, config_.dtype);
  finish_epoch(test_error, seen ? static_cast<double>(mistakes) / seen : 0.0, lr_s);
}

std::vector<Parameter> StudentTrainer::state_entries() const {
  auto out = prefixed("student", student_.state());
  for (auto part : {prefixed("discriminator", disc_->state()),
                    prefixed("student_opt", student_opt_->state()),
                    prefixed("disc_opt", disc_opt_->state())}) {
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

void StudentTrainer::save_student(const std::filesystem::path& path) const {
  json header = {{"kind", "student"},
                 {"config_hash", config_.hash()},
                 {"variant", config_.loss_mask.to_string()},
                 {"seed", seed_},
                 {"epoch", epoch_}};
  if (auto err = metrics_.final_test_error()) header["test_error"] = *err;
  write_checkpoint(path, header.dump(), prefixed("student", student_.state()));
}

// Ablation -------------------------------------------------------------------

std::vector<LossMask> default_variants() {
  return {LossMask::supervised_only(), LossMask::parse("b"), LossMask::parse("b,is"),
          LossMask::parse("b,adv"), LossMask::parse("b,adv,is")};
}

AblationResult run_ablation(const RunConfig& config, const std::vector<LossMask>& variants,
                            std::size_t runs, const std::filesystem::path& out_dir,
                            const std::function<void(const std::string&)>& progress) {
  if (variants.empty()) throw ConfigError("ablation: no variants");
  if (runs == 0) throw ConfigError("runs: must be >= 1");
  for (const auto& m : variants) {
    if (!m.supervised && !m.backbone && !m.adversarial && !m.intermediate) {
      throw ConfigError("ablation: empty loss mask");
    }
  }
  const auto data = load_data(config);
  AblationResult result;
  for (const auto& m : variants) result.rows.push_back({m, {}, 0, 0});
  auto note = [&](const std::string& s) {
    if (progress) progress(s);
  };
  for (std::size_t r = 0; r < runs; ++r) {
    const std::uint64_t seed = config.seed + r;
    TeacherTrainer tt(config, data, seed);
    tt.train();
    const double teacher_err = tt.metrics().final_test_error().value_or(1.0);
    result.teacher_errors.push_back(teacher_err);
    note("seed " + std::to_string(seed) + " teacher test error " + format_double(teacher_err));
    if (!out_dir.empty()) {
      const auto dir = out_dir / "teachers" / ("seed" + std::to_string(seed));
      export_run(tt.metrics(), dir);
      tt.export_teacher(dir / "teacher.ckpt");
    }
    for (auto& row : result.rows) {
      RunConfig vc = config;
      vc.loss_mask = row.mask;
      StudentTrainer st(vc, data, row.mask.supervised ? nullptr : &tt.teacher(), seed);
      st.train();
      const double err = st.metrics().final_test_error().value_or(1.0);
      row.errors.push_back(err);
      note("seed " + std::to_string(seed) + " " + row.mask.to_string() + " test error " +
           format_double(err));
      if (!out_dir.empty()) export_run(st.metrics(), out_dir / "runs" / st.metrics().run_id);
    }
  }
  for (auto& row : result.rows) {
    row.mean = std::accumulate(row.errors.begin(), row.errors.end(), 0.0) /
               static_cast<double>(row.errors.size());
    row.median = median(row.errors);
  }
  return result;
}

}  // namespace ksanc
