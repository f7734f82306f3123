#include "ksanc/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "ksanc/checkpoint.hpp"
#include "ksanc/metrics.hpp"

namespace ksanc {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::uint64_t parse_u64(std::string_view text) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError("'" + std::string(text) + "' is not a non-negative integer");
  }
  return v;
}

double parse_real(std::string_view text) {
  try {
    return parse_double(text);
  } catch (const Error&) {
    throw ConfigError("'" + std::string(text) + "' is not a number");
  }
}

bool parse_bool(std::string_view text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("'" + std::string(text) + "' is not a boolean (true/false)");
}

std::vector<std::size_t> parse_list(std::string_view text) {
  std::vector<std::size_t> out;
  if (trim(text).empty()) return out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = std::min(text.find(',', pos), text.size());
    out.push_back(parse_u64(trim(text.substr(pos, comma - pos))));
    pos = comma + 1;
  }
  return out;
}

std::string list_text(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
  /// Participates in hash().
  bool hashed = true;
  /// Participates in teacher_hash().
  bool teacher = false;
};

#define KSANC_STRING(name, ...)                                                  \
  Field {                                                                        \
    #name, [](RunConfig& c, std::string_view v) { c.name = std::string(v); },    \
        [](const RunConfig& c) { return c.name; }, __VA_ARGS__                   \
  }
#define KSANC_SIZE(name, ...)                                                              \
  Field {                                                                                  \
    #name, [](RunConfig& c, std::string_view v) { c.name = parse_u64(v); },                \
        [](const RunConfig& c) { return std::to_string(c.name); }, __VA_ARGS__             \
  }
#define KSANC_REAL(name, member, ...)                                                      \
  Field {                                                                                  \
    #name, [](RunConfig& c, std::string_view v) { c.member = parse_real(v); },             \
        [](const RunConfig& c) { return format_double(c.member); }, __VA_ARGS__            \
  }
#define KSANC_LIST(name, ...)                                                              \
  Field {                                                                                  \
    #name, [](RunConfig& c, std::string_view v) { c.name = parse_list(v); },               \
        [](const RunConfig& c) { return list_text(c.name); }, __VA_ARGS__                  \
  }
#define KSANC_BOOL(name, ...)                                                              \
  Field {                                                                                  \
    #name, [](RunConfig& c, std::string_view v) { c.name = parse_bool(v); },               \
        [](const RunConfig& c) { return std::string(c.name ? "true" : "false"); },         \
        __VA_ARGS__                                                                        \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      KSANC_STRING(dataset, true, true),
      KSANC_STRING(dataset_format, true, true),
      KSANC_STRING(dataset_labels, true, true),
      KSANC_STRING(test_dataset, true, true),
      KSANC_STRING(test_labels, true, true),
      KSANC_SIZE(num_classes, true, true),
      KSANC_SIZE(image_channels, true, true),
      KSANC_SIZE(image_height, true, true),
      KSANC_SIZE(image_width, true, true),
      KSANC_SIZE(synth_train_samples, true, true),
      KSANC_SIZE(synth_test_samples, true, true),
      KSANC_REAL(synth_noise, synth_noise, true, true),
      KSANC_REAL(synth_jitter, synth_jitter, true, true),
      KSANC_SIZE(data_seed, true, true),
      KSANC_BOOL(augment),
      KSANC_SIZE(augment_pad),
      KSANC_REAL(hflip_prob, hflip_prob),
      KSANC_LIST(teacher_channels, true, true),
      KSANC_LIST(teacher_units, true, true),
      KSANC_LIST(student_channels, true, true),
      KSANC_LIST(student_units),
      Field{"dtype", [](RunConfig& c, std::string_view v) { c.dtype = parse_dtype(v); },
            [](const RunConfig& c) { return std::string(to_string(c.dtype)); }, true, true},
      KSANC_SIZE(epochs),
      KSANC_SIZE(teacher_epochs),
      KSANC_SIZE(batch_size),
      KSANC_REAL(momentum, momentum),
      KSANC_REAL(weight_decay, weight_decay),
      KSANC_REAL(lr_student, lr_student),
      KSANC_REAL(lr_discriminator, lr_discriminator),
      KSANC_REAL(lr_teacher, lr_teacher),
      KSANC_LIST(lr_milestones),
      KSANC_LIST(teacher_lr_milestones),
      KSANC_REAL(lr_decay, lr_decay),
      KSANC_REAL(lambda1, weights.lambda1),
      KSANC_REAL(lambda2, weights.lambda2),
      KSANC_REAL(lambda3, weights.lambda3),
      KSANC_REAL(mu, weights.mu),
      Field{"steps_ratio",
            [](RunConfig& c, std::string_view v) {
              const auto colon = v.find(':');
              if (colon == std::string_view::npos) {
                throw ConfigError("'" + std::string(v) + "' must look like student:discriminator");
              }
              c.student_steps = parse_u64(trim(v.substr(0, colon)));
              c.discriminator_steps = parse_u64(trim(v.substr(colon + 1)));
            },
            [](const RunConfig& c) {
              return std::to_string(c.student_steps) + ":" + std::to_string(c.discriminator_steps);
            }},
      Field{"loss_mask", [](RunConfig& c, std::string_view v) { c.loss_mask = LossMask::parse(v); },
            [](const RunConfig& c) { return c.loss_mask.to_string(); }},
      KSANC_SIZE(seed),
      KSANC_SIZE(runs, false),
      KSANC_STRING(output, false),
  };
  return table;
}

#undef KSANC_STRING
#undef KSANC_SIZE
#undef KSANC_REAL
#undef KSANC_LIST
#undef KSANC_BOOL

std::string hashed_text(const RunConfig& c, bool teacher_only) {
  std::string s;
  for (const auto& f : fields()) {
    if (teacher_only ? !f.teacher : !f.hashed) continue;
    s += f.key;
    s += '=';
    s += f.get(c);
    s += '\n';
  }
  return s;
}

}  // namespace

RunConfig RunConfig::parse(std::string_view text, std::string_view source) {
  std::map<std::string_view, const Field*> by_key;
  for (const auto& f : fields()) by_key[f.key] = &f;
  RunConfig config;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = std::min(text.find('\n', pos), text.size());
    const auto raw = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++lineno;
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const std::string where = std::string(source) + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(where + "expected 'key = value', got '" + std::string(line) + "'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError(where + "unknown key '" + std::string(key) + "'");
    if (!seen.insert(std::string(key)).second) {
      throw ConfigError(where + "key '" + std::string(key) + "' given twice");
    }
    try {
      it->second->set(config, value);
    } catch (const std::exception& e) {
      throw ConfigError(where + std::string(key) + ": " + e.what());
    }
  }
  return config;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw ConfigError(field + ": " + msg);
  };
  if (dataset.empty()) fail("dataset", "missing required key (set 'dataset = synthetic' or a path)");
  if (output.empty()) fail("output", "missing required key");
  if (dataset != "synthetic") {
    if (dataset_format != "cifar" && dataset_format != "idx") {
      fail("dataset_format", "must be cifar or idx");
    }
    if (!std::filesystem::exists(dataset)) fail("dataset", "file not found: " + dataset);
    if (test_dataset.empty()) fail("test_dataset", "required when dataset is a file");
    if (!std::filesystem::exists(test_dataset)) {
      fail("test_dataset", "file not found: " + test_dataset);
    }
    if (dataset_format == "idx") {
      if (dataset_labels.empty() || !std::filesystem::exists(dataset_labels)) {
        fail("dataset_labels", "idx datasets need an existing label file");
      }
      if (test_labels.empty() || !std::filesystem::exists(test_labels)) {
        fail("test_labels", "idx datasets need an existing label file");
      }
    }
  } else {
    if (synth_train_samples < num_classes) fail("synth_train_samples", "fewer than num_classes");
    if (synth_test_samples < num_classes) fail("synth_test_samples", "fewer than num_classes");
    if (synth_noise < 0) fail("synth_noise", "must be >= 0");
    if (synth_jitter < 0 || synth_jitter > 1) fail("synth_jitter", "must be in [0,1]");
  }
  if (num_classes < 2) fail("num_classes", "must be >= 2");
  if (image_channels == 0 || image_height == 0 || image_width == 0) {
    fail("image_channels", "image dimensions must be positive");
  }
  if (augment && (augment_pad >= image_height || augment_pad >= image_width)) {
    fail("augment_pad", "must be smaller than the image");
  }
  if (hflip_prob < 0 || hflip_prob > 1) fail("hflip_prob", "must be in [0,1]");
  if (teacher_channels.size() != student_channels.size()) {
    fail("student_channels", "teacher and student need the same number of blocks");
  }
  try {
    teacher_spec().validate();
  } catch (const ConfigError& e) {
    fail("teacher_channels", e.what());
  }
  try {
    student_spec().validate();
  } catch (const ConfigError& e) {
    fail("student_channels", e.what());
  }
  if (batch_size < 2) fail("batch_size", "must be >= 2 (batch normalization needs a batch)");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum", "must be in [0,1)");
  if (!(weight_decay >= 0)) fail("weight_decay", "must be >= 0");
  if (!(lr_student > 0)) fail("lr_student", "must be > 0");
  if (!(lr_discriminator > 0)) fail("lr_discriminator", "must be > 0");
  if (!(lr_teacher > 0)) fail("lr_teacher", "must be > 0");
  if (!(lr_decay > 0)) fail("lr_decay", "must be > 0");
  auto check_milestones = [&](const std::vector<std::size_t>& m, std::size_t e, const char* name) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (i > 0 && m[i] <= m[i - 1]) fail(name, "must be strictly increasing");
      if (m[i] >= e) fail(name, "milestone " + std::to_string(m[i]) + " is not below epochs");
    }
  };
  check_milestones(lr_milestones, epochs, "lr_milestones");
  check_milestones(teacher_lr_milestones, teacher_epochs, "teacher_lr_milestones");
  try {
    weights.validate();
  } catch (const ConfigError& e) {
    fail("lambda1", e.what());
  }
  if (student_steps == 0 || discriminator_steps == 0) fail("steps_ratio", "both counts must be >= 1");
  if (runs == 0) fail("runs", "must be >= 1");
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& f : fields()) {
    s += f.key;
    s += " = ";
    s += f.get(*this);
    s += '\n';
  }
  return s;
}

std::string RunConfig::hash() const { return fnv1a_hex(hashed_text(*this, false)); }

std::string RunConfig::teacher_hash() const { return fnv1a_hex(hashed_text(*this, true)); }

BackboneSpec RunConfig::teacher_spec() const {
  return {teacher_channels.size(), teacher_channels, teacher_units, num_classes,
          {image_channels, image_height, image_width}};
}

BackboneSpec RunConfig::student_spec() const {
  return {student_channels.size(), student_channels, student_units, num_classes,
          {image_channels, image_height, image_width}};
}

std::vector<std::size_t> RunConfig::teacher_milestones() const {
  return teacher_lr_milestones.empty() ? default_milestones(teacher_epochs)
                                       : teacher_lr_milestones;
}

std::vector<std::size_t> RunConfig::student_milestones() const {
  return lr_milestones.empty() ? default_milestones(epochs) : lr_milestones;
}

AugmentPolicy RunConfig::augment_policy() const {
  AugmentPolicy p;
  p.pad = augment_pad;
  p.hflip_prob = hflip_prob;
  p.enabled = augment;
  return p;
}

TrainTestPair load_data(const RunConfig& c) {
  TrainTestPair pair;
  if (c.dataset == "synthetic") {
    SynthSpec spec;
    spec.classes = c.num_classes;
    spec.samples = c.synth_train_samples;
    spec.channels = c.image_channels;
    spec.height = c.image_height;
    spec.width = c.image_width;
    spec.noise = c.synth_noise;
    spec.jitter = c.synth_jitter;
    spec.seed = c.data_seed;
    return synth_train_test(spec, c.synth_test_samples);
  }
  if (c.dataset_format == "idx") {
    pair.train = load_idx_like(c.dataset, c.dataset_labels, c.num_classes, Split::train);
    pair.test = load_idx_like(c.test_dataset, c.test_labels, c.num_classes, Split::test);
  } else {
    const RecordLayout layout{c.image_channels, c.image_height, c.image_width, c.num_classes};
    pair.train = load_cifar_like(c.dataset, layout, Split::train);
    pair.test = load_cifar_like(c.test_dataset, layout, Split::test);
  }
  const auto& img = pair.train.images;
  if (img.dim(1) != c.image_channels || img.dim(2) != c.image_height ||
      img.dim(3) != c.image_width) {
    throw ConfigError("image_channels: dataset images are " + shape_str(img.shape()) +
                      ", config says " + std::to_string(c.image_channels) + "x" +
                      std::to_string(c.image_height) + "x" + std::to_string(c.image_width));
  }
  share_stats(pair);
  return pair;
}

}  // namespace ksanc
