#include "ksanc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace ksanc {

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
  return counts;
}

NormalizationStats compute_stats(const Tensor& images) {
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw ShapeError("compute_stats: expected non-empty [M,c,H,W], got " +
                     shape_str(images.shape()));
  }
  const std::size_t m = images.dim(0), c = images.dim(1);
  const std::size_t plane = images.dim(2) * images.dim(3);
  NormalizationStats stats{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  visit_dtype(images.dtype(), [&]<typename T>() {
    auto px = images.data<T>();
    const double count = static_cast<double>(m * plane);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < plane; ++p) s += px[(i * c + ch) * plane + p];
      const double mu = s / count;
      double v = 0;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = px[(i * c + ch) * plane + p] - mu;
          v += d * d;
        }
      stats.mean[ch] = mu;
      const double sd = std::sqrt(v / count);
      stats.std[ch] = sd > 0 ? sd : 1.0;
    }
  });
  return stats;
}

Tensor normalize(const Tensor& images, const NormalizationStats& stats) {
  if (images.rank() != 4 || images.dim(1) != stats.mean.size() ||
      stats.std.size() != stats.mean.size()) {
    throw ShapeError("normalize: images " + shape_str(images.shape()) + " vs stats for " +
                     std::to_string(stats.mean.size()) + " channels");
  }
  const std::size_t m = images.dim(0), c = images.dim(1);
  const std::size_t plane = images.dim(2) * images.dim(3);
  return visit_dtype(images.dtype(), [&]<typename T>() {
    auto px = images.data<T>();
    std::vector<T> out(px.size());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double mu = stats.mean[ch], sd = stats.std[ch];
        const std::size_t base = (i * c + ch) * plane;
        for (std::size_t p = 0; p < plane; ++p)
          out[base + p] = static_cast<T>((px[base + p] - mu) / sd);
      }
    return Tensor::from_buffer<T>(images.shape(), std::move(out));
  });
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                        const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw DataError(path.string() + ": truncated header at byte offset " + std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void check_label(int label, std::size_t num_classes, std::size_t offset,
                 const std::filesystem::path& path) {
  if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
    throw DataError(path.string() + ": label " + std::to_string(label) + " at byte offset " +
                    std::to_string(offset) + " is not below class count " +
                    std::to_string(num_classes));
  }
}

}  // namespace

Dataset load_cifar_like(const std::filesystem::path& path, const RecordLayout& layout,
                        Split split) {
  if (layout.channels == 0 || layout.height == 0 || layout.width == 0 || layout.num_classes < 2) {
    throw ConfigError("cifar-like layout needs positive image dims and at least 2 classes");
  }
  const auto bytes = read_file(path);
  const std::size_t pixels = layout.channels * layout.height * layout.width;
  const std::size_t record = 1 + pixels;
  if (bytes.empty()) throw DataError(path.string() + ": file is empty");
  if (bytes.size() % record != 0) {
    const std::size_t offset = bytes.size() / record * record;
    throw DataError(path.string() + ": truncated record at byte offset " +
                    std::to_string(offset) + " (record size " + std::to_string(record) + ", " +
                    std::to_string(bytes.size() - offset) + " bytes left)");
  }
  const std::size_t m = bytes.size() / record;
  Dataset d;
  d.split = split;
  d.num_classes = layout.num_classes;
  d.labels.resize(m);
  std::vector<float> px(m * pixels);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t offset = i * record;
    d.labels[i] = bytes[offset];
    check_label(d.labels[i], layout.num_classes, offset, path);
    for (std::size_t p = 0; p < pixels; ++p)
      px[i * pixels + p] = static_cast<float>(bytes[offset + 1 + p]) / 255.0f;
  }
  d.images = Tensor::from_buffer<float>({m, layout.channels, layout.height, layout.width},
                                        std::move(px));
  d.stats = compute_stats(d.images);
  return d;
}

Dataset load_idx_like(const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path, std::size_t num_classes,
                      Split split) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  const std::uint32_t img_magic = read_be32(img, 0, images_path);
  if ((img_magic >> 8) != 0x08 || ((img_magic & 0xff) != 3 && (img_magic & 0xff) != 4)) {
    throw DataError(images_path.string() +
                    ": bad magic at byte offset 0 (expected unsigned-byte data with 3 or 4 dims)");
  }
  const std::size_t rank = img_magic & 0xff;
  std::vector<std::size_t> dims;
  for (std::size_t k = 0; k < rank; ++k) dims.push_back(read_be32(img, 4 + 4 * k, images_path));
  const std::size_t header = 4 + 4 * rank;
  if (rank == 3) dims.insert(dims.begin() + 1, 1);
  const std::size_t m = dims[0];
  const std::size_t pixels = dims[1] * dims[2] * dims[3];
  if (img.size() < header + m * pixels) {
    const std::size_t full = (img.size() - header) / std::max<std::size_t>(pixels, 1);
    throw DataError(images_path.string() + ": truncated image " + std::to_string(full) +
                    " at byte offset " + std::to_string(header + full * pixels));
  }
  if (read_be32(lab, 0, labels_path) != 0x00000801) {
    throw DataError(labels_path.string() + ": bad magic at byte offset 0 (expected 0x00000801)");
  }
  const std::size_t n_labels = read_be32(lab, 4, labels_path);
  if (n_labels != m) {
    throw DataError(labels_path.string() + ": " + std::to_string(n_labels) + " labels for " +
                    std::to_string(m) + " images");
  }
  if (lab.size() < 8 + m) {
    throw DataError(labels_path.string() + ": truncated label at byte offset " +
                    std::to_string(lab.size()));
  }
  Dataset d;
  d.split = split;
  d.num_classes = num_classes;
  d.labels.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    d.labels[i] = lab[8 + i];
    check_label(d.labels[i], num_classes, 8 + i, labels_path);
  }
  std::vector<float> px(m * pixels);
  for (std::size_t i = 0; i < m * pixels; ++i)
    px[i] = static_cast<float>(img[header + i]) / 255.0f;
  d.images = Tensor::from_buffer<float>({m, dims[1], dims[2], dims[3]}, std::move(px));
  d.stats = compute_stats(d.images);
  return d;
}

void save_cifar_like(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const std::size_t pixels = data.channels() * data.height() * data.width();
  std::vector<unsigned char> record(1 + pixels);
  for (std::size_t i = 0; i < data.size(); ++i) {
    record[0] = static_cast<unsigned char>(data.labels[i]);
    for (std::size_t p = 0; p < pixels; ++p) {
      const double v = std::clamp(data.images.value(i * pixels + p), 0.0, 1.0);
      record[1 + p] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    out.write(reinterpret_cast<const char*>(record.data()),
              static_cast<std::streamsize>(record.size()));
  }
  if (!out) throw DataError("write failed for " + path.string());
}

void share_stats(TrainTestPair& pair) { pair.test.stats = pair.train.stats; }

Dataset synth_dataset(const SynthSpec& spec, Split split) {
  if (spec.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.samples < spec.classes) {
    throw ConfigError("synthetic data needs at least one sample per class (" +
                      std::to_string(spec.samples) + " samples, " + std::to_string(spec.classes) +
                      " classes)");
  }
  if (spec.channels == 0 || spec.height < 2 || spec.width < 2) {
    throw ConfigError("synthetic images need channels >= 1 and size >= 2x2");
  }
  if (spec.noise < 0 || spec.jitter < 0 || spec.jitter > 1) {
    throw ConfigError("synthetic noise must be >= 0 and jitter in [0,1]");
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const std::size_t m = spec.samples, c = spec.channels, h = spec.height, w = spec.width;
  std::vector<int> labels(m);
  for (std::size_t i = 0; i < m; ++i) labels[i] = static_cast<int>(i % spec.classes);
  std::shuffle(labels.begin(), labels.end(), rng);

  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::vector<float> px(m * c * h * w);
  for (std::size_t i = 0; i < m; ++i) {
    const int k = labels[i];
    const int family = k % 4;
    const double freq = 2.0 + static_cast<double>(k / 4);
    const double phase_y = two_pi * spec.jitter * unit(rng);
    const double phase_x = two_pi * spec.jitter * unit(rng);
    const double cy = (h - 1) / 2.0 + spec.jitter * (unit(rng) - 0.5) * h / 2.0;
    const double cx = (w - 1) / 2.0 + spec.jitter * (unit(rng) - 0.5) * w / 2.0;
    std::vector<double> base(c), amp(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      base[ch] = 0.2 + 0.2 * spec.jitter * (unit(rng) - 0.5);
      amp[ch] = 0.6 * (1.0 - 0.5 * spec.jitter * unit(rng));
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double sy = std::sin(two_pi * freq * y / h + phase_y);
        const double sx = std::sin(two_pi * freq * x / w + phase_x);
        double p = 0;
        switch (family) {
          case 0: p = sy; break;
          case 1: p = sx; break;
          case 2: p = sx * sy; break;
          default: {
            const double r = std::hypot(y - cy, x - cx);
            p = std::cos(two_pi * freq * r / h + phase_y);
          }
        }
        p = 0.5 + 0.5 * p;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double v = base[ch] + amp[ch] * p;
          if (spec.noise > 0) v += spec.noise * gauss(rng);
          px[((i * c + ch) * h + y) * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  Dataset d;
  d.split = split;
  d.num_classes = spec.classes;
  d.labels = std::move(labels);
  d.images = Tensor::from_buffer<float>({m, c, h, w}, std::move(px));
  d.stats = compute_stats(d.images);
  return d;
}

TrainTestPair synth_train_test(const SynthSpec& spec, std::size_t test_samples) {
  SynthSpec test_spec = spec;
  test_spec.samples = test_samples;
  test_spec.seed = spec.seed ^ 0x9e3779b97f4a7c15ULL;
  TrainTestPair pair{synth_dataset(spec, Split::train), synth_dataset(test_spec, Split::test)};
  share_stats(pair);
  return pair;
}

Tensor hflip(const Tensor& batch) {
  if (batch.rank() != 4) throw ShapeError("hflip: expected [B,c,H,W], got " + shape_str(batch.shape()));
  const std::size_t rows = batch.dim(0) * batch.dim(1) * batch.dim(2), w = batch.dim(3);
  return visit_dtype(batch.dtype(), [&]<typename T>() {
    auto src = batch.data<T>();
    std::vector<T> out(src.size());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t x = 0; x < w; ++x) out[r * w + x] = src[r * w + (w - 1 - x)];
    return Tensor::from_buffer<T>(batch.shape(), std::move(out));
  });
}

Tensor augment(const Tensor& batch, const AugmentPolicy& policy, std::mt19937_64& rng) {
  if (batch.rank() != 4) {
    throw ShapeError("augment: expected [B,c,H,W], got " + shape_str(batch.shape()));
  }
  if (!policy.enabled) return batch;
  const std::size_t b = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t ch = policy.crop_h ? policy.crop_h : h;
  const std::size_t cw = policy.crop_w ? policy.crop_w : w;
  const std::size_t pad = policy.pad;
  if (pad >= h || pad >= w) {
    throw ConfigError("augment: reflect padding " + std::to_string(pad) +
                      " must be smaller than the image " + std::to_string(h) + "x" +
                      std::to_string(w));
  }
  if (ch > h + 2 * pad || cw > w + 2 * pad) {
    throw ConfigError("augment: crop larger than padded image");
  }
  if (policy.hflip_prob < 0 || policy.hflip_prob > 1) {
    throw ConfigError("augment: hflip_prob must be in [0,1]");
  }
  // Reflection without repeating the edge pixel: index -1 maps to 1.
  auto reflect = [](long i, long n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
  };
  std::uniform_int_distribution<std::size_t> off_y(0, h + 2 * pad - ch);
  std::uniform_int_distribution<std::size_t> off_x(0, w + 2 * pad - cw);
  std::bernoulli_distribution flip(policy.hflip_prob);
  return visit_dtype(batch.dtype(), [&]<typename T>() {
    auto src = batch.data<T>();
    std::vector<T> out(b * c * ch * cw);
    for (std::size_t i = 0; i < b; ++i) {
      const long oy = static_cast<long>(off_y(rng)) - static_cast<long>(pad);
      const long ox = static_cast<long>(off_x(rng)) - static_cast<long>(pad);
      const bool mirror = flip(rng);
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t y = 0; y < ch; ++y) {
          const long sy = reflect(oy + static_cast<long>(y), static_cast<long>(h));
          for (std::size_t x = 0; x < cw; ++x) {
            const std::size_t dx = mirror ? cw - 1 - x : x;
            const long sx = reflect(ox + static_cast<long>(dx), static_cast<long>(w));
            out[((i * c + k) * ch + y) * cw + x] =
                src[((i * c + k) * h + static_cast<std::size_t>(sy)) * w +
                    static_cast<std::size_t>(sx)];
          }
        }
    }
    return Tensor::from_buffer<T>({b, c, ch, cw}, std::move(out));
  });
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32),
                    0x5eedu};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Batch gather(const Dataset& data, std::span<const std::size_t> indices) {
  const std::size_t c = data.channels(), h = data.height(), w = data.width();
  const std::size_t pixels = c * h * w;
  auto src = data.images.data<float>();
  std::vector<float> px(indices.size() * pixels);
  Batch batch;
  batch.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= data.size()) throw Error("gather: index " + std::to_string(i) + " out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * pixels), pixels,
                px.begin() + static_cast<std::ptrdiff_t>(k * pixels));
    batch.labels.push_back(data.labels[i]);
  }
  batch.images = Tensor::from_buffer<float>({indices.size(), c, h, w}, std::move(px));
  return batch;
}

std::vector<std::span<const std::size_t>> split_batches(std::span<const std::size_t> order,
                                                        std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::span<const std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    out.push_back(order.subspan(start, std::min(batch_size, order.size() - start)));
  }
  return out;
}

}  // namespace ksanc
