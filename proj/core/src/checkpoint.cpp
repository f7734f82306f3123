#include "ksanc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace ksanc {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'K', 'S', 'A', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
 public:
  Reader(std::ifstream& in, const std::filesystem::path& path) : in_(in), path_(path) {}

  template <typename T>
  T get(const char* what) {
    T v{};
    bytes(reinterpret_cast<char*>(&v), sizeof v, what);
    return v;
  }

  void bytes(char* dst, std::size_t n, const char* what) {
    const auto offset = static_cast<std::size_t>(in_.tellg());
    if (!in_.read(dst, static_cast<std::streamsize>(n))) {
      throw DataError(path_.string() + ": truncated " + what + " at byte offset " +
                      std::to_string(offset));
    }
  }

 private:
  std::ifstream& in_;
  const std::filesystem::path& path_;
};

}  // namespace

const Parameter* CheckpointData::find(std::string_view name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const std::string& header,
                      std::span<const Parameter> entries) {
  std::set<std::string> names;
  for (const auto& e : entries) {
    if (!names.insert(e.name).second) {
      throw Error("write_checkpoint: duplicate entry name '" + e.name + "'");
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    put<std::uint64_t>(out, entries.size());
    for (const auto& e : entries) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
      out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      put<std::uint8_t>(out, e.tensor.dtype() == DType::f64 ? 1 : 0);
      put<std::uint32_t>(out, static_cast<std::uint32_t>(e.tensor.rank()));
      for (auto d : e.tensor.shape()) put<std::uint64_t>(out, d);
      visit_dtype(e.tensor.dtype(), [&]<typename T>() {
        auto values = e.tensor.data<T>();
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size_bytes()));
      });
    }
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  Reader r(in, path);
  char magic[8];
  r.bytes(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw DataError(path.string() + ": not a checkpoint (bad magic at byte offset 0)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  CheckpointData data;
  const auto header_len = r.get<std::uint64_t>("header length");
  data.header.resize(header_len);
  r.bytes(data.header.data(), header_len, "header");
  const auto count = r.get<std::uint64_t>("entry count");
  for (std::uint64_t i = 0; i < count; ++i) {
    Parameter e;
    e.name.resize(r.get<std::uint32_t>("name length"));
    r.bytes(e.name.data(), e.name.size(), "entry name");
    const auto code = r.get<std::uint8_t>("dtype");
    if (code > 1) {
      throw DataError(path.string() + ": entry '" + e.name + "' has unknown dtype " +
                      std::to_string(code));
    }
    Shape shape(r.get<std::uint32_t>("rank"));
    for (auto& d : shape) d = r.get<std::uint64_t>("dimension");
    const DType dtype = code == 1 ? DType::f64 : DType::f32;
    e.tensor = visit_dtype(dtype, [&]<typename T>() {
      std::vector<T> values(shape_numel(shape));
      r.bytes(reinterpret_cast<char*>(values.data()), values.size() * sizeof(T), "values");
      return Tensor::from_buffer<T>(shape, std::move(values));
    });
    data.entries.push_back(std::move(e));
  }
  return data;
}

void restore_entries(const CheckpointData& data, std::span<const Parameter> targets) {
  for (const auto& t : targets) {
    const Parameter* src = data.find(t.name);
    if (!src) throw DataError("checkpoint has no entry '" + t.name + "'");
    if (src->tensor.shape() != t.tensor.shape()) {
      throw DataError("checkpoint entry '" + t.name + "' has shape " +
                      shape_str(src->tensor.shape()) + ", expected " +
                      shape_str(t.tensor.shape()));
    }
    Tensor dst = t.tensor;
    dst.assign(src->tensor);
  }
}

std::vector<Parameter> prefixed(const std::string& prefix, std::vector<Parameter> params) {
  for (auto& p : params) p.name = prefix + "." + p.name;
  return params;
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace ksanc
