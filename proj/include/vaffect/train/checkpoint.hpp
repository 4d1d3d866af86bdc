#pragma once

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "vaffect/autodiff/graph.hpp"
#include "vaffect/train/adam.hpp"

namespace vaffect {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Model parameters (including non-trainable state) plus Adam moments.
/// Moment tensors are named "<parameter>:m" and "<parameter>:v".
struct Checkpoint {
  std::uint64_t step = 0;
  std::vector<NamedTensor> params;
  std::uint64_t adam_step = 0;
  std::vector<NamedTensor> adam;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::size_t end, std::string what) : b_(b), end_(end), what_(std::move(what)) {}
  template <class U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)), sizeof(U));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (end_ - pos_ < n) throw FormatError(what_ + ": truncated checkpoint");
    const auto* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline void put_tensors(ByteWriter& w, const std::vector<NamedTensor>& ts) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    if (t.name.size() > 0xFFFF) throw FormatError("checkpoint: tensor name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.value.rank()));
    for (auto e : t.value.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    w.put_bytes(t.value.ptr(), t.value.size() * sizeof(float));
  }
}

inline std::vector<NamedTensor> get_tensors(ByteReader& r) {
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.get<std::uint16_t>();
    const auto* name = r.take(len);
    t.name.assign(reinterpret_cast<const char*>(name), len);
    const auto rank = r.get<std::uint8_t>();
    if (rank == 0) throw FormatError("checkpoint: tensor " + t.name + " has rank 0");
    Shape shape(rank);
    for (auto& e : shape) {
      e = r.get<std::uint32_t>();
      if (e == 0) throw FormatError("checkpoint: tensor " + t.name + " has an empty extent");
    }
    t.value = Tensor<float>(shape);
    std::memcpy(t.value.ptr(), r.take(t.value.size() * sizeof(float)), t.value.size() * sizeof(float));
    out.push_back(std::move(t));
  }
  return out;
}

inline std::uint32_t crc_of(const std::uint8_t* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

}  // namespace detail

/// "VACK", u16 version, u64 step, parameter block, u64 Adam step, Adam
/// block, u32 CRC32 of everything before it. Each block is a u32 count
/// followed by (u16 name length, name, u8 rank, u32 extents, f32 data).
inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.put_bytes("VACK", 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint64_t>(c.step);
  detail::put_tensors(w, c.params);
  w.put<std::uint64_t>(c.adam_step);
  detail::put_tensors(w, c.adam);
  w.put<std::uint32_t>(detail::crc_of(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& b, const std::string& what = "checkpoint") {
  if (b.size() < 4 + 2 + 8 + 4) throw FormatError(what + ": too short");
  std::uint32_t stored;
  std::memcpy(&stored, b.data() + b.size() - 4, 4);
  if (stored != detail::crc_of(b.data(), b.size() - 4)) throw FormatError(what + ": CRC mismatch");
  detail::ByteReader r(b, b.size() - 4, what);
  if (std::memcmp(r.take(4), "VACK", 4) != 0) throw FormatError(what + ": bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  Checkpoint c;
  c.step = r.get<std::uint64_t>();
  c.params = detail::get_tensors(r);
  c.adam_step = r.get<std::uint64_t>();
  c.adam = detail::get_tensors(r);
  if (!r.done()) throw FormatError(what + ": trailing bytes");
  return c;
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  return decode_checkpoint(bytes, path.string());
}

/// Test hook run after the temporary file is complete and before the rename.
using BeforeRename = std::function<void(const std::filesystem::path& tmp)>;

/// Writes `<path>.tmp`, flushes it to disk and renames it over `path`, so a
/// reader sees either no file or a complete one. On failure the temporary
/// file is removed.
inline void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes,
                              const BeforeRename& hook = {}) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  auto fail = [&](const std::string& msg) {
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    throw FormatError(msg + " " + tmp.string() + ": " + std::strerror(errno));
  };
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) fail("cannot create");
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + off, bytes.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      fail("write failed for");
    }
    off += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) {
    ::close(fd);
    fail("fsync failed for");
  }
  if (::close(fd) != 0) fail("close failed for");
  if (hook) hook(tmp);
  if (::rename(tmp.c_str(), path.c_str()) != 0) fail("rename failed for");
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c, const BeforeRename& hook = {}) {
  write_file_atomic(path, encode_checkpoint(c), hook);
}

template <class T>
Tensor<float> to_float(const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, float>) return t;
  else return t.template cast<float>();
}

template <class T>
Tensor<T> from_float(const Tensor<float>& t) {
  if constexpr (std::is_same_v<T, float>) return t;
  else return t.template cast<T>();
}

template <class T>
Checkpoint capture(const ParameterSet<T>& params, const Adam<T>* adam, std::uint64_t step) {
  Checkpoint c;
  c.step = step;
  for (const auto& p : params) c.params.push_back({p.name, to_float(p.value)});
  if (adam) {
    c.adam_step = adam->step_count();
    for (const auto& [name, m] : adam->moments()) {
      c.adam.push_back({name + ":m", to_float(m.first)});
      c.adam.push_back({name + ":v", to_float(m.second)});
    }
  }
  return c;
}

/// Loads every parameter; the checkpoint must name exactly the model's
/// parameters with matching shapes. Adam state is restored when given.
template <class T>
void restore(const Checkpoint& c, ParameterSet<T>& params, Adam<T>* adam = nullptr) {
  if (c.params.size() != params.size()) {
    throw ContractError("checkpoint has " + std::to_string(c.params.size()) + " tensors, model has " + std::to_string(params.size()));
  }
  for (const auto& t : c.params) {
    auto* p = params.find(t.name);
    if (!p) throw ContractError("checkpoint tensor " + t.name + " is not a model parameter");
    if (p->value.shape() != t.value.shape()) {
      throw ShapeError("checkpoint tensor " + t.name + " has shape " + shape_str(t.value.shape()) + ", model expects " +
                       shape_str(p->value.shape()));
    }
  }
  for (const auto& t : c.params) params.at(t.name).value = from_float<T>(t.value);
  if (adam) {
    std::map<std::string, typename Adam<T>::Moments> moments;
    for (const auto& t : c.adam) {
      const auto colon = t.name.rfind(':');
      if (colon == std::string::npos) throw FormatError("checkpoint: malformed optimizer tensor " + t.name);
      const std::string name = t.name.substr(0, colon), kind = t.name.substr(colon + 1);
      if (!params.find(name)) throw ContractError("checkpoint optimizer state for unknown parameter " + name);
      auto& m = moments.try_emplace(name, typename Adam<T>::Moments{Tensor<T>(t.value.shape()), Tensor<T>(t.value.shape())}).first->second;
      if (kind == "m") m.first = from_float<T>(t.value);
      else if (kind == "v") m.second = from_float<T>(t.value);
      else throw FormatError("checkpoint: malformed optimizer tensor " + t.name);
    }
    adam->moments() = std::move(moments);
    adam->set_step_count(c.adam_step);
  }
}

/// Copies only parameters whose names start with one of `prefixes`; every
/// such model parameter must be present in the checkpoint. Returns the
/// number of tensors copied.
template <class T>
std::size_t restore_prefixes(const Checkpoint& c, ParameterSet<T>& params, const std::vector<std::string>& prefixes) {
  auto wanted = [&](const std::string& name) {
    return std::any_of(prefixes.begin(), prefixes.end(), [&](const std::string& p) { return name.rfind(p, 0) == 0; });
  };
  std::size_t copied = 0;
  for (auto& p : params) {
    if (!wanted(p.name)) continue;
    const auto* t = c.find(p.name);
    if (!t) throw ContractError("init checkpoint lacks " + p.name);
    if (t->value.shape() != p.value.shape()) throw ShapeError("init checkpoint tensor " + p.name + " has a different shape");
    p.value = from_float<T>(t->value);
    ++copied;
  }
  return copied;
}

inline std::string checkpoint_filename(std::uint64_t step) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "ckpt-%010llu.vack", static_cast<unsigned long long>(step));
  return buf;
}

/// Step number encoded in a checkpoint file name, or nullopt for anything
/// else (including in-progress ".tmp" files).
inline std::optional<std::uint64_t> checkpoint_step(const std::filesystem::path& p) {
  static const std::regex re(R"(ckpt-(\d+)\.vack)");
  std::smatch m;
  const std::string name = p.filename().string();
  if (!std::regex_match(name, m, re)) return std::nullopt;
  return std::stoull(m[1].str());
}

/// Completed checkpoints in a directory, ascending by step.
inline std::vector<std::pair<std::uint64_t, std::filesystem::path>> list_checkpoints(const std::filesystem::path& dir) {
  std::vector<std::pair<std::uint64_t, std::filesystem::path>> out;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator(dir, ec)) {
    if (auto s = checkpoint_step(e.path())) out.emplace_back(*s, e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace vaffect
