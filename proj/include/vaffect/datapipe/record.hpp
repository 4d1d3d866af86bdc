#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "vaffect/corpus/annotation.hpp"
#include "vaffect/corpus/image.hpp"
#include "vaffect/errors.hpp"

namespace vaffect::datapipe {

inline constexpr std::size_t kImageSide = 96;
inline constexpr std::size_t kImageBytes = kImageSide * kImageSide * 3;
inline constexpr std::uint16_t kRecordVersion = 1;

/// One annotated frame. `id` is "videoName/frameNumber".
struct FrameRecord {
  std::string id;
  std::vector<std::uint8_t> image;  // 96 x 96 x 3, row-major (H, W, C)
  std::int16_t valence = 0;
  std::int16_t arousal = 0;

  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

struct FrameId {
  std::string video;
  long frame = 0;
};

inline FrameId parse_frame_id(std::string_view id) {
  const auto slash = id.find('/');
  if (slash == std::string_view::npos || slash == 0 || id.find('/', slash + 1) != std::string_view::npos) {
    throw FormatError("frame id must be 'video/frame': " + std::string(id));
  }
  FrameId out{std::string(id.substr(0, slash)), 0};
  const auto num = id.substr(slash + 1);
  auto [end, ec] = std::from_chars(num.data(), num.data() + num.size(), out.frame);
  if (ec != std::errc{} || end != num.data() + num.size() || out.frame < 1) {
    throw FormatError("frame number must be a positive integer: " + std::string(id));
  }
  return out;
}

inline void validate(const FrameRecord& r) {
  parse_frame_id(r.id);
  if (r.id.size() > 0xFFFF) throw FormatError("frame id too long: " + r.id.substr(0, 64));
  if (r.image.size() != kImageBytes) {
    throw FormatError(r.id + ": image must be 96x96x3, got " + std::to_string(r.image.size()) + " bytes");
  }
  for (int v : {static_cast<int>(r.valence), static_cast<int>(r.arousal)}) {
    if (v < corpus::kLabelMin || v > corpus::kLabelMax) throw FormatError(r.id + ": label " + std::to_string(v) + " out of range");
  }
}

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  const std::uint8_t* take(std::size_t n) {
    if (buf_.size() - pos_ < n) throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
    const auto* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint16_t u16() {
    const auto* p = take(2);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) | (static_cast<std::uint32_t>(p[2]) << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }
  const std::uint8_t* at(std::size_t pos) const { return buf_.data() + pos; }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

// Encoded size of one record: id length, id, image, two labels, CRC.
inline std::size_t encoded_size(const FrameRecord& r) { return 2 + r.id.size() + kImageBytes + 2 + 2 + 4; }
inline constexpr std::size_t kHeaderBytes = 4 + 2 + 4;

/// Container layout (little-endian): "VASQ", u16 version, u32 count, then
/// per record: u16 id length, id bytes, image bytes, i16 valence,
/// i16 arousal, u32 CRC32 of the preceding bytes of that record.
inline std::vector<std::uint8_t> encode(const std::vector<FrameRecord>& records) {
  if (records.size() > 0xFFFFFFFFu) throw FormatError("too many records for one container");
  std::vector<std::uint8_t> out{'V', 'A', 'S', 'Q'};
  std::size_t total = kHeaderBytes;
  for (const auto& r : records) total += encoded_size(r);
  out.reserve(total);
  detail::put_u16(out, kRecordVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    validate(r);
    const std::size_t start = out.size();
    detail::put_u16(out, static_cast<std::uint16_t>(r.id.size()));
    out.insert(out.end(), r.id.begin(), r.id.end());
    out.insert(out.end(), r.image.begin(), r.image.end());
    detail::put_u16(out, static_cast<std::uint16_t>(r.valence));
    detail::put_u16(out, static_cast<std::uint16_t>(r.arousal));
    detail::put_u32(out, detail::crc32_of(out.data() + start, out.size() - start));
  }
  return out;
}

inline std::vector<FrameRecord> decode(const std::vector<std::uint8_t>& buf, const std::string& what = "record container") {
  detail::Reader rd(buf, what);
  if (std::memcmp(rd.take(4), "VASQ", 4) != 0) throw FormatError(what + ": bad magic");
  const auto version = rd.u16();
  if (version != kRecordVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto count = rd.u32();
  std::vector<FrameRecord> out;
  out.reserve(std::min<std::size_t>(count, buf.size() / (kImageBytes + 10) + 1));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = rd.pos();
    FrameRecord r;
    const auto id_len = rd.u16();
    const auto* id = rd.take(id_len);
    r.id.assign(reinterpret_cast<const char*>(id), id_len);
    const auto* img = rd.take(kImageBytes);
    r.image.assign(img, img + kImageBytes);
    r.valence = static_cast<std::int16_t>(rd.u16());
    r.arousal = static_cast<std::int16_t>(rd.u16());
    const std::size_t end = rd.pos();
    if (rd.u32() != detail::crc32_of(rd.at(start), end - start)) {
      throw FormatError(what + ": CRC mismatch in record " + std::to_string(i + 1) + " (" + r.id + ")");
    }
    validate(r);
    out.push_back(std::move(r));
  }
  if (!rd.done()) throw FormatError(what + ": trailing bytes after " + std::to_string(count) + " records");
  return out;
}

inline void write_container(const std::filesystem::path& path, const std::vector<FrameRecord>& records) {
  const auto bytes = encode(records);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

inline std::vector<FrameRecord> read_container(const std::filesystem::path& path) {
  return decode(detail::read_all(path), path.string());
}

/// Builds one video's records from a merged annotation and a directory of
/// frames named <frameNumber>.ppm (96x96 RGB). Records follow ascending
/// frame order.
inline std::vector<FrameRecord> build_records(const std::string& video, const std::vector<corpus::MergedRow>& rows,
                                              const std::filesystem::path& frames_dir) {
  std::vector<corpus::MergedRow> sorted = rows;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.frame < b.frame; });
  std::vector<FrameRecord> out;
  out.reserve(sorted.size());
  for (const auto& row : sorted) {
    FrameRecord r;
    r.id = video + "/" + std::to_string(row.frame);
    const auto path = frames_dir / (std::to_string(row.frame) + ".ppm");
    if (!std::filesystem::exists(path)) throw FormatError("missing frame image for " + r.id + " (" + path.string() + ")");
    Image img = read_ppm(path);
    if (img.width != kImageSide || img.height != kImageSide) {
      throw FormatError(r.id + ": frame must be 96x96, got " + std::to_string(img.width) + "x" + std::to_string(img.height));
    }
    r.image = std::move(img.pixels);
    if (row.valence < corpus::kLabelMin || row.valence > corpus::kLabelMax || row.arousal < corpus::kLabelMin ||
        row.arousal > corpus::kLabelMax) {
      throw FormatError(r.id + ": label out of range");
    }
    r.valence = static_cast<std::int16_t>(row.valence);
    r.arousal = static_cast<std::int16_t>(row.arousal);
    out.push_back(std::move(r));
  }
  return out;
}

inline float scale_pixel(std::uint8_t p) { return (static_cast<float>(p) - 128.0f) / 128.0f; }
inline float scale_label(int v) { return static_cast<float>(v) / 1000.0f; }

inline std::uint8_t unscale_pixel(float x) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(x * 128.0f + 128.0f), 0L, 255L));
}
inline int unscale_label(float x) { return static_cast<int>(std::lround(x * 1000.0f)); }

struct ScaledFrame {
  std::string id;
  std::vector<float> image;  // 96 x 96 x 3 in [-1, 1)
  std::array<float, 2> label{};
};

inline ScaledFrame parse_and_scale(const FrameRecord& r) {
  validate(r);
  ScaledFrame s;
  s.id = r.id;
  s.image.resize(r.image.size());
  for (std::size_t i = 0; i < r.image.size(); ++i) s.image[i] = scale_pixel(r.image[i]);
  s.label = {scale_label(r.valence), scale_label(r.arousal)};
  return s;
}

}  // namespace vaffect::datapipe
