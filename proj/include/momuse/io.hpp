// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// On-disk formats. All multi-byte fields are little-endian regardless of
// host byte order, so identical content gives identical bytes everywhere.
//
// Checkpoint ("MOMU"):
//   magic[4] | version u32 | count u32 |
//   count x { name_len u32 | name utf-8 | ndim u32 | dims u64[ndim] | f32[prod(dims)] }
//
// Feature file ("MOMV"):
//   magic[4] | version u32 | F_v u32 | L_frames u32 | fps f32 | f32[F_v * L_frames]
//   data is frame-major: all F_v values of frame 0, then frame 1, ...

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "momuse/error.hpp"
#include "momuse/numerics.hpp"

namespace momuse {

namespace io_detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError(what_ + ": truncated file");
  }
  template <typename U>
  U le() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write to '" + path + "' failed");
}

}  // namespace io_detail

// ---------------------------------------------------------------------------
// WAV
// ---------------------------------------------------------------------------

struct WavData {
  std::vector<float> samples;
  std::uint32_t sample_rate = 16000;
};

/// Mono PCM16 or IEEE float32 (WAVE_FORMAT_EXTENSIBLE accepted with either
/// subformat). PCM16 maps to [-1, 1) by /32768.
inline WavData wav_decode(std::span<const std::uint8_t> bytes, const std::string& what = "wav") {
  io_detail::ByteReader r(bytes, what);
  if (r.str(4) != "RIFF") throw FormatError(what + ": not a RIFF file");
  r.le<std::uint32_t>();
  if (r.str(4) != "WAVE") throw FormatError(what + ": not a WAVE file");
  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  WavData out;
  while (true) {
    const std::string id = r.str(4);
    const auto size = r.le<std::uint32_t>();
    if (id == "fmt ") {
      if (size < 16) throw FormatError(what + ": short fmt chunk");
      format = r.le<std::uint16_t>();
      channels = r.le<std::uint16_t>();
      out.sample_rate = r.le<std::uint32_t>();
      r.le<std::uint32_t>();  // byte rate
      r.le<std::uint16_t>();  // block align
      bits = r.le<std::uint16_t>();
      std::size_t rest = size - 16;
      if (format == 0xFFFE && rest >= 10) {
        r.le<std::uint16_t>();  // cbSize
        r.le<std::uint16_t>();  // valid bits
        r.le<std::uint32_t>();  // channel mask
        format = r.le<std::uint16_t>();  // first two bytes of the subformat GUID
        rest -= 10;
      }
      r.skip(rest + (size & 1));
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError(what + ": data chunk before fmt chunk");
      if (channels != 1) {
        throw FormatError(what + ": unsupported format: " + std::to_string(channels) + " channels (mono only)");
      }
      if (format == 1 && bits == 16) {
        r.need(size);
        out.samples.resize(size / 2);
        for (auto& s : out.samples) s = static_cast<float>(static_cast<std::int16_t>(r.le<std::uint16_t>())) / 32768.0f;
      } else if (format == 3 && bits == 32) {
        r.need(size);
        out.samples.resize(size / 4);
        for (auto& s : out.samples) s = r.f32();
      } else {
        throw FormatError(what + ": unsupported format (code " + std::to_string(format) + ", " +
                          std::to_string(bits) + " bits); expected PCM16 or float32");
      }
      return out;
    } else {
      r.skip(size + (size & 1));
    }
  }
}

/// Float32 mono WAV bytes.
inline std::vector<std::uint8_t> wav_encode(std::span<const float> samples, std::uint32_t sample_rate) {
  io_detail::ByteWriter w;
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 4);
  w.raw("RIFF", 4);
  w.le<std::uint32_t>(36 + data_bytes);
  w.raw("WAVEfmt ", 8);
  w.le<std::uint32_t>(16);
  w.le<std::uint16_t>(3);
  w.le<std::uint16_t>(1);
  w.le<std::uint32_t>(sample_rate);
  w.le<std::uint32_t>(sample_rate * 4);
  w.le<std::uint16_t>(4);
  w.le<std::uint16_t>(32);
  w.raw("data", 4);
  w.le<std::uint32_t>(data_bytes);
  for (float s : samples) w.f32(s);
  return std::move(w.bytes());
}

inline WavData wav_read(const std::string& path) { return wav_decode(io_detail::read_file(path), path); }

inline void wav_write(const std::string& path, std::span<const float> samples, std::uint32_t sample_rate) {
  io_detail::write_file(path, wav_encode(samples, sample_rate));
}

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kFeatureVersion = 1;

struct FeatureFile {
  Tensor<float> frames;  // [F_v x L_frames]
  float fps = 25.0f;
};

inline std::vector<std::uint8_t> features_encode(const FeatureFile& f) {
  if (f.frames.ndim() != 2) throw DimensionError("features: frames must be [F_v x L_frames]");
  io_detail::ByteWriter w;
  w.raw("MOMV", 4);
  w.le<std::uint32_t>(kFeatureVersion);
  const auto fv = static_cast<std::uint32_t>(f.frames.rows());
  const auto len = static_cast<std::uint32_t>(f.frames.cols());
  w.le<std::uint32_t>(fv);
  w.le<std::uint32_t>(len);
  w.f32(f.fps);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t d = 0; d < fv; ++d) w.f32(f.frames(d, t));
  return std::move(w.bytes());
}

inline FeatureFile features_decode(std::span<const std::uint8_t> bytes, const std::string& what = "features") {
  io_detail::ByteReader r(bytes, what);
  if (r.str(4) != "MOMV") throw FormatError(what + ": bad magic (expected MOMV)");
  const auto version = r.le<std::uint32_t>();
  if (version != kFeatureVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto fv = r.le<std::uint32_t>();
  const auto len = r.le<std::uint32_t>();
  FeatureFile f;
  f.fps = r.f32();
  r.need(static_cast<std::size_t>(fv) * len * 4);
  f.frames = Tensor<float>(fv, len);
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t d = 0; d < fv; ++d) f.frames(d, t) = r.f32();
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after feature data");
  return f;
}

inline FeatureFile features_read(const std::string& path) {
  return features_decode(io_detail::read_file(path), path);
}

inline void features_write(const std::string& path, const FeatureFile& f) {
  io_detail::write_file(path, features_encode(f));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

/// Ordered list of uniquely named tensors.
class Checkpoint {
 public:
  void add(std::string name, Tensor<float> t) {
    if (find(name)) throw FormatError("checkpoint: duplicate tensor name '" + name + "'");
    entries_.push_back({std::move(name), std::move(t)});
  }
  const NamedTensor* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<NamedTensor> entries_;
};

inline std::vector<std::uint8_t> checkpoint_encode(const Checkpoint& c) {
  io_detail::ByteWriter w;
  w.raw("MOMU", 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.size()));
  for (const auto& e : c.entries()) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.raw(e.name.data(), e.name.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(e.tensor.ndim()));
    for (std::size_t d : e.tensor.shape()) w.le<std::uint64_t>(d);
    for (float v : e.tensor.values()) w.f32(v);
  }
  return std::move(w.bytes());
}

inline Checkpoint checkpoint_decode(std::span<const std::uint8_t> bytes, const std::string& what = "checkpoint") {
  io_detail::ByteReader r(bytes, what);
  if (r.str(4) != "MOMU") throw FormatError(what + ": bad magic (expected MOMU)");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto count = r.le<std::uint32_t>();
  Checkpoint c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint32_t>();
    std::string name = r.str(name_len);
    const auto ndim = r.le<std::uint32_t>();
    std::vector<std::size_t> shape(ndim);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.le<std::uint64_t>());
      n *= d;
    }
    r.need(n * 4);
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    c.add(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after last tensor");
  return c;
}

inline Checkpoint checkpoint_read(const std::string& path) {
  return checkpoint_decode(io_detail::read_file(path), path);
}

inline void checkpoint_write(const std::string& path, const Checkpoint& c) {
  io_detail::write_file(path, checkpoint_encode(c));
}

// ---------------------------------------------------------------------------
// key=value configuration
// ---------------------------------------------------------------------------

/// Parses `key = value` lines; '#' starts a comment. Keys outside `known`
/// are rejected, as are duplicates.
inline std::map<std::string, std::string> parse_key_values(std::istream& in, const std::set<std::string>& known,
                                                           const std::string& what = "config") {
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(what + ":" + std::to_string(lineno) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (!known.contains(key)) throw FormatError(what + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (!out.emplace(key, value).second) {
      throw FormatError(what + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }
  return out;
}

}  // namespace momuse
