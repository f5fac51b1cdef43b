#pragma once

// RIFF/WAVE reader and writer: mono, 16-bit PCM or 32-bit IEEE float.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mosguard/error.hpp"
#include "mosguard/signal.hpp"

namespace mosguard {

namespace wav_detail {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline void put_tag(std::vector<unsigned char>& out, const char* tag) {
  out.insert(out.end(), tag, tag + 4);
}

}  // namespace wav_detail

inline Waveform decode_wav(const std::vector<unsigned char>& bytes, const std::string& name = "<memory>") {
  using namespace wav_detail;
  auto fail = [&](const std::string& msg) { return format_error(name + ": " + msg); };
  if (bytes.size() < 12) throw fail("RIFF header: file too short");
  if (std::memcmp(bytes.data(), "RIFF", 4) != 0) throw fail("RIFF header: missing 'RIFF' tag");
  if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) throw fail("RIFF header: form type is not 'WAVE'");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::string tag(reinterpret_cast<const char*>(hdr), 4);
    const std::size_t size = read_u32(hdr + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = bytes.size() - body;
    if (tag == "fmt ") {
      if (size < 16 || size > avail) throw fail("'fmt ' chunk: truncated (size " + std::to_string(size) + ")");
      const unsigned char* f = bytes.data() + body;
      format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      bits = read_u16(f + 14);
      if (format == kFormatExtensible) {
        if (size < 26) throw fail("'fmt ' chunk: extensible header too short");
        format = read_u16(f + 24);
      }
      have_fmt = true;
    } else if (tag == "data") {
      data = bytes.data() + body;
      data_size = std::min(size, avail);
      break;
    }
    pos = body + size + (size & 1);
  }

  if (!have_fmt) throw fail("missing 'fmt ' chunk");
  if (channels != 1) {
    throw channel_count_error(name + ": 'fmt ' field num_channels = " + std::to_string(channels) +
                              ", only mono is supported");
  }
  if (rate == 0) throw fail("'fmt ' field sample_rate is zero");
  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool f32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !f32) {
    throw fail("'fmt ' fields audio_format = " + std::to_string(format) + ", bits_per_sample = " +
               std::to_string(bits) + ": need 16-bit PCM or 32-bit float");
  }
  if (data == nullptr) throw fail("missing 'data' chunk");
  const std::size_t width = pcm16 ? 2 : 4;
  const std::size_t count = data_size / width;
  if (count == 0) throw empty_signal_error(name + ": 'data' chunk holds no samples");

  std::vector<double> samples(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* p = data + i * width;
    if (pcm16) {
      samples[i] = static_cast<double>(static_cast<std::int16_t>(read_u16(p))) / 32768.0;
    } else {
      samples[i] = static_cast<double>(std::bit_cast<float>(read_u32(p)));
    }
  }
  for (double s : samples) {
    if (!std::isfinite(s)) throw fail("'data' chunk: non-finite float sample");
  }
  return Waveform(std::move(samples), static_cast<int>(rate));
}

inline Waveform load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path.string());
}

/// 16-bit PCM encoding; samples are clamped to [-1, 1 - 1/32768] here only.
inline std::vector<unsigned char> encode_wav(const Waveform& x) {
  using namespace wav_detail;
  const auto n = static_cast<std::uint32_t>(x.size());
  std::vector<unsigned char> out;
  out.reserve(44 + 2 * static_cast<std::size_t>(n));
  put_tag(out, "RIFF");
  put_u32(out, 36 + 2 * n);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, kFormatPcm);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(x.sample_rate_hz()));
  put_u32(out, static_cast<std::uint32_t>(x.sample_rate_hz()) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  put_tag(out, "data");
  put_u32(out, 2 * n);
  for (double s : x.samples()) {
    const double code = std::clamp(std::nearbyint(s * 32768.0), -32768.0, 32767.0);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(code)));
  }
  return out;
}

inline void save_wav(const Waveform& x, const std::filesystem::path& path) {
  const auto bytes = encode_wav(x);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("write failed for " + path.string());
}

}  // namespace mosguard
