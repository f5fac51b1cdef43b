#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mosguard/rng.hpp"
#include "mosguard/signal.hpp"
#include "mosguard/tensor.hpp"

namespace testing_support {

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mosguard_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::vector<double> random_samples(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  mosguard::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& s : v) s = scale * rng.uniform(-1.0, 1.0);
  return v;
}

inline mosguard::Waveform random_clip(std::size_t n, std::uint64_t seed) {
  return mosguard::peak_normalize(mosguard::Waveform(random_samples(n, seed), 16000));
}

inline mosguard::Tensor random_tensor(mosguard::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  mosguard::Rng rng(seed);
  mosguard::Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// max_i |a_i - b_i| / max(max_i |b_i|, floor)
inline double rel_error(const mosguard::Tensor& a, const mosguard::Tensor& b, double floor = 1e-7) {
  double diff = 0.0, ref = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    ref = std::max(ref, std::abs(b[i]));
  }
  return diff / ref;
}

/// Byte-level WAV writer independent of the library encoder.
inline std::vector<unsigned char> wav_bytes(std::uint16_t format, std::uint16_t channels, std::uint32_t rate,
                                            std::uint16_t bits, const std::vector<unsigned char>& payload,
                                            bool with_data = true) {
  std::vector<unsigned char> b;
  auto tag = [&](const char* t) { b.insert(b.end(), t, t + 4); };
  auto u16 = [&](std::uint16_t v) { b.push_back(v & 0xFF); b.push_back(v >> 8); };
  auto u32 = [&](std::uint32_t v) { for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xFF); };
  tag("RIFF");
  u32(static_cast<std::uint32_t>(36 + payload.size()));
  tag("WAVE");
  tag("fmt ");
  u32(16);
  u16(format);
  u16(channels);
  u32(rate);
  u32(rate * channels * bits / 8);
  u16(static_cast<std::uint16_t>(channels * bits / 8));
  u16(bits);
  if (with_data) {
    tag("data");
    u32(static_cast<std::uint32_t>(payload.size()));
    b.insert(b.end(), payload.begin(), payload.end());
  }
  return b;
}

inline std::vector<unsigned char> pcm16_payload(const std::vector<std::int16_t>& codes) {
  std::vector<unsigned char> p;
  for (auto c : codes) {
    const auto u = static_cast<std::uint16_t>(c);
    p.push_back(u & 0xFF);
    p.push_back(u >> 8);
  }
  return p;
}

}  // namespace testing_support
