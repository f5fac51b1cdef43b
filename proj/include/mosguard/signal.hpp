#pragma once

// Waveforms, bounded perturbations, and the peak-relative dB distortion.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mosguard/error.hpp"

namespace mosguard {

namespace detail {

inline void require_finite(std::span<const double> v, const char* what) {
  for (double s : v) {
    if (!std::isfinite(s)) throw domain_error(std::string(what) + ": non-finite value");
  }
}

// tanh kept a fixed margin inside (-1, 1) so the dB bound stays strict
// after the logarithm.
inline double strict_tanh(double z) {
  constexpr double kBelowOne = 1.0 - 0x1.0p-40;
  return std::clamp(std::tanh(z), -kBelowOne, kBelowOne);
}

inline double peak_abs(std::span<const double> v) {
  double m = 0.0;
  for (double s : v) m = std::max(m, std::abs(s));
  return m;
}

}  // namespace detail

/// Mono sample sequence at a fixed rate. Immutable once constructed.
class Waveform {
 public:
  Waveform(std::vector<double> samples, int sample_rate_hz)
      : samples_(std::move(samples)), sample_rate_hz_(sample_rate_hz) {
    if (samples_.empty()) throw empty_signal_error("waveform has no samples");
    if (sample_rate_hz_ <= 0) throw domain_error("sample rate must be positive");
    detail::require_finite(samples_, "waveform");
  }

  std::span<const double> samples() const { return samples_; }
  std::size_t size() const { return samples_.size(); }
  int sample_rate_hz() const { return sample_rate_hz_; }
  double operator[](std::size_t i) const { return samples_[i]; }
  double peak() const { return detail::peak_abs(samples_); }

  friend bool operator==(const Waveform&, const Waveform&) = default;

 private:
  std::vector<double> samples_;
  int sample_rate_hz_;
};

/// Latent z with amplitude A; materializes to delta = A * tanh(z).
struct Perturbation {
  std::vector<double> latent;
  double amplitude = 0.03;
};

inline Waveform peak_normalize(const Waveform& x) {
  const double peak = x.peak();
  if (peak == 0.0) throw empty_signal_error("cannot normalize an all-zero signal");
  std::vector<double> out(x.samples().begin(), x.samples().end());
  for (double& s : out) s /= peak;
  return Waveform(std::move(out), x.sample_rate_hz());
}

/// 20 log10(max|delta| / max|x|). Returns -infinity for an all-zero delta.
inline double db_distortion(const Waveform& x, std::span<const double> delta) {
  if (delta.size() != x.size()) {
    throw dimension_error("db_distortion: perturbation length " + std::to_string(delta.size()) +
                          " != signal length " + std::to_string(x.size()));
  }
  const double px = x.peak();
  if (px == 0.0) throw empty_signal_error("db_distortion: all-zero reference signal");
  const double pd = detail::peak_abs(delta);
  if (pd == 0.0) return -std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(pd / px);
}

inline std::vector<double> materialize(const Perturbation& p) {
  if (!(p.amplitude > 0.0) || !std::isfinite(p.amplitude)) {
    throw domain_error("perturbation amplitude must be positive and finite");
  }
  detail::require_finite(p.latent, "perturbation latent");
  std::vector<double> delta(p.latent.size());
  for (std::size_t t = 0; t < delta.size(); ++t) delta[t] = p.amplitude * detail::strict_tanh(p.latent[t]);
  return delta;
}

/// x + delta, unclamped.
inline Waveform apply(const Waveform& x, std::span<const double> delta) {
  if (delta.size() != x.size()) {
    throw dimension_error("apply: perturbation length " + std::to_string(delta.size()) +
                          " != signal length " + std::to_string(x.size()));
  }
  std::vector<double> out(x.size());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = x[t] + delta[t];
  return Waveform(std::move(out), x.sample_rate_hz());
}

inline double rms(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double acc = 0.0;
  for (double s : v) acc += s * s;
  return std::sqrt(acc / static_cast<double>(v.size()));
}

}  // namespace mosguard
