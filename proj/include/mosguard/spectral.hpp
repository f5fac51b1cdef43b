#pragma once

// Short-time Fourier transform, on plain waveforms and on the tape, and the
// L1 spectral distance used as the similarity term of the attack.

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdio>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mosguard/autodiff.hpp"
#include "mosguard/error.hpp"
#include "mosguard/fft.hpp"
#include "mosguard/signal.hpp"

namespace mosguard {

/// Frame k covers samples [k * hop, k * hop + window_length); no centre
/// padding, and a trailing partial frame is dropped. Frames shorter than
/// n_fft are zero-padded at the end.
struct StftConfig {
  std::size_t n_fft = 512;
  std::size_t window_length = 512;
  std::size_t hop = 128;

  void validate() const {
    if (n_fft < 2 || window_length < 1 || window_length > n_fft || hop < 1) {
      throw domain_error("invalid STFT config: n_fft=" + std::to_string(n_fft) +
                         " window_length=" + std::to_string(window_length) + " hop=" + std::to_string(hop));
    }
  }

  std::size_t bins() const { return n_fft / 2 + 1; }

  std::size_t frame_count(std::size_t samples) const {
    if (samples < window_length) {
      throw length_error("signal of " + std::to_string(samples) + " samples is shorter than one " +
                         std::to_string(window_length) + "-sample window");
    }
    return (samples - window_length) / hop + 1;
  }

  /// Periodic Hann window: w[n] = 0.5 - 0.5 cos(2 pi n / N).
  std::vector<double> window() const {
    std::vector<double> w(window_length);
    const double n = static_cast<double>(window_length);
    for (std::size_t i = 0; i < window_length; ++i) {
      w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / n);
    }
    return w;
  }

  friend bool operator==(const StftConfig&, const StftConfig&) = default;
};

/// Complex one-sided STFT, frames x bins.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> values;

  std::complex<double> at(std::size_t frame, std::size_t bin) const { return values[frame * bins + bin]; }

  std::vector<double> magnitudes() const {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = std::abs(values[i]);
    return out;
  }
};

namespace detail {

/// Interleaved (re, im) STFT values of length frames * bins * 2.
inline std::vector<double> stft_interleaved(std::span<const double> x, const StftConfig& cfg) {
  cfg.validate();
  const std::size_t frames = cfg.frame_count(x.size());
  const std::size_t bins = cfg.bins();
  const auto window = cfg.window();
  RealFft fft(cfg.n_fft);
  std::vector<double> frame(cfg.n_fft, 0.0);
  std::vector<double> out(frames * bins * 2);
  auto* spec = reinterpret_cast<std::complex<double>*>(out.data());
  for (std::size_t f = 0; f < frames; ++f) {
    const double* src = x.data() + f * cfg.hop;
    for (std::size_t n = 0; n < cfg.window_length; ++n) frame[n] = src[n] * window[n];
    fft.forward(frame, std::span<std::complex<double>>(spec + f * bins, bins));
  }
  return out;
}

}  // namespace detail

inline Spectrogram stft(const Waveform& x, const StftConfig& cfg = {}) {
  const auto raw = detail::stft_interleaved(x.samples(), cfg);
  Spectrogram s;
  s.bins = cfg.bins();
  s.frames = raw.size() / (2 * s.bins);
  s.values.resize(s.frames * s.bins);
  for (std::size_t i = 0; i < s.values.size(); ++i) s.values[i] = {raw[2 * i], raw[2 * i + 1]};
  return s;
}

namespace ad {

/// Differentiable STFT of a 1-D signal [T] -> [frames, bins, 2].
inline Var stft(const Var& signal, const StftConfig& cfg = {}) {
  if (signal.value().rank() != 1) throw dimension_error("stft: expected a 1-D signal, got " + shape_string(signal.shape()));
  auto raw = mosguard::detail::stft_interleaved(signal.value().data(), cfg);
  const std::size_t bins = cfg.bins();
  const std::size_t frames = raw.size() / (2 * bins);
  Tensor out(Shape{frames, bins, 2}, std::move(raw));
  return signal.tape()->record(std::move(out), {signal}, [cfg, frames, bins](const Tensor&, const Tensor& g, GradRefs gr) {
    const auto window = cfg.window();
    RealFft fft(cfg.n_fft);
    std::vector<double> buf(cfg.n_fft);
    const auto* gspec = reinterpret_cast<const std::complex<double>*>(g.data().data());
    for (std::size_t f = 0; f < frames; ++f) {
      fft.adjoint(std::span<const std::complex<double>>(gspec + f * bins, bins), buf);
      double* dst = gr[0]->data().data() + f * cfg.hop;
      for (std::size_t n = 0; n < cfg.window_length; ++n) dst[n] += window[n] * buf[n];
    }
  });
}

/// Sum of complex moduli of the difference of two [frames, bins, 2] spectra.
inline Var spectral_l1(const Var& spec_a, const Var& spec_b) { return sum(complex_modulus(sub(spec_a, spec_b))); }

}  // namespace ad

/// || STFT(x_tilde) - STFT(x) ||_1 over complex entries.
inline double spectral_l1(const Waveform& x_tilde, const Waveform& x, const StftConfig& cfg = {}) {
  if (x_tilde.size() != x.size()) {
    throw dimension_error("spectral_l1: lengths differ (" + std::to_string(x_tilde.size()) + " vs " +
                          std::to_string(x.size()) + ")");
  }
  const auto a = detail::stft_interleaved(x_tilde.samples(), cfg);
  const auto b = detail::stft_interleaved(x.samples(), cfg);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); i += 2) acc += std::hypot(a[i] - b[i], a[i + 1] - b[i + 1]);
  return acc;
}

/// Magnitude matrix as CSV: one row per frame, one column per bin, 6 significant digits.
inline std::string magnitude_csv(const Spectrogram& s) {
  std::string out;
  out.reserve(s.frames * s.bins * 12);
  char buf[32];
  for (std::size_t f = 0; f < s.frames; ++f) {
    for (std::size_t k = 0; k < s.bins; ++k) {
      std::snprintf(buf, sizeof buf, "%.6g", std::abs(s.at(f, k)));
      if (k) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace mosguard
