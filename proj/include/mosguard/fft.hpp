#pragma once

// Real-input FFT of a fixed length, backed by FFTW,
// plus its adjoint (the vector-Jacobian product of the one-sided transform).

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "mosguard/error.hpp"

namespace mosguard {

class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n), plans_(plans_for(n)) {}

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  /// out[k] = sum_n in[n] exp(-2 pi i k n / N), k = 0..N/2.
  void forward(std::span<const double> in, std::span<std::complex<double>> out) const {
    if (in.size() != n_ || out.size() != bins()) throw dimension_error("RealFft::forward: buffer size mismatch");
    real_.assign(in.begin(), in.end());
    fftw_execute_dft_r2c(plans_->r2c, real_.data(), reinterpret_cast<fftw_complex*>(out.data()));
  }

  /// Adjoint of forward() viewed as a map R^N -> R^(2 (N/2+1)):
  /// out[n] = Re( sum_{k=0}^{N/2} g[k] exp(+2 pi i k n / N) ).
  void adjoint(std::span<const std::complex<double>> g, std::span<double> out) const {
    if (g.size() != bins() || out.size() != n_) throw dimension_error("RealFft::adjoint: buffer size mismatch");
    // The c2r transform implies Hermitian symmetry and doubles the interior
    // bins, so those are halved; the DC and (even-N) Nyquist bins enter once.
    spec_.assign(g.begin(), g.end());
    const std::size_t last = (n_ % 2 == 0) ? bins() - 1 : bins();
    for (std::size_t k = 1; k < last; ++k) spec_[k] *= 0.5;
    fftw_execute_dft_c2r(plans_->c2r, reinterpret_cast<fftw_complex*>(spec_.data()), out.data());
  }

 private:
  struct Plans {
    fftw_plan r2c = nullptr;
    fftw_plan c2r = nullptr;
    ~Plans() {
      std::lock_guard lock(planner_mutex());
      if (r2c) fftw_destroy_plan(r2c);
      if (c2r) fftw_destroy_plan(c2r);
    }
  };

  // FFTW's planner is not thread-safe; execution of an existing plan on new
  // arrays is.
  static std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
  }

  static std::shared_ptr<const Plans> plans_for(std::size_t n) {
    if (n < 2) throw domain_error("FFT length must be at least 2");
    std::mutex& mtx = planner_mutex();  // constructed first, so it outlives the cache
    static std::map<std::size_t, std::shared_ptr<const Plans>> cache;
    std::lock_guard lock(mtx);
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    std::vector<double> real(n);
    std::vector<std::complex<double>> spec(n / 2 + 1);
    auto plans = std::make_shared<Plans>();
    const int len = static_cast<int>(n);
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    plans->r2c = fftw_plan_dft_r2c_1d(len, real.data(), reinterpret_cast<fftw_complex*>(spec.data()), flags);
    plans->c2r = fftw_plan_dft_c2r_1d(len, reinterpret_cast<fftw_complex*>(spec.data()), real.data(), flags);
    if (!plans->r2c || !plans->c2r) throw numeric_error("FFTW planning failed for length " + std::to_string(n));
    cache.emplace(n, plans);
    return plans;
  }

  std::size_t n_;
  std::shared_ptr<const Plans> plans_;
  mutable std::vector<double> real_;
  mutable std::vector<std::complex<double>> spec_;
};

}  // namespace mosguard
