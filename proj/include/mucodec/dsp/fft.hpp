#pragma once

#include <fftw3.h>

#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <vector>

namespace mucodec::dsp {

/// Real-input FFT of a fixed size backed by FFTW. Plans are created once per
/// size under a lock; execution uses the new-array interface and is safe to
/// call concurrently.
class RealFft {
 public:
  static const RealFft& get(std::size_t n) {
    static std::mutex mu;
    static std::map<std::size_t, std::unique_ptr<RealFft>> cache;
    std::lock_guard lock(mu);
    auto& slot = cache[n];
    if (!slot) slot.reset(new RealFft(n));
    return *slot;
  }

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  /// Forward transform of `in` (length n) into bins() complex values.
  void forward(std::span<const double> in, std::span<std::complex<double>> out) const {
    if (in.size() != n_ || out.size() != bins()) throw std::invalid_argument("fft: size mismatch");
    std::vector<double> buf(in.begin(), in.end());
    fftw_execute_dft_r2c(fwd_, buf.data(), reinterpret_cast<fftw_complex*>(out.data()));
  }

  /// Unnormalized inverse: forward followed by inverse scales by n.
  void inverse(std::span<const std::complex<double>> in, std::span<double> out) const {
    if (out.size() != n_ || in.size() != bins()) throw std::invalid_argument("fft: size mismatch");
    std::vector<std::complex<double>> buf(in.begin(), in.end());  // c2r destroys its input
    fftw_execute_dft_c2r(inv_, reinterpret_cast<fftw_complex*>(buf.data()), out.data());
  }

  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() {
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
  }

 private:
  explicit RealFft(std::size_t n) : n_(n) {
    if (n < 2) throw std::invalid_argument("fft: size must be >= 2");
    std::vector<double> r(n);
    std::vector<std::complex<double>> c(n / 2 + 1);
    auto* cp = reinterpret_cast<fftw_complex*>(c.data());
    fwd_ = fftw_plan_dft_r2c_1d(int(n), r.data(), cp, FFTW_ESTIMATE | FFTW_UNALIGNED);
    inv_ = fftw_plan_dft_c2r_1d(int(n), cp, r.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
  }

  std::size_t n_;
  fftw_plan fwd_ = nullptr;
  fftw_plan inv_ = nullptr;
};

}  // namespace mucodec::dsp
