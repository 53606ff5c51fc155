#pragma once

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <utility>

#include "nsgp/error.hpp"

namespace nsgp {

/// fftw_malloc-backed array. All transform buffers come from here so they
/// share the alignment the cached plans were created with.
template <class T>
class FftBuffer {
 public:
  FftBuffer() = default;
  explicit FftBuffer(std::size_t n) : n_(n) {
    data_ = static_cast<T*>(fftw_malloc(sizeof(T) * (n ? n : 1)));
    if (!data_) throw std::bad_alloc();
  }
  FftBuffer(FftBuffer&& o) noexcept : data_(std::exchange(o.data_, nullptr)), n_(std::exchange(o.n_, 0)) {}
  FftBuffer& operator=(FftBuffer&& o) noexcept {
    if (this != &o) {
      release();
      data_ = std::exchange(o.data_, nullptr);
      n_ = std::exchange(o.n_, 0);
    }
    return *this;
  }
  FftBuffer(const FftBuffer&) = delete;
  FftBuffer& operator=(const FftBuffer&) = delete;
  ~FftBuffer() { release(); }

  T* data() noexcept { return data_; }
  const T* data() const noexcept { return data_; }
  std::size_t size() const noexcept { return n_; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

 private:
  void release() {
    if (data_) fftw_free(data_);
    data_ = nullptr;
  }
  T* data_ = nullptr;
  std::size_t n_ = 0;
};

using RealBuffer = FftBuffer<double>;
using ComplexBuffer = FftBuffer<std::complex<double>>;

/// Cached FFTW plans for one m1 x m2 lattice (row-major, last index fastest).
/// Plans use FFTW_ESTIMATE so results are reproducible across processes.
class Fft2d {
 public:
  Fft2d(int m1, int m2) : m1_(m1), m2_(m2) {
    RealBuffer r(size());
    ComplexBuffer c(half_size());
    ComplexBuffer c2(size());
    auto* cr = reinterpret_cast<fftw_complex*>(c.data());
    auto* cc = reinterpret_cast<fftw_complex*>(c2.data());
    forward_ = fftw_plan_dft_r2c_2d(m1, m2, r.data(), cr, FFTW_ESTIMATE);
    backward_ = fftw_plan_dft_c2r_2d(m1, m2, cr, r.data(), FFTW_ESTIMATE);
    complex_backward_ = fftw_plan_dft_2d(m1, m2, cc, cc, FFTW_BACKWARD, FFTW_ESTIMATE);
    if (!forward_ || !backward_ || !complex_backward_) {
      throw numerical_error("fft", "could not create FFTW plan");
    }
  }
  Fft2d(const Fft2d&) = delete;
  Fft2d& operator=(const Fft2d&) = delete;
  ~Fft2d() {
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(backward_);
    fftw_destroy_plan(complex_backward_);
  }

  int m1() const { return m1_; }
  int m2() const { return m2_; }
  std::size_t size() const { return static_cast<std::size_t>(m1_) * m2_; }
  int half_m2() const { return m2_ / 2 + 1; }
  std::size_t half_size() const { return static_cast<std::size_t>(m1_) * half_m2(); }

  /// Unnormalized real-to-half-complex transform.
  void forward(RealBuffer& in, ComplexBuffer& out) const {
    fftw_execute_dft_r2c(forward_, in.data(), reinterpret_cast<fftw_complex*>(out.data()));
  }
  /// Unnormalized half-complex-to-real inverse; destroys `in`.
  void backward(ComplexBuffer& in, RealBuffer& out) const {
    fftw_execute_dft_c2r(backward_, reinterpret_cast<fftw_complex*>(in.data()), out.data());
  }
  /// In-place unnormalized full complex transform with e^{+i}.
  void complex_backward(ComplexBuffer& inout) const {
    auto* p = reinterpret_cast<fftw_complex*>(inout.data());
    fftw_execute_dft(complex_backward_, p, p);
  }

 private:
  int m1_, m2_;
  fftw_plan forward_ = nullptr, backward_ = nullptr, complex_backward_ = nullptr;
};

/// Process-wide plan cache. FFTW's planner is not thread-safe, execution is.
inline std::shared_ptr<const Fft2d> fft_plan(int m1, int m2) {
  static std::mutex mutex;
  static std::map<std::pair<int, int>, std::shared_ptr<const Fft2d>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[{m1, m2}];
  if (!slot) slot = std::make_shared<const Fft2d>(m1, m2);
  return slot;
}

}  // namespace nsgp
