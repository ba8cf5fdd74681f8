#pragma once

#include <map>
#include <mutex>
#include <tuple>

#include <fftw3.h>

#include "qpinqi/tensor.hpp"

namespace qpinqi {

namespace fftdetail {

/// Scratch arrays allocated through fftw_malloc so plans built on them can
/// use the SIMD codelets; one pair per thread.
struct AlignedBuffer {
  fftw_complex* ptr = nullptr;
  std::size_t capacity = 0;
  ~AlignedBuffer() {
    if (ptr) fftw_free(ptr);
  }
  fftw_complex* get(std::size_t n) {
    if (n > capacity) {
      if (ptr) fftw_free(ptr);
      ptr = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
      capacity = n;
    }
    return ptr;
  }
};

inline fftw_plan get_plan(int nx, int ny, int sign) {
  static std::mutex mtx;
  static std::map<std::tuple<int, int, int>, fftw_plan> cache;
  std::lock_guard<std::mutex> lock(mtx);
  auto key = std::make_tuple(nx, ny, sign);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  // Planned once on fftw_malloc'd scratch (same alignment class as the
  // per-thread buffers), executed later via fftw_execute_dft. FFTW_ESTIMATE
  // keeps plan selection deterministic across runs.
  AlignedBuffer scratch_in, scratch_out;
  const std::size_t n = static_cast<std::size_t>(nx) * ny;
  fftw_plan plan = fftw_plan_dft_2d(nx, ny, scratch_in.get(n), scratch_out.get(n),
                                    sign, FFTW_ESTIMATE);
  cache.emplace(key, plan);
  return plan;
}

/// Batched 1D transforms along the last axis (one per row).
inline fftw_plan get_plan_rows(int nx, int ny, int sign) {
  static std::mutex mtx;
  static std::map<std::tuple<int, int, int>, fftw_plan> cache;
  std::lock_guard<std::mutex> lock(mtx);
  auto key = std::make_tuple(nx, ny, sign);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  AlignedBuffer scratch_in, scratch_out;
  const std::size_t n = static_cast<std::size_t>(nx) * ny;
  int dims[1] = {ny};
  fftw_plan plan = fftw_plan_many_dft(1, dims, nx, scratch_in.get(n), nullptr, 1, ny,
                                      scratch_out.get(n), nullptr, 1, ny, sign,
                                      FFTW_ESTIMATE);
  cache.emplace(key, plan);
  return plan;
}

}  // namespace fftdetail

/// Unitary, centered 2D FFT: the DC sample sits at (nx/2, ny/2) in both image
/// and k-space, and F^H = F^{-1}. Grid extents must be even so the half-grid
/// shift is exact.
inline void fft2_centered(const cplx* in, cplx* out, std::size_t nx, std::size_t ny,
                          bool forward) {
  if (nx % 2 != 0 || ny % 2 != 0)
    throw ShapeError("fft2_centered requires even grid extents");
  thread_local fftdetail::AlignedBuffer tls_in, tls_out;
  const std::size_t n = nx * ny;
  cplx* buf_in = reinterpret_cast<cplx*>(tls_in.get(n));
  cplx* buf_out = reinterpret_cast<cplx*>(tls_out.get(n));
  const std::size_t hx = nx / 2, hy = ny / 2;
  for (std::size_t x = 0; x < nx; ++x) {
    const std::size_t xs = (x + hx) % nx;
    const cplx* src = in + xs * ny;
    cplx* dst = buf_in + x * ny;
    for (std::size_t y = 0; y < ny; ++y) dst[y] = src[(y + hy) % ny];
  }
  fftw_plan plan = fftdetail::get_plan(static_cast<int>(nx), static_cast<int>(ny),
                                       forward ? FFTW_FORWARD : FFTW_BACKWARD);
  fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(buf_in),
                   reinterpret_cast<fftw_complex*>(buf_out));
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (std::size_t x = 0; x < nx; ++x) {
    const std::size_t xs = (x + hx) % nx;
    const cplx* src = buf_out + xs * ny;
    cplx* dst = out + x * ny;
    for (std::size_t y = 0; y < ny; ++y) dst[y] = scale * src[(y + hy) % ny];
  }
}

/// Unitary centered 1D FFT along the second axis of an [nx, ny] block, one
/// transform per row. Composing this with the x-direction transform gives
/// fft2_centered exactly (the centered shifts factor per axis).
inline void fft1_rows_centered(const cplx* in, cplx* out, std::size_t nx, std::size_t ny,
                               bool forward) {
  if (ny % 2 != 0) throw ShapeError("fft1_rows_centered requires an even extent");
  thread_local fftdetail::AlignedBuffer tls_in, tls_out;
  const std::size_t n = nx * ny;
  cplx* buf_in = reinterpret_cast<cplx*>(tls_in.get(n));
  cplx* buf_out = reinterpret_cast<cplx*>(tls_out.get(n));
  const std::size_t hy = ny / 2;
  for (std::size_t x = 0; x < nx; ++x) {
    const cplx* src = in + x * ny;
    cplx* dst = buf_in + x * ny;
    for (std::size_t y = 0; y < ny; ++y) dst[y] = src[(y + hy) % ny];
  }
  fftw_plan plan = fftdetail::get_plan_rows(static_cast<int>(nx), static_cast<int>(ny),
                                            forward ? FFTW_FORWARD : FFTW_BACKWARD);
  fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(buf_in),
                   reinterpret_cast<fftw_complex*>(buf_out));
  const double scale = 1.0 / std::sqrt(static_cast<double>(ny));
  for (std::size_t x = 0; x < nx; ++x) {
    const cplx* src = buf_out + x * ny;
    cplx* dst = out + x * ny;
    for (std::size_t y = 0; y < ny; ++y) dst[y] = scale * src[(y + hy) % ny];
  }
}

/// Per-acquisition binary masks over ky lines (columns of k-space).
struct SamplingMasks {
  Array<std::uint8_t> lines;  // [n_r, ny]

  SamplingMasks() = default;
  explicit SamplingMasks(Array<std::uint8_t> l) : lines(std::move(l)) {
    if (lines.rank() != 2) throw ShapeError("SamplingMasks expects [n_r, ny]");
    for (std::size_t i = 0; i < lines.dim(0); ++i) {
      std::size_t count = 0;
      for (std::size_t j = 0; j < lines.dim(1); ++j) count += lines.at(i, j) ? 1 : 0;
      if (count == 0) throw ConfigError("sampling mask has no lines set");
    }
  }

  std::size_t acquisitions() const { return lines.dim(0); }
  std::size_t ny() const { return lines.dim(1); }
  bool sampled(std::size_t acq, std::size_t ky) const { return lines.at(acq, ky) != 0; }

  static SamplingMasks full(std::size_t n_r, std::size_t ny) {
    Array<std::uint8_t> l({n_r, ny});
    l.fill(1);
    return SamplingMasks(std::move(l));
  }
};

struct CoilSensitivities {
  ComplexArray maps;  // [n_c, nx, ny]
  bool normalized = false;

  CoilSensitivities() = default;
  explicit CoilSensitivities(ComplexArray m, bool norm = false)
      : maps(std::move(m)), normalized(norm) {
    if (maps.rank() != 3) throw ShapeError("CoilSensitivities expects [n_c, nx, ny]");
  }

  std::size_t coils() const { return maps.dim(0); }
  std::size_t nx() const { return maps.dim(1); }
  std::size_t ny() const { return maps.dim(2); }

  static CoilSensitivities uniform(std::size_t n_c, std::size_t nx, std::size_t ny) {
    ComplexArray m({n_c, nx, ny});
    const cplx v{1.0 / std::sqrt(static_cast<double>(n_c)), 0.0};
    m.fill(v);
    return CoilSensitivities(std::move(m), true);
  }
};

/// A_i = S_i F C per acquisition: coil expansion, unitary centered 2D FFT,
/// line masking. Image series map to k-space on the full grid with zeros at
/// unsampled points.
struct AcquisitionModel {
  SamplingMasks masks;
  CoilSensitivities coils;

  AcquisitionModel() = default;
  AcquisitionModel(SamplingMasks m, CoilSensitivities c)
      : masks(std::move(m)), coils(std::move(c)) {
    if (masks.ny() != coils.ny())
      throw ShapeError("mask ny does not match coil ny");
  }

  std::size_t acquisitions() const { return masks.acquisitions(); }
  std::size_t n_coils() const { return coils.coils(); }
  std::size_t nx() const { return coils.nx(); }
  std::size_t ny() const { return coils.ny(); }
  std::size_t pixels() const { return nx() * ny(); }

  void check_image(const ComplexArray& y) const {
    if (y.rank() != 3 || y.dim(0) != acquisitions() || y.dim(1) != nx() ||
        y.dim(2) != ny())
      throw ShapeError("image series shape mismatch");
  }
  void check_kspace(const ComplexArray& k) const {
    if (k.rank() != 4 || k.dim(0) != acquisitions() || k.dim(1) != n_coils() ||
        k.dim(2) != nx() || k.dim(3) != ny())
      throw ShapeError("k-space shape mismatch");
  }
};

/// k_{i,c} = mask_i .* F(c_c .* y_i)
inline ComplexArray a_forward(const ComplexArray& y, const AcquisitionModel& A) {
  A.check_image(y);
  const std::size_t nr = A.acquisitions(), nc = A.n_coils(), nx = A.nx(), ny = A.ny();
  const std::size_t npx = nx * ny;
  ComplexArray k({nr, nc, nx, ny});
  std::vector<cplx> tmp(npx), freq(npx);
  for (std::size_t i = 0; i < nr; ++i) {
    const cplx* yi = y.data.data() + i * npx;
    for (std::size_t c = 0; c < nc; ++c) {
      const cplx* cc = A.coils.maps.data.data() + c * npx;
      for (std::size_t px = 0; px < npx; ++px) tmp[px] = cc[px] * yi[px];
      fft2_centered(tmp.data(), freq.data(), nx, ny, true);
      cplx* out = k.data.data() + (i * nc + c) * npx;
      for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t j = 0; j < ny; ++j)
          out[x * ny + j] = A.masks.sampled(i, j) ? freq[x * ny + j] : cplx{0.0, 0.0};
    }
  }
  return k;
}

/// y_i = sum_c conj(c_c) .* F^H(mask_i .* k_{i,c})
inline ComplexArray a_adjoint(const ComplexArray& k, const AcquisitionModel& A) {
  A.check_kspace(k);
  const std::size_t nr = A.acquisitions(), nc = A.n_coils(), nx = A.nx(), ny = A.ny();
  const std::size_t npx = nx * ny;
  ComplexArray y({nr, nx, ny});
  std::vector<cplx> tmp(npx), img(npx);
  for (std::size_t i = 0; i < nr; ++i) {
    cplx* yi = y.data.data() + i * npx;
    for (std::size_t c = 0; c < nc; ++c) {
      const cplx* in = k.data.data() + (i * nc + c) * npx;
      for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t j = 0; j < ny; ++j)
          tmp[x * ny + j] = A.masks.sampled(i, j) ? in[x * ny + j] : cplx{0.0, 0.0};
      fft2_centered(tmp.data(), img.data(), nx, ny, false);
      const cplx* cc = A.coils.maps.data.data() + c * npx;
      for (std::size_t px = 0; px < npx; ++px) yi[px] += std::conj(cc[px]) * img[px];
    }
  }
  return y;
}

/// H y = A^H A y + shift * y. Hermitian positive semidefinite, and positive
/// definite for shift > 0. Because the masks act on ky lines only, the
/// x-direction transform cancels inside A^H A and the operator reduces to
/// batched 1D transforms along ky.
inline ComplexArray gram_apply(const ComplexArray& y, const AcquisitionModel& A,
                               double shift) {
  A.check_image(y);
  const std::size_t nr = A.acquisitions(), nc = A.n_coils(), nx = A.nx(), ny = A.ny();
  const std::size_t npx = nx * ny;
  ComplexArray out({nr, nx, ny});
  thread_local std::vector<cplx> tmp, freq, img;
  tmp.resize(npx);
  freq.resize(npx);
  img.resize(npx);
  for (std::size_t i = 0; i < nr; ++i) {
    const cplx* yi = y.data.data() + i * npx;
    cplx* oi = out.data.data() + i * npx;
    const std::uint8_t* mrow = A.masks.lines.data.data() + i * ny;
    for (std::size_t px = 0; px < npx; ++px) oi[px] = shift * yi[px];
    for (std::size_t c = 0; c < nc; ++c) {
      const double* cc = reinterpret_cast<const double*>(A.coils.maps.data.data() + c * npx);
      const double* yr = reinterpret_cast<const double*>(yi);
      double* tr = reinterpret_cast<double*>(tmp.data());
      for (std::size_t px = 0; px < npx; ++px) {
        const double ar = cc[2 * px], ai = cc[2 * px + 1];
        const double br = yr[2 * px], bi = yr[2 * px + 1];
        tr[2 * px] = ar * br - ai * bi;
        tr[2 * px + 1] = ar * bi + ai * br;
      }
      fft1_rows_centered(tmp.data(), freq.data(), nx, ny, true);
      for (std::size_t x = 0; x < nx; ++x) {
        cplx* frow = freq.data() + x * ny;
        for (std::size_t j = 0; j < ny; ++j)
          if (!mrow[j]) frow[j] = cplx{0.0, 0.0};
      }
      fft1_rows_centered(freq.data(), img.data(), nx, ny, false);
      const double* ir = reinterpret_cast<const double*>(img.data());
      double* orow = reinterpret_cast<double*>(oi);
      for (std::size_t px = 0; px < npx; ++px) {
        const double ar = cc[2 * px], ai = cc[2 * px + 1];  // conj below
        const double br = ir[2 * px], bi = ir[2 * px + 1];
        orow[2 * px] += ar * br + ai * bi;
        orow[2 * px + 1] += ar * bi - ai * br;
      }
    }
  }
  return out;
}

}  // namespace qpinqi
