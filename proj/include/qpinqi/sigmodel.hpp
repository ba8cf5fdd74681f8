#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "qpinqi/tensor.hpp"

namespace qpinqi {

/// Real parameter maps, one channel per physical parameter, stored as a
/// [n_channels, nx, ny] stack. The saturation-recovery instance uses channels
/// (Re M0, Im M0, R1) with R1 = 1/T1 in 1/seconds.
struct ParameterMaps {
  RealArray maps;

  ParameterMaps() = default;
  ParameterMaps(std::size_t nch, std::size_t nx, std::size_t ny)
      : maps({nch, nx, ny}) {}
  explicit ParameterMaps(RealArray m) : maps(std::move(m)) {
    if (maps.rank() != 3) throw ShapeError("ParameterMaps expects rank-3 data");
  }

  std::size_t channels() const { return maps.dim(0); }
  std::size_t nx() const { return maps.dim(1); }
  std::size_t ny() const { return maps.dim(2); }
  std::size_t pixels() const { return nx() * ny(); }

  double& at(std::size_t c, std::size_t px) { return maps.data[c * pixels() + px]; }
  double at(std::size_t c, std::size_t px) const { return maps.data[c * pixels() + px]; }

  void gather(std::size_t px, std::span<double> out) const {
    const std::size_t n = pixels();
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = maps.data[c * n + px];
  }
  void scatter(std::size_t px, std::span<const double> in) {
    const std::size_t n = pixels();
    for (std::size_t c = 0; c < in.size(); ++c) maps.data[c * n + px] = in[c];
  }

  bool same_shape(const ParameterMaps& o) const { return maps.same_shape(o.maps); }
};

// Saturation-recovery channel order.
enum SatChannel : std::size_t { ReM0 = 0, ImM0 = 1, R1 = 2 };

/// Pixelwise signal model contract: a smooth map from param_count real values
/// to output_count complex samples, with exact first and second derivatives.
/// Jacobians are row-major [output_count x param_count].
class PixelSignalModel {
 public:
  virtual ~PixelSignalModel() = default;
  virtual std::size_t param_count() const = 0;
  virtual std::size_t output_count() const = 0;
  virtual void eval(std::span<const double> p, std::span<cplx> q) const = 0;
  virtual void jacobian(std::span<const double> p, std::span<cplx> jac) const = 0;
  /// Accumulates the exact second-order term of 0.5 * Hess(|q(p)-y|^2):
  /// h[j*n+k] += Re( sum_i conj(r_i) d2q_i/dp_j dp_k ) with r = q(p) - y.
  virtual void residual_curvature(std::span<const double> p,
                                  std::span<const cplx> r,
                                  std::span<double> h) const = 0;
  /// Value and Jacobian in one call; models override this to share work.
  virtual void eval_jacobian(std::span<const double> p, std::span<cplx> q,
                             std::span<cplx> jac) const {
    eval(p, q);
    jacobian(p, jac);
  }
};

/// q_i = M0 (1 - exp(-tau_i * R1)), smooth in all parameters including R1 <= 0.
class SaturationModel : public PixelSignalModel {
 public:
  explicit SaturationModel(std::vector<double> taus) : taus_(std::move(taus)) {
    for (std::size_t i = 0; i < taus_.size(); ++i)
      if (!(taus_[i] > 0.0) || (i > 0 && !(taus_[i] > taus_[i - 1])))
        throw ConfigError("saturation times must be positive and strictly increasing");
  }

  const std::vector<double>& taus() const { return taus_; }
  std::size_t param_count() const override { return 3; }
  std::size_t output_count() const override { return taus_.size(); }

  void eval(std::span<const double> p, std::span<cplx> q) const override {
    const cplx m0{p[ReM0], p[ImM0]};
    for (std::size_t i = 0; i < taus_.size(); ++i)
      q[i] = m0 * (1.0 - std::exp(-taus_[i] * p[R1]));
  }

  void jacobian(std::span<const double> p, std::span<cplx> jac) const override {
    const cplx m0{p[ReM0], p[ImM0]};
    for (std::size_t i = 0; i < taus_.size(); ++i) {
      const double e = std::exp(-taus_[i] * p[R1]);
      const double w = 1.0 - e;
      jac[i * 3 + ReM0] = cplx{w, 0.0};
      jac[i * 3 + ImM0] = cplx{0.0, w};
      jac[i * 3 + R1] = m0 * (taus_[i] * e);
    }
  }

  void eval_jacobian(std::span<const double> p, std::span<cplx> q,
                     std::span<cplx> jac) const override {
    const cplx m0{p[ReM0], p[ImM0]};
    for (std::size_t i = 0; i < taus_.size(); ++i) {
      const double e = std::exp(-taus_[i] * p[R1]);
      const double w = 1.0 - e;
      q[i] = m0 * w;
      jac[i * 3 + ReM0] = cplx{w, 0.0};
      jac[i * 3 + ImM0] = cplx{0.0, w};
      jac[i * 3 + R1] = m0 * (taus_[i] * e);
    }
  }

  void residual_curvature(std::span<const double> p, std::span<const cplx> r,
                          std::span<double> h) const override {
    // Nonzero second derivatives: d2q/dReM0 dR1 = tau e, d2q/dImM0 dR1 = i tau e,
    // d2q/dR1^2 = -M0 tau^2 e.
    for (std::size_t i = 0; i < taus_.size(); ++i) {
      const double te = taus_[i] * std::exp(-taus_[i] * p[R1]);
      const double ar = te * r[i].real();
      const double ai = te * r[i].imag();
      h[ReM0 * 3 + R1] += ar;
      h[R1 * 3 + ReM0] += ar;
      h[ImM0 * 3 + R1] += ai;
      h[R1 * 3 + ImM0] += ai;
      h[R1 * 3 + R1] -= taus_[i] * te * (p[ReM0] * r[i].real() + p[ImM0] * r[i].imag());
    }
  }

 private:
  std::vector<double> taus_;
};

/// Complex image series [n_outputs, nx, ny] produced by applying the model
/// pixelwise.
inline ComplexArray q_forward(const PixelSignalModel& model, const ParameterMaps& p) {
  const std::size_t nr = model.output_count(), npx = p.pixels();
  ComplexArray y({nr, p.nx(), p.ny()});
  std::vector<double> pp(model.param_count());
  std::vector<cplx> q(nr);
  for (std::size_t px = 0; px < npx; ++px) {
    p.gather(px, pp);
    model.eval(pp, q);
    for (std::size_t i = 0; i < nr; ++i) y.data[i * npx + px] = q[i];
  }
  return y;
}

/// Directional derivative dq = J dp.
inline ComplexArray q_jvp(const PixelSignalModel& model, const ParameterMaps& p,
                          const ParameterMaps& dp) {
  p.maps.require_same_shape(dp.maps, "q_jvp");
  const std::size_t nr = model.output_count(), nch = model.param_count(), npx = p.pixels();
  ComplexArray dy({nr, p.nx(), p.ny()});
  std::vector<double> pp(nch), dd(nch);
  std::vector<cplx> jac(nr * nch);
  for (std::size_t px = 0; px < npx; ++px) {
    p.gather(px, pp);
    dp.gather(px, dd);
    model.jacobian(pp, jac);
    for (std::size_t i = 0; i < nr; ++i) {
      cplx acc{0.0, 0.0};
      for (std::size_t c = 0; c < nch; ++c) acc += jac[i * nch + c] * dd[c];
      dy.data[i * npx + px] = acc;
    }
  }
  return dy;
}

/// Adjoint of the Jacobian under the Wirtinger convention:
/// out = Re(J^H dy), so Re<dy, q_jvp(dp)> = <q_vjp(dy), dp> for all dp.
inline ParameterMaps q_vjp(const PixelSignalModel& model, const ParameterMaps& p,
                           const ComplexArray& dy) {
  const std::size_t nr = model.output_count(), nch = model.param_count(), npx = p.pixels();
  if (dy.rank() != 3 || dy.dim(0) != nr || dy.dim(1) != p.nx() || dy.dim(2) != p.ny())
    throw ShapeError("q_vjp cotangent shape mismatch");
  ParameterMaps out(nch, p.nx(), p.ny());
  std::vector<double> pp(nch);
  std::vector<cplx> jac(nr * nch);
  for (std::size_t px = 0; px < npx; ++px) {
    p.gather(px, pp);
    model.jacobian(pp, jac);
    for (std::size_t c = 0; c < nch; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < nr; ++i) {
        const cplx j = jac[i * nch + c];
        const cplx d = dy.data[i * npx + px];
        acc += j.real() * d.real() + j.imag() * d.imag();  // Re(conj(j) d)
      }
      out.at(c, px) = acc;
    }
  }
  return out;
}

/// Hessian-vector product of F(p) = |q(p)-y|^2 + lambda |p - p_reg|^2.
/// The exact variant includes the second derivatives of q; the Gauss-Newton
/// variant keeps only Re(J^H J).
inline ParameterMaps objective_hvp(const PixelSignalModel& model,
                                   const ParameterMaps& p, const ComplexArray& y,
                                   double lambda, const ParameterMaps& dp,
                                   bool exact_hessian = true) {
  p.maps.require_same_shape(dp.maps, "objective_hvp");
  const std::size_t nr = model.output_count(), nch = model.param_count(), npx = p.pixels();
  ParameterMaps out(nch, p.nx(), p.ny());
  std::vector<double> pp(nch), dd(nch), h(nch * nch);
  std::vector<cplx> jac(nr * nch), q(nr), r(nr);
  for (std::size_t px = 0; px < npx; ++px) {
    p.gather(px, pp);
    dp.gather(px, dd);
    model.jacobian(pp, jac);
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t j = 0; j < nch; ++j)
      for (std::size_t k = 0; k < nch; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < nr; ++i) {
          const cplx a = jac[i * nch + j], b = jac[i * nch + k];
          acc += a.real() * b.real() + a.imag() * b.imag();
        }
        h[j * nch + k] = acc;
      }
    if (exact_hessian) {
      model.eval(pp, q);
      for (std::size_t i = 0; i < nr; ++i) r[i] = q[i] - y.data[i * npx + px];
      model.residual_curvature(pp, r, h);
    }
    for (std::size_t j = 0; j < nch; ++j) {
      double acc = lambda * dd[j];
      for (std::size_t k = 0; k < nch; ++k) acc += h[j * nch + k] * dd[k];
      out.at(j, px) = 2.0 * acc;
    }
  }
  return out;
}

/// Smooth box-constraint transform x = mid + half*sin(u), one (lo, hi) pair
/// per parameter channel. The inverse uses the principal branch of asin.
struct BoundsTransform {
  std::vector<double> lo, hi;

  BoundsTransform() = default;
  BoundsTransform(std::vector<double> l, std::vector<double> h)
      : lo(std::move(l)), hi(std::move(h)) {
    if (lo.size() != hi.size()) throw ConfigError("bounds size mismatch");
    for (std::size_t c = 0; c < lo.size(); ++c)
      if (!(lo[c] < hi[c])) throw ConfigError("bounds require lo < hi");
  }

  /// Re M0, Im M0 in (-2, 2); R1 in (-1, 20) 1/s.
  static BoundsTransform saturation_defaults() {
    return BoundsTransform({-2.0, -2.0, -1.0}, {2.0, 2.0, 20.0});
  }

  std::size_t channels() const { return lo.size(); }

  double apply(std::size_t c, double u) const {
    return 0.5 * (lo[c] + hi[c]) + 0.5 * (hi[c] - lo[c]) * std::sin(u);
  }
  double dxdu(std::size_t c, double u) const {
    return 0.5 * (hi[c] - lo[c]) * std::cos(u);
  }
  double invert(std::size_t c, double x) const {
    if (!(x > lo[c] && x < hi[c]))
      throw std::domain_error("bounds_invert requires a value strictly inside (lo, hi)");
    return std::asin((2.0 * x - lo[c] - hi[c]) / (hi[c] - lo[c]));
  }

  /// Pulls a value into the open interval, keeping a small interior margin so
  /// that invert() stays well conditioned.
  double clamp_interior(std::size_t c, double x, double margin_frac = 1e-3) const {
    const double m = margin_frac * (hi[c] - lo[c]);
    return std::min(hi[c] - m, std::max(lo[c] + m, x));
  }
};

inline ParameterMaps bounds_apply(const BoundsTransform& b, const ParameterMaps& u) {
  ParameterMaps x(u.channels(), u.nx(), u.ny());
  for (std::size_t c = 0; c < u.channels(); ++c)
    for (std::size_t px = 0; px < u.pixels(); ++px)
      x.at(c, px) = b.apply(c, u.at(c, px));
  return x;
}

inline ParameterMaps bounds_invert(const BoundsTransform& b, const ParameterMaps& x) {
  ParameterMaps u(x.channels(), x.nx(), x.ny());
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t px = 0; px < x.pixels(); ++px)
      u.at(c, px) = b.invert(c, x.at(c, px));
  return u;
}

/// T1 for reporting, with R1 floored at 1e-6 1/s to avoid the divide.
inline double t1_from_r1(double r1, double floor_r1 = 1e-6) {
  return 1.0 / std::max(r1, floor_r1);
}

}  // namespace qpinqi
