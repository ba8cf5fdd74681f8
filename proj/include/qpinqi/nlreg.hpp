#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <vector>

#include "qpinqi/lindc.hpp"
#include "qpinqi/sigmodel.hpp"
#include "qpinqi/tensor.hpp"

namespace qpinqi {

struct LbfgsConfig {
  int memory = 10;
  int max_iter = 50;
  double grad_tol = 1e-8;  // gradient 2-norm in the unconstrained space
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_line_search = 20;
};

struct LbfgsResult {
  double fval = 0.0;
  double grad_norm = 0.0;
  int iters = 0;
  bool converged = false;
  bool line_search_failed = false;
};

/// Limited-memory BFGS with a strong-Wolfe line search. Objective callables
/// have signature double(const std::vector<double>& x, std::vector<double>& g).
/// Workspaces are reused across minimize() calls so one solver instance can
/// sweep many small problems cheaply.
class LbfgsSolver {
 public:
  explicit LbfgsSolver(const LbfgsConfig& cfg) : cfg_(cfg) {
    if (cfg.memory < 1 || !(cfg.c1 > 0.0) || !(cfg.c1 < cfg.c2) || !(cfg.c2 < 1.0))
      throw ConfigError("invalid L-BFGS config");
  }

  template <typename Obj>
  LbfgsResult minimize(Obj&& obj, std::vector<double>& x) {
    const std::size_t n = x.size();
    g_.assign(n, 0.0);
    d_.assign(n, 0.0);
    xt_.assign(n, 0.0);
    gt_.assign(n, 0.0);
    q_.assign(n, 0.0);
    s_mem_.clear();
    y_mem_.clear();
    rho_.clear();

    LbfgsResult res;
    double f = obj(x, g_);
    if (!std::isfinite(f)) throw SolverError("L-BFGS: non-finite objective");
    res.fval = f;
    res.grad_norm = nrm(g_);

    for (int iter = 0; iter < cfg_.max_iter; ++iter) {
      if (res.grad_norm <= cfg_.grad_tol) {
        res.converged = true;
        break;
      }
      two_loop_direction();
      double dphi0 = dot(d_, g_);
      if (!(dphi0 < 0.0)) {  // not a descent direction; restart from steepest descent
        for (std::size_t i = 0; i < n; ++i) d_[i] = -g_[i];
        dphi0 = -dot(g_, g_);
        if (!(dphi0 < 0.0)) break;  // gradient numerically zero
        s_mem_.clear();
        y_mem_.clear();
        rho_.clear();
      }
      const double alpha0 = s_mem_.empty() ? 1.0 / std::max(1.0, res.grad_norm) : 1.0;
      double f_new = f;
      const bool ok = wolfe_search(obj, x, f, dphi0, alpha0, f_new);
      if (!ok) {
        res.line_search_failed = true;
        break;  // x, f, g_ hold the best point seen
      }
      // xt_/gt_ hold the accepted trial point.
      for (std::size_t i = 0; i < n; ++i) {
        const double si = xt_[i] - x[i];
        const double yi = gt_[i] - g_[i];
        xt_[i] = si;  // reuse as s
        gt_[i] = yi;  // reuse as y
      }
      const double sy = dot(xt_, gt_);
      if (sy > 1e-10 * nrm(xt_) * nrm(gt_)) {
        if (static_cast<int>(s_mem_.size()) == cfg_.memory) {
          s_mem_.pop_front();
          y_mem_.pop_front();
          rho_.pop_front();
        }
        s_mem_.push_back(xt_);
        y_mem_.push_back(gt_);
        rho_.push_back(1.0 / sy);
      }
      for (std::size_t i = 0; i < n; ++i) {
        x[i] += xt_[i];
        g_[i] = gt_[i] + g_[i];
      }
      f = f_new;
      res.fval = f;
      res.grad_norm = nrm(g_);
      res.iters = iter + 1;
    }
    res.grad_norm = nrm(g_);
    res.fval = f;
    return res;
  }

  const std::vector<double>& last_gradient() const { return g_; }

 private:
  static double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
  }
  static double nrm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

  void two_loop_direction() {
    const std::size_t n = g_.size();
    q_ = g_;
    const std::size_t m = s_mem_.size();
    alpha_.resize(m);
    for (std::size_t idx = m; idx-- > 0;) {
      alpha_[idx] = rho_[idx] * dot(s_mem_[idx], q_);
      for (std::size_t i = 0; i < n; ++i) q_[i] -= alpha_[idx] * y_mem_[idx][i];
    }
    if (m > 0) {
      const double yy = dot(y_mem_[m - 1], y_mem_[m - 1]);
      const double gamma = yy > 0.0 ? 1.0 / (rho_[m - 1] * yy) : 1.0;
      for (auto& v : q_) v *= gamma;
    }
    for (std::size_t idx = 0; idx < m; ++idx) {
      const double beta = rho_[idx] * dot(y_mem_[idx], q_);
      for (std::size_t i = 0; i < n; ++i) q_[i] += (alpha_[idx] - beta) * s_mem_[idx][i];
    }
    for (std::size_t i = 0; i < n; ++i) d_[i] = -q_[i];
  }

  // Strong Wolfe line search (bracket + zoom). On success xt_/gt_ hold the
  // accepted point and f_new its value. On failure the best strictly
  // improving evaluation, if any, is kept so the iterate never worsens.
  template <typename Obj>
  bool wolfe_search(Obj&& obj, const std::vector<double>& x, double phi0,
                    double dphi0, double alpha0, double& f_new) {
    const std::size_t n = x.size();
    int evals = 0;
    double best_alpha = 0.0, best_phi = phi0;
    double cur_alpha = -1.0, cur_phi = 0.0;

    auto eval_at = [&](double alpha, double& phi, double& dphi) {
      for (std::size_t i = 0; i < n; ++i) xt_[i] = x[i] + alpha * d_[i];
      phi = obj(xt_, gt_);
      ++evals;
      if (!std::isfinite(phi)) phi = std::numeric_limits<double>::infinity();
      dphi = dot(gt_, d_);
      cur_alpha = alpha;
      cur_phi = phi;
      if (phi < best_phi) {
        best_phi = phi;
        best_alpha = alpha;
      }
    };

    auto zoom = [&](double lo, double phi_lo, double hi, double phi_hi) -> double {
      double dphi_j = 0.0;
      while (evals < cfg_.max_line_search) {
        const double aj = 0.5 * (lo + hi);
        double phi_j;
        eval_at(aj, phi_j, dphi_j);
        if (phi_j > phi0 + cfg_.c1 * aj * dphi0 || phi_j >= phi_lo) {
          hi = aj;
          phi_hi = phi_j;
        } else {
          if (std::abs(dphi_j) <= -cfg_.c2 * dphi0) return aj;
          if (dphi_j * (hi - lo) >= 0.0) {
            hi = lo;
            phi_hi = phi_lo;
          }
          lo = aj;
          phi_lo = phi_j;
        }
        if (std::abs(hi - lo) < 1e-16 * std::max(1.0, std::abs(lo))) break;
      }
      return -1.0;
    };

    double alpha_prev = 0.0, phi_prev = phi0;
    double alpha = alpha0;
    double accepted = -1.0;
    while (evals < cfg_.max_line_search) {
      double phi, dphi;
      eval_at(alpha, phi, dphi);
      if (phi > phi0 + cfg_.c1 * alpha * dphi0 || (evals > 1 && phi >= phi_prev)) {
        accepted = zoom(alpha_prev, phi_prev, alpha, phi);
        break;
      }
      if (std::abs(dphi) <= -cfg_.c2 * dphi0) {
        accepted = alpha;
        break;
      }
      if (dphi >= 0.0) {
        accepted = zoom(alpha, phi, alpha_prev, phi_prev);
        break;
      }
      alpha_prev = alpha;
      phi_prev = phi;
      alpha *= 2.0;
    }
    if (accepted > 0.0) {
      // xt_/gt_ may belong to a later probe inside zoom; refresh if so.
      if (cur_alpha != accepted) {
        double phi, dphi;
        eval_at(accepted, phi, dphi);
      }
      f_new = cur_phi;
      return true;
    }
    if (best_alpha > 0.0 && best_phi < phi0) {
      double phi, dphi;
      eval_at(best_alpha, phi, dphi);
      f_new = phi;
      return true;
    }
    return false;
  }

  LbfgsConfig cfg_;
  std::vector<double> g_, d_, xt_, gt_, q_;
  std::deque<std::vector<double>> s_mem_, y_mem_;
  std::deque<double> rho_;
  std::vector<double> alpha_;
};

struct NlRegConfig {
  LbfgsConfig lbfgs;
  bool joint_solve = false;         // one solve over all pixels instead of per pixel
  bool global_cg_backward = false;  // matrix-free CG instead of per-pixel blocks
  CgConfig backward_cg{1e-10, 500};
  double stationarity_warn = 1e-4;
  double init_margin = 1e-3;
};

struct NlRegDiag {
  long total_iters = 0;
  std::size_t warned_pixels = 0;
  std::size_t line_search_failures = 0;
  std::size_t hessian_fallbacks = 0;
};

namespace detail {

/// F and grad of |q(x(u)) - y|^2 + lambda |x(u) - p_reg|^2 for one pixel,
/// in the unconstrained u coordinates.
struct PixelObjective {
  const PixelSignalModel* model = nullptr;
  const BoundsTransform* bounds = nullptr;
  double lambda = 0.0;
  std::vector<cplx> y_px;
  std::vector<double> p_reg_px;
  mutable std::vector<double> x, gx;
  mutable std::vector<cplx> q, jac;

  void init(const PixelSignalModel& m, const BoundsTransform& b, double lam) {
    model = &m;
    bounds = &b;
    lambda = lam;
    const std::size_t nch = m.param_count(), nr = m.output_count();
    y_px.resize(nr);
    p_reg_px.resize(nch);
    x.resize(nch);
    gx.resize(nch);
    q.resize(nr);
    jac.resize(nr * nch);
  }

  double operator()(const std::vector<double>& u, std::vector<double>& grad) const {
    const std::size_t nch = x.size(), nr = q.size();
    for (std::size_t c = 0; c < nch; ++c) x[c] = bounds->apply(c, u[c]);
    model->eval_jacobian(x, q, jac);
    double f = 0.0;
    for (std::size_t i = 0; i < nr; ++i) {
      q[i] -= y_px[i];  // residual in place
      f += std::norm(q[i]);
    }
    for (std::size_t c = 0; c < nch; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < nr; ++i) {
        const cplx j = jac[i * nch + c];
        acc += j.real() * q[i].real() + j.imag() * q[i].imag();
      }
      const double dx = x[c] - p_reg_px[c];
      f += lambda * dx * dx;
      gx[c] = 2.0 * (acc + lambda * dx);
      grad[c] = gx[c] * bounds->dxdu(c, u[c]);
    }
    return f;
  }
};

/// Exact Hessian of |q(p)-y_px|^2 + lambda |p-p_reg|^2 at one pixel,
/// h = 2 [ Re(J^H J) + sum_i Re(conj(r_i) q_i'') + lambda I ].
/// q, jac and r are left holding the values at p for reuse.
inline void pixel_hessian(const PixelSignalModel& model, std::span<const double> pp,
                          std::span<const cplx> y_px, double lambda,
                          std::vector<double>& h, std::vector<cplx>& q,
                          std::vector<cplx>& jac, std::vector<cplx>& r) {
  const std::size_t nch = model.param_count(), nr = model.output_count();
  model.eval_jacobian(pp, q, jac);
  for (std::size_t i = 0; i < nr; ++i) r[i] = q[i] - y_px[i];
  std::fill(h.begin(), h.end(), 0.0);
  for (std::size_t j = 0; j < nch; ++j)
    for (std::size_t k = j; k < nch; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < nr; ++i) {
        const cplx a = jac[i * nch + j], b = jac[i * nch + k];
        acc += a.real() * b.real() + a.imag() * b.imag();
      }
      h[j * nch + k] = acc;
      h[k * nch + j] = acc;
    }
  model.residual_curvature(pp, r, h);
  for (std::size_t c = 0; c < nch; ++c) h[c * nch + c] += lambda;
  for (auto& v : h) v *= 2.0;
}

inline bool cholesky_solve(std::vector<double>& a, std::vector<double>& rhs,
                           std::size_t n) {
  // In-place LL^T; returns false on a non-positive pivot.
  for (std::size_t k = 0; k < n; ++k) {
    double pivot = a[k * n + k];
    for (std::size_t j = 0; j < k; ++j) pivot -= a[k * n + j] * a[k * n + j];
    if (!(pivot > 0.0)) return false;
    const double lkk = std::sqrt(pivot);
    a[k * n + k] = lkk;
    for (std::size_t i = k + 1; i < n; ++i) {
      double v = a[i * n + k];
      for (std::size_t j = 0; j < k; ++j) v -= a[i * n + j] * a[k * n + j];
      a[i * n + k] = v / lkk;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double v = rhs[i];
    for (std::size_t j = 0; j < i; ++j) v -= a[i * n + j] * rhs[j];
    rhs[i] = v / a[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double v = rhs[i];
    for (std::size_t j = i + 1; j < n; ++j) v -= a[j * n + i] * rhs[j];
    rhs[i] = v / a[i * n + i];
  }
  return true;
}

/// Newton polish in u-space. Plain line searches cannot resolve objective
/// differences below machine precision, which leaves L-BFGS iterates with
/// gradient norms around 1e-8; a couple of exact-Newton steps (no value
/// comparisons) push the stationarity to the 1e-14 level the implicit
/// backward pass wants. Falls back to the incoming point if a step does not
/// shrink the gradient.
struct NewtonPolish {
  const PixelSignalModel* model = nullptr;
  const BoundsTransform* bounds = nullptr;
  double lambda = 0.0;
  std::vector<double> x, gx, gu, h, hu, step;
  std::vector<cplx> q, jac, r, y_px;

  void init(const PixelSignalModel& m, const BoundsTransform& b, double lam) {
    model = &m;
    bounds = &b;
    lambda = lam;
    const std::size_t nch = m.param_count(), nr = m.output_count();
    x.resize(nch);
    gx.resize(nch);
    gu.resize(nch);
    h.resize(nch * nch);
    hu.resize(nch * nch);
    step.resize(nch);
    q.resize(nr);
    jac.resize(nr * nch);
    r.resize(nr);
    y_px.resize(nr);
  }

  double grad_u(std::span<const double> u) {
    const std::size_t nch = x.size(), nr = q.size();
    for (std::size_t c = 0; c < nch; ++c) x[c] = bounds->apply(c, u[c]);
    pixel_hessian(*model, x, y_px, lambda, h, q, jac, r);
    double norm = 0.0;
    for (std::size_t c = 0; c < nch; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < nr; ++i) {
        const cplx j = jac[i * nch + c];
        acc += j.real() * r[i].real() + j.imag() * r[i].imag();
      }
      gx[c] = 2.0 * (acc + lambda * (x[c] - /*p_reg*/ preg[c]));
      gu[c] = gx[c] * bounds->dxdu(c, u[c]);
      norm += gu[c] * gu[c];
    }
    return std::sqrt(norm);
  }

  std::vector<double> preg;

  void run(std::vector<double>& u, int max_steps = 3) {
    const std::size_t nch = x.size();
    double gn = grad_u(u);
    for (int it = 0; it < max_steps; ++it) {
      if (gn <= 1e-13) return;
      // H_u = D H_x D + diag(d2x/du2 .* gx)
      for (std::size_t a = 0; a < nch; ++a) {
        const double da = bounds->dxdu(a, u[a]);
        for (std::size_t b = 0; b < nch; ++b)
          hu[a * nch + b] = da * h[a * nch + b] * bounds->dxdu(b, u[b]);
        const double d2 = -(bounds->hi[a] - bounds->lo[a]) * 0.5 * std::sin(u[a]);
        hu[a * nch + a] += d2 * gx[a];
      }
      for (std::size_t c = 0; c < nch; ++c) step[c] = -gu[c];
      std::vector<double> hcopy = hu;
      if (!cholesky_solve(hcopy, step, nch)) return;
      std::vector<double> u_new(u);
      for (std::size_t c = 0; c < nch; ++c) u_new[c] += step[c];
      const double gn_new = grad_u(u_new);
      if (!std::isfinite(gn_new) || gn_new >= gn) {
        grad_u(u);  // restore scratch state at u
        return;
      }
      u = std::move(u_new);
      gn = gn_new;
    }
  }
};

}  // namespace detail

struct NlRegResult {
  ParameterMaps p;
  NlRegDiag diag;
};

/// Bound-constrained minimizer of |q(p)-y|^2 + lambda_p |p-p_reg|^2, solved
/// with L-BFGS in the unconstrained coordinates of the sine transform. The
/// objective decouples per pixel, so the default path runs one small solve
/// per pixel; joint_solve runs a single solve over the stacked vector for
/// model contracts that want it.
inline NlRegResult nlreg_forward(const PixelSignalModel& model, const ComplexArray& y,
                                 const ParameterMaps& p_reg, double lambda_p,
                                 const BoundsTransform& bounds,
                                 const ParameterMaps& p_init, const NlRegConfig& cfg) {
  const std::size_t nch = model.param_count(), nr = model.output_count();
  if (lambda_p < 0.0) throw ConfigError("lambda_p must be >= 0");
  if (bounds.channels() != nch) throw ConfigError("bounds channel mismatch");
  if (p_reg.channels() != nch || p_init.channels() != nch)
    throw ShapeError("parameter channel mismatch");
  if (y.rank() != 3 || y.dim(0) != nr || y.dim(1) != p_init.nx() || y.dim(2) != p_init.ny())
    throw ShapeError("image series shape mismatch");

  const std::size_t npx = p_init.pixels();
  NlRegResult out{ParameterMaps(nch, p_init.nx(), p_init.ny()), {}};

  detail::PixelObjective pobj;
  pobj.init(model, bounds, lambda_p);
  detail::NewtonPolish polish;
  polish.init(model, bounds, lambda_p);
  polish.preg.resize(nch);
  LbfgsSolver solver(cfg.lbfgs);

  if (!cfg.joint_solve) {
    std::vector<double> u(nch), pinit(nch), gtmp(nch);
    for (std::size_t px = 0; px < npx; ++px) {
      for (std::size_t i = 0; i < nr; ++i) pobj.y_px[i] = y.data[i * npx + px];
      p_reg.gather(px, pobj.p_reg_px);
      p_init.gather(px, pinit);
      for (std::size_t c = 0; c < nch; ++c)
        u[c] = bounds.invert(c, bounds.clamp_interior(c, pinit[c], cfg.init_margin));
      LbfgsResult r = solver.minimize(pobj, u);
      out.diag.total_iters += r.iters;
      if (r.line_search_failed) ++out.diag.line_search_failures;
      polish.y_px = pobj.y_px;
      polish.preg = pobj.p_reg_px;
      polish.run(u);
      const double gn = polish.grad_u(u);
      const double fv = pobj(u, gtmp);
      if (!(gn <= cfg.stationarity_warn * (1.0 + std::abs(fv))))
        ++out.diag.warned_pixels;
      for (std::size_t c = 0; c < nch; ++c) out.p.at(c, px) = bounds.apply(c, u[c]);
    }
    return out;
  }

  // Joint path: one L-BFGS over the pixel-major stacked u vector.
  std::vector<double> u(nch * npx), pinit(nch);
  for (std::size_t px = 0; px < npx; ++px) {
    p_init.gather(px, pinit);
    for (std::size_t c = 0; c < nch; ++c)
      u[px * nch + c] = bounds.invert(c, bounds.clamp_interior(c, pinit[c], cfg.init_margin));
  }
  std::vector<double> u_px(nch), g_px(nch);
  auto joint = [&](const std::vector<double>& uv, std::vector<double>& grad) {
    double f = 0.0;
    for (std::size_t px = 0; px < npx; ++px) {
      for (std::size_t i = 0; i < nr; ++i) pobj.y_px[i] = y.data[i * npx + px];
      p_reg.gather(px, pobj.p_reg_px);
      for (std::size_t c = 0; c < nch; ++c) u_px[c] = uv[px * nch + c];
      f += pobj(u_px, g_px);
      for (std::size_t c = 0; c < nch; ++c) grad[px * nch + c] = g_px[c];
    }
    return f;
  };
  LbfgsConfig jcfg = cfg.lbfgs;
  jcfg.grad_tol = cfg.lbfgs.grad_tol * std::sqrt(static_cast<double>(npx));
  LbfgsSolver jsolver(jcfg);
  LbfgsResult r = jsolver.minimize(joint, u);
  out.diag.total_iters = r.iters;
  if (r.line_search_failed) ++out.diag.line_search_failures;
  // The objective separates over pixels, so the per-pixel polish applies
  // unchanged to the joint iterate.
  std::vector<double> u_loc(nch);
  for (std::size_t px = 0; px < npx; ++px) {
    for (std::size_t i = 0; i < nr; ++i) polish.y_px[i] = y.data[i * npx + px];
    p_reg.gather(px, polish.preg);
    for (std::size_t c = 0; c < nch; ++c) u_loc[c] = u[px * nch + c];
    polish.run(u_loc);
    for (std::size_t c = 0; c < nch; ++c)
      out.p.at(c, px) = bounds.apply(c, u_loc[c]);
  }
  return out;
}

struct NlRegGrads {
  ComplexArray d_y;        // dL/dconj(y)
  ParameterMaps d_p_reg;
  double d_lambda_p = 0.0;
  bool lambda_valid = true;  // false when lambda_p == 0 (no prior inputs)
  NlRegDiag diag;
};

/// Implicit-differentiation backward pass. The stationarity the solver
/// reaches lives in the unconstrained u coordinates, so the linear system is
/// solved there: with D = diag(dx/du) and E the diagonal carrying d2x/du2
/// times the parameter-space gradient,
///   (D H_x D + E) g_u = D dL/dp*,   g = D g_u,
/// then
///   dL/dp_reg = 2 lambda g,   dL/dlambda = -2 <p* - p_reg, g>,
///   dL/dconj(y) = J g.
/// At interior stationary points E vanishes and g = H_x^{-1} dL/dp*; at
/// pixels parked on a bound the transform correctly suppresses the
/// sensitivity of the clamped channel.
inline NlRegGrads nlreg_backward(const PixelSignalModel& model, const ComplexArray& y,
                                 const ParameterMaps& p_reg, double lambda_p,
                                 const BoundsTransform& bounds,
                                 const ParameterMaps& p_star, const ParameterMaps& dL_dp,
                                 const NlRegConfig& cfg) {
  const std::size_t nch = model.param_count(), nr = model.output_count();
  const std::size_t npx = p_star.pixels();
  p_star.maps.require_same_shape(dL_dp.maps, "nlreg_backward");
  if (bounds.channels() != nch) throw ConfigError("bounds channel mismatch");

  NlRegGrads out;
  out.d_y = ComplexArray({nr, p_star.nx(), p_star.ny()});
  out.d_p_reg = ParameterMaps(nch, p_star.nx(), p_star.ny());
  out.lambda_valid = lambda_p > 0.0;

  // Per-pixel transform diagonals at the solution.
  ParameterMaps dscale(nch, p_star.nx(), p_star.ny());
  ParameterMaps ecurv(nch, p_star.nx(), p_star.ny());
  {
    std::vector<double> pp(nch), gx(nch), h(nch * nch);
    std::vector<cplx> q(nr), jac(nr * nch), r(nr), y_px(nr);
    for (std::size_t px = 0; px < npx; ++px) {
      p_star.gather(px, pp);
      for (std::size_t i = 0; i < nr; ++i) y_px[i] = y.data[i * npx + px];
      detail::pixel_hessian(model, pp, y_px, lambda_p, h, q, jac, r);
      for (std::size_t c = 0; c < nch; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < nr; ++i) {
          const cplx j = jac[i * nch + c];
          acc += j.real() * r[i].real() + j.imag() * r[i].imag();
        }
        gx[c] = 2.0 * (acc + lambda_p * (pp[c] - p_reg.at(c, px)));
        const double x = bounds.clamp_interior(c, pp[c], 1e-12);
        const double u = bounds.invert(c, x);
        dscale.at(c, px) = bounds.dxdu(c, u);
        ecurv.at(c, px) = -(bounds.hi[c] - bounds.lo[c]) * 0.5 * std::sin(u) * gx[c];
      }
    }
  }

  ParameterMaps g_maps(nch, p_star.nx(), p_star.ny());
  if (cfg.global_cg_backward) {
    auto apply = [&](const RealArray& v) {
      RealArray dv = v;
      for (std::size_t i = 0; i < dv.size(); ++i) dv.data[i] *= dscale.maps.data[i];
      RealArray hu = objective_hvp(model, p_star, y, lambda_p, ParameterMaps(dv), true).maps;
      for (std::size_t i = 0; i < hu.size(); ++i)
        hu.data[i] = hu.data[i] * dscale.maps.data[i] + ecurv.maps.data[i] * v.data[i];
      return hu;
    };
    RealArray rhs = dL_dp.maps;
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs.data[i] *= dscale.maps.data[i];
    auto [gu, cg] = cg_solve<RealArray>(apply, rhs, cfg.backward_cg);
    for (std::size_t i = 0; i < gu.size(); ++i)
      g_maps.maps.data[i] = dscale.maps.data[i] * gu.data[i];
  } else {
    std::vector<double> pp(nch), h(nch * nch), hu(nch * nch), hwork(nch * nch), rhs(nch);
    std::vector<cplx> q(nr), jac(nr * nch), r(nr), y_px(nr);
    for (std::size_t px = 0; px < npx; ++px) {
      p_star.gather(px, pp);
      for (std::size_t i = 0; i < nr; ++i) y_px[i] = y.data[i * npx + px];
      detail::pixel_hessian(model, pp, y_px, lambda_p, h, q, jac, r);
      auto to_u = [&](const std::vector<double>& hx, std::vector<double>& out_h) {
        for (std::size_t a = 0; a < nch; ++a)
          for (std::size_t b = 0; b < nch; ++b)
            out_h[a * nch + b] = dscale.at(a, px) * hx[a * nch + b] * dscale.at(b, px);
        for (std::size_t c = 0; c < nch; ++c) out_h[c * nch + c] += ecurv.at(c, px);
      };
      to_u(h, hu);
      for (std::size_t c = 0; c < nch; ++c) rhs[c] = dscale.at(c, px) * dL_dp.at(c, px);
      hwork = hu;
      if (!detail::cholesky_solve(hwork, rhs, nch)) {
        ++out.diag.hessian_fallbacks;
        // Gauss-Newton variant, then growing ridge until it factors.
        std::vector<double> h_gn(nch * nch, 0.0);
        for (std::size_t j = 0; j < nch; ++j)
          for (std::size_t k = j; k < nch; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < nr; ++i) {
              const cplx a = jac[i * nch + j], b = jac[i * nch + k];
              acc += a.real() * b.real() + a.imag() * b.imag();
            }
            h_gn[j * nch + k] = 2.0 * acc;
            h_gn[k * nch + j] = 2.0 * acc;
          }
        for (std::size_t c = 0; c < nch; ++c) h_gn[c * nch + c] += 2.0 * lambda_p;
        std::vector<double> hu_gn(nch * nch);
        to_u(h_gn, hu_gn);
        double ridge = 0.0;
        for (;;) {
          hwork = hu_gn;
          for (std::size_t c = 0; c < nch; ++c) hwork[c * nch + c] += ridge;
          for (std::size_t c = 0; c < nch; ++c)
            rhs[c] = dscale.at(c, px) * dL_dp.at(c, px);
          if (detail::cholesky_solve(hwork, rhs, nch)) break;
          ridge = ridge == 0.0 ? 1e-12 : ridge * 100.0;
          if (ridge > 1e8) throw SolverError("nlreg_backward: unsalvageable pixel Hessian");
        }
      }
      for (std::size_t c = 0; c < nch; ++c) g_maps.at(c, px) = dscale.at(c, px) * rhs[c];
    }
  }

  // Read off the gradients from g.
  std::vector<double> pp(nch), gg(nch);
  std::vector<cplx> q(nr), jac(nr * nch);
  for (std::size_t px = 0; px < npx; ++px) {
    p_star.gather(px, pp);
    g_maps.gather(px, gg);
    model.jacobian(pp, jac);
    for (std::size_t i = 0; i < nr; ++i) {
      cplx acc{0.0, 0.0};
      for (std::size_t c = 0; c < nch; ++c) acc += jac[i * nch + c] * gg[c];
      out.d_y.data[i * npx + px] = acc;
    }
    if (out.lambda_valid) {
      for (std::size_t c = 0; c < nch; ++c) {
        out.d_p_reg.at(c, px) = 2.0 * lambda_p * gg[c];
        out.d_lambda_p -= 2.0 * (pp[c] - p_reg.at(c, px)) * gg[c];
      }
    }
  }
  return out;
}

/// Objective of the non-linear subproblem, for diagnostics and tests.
inline double nlreg_objective(const PixelSignalModel& model, const ComplexArray& y,
                              const ParameterMaps& p_reg, double lambda_p,
                              const ParameterMaps& p) {
  ComplexArray q = q_forward(model, p);
  q -= y;
  double f = norm2_sq(q);
  RealArray d = p.maps;
  d -= p_reg.maps;
  return f + lambda_p * norm2_sq(d);
}

}  // namespace qpinqi
