#pragma once

// Finite-difference validation harness behind `qpinqi gradcheck` and the
// acceptance suite. Every analytic gradient path is compared against central
// differences of the corresponding forward computation on small instances.

#include <functional>
#include <string>
#include <vector>

#include "qpinqi/pinqi.hpp"
#include "qpinqi/rng.hpp"
#include "qpinqi/synth.hpp"

namespace qpinqi {

struct GradCheckRow {
  std::string target;
  std::string family;
  double rel_err = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

namespace gradcheck_detail {

inline double central_diff(const std::function<double()>& f, double& slot, double eps) {
  const double orig = slot;
  slot = orig + eps;
  const double fp = f();
  slot = orig - eps;
  const double fm = f();
  slot = orig;
  return (fp - fm) / (2.0 * eps);
}

inline double rel_err(const std::vector<double>& fd, const std::vector<double>& an) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    diff += (fd[i] - an[i]) * (fd[i] - an[i]);
    na += fd[i] * fd[i];
    nb += an[i] * an[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

inline GradCheckRow row(const std::string& target, const std::string& family,
                        double err, double threshold) {
  return {target, family, err, threshold, err <= threshold};
}

inline CoilSensitivities random_coils(Rng& rng, std::size_t nc, std::size_t nx,
                                      std::size_t ny, bool normalize) {
  ComplexArray maps({nc, nx, ny});
  for (auto& v : maps.data) v = cplx{rng.normal(), rng.normal()};
  if (normalize) {
    const std::size_t npx = nx * ny;
    for (std::size_t px = 0; px < npx; ++px) {
      double s = 0.0;
      for (std::size_t c = 0; c < nc; ++c) s += std::norm(maps.data[c * npx + px]);
      const double inv = 1.0 / std::sqrt(s);
      for (std::size_t c = 0; c < nc; ++c) maps.data[c * npx + px] *= inv;
    }
  }
  return CoilSensitivities(std::move(maps), normalize);
}

inline SamplingMasks random_masks(Rng& rng, std::size_t nr, std::size_t ny,
                                  double density) {
  Array<std::uint8_t> lines({nr, ny});
  for (std::size_t i = 0; i < nr; ++i) {
    lines.at(i, ny / 2) = 1;
    for (std::size_t j = 0; j < ny; ++j)
      if (rng.uniform() < density) lines.at(i, j) = 1;
  }
  return SamplingMasks(std::move(lines));
}

inline ParameterMaps random_maps(Rng& rng, std::size_t nx, std::size_t ny) {
  ParameterMaps p(3, nx, ny);
  for (std::size_t px = 0; px < p.pixels(); ++px) {
    const double mag = rng.uniform(0.4, 1.0);
    const double ph = rng.uniform(-0.5, 0.5);
    p.at(ReM0, px) = mag * std::cos(ph);
    p.at(ImM0, px) = mag * std::sin(ph);
    p.at(R1, px) = rng.uniform(0.4, 3.0);
  }
  return p;
}

/// q(p) = M p; the ridge-regression reference model.
class LinearTestModel : public PixelSignalModel {
 public:
  std::size_t nr, nch;
  std::vector<cplx> m;
  LinearTestModel(std::size_t r, std::size_t c, Rng& rng) : nr(r), nch(c), m(r * c) {
    for (auto& v : m) v = 0.5 * cplx{rng.normal(), rng.normal()};
  }
  std::size_t param_count() const override { return nch; }
  std::size_t output_count() const override { return nr; }
  void eval(std::span<const double> p, std::span<cplx> q) const override {
    for (std::size_t i = 0; i < nr; ++i) {
      cplx acc{0.0, 0.0};
      for (std::size_t c = 0; c < nch; ++c) acc += m[i * nch + c] * p[c];
      q[i] = acc;
    }
  }
  void jacobian(std::span<const double>, std::span<cplx> jac) const override {
    for (std::size_t i = 0; i < m.size(); ++i) jac[i] = m[i];
  }
  void residual_curvature(std::span<const double>, std::span<const cplx>,
                          std::span<double>) const override {}
};

}  // namespace gradcheck_detail

/// Linear data-consistency layer: priors, lambdas, k-space, coil maps vs
/// central differences of a quadratic outer loss on an 8x8, 2-coil, 2-prior
/// instance.
inline std::vector<GradCheckRow> gradcheck_lindc(double eps = 1e-5,
                                                 std::uint64_t seed = 29) {
  namespace gd = gradcheck_detail;
  Rng rng(seed);
  const std::size_t nx = 8, ny = 8, nr = 2, nc = 2;
  AcquisitionModel A(gd::random_masks(rng, nr, ny, 0.5),
                     gd::random_coils(rng, nc, nx, ny, false));
  ComplexArray k({nr, nc, nx, ny});
  for (std::size_t i = 0; i < nr; ++i)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t j = 0; j < ny; ++j)
          if (A.masks.sampled(i, j)) k.at(i, c, x, j) = cplx{rng.normal(), rng.normal()};
  std::vector<Prior> priors(2);
  for (auto& pr : priors) {
    pr.y = ComplexArray({nr, nx, ny});
    for (auto& v : pr.y.data) v = cplx{rng.normal(), rng.normal()};
    pr.lambda = rng.uniform(0.2, 0.6);
  }
  ComplexArray target({nr, nx, ny});
  for (auto& v : target.data) v = cplx{rng.normal(), rng.normal()};

  const CgConfig cfg{1e-12, 3000};
  auto loss = [&]() {
    auto [y, res] = lindc_forward(k, A, priors, cfg);
    y -= target;
    return norm2_sq(y);
  };
  auto [y_star, res] = lindc_forward(k, A, priors, cfg);
  ComplexArray cot = y_star;
  cot -= target;
  auto grads = lindc_backward(k, A, priors, y_star, cot, cfg);

  std::vector<GradCheckRow> rows;
  {
    std::vector<double> fd, an;
    for (auto& pr : priors)
      for (std::size_t i = 0; i < pr.y.size(); i += 7) {
        double* re = reinterpret_cast<double*>(&pr.y.data[i]);
        fd.push_back(gd::central_diff(loss, re[0], eps));
        fd.push_back(gd::central_diff(loss, re[1], eps));
      }
    for (std::size_t p = 0; p < priors.size(); ++p)
      for (std::size_t i = 0; i < priors[p].y.size(); i += 7) {
        an.push_back(2.0 * grads.d_priors[p].data[i].real());
        an.push_back(2.0 * grads.d_priors[p].data[i].imag());
      }
    rows.push_back(gd::row("lindc", "priors", gd::rel_err(fd, an), 1e-4));
  }
  {
    std::vector<double> fd, an;
    for (std::size_t p = 0; p < priors.size(); ++p) {
      fd.push_back(gd::central_diff(loss, priors[p].lambda, eps));
      an.push_back(grads.d_lambdas[p]);
    }
    rows.push_back(gd::row("lindc", "lambdas", gd::rel_err(fd, an), 1e-4));
  }
  {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < k.size(); i += 13) {
      const std::size_t j = i % ny;
      const std::size_t acq = i / (nc * nx * ny);
      if (!A.masks.sampled(acq, j)) continue;
      double* re = reinterpret_cast<double*>(&k.data[i]);
      fd.push_back(gd::central_diff(loss, re[0], eps));
      fd.push_back(gd::central_diff(loss, re[1], eps));
      an.push_back(2.0 * grads.d_k.data[i].real());
      an.push_back(2.0 * grads.d_k.data[i].imag());
    }
    rows.push_back(gd::row("lindc", "kspace", gd::rel_err(fd, an), 1e-4));
  }
  {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < A.coils.maps.size(); i += 5) {
      double* re = reinterpret_cast<double*>(&A.coils.maps.data[i]);
      fd.push_back(gd::central_diff(loss, re[0], eps));
      fd.push_back(gd::central_diff(loss, re[1], eps));
      an.push_back(2.0 * grads.d_coils.data[i].real());
      an.push_back(2.0 * grads.d_coils.data[i].imag());
    }
    rows.push_back(gd::row("lindc", "coils", gd::rel_err(fd, an), 1e-4));
  }
  return rows;
}

/// Non-linear regression layer: y, p_reg, lambda_p vs central differences on
/// a 4x4 5-delay instance, plus the closed-form ridge comparison on the
/// linear test model.
inline std::vector<GradCheckRow> gradcheck_nlreg(double eps = 1e-5,
                                                 std::uint64_t seed = 13) {
  namespace gd = gradcheck_detail;
  Rng rng(seed);
  const std::size_t nx = 4, ny = 4;
  SaturationModel model({0.5, 1.0, 1.5, 2.0, 8.0});
  ParameterMaps p_true = gd::random_maps(rng, nx, ny);
  ComplexArray y = q_forward(model, p_true);
  for (auto& v : y.data) v += 0.05 * cplx{rng.normal(), rng.normal()};
  ParameterMaps p_reg = gd::random_maps(rng, nx, ny);
  double lambda_p = 0.7;
  auto bounds = BoundsTransform::saturation_defaults();
  NlRegConfig cfg;
  cfg.lbfgs.grad_tol = 1e-11;
  cfg.lbfgs.max_iter = 300;
  ParameterMaps p_init(3, nx, ny);
  for (std::size_t px = 0; px < p_init.pixels(); ++px) {
    p_init.at(ReM0, px) = 0.5;
    p_init.at(R1, px) = 1.0;
  }
  ParameterMaps target = gd::random_maps(rng, nx, ny);

  auto loss = [&]() {
    auto r = nlreg_forward(model, y, p_reg, lambda_p, bounds, p_init, cfg);
    double acc = 0.0;
    for (std::size_t i = 0; i < r.p.maps.size(); ++i) {
      const double d = r.p.maps.data[i] - target.maps.data[i];
      acc += d * d;
    }
    return acc;
  };
  auto sol = nlreg_forward(model, y, p_reg, lambda_p, bounds, p_init, cfg);
  ParameterMaps cot(3, nx, ny);
  for (std::size_t i = 0; i < cot.maps.size(); ++i)
    cot.maps.data[i] = 2.0 * (sol.p.maps.data[i] - target.maps.data[i]);
  auto grads = nlreg_backward(model, y, p_reg, lambda_p, bounds, sol.p, cot, cfg);

  std::vector<GradCheckRow> rows;
  {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < y.size(); i += 3) {
      double* re = reinterpret_cast<double*>(&y.data[i]);
      fd.push_back(gd::central_diff(loss, re[0], eps));
      fd.push_back(gd::central_diff(loss, re[1], eps));
      an.push_back(2.0 * grads.d_y.data[i].real());
      an.push_back(2.0 * grads.d_y.data[i].imag());
    }
    rows.push_back(gd::row("nlreg", "y", gd::rel_err(fd, an), 1e-4));
  }
  {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < p_reg.maps.size(); i += 2) {
      fd.push_back(gd::central_diff(loss, p_reg.maps.data[i], eps));
      an.push_back(grads.d_p_reg.maps.data[i]);
    }
    rows.push_back(gd::row("nlreg", "p_reg", gd::rel_err(fd, an), 1e-4));
  }
  {
    std::vector<double> fd{gd::central_diff(loss, lambda_p, eps)};
    std::vector<double> an{grads.d_lambda_p};
    rows.push_back(gd::row("nlreg", "lambda_p", gd::rel_err(fd, an), 1e-4));
  }
  {
    // Closed-form ridge oracle on the linear model.
    gd::LinearTestModel lin(5, 3, rng);
    const double lam = 0.8;
    ParameterMaps preg(3, 1, 1), pinit(3, 1, 1);
    for (std::size_t c = 0; c < 3; ++c) preg.at(c, 0) = rng.uniform(-0.2, 0.2);
    ComplexArray ylin({5, 1, 1});
    for (auto& v : ylin.data) v = 0.3 * cplx{rng.normal(), rng.normal()};
    BoundsTransform wide({-2, -2, -2}, {2, 2, 2});
    NlRegConfig tight = cfg;
    tight.lbfgs.grad_tol = 1e-12;
    tight.lbfgs.max_iter = 500;
    auto lsol = nlreg_forward(lin, ylin, preg, lam, wide, pinit, tight);
    ParameterMaps lcot(3, 1, 1);
    for (std::size_t c = 0; c < 3; ++c) lcot.at(c, 0) = rng.normal();
    auto lg = nlreg_backward(lin, ylin, preg, lam, wide, lsol.p, lcot, tight);

    // (G + lam I) u = v solved with a tiny dense elimination.
    double G[9] = {0};
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < 5; ++i) {
          const cplx ma = lin.m[i * 3 + a], mb = lin.m[i * 3 + b];
          G[a * 3 + b] += ma.real() * mb.real() + ma.imag() * mb.imag();
        }
    for (std::size_t c = 0; c < 3; ++c) G[c * 3 + c] += lam;
    double u[3], v[3];
    for (std::size_t c = 0; c < 3; ++c) v[c] = lcot.at(c, 0);
    // 3x3 Cramer solve.
    auto det3 = [](const double* a) {
      return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
             a[2] * (a[3] * a[7] - a[4] * a[6]);
    };
    const double d0 = det3(G);
    for (std::size_t c = 0; c < 3; ++c) {
      double Gc[9];
      std::copy(G, G + 9, Gc);
      for (std::size_t rrow = 0; rrow < 3; ++rrow) Gc[rrow * 3 + c] = v[rrow];
      u[c] = det3(Gc) / d0;
    }
    std::vector<double> an, ref;
    for (std::size_t c = 0; c < 3; ++c) {
      an.push_back(lg.d_p_reg.at(c, 0));
      ref.push_back(lam * u[c]);
    }
    double dl = 0.0;
    for (std::size_t c = 0; c < 3; ++c) dl -= (lsol.p.at(c, 0) - preg.at(c, 0)) * u[c];
    an.push_back(lg.d_lambda_p);
    ref.push_back(dl);
    for (std::size_t i = 0; i < 5; ++i) {
      cplx e{0.0, 0.0};
      for (std::size_t c = 0; c < 3; ++c) e += lin.m[i * 3 + c] * (0.5 * u[c]);
      an.push_back(lg.d_y.data[i].real());
      ref.push_back(e.real());
      an.push_back(lg.d_y.data[i].imag());
      ref.push_back(e.imag());
    }
    rows.push_back(gd::row("nlreg", "ridge-closed-form", gd::rel_err(ref, an), 1e-10));
  }
  return rows;
}

/// Convolutional prior: weight and input gradients vs central differences.
inline std::vector<GradCheckRow> gradcheck_prior(double eps = 1e-6,
                                                 std::uint64_t seed = 77) {
  namespace gd = gradcheck_detail;
  Rng rng(seed);
  ConvPriorWeights w(3, 4, 2);
  for (auto* arr : {&w.w1, &w.b1, &w.iter_bias, &w.w2, &w.b2})
    for (auto& v : arr->data) v = 0.3 * rng.normal();
  RealArray x({3, 8, 8}), target({3, 8, 8});
  for (auto& v : x.data) v = rng.normal();
  for (auto& v : target.data) v = rng.normal();
  const std::size_t iteration = 2;

  auto loss = [&]() {
    auto out = prior_forward(x, iteration, w);
    out -= target;
    return norm2_sq(out);
  };
  auto out = prior_forward(x, iteration, w);
  RealArray cot = out;
  cot -= target;
  cot *= 2.0;
  auto grads = prior_backward(x, iteration, w, cot);

  std::vector<GradCheckRow> rows;
  std::vector<std::pair<const char*, std::pair<RealArray*, RealArray*>>> fams = {
      {"w1", {&w.w1, &grads.d_w.w1}},
      {"b1", {&w.b1, &grads.d_w.b1}},
      {"iter_bias", {&w.iter_bias, &grads.d_w.iter_bias}},
      {"w2", {&w.w2, &grads.d_w.w2}},
      {"b2", {&w.b2, &grads.d_w.b2}},
      {"input", {&x, &grads.d_x}},
  };
  for (auto& [name, arrs] : fams) {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < arrs.first->size(); ++i) {
      fd.push_back(gd::central_diff(loss, arrs.first->data[i], eps));
      an.push_back(arrs.second->data[i]);
    }
    rows.push_back(gd::row("prior", name, gd::rel_err(fd, an), 1e-5));
  }
  return rows;
}

/// Signal model derivatives: jvp/vjp/objective-hvp vs central differences.
inline std::vector<GradCheckRow> gradcheck_sigmodel(double eps = 1e-5,
                                                    std::uint64_t seed = 21) {
  namespace gd = gradcheck_detail;
  Rng rng(seed);
  SaturationModel model({0.5, 1.0, 1.5, 2.0, 8.0});
  const std::size_t nx = 5, ny = 4;
  ParameterMaps p = gd::random_maps(rng, nx, ny);
  ParameterMaps dp = gd::random_maps(rng, nx, ny);
  std::vector<GradCheckRow> rows;

  {
    ParameterMaps pp = p, pm = p;
    axpy(eps, dp.maps, pp.maps);
    axpy(-eps, dp.maps, pm.maps);
    auto yp = q_forward(model, pp), ym = q_forward(model, pm);
    auto dy = q_jvp(model, p, dp);
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const cplx f = (yp.data[i] - ym.data[i]) / (2.0 * eps);
      fd.push_back(f.real());
      fd.push_back(f.imag());
      an.push_back(dy.data[i].real());
      an.push_back(dy.data[i].imag());
    }
    rows.push_back(gd::row("sigmodel", "jvp", gd::rel_err(fd, an), 1e-5));
  }
  {
    ComplexArray w({5, nx, ny});
    for (auto& v : w.data) v = cplx{rng.normal(), rng.normal()};
    auto loss = [&]() { return inner_product(w, q_forward(model, p)).real(); };
    auto g = q_vjp(model, p, w);
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < p.maps.size(); ++i) {
      fd.push_back(gd::central_diff(loss, p.maps.data[i], eps));
      an.push_back(g.maps.data[i]);
    }
    rows.push_back(gd::row("sigmodel", "vjp", gd::rel_err(fd, an), 1e-5));
  }
  {
    ComplexArray y({5, nx, ny});
    for (auto& v : y.data) v = cplx{rng.normal(), rng.normal()};
    ParameterMaps p_reg = gd::random_maps(rng, nx, ny);
    const double lambda = 0.3;
    auto grad_at = [&](const ParameterMaps& pt) {
      ComplexArray r = q_forward(model, pt);
      r -= y;
      ParameterMaps g = q_vjp(model, pt, r);
      for (std::size_t i = 0; i < g.maps.size(); ++i)
        g.maps.data[i] = 2.0 * g.maps.data[i] +
                         2.0 * lambda * (pt.maps.data[i] - p_reg.maps.data[i]);
      return g;
    };
    ParameterMaps pp = p, pm = p;
    axpy(eps, dp.maps, pp.maps);
    axpy(-eps, dp.maps, pm.maps);
    auto gp = grad_at(pp), gm = grad_at(pm);
    auto hv = objective_hvp(model, p, y, lambda, dp, true);
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < hv.maps.size(); ++i) {
      fd.push_back((gp.maps.data[i] - gm.maps.data[i]) / (2.0 * eps));
      an.push_back(hv.maps.data[i]);
    }
    rows.push_back(gd::row("sigmodel", "objective-hvp", gd::rel_err(fd, an), 1e-5));
  }
  return rows;
}

/// Whole unrolled pipeline, T = 2, on a 12x12 2-coil 3-delay instance.
inline std::vector<GradCheckRow> gradcheck_endtoend(double eps = 1e-5,
                                                    std::uint64_t seed = 13) {
  namespace gd = gradcheck_detail;
  Rng rng(seed);
  const std::size_t nx = 12, ny = 12, nc = 2;
  std::vector<double> taus{0.5, 1.2, 8.0};
  SaturationModel model(taus);
  AcquisitionModel A(gd::random_masks(rng, taus.size(), ny, 0.45),
                     gd::random_coils(rng, nc, nx, ny, true));
  ParameterMaps p_true = gd::random_maps(rng, nx, ny);
  ComplexArray k = a_forward(q_forward(model, p_true), A);
  for (auto& v : k.data)
    if (v != cplx{0.0, 0.0}) v += 0.01 * cplx{rng.normal(), rng.normal()};
  RealArray mask({nx, ny});
  mask.fill(1.0);

  ModelState state = ModelState::init(2, taus.size(), 3, 4, seed + 1);
  Rng wr(seed + 2);
  for (auto* prior : {&state.image_prior, &state.param_prior})
    for (auto* arr : {&prior->w1, &prior->b1, &prior->iter_bias, &prior->w2, &prior->b2})
      for (auto& v : arr->data) v += 0.02 * wr.normal();

  PinqiConfig cfg;
  cfg.T = 2;
  cfg.cg = CgConfig{1e-12, 3000};
  cfg.nlreg.lbfgs.grad_tol = 1e-11;
  cfg.nlreg.lbfgs.max_iter = 200;

  auto loss_fn = [&]() {
    auto trace = pinqi_reconstruct(k, A, model, state, cfg);
    return pinqi_loss(trace, p_true, mask, cfg).value;
  };
  auto trace = pinqi_reconstruct(k, A, model, state, cfg);
  auto loss = pinqi_loss(trace, p_true, mask, cfg);
  auto grads = pinqi_backward(k, A, model, state, cfg, trace, loss);

  std::vector<GradCheckRow> rows;
  {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < cfg.T; ++i) {
      fd.push_back(gd::central_diff(loss_fn, state.lt_p[i], eps));
      an.push_back(grads.d_state.lt_p[i]);
      fd.push_back(gd::central_diff(loss_fn, state.lt_y[i], eps));
      an.push_back(grads.d_state.lt_y[i]);
      if (i > 0) {
        fd.push_back(gd::central_diff(loss_fn, state.lt_q[i], eps));
        an.push_back(grads.d_state.lt_q[i]);
      }
    }
    rows.push_back(gd::row("endtoend", "lambdas", gd::rel_err(fd, an), 1e-3));
  }
  {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < state.image_prior.w1.size(); i += 17) {
      fd.push_back(gd::central_diff(loss_fn, state.image_prior.w1.data[i], eps));
      an.push_back(grads.d_state.image_prior.w1.data[i]);
    }
    fd.push_back(gd::central_diff(loss_fn, state.image_prior.b2.data[0], eps));
    an.push_back(grads.d_state.image_prior.b2.data[0]);
    rows.push_back(gd::row("endtoend", "image-prior-weights", gd::rel_err(fd, an), 1e-3));
  }
  {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < state.param_prior.w1.size(); i += 13) {
      fd.push_back(gd::central_diff(loss_fn, state.param_prior.w1.data[i], eps));
      an.push_back(grads.d_state.param_prior.w1.data[i]);
    }
    for (std::size_t i = 0; i < state.param_prior.w2.size(); i += 11) {
      fd.push_back(gd::central_diff(loss_fn, state.param_prior.w2.data[i], eps));
      an.push_back(grads.d_state.param_prior.w2.data[i]);
    }
    rows.push_back(gd::row("endtoend", "param-prior-weights", gd::rel_err(fd, an), 1e-3));
  }
  {
    // Unrolled gradient-descent mode: trainable stepsizes.
    PinqiConfig gdc = cfg;
    gdc.apply_mode(PinqiMode::GradientDescent);
    auto gtrace = pinqi_reconstruct(k, A, model, state, gdc);
    auto gloss = pinqi_loss(gtrace, p_true, mask, gdc);
    auto ggrads = pinqi_backward(k, A, model, state, gdc, gtrace, gloss);
    auto gloss_fn = [&]() {
      auto t = pinqi_reconstruct(k, A, model, state, gdc);
      return pinqi_loss(t, p_true, mask, gdc).value;
    };
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < gdc.T; ++i) {
      fd.push_back(gd::central_diff(gloss_fn, state.lt_gd[i], eps));
      an.push_back(ggrads.d_state.lt_gd[i]);
    }
    rows.push_back(gd::row("endtoend", "gd-stepsizes", gd::rel_err(fd, an), 1e-3));
  }
  return rows;
}

inline std::vector<GradCheckRow> run_gradcheck(const std::string& target, double eps,
                                               std::uint64_t seed) {
  if (target == "lindc") return gradcheck_lindc(eps, seed);
  if (target == "nlreg") return gradcheck_nlreg(eps, seed);
  if (target == "prior") return gradcheck_prior(eps, seed);
  if (target == "sigmodel") return gradcheck_sigmodel(eps, seed);
  if (target == "endtoend") return gradcheck_endtoend(eps, seed);
  throw ConfigError("unknown gradcheck target: " + target);
}

}  // namespace qpinqi
