#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "qpinqi/nlreg.hpp"
#include "qpinqi/rng.hpp"

using namespace qpinqi;

namespace {

const std::vector<double> kTaus{0.5, 1.0, 1.5, 2.0, 8.0};

ParameterMaps const_maps(std::size_t nx, std::size_t ny, double a, double b, double r) {
  ParameterMaps p(3, nx, ny);
  for (std::size_t px = 0; px < p.pixels(); ++px) {
    p.at(ReM0, px) = a;
    p.at(ImM0, px) = b;
    p.at(R1, px) = r;
  }
  return p;
}

ParameterMaps random_truth(Rng& rng, std::size_t nx, std::size_t ny) {
  ParameterMaps p(3, nx, ny);
  for (std::size_t px = 0; px < p.pixels(); ++px) {
    const double mag = rng.uniform(0.4, 1.0);
    const double phase = rng.uniform(-0.6, 0.6);
    p.at(ReM0, px) = mag * std::cos(phase);
    p.at(ImM0, px) = mag * std::sin(phase);
    p.at(R1, px) = rng.uniform(0.3, 4.0);
  }
  return p;
}

/// Single-parameter test model: R1 with fixed, known M0 and one tau.
struct R1OnlyModel : PixelSignalModel {
  cplx m0;
  double tau;
  R1OnlyModel(cplx m, double t) : m0(m), tau(t) {}
  std::size_t param_count() const override { return 1; }
  std::size_t output_count() const override { return 1; }
  void eval(std::span<const double> p, std::span<cplx> q) const override {
    q[0] = m0 * (1.0 - std::exp(-tau * p[0]));
  }
  void jacobian(std::span<const double> p, std::span<cplx> jac) const override {
    jac[0] = m0 * tau * std::exp(-tau * p[0]);
  }
  void residual_curvature(std::span<const double> p, std::span<const cplx> r,
                          std::span<double> h) const override {
    const cplx d2 = -m0 * tau * tau * std::exp(-tau * p[0]);
    h[0] += r[0].real() * d2.real() + r[0].imag() * d2.imag();
  }
};

/// Linear test model q(p) = M p with complex M; the regularized problem has a
/// closed-form ridge solution and closed-form implicit gradients.
struct LinearModel : PixelSignalModel {
  std::size_t nr, nch;
  std::vector<cplx> m;  // row-major [nr x nch]
  LinearModel(std::size_t r, std::size_t c, Rng& rng) : nr(r), nch(c), m(r * c) {
    for (auto& v : m) v = cplx{rng.normal(), rng.normal()};
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

NlRegConfig tight_config() {
  NlRegConfig cfg;
  cfg.lbfgs.grad_tol = 1e-12;
  cfg.lbfgs.max_iter = 300;
  return cfg;
}

}  // namespace

TEST_CASE("huge lambda pins the solution to the prior", "[nlreg]") {
  SaturationModel model(kTaus);
  Rng rng(2);
  const std::size_t nx = 3, ny = 3;
  ParameterMaps p_true = random_truth(rng, nx, ny);
  ComplexArray y = q_forward(model, p_true);
  ParameterMaps p_reg = random_truth(rng, nx, ny);
  auto bounds = BoundsTransform::saturation_defaults();
  auto res = nlreg_forward(model, y, p_reg, 1e8, bounds, p_reg, tight_config());
  for (std::size_t i = 0; i < res.p.maps.size(); ++i)
    REQUIRE(std::abs(res.p.maps.data[i] - p_reg.maps.data[i]) <=
            1e-3 * std::max(1.0, std::abs(p_reg.maps.data[i])));
}

TEST_CASE("noise-free data is recovered exactly", "[nlreg]") {
  SaturationModel model(kTaus);
  Rng rng(3);
  const std::size_t nx = 4, ny = 4;
  ParameterMaps p_true = random_truth(rng, nx, ny);
  ComplexArray y = q_forward(model, p_true);
  ParameterMaps p_init = const_maps(nx, ny, 0.5, 0.0, 1.0);
  ParameterMaps p_reg = p_init;
  auto bounds = BoundsTransform::saturation_defaults();
  auto res = nlreg_forward(model, y, p_reg, 0.0, bounds, p_init, tight_config());
  for (std::size_t i = 0; i < res.p.maps.size(); ++i)
    REQUIRE(std::abs(res.p.maps.data[i] - p_true.maps.data[i]) <=
            1e-6 * std::max(0.1, std::abs(p_true.maps.data[i])));

  // Cross-check one pixel against the grid+polish oracle.
  std::vector<cplx> ypx(kTaus.size());
  for (std::size_t i = 0; i < kTaus.size(); ++i) ypx[i] = y.data[i * 16 + 5];
  double oracle[3];
  oracles::grid_polish_pixel(kTaus, ypx, 0.0, {0, 0, 0}, -0.9, 19.0, oracle);
  REQUIRE(std::abs(res.p.at(R1, 5) - oracle[2]) < 1e-5);
  REQUIRE(std::abs(res.p.at(ReM0, 5) - oracle[0]) < 1e-6);
}

TEST_CASE("single pixel, known M0, one tau matches the closed form", "[nlreg]") {
  const cplx m0{1.3, 0.4};
  const double tau = 0.8, r_true = 1.9;
  R1OnlyModel model(m0, tau);
  ParameterMaps p_true(1, 1, 1);
  p_true.at(0, 0) = r_true;
  ComplexArray y = q_forward(model, p_true);

  const cplx ratio = y.data[0] / m0;
  const double closed_form = -std::log(1.0 - ratio.real()) / tau;
  REQUIRE(closed_form == Catch::Approx(r_true).epsilon(1e-12));

  BoundsTransform bounds({-1.0}, {20.0});
  ParameterMaps init(1, 1, 1);
  init.at(0, 0) = 1.0;
  auto res = nlreg_forward(model, y, init, 0.0, bounds, init, tight_config());
  REQUIRE(res.p.at(0, 0) == Catch::Approx(closed_form).epsilon(1e-8));
}

TEST_CASE("objective at the output never exceeds the initial objective", "[nlreg]") {
  SaturationModel model(kTaus);
  Rng rng(5);
  auto bounds = BoundsTransform::saturation_defaults();
  NlRegConfig cfg;  // default tolerances
  for (int trial = 0; trial < 50; ++trial) {
    ParameterMaps p_true = random_truth(rng, 2, 2);
    ComplexArray y = q_forward(model, p_true);
    for (auto& v : y.data) v += 0.05 * cplx{rng.normal(), rng.normal()};
    ParameterMaps p_reg = random_truth(rng, 2, 2);
    ParameterMaps p_init = random_truth(rng, 2, 2);
    const double lambda = rng.uniform(0.0, 2.0);
    auto res = nlreg_forward(model, y, p_reg, lambda, bounds, p_init, cfg);
    // p_init passes through an interior clamp before the solve; compare
    // against the same starting point.
    ParameterMaps clamped = p_init;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t px = 0; px < clamped.pixels(); ++px)
        clamped.at(c, px) = bounds.clamp_interior(c, clamped.at(c, px), cfg.init_margin);
    REQUIRE(nlreg_objective(model, y, p_reg, lambda, res.p) <=
            nlreg_objective(model, y, p_reg, lambda, clamped) + 1e-12);
  }
}

TEST_CASE("joint solve equals per-pixel solve", "[nlreg]") {
  SaturationModel model(kTaus);
  Rng rng(7);
  ParameterMaps p_true = random_truth(rng, 3, 2);
  ComplexArray y = q_forward(model, p_true);
  for (auto& v : y.data) v += 0.02 * cplx{rng.normal(), rng.normal()};
  ParameterMaps p_reg = random_truth(rng, 3, 2);
  auto bounds = BoundsTransform::saturation_defaults();

  NlRegConfig per_pixel = tight_config();
  NlRegConfig joint = tight_config();
  joint.joint_solve = true;
  joint.lbfgs.max_iter = 2000;

  auto a = nlreg_forward(model, y, p_reg, 0.4, bounds, p_reg, per_pixel);
  auto b = nlreg_forward(model, y, p_reg, 0.4, bounds, p_reg, joint);
  for (std::size_t i = 0; i < a.p.maps.size(); ++i)
    REQUIRE(std::abs(a.p.maps.data[i] - b.p.maps.data[i]) < 1e-10);
}

TEST_CASE("warm start changes the minimizer only within tolerance", "[nlreg]") {
  SaturationModel model(kTaus);
  Rng rng(11);
  ParameterMaps p_true = random_truth(rng, 3, 3);
  ComplexArray y = q_forward(model, p_true);
  for (auto& v : y.data) v += 0.03 * cplx{rng.normal(), rng.normal()};
  ParameterMaps p_reg = random_truth(rng, 3, 3);
  auto bounds = BoundsTransform::saturation_defaults();
  auto cfg = tight_config();

  auto cold = nlreg_forward(model, y, p_reg, 0.5, bounds, p_reg, cfg);
  auto warm = nlreg_forward(model, y, p_reg, 0.5, bounds, cold.p, cfg);
  for (std::size_t i = 0; i < cold.p.maps.size(); ++i)
    REQUIRE(std::abs(cold.p.maps.data[i] - warm.p.maps.data[i]) < 1e-8);
}

TEST_CASE("backward gradients match finite differences", "[nlreg][slow]") {
  SaturationModel model(kTaus);
  Rng rng(13);
  const std::size_t nx = 4, ny = 4, npx = nx * ny;
  ParameterMaps p_true = random_truth(rng, nx, ny);
  ComplexArray y = q_forward(model, p_true);
  for (auto& v : y.data) v += 0.05 * cplx{rng.normal(), rng.normal()};
  ParameterMaps p_reg = random_truth(rng, nx, ny);
  double lambda_p = 0.7;
  auto bounds = BoundsTransform::saturation_defaults();
  auto cfg = tight_config();
  ParameterMaps p_init = const_maps(nx, ny, 0.5, 0.0, 1.0);

  ParameterMaps target = random_truth(rng, nx, ny);
  auto loss_of = [&](const ParameterMaps& p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.maps.size(); ++i) {
      const double d = p.maps.data[i] - target.maps.data[i];
      acc += d * d;
    }
    return acc;
  };
  auto forward_loss = [&]() {
    auto r = nlreg_forward(model, y, p_reg, lambda_p, bounds, p_init, cfg);
    return loss_of(r.p);
  };

  auto sol = nlreg_forward(model, y, p_reg, lambda_p, bounds, p_init, cfg);
  ParameterMaps cot(3, nx, ny);
  for (std::size_t i = 0; i < cot.maps.size(); ++i)
    cot.maps.data[i] = 2.0 * (sol.p.maps.data[i] - target.maps.data[i]);
  auto grads = nlreg_backward(model, y, p_reg, lambda_p, bounds, sol.p, cot, cfg);
  REQUIRE(grads.lambda_valid);

  const double eps = 1e-5;

  SECTION("zero cotangent gives zero gradients") {
    ParameterMaps zero(3, nx, ny);
    auto g0 = nlreg_backward(model, y, p_reg, lambda_p, bounds, sol.p, zero, cfg);
    REQUIRE(norm2(g0.d_y) == 0.0);
    REQUIRE(norm2(g0.d_p_reg.maps) == 0.0);
    REQUIRE(g0.d_lambda_p == 0.0);
  }

  SECTION("d y") {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < y.size(); i += 3) {
      double* re = reinterpret_cast<double*>(&y.data[i]);
      fd.push_back(oracles::central_diff(forward_loss, re[0], eps));
      an.push_back(2.0 * grads.d_y.data[i].real());
      fd.push_back(oracles::central_diff(forward_loss, re[1], eps));
      an.push_back(2.0 * grads.d_y.data[i].imag());
    }
    REQUIRE(oracles::rel_err(fd, an) <= 1e-4);
  }

  SECTION("d p_reg") {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < p_reg.maps.size(); i += 2) {
      fd.push_back(oracles::central_diff(forward_loss, p_reg.maps.data[i], eps));
      an.push_back(grads.d_p_reg.maps.data[i]);
    }
    REQUIRE(oracles::rel_err(fd, an) <= 1e-4);
  }

  SECTION("d lambda") {
    const double fd = oracles::central_diff(forward_loss, lambda_p, eps);
    REQUIRE(oracles::rel_err(fd, grads.d_lambda_p) <= 1e-4);
  }

  SECTION("global CG backward agrees with per-pixel blocks") {
    NlRegConfig gcfg = cfg;
    gcfg.global_cg_backward = true;
    auto g2 = nlreg_backward(model, y, p_reg, lambda_p, bounds, sol.p, cot, gcfg);
    ComplexArray dy = g2.d_y;
    dy -= grads.d_y;
    REQUIRE(norm2(dy) <= 1e-7 * std::max(1.0, norm2(grads.d_y)));
    RealArray dpr = g2.d_p_reg.maps;
    dpr -= grads.d_p_reg.maps;
    REQUIRE(norm2(dpr) <= 1e-7 * std::max(1.0, norm2(grads.d_p_reg.maps)));
    REQUIRE(oracles::rel_err(g2.d_lambda_p, grads.d_lambda_p) <= 1e-7);
  }

  SECTION("lambda_p = 0 omits the prior gradients") {
    auto sol0 = nlreg_forward(model, y, p_reg, 0.0, bounds, p_init, cfg);
    auto g0 = nlreg_backward(model, y, p_reg, 0.0, bounds, sol0.p, cot, cfg);
    REQUIRE_FALSE(g0.lambda_valid);
    REQUIRE(g0.d_lambda_p == 0.0);
    REQUIRE(norm2(g0.d_p_reg.maps) == 0.0);
    REQUIRE(norm2(g0.d_y) > 0.0);
  }
  (void)npx;
}

TEST_CASE("linear model matches the closed-form ridge oracle", "[nlreg]") {
  Rng rng(17);
  const std::size_t nr = 5, nch = 3;
  LinearModel model(nr, nch, rng);
  // Scale down so the solution stays well inside the box.
  for (auto& v : model.m) v *= 0.5;

  const double lambda = 0.8;
  ParameterMaps p_reg(nch, 1, 1), p_init(nch, 1, 1);
  for (std::size_t c = 0; c < nch; ++c) {
    p_reg.at(c, 0) = rng.uniform(-0.2, 0.2);
    p_init.at(c, 0) = 0.0;
  }
  ComplexArray y({nr, 1, 1});
  for (auto& v : y.data) v = 0.3 * cplx{rng.normal(), rng.normal()};
  BoundsTransform bounds({-2.0, -2.0, -2.0}, {2.0, 2.0, 2.0});

  // Closed form: p* = (G + lambda I)^{-1} (c + lambda p_reg), G = Re(M^H M).
  std::vector<double> G(nch * nch, 0.0), rhs(nch, 0.0);
  for (std::size_t a = 0; a < nch; ++a) {
    for (std::size_t b = 0; b < nch; ++b)
      for (std::size_t i = 0; i < nr; ++i) {
        const cplx ma = model.m[i * nch + a], mb = model.m[i * nch + b];
        G[a * nch + b] += ma.real() * mb.real() + ma.imag() * mb.imag();
      }
    for (std::size_t i = 0; i < nr; ++i) {
      const cplx ma = model.m[i * nch + a];
      rhs[a] += ma.real() * y.data[i].real() + ma.imag() * y.data[i].imag();
    }
    rhs[a] += lambda * p_reg.at(a, 0);
  }
  std::vector<double> Greg = G;
  for (std::size_t c = 0; c < nch; ++c) Greg[c * nch + c] += lambda;
  auto p_closed = oracles::dense_solve_real(Greg, rhs, nch);

  auto cfg = tight_config();
  cfg.lbfgs.max_iter = 500;
  auto sol = nlreg_forward(model, y, p_reg, lambda, bounds, p_init, cfg);
  for (std::size_t c = 0; c < nch; ++c)
    REQUIRE(sol.p.at(c, 0) == Catch::Approx(p_closed[c]).margin(1e-10));

  // Implicit gradients vs the analytic ridge derivatives.
  ParameterMaps cot(nch, 1, 1);
  for (std::size_t c = 0; c < nch; ++c) cot.at(c, 0) = rng.normal();
  auto grads = nlreg_backward(model, y, p_reg, lambda, bounds, sol.p, cot, cfg);

  std::vector<double> v(nch);
  for (std::size_t c = 0; c < nch; ++c) v[c] = cot.at(c, 0);
  auto u = oracles::dense_solve_real(Greg, v, nch);  // (G+lambda)^(-1) v

  for (std::size_t c = 0; c < nch; ++c)
    REQUIRE(grads.d_p_reg.at(c, 0) == Catch::Approx(lambda * u[c]).margin(1e-10));

  double dlam = 0.0;
  for (std::size_t c = 0; c < nch; ++c) dlam -= (sol.p.at(c, 0) - p_reg.at(c, 0)) * u[c];
  REQUIRE(grads.d_lambda_p == Catch::Approx(dlam).margin(1e-10));

  for (std::size_t i = 0; i < nr; ++i) {
    cplx expect{0.0, 0.0};
    for (std::size_t c = 0; c < nch; ++c) expect += model.m[i * nch + c] * (0.5 * u[c]);
    REQUIRE(std::abs(grads.d_y.data[i] - expect) < 1e-10);
  }
}

TEST_CASE("u-space and x-space backward routes agree", "[nlreg]") {
  SaturationModel model(kTaus);
  Rng rng(19);
  ParameterMaps p_true = random_truth(rng, 2, 2);
  ComplexArray y = q_forward(model, p_true);
  for (auto& v : y.data) v += 0.02 * cplx{rng.normal(), rng.normal()};
  ParameterMaps p_reg = random_truth(rng, 2, 2);
  const double lambda = 0.6;
  auto bounds = BoundsTransform::saturation_defaults();
  auto cfg = tight_config();

  auto sol = nlreg_forward(model, y, p_reg, lambda, bounds, p_reg, cfg);
  ParameterMaps cot(3, 2, 2);
  for (std::size_t i = 0; i < cot.maps.size(); ++i) cot.maps.data[i] = rng.normal();
  auto gx = nlreg_backward(model, y, p_reg, lambda, bounds, sol.p, cot, cfg);

  // u-space route per pixel: H_u = D H_x D, v_u = D v, then the same
  // gradient formulas read through the chain rule.
  const std::size_t npx = 4;
  std::vector<double> pp(3), h(9), hu(9), rhs(3);
  std::vector<cplx> q(5), jac(15), r(5);
  for (std::size_t px = 0; px < npx; ++px) {
    sol.p.gather(px, pp);
    model.eval_jacobian(pp, q, jac);
    for (std::size_t i = 0; i < 5; ++i) r[i] = q[i] - y.data[i * npx + px];
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) {
        double acc = 0.0;
        for (std::size_t i = 0; i < 5; ++i) {
          const cplx ja = jac[i * 3 + a], jb = jac[i * 3 + b];
          acc += ja.real() * jb.real() + ja.imag() * jb.imag();
        }
        h[a * 3 + b] = acc;
      }
    model.residual_curvature(pp, r, h);
    for (std::size_t c = 0; c < 3; ++c) h[c * 3 + c] += lambda;
    for (auto& vv : h) vv *= 2.0;

    double d[3];
    for (std::size_t c = 0; c < 3; ++c) d[c] = bounds.dxdu(c, bounds.invert(c, pp[c]));
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) hu[a * 3 + b] = d[a] * h[a * 3 + b] * d[b];
    for (std::size_t c = 0; c < 3; ++c) rhs[c] = d[c] * cot.at(c, px);
    auto gu = oracles::dense_solve_real(hu, rhs, 3);
    // dL/dp_reg = -g_u^T d(grad_u F)/dp_reg = 2 lambda D g_u
    for (std::size_t c = 0; c < 3; ++c) {
      const double via_u = 2.0 * lambda * d[c] * gu[c];
      REQUIRE(via_u == Catch::Approx(gx.d_p_reg.at(c, px)).margin(1e-8));
    }
  }
}
