#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "oracles.hpp"
#include "qpinqi/lindc.hpp"
#include "qpinqi/rng.hpp"

using namespace qpinqi;

namespace {

SamplingMasks random_masks(Rng& rng, std::size_t n_r, std::size_t ny, double density = 0.5) {
  Array<std::uint8_t> lines({n_r, ny});
  for (std::size_t i = 0; i < n_r; ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < ny; ++j) {
      lines.at(i, j) = rng.uniform() < density ? 1 : 0;
      count += lines.at(i, j);
    }
    if (count == 0) lines.at(i, rng.below(ny)) = 1;
  }
  return SamplingMasks(std::move(lines));
}

CoilSensitivities random_coils(Rng& rng, std::size_t n_c, std::size_t nx,
                               std::size_t ny, bool normalize) {
  ComplexArray maps({n_c, nx, ny});
  for (auto& v : maps.data) v = cplx{rng.normal(), rng.normal()};
  if (normalize) {
    const std::size_t npx = nx * ny;
    for (std::size_t px = 0; px < npx; ++px) {
      double s = 0.0;
      for (std::size_t c = 0; c < n_c; ++c) s += std::norm(maps.data[c * npx + px]);
      const double inv = 1.0 / std::sqrt(s);
      for (std::size_t c = 0; c < n_c; ++c) maps.data[c * npx + px] *= inv;
    }
  }
  return CoilSensitivities(std::move(maps), normalize);
}

struct Instance {
  AcquisitionModel A;
  ComplexArray k;
  std::vector<Prior> priors;
};

Instance random_instance(Rng& rng, std::size_t nx, std::size_t ny, std::size_t nr,
                         std::size_t nc, std::size_t n_priors,
                         double lambda_scale = 0.5) {
  Instance inst;
  inst.A = AcquisitionModel(random_masks(rng, nr, ny), random_coils(rng, nc, nx, ny, false));
  inst.k = ComplexArray({nr, nc, nx, ny});
  for (std::size_t i = 0; i < nr; ++i)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t j = 0; j < ny; ++j)
          inst.k.at(i, c, x, j) = inst.A.masks.sampled(i, j)
                                      ? cplx{rng.normal(), rng.normal()}
                                      : cplx{0.0, 0.0};
  for (std::size_t p = 0; p < n_priors; ++p) {
    Prior pr;
    pr.y = ComplexArray({nr, nx, ny});
    for (auto& v : pr.y.data) v = cplx{rng.normal(), rng.normal()};
    pr.lambda = lambda_scale * rng.uniform(0.3, 1.0);
    inst.priors.push_back(std::move(pr));
  }
  return inst;
}

}  // namespace

TEST_CASE("cg on identity and diagonal systems", "[lindc]") {
  CgConfig cfg;
  SECTION("identity converges in one iteration") {
    ComplexArray b({5});
    Rng rng(1);
    for (auto& v : b.data) v = cplx{rng.normal(), rng.normal()};
    auto [x, res] = cg_solve<ComplexArray>([](const ComplexArray& v) { return v; }, b, cfg);
    REQUIRE(res.iters == 1);
    REQUIRE(res.converged);
    x -= b;
    REQUIRE(norm2(x) < 1e-12);
  }
  SECTION("diagonal solve") {
    ComplexArray b({2}, {cplx{2.0, 0.0}, cplx{4.0, 0.0}});
    auto apply = [](const ComplexArray& v) {
      ComplexArray out = v;
      out.data[0] *= 2.0;
      out.data[1] *= 4.0;
      return out;
    };
    auto [x, res] = cg_solve<ComplexArray>(apply, b, cfg);
    REQUIRE(res.converged);
    REQUIRE(std::abs(x.data[0] - cplx{1.0, 0.0}) < 1e-10);
    REQUIRE(std::abs(x.data[1] - cplx{1.0, 0.0}) < 1e-10);
  }
  SECTION("random SPD system vs dense solve") {
    Rng rng(9);
    const std::size_t n = 32;
    std::vector<cplx> m(n * n);
    // M = B^H B + I
    std::vector<cplx> bmat(n * n);
    for (auto& v : bmat) v = cplx{rng.normal(), rng.normal()};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        cplx acc = i == j ? cplx{1.0, 0.0} : cplx{0.0, 0.0};
        for (std::size_t l = 0; l < n; ++l)
          acc += std::conj(bmat[l * n + i]) * bmat[l * n + j];
        m[i * n + j] = acc;
      }
    ComplexArray b({n});
    for (auto& v : b.data) v = cplx{rng.normal(), rng.normal()};
    auto apply = [&](const ComplexArray& v) {
      ComplexArray out({n});
      for (std::size_t i = 0; i < n; ++i) {
        cplx acc{0.0, 0.0};
        for (std::size_t j = 0; j < n; ++j) acc += m[i * n + j] * v.data[j];
        out.data[i] = acc;
      }
      return out;
    };
    CgConfig tight{1e-8, 500};
    auto [x, res] = cg_solve<ComplexArray>(apply, b, tight);
    auto ref = oracles::dense_solve(m, b.data, n);
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      err += std::norm(x.data[i] - ref[i]);
      scale += std::norm(ref[i]);
    }
    REQUIRE(std::sqrt(err / scale) < 1e-6);
  }
  SECTION("non-finite input raises") {
    ComplexArray b({2}, {cplx{1.0, 0.0}, cplx{0.0, 0.0}});
    auto apply = [](const ComplexArray& v) {
      ComplexArray out = v;
      out.data[0] *= std::numeric_limits<double>::quiet_NaN();
      return out;
    };
    REQUIRE_THROWS_AS((cg_solve<ComplexArray>(apply, b, CgConfig{})), SolverError);
  }
}

TEST_CASE("lindc forward", "[lindc]") {
  Rng rng(13);
  const std::size_t nx = 8, ny = 8, nr = 2, nc = 2;

  SECTION("huge prior weight pins the output to the prior") {
    auto inst = random_instance(rng, nx, ny, nr, nc, 1);
    inst.priors[0].lambda = 1e8;
    auto [y, res] = lindc_forward(inst.k, inst.A, inst.priors, CgConfig{});
    ComplexArray diff = y;
    diff -= inst.priors[0].y;
    REQUIRE(norm2(diff) <= 1e-4 * norm2(inst.priors[0].y));
  }

  SECTION("vanishing priors with full sampling recover A^H k") {
    AcquisitionModel A(SamplingMasks::full(nr, ny), random_coils(rng, nc, nx, ny, true));
    ComplexArray k({nr, nc, nx, ny});
    for (auto& v : k.data) v = cplx{rng.normal(), rng.normal()};
    std::vector<Prior> priors(1);
    priors[0].y = ComplexArray({nr, nx, ny});
    for (auto& v : priors[0].y.data) v = cplx{rng.normal(), rng.normal()};
    priors[0].lambda = 1e-12;
    auto [y, res] = lindc_forward(k, A, priors, CgConfig{});
    auto ref = a_adjoint(k, A);
    ref -= y;
    REQUIRE(norm2(ref) <= 1e-6 * norm2(y));
  }

  SECTION("objective at the solution dominates candidate points") {
    auto inst = random_instance(rng, nx, ny, nr, nc, 2);
    auto [y, res] = lindc_forward(inst.k, inst.A, inst.priors, CgConfig{});
    const double f_star = lindc_objective(y, inst.k, inst.A, inst.priors);
    const double slack = 1e-6 * (1.0 + f_star);
    REQUIRE(f_star <=
            lindc_objective(a_adjoint(inst.k, inst.A), inst.k, inst.A, inst.priors) + slack);
    for (const auto& pr : inst.priors)
      REQUIRE(f_star <= lindc_objective(pr.y, inst.k, inst.A, inst.priors) + slack);
  }

  SECTION("output is invariant to prior order") {
    auto inst = random_instance(rng, nx, ny, nr, nc, 3);
    auto [y1, r1] = lindc_forward(inst.k, inst.A, inst.priors, CgConfig{});
    std::vector<Prior> rev(inst.priors.rbegin(), inst.priors.rend());
    auto [y2, r2] = lindc_forward(inst.k, inst.A, rev, CgConfig{});
    y2 -= y1;
    REQUIRE(norm2(y2) <= 1e-12 * norm2(y1));
  }

  SECTION("nonpositive prior weight is rejected") {
    auto inst = random_instance(rng, nx, ny, nr, nc, 1);
    inst.priors[0].lambda = 0.0;
    REQUIRE_THROWS_AS(lindc_forward(inst.k, inst.A, inst.priors, CgConfig{}), ConfigError);
  }
}

namespace {

/// Runs the forward solve and evaluates L = |y* - t|^2 for finite differences.
double forward_loss(const Instance& inst, const ComplexArray& target, const CgConfig& cfg) {
  auto [y, res] = lindc_forward(inst.k, inst.A, inst.priors, cfg);
  y -= target;
  return norm2_sq(y);
}

}  // namespace

TEST_CASE("lindc backward matches finite differences", "[lindc][slow]") {
  Rng rng(29);
  const std::size_t nx = 8, ny = 8, nr = 2, nc = 2;
  Instance inst = random_instance(rng, nx, ny, nr, nc, 2);
  ComplexArray target({nr, nx, ny});
  for (auto& v : target.data) v = cplx{rng.normal(), rng.normal()};

  CgConfig tight{1e-12, 2000};
  auto [y_star, fres] = lindc_forward(inst.k, inst.A, inst.priors, tight);
  ComplexArray cot = y_star;
  cot -= target;  // dL/dconj(y*) for L = |y* - t|^2
  auto grads = lindc_backward(inst.k, inst.A, inst.priors, y_star, cot, tight);

  const double eps = 1e-5;
  auto loss = [&]() { return forward_loss(inst, target, tight); };

  SECTION("prior image gradients") {
    for (std::size_t p = 0; p < inst.priors.size(); ++p) {
      std::vector<double> fd, an;
      for (std::size_t i = 0; i < inst.priors[p].y.size(); i += 7) {
        double* re = reinterpret_cast<double*>(&inst.priors[p].y.data[i]);
        fd.push_back(oracles::central_diff(loss, re[0], eps));
        an.push_back(2.0 * grads.d_priors[p].data[i].real());
        fd.push_back(oracles::central_diff(loss, re[1], eps));
        an.push_back(2.0 * grads.d_priors[p].data[i].imag());
      }
      REQUIRE(oracles::rel_err(fd, an) <= 1e-4);
    }
  }

  SECTION("lambda gradients") {
    std::vector<double> fd, an;
    for (std::size_t p = 0; p < inst.priors.size(); ++p) {
      fd.push_back(oracles::central_diff(loss, inst.priors[p].lambda, eps));
      an.push_back(grads.d_lambdas[p]);
    }
    REQUIRE(oracles::rel_err(fd, an) <= 1e-4);
  }

  SECTION("k-space gradient") {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < inst.k.size(); i += 13) {
      // Skip unsampled slots; they do not influence the solve.
      const std::size_t j = i % ny;
      const std::size_t acq = i / (nc * nx * ny);
      if (!inst.A.masks.sampled(acq, j)) continue;
      double* re = reinterpret_cast<double*>(&inst.k.data[i]);
      fd.push_back(oracles::central_diff(loss, re[0], eps));
      an.push_back(2.0 * grads.d_k.data[i].real());
      fd.push_back(oracles::central_diff(loss, re[1], eps));
      an.push_back(2.0 * grads.d_k.data[i].imag());
    }
    REQUIRE(oracles::rel_err(fd, an) <= 1e-4);
  }

  SECTION("coil gradient") {
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < inst.A.coils.maps.size(); i += 5) {
      double* re = reinterpret_cast<double*>(&inst.A.coils.maps.data[i]);
      fd.push_back(oracles::central_diff(loss, re[0], eps));
      an.push_back(2.0 * grads.d_coils.data[i].real());
      fd.push_back(oracles::central_diff(loss, re[1], eps));
      an.push_back(2.0 * grads.d_coils.data[i].imag());
    }
    REQUIRE(oracles::rel_err(fd, an) <= 1e-4);
  }

  SECTION("zero cotangent gives zero gradients") {
    ComplexArray zero({nr, nx, ny});
    auto g0 = lindc_backward(inst.k, inst.A, inst.priors, y_star, zero, tight);
    REQUIRE(norm2(g0.d_k) == 0.0);
    REQUIRE(norm2(g0.d_coils) == 0.0);
    for (const auto& dp : g0.d_priors) REQUIRE(norm2(dp) == 0.0);
    for (double dl : g0.d_lambdas) REQUIRE(dl == 0.0);
  }
}

TEST_CASE("identical priors get identical lambda gradients", "[lindc]") {
  Rng rng(37);
  Instance inst = random_instance(rng, 8, 8, 2, 2, 1);
  Prior dup;
  dup.y = inst.priors[0].y;
  dup.lambda = inst.priors[0].lambda;
  inst.priors.push_back(std::move(dup));

  auto [y_star, res] = lindc_forward(inst.k, inst.A, inst.priors, CgConfig{});
  ComplexArray cot({2, 8, 8});
  for (auto& v : cot.data) v = cplx{rng.normal(), rng.normal()};
  auto grads = lindc_backward(inst.k, inst.A, inst.priors, y_star, cot, CgConfig{});
  REQUIRE(grads.d_lambdas[0] == Catch::Approx(grads.d_lambdas[1]).epsilon(1e-10));
}

TEST_CASE("pulling toward a prior has nonpositive lambda gradient", "[lindc]") {
  Rng rng(43);
  for (int trial = 0; trial < 10; ++trial) {
    Instance inst = random_instance(rng, 8, 8, 2, 2, 2);
    auto [y_star, res] = lindc_forward(inst.k, inst.A, inst.priors, CgConfig{});
    // L = |y* - y_0|^2: increasing lambda_0 moves y* toward y_0.
    ComplexArray cot = y_star;
    cot -= inst.priors[0].y;
    auto grads = lindc_backward(inst.k, inst.A, inst.priors, y_star, cot, CgConfig{});
    REQUIRE(grads.d_lambdas[0] <= 1e-10);
  }
}

TEST_CASE("gradient error scales linearly with CG tolerance", "[lindc][slow]") {
  Rng rng(53);
  std::vector<double> ratios;
  for (int trial = 0; trial < 10; ++trial) {
    Instance inst = random_instance(rng, 8, 8, 2, 2, 2, /*lambda_scale=*/0.02);
    ComplexArray target({2, 8, 8});
    for (auto& v : target.data) v = cplx{rng.normal(), rng.normal()};

    auto grads_at = [&](double tol) {
      CgConfig cfg{tol, 4000};
      auto [y, r] = lindc_forward(inst.k, inst.A, inst.priors, cfg);
      ComplexArray cot = y;
      cot -= target;
      auto g = lindc_backward(inst.k, inst.A, inst.priors, y, cot, cfg);
      std::vector<double> flat;
      for (const auto& dp : g.d_priors)
        for (const auto& v : dp.data) {
          flat.push_back(v.real());
          flat.push_back(v.imag());
        }
      for (double dl : g.d_lambdas) flat.push_back(dl);
      for (const auto& v : g.d_k.data) {
        flat.push_back(v.real());
        flat.push_back(v.imag());
      }
      return flat;
    };

    auto ref = grads_at(1e-13);
    auto coarse = grads_at(4e-3);
    auto fine = grads_at(2e-3);
    const double e_coarse = oracles::rel_err(coarse, ref);
    const double e_fine = oracles::rel_err(fine, ref);
    if (e_coarse > 1e-14) ratios.push_back(e_fine / e_coarse);
  }
  REQUIRE(ratios.size() >= 5);
  double mean = 0.0;
  for (double r : ratios) mean += r;
  mean /= static_cast<double>(ratios.size());
  REQUIRE(mean >= 0.2);
  REQUIRE(mean <= 0.9);
}
