#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qpinqi/encoding.hpp"
#include "qpinqi/lindc.hpp"
#include "qpinqi/nlreg.hpp"
#include "qpinqi/regnet.hpp"
#include "qpinqi/sigmodel.hpp"

namespace qpinqi {

/// Named variants of the unrolled reconstruction. Every mode is expressed
/// through the switch set below; the enum keeps the CLI surface readable.
enum class PinqiMode {
  Full,
  NoSignal,           // linear unrolling only, one parameter prediction at the end
  NoImagePrior,       // lambda_y = 0, image network removed
  NoParamPrior,       // lambda_p = 0, parameter network removed
  NoNonlinearSolver,  // p^i is the network prediction directly
  GradientDescent,    // inner solver replaced by unrolled gradient steps
  FixedPriors,        // both priors computed once from the zero-filled image
  ImageReconSepReg,   // image reconstruction net only; regression happens outside
  ImageReconE2eReg,   // image reconstruction net + one final regression layer
};

inline PinqiMode pinqi_mode_from_string(const std::string& s) {
  if (s == "full") return PinqiMode::Full;
  if (s == "no-signal" || s == "a") return PinqiMode::NoSignal;
  if (s == "no-image-prior" || s == "b") return PinqiMode::NoImagePrior;
  if (s == "no-param-prior" || s == "c") return PinqiMode::NoParamPrior;
  if (s == "no-nonlinear-solver" || s == "d") return PinqiMode::NoNonlinearSolver;
  if (s == "gradient-descent" || s == "e") return PinqiMode::GradientDescent;
  if (s == "fixed-priors" || s == "f") return PinqiMode::FixedPriors;
  if (s == "image-recon-sep-reg" || s == "h") return PinqiMode::ImageReconSepReg;
  if (s == "image-recon-e2e-reg" || s == "i") return PinqiMode::ImageReconE2eReg;
  throw ConfigError("unknown ablation mode: " + s);
}

inline const char* pinqi_mode_name(PinqiMode m) {
  switch (m) {
    case PinqiMode::Full: return "full";
    case PinqiMode::NoSignal: return "no-signal";
    case PinqiMode::NoImagePrior: return "no-image-prior";
    case PinqiMode::NoParamPrior: return "no-param-prior";
    case PinqiMode::NoNonlinearSolver: return "no-nonlinear-solver";
    case PinqiMode::GradientDescent: return "gradient-descent";
    case PinqiMode::FixedPriors: return "fixed-priors";
    case PinqiMode::ImageReconSepReg: return "image-recon-sep-reg";
    case PinqiMode::ImageReconE2eReg: return "image-recon-e2e-reg";
  }
  return "?";
}

struct PinqiConfig {
  std::size_t T = 5;
  PinqiMode mode = PinqiMode::Full;
  bool use_image_prior = true;
  bool use_param_prior = true;
  bool use_nonlinear_solver = true;
  bool fixed_priors_once = false;
  bool gradient_descent_inner = false;
  bool image_recon_only = false;
  int gd_steps = 5;
  CgConfig cg;
  NlRegConfig nlreg;
  BoundsTransform bounds = BoundsTransform::saturation_defaults();
  /// Stand-in prior weight when an iteration has no quadratic priors at all
  /// (keeps the normal-equation operator positive definite).
  double ridge_floor = 1e-6;
  /// Fixed parameter-map seed used where no parameter estimate exists yet.
  double seed_r1 = 1.0;
  double deep_supervision_weight = 0.05;

  void apply_mode(PinqiMode m) {
    mode = m;
    use_image_prior = true;
    use_param_prior = true;
    use_nonlinear_solver = true;
    fixed_priors_once = false;
    gradient_descent_inner = false;
    image_recon_only = false;
    switch (m) {
      case PinqiMode::Full: break;
      case PinqiMode::NoSignal:
        image_recon_only = true;
        use_param_prior = true;   // one prediction at the end
        use_nonlinear_solver = false;
        break;
      case PinqiMode::NoImagePrior: use_image_prior = false; break;
      case PinqiMode::NoParamPrior: use_param_prior = false; break;
      case PinqiMode::NoNonlinearSolver: use_nonlinear_solver = false; break;
      case PinqiMode::GradientDescent:
        gradient_descent_inner = true;
        use_nonlinear_solver = false;
        break;
      case PinqiMode::FixedPriors: fixed_priors_once = true; break;
      case PinqiMode::ImageReconSepReg:
        image_recon_only = true;
        use_param_prior = false;
        use_nonlinear_solver = false;  // regression runs outside the network
        break;
      case PinqiMode::ImageReconE2eReg:
        image_recon_only = true;
        use_param_prior = false;
        use_nonlinear_solver = true;  // one regression layer at the end
        break;
    }
    validate();
  }

  void validate() const {
    if (T < 1) throw ConfigError("T must be >= 1");
    if (gradient_descent_inner && use_nonlinear_solver)
      throw ConfigError("gradient_descent_inner excludes use_nonlinear_solver");
    if (gd_steps < 1) throw ConfigError("gd_steps must be >= 1");
    if (!(deep_supervision_weight >= 0.0))
      throw ConfigError("deep supervision weight must be >= 0");
  }
};

/// Everything one unroll iteration produced, kept for the backward sweep.
struct IterRecord {
  double lam_p = 0.0, lam_y = 0.0, lam_q = 0.0;
  ComplexArray y_reg;        // image prior prediction (if used)
  ComplexArray y;            // linear subproblem output
  ParameterMaps p_seed;      // fixed lift feeding the parameter prior
  ParameterMaps p_reg;       // parameter prior prediction (if used)
  ParameterMaps p;           // parameter estimate after this iteration
  bool has_p = false;
  bool has_q_prior = false;  // whether the lindc solve saw the q(p^{i-1}) prior
  bool has_y_prior = false;
  bool ridge_prior = false;  // lindc ran with the stand-in ridge prior
  std::vector<ParameterMaps> gd_path;  // iterates of the unrolled-GD inner solver
  CgResult cg_forward;
  NlRegDiag nl_diag;
};

struct UnrolledTrace {
  ComplexArray y0;  // zero-filled adjoint
  std::vector<IterRecord> iters;
  std::optional<IterRecord> final_reg;  // extra regression stage (modes a, i)
  const IterRecord& last() const { return final_reg ? *final_reg : iters.back(); }
};

namespace detail {

/// Real-channel view of a complex image series: channel 2i   = Re(series_i),
/// channel 2i+1 = Im(series_i).
inline RealArray to_real_channels(const ComplexArray& y) {
  const std::size_t nr = y.dim(0), nx = y.dim(1), ny = y.dim(2), npx = nx * ny;
  RealArray out({2 * nr, nx, ny});
  for (std::size_t i = 0; i < nr; ++i)
    for (std::size_t px = 0; px < npx; ++px) {
      out.data[(2 * i) * npx + px] = y.data[i * npx + px].real();
      out.data[(2 * i + 1) * npx + px] = y.data[i * npx + px].imag();
    }
  return out;
}

inline ComplexArray from_real_channels(const RealArray& r) {
  const std::size_t nr = r.dim(0) / 2, nx = r.dim(1), ny = r.dim(2), npx = nx * ny;
  ComplexArray out({nr, nx, ny});
  for (std::size_t i = 0; i < nr; ++i)
    for (std::size_t px = 0; px < npx; ++px)
      out.data[i * npx + px] = cplx{r.data[(2 * i) * npx + px],
                                    r.data[(2 * i + 1) * npx + px]};
  return out;
}

/// Bridge between real-calculus cotangents on the channel view and the
/// dL/dconj(z) storage: g = (u_re + i u_im) / 2.
inline ComplexArray real_channel_cotangent_to_complex(const RealArray& u) {
  ComplexArray g = from_real_channels(u);
  g *= cplx{0.5, 0.0};
  return g;
}

inline RealArray complex_cotangent_to_real_channels(const ComplexArray& g) {
  ComplexArray scaled = g;
  scaled *= cplx{2.0, 0.0};
  return to_real_channels(scaled);
}

}  // namespace detail

namespace detail {

// Smooth-seed constants: magnitude floor against division blow-ups and the
// open interval the recovery ratio is squashed into. The resulting R1 seed
// is bounded away from zero, so the parameter prior can never suggest the
// degenerate T1 -> infinity regime.
inline constexpr double kSeedMagFloor = 0.05;
inline constexpr double kSeedRatioMid = 0.5;
inline constexpr double kSeedRatioHalf = 0.45;  // ratio squashed into (0.05, 0.95)

}  // namespace detail

/// Fixed differentiable lift from an image series to a parameter-space seed.
/// M0 channels read the longest-delay image (the signal is nearly recovered
/// there). The R1 channel inverts the two-point magnitude ratio
///   r = |y_first| / |y_last|  ~  1 - exp(-tau_first R1),
/// smoothly clamped to (0.05, 0.95), giving a bounded pixelwise estimate the
/// parameter prior then refines.
inline ParameterMaps param_seed_from_images(const ComplexArray& y, double tau_first) {
  using namespace detail;
  const std::size_t nr = y.dim(0), nx = y.dim(1), ny = y.dim(2), npx = nx * ny;
  ParameterMaps seed(3, nx, ny);
  const cplx* first = y.data.data();
  const cplx* last = y.data.data() + (nr - 1) * npx;
  for (std::size_t px = 0; px < npx; ++px) {
    seed.at(ReM0, px) = last[px].real();
    seed.at(ImM0, px) = last[px].imag();
    const double m1 = std::sqrt(std::norm(first[px]) + kSeedMagFloor * kSeedMagFloor);
    const double m2 = std::sqrt(std::norm(last[px]) + kSeedMagFloor * kSeedMagFloor);
    const double r = m1 / m2;
    const double rt = kSeedRatioMid +
                      kSeedRatioHalf * std::tanh((r - kSeedRatioMid) / kSeedRatioHalf);
    seed.at(R1, px) = -std::log1p(-rt) / tau_first;
  }
  return seed;
}

/// Pullback of param_seed_from_images: chains a real cotangent on the seed
/// channels into dL/dconj cotangents on the first and last images.
inline void param_seed_backward(const ComplexArray& y, double tau_first,
                                const RealArray& d_seed, ComplexArray& d_y) {
  using namespace detail;
  const std::size_t nr = y.dim(0), npx = y.dim(1) * y.dim(2);
  const cplx* first = y.data.data();
  const cplx* last = y.data.data() + (nr - 1) * npx;
  cplx* d_first = d_y.data.data();
  cplx* d_last = d_y.data.data() + (nr - 1) * npx;
  for (std::size_t px = 0; px < npx; ++px) {
    // M0 channels: real/imag of y_last, bridged to the dL/dconj convention.
    d_last[px] += 0.5 * cplx{d_seed.data[ReM0 * npx + px], d_seed.data[ImM0 * npx + px]};

    const double u = d_seed.data[R1 * npx + px];
    if (u == 0.0) continue;
    const double m1 = std::sqrt(std::norm(first[px]) + kSeedMagFloor * kSeedMagFloor);
    const double m2 = std::sqrt(std::norm(last[px]) + kSeedMagFloor * kSeedMagFloor);
    const double r = m1 / m2;
    const double th = std::tanh((r - kSeedRatioMid) / kSeedRatioHalf);
    const double rt = kSeedRatioMid + kSeedRatioHalf * th;
    const double dR1_drt = 1.0 / ((1.0 - rt) * tau_first);
    const double drt_dr = 1.0 - th * th;
    const double g_r = u * dR1_drt * drt_dr;
    // dr/d|y1| = 1/m2 with d m1/dRe(y1) = Re(y1)/m1, and the mirror for y_last.
    const double g_m1 = g_r / m2;
    const double g_m2 = -g_r * m1 / (m2 * m2);
    d_first[px] += 0.5 * cplx{g_m1 * first[px].real() / m1, g_m1 * first[px].imag() / m1};
    d_last[px] += 0.5 * cplx{g_m2 * last[px].real() / m2, g_m2 * last[px].imag() / m2};
  }
}

/// Parameter prior stage: seed lift followed by the residual conv net.
inline ParameterMaps apply_param_prior(const ComplexArray& y, std::size_t iteration,
                                       const ModelState& state, const PinqiConfig& cfg,
                                       ParameterMaps* seed_out = nullptr) {
  ParameterMaps seed = param_seed_from_images(y, cfg.seed_r1);
  if (seed_out) *seed_out = seed;
  if (!cfg.use_param_prior) return seed;
  return ParameterMaps(prior_forward(seed.maps, iteration, state.param_prior));
}

inline ComplexArray apply_image_prior(const ComplexArray& y, std::size_t iteration,
                                      const ModelState& state) {
  RealArray xin = detail::to_real_channels(y);
  return detail::from_real_channels(prior_forward(xin, iteration, state.image_prior));
}

namespace detail {

inline ParameterMaps default_param_init(const PinqiConfig& cfg, std::size_t nx,
                                        std::size_t ny) {
  ParameterMaps p(3, nx, ny);
  for (std::size_t px = 0; px < nx * ny; ++px) {
    p.at(ReM0, px) = 0.5;
    p.at(ImM0, px) = 0.0;
    p.at(R1, px) = cfg.seed_r1;
  }
  return p;
}

/// Gradient of the inner objective |q(p)-y|^2 + lambda |p - p_reg|^2.
inline ParameterMaps inner_gradient(const PixelSignalModel& model, const ParameterMaps& p,
                                    const ComplexArray& y, double lambda,
                                    const ParameterMaps& p_reg) {
  ComplexArray r = q_forward(model, p);
  r -= y;
  ParameterMaps g = q_vjp(model, p, r);
  for (std::size_t i = 0; i < g.maps.size(); ++i)
    g.maps.data[i] = 2.0 * g.maps.data[i] +
                     2.0 * lambda * (p.maps.data[i] - p_reg.maps.data[i]);
  return g;
}

}  // namespace detail

/// The unrolled half-quadratic splitting reconstruction. y^0 is the
/// zero-filled adjoint; each iteration solves the linear data-consistency
/// subproblem with the available quadratic priors and then updates the
/// parameter estimate (non-linear solver, unrolled gradient steps, or the
/// network prediction directly, depending on the mode).
inline UnrolledTrace pinqi_reconstruct(const ComplexArray& k, const AcquisitionModel& A,
                                       const PixelSignalModel& model,
                                       const ModelState& state, const PinqiConfig& cfg) {
  cfg.validate();
  A.check_kspace(k);
  if (model.param_count() != 3)
    throw ConfigError("the unrolled pipeline is wired for 3-channel parameter maps");
  if (state.T < cfg.T) throw ConfigError("model state has fewer iterations than cfg.T");
  const std::size_t nx = A.nx(), ny = A.ny();

  UnrolledTrace trace;
  trace.y0 = a_adjoint(k, A);

  ComplexArray y_prev = trace.y0;
  ParameterMaps p_prev;
  bool have_p_prev = false;

  ComplexArray fixed_y_reg;
  ParameterMaps fixed_p_reg, fixed_p_seed;
  if (cfg.fixed_priors_once) {
    fixed_y_reg = apply_image_prior(trace.y0, 1, state);
    fixed_p_reg = apply_param_prior(trace.y0, 1, state, cfg, &fixed_p_seed);
  }

  for (std::size_t it = 1; it <= cfg.T; ++it) {
    IterRecord rec;
    rec.lam_p = lambda_effective(state.lt_p[it - 1]);
    rec.lam_y = lambda_effective(state.lt_y[it - 1]);
    rec.lam_q = lambda_effective(state.lt_q[it - 1]);

    std::vector<Prior> priors;
    if (!cfg.image_recon_only && have_p_prev) {
      priors.push_back(Prior{q_forward(model, p_prev), rec.lam_q});
      rec.has_q_prior = true;
    }
    if (cfg.use_image_prior) {
      rec.y_reg = cfg.fixed_priors_once ? fixed_y_reg
                                        : apply_image_prior(y_prev, it, state);
      priors.push_back(Prior{rec.y_reg, rec.lam_y});
      rec.has_y_prior = true;
    }
    if (priors.empty()) {
      priors.push_back(Prior{ComplexArray({A.acquisitions(), nx, ny}), cfg.ridge_floor});
      rec.ridge_prior = true;
    }

    auto [y_sol, cg_res] = lindc_forward(k, A, priors, cfg.cg);
    rec.y = std::move(y_sol);
    rec.cg_forward = cg_res;

    if (!cfg.image_recon_only) {
      if (cfg.fixed_priors_once) {
        rec.p_seed = fixed_p_seed;
        rec.p_reg = fixed_p_reg;
      } else {
        rec.p_reg = apply_param_prior(rec.y, it, state, cfg, &rec.p_seed);
      }

      if (cfg.use_nonlinear_solver) {
        const ParameterMaps& init =
            have_p_prev ? p_prev
                        : (cfg.use_param_prior ? rec.p_reg
                                               : detail::default_param_init(cfg, nx, ny));
        const double lam = cfg.use_param_prior ? rec.lam_p : 0.0;
        auto sol = nlreg_forward(model, rec.y, rec.p_reg, lam, cfg.bounds, init, cfg.nlreg);
        rec.p = std::move(sol.p);
        rec.nl_diag = sol.diag;
      } else if (cfg.gradient_descent_inner) {
        ParameterMaps p = have_p_prev ? p_prev
                                      : (cfg.use_param_prior
                                             ? rec.p_reg
                                             : detail::default_param_init(cfg, nx, ny));
        const double lam = cfg.use_param_prior ? rec.lam_p : 0.0;
        const double step = lambda_effective(state.lt_gd[it - 1]);
        rec.gd_path.reserve(cfg.gd_steps + 1);
        rec.gd_path.push_back(p);
        for (int s = 0; s < cfg.gd_steps; ++s) {
          ParameterMaps g = detail::inner_gradient(model, p, rec.y, lam, rec.p_reg);
          axpy(-step, g.maps, p.maps);
          rec.gd_path.push_back(p);
        }
        rec.p = std::move(p);
      } else {
        rec.p = rec.p_reg;  // network prediction taken as the solution
      }
      rec.has_p = true;
      p_prev = rec.p;
      have_p_prev = true;
    }

    y_prev = rec.y;
    trace.iters.push_back(std::move(rec));
  }

  // Extra parameter stage for the image-reconstruction-only modes: one
  // network prediction (mode a) or one regression layer (mode i).
  if (cfg.image_recon_only && (cfg.use_param_prior || cfg.use_nonlinear_solver)) {
    IterRecord fin;
    const ComplexArray& y_last = trace.iters.back().y;
    fin.p_reg = apply_param_prior(y_last, cfg.T, state, cfg, &fin.p_seed);
    if (cfg.use_nonlinear_solver) {
      auto sol = nlreg_forward(model, y_last, fin.p_reg, 0.0, cfg.bounds,
                               detail::default_param_init(cfg, nx, ny), cfg.nlreg);
      fin.p = std::move(sol.p);
      fin.nl_diag = sol.diag;
    } else {
      fin.p = fin.p_reg;
    }
    fin.has_p = true;
    trace.final_reg = std::move(fin);
  }
  return trace;
}

struct PinqiLoss {
  double value = 0.0;
  /// dL/dp^i for every iteration that produced parameters, plus the final
  /// regression stage if present (same indexing as the trace).
  std::vector<ParameterMaps> d_p;
  ParameterMaps d_p_final;
  bool has_final = false;
  /// dL/dconj(y^i) for image-space training (image-reconstruction modes).
  std::vector<ComplexArray> d_y;
};

/// Masked MSE over the parameter channels with deep supervision: the last
/// estimate counts fully, all earlier ones are down-weighted.
inline PinqiLoss pinqi_loss(const UnrolledTrace& trace, const ParameterMaps& p_true,
                            const RealArray& weight_mask, const PinqiConfig& cfg) {
  double mask_sum = 0.0;
  for (double v : weight_mask.data) mask_sum += v;
  if (!(mask_sum > 0.0)) throw ConfigError("weight mask is empty");
  const std::size_t nch = p_true.channels(), npx = p_true.pixels();
  const double denom = static_cast<double>(nch) * mask_sum;

  PinqiLoss out;
  auto masked_mse = [&](const ParameterMaps& p, ParameterMaps& grad, double w) {
    double acc = 0.0;
    for (std::size_t c = 0; c < nch; ++c)
      for (std::size_t px = 0; px < npx; ++px) {
        const double m = weight_mask.data[px];
        const double d = p.at(c, px) - p_true.at(c, px);
        acc += m * d * d;
        grad.at(c, px) = w * 2.0 * m * d / denom;
      }
    return acc / denom;
  };

  std::vector<const ParameterMaps*> stages;
  std::vector<ParameterMaps*> grads;
  out.d_p.resize(trace.iters.size());
  for (std::size_t i = 0; i < trace.iters.size(); ++i)
    if (trace.iters[i].has_p) {
      out.d_p[i] = ParameterMaps(nch, p_true.nx(), p_true.ny());
      stages.push_back(&trace.iters[i].p);
      grads.push_back(&out.d_p[i]);
    }
  if (trace.final_reg && trace.final_reg->has_p) {
    out.has_final = true;
    out.d_p_final = ParameterMaps(nch, p_true.nx(), p_true.ny());
    stages.push_back(&trace.final_reg->p);
    grads.push_back(&out.d_p_final);
  }
  if (stages.empty()) throw ConfigError("trace holds no parameter estimates");

  for (std::size_t s = 0; s < stages.size(); ++s) {
    const double w = (s + 1 == stages.size()) ? 1.0 : cfg.deep_supervision_weight;
    out.value += w * masked_mse(*stages[s], *grads[s], w);
  }
  return out;
}

/// Masked MSE over the complex image series, deep-supervised across
/// iterations; the training loss of the image-reconstruction-only modes.
inline PinqiLoss pinqi_image_loss(const UnrolledTrace& trace, const ComplexArray& y_true,
                                  const RealArray& weight_mask, const PinqiConfig& cfg) {
  double mask_sum = 0.0;
  for (double v : weight_mask.data) mask_sum += v;
  if (!(mask_sum > 0.0)) throw ConfigError("weight mask is empty");
  const std::size_t nr = y_true.dim(0), npx = y_true.dim(1) * y_true.dim(2);
  const double denom = static_cast<double>(nr) * mask_sum;

  PinqiLoss out;
  out.d_y.resize(trace.iters.size());
  for (std::size_t s = 0; s < trace.iters.size(); ++s) {
    const double w = (s + 1 == trace.iters.size()) ? 1.0 : cfg.deep_supervision_weight;
    const ComplexArray& y = trace.iters[s].y;
    out.d_y[s] = ComplexArray({nr, y.dim(1), y.dim(2)});
    double acc = 0.0;
    for (std::size_t i = 0; i < nr; ++i)
      for (std::size_t px = 0; px < npx; ++px) {
        const double m = weight_mask.data[px];
        const cplx d = y.data[i * npx + px] - y_true.data[i * npx + px];
        acc += m * std::norm(d);
        out.d_y[s].data[i * npx + px] = w * m * d / denom;
      }
    out.value += w * acc / denom;
  }
  return out;
}

/// Plain per-pixel regression of reconstructed images (the separate
/// post-processing step of the image-reconstruction baseline).
inline NlRegResult regress_images(const PixelSignalModel& model, const ComplexArray& y,
                                  const PinqiConfig& cfg) {
  ParameterMaps init = detail::default_param_init(cfg, y.dim(1), y.dim(2));
  return nlreg_forward(model, y, init, 0.0, cfg.bounds, init, cfg.nlreg);
}

/// Gradients of the outer loss with respect to the model state (and, for
/// completeness, the measured data and coil maps).
struct PinqiGrads {
  ModelState d_state;
  ComplexArray d_k;
  ComplexArray d_coils;
};

namespace detail {

struct PriorChainResult {
  ComplexArray d_y;  // cotangent on the image series input
};

/// Chains a cotangent on the parameter-prior output back to the image series
/// it was computed from, accumulating the conv-net weight gradients.
inline ComplexArray param_prior_backward_chain(const ComplexArray& y_in,
                                               const ParameterMaps& seed,
                                               std::size_t iteration,
                                               const ModelState& state,
                                               const PinqiConfig& cfg,
                                               const ParameterMaps& d_p_reg,
                                               ModelState& grad_accum) {
  RealArray d_seed = d_p_reg.maps;
  if (cfg.use_param_prior) {
    auto g = prior_backward(seed.maps, iteration, state.param_prior, d_p_reg.maps);
    grad_accum.param_prior.w1 += g.d_w.w1;
    grad_accum.param_prior.b1 += g.d_w.b1;
    grad_accum.param_prior.iter_bias += g.d_w.iter_bias;
    grad_accum.param_prior.w2 += g.d_w.w2;
    grad_accum.param_prior.b2 += g.d_w.b2;
    d_seed = std::move(g.d_x);
  }
  // Seed lift: M0 channels read the longest-delay image, R1 is constant.
  const std::size_t nr = y_in.dim(0), npx = y_in.dim(1) * y_in.dim(2);
  ComplexArray d_y({y_in.dim(0), y_in.dim(1), y_in.dim(2)});
  for (std::size_t px = 0; px < npx; ++px)
    d_y.data[(nr - 1) * npx + px] =
        0.5 * cplx{d_seed.data[ReM0 * npx + px], d_seed.data[ImM0 * npx + px]};
  return d_y;
}

/// Same for the image prior, returning the cotangent on its input series.
inline ComplexArray image_prior_backward_chain(const ComplexArray& y_in,
                                               std::size_t iteration,
                                               const ModelState& state,
                                               const ComplexArray& d_y_reg,
                                               ModelState& grad_accum) {
  RealArray dout = complex_cotangent_to_real_channels(d_y_reg);
  RealArray xin = to_real_channels(y_in);
  auto g = prior_backward(xin, iteration, state.image_prior, dout);
  grad_accum.image_prior.w1 += g.d_w.w1;
  grad_accum.image_prior.b1 += g.d_w.b1;
  grad_accum.image_prior.iter_bias += g.d_w.iter_bias;
  grad_accum.image_prior.w2 += g.d_w.w2;
  grad_accum.image_prior.b2 += g.d_w.b2;
  return real_channel_cotangent_to_complex(g.d_x);
}

/// Reverse sweep through the unrolled gradient-descent inner solver.
/// Returns the cotangents for y, p_reg, lambda and the initial point, and
/// accumulates the stepsize gradient.
struct GdBackwardResult {
  ComplexArray d_y;
  ParameterMaps d_p_reg;
  double d_lambda = 0.0;
  double d_step = 0.0;
  ParameterMaps d_p_init;
};

inline GdBackwardResult gd_inner_backward(const PixelSignalModel& model,
                                          const std::vector<ParameterMaps>& path,
                                          const ComplexArray& y, double lambda,
                                          const ParameterMaps& p_reg, double step,
                                          const ParameterMaps& d_p_out) {
  GdBackwardResult out;
  const std::size_t nx = p_reg.nx(), ny = p_reg.ny();
  out.d_y = ComplexArray({y.dim(0), nx, ny});
  out.d_p_reg = ParameterMaps(3, nx, ny);
  ParameterMaps u = d_p_out;  // cotangent flowing backward through iterates
  for (std::size_t s = path.size() - 1; s-- > 0;) {
    const ParameterMaps& p_s = path[s];
    // p_{s+1} = p_s - step * gradF(p_s); gradF = 2 Re(J^H (q - y)) + 2 lambda (p - p_reg)
    ParameterMaps gF = inner_gradient(model, p_s, y, lambda, p_reg);
    out.d_step -= inner_product(u.maps, gF.maps);
    // d/dy: grad contribution = +2 step Re(J^H dy) pulled back -> step * J u
    ComplexArray ju = q_jvp(model, p_s, u);
    axpy(step, ju, out.d_y);
    // d/dp_reg: +2 step lambda u
    axpy(2.0 * step * lambda, u.maps, out.d_p_reg.maps);
    // d/dlambda: -2 step u . (p_s - p_reg)
    for (std::size_t i = 0; i < u.maps.size(); ++i)
      out.d_lambda -= 2.0 * step * u.maps.data[i] *
                      (p_s.maps.data[i] - p_reg.maps.data[i]);
    // u <- (I - step H(p_s)) u with the exact Hessian.
    ParameterMaps hu = objective_hvp(model, p_s, y, lambda, u, true);
    axpy(-step, hu.maps, u.maps);
  }
  out.d_p_init = std::move(u);
  return out;
}

}  // namespace detail

/// Reverse sweep through the whole unrolled reconstruction, chaining the
/// implicit solver backward passes, the prior backward passes and the lambda
/// reparametrization into gradients for every learnable scalar.
inline PinqiGrads pinqi_backward(const ComplexArray& k, const AcquisitionModel& A,
                                 const PixelSignalModel& model, const ModelState& state,
                                 const PinqiConfig& cfg, const UnrolledTrace& trace,
                                 const PinqiLoss& loss) {
  cfg.validate();
  if (trace.iters.size() != cfg.T) throw ConfigError("trace does not match config");
  const std::size_t nx = A.nx(), ny = A.ny(), nr = A.acquisitions();

  PinqiGrads out;
  out.d_state = state.zeros_like();
  out.d_k = ComplexArray({nr, A.n_coils(), nx, ny});
  out.d_coils = ComplexArray({A.n_coils(), nx, ny});

  // Cotangents flowing backward between iterations.
  ComplexArray d_y_next({nr, nx, ny});       // onto y^i from iteration i+1
  ParameterMaps d_p_next(3, nx, ny);         // onto p^i from iteration i+1
  ParameterMaps d_fixed_p_reg(3, nx, ny);    // fixed-priors mode: accumulated over iters
  ComplexArray d_fixed_y_reg({nr, nx, ny});
  bool fixed_dirty = false;

  // Final regression stage (modes a and i): feeds the last y.
  if (trace.final_reg && loss.has_final) {
    const IterRecord& fin = *trace.final_reg;
    ParameterMaps d_p_reg_fin(3, nx, ny);
    if (cfg.use_nonlinear_solver) {
      auto g = nlreg_backward(model, trace.iters.back().y, fin.p_reg, 0.0, cfg.bounds, fin.p,
                              loss.d_p_final, cfg.nlreg);
      d_y_next += g.d_y;
      // lambda_p = 0 here, so nothing flows to p_reg through the solve.
    } else {
      d_p_reg_fin = loss.d_p_final;
    }
    if (norm2_sq(d_p_reg_fin.maps) > 0.0 || !cfg.use_nonlinear_solver) {
      ComplexArray d_y = detail::param_prior_backward_chain(
          trace.iters.back().y, fin.p_seed, cfg.T, state, cfg, d_p_reg_fin, out.d_state);
      d_y_next += d_y;
    }
  }

  for (std::size_t it = cfg.T; it-- > 0;) {
    const IterRecord& rec = trace.iters[it];
    const std::size_t iteration = it + 1;

    ComplexArray d_y_i = d_y_next;  // cotangent on y^i accumulated so far
    d_y_next = ComplexArray({nr, nx, ny});
    if (it < loss.d_y.size() && loss.d_y[it].size() > 0) d_y_i += loss.d_y[it];

    if (rec.has_p) {
      ParameterMaps d_p_i = d_p_next;
      d_p_next = ParameterMaps(3, nx, ny);
      if (it < loss.d_p.size() && loss.d_p[it].maps.size() > 0) d_p_i.maps += loss.d_p[it].maps;

      ParameterMaps d_p_reg_i(3, nx, ny);
      const double lam = cfg.use_param_prior ? rec.lam_p : 0.0;

      if (cfg.use_nonlinear_solver) {
        auto g = nlreg_backward(model, rec.y, rec.p_reg, lam, cfg.bounds, rec.p, d_p_i, cfg.nlreg);
        d_y_i += g.d_y;
        if (g.lambda_valid) {
          d_p_reg_i = std::move(g.d_p_reg);
          out.d_state.lt_p[it] +=
              g.d_lambda_p * lambda_effective_deriv(state.lt_p[it]);
        }
      } else if (cfg.gradient_descent_inner) {
        const double step = lambda_effective(state.lt_gd[it]);
        auto g = detail::gd_inner_backward(model, rec.gd_path, rec.y, lam, rec.p_reg,
                                           step, d_p_i);
        d_y_i += g.d_y;
        d_p_reg_i = std::move(g.d_p_reg);
        if (cfg.use_param_prior)
          out.d_state.lt_p[it] += g.d_lambda * lambda_effective_deriv(state.lt_p[it]);
        out.d_state.lt_gd[it] += g.d_step * lambda_effective_deriv(state.lt_gd[it]);
        // Warm start: the initial point is p^{i-1} (or p_reg at i = 1).
        if (it > 0) {
          d_p_next.maps += g.d_p_init.maps;
        } else if (cfg.use_param_prior) {
          d_p_reg_i.maps += g.d_p_init.maps;
        }
      } else {
        // p^i = p_reg^i directly.
        d_p_reg_i = d_p_i;
      }

      if (cfg.use_param_prior || norm2_sq(d_p_reg_i.maps) > 0.0) {
        if (cfg.fixed_priors_once) {
          d_fixed_p_reg.maps += d_p_reg_i.maps;
          fixed_dirty = true;
        } else {
          ComplexArray d_y = detail::param_prior_backward_chain(
              rec.y, rec.p_seed, iteration, state, cfg, d_p_reg_i, out.d_state);
          d_y_i += d_y;
        }
      }
    }

    // Linear subproblem backward.
    std::vector<Prior> priors;
    std::size_t q_idx = 0, y_idx = 0;
    if (rec.has_q_prior) {
      priors.push_back(Prior{q_forward(model, trace.iters[it - 1].p), rec.lam_q});
      q_idx = priors.size() - 1;
    }
    if (rec.has_y_prior) {
      priors.push_back(Prior{rec.y_reg, rec.lam_y});
      y_idx = priors.size() - 1;
    }
    if (rec.ridge_prior)
      priors.push_back(Prior{ComplexArray({nr, nx, ny}), cfg.ridge_floor});

    if (norm2_sq(d_y_i) > 0.0) {
      auto g = lindc_backward(k, A, priors, rec.y, d_y_i, cfg.cg);
      out.d_k += g.d_k;
      out.d_coils += g.d_coils;
      if (rec.has_q_prior) {
        // Chain through q(p^{i-1}): real-parameter pullback carries a factor 2.
        ParameterMaps d_prev = q_vjp(model, trace.iters[it - 1].p, g.d_priors[q_idx]);
        d_prev.maps *= 2.0;
        d_p_next.maps += d_prev.maps;
        out.d_state.lt_q[it] +=
            g.d_lambdas[q_idx] * lambda_effective_deriv(state.lt_q[it]);
      }
      if (rec.has_y_prior) {
        out.d_state.lt_y[it] +=
            g.d_lambdas[y_idx] * lambda_effective_deriv(state.lt_y[it]);
        if (cfg.fixed_priors_once) {
          d_fixed_y_reg += g.d_priors[y_idx];
          fixed_dirty = true;
        } else {
          ComplexArray d_in = detail::image_prior_backward_chain(
              it == 0 ? trace.y0 : trace.iters[it - 1].y, iteration, state,
              g.d_priors[y_idx], out.d_state);
          if (it == 0) {
            // y^0 = A^H k: dL/dconj(k) += A d_in.
            out.d_k += a_forward(d_in, A);
          } else {
            d_y_next += d_in;
          }
        }
      }
    }
  }

  // Fixed priors were computed once from y^0; chain their accumulated
  // cotangents through the networks and back into k.
  if (cfg.fixed_priors_once && fixed_dirty) {
    ComplexArray d_y0({nr, nx, ny});
    if (norm2_sq(d_fixed_y_reg) > 0.0)
      d_y0 += detail::image_prior_backward_chain(trace.y0, 1, state, d_fixed_y_reg,
                                                 out.d_state);
    if (norm2_sq(d_fixed_p_reg.maps) > 0.0) {
      ParameterMaps seed = param_seed_from_images(trace.y0, cfg.seed_r1);
      d_y0 += detail::param_prior_backward_chain(trace.y0, seed, 1, state, cfg,
                                                 d_fixed_p_reg, out.d_state);
    }
    out.d_k += a_forward(d_y0, A);
  }
  return out;
}

}  // namespace qpinqi
