#pragma once

#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "qpinqi/eval.hpp"
#include "qpinqi/parallel.hpp"
#include "qpinqi/pinqi.hpp"
#include "qpinqi/regnet.hpp"
#include "qpinqi/synth.hpp"

namespace qpinqi {

struct TrainConfig {
  int steps = 2000;
  int batch = 8;
  double lr_prior = 2e-3;
  double lr_lambda = 1e-3;
  double warmup_frac = 0.1;
  double weight_decay = 0.01;
  double clip_norm = 10.0;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t hidden = 8;
  int val_every = 200;       // steps between validation passes; 0 disables
  double val_fraction = 0.1; // held-out tail of the dataset
  int jobs = 1;
  /// Process at most this many steps in one invocation (0 = run to `steps`).
  /// The schedule still spans `steps`, so a later resume continues the exact
  /// trajectory of an uninterrupted run.
  int limit_steps = 0;

  void validate() const {
    if (steps < 0 || batch < 1) throw ConfigError("invalid steps/batch");
    if (!(lr_prior >= 0.0) || !(lr_lambda >= 0.0))
      throw ConfigError("learning rates must be nonnegative");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup fraction in [0,1)");
  }
};

/// Linear warmup to the peak over warmup_frac of the run, then cosine decay
/// to zero at the final step.
inline double lr_schedule(int step, int total, double peak, double warmup_frac) {
  if (total <= 0) return peak;
  const int warm = std::max(1, static_cast<int>(std::lround(warmup_frac * total)));
  if (step <= warm) return peak * static_cast<double>(step) / warm;
  const double t = static_cast<double>(step - warm) / std::max(1, total - warm);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamMoments {
  RealArray m, v;
  int step = 0;
};

/// Adam with decoupled weight decay. The lambda/stepsize group uses its own
/// learning rate and is exempt from decay.
inline void adam_step(ModelState& state, const ModelState& grads, AdamMoments& mom,
                      const TrainConfig& cfg, double lr_prior_t, double lr_lambda_t) {
  const std::size_t n = state.scalar_count();
  if (mom.m.size() != n) {
    mom.m = RealArray({n});
    mom.v = RealArray({n});
    mom.step = 0;
  }
  RealArray g = grads.flatten();
  if (!all_finite(g)) throw SolverError("non-finite gradients");
  mom.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, mom.step);
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, mom.step);
  std::size_t i = 0;
  state.for_each_slot([&](double& x, bool is_lambda) {
    double& m = mom.m[i];
    double& v = mom.v[i];
    const double gi = g[i];
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * gi;
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * gi * gi;
    const double lr = is_lambda ? lr_lambda_t : lr_prior_t;
    x -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
    if (!is_lambda) x -= lr * cfg.weight_decay * x;
    ++i;
  });
}

struct TrainLogRow {
  int step = 0;
  double lr_prior = 0.0, lr_lambda = 0.0;
  double loss = 0.0;
  double val_nrmse = -1.0;  // -1 when no validation ran this step
  std::vector<double> lambdas;  // effective lambda_p, lambda_y, lambda_q per iteration
};

struct TrainResult {
  ModelState state;
  AdamMoments moments;
  std::vector<TrainLogRow> log;
  double best_val = -1.0;
  int skipped_steps = 0;
};

inline void write_train_log(const std::filesystem::path& path,
                            const std::vector<TrainLogRow>& log, std::size_t T) {
  std::ofstream out(path);
  out << "step,lr_prior,lr_lambda,loss,val_nrmse";
  for (std::size_t i = 1; i <= T; ++i)
    out << ",lambda_p_" << i << ",lambda_y_" << i << ",lambda_q_" << i;
  out << "\n";
  out.precision(17);
  for (const auto& row : log) {
    out << row.step << "," << row.lr_prior << "," << row.lr_lambda << "," << row.loss
        << "," << row.val_nrmse;
    for (double v : row.lambdas) out << "," << v;
    out << "\n";
  }
}

namespace detail {

inline bool uses_image_loss(const PinqiConfig& cfg) {
  return cfg.image_recon_only && !cfg.use_param_prior && !cfg.use_nonlinear_solver;
}

/// Forward + loss + backward for one sample.
struct SampleWork {
  double loss = 0.0;
  ModelState grads;
};

inline SampleWork sample_grads(const SampleRecord& rec, const PixelSignalModel& model,
                               const ModelState& state, const PinqiConfig& cfg) {
  SampleWork w;
  AcquisitionModel A = rec.acquisition();
  auto trace = pinqi_reconstruct(rec.k, A, model, state, cfg);
  PinqiLoss loss = uses_image_loss(cfg)
                       ? pinqi_image_loss(trace, rec.y_true, rec.weight_mask, cfg)
                       : pinqi_loss(trace, rec.p_true, rec.weight_mask, cfg);
  w.loss = loss.value;
  w.grads = pinqi_backward(rec.k, A, model, state, cfg, trace, loss).d_state;
  return w;
}

/// Masked T1 nRMSE of a reconstruction, the validation metric.
inline double sample_val_nrmse(const SampleRecord& rec, const PixelSignalModel& model,
                               const ModelState& state, const PinqiConfig& cfg) {
  AcquisitionModel A = rec.acquisition();
  auto trace = pinqi_reconstruct(rec.k, A, model, state, cfg);
  ParameterMaps p = uses_image_loss(cfg)
                        ? regress_images(model, trace.iters.back().y, cfg).p
                        : trace.last().p;
  return nrmse_t1(p, rec.p_true, rec.weight_mask);
}

}  // namespace detail

/// Stochastic training of the model state. Batch selection is a pure
/// function of (seed, step), so a run resumed from a checkpoint reproduces
/// the loss trace of the uninterrupted run exactly.
inline TrainResult train_loop(const Dataset& data, const PinqiConfig& pinqi_cfg,
                              const TrainConfig& cfg,
                              const std::filesystem::path& out_dir,
                              const ModelState* resume_state = nullptr,
                              const AdamMoments* resume_moments = nullptr,
                              int resume_step = 0) {
  cfg.validate();
  pinqi_cfg.validate();
  if (data.samples.empty()) throw ConfigError("empty dataset");
  const std::size_t n_val = cfg.val_every > 0
                                ? static_cast<std::size_t>(cfg.val_fraction * data.samples.size())
                                : 0;
  const std::size_t n_train = data.samples.size() - n_val;
  if (n_train == 0) throw ConfigError("no training samples after validation split");
  for (const auto& s : data.samples) {
    if (s.taus != data.spec.sim.taus) throw ConfigError("inconsistent taus across samples");
    if (s.p_true.nx() != data.spec.phantom.nx) throw ConfigError("inconsistent grid");
  }

  SaturationModel model(data.spec.sim.taus);
  TrainResult res;
  res.state = resume_state ? *resume_state
                           : ModelState::init(pinqi_cfg.T, model.output_count(), 3,
                                              cfg.hidden, cfg.seed);
  if (resume_moments) res.moments = *resume_moments;

  std::filesystem::create_directories(out_dir);
  double best_val = resume_step > 0 ? -2.0 : -1.0;  // any val beats the sentinel

  const int last_step = cfg.limit_steps > 0
                            ? std::min(cfg.steps, resume_step + cfg.limit_steps)
                            : cfg.steps;
  for (int step = resume_step; step < last_step; ++step) {
    const double lr_p = lr_schedule(step, cfg.steps, cfg.lr_prior, cfg.warmup_frac);
    const double lr_l = lr_schedule(step, cfg.steps, cfg.lr_lambda, cfg.warmup_frac);

    Rng batch_rng = Rng(cfg.seed).split(0xBA7C0000ULL + static_cast<std::uint64_t>(step));
    std::vector<std::size_t> idx(cfg.batch);
    for (int b = 0; b < cfg.batch; ++b) idx[b] = batch_rng.below(n_train);

    std::vector<detail::SampleWork> work(cfg.batch);
    parallel_for(cfg.batch, cfg.jobs, [&](std::size_t b) {
      work[b] = detail::sample_grads(data.samples[idx[b]], model, res.state, pinqi_cfg);
    });

    ModelState grads = res.state.zeros_like();
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {  // fixed order keeps runs bitwise equal
      grads.accumulate(work[b].grads, 1.0 / cfg.batch);
      loss += work[b].loss / cfg.batch;
    }

    RealArray flat = grads.flatten();
    if (!all_finite(flat)) {
      ++res.skipped_steps;
      continue;  // skip the update, keep the schedule moving
    }
    const double gnorm = norm2(flat);
    if (cfg.clip_norm > 0.0 && gnorm > cfg.clip_norm) {
      flat *= cfg.clip_norm / gnorm;
      grads.unflatten(flat);
    }
    adam_step(res.state, grads, res.moments, cfg, lr_p, lr_l);
    for (std::size_t i = 0; i < res.state.T; ++i) {
      if (!(lambda_effective(res.state.lt_p[i]) > 0.0) ||
          !(lambda_effective(res.state.lt_y[i]) > 0.0) ||
          !(lambda_effective(res.state.lt_q[i]) > 0.0))
        throw SolverError("effective lambda left the positive range");
    }

    TrainLogRow row;
    row.step = step;
    row.lr_prior = lr_p;
    row.lr_lambda = lr_l;
    row.loss = loss;
    for (std::size_t i = 0; i < pinqi_cfg.T; ++i) {
      row.lambdas.push_back(lambda_effective(res.state.lt_p[i]));
      row.lambdas.push_back(lambda_effective(res.state.lt_y[i]));
      row.lambdas.push_back(lambda_effective(res.state.lt_q[i]));
    }

    if (n_val > 0 && cfg.val_every > 0 &&
        ((step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps)) {
      std::vector<double> val(n_val);
      parallel_for(n_val, cfg.jobs, [&](std::size_t v) {
        val[v] = detail::sample_val_nrmse(data.samples[n_train + v], model, res.state,
                                          pinqi_cfg);
      });
      double mean = 0.0;
      for (double v : val) mean += v / n_val;
      row.val_nrmse = mean;
      if (best_val < -0.5 || mean < best_val) {
        best_val = mean;
        res.best_val = mean;
        save_model_state(out_dir / "ckpt_best", res.state);
      }
    }
    res.log.push_back(std::move(row));
  }

  nlohmann::json extra;
  extra["step"] = last_step;
  extra["seed"] = cfg.seed;
  save_model_state(out_dir / "ckpt_last", res.state, extra);
  write_tensor(out_dir / "ckpt_last" / "adam_m.qten", res.moments.m);
  write_tensor(out_dir / "ckpt_last" / "adam_v.qten", res.moments.v);
  {
    nlohmann::json mom;
    mom["step"] = res.moments.step;
    std::ofstream(out_dir / "ckpt_last" / "adam.json") << mom.dump(2) << "\n";
  }
  write_train_log(out_dir / "train_log.csv", res.log, pinqi_cfg.T);
  return res;
}

inline AdamMoments load_moments(const std::filesystem::path& ckpt_dir) {
  AdamMoments mom;
  mom.m = read_tensor<double>(ckpt_dir / "adam_m.qten");
  mom.v = read_tensor<double>(ckpt_dir / "adam_v.qten");
  std::ifstream in(ckpt_dir / "adam.json");
  if (in) {
    nlohmann::json j = nlohmann::json::parse(in);
    mom.step = j.value("step", 0);
  }
  return mom;
}

}  // namespace qpinqi
