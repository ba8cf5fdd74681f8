// Command-line surface: simulate | train | reconstruct | evaluate | gradcheck.
// A JSON config file can pre-fill any flag; explicit flags win. Every command
// echoes its resolved configuration to stdout and, when it has an output
// directory, to config.json beside the outputs.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qpinqi/eval.hpp"
#include "qpinqi/gradcheck.hpp"
#include "qpinqi/parallel.hpp"
#include "qpinqi/pinqi.hpp"
#include "qpinqi/synth.hpp"
#include "qpinqi/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qpinqi;

namespace {

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stod(item));
  }
  if (out.empty()) throw ConfigError("empty numeric list: " + s);
  return out;
}

void echo_config(const json& j, const fs::path& out_dir) {
  std::cout << "config " << j.dump() << "\n";
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "config.json") << j.dump(2) << "\n";
  }
}

/// Pre-fills argv with --key=value pairs from a JSON config file, inserted
/// right after the subcommand so explicit flags still take precedence.
std::vector<std::string> apply_config_file(std::vector<std::string> args) {
  std::string cfg_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) cfg_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) cfg_path = args[i].substr(9);
  }
  if (cfg_path.empty()) return args;
  std::ifstream in(cfg_path);
  if (!in) throw TensorIoError(IoErrorKind::Io, "cannot open config: " + cfg_path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("unparsable config file: " + cfg_path);
  std::vector<std::string> extra;
  for (auto& [k, v] : j.items()) {
    if (v.is_boolean()) {
      if (v.get<bool>()) extra.push_back("--" + k);
    } else if (v.is_string()) {
      extra.push_back("--" + k + "=" + v.get<std::string>());
    } else {
      extra.push_back("--" + k + "=" + v.dump());
    }
  }
  if (args.empty()) return args;
  args.insert(args.begin() + 1, extra.begin(), extra.end());
  return args;
}

struct CommonOpts {
  int jobs = default_jobs();
  std::string config_file;
  void attach(CLI::App* cmd) {
    cmd->add_option("--jobs", jobs, "worker threads (default: QPINQI_JOBS or hardware)");
    cmd->add_option("--config", config_file, "JSON file pre-filling any flag");
  }
};

int cmd_simulate(const std::string& out, std::size_t n, std::size_t size,
                 std::size_t coils, int accel, const std::string& taus,
                 const std::string& sigma_range, const std::string& mode,
                 std::uint64_t seed, int jobs) {
  DatasetSpec spec;
  spec.n = n;
  spec.phantom.nx = spec.phantom.ny = size;
  spec.phantom.tube_mode = mode == "tubes";
  if (mode != "tubes" && mode != "brainlike")
    throw ConfigError("mode must be brainlike or tubes");
  spec.sim.n_coils = coils;
  spec.sim.accel = accel;
  spec.sim.taus = parse_double_list(taus);
  auto sr = parse_double_list(sigma_range);
  if (sr.size() != 2 || sr[0] < 0.0 || sr[1] < sr[0])
    throw ConfigError("--sigma-range expects LO,HI with 0 <= LO <= HI");
  spec.sim.sigma_lo = sr[0];
  spec.sim.sigma_hi = sr[1];
  spec.seed = seed;
  if (size % 2 != 0) throw ConfigError("--size must be even");
  if (accel != 1 && accel != 4 && accel != 6 && accel != 8)
    throw ConfigError("--accel must be one of 1 (full), 4, 6, 8");

  json echo = spec.to_json();
  echo["command"] = "simulate";
  echo["out"] = out;
  echo["jobs"] = jobs;
  echo_config(echo, out);
  generate_dataset(out, spec, jobs);
  std::cout << "wrote " << n << " samples to " << out << "\n";
  return 0;
}

PinqiConfig make_pinqi_config(std::size_t T, const std::string& ablation) {
  PinqiConfig cfg;
  cfg.T = T;
  cfg.apply_mode(pinqi_mode_from_string(ablation));
  return cfg;
}

int cmd_train(const std::string& data, const std::string& out, int steps, int batch,
              double lr_prior, double lr_lambda, const std::string& ablation,
              std::uint64_t seed, std::size_t T, std::size_t hidden, int val_every,
              const std::string& resume, int jobs) {
  Dataset ds = load_dataset(data);
  PinqiConfig pcfg = make_pinqi_config(T, ablation);
  TrainConfig tcfg;
  tcfg.steps = steps;
  tcfg.batch = batch;
  tcfg.lr_prior = lr_prior;
  tcfg.lr_lambda = lr_lambda;
  tcfg.seed = seed;
  tcfg.hidden = hidden;
  tcfg.val_every = val_every;
  tcfg.jobs = jobs;

  json echo;
  echo["command"] = "train";
  echo["data"] = data;
  echo["out"] = out;
  echo["steps"] = steps;
  echo["batch"] = batch;
  echo["lr-prior"] = lr_prior;
  echo["lr-lambda"] = lr_lambda;
  echo["ablation"] = ablation;
  echo["seed"] = seed;
  echo["t"] = T;
  echo["hidden"] = hidden;
  echo["val-every"] = val_every;
  echo["jobs"] = jobs;
  if (!resume.empty()) echo["resume"] = resume;
  echo_config(echo, out);

  ModelState state;
  AdamMoments moments;
  int resume_step = 0;
  const ModelState* state_ptr = nullptr;
  const AdamMoments* mom_ptr = nullptr;
  if (!resume.empty()) {
    json extra;
    state = load_model_state(resume, &extra);
    moments = load_moments(resume);
    resume_step = extra.value("step", 0);
    state_ptr = &state;
    mom_ptr = &moments;
  }
  auto res = train_loop(ds, pcfg, tcfg, out, state_ptr, mom_ptr, resume_step);
  std::cout << "trained " << (steps - resume_step) << " steps";
  if (res.best_val >= 0.0) std::cout << ", best validation nRMSE " << res.best_val;
  if (res.skipped_steps > 0)
    std::cout << ", skipped " << res.skipped_steps << " non-finite steps";
  std::cout << "\n";
  return 0;
}

int cmd_reconstruct(const std::string& data, const std::string& ckpt,
                    const std::string& out, const std::string& baseline,
                    bool dump_trace, const std::string& ablation, std::size_t T,
                    int jobs) {
  Dataset ds = load_dataset(data);
  SaturationModel model(ds.spec.sim.taus);
  ModelState state;
  if (!ckpt.empty()) {
    state = load_model_state(ckpt);
  } else {
    state = ModelState::init(T, model.output_count(), 3, 8, 0);
  }
  PinqiConfig pcfg = make_pinqi_config(state.T, ablation);

  json echo;
  echo["command"] = "reconstruct";
  echo["data"] = data;
  echo["ckpt"] = ckpt;
  echo["out"] = out;
  echo["baseline"] = baseline;
  echo["trace"] = dump_trace;
  echo["ablation"] = ablation;
  echo["jobs"] = jobs;
  echo_config(echo, out);

  const bool sep_reg = pcfg.image_recon_only && !pcfg.use_param_prior &&
                       !pcfg.use_nonlinear_solver;
  parallel_for(ds.samples.size(), jobs, [&](std::size_t s) {
    const SampleRecord& rec = ds.samples[s];
    AcquisitionModel A = rec.acquisition();
    auto trace = pinqi_reconstruct(rec.k, A, model, state, pcfg);
    ParameterMaps p = sep_reg ? regress_images(model, trace.iters.back().y, pcfg).p
                              : trace.last().p;
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%04zu", s);
    const fs::path dir = fs::path(out) / buf;
    fs::create_directories(dir);
    write_tensor(dir / "p.qten", p.maps);
    write_tensor(dir / "t1.qten", t1_map(p));
    write_pgm(dir / "t1.pgm", t1_map(p));
    if (dump_trace) {
      for (std::size_t it = 0; it < trace.iters.size(); ++it) {
        char tb[48];
        std::snprintf(tb, sizeof tb, "trace_y_%02zu.qten", it + 1);
        write_tensor(dir / tb, trace.iters[it].y);
        if (trace.iters[it].has_p) {
          std::snprintf(tb, sizeof tb, "trace_p_%02zu.qten", it + 1);
          write_tensor(dir / tb, trace.iters[it].p.maps);
        }
      }
    }
    if (baseline != "none") {
      BaselineResult base = baseline == "zerofill"
                                ? baseline_zerofill(rec.k, A, model, pcfg)
                                : baseline_cgsense(rec.k, A, model, pcfg);
      write_tensor(dir / "baseline_p.qten", base.p.maps);
      write_tensor(dir / "baseline_t1.qten", t1_map(base.p));
    }
  });
  std::cout << "reconstructed " << ds.samples.size() << " samples to " << out << "\n";
  return 0;
}

int cmd_evaluate(const std::string& pred, const std::string& ref, const std::string& out) {
  Dataset ds = load_dataset(ref);
  json echo;
  echo["command"] = "evaluate";
  echo["pred"] = pred;
  echo["ref"] = ref;
  echo["out"] = out;
  echo_config(echo, fs::path(out).parent_path());

  std::vector<SampleMetrics> rows;
  std::vector<RoiRow> roi_rows;
  std::vector<std::string> roi_ids;
  for (std::size_t s = 0; s < ds.samples.size(); ++s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%04zu", s);
    const fs::path pdir = fs::path(pred) / buf;
    if (!fs::exists(pdir / "p.qten"))
      throw TensorIoError(IoErrorKind::Io, "missing prediction: " + (pdir / "p.qten").string());
    ParameterMaps p(read_tensor<double>(pdir / "p.qten"));
    rows.push_back(compute_metrics(buf, ds.spec.sim.accel, p, ds.samples[s].p_true,
                                   ds.samples[s].weight_mask));
    if (ds.samples[s].roi_labels.size() > 0) {
      for (auto r : roi_table(p, ds.samples[s].p_true, ds.samples[s].roi_labels)) {
        roi_rows.push_back(r);
        roi_ids.push_back(buf);
      }
    }
  }
  write_metrics_csv(out, rows);
  if (!roi_rows.empty()) {
    const fs::path roi_path = fs::path(out).parent_path() / "metrics_roi.csv";
    std::ofstream roi_out(roi_path);
    roi_out << "id,roi,ref_mean,ref_std,pred_mean,pred_std,diff_pct\n";
    roi_out.precision(6);
    for (std::size_t i = 0; i < roi_rows.size(); ++i) {
      const auto& r = roi_rows[i];
      roi_out << roi_ids[i] << "," << r.roi << "," << r.ref_mean << "," << r.ref_std
              << "," << r.pred_mean << "," << r.pred_std << "," << r.diff_pct << "\n";
    }
    std::cout << "wrote " << roi_path.string() << "\n";
  }
  double mean_nrmse = 0.0;
  for (const auto& r : rows) mean_nrmse += r.nrmse_t1 / rows.size();
  std::cout << "wrote " << out << " (" << rows.size() << " samples, mean T1 nRMSE "
            << mean_nrmse << ")\n";
  return 0;
}

int cmd_gradcheck(const std::string& target, double eps, std::uint64_t seed) {
  json echo;
  echo["command"] = "gradcheck";
  echo["target"] = target;
  echo["eps"] = eps;
  echo["seed"] = seed;
  echo_config(echo, "");

  std::vector<GradCheckRow> rows;
  if (target == "all") {
    for (const char* t : {"sigmodel", "prior", "lindc", "nlreg", "endtoend"}) {
      auto r = run_gradcheck(t, eps, seed);
      rows.insert(rows.end(), r.begin(), r.end());
    }
  } else {
    rows = run_gradcheck(target, eps, seed);
  }
  bool all_pass = true;
  std::printf("%-10s %-22s %12s %10s  %s\n", "target", "family", "rel_err", "threshold",
              "status");
  for (const auto& r : rows) {
    std::printf("%-10s %-22s %12.3e %10.1e  %s\n", r.target.c_str(), r.family.c_str(),
                r.rel_err, r.threshold, r.pass ? "pass" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  if (!all_pass) {
    std::cerr << "error: gradient check failed\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantitative MR parameter mapping from undersampled multi-coil k-space"};
  app.require_subcommand(1);
  // A config file pre-fills flags before the user's own; keep the last value.
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  // simulate
  auto* sim = app.add_subcommand("simulate", "generate a synthetic dataset");
  std::string sim_out, sim_taus = "0.5,1,1.5,2,8", sim_sigma = "0.001,0.04",
              sim_mode = "brainlike";
  std::size_t sim_n = 8, sim_size = 64, sim_coils = 4;
  int sim_accel = 4;
  std::uint64_t sim_seed = 0;
  CommonOpts sim_common;
  sim->add_option("--out", sim_out, "output dataset directory")->required();
  sim->add_option("--n", sim_n, "number of samples");
  sim->add_option("--size", sim_size, "grid size (even)");
  sim->add_option("--coils", sim_coils, "number of receiver coils");
  sim->add_option("--accel", sim_accel, "acceleration factor: 1 (full), 4, 6, 8");
  sim->add_option("--taus", sim_taus, "saturation recovery times, comma separated seconds");
  sim->add_option("--sigma-range", sim_sigma, "noise std range LO,HI");
  sim->add_option("--mode", sim_mode, "brainlike | tubes");
  sim->add_option("--seed", sim_seed, "generation seed");
  sim_common.attach(sim);

  // train
  auto* tr = app.add_subcommand("train", "train the model on a dataset");
  std::string tr_data, tr_out, tr_abl = "full", tr_resume;
  int tr_steps = 2000, tr_batch = 8, tr_val_every = 200;
  double tr_lrp = 2e-3, tr_lrl = 1e-3;
  std::uint64_t tr_seed = 0;
  std::size_t tr_T = 5, tr_hidden = 8;
  CommonOpts tr_common;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output directory for checkpoints and logs")->required();
  tr->add_option("--steps", tr_steps, "optimizer steps");
  tr->add_option("--batch", tr_batch, "batch size");
  tr->add_option("--lr-prior", tr_lrp, "peak learning rate for prior weights");
  tr->add_option("--lr-lambda", tr_lrl, "peak learning rate for lambdas");
  tr->add_option("--ablation", tr_abl,
                 "full | no-signal | no-image-prior | no-param-prior | "
                 "no-nonlinear-solver | gradient-descent | fixed-priors | "
                 "image-recon-sep-reg | image-recon-e2e-reg");
  tr->add_option("--seed", tr_seed, "training seed");
  tr->add_option("--t", tr_T, "unroll iterations");
  tr->add_option("--hidden", tr_hidden, "conv prior hidden channels");
  tr->add_option("--val-every", tr_val_every, "validation cadence in steps (0 = off)");
  tr->add_option("--resume", tr_resume, "checkpoint directory to resume from");
  tr_common.attach(tr);

  // reconstruct
  auto* rc = app.add_subcommand("reconstruct", "reconstruct parameter maps");
  std::string rc_data, rc_ckpt, rc_out, rc_base = "none", rc_abl = "full";
  bool rc_trace = false;
  std::size_t rc_T = 5;
  CommonOpts rc_common;
  rc->add_option("--data", rc_data, "dataset directory")->required();
  rc->add_option("--ckpt", rc_ckpt, "checkpoint directory (omit for initialized model)");
  rc->add_option("--out", rc_out, "output directory")->required();
  rc->add_option("--baseline", rc_base, "none | zerofill | cgsense")
      ->check(CLI::IsMember({"none", "zerofill", "cgsense"}));
  rc->add_flag("--trace", rc_trace, "dump per-iteration tensors");
  rc->add_option("--ablation", rc_abl, "reconstruction wiring (see train --ablation)");
  rc->add_option("--t", rc_T, "unroll iterations when no checkpoint is given");
  rc_common.attach(rc);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "compute metrics against a reference dataset");
  std::string ev_pred, ev_ref, ev_out = "metrics.csv";
  CommonOpts ev_common;
  ev->add_option("--pred", ev_pred, "reconstruction output directory")->required();
  ev->add_option("--ref", ev_ref, "reference dataset directory")->required();
  ev->add_option("--out", ev_out, "metrics CSV path");
  ev_common.attach(ev);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient validation");
  std::string gc_target = "all";
  double gc_eps = 1e-5;
  std::uint64_t gc_seed = 13;
  CommonOpts gc_common;
  gc->add_option("--target", gc_target, "lindc | nlreg | endtoend | prior | sigmodel | all")
      ->check(CLI::IsMember({"lindc", "nlreg", "endtoend", "prior", "sigmodel", "all"}));
  gc->add_option("--eps", gc_eps, "finite-difference step");
  gc->add_option("--seed", gc_seed, "instance seed");
  gc_common.attach(gc);

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = apply_config_file(std::move(args));
    // CLI11 consumes arguments in reverse order.
    std::vector<std::string> rargs(args.rbegin(), args.rend());
    app.parse(rargs);

    if (sim->parsed())
      return cmd_simulate(sim_out, sim_n, sim_size, sim_coils, sim_accel, sim_taus,
                          sim_sigma, sim_mode, sim_seed, sim_common.jobs);
    if (tr->parsed())
      return cmd_train(tr_data, tr_out, tr_steps, tr_batch, tr_lrp, tr_lrl, tr_abl,
                       tr_seed, tr_T, tr_hidden, tr_val_every, tr_resume,
                       tr_common.jobs);
    if (rc->parsed())
      return cmd_reconstruct(rc_data, rc_ckpt, rc_out, rc_base, rc_trace, rc_abl, rc_T,
                             rc_common.jobs);
    if (ev->parsed()) return cmd_evaluate(ev_pred, ev_ref, ev_out);
    if (gc->parsed()) return cmd_gradcheck(gc_target, gc_eps, gc_seed);
    std::cerr << "error: no subcommand\n";
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const TensorIoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const SolverError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
