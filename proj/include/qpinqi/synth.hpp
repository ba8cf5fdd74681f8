#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "qpinqi/encoding.hpp"
#include "qpinqi/parallel.hpp"
#include "qpinqi/rng.hpp"
#include "qpinqi/sigmodel.hpp"
#include "qpinqi/tensor.hpp"
#include "qpinqi/tensor_io.hpp"

namespace qpinqi {

struct PhantomSpec {
  std::size_t nx = 192, ny = 192;
  std::size_t classes = 11;  // tissue classes incl. background
  double t1_lo = 0.2, t1_hi = 4.5;  // seconds
  double m0_lo = 0.3, m0_hi = 1.0;  // |M0| before normalization
  bool tube_mode = false;
  int max_retries = 20;
};

/// Reference tube T1 values in seconds, used by the calibration phantom.
inline const std::array<double, 9> kTubeT1{0.28, 0.38, 0.39, 0.45, 0.59,
                                           0.60, 1.15, 1.42, 1.76};

struct AugmentSpec {
  int poly_degree = 3;
  double t1_amp = 0.1;     // T1 multiplier stays in [1 - amp, 1 + amp]
  double bias_amp = 0.1;   // |M0| bias field amplitude
  double phase_amp = 0.5;  // radians of slowly varying phase
  bool flips = true;
  bool rotations = true;   // < 10 degrees
};

struct SimSpec {
  std::size_t n_coils = 8;
  double coil_hw_lo = 0.2, coil_hw_hi = 0.5;  // half-width as fraction of FOV
  int accel = 4;                              // 1 (full), 4, 6, 8
  std::vector<double> taus{0.5, 1.0, 1.5, 2.0, 8.0};
  double sigma_lo = 0.001, sigma_hi = 0.04;
  bool normalized_coils = true;
};

struct SampleRecord {
  ParameterMaps p_true;
  RealArray weight_mask;  // [nx, ny], 1 on tissue, 0 on background
  RealArray roi_labels;   // [nx, ny], tube index 1..9 (tube mode only)
  CoilSensitivities coils;
  SamplingMasks masks;
  std::vector<double> taus;
  double sigma = 0.0;
  ComplexArray y_true;  // noiseless qualitative images
  ComplexArray k;       // noisy undersampled measurements

  AcquisitionModel acquisition() const { return AcquisitionModel(masks, coils); }
};

namespace detail {

/// Random polynomial over [-1,1]^2 rescaled to max |.| = 1.
inline RealArray random_poly_field(std::size_t nx, std::size_t ny, int degree, Rng& rng) {
  std::vector<double> coeff;
  for (int i = 0; i <= degree; ++i)
    for (int j = 0; i + j <= degree; ++j) coeff.push_back(rng.uniform(-1.0, 1.0));
  RealArray f({nx, ny});
  double peak = 0.0;
  for (std::size_t x = 0; x < nx; ++x) {
    const double xn = 2.0 * static_cast<double>(x) / static_cast<double>(nx - 1) - 1.0;
    for (std::size_t y = 0; y < ny; ++y) {
      const double yn = 2.0 * static_cast<double>(y) / static_cast<double>(ny - 1) - 1.0;
      double acc = 0.0;
      std::size_t c = 0;
      double xp = 1.0;
      for (int i = 0; i <= degree; ++i) {
        double yp = 1.0;
        for (int j = 0; i + j <= degree; ++j) {
          acc += coeff[c++] * xp * yp;
          yp *= yn;
        }
        xp *= xn;
      }
      f.at(x, y) = acc;
      peak = std::max(peak, std::abs(acc));
    }
  }
  if (peak > 0.0)
    for (auto& v : f.data) v /= peak;
  return f;
}

/// Nested random ellipses painted in order; returns a class label per pixel
/// (0 = background).
inline Array<std::uint16_t> ellipse_class_map(const PhantomSpec& spec, Rng& rng) {
  const std::size_t nx = spec.nx, ny = spec.ny;
  Array<std::uint16_t> cls({nx, ny});
  const double n = static_cast<double>(std::min(nx, ny));
  struct Ellipse {
    double cx, cy, a, b, th;
  };
  std::vector<Ellipse> shapes;
  for (std::size_t c = 1; c < spec.classes; ++c) {
    Ellipse e;
    if (c == 1) {
      // Outer hull.
      e = {0.5 * nx, 0.5 * ny, rng.uniform(0.32, 0.42) * n, rng.uniform(0.30, 0.40) * n,
           rng.uniform(0.0, std::numbers::pi)};
    } else {
      e = {rng.uniform(0.3, 0.7) * nx, rng.uniform(0.3, 0.7) * ny,
           rng.uniform(0.06, 0.22) * n, rng.uniform(0.06, 0.22) * n,
           rng.uniform(0.0, std::numbers::pi)};
    }
    shapes.push_back(e);
  }
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y) {
      std::uint16_t label = 0;
      for (std::size_t s = 0; s < shapes.size(); ++s) {
        const auto& e = shapes[s];
        const double dx = static_cast<double>(x) - e.cx;
        const double dy = static_cast<double>(y) - e.cy;
        const double u = dx * std::cos(e.th) + dy * std::sin(e.th);
        const double v = -dx * std::sin(e.th) + dy * std::cos(e.th);
        if ((u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0)
          label = static_cast<std::uint16_t>(s + 1);
      }
      cls.at(x, y) = label;
    }
  return cls;
}

inline bool all_classes_present(const Array<std::uint16_t>& cls, std::size_t classes) {
  std::vector<bool> seen(classes, false);
  for (auto v : cls.data) seen[v] = true;
  for (std::size_t c = 1; c < classes; ++c)
    if (!seen[c]) return false;
  return true;
}

/// Flips and a small nearest-neighbor rotation of the class map.
inline Array<std::uint16_t> transform_class_map(const Array<std::uint16_t>& cls,
                                                const AugmentSpec& aug, Rng& rng) {
  const std::size_t nx = cls.dim(0), ny = cls.dim(1);
  Array<std::uint16_t> out = cls;
  if (aug.flips) {
    if (rng.uniform() < 0.5) {
      for (std::size_t x = 0; x < nx; ++x)
        for (std::size_t y = 0; y < ny / 2; ++y)
          std::swap(out.at(x, y), out.at(x, ny - 1 - y));
    }
    if (rng.uniform() < 0.5) {
      for (std::size_t x = 0; x < nx / 2; ++x)
        for (std::size_t y = 0; y < ny; ++y)
          std::swap(out.at(x, y), out.at(nx - 1 - x, y));
    }
  }
  if (aug.rotations) {
    const double th = rng.uniform(-10.0, 10.0) * std::numbers::pi / 180.0;
    const double cx = 0.5 * (nx - 1), cy = 0.5 * (ny - 1);
    Array<std::uint16_t> rot({nx, ny});
    const double ct = std::cos(th), st = std::sin(th);
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t y = 0; y < ny; ++y) {
        const double dx = static_cast<double>(x) - cx;
        const double dy = static_cast<double>(y) - cy;
        const long sx = std::lround(cx + ct * dx + st * dy);
        const long sy = std::lround(cy - st * dx + ct * dy);
        rot.at(x, y) = (sx >= 0 && sx < static_cast<long>(nx) && sy >= 0 &&
                        sy < static_cast<long>(ny))
                           ? out.at(sx, sy)
                           : 0;
      }
    out = std::move(rot);
  }
  return out;
}

}  // namespace detail

struct Phantom {
  ParameterMaps p_true;
  RealArray weight_mask;
  RealArray roi_labels;  // nonempty only in tube mode
};

/// Procedural ground-truth maps: random nested ellipses with per-class T1 and
/// |M0| draws plus low-variance polynomial augmentations, or the 9-tube
/// calibration layout with the reference T1 values. |M0| is normalized to
/// stay <= 1 so the solver box constraints are comfortably wide.
inline Phantom gen_phantom(const PhantomSpec& spec, const AugmentSpec& aug, Rng rng) {
  const std::size_t nx = spec.nx, ny = spec.ny, npx = nx * ny;
  Phantom out;
  out.p_true = ParameterMaps(3, nx, ny);
  out.weight_mask = RealArray({nx, ny});

  if (spec.tube_mode) {
    // ROI labels cover only tube interiors (3 px margin), the way ROIs are
    // placed on a physical phantom; the mask covers the full tubes.
    out.roi_labels = RealArray({nx, ny});
    const double n = static_cast<double>(std::min(nx, ny));
    const double radius = 0.10 * n;
    const double roi_radius = std::max(2.0, radius - 3.0);
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t y = 0; y < ny; ++y) {
        int label = 0, roi = 0;
        for (int t = 0; t < 9; ++t) {
          const double cx = (0.25 + 0.25 * (t % 3)) * nx;
          const double cy = (0.25 + 0.25 * (t / 3)) * ny;
          const double dx = x - cx, dy = y - cy;
          const double d2 = dx * dx + dy * dy;
          if (d2 <= radius * radius) {
            label = t + 1;
            if (d2 <= roi_radius * roi_radius) roi = t + 1;
            break;
          }
        }
        const std::size_t px = x * ny + y;
        out.roi_labels.data[px] = roi;
        out.weight_mask.data[px] = label > 0 ? 1.0 : 0.0;
        out.p_true.at(ReM0, px) = label > 0 ? 1.0 : 0.0;
        out.p_true.at(ImM0, px) = 0.0;
        out.p_true.at(R1, px) = label > 0 ? 1.0 / kTubeT1[label - 1] : 1.0;
      }
    return out;
  }

  Array<std::uint16_t> cls;
  bool ok = false;
  for (int attempt = 0; attempt < spec.max_retries && !ok; ++attempt) {
    cls = detail::ellipse_class_map(spec, rng);
    cls = detail::transform_class_map(cls, aug, rng);
    ok = detail::all_classes_present(cls, spec.classes);
  }
  if (!ok) throw SolverError("phantom layout degenerate after retries");

  std::vector<double> t1_of(spec.classes, 1.0), m0_of(spec.classes, 0.0);
  for (std::size_t c = 1; c < spec.classes; ++c) {
    t1_of[c] = rng.uniform(spec.t1_lo, spec.t1_hi);
    m0_of[c] = rng.uniform(spec.m0_lo, spec.m0_hi);
  }

  RealArray t1_field = detail::random_poly_field(nx, ny, aug.poly_degree, rng);
  RealArray bias_field = detail::random_poly_field(nx, ny, aug.poly_degree, rng);
  RealArray phase_field = detail::random_poly_field(nx, ny, aug.poly_degree, rng);

  double m0_peak = 0.0;
  for (std::size_t px = 0; px < npx; ++px) {
    const std::uint16_t c = cls.data[px];
    out.weight_mask.data[px] = c > 0 ? 1.0 : 0.0;
    if (c == 0) {
      out.p_true.at(ReM0, px) = 0.0;
      out.p_true.at(ImM0, px) = 0.0;
      out.p_true.at(R1, px) = 1.0;  // harmless filler outside the mask
      continue;
    }
    const double t1 = t1_of[c] * (1.0 + aug.t1_amp * t1_field.data[px]);
    const double m0 = m0_of[c] * (1.0 + aug.bias_amp * bias_field.data[px]);
    const double ph = aug.phase_amp * phase_field.data[px];
    out.p_true.at(ReM0, px) = m0 * std::cos(ph);
    out.p_true.at(ImM0, px) = m0 * std::sin(ph);
    out.p_true.at(R1, px) = 1.0 / t1;
    m0_peak = std::max(m0_peak, m0);
  }
  if (m0_peak > 1.0) {
    const double inv = 1.0 / m0_peak;
    for (std::size_t px = 0; px < npx; ++px) {
      out.p_true.at(ReM0, px) *= inv;
      out.p_true.at(ImM0, px) *= inv;
    }
  }
  return out;
}

/// Gaussian-amplitude coils around the field of view with polynomial phase.
inline CoilSensitivities gen_coils(const SimSpec& spec, std::size_t nx, std::size_t ny,
                                   Rng rng) {
  const std::size_t nc = spec.n_coils, npx = nx * ny;
  ComplexArray maps({nc, nx, ny});
  const double n = static_cast<double>(std::min(nx, ny));
  for (std::size_t c = 0; c < nc; ++c) {
    const double angle = 2.0 * std::numbers::pi * c / nc + rng.uniform(-0.3, 0.3);
    const double cx = 0.5 * nx + 0.55 * n * std::cos(angle);
    const double cy = 0.5 * ny + 0.55 * n * std::sin(angle);
    const double hw = rng.uniform(spec.coil_hw_lo, spec.coil_hw_hi) * n;
    const double sg = hw / std::sqrt(2.0 * std::log(2.0));
    const double phase0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
    RealArray phase_poly = detail::random_poly_field(nx, ny, 2, rng);
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t y = 0; y < ny; ++y) {
        const double dx = x - cx, dy = y - cy;
        const double amp = std::exp(-(dx * dx + dy * dy) / (2.0 * sg * sg));
        const double ph = phase0 + 0.7 * phase_poly.at(x, y);
        maps.data[c * npx + x * ny + y] = amp * cplx{std::cos(ph), std::sin(ph)};
      }
  }
  if (spec.normalized_coils) {
    for (std::size_t px = 0; px < npx; ++px) {
      double s = 0.0;
      for (std::size_t c = 0; c < nc; ++c) s += std::norm(maps.data[c * npx + px]);
      const double inv = 1.0 / std::sqrt(s);
      for (std::size_t c = 0; c < nc; ++c) maps.data[c * npx + px] *= inv;
    }
  }
  return CoilSensitivities(std::move(maps), spec.normalized_coils);
}

/// Autocalibration width per acceleration factor.
inline std::size_t acs_lines_for(int accel) {
  switch (accel) {
    case 4: return 12;
    case 6: return 10;
    case 8: return 8;
    default: return 8;
  }
}

/// Per-acquisition variable-density 1D masks: a fully sampled centered block
/// plus lines drawn without replacement from a Gaussian density over the
/// line index (width ny/4).
inline SamplingMasks gen_masks(const SimSpec& spec, std::size_t ny, Rng rng) {
  const std::size_t nr = spec.taus.size();
  Array<std::uint8_t> lines({nr, ny});
  if (spec.accel <= 1) {
    lines.fill(1);
    return SamplingMasks(std::move(lines));
  }
  const std::size_t budget = static_cast<std::size_t>(
      std::lround(static_cast<double>(ny) / spec.accel));
  const std::size_t acs = std::min(acs_lines_for(spec.accel), budget);
  if (budget == 0 || budget > ny) throw ConfigError("infeasible sampling budget");
  const std::size_t acs_start = ny / 2 - acs / 2;
  const double center = 0.5 * (ny - 1);
  const double width = static_cast<double>(ny) / 4.0;
  for (std::size_t i = 0; i < nr; ++i) {
    for (std::size_t j = 0; j < acs; ++j) lines.at(i, acs_start + j) = 1;
    std::size_t placed = acs;
    std::vector<double> w(ny);
    for (std::size_t j = 0; j < ny; ++j) {
      const double d = (j - center) / width;
      w[j] = lines.at(i, j) ? 0.0 : std::exp(-0.5 * d * d);
    }
    while (placed < budget) {
      double total = 0.0;
      for (double v : w) total += v;
      if (total <= 0.0) break;
      double r = rng.uniform() * total;
      std::size_t pick = ny - 1;
      for (std::size_t j = 0; j < ny; ++j) {
        if (w[j] <= 0.0) continue;
        if (r < w[j]) {
          pick = j;
          break;
        }
        r -= w[j];
      }
      lines.at(i, pick) = 1;
      w[pick] = 0.0;
      ++placed;
    }
  }
  return SamplingMasks(std::move(lines));
}

/// k = A q(p_true) + sigma * (complex standard normal on sampled points).
/// Noise draws follow a fixed traversal order so the output is a pure
/// function of the rng state.
inline ComplexArray simulate_kspace(const ComplexArray& y_true, const AcquisitionModel& A,
                                    double sigma, Rng& rng) {
  ComplexArray k = a_forward(y_true, A);
  if (sigma > 0.0) {
    const std::size_t nr = A.acquisitions(), nc = A.n_coils(), nx = A.nx(), ny = A.ny();
    for (std::size_t i = 0; i < nr; ++i)
      for (std::size_t c = 0; c < nc; ++c)
        for (std::size_t x = 0; x < nx; ++x)
          for (std::size_t j = 0; j < ny; ++j)
            if (A.masks.sampled(i, j))
              k.at(i, c, x, j) += sigma * cplx{rng.normal(), rng.normal()};
  }
  return k;
}

inline SampleRecord gen_sample(const PhantomSpec& pspec, const AugmentSpec& aug,
                               const SimSpec& sspec, Rng rng) {
  SampleRecord rec;
  Phantom ph = gen_phantom(pspec, aug, rng.split(1));
  rec.p_true = std::move(ph.p_true);
  rec.weight_mask = std::move(ph.weight_mask);
  rec.roi_labels = std::move(ph.roi_labels);
  rec.coils = gen_coils(sspec, pspec.nx, pspec.ny, rng.split(2));
  rec.masks = gen_masks(sspec, pspec.ny, rng.split(3));
  rec.taus = sspec.taus;
  Rng noise_rng = rng.split(4);
  rec.sigma = sspec.sigma_lo == sspec.sigma_hi
                  ? sspec.sigma_lo
                  : noise_rng.uniform(sspec.sigma_lo, sspec.sigma_hi);
  SaturationModel model(rec.taus);
  rec.y_true = q_forward(model, rec.p_true);
  AcquisitionModel A(rec.masks, rec.coils);
  rec.k = simulate_kspace(rec.y_true, A, rec.sigma, noise_rng);
  return rec;
}

inline void save_sample(const std::filesystem::path& dir, const SampleRecord& rec) {
  std::filesystem::create_directories(dir);
  write_tensor(dir / "k.qten", rec.k);
  write_tensor(dir / "y_true.qten", rec.y_true);
  write_tensor(dir / "p_true.qten", rec.p_true.maps);
  write_tensor(dir / "weight_mask.qten", rec.weight_mask);
  RealArray masks({rec.masks.lines.dim(0), rec.masks.lines.dim(1)});
  for (std::size_t i = 0; i < masks.size(); ++i)
    masks.data[i] = rec.masks.lines.data[i] ? 1.0 : 0.0;
  write_tensor(dir / "masks.qten", masks);
  write_tensor(dir / "coils.qten", rec.coils.maps);
  write_tensor(dir / "taus.qten", RealArray({rec.taus.size()}, rec.taus));
  write_tensor(dir / "sigma.qten", RealArray({}, {rec.sigma}));
  if (rec.roi_labels.size() > 0) write_tensor(dir / "roi_labels.qten", rec.roi_labels);
}

inline SampleRecord load_sample(const std::filesystem::path& dir, bool normalized_coils) {
  SampleRecord rec;
  rec.k = read_tensor<cplx>(dir / "k.qten");
  rec.y_true = read_tensor<cplx>(dir / "y_true.qten");
  rec.p_true = ParameterMaps(read_tensor<double>(dir / "p_true.qten"));
  rec.weight_mask = read_tensor<double>(dir / "weight_mask.qten");
  RealArray masks = read_tensor<double>(dir / "masks.qten");
  Array<std::uint8_t> lines({masks.dim(0), masks.dim(1)});
  for (std::size_t i = 0; i < masks.size(); ++i)
    lines.data[i] = masks.data[i] != 0.0 ? 1 : 0;
  rec.masks = SamplingMasks(std::move(lines));
  rec.coils = CoilSensitivities(read_tensor<cplx>(dir / "coils.qten"), normalized_coils);
  RealArray taus = read_tensor<double>(dir / "taus.qten");
  rec.taus = taus.data;
  rec.sigma = read_tensor<double>(dir / "sigma.qten").data[0];
  if (std::filesystem::exists(dir / "roi_labels.qten"))
    rec.roi_labels = read_tensor<double>(dir / "roi_labels.qten");
  return rec;
}

struct DatasetSpec {
  std::size_t n = 8;
  PhantomSpec phantom;
  AugmentSpec augment;
  SimSpec sim;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "qpinqi-dataset-v1";
    j["n"] = n;
    j["nx"] = phantom.nx;
    j["ny"] = phantom.ny;
    j["classes"] = phantom.classes;
    j["mode"] = phantom.tube_mode ? "tubes" : "brainlike";
    j["t1_range"] = {phantom.t1_lo, phantom.t1_hi};
    j["m0_range"] = {phantom.m0_lo, phantom.m0_hi};
    j["augment"] = {{"poly_degree", augment.poly_degree},
                    {"t1_amp", augment.t1_amp},
                    {"bias_amp", augment.bias_amp},
                    {"phase_amp", augment.phase_amp},
                    {"flips", augment.flips},
                    {"rotations", augment.rotations}};
    j["coils"] = sim.n_coils;
    j["coil_halfwidth"] = {sim.coil_hw_lo, sim.coil_hw_hi};
    j["accel"] = sim.accel;
    j["taus"] = sim.taus;
    j["sigma_range"] = {sim.sigma_lo, sim.sigma_hi};
    j["normalized_coils"] = sim.normalized_coils;
    j["seed"] = seed;
    return j;
  }
};

inline std::string config_hash(const nlohmann::json& j) {
  // FNV-1a over the canonical dump.
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Writes manifest.json plus one directory per sample. Generation is keyed by
/// (seed, sample index), so any job count produces identical bytes. Each
/// sample is read back and compared against the in-memory record before the
/// manifest is finalized.
inline void generate_dataset(const std::filesystem::path& out_dir, const DatasetSpec& spec,
                             int jobs = 1) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> names(spec.n);
  parallel_for(spec.n, jobs, [&](std::size_t s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%04zu", s);
    names[s] = buf;
    Rng rng = Rng(spec.seed).split(s);
    SampleRecord rec = gen_sample(spec.phantom, spec.augment, spec.sim, rng);
    save_sample(out_dir / buf, rec);
    // Stored-consistency check: the file must reproduce the record exactly.
    SampleRecord back = load_sample(out_dir / buf, spec.sim.normalized_coils);
    if (back.k.data != rec.k.data || back.y_true.data != rec.y_true.data ||
        back.p_true.maps.data != rec.p_true.maps.data)
      throw TensorIoError(IoErrorKind::Io, "sample readback mismatch: " + names[s]);
  });
  nlohmann::json manifest = spec.to_json();
  manifest["samples"] = names;
  manifest["spec_hash"] = config_hash(spec.to_json());
  std::ofstream(out_dir / "manifest.json") << manifest.dump(2) << "\n";
}

struct Dataset {
  DatasetSpec spec;
  std::vector<SampleRecord> samples;
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in)
    throw TensorIoError(IoErrorKind::Io, "missing manifest: " + (dir / "manifest.json").string());
  nlohmann::json m = nlohmann::json::parse(in);
  Dataset ds;
  ds.spec.n = m["n"].get<std::size_t>();
  ds.spec.phantom.nx = m["nx"].get<std::size_t>();
  ds.spec.phantom.ny = m["ny"].get<std::size_t>();
  ds.spec.phantom.tube_mode = m["mode"] == "tubes";
  ds.spec.sim.n_coils = m["coils"].get<std::size_t>();
  ds.spec.sim.accel = m["accel"].get<int>();
  ds.spec.sim.taus = m["taus"].get<std::vector<double>>();
  ds.spec.sim.normalized_coils = m.value("normalized_coils", true);
  ds.spec.seed = m.value("seed", 0ULL);
  for (const auto& name : m["samples"])
    ds.samples.push_back(load_sample(dir / name.get<std::string>(),
                                     ds.spec.sim.normalized_coils));
  return ds;
}

}  // namespace qpinqi
