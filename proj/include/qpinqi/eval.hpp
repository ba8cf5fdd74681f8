#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "qpinqi/lindc.hpp"
#include "qpinqi/pinqi.hpp"
#include "qpinqi/sigmodel.hpp"
#include "qpinqi/tensor.hpp"

namespace qpinqi {

inline RealArray t1_map(const ParameterMaps& p, double floor_r1 = 1e-6) {
  RealArray t1({p.nx(), p.ny()});
  for (std::size_t px = 0; px < p.pixels(); ++px)
    t1.data[px] = t1_from_r1(p.at(R1, px), floor_r1);
  return t1;
}

/// |(pred - true) .* mask| / |true .* mask|.
inline double nrmse(const RealArray& pred, const RealArray& truth, const RealArray& mask) {
  pred.require_same_shape(truth, "nrmse");
  pred.require_same_shape(mask, "nrmse");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = mask.data[i] * (pred.data[i] - truth.data[i]);
    const double t = mask.data[i] * truth.data[i];
    num += d * d;
    den += t * t;
  }
  if (!(den > 0.0)) throw ConfigError("nrmse: reference is zero under the mask");
  return std::sqrt(num / den);
}

/// Mask-weighted mean absolute deviation.
inline double mae(const RealArray& pred, const RealArray& truth, const RealArray& mask) {
  pred.require_same_shape(truth, "mae");
  pred.require_same_shape(mask, "mae");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    num += mask.data[i] * std::abs(pred.data[i] - truth.data[i]);
    den += mask.data[i];
  }
  if (!(den > 0.0)) throw ConfigError("mae: empty mask");
  return num / den;
}

/// Mean local SSIM with 7x7 uniform windows, evaluated only where the whole
/// window lies inside the mask. The dynamic range is max-min of the
/// reference under the mask; constants are the standard k1 = 0.01, k2 = 0.03.
inline double ssim(const RealArray& pred, const RealArray& truth, const RealArray& mask,
                   int window = 7) {
  pred.require_same_shape(truth, "ssim");
  pred.require_same_shape(mask, "ssim");
  const std::size_t nx = pred.dim(0), ny = pred.dim(1);
  const int half = window / 2;

  double lo = 0.0, hi = 0.0;
  bool seen = false;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (mask.data[i] <= 0.0) continue;
    if (!seen) {
      lo = hi = truth.data[i];
      seen = true;
    } else {
      lo = std::min(lo, truth.data[i]);
      hi = std::max(hi, truth.data[i]);
    }
  }
  if (!seen) throw ConfigError("ssim: empty mask");
  const double range = hi - lo;
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  const double inv_n = 1.0 / (window * window);

  double acc = 0.0;
  std::size_t count = 0;
  for (long cx = half; cx < static_cast<long>(nx) - half; ++cx)
    for (long cy = half; cy < static_cast<long>(ny) - half; ++cy) {
      bool inside = true;
      for (long dx = -half; dx <= half && inside; ++dx)
        for (long dy = -half; dy <= half; ++dy)
          if (mask.at(cx + dx, cy + dy) <= 0.0) {
            inside = false;
            break;
          }
      if (!inside) continue;
      double mx = 0.0, my = 0.0;
      for (long dx = -half; dx <= half; ++dx)
        for (long dy = -half; dy <= half; ++dy) {
          mx += pred.at(cx + dx, cy + dy);
          my += truth.at(cx + dx, cy + dy);
        }
      mx *= inv_n;
      my *= inv_n;
      double vx = 0.0, vy = 0.0, cov = 0.0;
      for (long dx = -half; dx <= half; ++dx)
        for (long dy = -half; dy <= half; ++dy) {
          const double a = pred.at(cx + dx, cy + dy) - mx;
          const double b = truth.at(cx + dx, cy + dy) - my;
          vx += a * a;
          vy += b * b;
          cov += a * b;
        }
      vx *= inv_n;
      vy *= inv_n;
      cov *= inv_n;
      acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
             ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  if (count == 0) throw ConfigError("ssim: no window fits inside the mask");
  return acc / count;
}

/// Binary erosion of a mask by the square structuring element of the given
/// window; the surviving pixels are exactly the valid SSIM window centers.
inline RealArray erode_mask(const RealArray& mask, int window = 7) {
  const std::size_t nx = mask.dim(0), ny = mask.dim(1);
  const int half = window / 2;
  RealArray out({nx, ny});
  for (long x = 0; x < static_cast<long>(nx); ++x)
    for (long y = 0; y < static_cast<long>(ny); ++y) {
      bool keep = x >= half && y >= half && x < static_cast<long>(nx) - half &&
                  y < static_cast<long>(ny) - half;
      for (long dx = -half; dx <= half && keep; ++dx)
        for (long dy = -half; dy <= half; ++dy)
          if (mask.at(x + dx, y + dy) <= 0.0) {
            keep = false;
            break;
          }
      out.at(x, y) = keep ? 1.0 : 0.0;
    }
  return out;
}

inline double nrmse_t1(const ParameterMaps& pred, const ParameterMaps& truth,
                       const RealArray& mask) {
  return nrmse(t1_map(pred), t1_map(truth), mask);
}

struct BaselineResult {
  ParameterMaps p;
  NlRegDiag diag;
};

/// Zero-filled adjoint followed by per-pixel regression.
inline BaselineResult baseline_zerofill(const ComplexArray& k, const AcquisitionModel& A,
                                        const PixelSignalModel& model,
                                        const PinqiConfig& cfg) {
  ComplexArray y = a_adjoint(k, A);
  auto reg = regress_images(model, y, cfg);
  return {std::move(reg.p), reg.diag};
}

/// CG least-squares image reconstruction (tiny ridge keeps the normal
/// equations definite), then per-pixel regression.
inline BaselineResult baseline_cgsense(const ComplexArray& k, const AcquisitionModel& A,
                                       const PixelSignalModel& model,
                                       const PinqiConfig& cfg, double ridge = 1e-6,
                                       const CgConfig& cg = CgConfig{1e-6, 100}) {
  std::vector<Prior> priors(1);
  priors[0].y = ComplexArray({A.acquisitions(), A.nx(), A.ny()});
  priors[0].lambda = ridge;
  auto [y, res] = lindc_forward(k, A, priors, cg);
  auto reg = regress_images(model, y, cfg);
  return {std::move(reg.p), reg.diag};
}

struct SampleMetrics {
  std::string id;
  int accel = 0;
  double nrmse_t1 = 0.0;
  double mae_t1 = 0.0;
  double ssim_t1 = 0.0;
};

inline SampleMetrics compute_metrics(const std::string& id, int accel,
                                     const ParameterMaps& pred, const ParameterMaps& truth,
                                     const RealArray& mask) {
  SampleMetrics m;
  m.id = id;
  m.accel = accel;
  RealArray pt = t1_map(pred), tt = t1_map(truth);
  m.nrmse_t1 = nrmse(pt, tt, mask);
  m.mae_t1 = mae(pt, tt, mask);
  m.ssim_t1 = ssim(pt, tt, mask);
  return m;
}

inline void write_metrics_csv(const std::filesystem::path& path,
                              const std::vector<SampleMetrics>& rows) {
  std::ofstream out(path);
  out << "id,accel,nrmse_t1,mae_t1,ssim_t1\n";
  out.precision(12);
  double sn = 0.0, sm = 0.0, ss = 0.0;
  for (const auto& r : rows) {
    out << r.id << "," << r.accel << "," << r.nrmse_t1 << "," << r.mae_t1 << ","
        << r.ssim_t1 << "\n";
    sn += r.nrmse_t1;
    sm += r.mae_t1;
    ss += r.ssim_t1;
  }
  if (!rows.empty()) {
    const double n = static_cast<double>(rows.size());
    out << "aggregate_mean,," << sn / n << "," << sm / n << "," << ss / n << "\n";
  }
}

struct RoiRow {
  int roi = 0;
  double ref_mean = 0.0, ref_std = 0.0;
  double pred_mean = 0.0, pred_std = 0.0;
  double diff_pct = 0.0;
};

/// Per-ROI T1 statistics for the tube phantom.
inline std::vector<RoiRow> roi_table(const ParameterMaps& pred, const ParameterMaps& truth,
                                     const RealArray& roi_labels) {
  int n_roi = 0;
  for (double v : roi_labels.data) n_roi = std::max(n_roi, static_cast<int>(v));
  RealArray pt = t1_map(pred), tt = t1_map(truth);
  std::vector<RoiRow> rows;
  for (int roi = 1; roi <= n_roi; ++roi) {
    RoiRow r;
    r.roi = roi;
    double n = 0.0, sp = 0.0, sp2 = 0.0, st = 0.0, st2 = 0.0;
    for (std::size_t i = 0; i < roi_labels.size(); ++i) {
      if (static_cast<int>(roi_labels.data[i]) != roi) continue;
      n += 1.0;
      sp += pt.data[i];
      sp2 += pt.data[i] * pt.data[i];
      st += tt.data[i];
      st2 += tt.data[i] * tt.data[i];
    }
    if (n == 0.0) continue;
    r.pred_mean = sp / n;
    r.pred_std = std::sqrt(std::max(0.0, sp2 / n - r.pred_mean * r.pred_mean));
    r.ref_mean = st / n;
    r.ref_std = std::sqrt(std::max(0.0, st2 / n - r.ref_mean * r.ref_mean));
    r.diff_pct = 100.0 * (r.pred_mean - r.ref_mean) / r.ref_mean;
    rows.push_back(r);
  }
  return rows;
}

inline void write_roi_csv(const std::filesystem::path& path, const std::vector<RoiRow>& rows) {
  std::ofstream out(path);
  out << "roi,ref_mean,ref_std,pred_mean,pred_std,diff_pct\n";
  out.precision(6);
  for (const auto& r : rows)
    out << r.roi << "," << r.ref_mean << "," << r.ref_std << "," << r.pred_mean << ","
        << r.pred_std << "," << r.diff_pct << "\n";
}

/// Grayscale PGM export, values min-max scaled to 0..255.
inline void write_pgm(const std::filesystem::path& path, const RealArray& img) {
  const std::size_t nx = img.dim(0), ny = img.dim(1);
  double lo = img.data[0], hi = img.data[0];
  for (double v : img.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << ny << " " << nx << "\n255\n";
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y)
      out.put(static_cast<char>(static_cast<int>((img.at(x, y) - lo) * scale)));
}

}  // namespace qpinqi
