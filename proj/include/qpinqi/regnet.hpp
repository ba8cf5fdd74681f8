#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "qpinqi/rng.hpp"
#include "qpinqi/tensor.hpp"
#include "qpinqi/tensor_io.hpp"

namespace qpinqi {

/// Positive reparametrization lambda = softplus(5 lt) / 5. Overflow-safe on
/// both tails.
inline double lambda_effective(double lt) {
  const double z = 5.0 * lt;
  return (z > 30.0 ? z : std::log1p(std::exp(z))) / 5.0;
}

/// d lambda / d lt = sigmoid(5 lt).
inline double lambda_effective_deriv(double lt) {
  const double z = 5.0 * lt;
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Solves lambda_effective(lt) = lambda for lt.
inline double lambda_init_invert(double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("lambda target must be positive");
  const double z = 5.0 * lambda;
  return (z > 30.0 ? z : std::log(std::expm1(z))) / 5.0;
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Residual two-layer 3x3 convolutional prior over C channels:
///   out = x + W2 * softplus(W1 * x + b1 + iter_bias[i]) + b2
/// with zero padding. The final layer starts at zero, so the freshly
/// initialized network is the identity map. The per-iteration bias is the
/// conditioning on the unroll iteration.
struct ConvPriorWeights {
  std::size_t channels = 0;
  std::size_t hidden = 0;
  std::size_t iterations = 0;
  RealArray w1;         // [hidden, channels, 3, 3]
  RealArray b1;         // [hidden]
  RealArray iter_bias;  // [iterations, hidden]
  RealArray w2;         // [channels, hidden, 3, 3]
  RealArray b2;         // [channels]

  ConvPriorWeights() = default;
  ConvPriorWeights(std::size_t c, std::size_t h, std::size_t T)
      : channels(c),
        hidden(h),
        iterations(T),
        w1({h, c, 3, 3}),
        b1({h}),
        iter_bias({T, h}),
        w2({c, h, 3, 3}),
        b2({c}) {}

  static ConvPriorWeights init(std::size_t c, std::size_t h, std::size_t T, Rng rng) {
    ConvPriorWeights w(c, h, T);
    const double bound = std::sqrt(6.0 / (9.0 * static_cast<double>(c + h)));
    for (auto& v : w.w1.data) v = rng.uniform(-bound, bound);
    return w;  // b1, iter_bias, w2, b2 stay zero
  }

  ConvPriorWeights zeros_like() const {
    return ConvPriorWeights(channels, hidden, iterations);
  }

  std::size_t scalar_count() const {
    return w1.size() + b1.size() + iter_bias.size() + w2.size() + b2.size();
  }
};

namespace detail {

/// out[o] = sum_c w[o][c] (*) in[c], zero padding. Accumulates per channel
/// pair with the kernel in registers and a checked loop only on the border.
inline void conv3x3(const RealArray& in, const RealArray& w, RealArray& out) {
  const std::size_t ci = in.dim(0), nx = in.dim(1), ny = in.dim(2);
  const std::size_t co = w.dim(0), npx = nx * ny;
  out.fill(0.0);
  for (std::size_t o = 0; o < co; ++o) {
    double* op = out.data.data() + o * npx;
    for (std::size_t c = 0; c < ci; ++c) {
      const double* ip = in.data.data() + c * npx;
      const double* k = w.data.data() + (o * ci + c) * 9;
      if (nx >= 3 && ny >= 3) {
        for (std::size_t x = 1; x + 1 < nx; ++x) {
          const double* r0 = ip + (x - 1) * ny;
          const double* r1 = ip + x * ny;
          const double* r2 = ip + (x + 1) * ny;
          double* orow = op + x * ny;
          for (std::size_t y = 1; y + 1 < ny; ++y)
            orow[y] += k[0] * r0[y - 1] + k[1] * r0[y] + k[2] * r0[y + 1] +
                       k[3] * r1[y - 1] + k[4] * r1[y] + k[5] * r1[y + 1] +
                       k[6] * r2[y - 1] + k[7] * r2[y] + k[8] * r2[y + 1];
        }
      }
      for (std::size_t x = 0; x < nx; ++x) {
        const bool xborder = x == 0 || x + 1 == nx;
        for (std::size_t y = 0; y < ny; ++y) {
          if (!xborder && y != 0 && y + 1 != ny) {
            if (ny > 2) y = ny - 2;  // skip the interior already done
            continue;
          }
          double acc = 0.0;
          for (int dx = -1; dx <= 1; ++dx) {
            const long xx = static_cast<long>(x) + dx;
            if (xx < 0 || xx >= static_cast<long>(nx)) continue;
            for (int dy = -1; dy <= 1; ++dy) {
              const long yy = static_cast<long>(y) + dy;
              if (yy < 0 || yy >= static_cast<long>(ny)) continue;
              acc += k[(dx + 1) * 3 + dy + 1] * ip[xx * ny + yy];
            }
          }
          op[x * ny + y] += acc;
        }
      }
    }
  }
}

/// Gradient of conv3x3 w.r.t. its input: convolution of dout with the
/// flipped kernels, channels swapped.
inline void conv3x3_input_grad(const RealArray& dout, const RealArray& w,
                               RealArray& din) {
  const std::size_t co = dout.dim(0), nx = dout.dim(1), ny = dout.dim(2);
  const std::size_t ci = w.dim(1), npx = nx * ny;
  din.fill(0.0);
  for (std::size_t c = 0; c < ci; ++c) {
    double* dp = din.data.data() + c * npx;
    for (std::size_t o = 0; o < co; ++o) {
      const double* gp = dout.data.data() + o * npx;
      const double* kfwd = w.data.data() + (o * ci + c) * 9;
      double k[9];  // flipped
      for (int a = 0; a < 9; ++a) k[a] = kfwd[8 - a];
      if (nx >= 3 && ny >= 3) {
        for (std::size_t x = 1; x + 1 < nx; ++x) {
          const double* r0 = gp + (x - 1) * ny;
          const double* r1 = gp + x * ny;
          const double* r2 = gp + (x + 1) * ny;
          double* orow = dp + x * ny;
          for (std::size_t y = 1; y + 1 < ny; ++y)
            orow[y] += k[0] * r0[y - 1] + k[1] * r0[y] + k[2] * r0[y + 1] +
                       k[3] * r1[y - 1] + k[4] * r1[y] + k[5] * r1[y + 1] +
                       k[6] * r2[y - 1] + k[7] * r2[y] + k[8] * r2[y + 1];
        }
      }
      for (std::size_t x = 0; x < nx; ++x) {
        const bool xborder = x == 0 || x + 1 == nx;
        for (std::size_t y = 0; y < ny; ++y) {
          if (!xborder && y != 0 && y + 1 != ny) {
            if (ny > 2) y = ny - 2;
            continue;
          }
          double acc = 0.0;
          for (int dx = -1; dx <= 1; ++dx) {
            const long xx = static_cast<long>(x) + dx;
            if (xx < 0 || xx >= static_cast<long>(nx)) continue;
            for (int dy = -1; dy <= 1; ++dy) {
              const long yy = static_cast<long>(y) + dy;
              if (yy < 0 || yy >= static_cast<long>(ny)) continue;
              acc += k[(dx + 1) * 3 + dy + 1] * gp[xx * ny + yy];
            }
          }
          dp[x * ny + y] += acc;
        }
      }
    }
  }
}

inline void conv3x3_weight_grad(const RealArray& in, const RealArray& dout,
                                RealArray& dw) {
  const std::size_t ci = in.dim(0), nx = in.dim(1), ny = in.dim(2);
  const std::size_t co = dout.dim(0), npx = nx * ny;
  for (std::size_t o = 0; o < co; ++o) {
    const double* gp = dout.data.data() + o * npx;
    for (std::size_t c = 0; c < ci; ++c) {
      const double* ip = in.data.data() + c * npx;
      double acc[9] = {0};
      if (nx >= 3 && ny >= 3) {
        for (std::size_t x = 1; x + 1 < nx; ++x) {
          const double* r0 = ip + (x - 1) * ny;
          const double* r1 = ip + x * ny;
          const double* r2 = ip + (x + 1) * ny;
          const double* grow = gp + x * ny;
          for (std::size_t y = 1; y + 1 < ny; ++y) {
            const double d = grow[y];
            acc[0] += d * r0[y - 1];
            acc[1] += d * r0[y];
            acc[2] += d * r0[y + 1];
            acc[3] += d * r1[y - 1];
            acc[4] += d * r1[y];
            acc[5] += d * r1[y + 1];
            acc[6] += d * r2[y - 1];
            acc[7] += d * r2[y];
            acc[8] += d * r2[y + 1];
          }
        }
      }
      for (std::size_t x = 0; x < nx; ++x) {
        const bool xborder = x == 0 || x + 1 == nx;
        for (std::size_t y = 0; y < ny; ++y) {
          if (!xborder && y != 0 && y + 1 != ny) {
            if (ny > 2) y = ny - 2;
            continue;
          }
          const double d = gp[x * ny + y];
          if (d == 0.0) continue;
          for (int dx = -1; dx <= 1; ++dx) {
            const long xx = static_cast<long>(x) + dx;
            if (xx < 0 || xx >= static_cast<long>(nx)) continue;
            for (int dy = -1; dy <= 1; ++dy) {
              const long yy = static_cast<long>(y) + dy;
              if (yy < 0 || yy >= static_cast<long>(ny)) continue;
              acc[(dx + 1) * 3 + dy + 1] += d * ip[xx * ny + yy];
            }
          }
        }
      }
      double* dwp = dw.data.data() + (o * ci + c) * 9;
      for (int a = 0; a < 9; ++a) dwp[a] += acc[a];
    }
  }
}

}  // namespace detail

/// x + net(x) for iteration in 1..T.
inline RealArray prior_forward(const RealArray& x, std::size_t iteration,
                               const ConvPriorWeights& w) {
  if (x.rank() != 3 || x.dim(0) != w.channels) throw ShapeError("prior input shape mismatch");
  if (iteration < 1 || iteration > w.iterations)
    throw ConfigError("prior iteration index out of range");
  const std::size_t nx = x.dim(1), ny = x.dim(2), npx = nx * ny;
  RealArray h({w.hidden, nx, ny});
  detail::conv3x3(x, w.w1, h);
  for (std::size_t o = 0; o < w.hidden; ++o) {
    const double b = w.b1[o] + w.iter_bias.at(iteration - 1, o);
    for (std::size_t px = 0; px < npx; ++px) {
      double& v = h.data[o * npx + px];
      v = softplus(v + b);
    }
  }
  RealArray out({w.channels, nx, ny});
  detail::conv3x3(h, w.w2, out);
  for (std::size_t c = 0; c < w.channels; ++c)
    for (std::size_t px = 0; px < npx; ++px)
      out.data[c * npx + px] += x.data[c * npx + px] + w.b2[c];
  return out;
}

struct PriorGrads {
  RealArray d_x;
  ConvPriorWeights d_w;
};

inline PriorGrads prior_backward(const RealArray& x, std::size_t iteration,
                                 const ConvPriorWeights& w, const RealArray& dout) {
  if (!x.same_shape(dout)) throw ShapeError("prior cotangent shape mismatch");
  const std::size_t nx = x.dim(1), ny = x.dim(2), npx = nx * ny;

  // Recompute the pre-activation and activation.
  RealArray pre({w.hidden, nx, ny});
  detail::conv3x3(x, w.w1, pre);
  for (std::size_t o = 0; o < w.hidden; ++o) {
    const double b = w.b1[o] + w.iter_bias.at(iteration - 1, o);
    for (std::size_t px = 0; px < npx; ++px) pre.data[o * npx + px] += b;
  }
  RealArray act({w.hidden, nx, ny});
  for (std::size_t i = 0; i < pre.size(); ++i) act.data[i] = softplus(pre.data[i]);

  PriorGrads g{RealArray({w.channels, nx, ny}), w.zeros_like()};

  for (std::size_t c = 0; c < w.channels; ++c)
    for (std::size_t px = 0; px < npx; ++px)
      g.d_w.b2[c] += dout.data[c * npx + px];
  detail::conv3x3_weight_grad(act, dout, g.d_w.w2);

  RealArray dact({w.hidden, nx, ny});
  detail::conv3x3_input_grad(dout, w.w2, dact);
  for (std::size_t i = 0; i < dact.size(); ++i) dact.data[i] *= sigmoid(pre.data[i]);

  for (std::size_t o = 0; o < w.hidden; ++o) {
    double acc = 0.0;
    for (std::size_t px = 0; px < npx; ++px) acc += dact.data[o * npx + px];
    g.d_w.b1[o] = acc;
    g.d_w.iter_bias.at(iteration - 1, o) = acc;
  }
  detail::conv3x3_weight_grad(x, dact, g.d_w.w1);
  detail::conv3x3_input_grad(dact, w.w1, g.d_x);
  g.d_x += dout;  // residual path
  return g;
}

/// Everything gradient descent updates: the per-iteration reparametrized
/// regularization strengths, the two convolutional priors (image space over
/// 2*N_r real channels, parameter space over the parameter channels), and the
/// inner gradient-descent stepsizes used by the unrolled-GD mode.
struct ModelState {
  std::size_t T = 0;
  std::vector<double> lt_p, lt_y, lt_q;  // reparametrized lambdas, one per iteration
  std::vector<double> lt_gd;             // reparametrized stepsizes (unrolled-GD mode)
  ConvPriorWeights image_prior;
  ConvPriorWeights param_prior;

  static ModelState init(std::size_t T, std::size_t n_outputs, std::size_t n_param_ch,
                         std::size_t hidden, std::uint64_t seed,
                         double lam_p = 3.0, double lam_y = 0.1,
                         double lam_q_base = 0.1, double lam_q_slope = 0.05,
                         double gd_step = 0.05) {
    ModelState s;
    s.T = T;
    s.lt_p.resize(T);
    s.lt_y.resize(T);
    s.lt_q.resize(T);
    s.lt_gd.resize(T);
    for (std::size_t i = 0; i < T; ++i) {
      s.lt_p[i] = lambda_init_invert(lam_p);
      s.lt_y[i] = lambda_init_invert(lam_y);
      s.lt_q[i] = lambda_init_invert(lam_q_base + lam_q_slope * static_cast<double>(i + 1));
      s.lt_gd[i] = lambda_init_invert(gd_step);
    }
    Rng rng(seed);
    s.image_prior = ConvPriorWeights::init(2 * n_outputs, hidden, T, rng.split(1));
    s.param_prior = ConvPriorWeights::init(n_param_ch, hidden, T, rng.split(2));
    return s;
  }

  ModelState zeros_like() const {
    ModelState z;
    z.T = T;
    z.lt_p.assign(T, 0.0);
    z.lt_y.assign(T, 0.0);
    z.lt_q.assign(T, 0.0);
    z.lt_gd.assign(T, 0.0);
    z.image_prior = image_prior.zeros_like();
    z.param_prior = param_prior.zeros_like();
    return z;
  }

  std::size_t scalar_count() const {
    return 4 * T + image_prior.scalar_count() + param_prior.scalar_count();
  }

  /// Scalar slots in a fixed order: lambdas first, then both priors.
  /// is_lambda marks the lambda/stepsize group (different learning rate, no
  /// weight decay).
  template <typename Fn>
  void for_each_slot(Fn&& fn) {
    for (auto* v : {&lt_p, &lt_y, &lt_q, &lt_gd})
      for (auto& x : *v) fn(x, /*is_lambda=*/true);
    for (auto* prior : {&image_prior, &param_prior})
      for (auto* arr : {&prior->w1, &prior->b1, &prior->iter_bias, &prior->w2, &prior->b2})
        for (auto& x : arr->data) fn(x, /*is_lambda=*/false);
  }
  template <typename Fn>
  void for_each_slot(Fn&& fn) const {
    const_cast<ModelState*>(this)->for_each_slot(
        [&](double& x, bool lam) { fn(static_cast<const double&>(x), lam); });
  }

  RealArray flatten() const {
    RealArray flat({scalar_count()});
    std::size_t i = 0;
    for_each_slot([&](const double& x, bool) { flat[i++] = x; });
    return flat;
  }
  void unflatten(const RealArray& flat) {
    if (flat.size() != scalar_count()) throw ShapeError("flat state size mismatch");
    std::size_t i = 0;
    for_each_slot([&](double& x, bool) { x = flat[i++]; });
  }

  void accumulate(const ModelState& other, double scale = 1.0) {
    std::vector<const double*> src;
    other.for_each_slot([&](const double& x, bool) { src.push_back(&x); });
    std::size_t i = 0;
    for_each_slot([&](double& x, bool) { x += scale * *src[i++]; });
  }
};

/// Checkpoint = directory of QTEN1 tensors plus a JSON manifest holding the
/// scalar lambdas and the structural config.
inline void save_model_state(const std::filesystem::path& dir, const ModelState& s,
                             const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["T"] = s.T;
  m["lt_p"] = s.lt_p;
  m["lt_y"] = s.lt_y;
  m["lt_q"] = s.lt_q;
  m["lt_gd"] = s.lt_gd;
  m["image_prior"] = {{"channels", s.image_prior.channels},
                      {"hidden", s.image_prior.hidden}};
  m["param_prior"] = {{"channels", s.param_prior.channels},
                      {"hidden", s.param_prior.hidden}};
  if (!extra.is_null()) m["extra"] = extra;
  std::ofstream(dir / "state.json") << m.dump(2) << "\n";
  for (const auto& [name, prior] :
       {std::pair{"image", &s.image_prior}, std::pair{"param", &s.param_prior}}) {
    write_tensor(dir / (std::string(name) + "_w1.qten"), prior->w1);
    write_tensor(dir / (std::string(name) + "_b1.qten"), prior->b1);
    write_tensor(dir / (std::string(name) + "_iter_bias.qten"), prior->iter_bias);
    write_tensor(dir / (std::string(name) + "_w2.qten"), prior->w2);
    write_tensor(dir / (std::string(name) + "_b2.qten"), prior->b2);
  }
}

inline ModelState load_model_state(const std::filesystem::path& dir,
                                   nlohmann::json* extra = nullptr) {
  std::ifstream in(dir / "state.json");
  if (!in) throw TensorIoError(IoErrorKind::Io, "cannot open " + (dir / "state.json").string());
  nlohmann::json m = nlohmann::json::parse(in);
  ModelState s;
  s.T = m["T"].get<std::size_t>();
  s.lt_p = m["lt_p"].get<std::vector<double>>();
  s.lt_y = m["lt_y"].get<std::vector<double>>();
  s.lt_q = m["lt_q"].get<std::vector<double>>();
  s.lt_gd = m["lt_gd"].get<std::vector<double>>();
  for (const auto& [name, prior] :
       {std::pair{"image", &s.image_prior}, std::pair{"param", &s.param_prior}}) {
    prior->w1 = read_tensor<double>(dir / (std::string(name) + "_w1.qten"));
    prior->b1 = read_tensor<double>(dir / (std::string(name) + "_b1.qten"));
    prior->iter_bias = read_tensor<double>(dir / (std::string(name) + "_iter_bias.qten"));
    prior->w2 = read_tensor<double>(dir / (std::string(name) + "_w2.qten"));
    prior->b2 = read_tensor<double>(dir / (std::string(name) + "_b2.qten"));
    prior->channels = prior->w2.dim(0);
    prior->hidden = prior->w1.dim(0);
    prior->iterations = prior->iter_bias.dim(0);
  }
  if (extra && m.contains("extra")) *extra = m["extra"];
  return s;
}

}  // namespace qpinqi
