// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlos/encoder.hpp"
#include "nlos/field.hpp"
#include "nlos/render.hpp"
#include "nlos/scan.hpp"
#include "nlos/tensor.hpp"

namespace nlos::learn {

// Clamp constants; the raw loss expressions are singular at the
// boundaries.
inline constexpr double kBetaClamp = 1e-4;
inline constexpr double kAlphaClamp = 1e-6;
inline constexpr double kPoissonClamp = 1e-8;

struct LossWeights {
  double mse = 1.0;
  double beta = 1e-4;
  double tv = 1e-2;
  double poisson = 1.0;
};

enum class TrainMode { kSup, kUnsup, kJoint };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kSup: return "sup";
    case TrainMode::kUnsup: return "unsup";
    default: return "joint";
  }
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "sup") return TrainMode::kSup;
  if (s == "unsup") return TrainMode::kUnsup;
  if (s == "joint") return TrainMode::kJoint;
  throw std::invalid_argument("unknown training mode: " + s);
}

struct ValueGrad {
  double value = 0.0;
  std::vector<double> grad;
};

/// Mean squared error over rendered ray values.
inline ValueGrad loss_mse(std::span<const double> rendered, std::span<const double> target) {
  if (rendered.empty() || rendered.size() != target.size())
    throw std::invalid_argument("mse inputs must be non-empty and equal length");
  ValueGrad out;
  out.grad.resize(rendered.size());
  const double inv = 1.0 / static_cast<double>(rendered.size());
  for (std::size_t i = 0; i < rendered.size(); ++i) {
    const double d = rendered[i] - target[i];
    out.value += d * d * inv;
    out.grad[i] = 2.0 * d * inv;
  }
  return out;
}

/// Beta prior on final transmittance: mean of log T + log(1 - T),
/// biasing rays toward fully hitting or fully missing.
inline ValueGrad loss_beta(std::span<const double> t_finals) {
  ValueGrad out;
  out.grad.assign(t_finals.size(), 0.0);
  if (t_finals.empty()) return out;
  const double inv = 1.0 / static_cast<double>(t_finals.size());
  for (std::size_t i = 0; i < t_finals.size(); ++i) {
    const double t = std::clamp(t_finals[i], kBetaClamp, 1.0 - kBetaClamp);
    out.value += (std::log(t) + std::log(1.0 - t)) * inv;
    if (t_finals[i] > kBetaClamp && t_finals[i] < 1.0 - kBetaClamp)
      out.grad[i] = (1.0 / t - 1.0 / (1.0 - t)) * inv;
  }
  return out;
}

struct RayTv {
  double value = 0.0;
  std::vector<std::vector<double>> grad;  // matches the input layout
};

/// Total variation of log opacities along each ray, averaged over rays;
/// ties get subgradient zero.
inline RayTv loss_tv(const std::vector<std::vector<double>>& ray_alphas) {
  RayTv out;
  out.grad.resize(ray_alphas.size());
  if (ray_alphas.empty()) return out;
  const double inv = 1.0 / static_cast<double>(ray_alphas.size());
  for (std::size_t r = 0; r < ray_alphas.size(); ++r) {
    const auto& alphas = ray_alphas[r];
    out.grad[r].assign(alphas.size(), 0.0);
    for (std::size_t i = 0; i + 1 < alphas.size(); ++i) {
      const double a0 = std::max(alphas[i], kAlphaClamp);
      const double a1 = std::max(alphas[i + 1], kAlphaClamp);
      const double diff = std::log(a1) - std::log(a0);
      out.value += std::abs(diff) * inv;
      if (diff == 0.0) continue;
      const double sign = diff > 0.0 ? 1.0 : -1.0;
      if (alphas[i + 1] > kAlphaClamp) out.grad[r][i + 1] += sign * inv / a1;
      if (alphas[i] > kAlphaClamp) out.grad[r][i] -= sign * inv / a0;
    }
  }
  return out;
}

/// Poisson negative log-likelihood of counts under rendered rates
/// (constant log n! term dropped). The gradient is evaluated at the
/// clamped rate so zero-rate bins with observed photons still push up.
inline ValueGrad loss_poisson(std::span<const double> rates, std::span<const double> counts) {
  if (rates.empty() || rates.size() != counts.size())
    throw std::invalid_argument("poisson inputs must be non-empty and equal length");
  ValueGrad out;
  out.grad.resize(rates.size());
  const double inv = 1.0 / static_cast<double>(rates.size());
  for (std::size_t i = 0; i < rates.size(); ++i) {
    if (counts[i] < 0.0) throw std::invalid_argument("negative photon count");
    const double rate = std::max(rates[i], kPoissonClamp);
    out.value += (rate - counts[i] * std::log(rate)) * inv;
    out.grad[i] = (1.0 - counts[i] / rate) * inv;
  }
  return out;
}

struct LossTerms {
  std::optional<double> mse;
  std::optional<double> beta;
  std::optional<double> tv;
  std::optional<double> poisson;
};

/// Weighted combination per training mode. Each mode requires its terms:
/// sup = mse+beta+tv, unsup = poisson+beta+tv, joint = sup + unsup (the
/// shared priors count once per objective).
inline double combine_losses(const LossTerms& terms, const LossWeights& w, TrainMode mode) {
  auto need = [](const std::optional<double>& t, const char* name) {
    if (!t) throw std::invalid_argument(std::string("missing loss term for mode: ") + name);
    return *t;
  };
  const auto priors = [&] { return w.beta * need(terms.beta, "beta") + w.tv * need(terms.tv, "tv"); };
  switch (mode) {
    case TrainMode::kSup:
      return w.mse * need(terms.mse, "mse") + priors();
    case TrainMode::kUnsup:
      return w.poisson * need(terms.poisson, "poisson") + priors();
    default:
      return w.mse * need(terms.mse, "mse") + w.poisson * need(terms.poisson, "poisson") +
             2.0 * priors();
  }
}

/// Bias-corrected Adam over one flat parameter vector.
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

inline void adam_step(AdamState& state, field::ParamStore& params, std::span<const double> grad) {
  auto& values = params.values();
  if (grad.size() != values.size()) throw std::invalid_argument("gradient/parameter size mismatch");
  if (state.m.empty()) {
    state.m.assign(values.size(), 0.0);
    state.v.assign(values.size(), 0.0);
  }
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i])) {
      for (const auto& b : params.blocks())
        if (i >= b.offset && i < b.offset + b.size)
          throw std::runtime_error("non-finite gradient in parameter block " + b.name);
      throw std::runtime_error("non-finite gradient");
    }

  ++state.t;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    values[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

inline double metric_rmse(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) throw std::invalid_argument("metric images must share dims");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

/// PSNR in dB; +infinity sentinel for identical images.
inline double metric_psnr(double rmse, double max_value = 1.0) {
  if (rmse == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(max_value / rmse);
}

/// SSIM with the usual 11-tap Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, averaged over valid window positions. Images smaller than
/// the window fall back to global statistics.
inline double metric_ssim(const Tensor& a, const Tensor& b, double max_value = 1.0) {
  if (a.dims() != b.dims() || a.rank() != 2)
    throw std::invalid_argument("ssim expects two equal 2d images");
  const double c1 = (0.01 * max_value) * (0.01 * max_value);
  const double c2 = (0.03 * max_value) * (0.03 * max_value);
  const std::size_t h = a.dim(0), w = a.dim(1);
  constexpr std::size_t kWin = 11;

  if (h < kWin || w < kWin) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ma += a[i];
      mb += b[i];
    }
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(a.size());
    double va = 0, vb = 0, cov = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      va += (a[i] - ma) * (a[i] - ma);
      vb += (b[i] - mb) * (b[i] - mb);
      cov += (a[i] - ma) * (b[i] - mb);
    }
    const double n = static_cast<double>(a.size());
    va /= n;
    vb /= n;
    cov /= n;
    return ((2 * ma * mb + c1) * (2 * cov + c2)) /
           ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }

  double win[kWin];
  double wsum = 0.0;
  for (std::size_t i = 0; i < kWin; ++i) {
    const double x = static_cast<double>(i) - 5.0;
    win[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    wsum += win[i];
  }
  for (double& v : win) v /= wsum;

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t ci = 5; ci + 5 < h; ++ci)
    for (std::size_t cj = 5; cj + 5 < w; ++cj) {
      double ma = 0, mb = 0, vaa = 0, vbb = 0, vab = 0;
      for (std::size_t di = 0; di < kWin; ++di)
        for (std::size_t dj = 0; dj < kWin; ++dj) {
          const double weight = win[di] * win[dj];
          const double pa = a(ci + di - 5, cj + dj - 5);
          const double pb = b(ci + di - 5, cj + dj - 5);
          ma += weight * pa;
          mb += weight * pb;
          vaa += weight * pa * pa;
          vbb += weight * pb * pb;
          vab += weight * pa * pb;
        }
      const double var_a = vaa - ma * ma;
      const double var_b = vbb - mb * mb;
      const double cov = vab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

/// Scale a nonnegative image so its maximum is 1 (no-op for all-zero).
inline Tensor normalize_max(const Tensor& t) {
  Tensor out = t;
  const double peak = t.max_abs();
  if (peak > 0.0)
    for (double& v : out.data()) v /= peak;
  return out;
}

/// Bin window [b0, b1) that a per-pixel fit step renders: the nonzero
/// support of the pixel's histogram padded by guard bins, intersected
/// with the path-length range the bbox can produce.
inline std::pair<std::size_t, std::size_t> fit_window(const TransientMeasurement& m, std::size_t i,
                                                      std::size_t j, const Aabb& bbox,
                                                      std::size_t guard) {
  const auto& p = m.pattern;
  const Vec3 l = p.laser_at(i, j);
  const Vec3 s = p.sensor_at(i, j);
  const double c_dt = kSpeedOfLight * p.bin_width;

  // Path-length range over the box, sampled on a coarse lattice (the max
  // over a convex function is exact at corners; the min gets padding).
  double lo = 1e300, hi = 0.0;
  for (int ix = 0; ix < 5; ++ix)
    for (int iy = 0; iy < 5; ++iy)
      for (int iz = 0; iz < 5; ++iz) {
        const Vec3 x = bbox.min + Vec3{bbox.extent().x * ix / 4.0, bbox.extent().y * iy / 4.0,
                                       bbox.extent().z * iz / 4.0};
        const double path = distance(l, x) + distance(s, x);
        lo = std::min(lo, path);
        hi = std::max(hi, path);
      }
  const double baseline = distance(l, s);
  auto lo_bin = static_cast<std::ptrdiff_t>(lo / c_dt) - 2;
  auto hi_bin = static_cast<std::ptrdiff_t>(hi / c_dt) + 3;
  lo_bin = std::max(lo_bin, static_cast<std::ptrdiff_t>(baseline / c_dt) + 1);
  hi_bin = std::min(hi_bin, static_cast<std::ptrdiff_t>(p.bins));

  // Nonzero support of this pixel's histogram.
  std::ptrdiff_t first = -1, last = -1;
  for (std::size_t b = 0; b < p.bins; ++b)
    if (m.data(i, j, b) > 0.0) {
      if (first < 0) first = static_cast<std::ptrdiff_t>(b);
      last = static_cast<std::ptrdiff_t>(b);
    }
  if (first >= 0) {
    lo_bin = std::max(lo_bin, first - static_cast<std::ptrdiff_t>(guard));
    hi_bin = std::min(hi_bin, last + static_cast<std::ptrdiff_t>(guard) + 1);
    lo_bin = std::max(lo_bin, static_cast<std::ptrdiff_t>(baseline / c_dt) + 1);
  }
  if (hi_bin <= lo_bin) throw std::runtime_error("empty fit window: bbox outside temporal range");
  return {static_cast<std::size_t>(lo_bin), static_cast<std::size_t>(hi_bin)};
}

struct FitConfig {
  std::size_t steps = 2000;
  std::size_t rays_per_step = 4096;
  LossWeights weights;
  std::uint64_t rng_key = 0;
  render::StepRule march{64, true};
  std::size_t guard_bins = 8;
  double lr = 1e-2;  // per-scene voxel fits favor a fast explicit-grid rate
};

struct TraceRow {
  std::size_t step = 0;
  double mse = 0.0;
  double poisson = 0.0;
  double beta = 0.0;
  double tv = 0.0;
  double total = 0.0;
};

struct FitResult {
  std::vector<TraceRow> trace;
  bool diverged = false;
};

/// Per-scene iterative reconstruction: round-robin over sensor pixels,
/// render a transient window, take an Adam step on the unsupervised
/// objective.
inline FitResult fit_scene(const TransientMeasurement& m, field::FieldRef field,
                           const FitConfig& cfg) {
  m.validate();
  const auto& p = m.pattern;
  FitResult result;
  AdamState adam;
  adam.lr = cfg.lr;

  const std::size_t n_params = field.params().size();
  std::vector<std::vector<double>> chunk_grads(field::kGradChunks);
  std::vector<double> grad(n_params);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::size_t pix = step % (p.rows * p.cols);
    const std::size_t i = pix / p.cols;
    const std::size_t j = pix % p.cols;
    const Vec3 l = p.laser_at(i, j);
    const Vec3 s = p.sensor_at(i, j);

    const auto [b0, b1] = fit_window(m, i, j, field.bbox(), cfg.guard_bins);

    render::TransientConfig tc;
    tc.samples = cfg.rays_per_step;
    tc.march = cfg.march;
    tc.rng_key = CounterRng::mix(cfg.rng_key ^ CounterRng::mix(step));

    const auto fwd =
        render_transient_with_priors(field, l, s, b0, b1, p.bin_width, tc, {cfg.march.steps, true});

    std::vector<double> counts(b1 - b0);
    for (std::size_t b = b0; b < b1; ++b) counts[b - b0] = m.data(i, j, b);

    const auto lp = loss_poisson(fwd.est.rates, counts);
    const auto lb = loss_beta(fwd.t_finals);
    const auto lt = loss_tv(fwd.alphas);
    const double total =
        combine_losses({std::nullopt, lb.value, lt.value, lp.value}, cfg.weights,
                       TrainMode::kUnsup);

    TraceRow row;
    row.step = step;
    row.poisson = lp.value;
    row.beta = lb.value;
    row.tv = lt.value;
    row.total = total;
    result.trace.push_back(row);
    if (!std::isfinite(total)) {
      result.diverged = true;
      return result;
    }
    if (cfg.weights.poisson == 0.0 && cfg.weights.beta == 0.0 && cfg.weights.tv == 0.0) continue;

    std::vector<double> d_rates(lp.grad.size());
    for (std::size_t b = 0; b < d_rates.size(); ++b) d_rates[b] = cfg.weights.poisson * lp.grad[b];
    std::vector<double> d_tfinals(lb.grad.size());
    for (std::size_t r = 0; r < d_tfinals.size(); ++r) d_tfinals[r] = cfg.weights.beta * lb.grad[r];
    auto d_alphas = lt.grad;
    for (auto& ray : d_alphas)
      for (double& v : ray) v *= cfg.weights.tv;

    for (auto& cgrad : chunk_grads) cgrad.assign(n_params, 0.0);
    render_transient_with_priors_grad(field, l, s, b0, b1, p.bin_width, tc,
                                      {cfg.march.steps, true}, fwd.est.rng_checksum, d_rates,
                                      d_tfinals, d_alphas,
                                      [&](std::size_t c) { return std::span<double>(chunk_grads[c]); });
    std::fill(grad.begin(), grad.end(), 0.0);
    for (const auto& cgrad : chunk_grads)
      for (std::size_t k = 0; k < n_params; ++k) grad[k] += cgrad[k];

    adam_step(adam, field.params(), grad);
  }
  return result;
}

/// One target view: camera plus its ground-truth intensity image.
struct ViewSample {
  Camera camera;
  Tensor image;  // (height, width)
};

struct ToySample {
  TransientMeasurement measurement;
  std::vector<ViewSample> views;
};

struct TrainConfig {
  TrainMode mode = TrainMode::kJoint;
  std::size_t steps = 3000;
  std::size_t rays_per_step = 1024;      // image rays per supervised step
  std::size_t transient_rays = 1024;     // rays per unsupervised step
  LossWeights weights;
  std::uint64_t rng_key = 0;
  render::StepRule march{32, true};
  std::size_t guard_bins = 8;
  double lr = 1e-3;
  std::size_t checkpoint_every = 0;  // 0 disables checkpoints
  std::filesystem::path checkpoint_dir;
};

namespace detail {

struct SupBatch {
  std::vector<double> rendered;
  std::vector<double> target;
  std::vector<double> t_finals;
  std::vector<std::vector<double>> alphas;
  std::vector<Camera::Ray> rays;
};

/// Deterministic (view, pixel) draw for supervised ray n of a step.
inline Camera::Ray pick_ray(const std::vector<ViewSample>& views, std::uint64_t key,
                            std::size_t step, std::size_t n, double* target) {
  auto rng = CounterRng::keyed(key, 0x737570, step, n);
  const auto v = static_cast<std::size_t>(rng.next_int(0, static_cast<std::int64_t>(views.size()) - 1));
  const auto& view = views[v];
  const auto i = static_cast<std::size_t>(
      rng.next_int(0, static_cast<std::int64_t>(view.camera.height) - 1));
  const auto j = static_cast<std::size_t>(
      rng.next_int(0, static_cast<std::int64_t>(view.camera.width) - 1));
  *target = view.image(i, j);
  return view.camera.ray(i, j);
}

}  // namespace detail

struct TrainResult {
  std::vector<TraceRow> trace;
  bool diverged = false;
};

/// Toy-scale feed-forward training of the conditioned radiance field:
/// supervised render-and-compare against target views, unsupervised
/// matching of rendered transients, or both jointly.
inline TrainResult train_toy(const std::vector<ToySample>& dataset, enc::Encoder& encoder,
                             field::MlpField& mlp, const TrainConfig& cfg) {
  if (dataset.empty()) throw std::invalid_argument("empty training dataset");
  const bool wants_sup = cfg.mode != TrainMode::kUnsup;
  const bool wants_unsup = cfg.mode != TrainMode::kSup;
  for (const auto& sample : dataset) {
    sample.measurement.validate();
    if (wants_sup && sample.views.empty())
      throw std::invalid_argument("missing loss term for mode: mse (no target views)");
  }

  TrainResult result;
  AdamState adam_mlp, adam_enc;
  adam_mlp.lr = adam_enc.lr = cfg.lr;

  const std::size_t n_mlp = mlp.params().size();
  std::vector<std::vector<double>> mlp_chunk_grads(field::kGradChunks);
  std::vector<double> mlp_grad(n_mlp);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto& sample = dataset[step % dataset.size()];
    const auto& m = sample.measurement;
    const auto& p = m.pattern;

    encoder.forward(m.data);
    encoder.zero_grad();
    for (auto& g : mlp_chunk_grads) g.assign(n_mlp, 0.0);
    field::FieldRef ref(mlp, &encoder);

    TraceRow row;
    row.step = step;
    LossTerms terms;
    double beta_total = 0.0, tv_total = 0.0;

    // Supervised branch: random rays over all target views.
    detail::SupBatch batch;
    if (wants_sup) {
      const std::size_t n = cfg.rays_per_step;
      batch.rendered.assign(n, 0.0);
      batch.target.assign(n, 0.0);
      batch.t_finals.assign(n, 1.0);
      batch.alphas.assign(n, {});
      batch.rays.resize(n);
      for (std::size_t r = 0; r < n; ++r)
        batch.rays[r] = detail::pick_ray(sample.views, cfg.rng_key, step, r, &batch.target[r]);

      parallel_chunks(n, field::kGradChunks,
                      [&](std::size_t chunk, std::size_t begin, std::size_t end) {
                        field::FieldRef local = ref;
                        local.set_chunk(chunk);
                        for (std::size_t r = begin; r < end; ++r) {
                          auto res = composite_ray(local, batch.rays[r].origin, batch.rays[r].dir,
                                                   cfg.march);
                          batch.rendered[r] = res.intensity;
                          batch.t_finals[r] = res.t_final;
                          batch.alphas[r] = std::move(res.ray.alpha);
                        }
                      });
      const auto lm = loss_mse(batch.rendered, batch.target);
      const auto lb = loss_beta(batch.t_finals);
      const auto lt = loss_tv(batch.alphas);
      terms.mse = lm.value;
      beta_total += lb.value;
      tv_total += lt.value;
      row.mse = lm.value;

      parallel_chunks(batch.rays.size(), field::kGradChunks,
                      [&](std::size_t chunk, std::size_t begin, std::size_t end) {
                        field::FieldRef local = ref;
                        local.set_chunk(chunk);
                        auto grad = std::span<double>(mlp_chunk_grads[chunk]);
                        for (std::size_t r = begin; r < end; ++r) {
                          std::vector<double> d_alpha(lt.grad[r].size());
                          for (std::size_t i = 0; i < d_alpha.size(); ++i)
                            d_alpha[i] = cfg.weights.tv * lt.grad[r][i];
                          composite_ray_grad(local, batch.rays[r].origin, batch.rays[r].dir,
                                             cfg.march, cfg.weights.mse * lm.grad[r],
                                             cfg.weights.beta * lb.grad[r],
                                             d_alpha.empty() ? nullptr : &d_alpha, grad);
                        }
                      });
    }

    // Unsupervised branch: one sensor location per step, round-robin.
    if (wants_unsup) {
      const std::size_t pix = step % (p.rows * p.cols);
      const std::size_t i = pix / p.cols;
      const std::size_t j = pix % p.cols;
      const Vec3 l = p.laser_at(i, j);
      const Vec3 s = p.sensor_at(i, j);
      const auto [b0, b1] = fit_window(m, i, j, mlp.bbox(), cfg.guard_bins);

      render::TransientConfig tc;
      tc.samples = cfg.transient_rays;
      tc.march = cfg.march;
      tc.rng_key = CounterRng::mix(cfg.rng_key ^ CounterRng::mix(0x756e7375 + step));

      const auto fwd = render_transient_with_priors(ref, l, s, b0, b1, p.bin_width, tc,
                                                    {cfg.march.steps, true});
      std::vector<double> counts(b1 - b0);
      for (std::size_t b = b0; b < b1; ++b) counts[b - b0] = m.data(i, j, b);

      const auto lp = loss_poisson(fwd.est.rates, counts);
      const auto lb = loss_beta(fwd.t_finals);
      const auto lt = loss_tv(fwd.alphas);
      terms.poisson = lp.value;
      beta_total += lb.value;
      tv_total += lt.value;
      row.poisson = lp.value;

      std::vector<double> d_rates(lp.grad.size());
      for (std::size_t b = 0; b < d_rates.size(); ++b)
        d_rates[b] = cfg.weights.poisson * lp.grad[b];
      std::vector<double> d_tfinals(lb.grad.size());
      for (std::size_t r = 0; r < d_tfinals.size(); ++r)
        d_tfinals[r] = cfg.weights.beta * lb.grad[r];
      auto d_alphas = lt.grad;
      for (auto& ray : d_alphas)
        for (double& v : ray) v *= cfg.weights.tv;

      render_transient_with_priors_grad(
          ref, l, s, b0, b1, p.bin_width, tc, {cfg.march.steps, true}, fwd.est.rng_checksum,
          d_rates, d_tfinals, d_alphas,
          [&](std::size_t c) { return std::span<double>(mlp_chunk_grads[c]); });
    }

    terms.beta = beta_total;
    terms.tv = tv_total;
    row.beta = beta_total;
    row.tv = tv_total;
    // In joint mode the priors enter once per branch, so the doubling in
    // combine_losses is undone by passing the summed values directly.
    double total = 0.0;
    if (wants_sup) total += cfg.weights.mse * *terms.mse;
    if (wants_unsup) total += cfg.weights.poisson * *terms.poisson;
    total += cfg.weights.beta * beta_total + cfg.weights.tv * tv_total;
    row.total = total;
    result.trace.push_back(row);
    if (!std::isfinite(total)) {
      result.diverged = true;
      return result;
    }

    std::fill(mlp_grad.begin(), mlp_grad.end(), 0.0);
    for (const auto& cg : mlp_chunk_grads)
      for (std::size_t k = 0; k < n_mlp; ++k) mlp_grad[k] += cg[k];
    const auto enc_grad = encoder.backward();

    adam_step(adam_mlp, mlp.params(), mlp_grad);
    adam_step(adam_enc, encoder.params(), enc_grad);

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      const auto dir = cfg.checkpoint_dir / ("step_" + std::to_string(step + 1));
      mlp.params().save(dir / "field", {{"backend", "mlp"}});
      encoder.params().save(dir / "encoder", {{"backend", "encoder"}});
    }
  }
  return result;
}

}  // namespace nlos::learn
