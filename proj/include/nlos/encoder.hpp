// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "nlos/field.hpp"
#include "nlos/scan.hpp"
#include "nlos/tensor.hpp"
#include "nlos/wave.hpp"

namespace nlos::enc {

using wave::Complex;

/// 3x3x3 convolution with zero padding, stride 1 or 2, ReLU activation.
struct Conv3d {
  std::size_t c_in = 1;
  std::size_t c_out = 1;
  std::size_t stride = 1;
  std::size_t w_block = 0;
  std::size_t b_block = 0;
};

namespace detail {

inline std::size_t out_extent(std::size_t in, std::size_t stride) {
  return (in + stride - 1) / stride;
}

}  // namespace detail

/// Forward pass; input and output are (X, Y, Z, C) channel-last cubes.
inline Tensor conv3d_forward(const field::ParamStore& params, const Conv3d& layer,
                             const Tensor& in) {
  if (in.rank() != 4 || in.dim(3) != layer.c_in)
    throw std::invalid_argument("conv3d input channel mismatch");
  const std::size_t X = in.dim(0), Y = in.dim(1), Z = in.dim(2);
  const std::size_t ox = detail::out_extent(X, layer.stride);
  const std::size_t oy = detail::out_extent(Y, layer.stride);
  const std::size_t oz = detail::out_extent(Z, layer.stride);
  Tensor out({ox, oy, oz, layer.c_out});

  const auto w = params.block(layer.w_block);
  const auto b = params.block(layer.b_block);
  const std::size_t ci_n = layer.c_in, co_n = layer.c_out;

  for (std::size_t oi = 0; oi < ox; ++oi)
    for (std::size_t oj = 0; oj < oy; ++oj)
      for (std::size_t ok = 0; ok < oz; ++ok) {
        double* optr = &out(oi, oj, ok, 0);
        for (std::size_t co = 0; co < co_n; ++co) optr[co] = b[co];
        for (std::size_t di = 0; di < 3; ++di) {
          const std::ptrdiff_t ii =
              static_cast<std::ptrdiff_t>(oi * layer.stride + di) - 1;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(X)) continue;
          for (std::size_t dj = 0; dj < 3; ++dj) {
            const std::ptrdiff_t jj =
                static_cast<std::ptrdiff_t>(oj * layer.stride + dj) - 1;
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(Y)) continue;
            for (std::size_t dk = 0; dk < 3; ++dk) {
              const std::ptrdiff_t kk =
                  static_cast<std::ptrdiff_t>(ok * layer.stride + dk) - 1;
              if (kk < 0 || kk >= static_cast<std::ptrdiff_t>(Z)) continue;
              const double* iptr = &in(static_cast<std::size_t>(ii), static_cast<std::size_t>(jj),
                                       static_cast<std::size_t>(kk), 0);
              const double* wptr = w.data() + (((di * 3 + dj) * 3 + dk) * ci_n) * co_n;
              for (std::size_t ci = 0; ci < ci_n; ++ci) {
                const double iv = iptr[ci];
                if (iv == 0.0) continue;
                const double* wc = wptr + ci * co_n;
                for (std::size_t co = 0; co < co_n; ++co) optr[co] += iv * wc[co];
              }
            }
          }
        }
        for (std::size_t co = 0; co < co_n; ++co) optr[co] = std::max(0.0, optr[co]);
      }
  return out;
}

/// Backward pass: gates d_out by the ReLU (out > 0), accumulates weight
/// and bias gradients, and returns d_in.
inline Tensor conv3d_backward(const field::ParamStore& params, const Conv3d& layer,
                              const Tensor& in, const Tensor& out, const Tensor& d_out,
                              std::span<double> grad) {
  const std::size_t X = in.dim(0), Y = in.dim(1), Z = in.dim(2);
  Tensor d_in(in.dims());
  const auto w = params.block(layer.w_block);
  const auto& wb = params.blocks()[layer.w_block];
  const auto& bb = params.blocks()[layer.b_block];
  const std::size_t ci_n = layer.c_in, co_n = layer.c_out;

  for (std::size_t oi = 0; oi < out.dim(0); ++oi)
    for (std::size_t oj = 0; oj < out.dim(1); ++oj)
      for (std::size_t ok = 0; ok < out.dim(2); ++ok) {
        const double* optr = &out(oi, oj, ok, 0);
        const double* gptr = &d_out(oi, oj, ok, 0);
        double gated[64];
        bool any = false;
        for (std::size_t co = 0; co < co_n; ++co) {
          gated[co] = optr[co] > 0.0 ? gptr[co] : 0.0;
          if (gated[co] != 0.0) {
            any = true;
            grad[bb.offset + co] += gated[co];
          }
        }
        if (!any) continue;
        for (std::size_t di = 0; di < 3; ++di) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * layer.stride + di) - 1;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(X)) continue;
          for (std::size_t dj = 0; dj < 3; ++dj) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * layer.stride + dj) - 1;
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(Y)) continue;
            for (std::size_t dk = 0; dk < 3; ++dk) {
              const std::ptrdiff_t kk = static_cast<std::ptrdiff_t>(ok * layer.stride + dk) - 1;
              if (kk < 0 || kk >= static_cast<std::ptrdiff_t>(Z)) continue;
              const double* iptr = &in(static_cast<std::size_t>(ii), static_cast<std::size_t>(jj),
                                       static_cast<std::size_t>(kk), 0);
              double* dptr = &d_in(static_cast<std::size_t>(ii), static_cast<std::size_t>(jj),
                                   static_cast<std::size_t>(kk), 0);
              const std::size_t woff = ((di * 3 + dj) * 3 + dk) * ci_n * co_n;
              for (std::size_t ci = 0; ci < ci_n; ++ci) {
                const double* wc = w.data() + woff + ci * co_n;
                double* gw = grad.data() + wb.offset + woff + ci * co_n;
                double acc = 0.0;
                for (std::size_t co = 0; co < co_n; ++co) {
                  acc += gated[co] * wc[co];
                  gw[co] += gated[co] * iptr[ci];
                }
                dptr[ci] += acc;
              }
            }
          }
        }
      }
  return d_in;
}

struct EncoderConfig {
  std::size_t channels = 8;
  std::size_t depth_planes = 16;
  double depth_min = 0.4;
  double depth_max = 1.2;
  double wavelength = 0.125;  // feature-propagation carrier
  double cycles = 1.5;
  std::size_t film_hidden = 32;
  std::uint64_t seed = 1;
};

/// Feed-forward conditioning pipeline: strided feature extraction on the
/// time-domain measurement, per-channel inverse propagation to depth
/// planes, convolutional refinement, and a small MLP head that turns
/// trilinearly sampled features into per-layer FiLM parameters.
///
/// The head's last layer is zero-initialized and gamma is parameterized
/// as 1 + delta, so an untrained encoder conditions nothing.
class Encoder : public field::Conditioner {
 public:
  Encoder(EncoderConfig cfg, const ScanPattern& pattern, std::size_t cond_layers,
          std::size_t cond_width)
      : cfg_(cfg), cond_layers_(cond_layers), cond_width_(cond_width) {
    if (pattern.rows % 2 || pattern.cols % 2 || pattern.bins % 2)
      throw std::invalid_argument("encoder needs even measurement dims");
    feat_pattern_ = make_scan_pattern(pattern.kind, pattern.wall,
                                      pattern.pitch * static_cast<double>(pattern.cols),
                                      pattern.rows / 2, pattern.cols / 2, pattern.bins / 2,
                                      pattern.bin_width * 2.0);

    depths_.resize(cfg.depth_planes);
    for (std::size_t d = 0; d < cfg.depth_planes; ++d)
      depths_[d] = cfg.depth_min + (static_cast<double>(d) + 0.5) *
                                       (cfg.depth_max - cfg.depth_min) /
                                       static_cast<double>(cfg.depth_planes);
    wave_ = wave::make_illumination_wave(cfg.wavelength, cfg.cycles, feat_pattern_.bin_width,
                                         feat_pattern_.bins);

    const std::size_t C = cfg.channels;
    conv1_ = add_conv(1, C, 2, "conv1");
    conv2_ = add_conv(C, C, 1, "conv2");
    refine1_ = add_conv(C, C, 1, "refine1");
    refine2_ = add_conv(C, C, 1, "refine2");
    film_w1_ = params_.add_block("film_w1", {cfg.film_hidden, C});
    film_b1_ = params_.add_block("film_b1", {cfg.film_hidden});
    film_w2_ = params_.add_block("film_w2", {2 * cond_layers * cond_width, cfg.film_hidden});
    film_b2_ = params_.add_block("film_b2", {2 * cond_layers * cond_width});
    init_weights();

    // Spatial bounds of the feature volume for trilinear sampling.
    const double half_u =
        feat_pattern_.pitch * (static_cast<double>(feat_pattern_.cols) - 1.0) / 2.0;
    const double half_v =
        feat_pattern_.pitch * (static_cast<double>(feat_pattern_.rows) - 1.0) / 2.0;
    const Vec3 o = feat_pattern_.wall.origin;
    bounds_ = Aabb{{o.x - half_u, o.y - half_v, depths_.front()},
                   {o.x + half_u, o.y + half_v, depths_.back()}};

    chunk_param_grad_.resize(field::kGradChunks);
    chunk_cs_grad_.resize(field::kGradChunks);
    chunk_film_.assign(field::kGradChunks, FilmCache{});
  }

  field::ParamStore& params() { return params_; }
  const field::ParamStore& params() const { return params_; }
  const std::vector<double>& depth_planes() const { return depths_; }
  const ScanPattern& feature_pattern() const { return feat_pattern_; }
  const Aabb& feature_bounds() const { return bounds_; }

  /// Time-domain feature cube C_t of shape (rows/2, cols/2, bins/2, C).
  Tensor extract_features(const Tensor& measurement) const {
    Tensor in = as_4d(measurement);
    Tensor a1 = conv3d_forward(params_, conv1_, in);
    return conv3d_forward(params_, conv2_, a1);
  }

  /// Per-channel inverse propagation of a time-domain cube to the depth
  /// planes; complex output retained for linearity checks.
  std::vector<wave::PhasorVolume> propagate_features_complex(const Tensor& ct) const {
    if (ct.rank() != 4) throw std::invalid_argument("expected a time-domain feature cube");
    const std::size_t rows = ct.dim(0), cols = ct.dim(1), bins = ct.dim(2), C = ct.dim(3);
    if (rows != feat_pattern_.rows || cols != feat_pattern_.cols || bins != feat_pattern_.bins)
      throw std::invalid_argument("feature cube does not match the downsampled scan");
    std::vector<wave::PhasorVolume> out;
    out.reserve(C);
    for (std::size_t c = 0; c < C; ++c) {
      Tensor channel({rows, cols, bins});
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          for (std::size_t b = 0; b < bins; ++b) channel(i, j, b) = ct(i, j, b, c);
      const auto cube = wave::convolve_time(channel, wave_);
      out.push_back(wave::focus_phasor(cube, feat_pattern_, cfg_.wavelength, depths_));
    }
    return out;
  }

  /// Magnitude of the propagated features: C_s of shape (rows, cols, D, C).
  Tensor propagate_features(const Tensor& ct) const {
    const auto vols = propagate_features_complex(ct);
    const std::size_t rows = ct.dim(0), cols = ct.dim(1), C = ct.dim(3);
    Tensor cs({rows, cols, cfg_.depth_planes, C});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          for (std::size_t d = 0; d < cfg_.depth_planes; ++d)
            cs(i, j, d, c) = std::abs(vols[c].at(i, j, d));
    return cs;
  }

  /// Two refinement convolutions with a residual connection.
  Tensor refine_features(const Tensor& cs) const {
    Tensor r1 = conv3d_forward(params_, refine1_, cs);
    Tensor r2 = conv3d_forward(params_, refine2_, r1);
    Tensor out = cs;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += r2[i];
    return out;
  }

  /// Full forward pass; caches intermediates for backward().
  void forward(const Tensor& measurement) {
    cache_.in = as_4d(measurement);
    cache_.a1 = conv3d_forward(params_, conv1_, cache_.in);
    cache_.ct = conv3d_forward(params_, conv2_, cache_.a1);
    cache_.vols = propagate_features_complex(cache_.ct);

    const std::size_t rows = cache_.ct.dim(0), cols = cache_.ct.dim(1);
    const std::size_t C = cfg_.channels, D = cfg_.depth_planes;
    cache_.cs_raw = Tensor({rows, cols, D, C});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          for (std::size_t d = 0; d < D; ++d)
            cache_.cs_raw(i, j, d, c) = std::abs(cache_.vols[c].at(i, j, d));

    cache_.r1 = conv3d_forward(params_, refine1_, cache_.cs_raw);
    cache_.r2 = conv3d_forward(params_, refine2_, cache_.r1);
    cache_.cs = cache_.cs_raw;
    for (std::size_t i = 0; i < cache_.cs.size(); ++i) cache_.cs[i] += cache_.r2[i];
    cache_.valid = true;
  }

  const Tensor& features() const {
    require_forward();
    return cache_.cs;
  }

  /// FiLM parameters from a feature volume at x (identity outside the
  /// feature bounds).
  field::FilmParams film_from_features(const Tensor& cs, const Vec3& x) const {
    field::FilmParams film = field::FilmParams::identity(cond_layers_, cond_width_);
    FilmCache scratch;
    film_eval(cs, x, film, scratch);
    return film;
  }

  field::FilmParams film_from_features(const Vec3& x) const {
    require_forward();
    return film_from_features(cache_.cs, x);
  }

  /// Accumulated d(loss)/d(C_s) for one chunk; empty until used.
  const std::vector<double>& chunk_cs_gradient(std::size_t chunk) const {
    return chunk_cs_grad_[chunk];
  }

  // field::Conditioner interface; chunk-indexed so parallel rendering
  // stays deterministic.
  const field::FilmParams& film_at(std::size_t chunk, const Vec3& x) override {
    require_forward();
    auto& fc = chunk_film_[chunk];
    if (fc.film.gamma.empty())
      fc.film = field::FilmParams::identity(cond_layers_, cond_width_);
    film_eval(cache_.cs, x, fc.film, fc);
    return fc.film;
  }

  void film_backprop(std::size_t chunk, const Vec3& x, const field::FilmGrad& g) override {
    auto& fc = chunk_film_[chunk];
    if (!fc.inside) return;  // identity modulation outside: nothing to learn
    auto& pgrad = chunk_param_grad_[chunk];
    auto& csgrad = chunk_cs_grad_[chunk];
    if (pgrad.empty()) pgrad.assign(params_.size(), 0.0);
    if (csgrad.empty()) csgrad.assign(cache_.cs.size(), 0.0);

    // Head output gradient: gamma = 1 + out[:LW], beta = out[LW:].
    const std::size_t lw = cond_layers_ * cond_width_;
    std::vector<double> d_out(2 * lw);
    for (std::size_t l = 0; l < cond_layers_; ++l)
      for (std::size_t i = 0; i < cond_width_; ++i) {
        d_out[l * cond_width_ + i] = g.gamma[l][i];
        d_out[lw + l * cond_width_ + i] = g.beta[l][i];
      }

    const auto& w2b = params_.blocks()[film_w2_];
    const auto& b2b = params_.blocks()[film_b2_];
    const auto w2 = params_.block(film_w2_);
    std::vector<double> d_hidden(cfg_.film_hidden, 0.0);
    for (std::size_t r = 0; r < 2 * lw; ++r) {
      if (d_out[r] == 0.0) continue;
      pgrad[b2b.offset + r] += d_out[r];
      const double* wr = w2.data() + r * cfg_.film_hidden;
      double* gw = pgrad.data() + w2b.offset + r * cfg_.film_hidden;
      for (std::size_t h = 0; h < cfg_.film_hidden; ++h) {
        d_hidden[h] += d_out[r] * wr[h];
        gw[h] += d_out[r] * fc.hidden[h];
      }
    }
    for (std::size_t h = 0; h < cfg_.film_hidden; ++h)
      if (fc.hidden[h] <= 0.0) d_hidden[h] = 0.0;

    const auto& w1b = params_.blocks()[film_w1_];
    const auto& b1b = params_.blocks()[film_b1_];
    const auto w1 = params_.block(film_w1_);
    const std::size_t C = cfg_.channels;
    std::vector<double> d_feat(C, 0.0);
    for (std::size_t h = 0; h < cfg_.film_hidden; ++h) {
      if (d_hidden[h] == 0.0) continue;
      pgrad[b1b.offset + h] += d_hidden[h];
      const double* wr = w1.data() + h * C;
      double* gw = pgrad.data() + w1b.offset + h * C;
      for (std::size_t c = 0; c < C; ++c) {
        d_feat[c] += d_hidden[h] * wr[c];
        gw[c] += d_hidden[h] * fc.feat[c];
      }
    }

    // Scatter into the eight feature-volume corners.
    for (int corner = 0; corner < 8; ++corner) {
      const double wgt = fc.weights[corner];
      if (wgt == 0.0) continue;
      double* dst = csgrad.data() + fc.corner_offsets[static_cast<std::size_t>(corner)];
      for (std::size_t c = 0; c < C; ++c) dst[c] += wgt * d_feat[c];
    }
  }

  void zero_grad() {
    for (auto& g : chunk_param_grad_) g.clear();
    for (auto& g : chunk_cs_grad_) g.clear();
  }

  /// Consume the per-chunk FiLM gradients plus an optional direct
  /// d(loss)/d(C_s), backprop through the conv/RSD stack, and return the
  /// full parameter gradient.
  std::vector<double> backward(const Tensor* d_cs_extra = nullptr) {
    require_forward();
    std::vector<double> grad(params_.size(), 0.0);
    Tensor d_cs(cache_.cs.dims());
    for (const auto& g : chunk_param_grad_)
      if (!g.empty())
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
    for (const auto& g : chunk_cs_grad_)
      if (!g.empty())
        for (std::size_t i = 0; i < d_cs.size(); ++i) d_cs[i] += g[i];
    if (d_cs_extra) {
      if (d_cs_extra->dims() != d_cs.dims())
        throw std::invalid_argument("d_cs shape mismatch");
      for (std::size_t i = 0; i < d_cs.size(); ++i) d_cs[i] += (*d_cs_extra)[i];
    }

    // Residual refinement block.
    Tensor d_r1 = conv3d_backward(params_, refine2_, cache_.r1, cache_.r2, d_cs, grad);
    Tensor d_cs_raw = conv3d_backward(params_, refine1_, cache_.cs_raw, cache_.r1, d_r1, grad);
    for (std::size_t i = 0; i < d_cs_raw.size(); ++i) d_cs_raw[i] += d_cs[i];

    // Magnitude, focusing and time convolution, channel by channel.
    const std::size_t rows = cache_.ct.dim(0), cols = cache_.ct.dim(1);
    const std::size_t bins = cache_.ct.dim(2), C = cfg_.channels, D = cfg_.depth_planes;
    const double c_dt = kSpeedOfLight * feat_pattern_.bin_width;
    Tensor d_ct(cache_.ct.dims());
    for (std::size_t c = 0; c < C; ++c) {
      // d|v| -> complex pair gradient.
      std::vector<Complex> d_vol(rows * cols * D, Complex(0, 0));
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          for (std::size_t d = 0; d < D; ++d) {
            const Complex v = cache_.vols[c].at(i, j, d);
            const double mag = std::abs(v);
            if (mag > 0.0)
              d_vol[(i * cols + j) * D + d] = d_cs_raw(i, j, d, c) * v / mag;
          }

      // Adjoint focusing: conjugate-kernel propagation per plane, then
      // scatter into the plane's time slice (bins may be shared).
      std::vector<Complex> d_cube(rows * cols * bins, Complex(0, 0));
      for (std::size_t d = 0; d < D; ++d) {
        wave::ComplexImage plane(rows, cols);
        for (std::size_t p = 0; p < rows * cols; ++p) plane.v[p] = d_vol[p * D + d];
        const auto back =
            wave::rsd_propagate(plane, feat_pattern_.pitch, cfg_.wavelength, depths_[d], true);
        const auto slice =
            static_cast<std::size_t>(std::llround(2.0 * depths_[d] / c_dt));
        for (std::size_t p = 0; p < rows * cols; ++p) d_cube[p * bins + slice] += back.v[p];
      }

      // Adjoint of the centered time convolution: correlate with the
      // conjugate wave and keep the real part.
      const auto radius = static_cast<std::ptrdiff_t>(wave_.radius());
      for (std::size_t p = 0; p < rows * cols; ++p) {
        const Complex* src = d_cube.data() + p * bins;
        for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(bins); ++t) {
          double acc = 0.0;
          for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
            const std::ptrdiff_t b = t + k;
            if (b >= 0 && b < static_cast<std::ptrdiff_t>(bins))
              acc += std::real(src[b] * std::conj(wave_.samples[static_cast<std::size_t>(k + radius)]));
          }
          d_ct(p / cols, p % cols, static_cast<std::size_t>(t), c) = acc;
        }
      }
    }

    Tensor d_a1 = conv3d_backward(params_, conv2_, cache_.a1, cache_.ct, d_ct, grad);
    conv3d_backward(params_, conv1_, cache_.in, cache_.a1, d_a1, grad);
    return grad;
  }

 private:
  struct FilmCache {
    field::FilmParams film;
    std::vector<double> feat;
    std::vector<double> hidden;
    std::size_t corner_offsets[8] = {};
    double weights[8] = {};
    bool inside = false;
  };

  struct ForwardCache {
    bool valid = false;
    Tensor in, a1, ct;
    std::vector<wave::PhasorVolume> vols;
    Tensor cs_raw, r1, r2, cs;
  };

  Conv3d add_conv(std::size_t ci, std::size_t co, std::size_t stride, const std::string& name) {
    Conv3d c;
    c.c_in = ci;
    c.c_out = co;
    c.stride = stride;
    c.w_block = params_.add_block(name + "_w", {3, 3, 3, ci, co});
    c.b_block = params_.add_block(name + "_b", {co});
    return c;
  }

  void init_weights() {
    auto rng = CounterRng::keyed(cfg_.seed, 0x656e63);
    auto he_init = [&](std::size_t block, std::size_t fan_in) {
      const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (double& v : params_.block(block)) v = scale * rng.next_gauss();
    };
    he_init(conv1_.w_block, 27);
    he_init(conv2_.w_block, 27 * cfg_.channels);
    he_init(refine1_.w_block, 27 * cfg_.channels);
    // refine2 and the film head output stay zero: residual identity and
    // identity modulation before training.
    he_init(film_w1_, cfg_.channels);
  }

  static Tensor as_4d(const Tensor& m) {
    if (m.rank() == 4) return m;
    if (m.rank() != 3) throw std::invalid_argument("expected (rows, cols, bins) measurement");
    Tensor out({m.dim(0), m.dim(1), m.dim(2), 1});
    std::copy(m.data().begin(), m.data().end(), out.begin());
    return out;
  }

  void require_forward() const {
    if (!cache_.valid) throw std::logic_error("encoder forward() has not run");
  }

  /// Trilinear sample + head MLP; fills film and the cache used by
  /// film_backprop.
  void film_eval(const Tensor& cs, const Vec3& x, field::FilmParams& film,
                 FilmCache& fc) const {
    const std::size_t C = cfg_.channels;
    fc.inside = bounds_.contains(x, 0.0);
    if (!fc.inside) {
      for (auto& g : film.gamma) std::fill(g.begin(), g.end(), 1.0);
      for (auto& b : film.beta) std::fill(b.begin(), b.end(), 0.0);
      return;
    }

    const std::size_t rows = cs.dim(0), cols = cs.dim(1), D = cs.dim(2);
    const Vec3 e = bounds_.extent();
    const double fx = (x.x - bounds_.min.x) / e.x * (static_cast<double>(cols) - 1.0);
    const double fy = (x.y - bounds_.min.y) / e.y * (static_cast<double>(rows) - 1.0);
    const double fz = (x.z - bounds_.min.z) / e.z * (static_cast<double>(D) - 1.0);
    const auto j0 = std::min(static_cast<std::size_t>(fx), cols - 2);
    const auto i0 = std::min(static_cast<std::size_t>(fy), rows - 2);
    const auto d0 = std::min(static_cast<std::size_t>(fz), D - 2);
    const double tx = fx - static_cast<double>(j0);
    const double ty = fy - static_cast<double>(i0);
    const double tz = fz - static_cast<double>(d0);

    fc.feat.assign(C, 0.0);
    int at = 0;
    for (int di = 0; di < 2; ++di)
      for (int dj = 0; dj < 2; ++dj)
        for (int dd = 0; dd < 2; ++dd) {
          const double wgt = (di ? ty : 1.0 - ty) * (dj ? tx : 1.0 - tx) * (dd ? tz : 1.0 - tz);
          const std::size_t off =
              (((i0 + static_cast<std::size_t>(di)) * cols + j0 + static_cast<std::size_t>(dj)) *
                   D +
               d0 + static_cast<std::size_t>(dd)) *
              C;
          fc.corner_offsets[at] = off;
          fc.weights[at] = wgt;
          ++at;
          const double* src = cs.data().data() + off;
          for (std::size_t c = 0; c < C; ++c) fc.feat[c] += wgt * src[c];
        }

    // Head MLP: C -> hidden (ReLU) -> 2 * layers * width.
    const auto w1 = params_.block(film_w1_);
    const auto b1 = params_.block(film_b1_);
    fc.hidden.assign(cfg_.film_hidden, 0.0);
    for (std::size_t h = 0; h < cfg_.film_hidden; ++h) {
      double acc = b1[h];
      const double* wr = w1.data() + h * C;
      for (std::size_t c = 0; c < C; ++c) acc += wr[c] * fc.feat[c];
      fc.hidden[h] = std::max(0.0, acc);
    }
    const auto w2 = params_.block(film_w2_);
    const auto b2 = params_.block(film_b2_);
    const std::size_t lw = cond_layers_ * cond_width_;
    for (std::size_t l = 0; l < cond_layers_; ++l)
      for (std::size_t i = 0; i < cond_width_; ++i) {
        const std::size_t rg = l * cond_width_ + i;
        const std::size_t rb = lw + rg;
        double acc_g = b2[rg];
        double acc_b = b2[rb];
        const double* wg = w2.data() + rg * cfg_.film_hidden;
        const double* wb2 = w2.data() + rb * cfg_.film_hidden;
        for (std::size_t h = 0; h < cfg_.film_hidden; ++h) {
          acc_g += wg[h] * fc.hidden[h];
          acc_b += wb2[h] * fc.hidden[h];
        }
        film.gamma[l][i] = 1.0 + acc_g;
        film.beta[l][i] = acc_b;
      }
  }

  EncoderConfig cfg_;
  std::size_t cond_layers_;
  std::size_t cond_width_;
  ScanPattern feat_pattern_;
  std::vector<double> depths_;
  wave::IlluminationWave wave_;
  Aabb bounds_;
  field::ParamStore params_;
  Conv3d conv1_, conv2_, refine1_, refine2_;
  std::size_t film_w1_ = 0, film_b1_ = 0, film_w2_ = 0, film_b2_ = 0;

  ForwardCache cache_;
  std::vector<std::vector<double>> chunk_param_grad_;
  std::vector<std::vector<double>> chunk_cs_grad_;
  std::vector<FilmCache> chunk_film_;
};

}  // namespace nlos::enc
