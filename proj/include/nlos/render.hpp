// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "nlos/field.hpp"
#include "nlos/parallel.hpp"
#include "nlos/rng.hpp"
#include "nlos/scan.hpp"
#include "nlos/scene.hpp"
#include "nlos/tensor.hpp"
#include "nlos/vec3.hpp"

namespace nlos::render {

using field::FieldRef;
using field::Upstream;

/// Quadrature rule along a ray segment: a fixed number of uniform
/// midpoint steps. Deterministic, so repeated renders are identical.
struct StepRule {
  std::size_t steps = 64;
  bool use_transmittance = true;  // false reproduces the no-occlusion ablation
};

/// One marched ray: positions, per-step opacities and the transmittance
/// prefix, as produced by composite_ray.
struct RaySample {
  std::vector<double> u;      // step midpoints along the ray (distance from origin)
  std::vector<double> alpha;  // per-step opacity in [0, 1)
  std::vector<double> trans;  // transmittance before each step, starts at 1
  double t_final = 1.0;
  double u_entry = 0.0;
  double u_exit = 0.0;
};

struct CompositeResult {
  double intensity = 0.0;
  double depth = 0.0;  // expected collision distance
  double t_final = 1.0;
  RaySample ray;
};

/// Slab test; returns [t_near, t_far] of the ray against the box.
inline std::optional<std::pair<double, double>> intersect_aabb(const Vec3& o, const Vec3& d,
                                                               const Aabb& box) {
  double t0 = 0.0;
  double t1 = std::numeric_limits<double>::infinity();
  const double ov[3] = {o.x, o.y, o.z};
  const double dv[3] = {d.x, d.y, d.z};
  const double lo[3] = {box.min.x, box.min.y, box.min.z};
  const double hi[3] = {box.max.x, box.max.y, box.max.z};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dv[a]) < 1e-300) {
      if (ov[a] < lo[a] || ov[a] > hi[a]) return std::nullopt;
      continue;
    }
    double ta = (lo[a] - ov[a]) / dv[a];
    double tb = (hi[a] - ov[a]) / dv[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 >= t1) return std::nullopt;
  return std::make_pair(t0, t1);
}

/// NeRF-style compositing along one ray: alpha_i = 1 - exp(-sigma_i ds),
/// T_i = prod(1 - alpha_j), intensity = sum T_i alpha_i c_i and expected
/// depth = sum T_i alpha_i u_i + T_final u_far.
inline CompositeResult composite_ray(FieldRef& field, const Vec3& origin, const Vec3& dir,
                                     const StepRule& rule) {
  CompositeResult res;
  const auto hit = intersect_aabb(origin, dir, field.bbox());
  const double u_far = hit ? hit->second : 0.0;
  if (!hit) {
    res.depth = u_far;
    return res;
  }

  const double ds = (hit->second - hit->first) / static_cast<double>(rule.steps);
  res.ray.u.resize(rule.steps);
  res.ray.alpha.resize(rule.steps);
  res.ray.trans.resize(rule.steps);
  res.ray.u_entry = hit->first;
  res.ray.u_exit = hit->second;

  double trans = 1.0;
  double intensity = 0.0;
  double depth = 0.0;
  for (std::size_t i = 0; i < rule.steps; ++i) {
    const double u = hit->first + (static_cast<double>(i) + 0.5) * ds;
    const auto q = field.query(origin + dir * u, dir);
    const double alpha = 1.0 - std::exp(-q.density * ds);
    res.ray.u[i] = u;
    res.ray.alpha[i] = alpha;
    res.ray.trans[i] = trans;
    const double w = rule.use_transmittance ? trans * alpha : alpha;
    intensity += w * q.color;
    depth += w * u;
    trans *= 1.0 - alpha;
  }
  res.t_final = trans;
  res.ray.t_final = trans;
  res.intensity = intensity;
  res.depth = depth + trans * hit->second;
  return res;
}

/// Backprop through composite_ray for d(loss)/d(intensity), optionally
/// also d(loss)/d(T_final) and per-step d(loss)/d(alpha_i) from prior
/// terms. Replays the forward march with frozen geometry.
inline void composite_ray_grad(FieldRef& field, const Vec3& origin, const Vec3& dir,
                               const StepRule& rule, double d_intensity, double d_t_final,
                               const std::vector<double>* d_alpha, std::span<double> grad) {
  const auto hit = intersect_aabb(origin, dir, field.bbox());
  if (!hit) return;
  const double ds = (hit->second - hit->first) / static_cast<double>(rule.steps);

  // Forward replay to recover per-step values.
  std::vector<double> alpha(rule.steps), color(rule.steps), density(rule.steps);
  std::vector<Vec3> pos(rule.steps);
  double trans = 1.0;
  std::vector<double> trans_before(rule.steps);
  for (std::size_t i = 0; i < rule.steps; ++i) {
    const double u = hit->first + (static_cast<double>(i) + 0.5) * ds;
    pos[i] = origin + dir * u;
    const auto q = field.query(pos[i], dir);
    alpha[i] = 1.0 - std::exp(-q.density * ds);
    color[i] = q.color;
    density[i] = q.density;
    trans_before[i] = trans;
    trans *= 1.0 - alpha[i];
  }
  const double t_final = trans;

  // d(intensity)/d(alpha_i) = T_i c_i - sum_{j>i} T_j alpha_j c_j / (1-alpha_i)
  // accumulated with a suffix sweep; d(T_final)/d(alpha_i) likewise.
  double suffix = 0.0;  // sum over j > i of T_j alpha_j c_j
  std::vector<double> d_alpha_total(rule.steps, 0.0);
  for (std::size_t i = rule.steps; i-- > 0;) {
    double da = 0.0;
    if (rule.use_transmittance) {
      da = d_intensity * (trans_before[i] * color[i] - suffix / (1.0 - alpha[i]));
      da -= d_t_final * t_final / (1.0 - alpha[i]);
    } else {
      da = d_intensity * color[i];
      // T_final still tracks opacity even in the ablation mode.
      da -= d_t_final * t_final / (1.0 - alpha[i]);
    }
    if (d_alpha) da += (*d_alpha)[i];
    d_alpha_total[i] = da;
    suffix += trans_before[i] * alpha[i] * color[i];
  }

  for (std::size_t i = 0; i < rule.steps; ++i) {
    const double w = rule.use_transmittance ? trans_before[i] * alpha[i] : alpha[i];
    Upstream up;
    up.d_color = d_intensity * w;
    up.d_density = d_alpha_total[i] * (1.0 - alpha[i]) * ds;  // d(alpha)/d(sigma)
    field.query_grad(pos[i], dir, up, grad);
  }
}

/// Intensity and expected-depth images in one deterministic pass.
struct ImagePair {
  Tensor intensity;
  Tensor depth;
};

inline ImagePair render_image(FieldRef& field, const Camera& camera, const StepRule& rule) {
  camera.validate();
  ImagePair out{Tensor({camera.height, camera.width}), Tensor({camera.height, camera.width})};
  // FieldRef is copied per chunk so conditioned fields stay thread-safe.
  parallel_chunks(camera.height * camera.width, field::kGradChunks,
                  [&](std::size_t chunk, std::size_t begin, std::size_t end) {
                    FieldRef local = field;
                    local.set_chunk(chunk);
                    for (std::size_t p = begin; p < end; ++p) {
                      const auto ray = camera.ray(p / camera.width, p % camera.width);
                      const auto res = composite_ray(local, ray.origin, ray.dir, rule);
                      out.intensity[p] = res.intensity;
                      out.depth[p] = res.depth;
                    }
                  });
  return out;
}

/// Distance along d from s to the point x with |s-x| + |x-l| = ct.
/// Throws when ct <= |s-l| (inside the baseline) or the denominator
/// degenerates.
inline double ellipsoid_distance(const Vec3& s, const Vec3& l, const Vec3& d, double t) {
  const double ct = kSpeedOfLight * t;
  const Vec3 base = l - s;
  const double b = base.norm();
  if (ct <= b) throw std::domain_error("path length inside baseline");
  const double cos_theta = b > 0.0 ? dot(d, base / b) : 0.0;
  const double denom = 2.0 * ct - 2.0 * b * cos_theta;
  if (denom < 1e-12) throw std::domain_error("degenerate ellipsoid denominator");
  return (ct * ct - b * b) / denom;
}

/// d(u)/d(ct) at fixed direction, from differentiating the ellipsoid
/// distance.
inline double ellipsoid_distance_dct(double ct, double baseline, double cos_theta) {
  const double m = ct - baseline * cos_theta;
  return (ct * ct - 2.0 * ct * baseline * cos_theta + baseline * baseline) / (2.0 * m * m);
}

/// Directions toward the hidden volume: a point q uniform by area on
/// the bbox face nearest the wall, pdf converted to solid angle.
struct ConeSampler {
  Vec3 sensor;
  Aabb bbox;

  void validate() const {
    if (!bbox.valid()) throw std::invalid_argument("cone bbox is degenerate");
    if (!(bbox.min.z > sensor.z)) throw std::invalid_argument("bbox must lie in front of the wall");
    if (!(face_area() > 0.0)) throw std::invalid_argument("degenerate proximal face");
  }

  double face_area() const {
    const Vec3 e = bbox.extent();
    return e.x * e.y;
  }

  struct Sample {
    Vec3 dir;
    double pdf;  // solid-angle density
  };

  Sample sample(CounterRng& rng) const {
    const Vec3 e = bbox.extent();
    const Vec3 q{bbox.min.x + rng.next_double() * e.x, bbox.min.y + rng.next_double() * e.y,
                 bbox.min.z};
    const Vec3 to_q = q - sensor;
    const double r = to_q.norm();
    const Vec3 dir = to_q / r;
    const double cos_psi = std::abs(dir.z);  // face normal is -z toward the wall
    return {dir, r * r / (face_area() * cos_psi)};
  }
};

/// Per-bin Poisson-rate estimate with running variance.
struct TransientEstimate {
  std::size_t bin_begin = 0;
  std::vector<double> rates;     // per-bin tau-hat
  std::vector<double> variance;  // variance of the per-bin mean
  std::size_t samples = 0;
  std::uint64_t rng_checksum = 0;
};

struct TransientConfig {
  StepRule march;          // transmittance march, entry to u
  std::size_t samples = 4096;
  std::uint64_t rng_key = 0;
};

namespace detail {

inline std::uint64_t transient_checksum(const Vec3& l, const Vec3& s, std::size_t b0,
                                        std::size_t b1, const TransientConfig& cfg) {
  std::uint64_t h = CounterRng::mix(cfg.rng_key ^ CounterRng::mix(b0 * 0x10001 + b1));
  h = CounterRng::mix(h ^ cfg.samples);
  auto mix_double = [&h](double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    h = CounterRng::mix(h ^ bits);
  };
  mix_double(l.x);
  mix_double(l.y);
  mix_double(l.z);
  mix_double(s.x);
  mix_double(s.y);
  mix_double(s.z);
  return h;
}

/// Transmittance from bbox entry to u with the composite step rule.
inline double march_transmittance(FieldRef& field, const Vec3& origin, const Vec3& dir,
                                  double u_entry, double u, const StepRule& rule) {
  if (!rule.use_transmittance) return 1.0;
  const double ds = (u - u_entry) / static_cast<double>(rule.steps);
  if (!(ds > 0.0)) return 1.0;
  double optical = 0.0;
  for (std::size_t i = 0; i < rule.steps; ++i) {
    const double su = u_entry + (static_cast<double>(i) + 0.5) * ds;
    optical += field.query(origin + dir * su, dir).density * ds;
  }
  return std::exp(-optical);
}

struct SampleGeometry {
  Vec3 dir;
  double pdf_dir = 0.0;
  double rho = 0.0;  // sampled path length c*t
  bool valid = false;
  double u = 0.0;
  double u_entry = 0.0;
  double jacobian = 0.0;  // du/d(ct)
  std::size_t bin = 0;
};

/// Regenerate the n-th sample's geometry from the RNG key. Shared by the
/// forward pass and the frozen-sample gradient.
inline SampleGeometry sample_geometry(const ConeSampler& cone, const Vec3& l, const Vec3& s,
                                      std::size_t b0, std::size_t b1, double bin_width,
                                      std::uint64_t rng_key, std::size_t n, const Aabb& bbox) {
  SampleGeometry g;
  auto rng = CounterRng::keyed(rng_key, 0x7472616e, n);
  const auto cs = cone.sample(rng);
  g.dir = cs.dir;
  g.pdf_dir = cs.pdf;

  const double rho_lo = kSpeedOfLight * static_cast<double>(b0) * bin_width;
  const double rho_hi = kSpeedOfLight * static_cast<double>(b1) * bin_width;
  g.rho = rng.next_range(rho_lo, rho_hi);

  const double baseline = (l - s).norm();
  if (g.rho <= baseline) return g;
  const double cos_theta = baseline > 0.0 ? dot(g.dir, (l - s) / baseline) : 0.0;
  const double denom = 2.0 * g.rho - 2.0 * baseline * cos_theta;
  if (denom < 1e-12) return g;
  g.u = (g.rho * g.rho - baseline * baseline) / denom;
  g.jacobian = ellipsoid_distance_dct(g.rho, baseline, cos_theta);

  const auto hit = intersect_aabb(s, g.dir, bbox);
  if (!hit || g.u < hit->first || g.u > hit->second) return g;
  g.u_entry = hit->first;
  g.bin = static_cast<std::size_t>(g.rho / (kSpeedOfLight * bin_width));
  if (g.bin < b0 || g.bin >= b1) return g;  // guards the half-open window edge
  g.valid = true;
  return g;
}

}  // namespace detail

/// Monte Carlo estimate of the per-bin Poisson rates seen at sensor s
/// for the window [b0, b1): directions from the cone sampler, path
/// lengths uniform over the window, deposits weighted by the
/// line-to-point Jacobian and the sampling densities.
inline TransientEstimate render_transient(FieldRef& field, const Vec3& l, const Vec3& s,
                                          std::size_t b0, std::size_t b1, double bin_width,
                                          const TransientConfig& cfg) {
  if (b1 <= b0) throw std::invalid_argument("empty bin window");
  const double baseline = (l - s).norm();
  if (kSpeedOfLight * static_cast<double>(b0) * bin_width <= baseline)
    throw std::invalid_argument("bin window starts inside the baseline");

  ConeSampler cone{s, field.bbox()};
  cone.validate();

  const std::size_t nbins = b1 - b0;
  TransientEstimate est;
  est.bin_begin = b0;
  est.rates.assign(nbins, 0.0);
  est.variance.assign(nbins, 0.0);
  est.samples = cfg.samples;
  est.rng_checksum = detail::transient_checksum(l, s, b0, b1, cfg);

  const std::size_t n_chunks = field::kGradChunks;
  std::vector<std::vector<double>> sum(n_chunks), sum2(n_chunks);
  parallel_chunks(cfg.samples, n_chunks, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    FieldRef local = field;
    local.set_chunk(chunk);
    auto& s1 = sum[chunk];
    auto& s2 = sum2[chunk];
    s1.assign(nbins, 0.0);
    s2.assign(nbins, 0.0);
    for (std::size_t n = begin; n < end; ++n) {
      const auto g =
          detail::sample_geometry(cone, l, s, b0, b1, bin_width, cfg.rng_key, n, field.bbox());
      if (!g.valid) continue;
      const Vec3 x = s + g.dir * g.u;
      const auto q = local.query(x, g.dir);
      if (q.density == 0.0 && q.color == 0.0) continue;
      const double trans = detail::march_transmittance(local, s, g.dir, g.u_entry, g.u, cfg.march);
      const double pdf_rho =
          1.0 / (kSpeedOfLight * static_cast<double>(b1 - b0) * bin_width);
      const double w = trans * q.density * q.color * g.jacobian / (g.pdf_dir * pdf_rho);
      s1[g.bin - b0] += w;
      s2[g.bin - b0] += w * w;
    }
  });

  std::vector<double> total(nbins, 0.0), total2(nbins, 0.0);
  for (std::size_t c = 0; c < n_chunks; ++c) {
    if (sum[c].empty()) continue;
    for (std::size_t b = 0; b < nbins; ++b) {
      total[b] += sum[c][b];
      total2[b] += sum2[c][b];
    }
  }
  const double n = static_cast<double>(cfg.samples);
  for (std::size_t b = 0; b < nbins; ++b) {
    est.rates[b] = total[b] / n;
    const double mean2 = total2[b] / n;
    est.variance[b] = std::max(0.0, mean2 - est.rates[b] * est.rates[b]) / n;
  }
  return est;
}

/// Transient forward pass that also marches every sampled ray through
/// the whole box, collecting the per-ray transmittance and opacities the
/// training priors consume. Rays are shared with the rate estimate.
struct TransientForward {
  TransientEstimate est;
  std::vector<double> t_finals;              // one per MC sample
  std::vector<std::vector<double>> alphas;   // march opacities per sample
};

inline TransientForward render_transient_with_priors(FieldRef& field, const Vec3& l, const Vec3& s,
                                                     std::size_t b0, std::size_t b1,
                                                     double bin_width, const TransientConfig& cfg,
                                                     const StepRule& prior_rule) {
  TransientForward out;
  out.est = render_transient(field, l, s, b0, b1, bin_width, cfg);
  out.t_finals.assign(cfg.samples, 1.0);
  out.alphas.assign(cfg.samples, {});

  ConeSampler cone{s, field.bbox()};
  parallel_chunks(cfg.samples, field::kGradChunks,
                  [&](std::size_t chunk, std::size_t begin, std::size_t end) {
                    FieldRef local = field;
                    local.set_chunk(chunk);
                    for (std::size_t n = begin; n < end; ++n) {
                      const auto g = detail::sample_geometry(cone, l, s, b0, b1, bin_width,
                                                             cfg.rng_key, n, field.bbox());
                      auto res = composite_ray(local, s, g.dir, prior_rule);
                      out.t_finals[n] = res.t_final;
                      out.alphas[n] = std::move(res.ray.alpha);
                    }
                  });
  return out;
}

/// Backprop for render_transient_with_priors: deposit gradients from
/// d_rates plus per-ray prior gradients through the full-box march.
inline void render_transient_with_priors_grad(
    FieldRef& field, const Vec3& l, const Vec3& s, std::size_t b0, std::size_t b1,
    double bin_width, const TransientConfig& cfg, const StepRule& prior_rule,
    std::uint64_t forward_checksum, std::span<const double> d_rates,
    std::span<const double> d_t_finals, const std::vector<std::vector<double>>& d_alphas,
    const std::function<std::span<double>(std::size_t)>& chunk_grad);

/// Pathwise gradient of the realized Monte Carlo sum: regenerates the
/// same samples (the RNG checksum must match the forward pass) and
/// backpropagates through the deposit and the transmittance march.
inline void render_transient_grad(FieldRef& field, const Vec3& l, const Vec3& s, std::size_t b0,
                                  std::size_t b1, double bin_width, const TransientConfig& cfg,
                                  std::uint64_t forward_checksum,
                                  std::span<const double> d_rates,
                                  const std::function<std::span<double>(std::size_t)>& chunk_grad) {
  if (detail::transient_checksum(l, s, b0, b1, cfg) != forward_checksum)
    throw std::invalid_argument("transient gradient called with mismatched RNG key");
  if (d_rates.size() != b1 - b0) throw std::invalid_argument("upstream size mismatch");

  ConeSampler cone{s, field.bbox()};
  cone.validate();
  const double inv_n = 1.0 / static_cast<double>(cfg.samples);

  const std::size_t n_chunks = field::kGradChunks;
  parallel_chunks(cfg.samples, n_chunks, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    FieldRef local = field;
    local.set_chunk(chunk);
    auto grad = chunk_grad(chunk);
    for (std::size_t n = begin; n < end; ++n) {
      const auto g =
          detail::sample_geometry(cone, l, s, b0, b1, bin_width, cfg.rng_key, n, field.bbox());
      if (!g.valid) continue;
      const double d_bin = d_rates[g.bin - b0];
      if (d_bin == 0.0) continue;

      const Vec3 x = s + g.dir * g.u;
      const auto q = local.query(x, g.dir);
      const double pdf_rho = 1.0 / (kSpeedOfLight * static_cast<double>(b1 - b0) * bin_width);
      const double k = g.jacobian / (g.pdf_dir * pdf_rho) * inv_n * d_bin;
      const double trans = detail::march_transmittance(local, s, g.dir, g.u_entry, g.u, cfg.march);

      // Deposit w = T * sigma * c * k.
      Upstream up;
      up.d_density = k * trans * q.color;
      up.d_color = k * trans * q.density;
      local.query_grad(x, g.dir, up, grad);

      if (cfg.march.use_transmittance) {
        // dT/d(sigma_j) = -ds * T for every marched sample.
        const double d_trans = k * q.density * q.color;
        const double ds = (g.u - g.u_entry) / static_cast<double>(cfg.march.steps);
        if (ds > 0.0) {
          Upstream mup;
          mup.d_density = -d_trans * trans * ds;
          for (std::size_t i = 0; i < cfg.march.steps; ++i) {
            const double su = g.u_entry + (static_cast<double>(i) + 0.5) * ds;
            local.query_grad(s + g.dir * su, g.dir, mup, grad);
          }
        }
      }
    }
  });
}

inline void render_transient_with_priors_grad(
    FieldRef& field, const Vec3& l, const Vec3& s, std::size_t b0, std::size_t b1,
    double bin_width, const TransientConfig& cfg, const StepRule& prior_rule,
    std::uint64_t forward_checksum, std::span<const double> d_rates,
    std::span<const double> d_t_finals, const std::vector<std::vector<double>>& d_alphas,
    const std::function<std::span<double>(std::size_t)>& chunk_grad) {
  render_transient_grad(field, l, s, b0, b1, bin_width, cfg, forward_checksum, d_rates,
                        chunk_grad);

  ConeSampler cone{s, field.bbox()};
  parallel_chunks(cfg.samples, field::kGradChunks,
                  [&](std::size_t chunk, std::size_t begin, std::size_t end) {
                    FieldRef local = field;
                    local.set_chunk(chunk);
                    auto grad = chunk_grad(chunk);
                    for (std::size_t n = begin; n < end; ++n) {
                      const double dt = d_t_finals.empty() ? 0.0 : d_t_finals[n];
                      const auto* da = d_alphas.empty() ? nullptr : &d_alphas[n];
                      const bool da_live = da && !da->empty();
                      if (dt == 0.0 && !da_live) continue;
                      const auto g = detail::sample_geometry(cone, l, s, b0, b1, bin_width,
                                                             cfg.rng_key, n, field.bbox());
                      composite_ray_grad(local, s, g.dir, prior_rule, 0.0, dt,
                                         da_live ? da : nullptr, grad);
                    }
                  });
}

}  // namespace nlos::render
