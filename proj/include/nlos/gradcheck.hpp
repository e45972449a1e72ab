// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include "nlos/encoder.hpp"
#include "nlos/field.hpp"
#include "nlos/learn.hpp"
#include "nlos/render.hpp"

namespace nlos::gradcheck {

struct CheckResult {
  std::string name;
  double worst_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed() const { return worst_rel_err < tolerance; }
};

namespace detail {

inline double rel_err(double got, double want) {
  const double denom = std::max(std::abs(got), std::abs(want));
  if (denom < 1e-300) return 0.0;
  return std::abs(got - want) / denom;
}

inline double central_diff(const std::function<double()>& eval, double& param, double step) {
  const double saved = param;
  param = saved + step;
  const double hi = eval();
  param = saved - step;
  const double lo = eval();
  param = saved;
  return (hi - lo) / (2.0 * step);
}

/// Deliberate sign flip injected via NLOS_GRADCHECK_INJECT_ERROR, used to
/// verify the harness actually fails on wrong gradients.
inline double injection() {
  const char* env = std::getenv("NLOS_GRADCHECK_INJECT_ERROR");
  return (env && env[0] == '1') ? -1.0 : 1.0;
}

inline CheckResult check_loss_mse() {
  auto rng = CounterRng::keyed(101);
  std::vector<double> rendered(24), target(24);
  for (std::size_t i = 0; i < 24; ++i) {
    rendered[i] = rng.next_range(0, 1);
    target[i] = rng.next_range(0, 1);
  }
  const auto res = learn::loss_mse(rendered, target);
  CheckResult out{"loss_mse", 0.0, 1e-8};
  for (std::size_t i = 0; i < 24; ++i) {
    const double fd = central_diff([&] { return learn::loss_mse(rendered, target).value; },
                                   rendered[i], 1e-4);
    out.worst_rel_err = std::max(out.worst_rel_err, rel_err(injection() * res.grad[i], fd));
  }
  return out;
}

inline CheckResult check_loss_beta() {
  auto rng = CounterRng::keyed(103);
  std::vector<double> t(24);
  for (double& v : t) v = rng.next_range(0.05, 0.95);
  const auto res = learn::loss_beta(t);
  CheckResult out{"loss_beta", 0.0, 1e-6};
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double fd =
        central_diff([&] { return learn::loss_beta(t).value; }, t[i], 1e-6);
    out.worst_rel_err = std::max(out.worst_rel_err, rel_err(res.grad[i], fd));
  }
  return out;
}

inline CheckResult check_loss_tv() {
  auto rng = CounterRng::keyed(105);
  std::vector<std::vector<double>> alphas(4, std::vector<double>(10));
  for (auto& ray : alphas)
    for (double& a : ray) a = rng.next_range(0.05, 0.9);
  const auto res = learn::loss_tv(alphas);
  CheckResult out{"loss_tv", 0.0, 1e-6};
  for (std::size_t r = 0; r < alphas.size(); ++r)
    for (std::size_t i = 0; i < alphas[r].size(); ++i) {
      const double fd =
          central_diff([&] { return learn::loss_tv(alphas).value; }, alphas[r][i], 1e-7);
      // Cancelling sign terms give exact zero subgradients; the finite
      // difference only sees roundoff noise there.
      if (std::abs(fd) < 1e-7 && std::abs(res.grad[r][i]) < 1e-10) continue;
      out.worst_rel_err = std::max(out.worst_rel_err, rel_err(res.grad[r][i], fd));
    }
  return out;
}

inline CheckResult check_loss_poisson() {
  auto rng = CounterRng::keyed(107);
  std::vector<double> rates(24), counts(24);
  for (std::size_t i = 0; i < 24; ++i) {
    rates[i] = rng.next_range(0.2, 5.0);
    counts[i] = static_cast<double>(rng.next_int(0, 8));
  }
  const auto res = learn::loss_poisson(rates, counts);
  CheckResult out{"loss_poisson", 0.0, 1e-8};
  for (std::size_t i = 0; i < 24; ++i) {
    const double fd = central_diff([&] { return learn::loss_poisson(rates, counts).value; },
                                   rates[i], 1e-5);
    out.worst_rel_err = std::max(out.worst_rel_err, rel_err(res.grad[i], fd));
  }
  return out;
}

inline CheckResult check_voxel_query() {
  const Aabb box{{-0.4, -0.4, 0.5}, {0.4, 0.4, 1.3}};
  field::VoxelField f(4, 4, 4, box);
  f.randomize(109, 0.6);
  const Vec3 x{0.07, -0.15, 0.83};
  const Vec3 d{0, 0, 1};
  const field::Upstream up{0.7, 1.2};
  std::vector<double> grad(f.params().size(), 0.0);
  f.query_grad(x, d, up, grad);
  auto loss = [&] {
    const auto q = f.query(x, d);
    return up.d_color * q.color + up.d_density * q.density;
  };
  CheckResult out{"voxel_query", 0.0, 1e-6};
  auto& values = f.params().values();
  for (std::size_t p = 0; p < values.size(); ++p) {
    if (grad[p] == 0.0) continue;
    const double fd = central_diff(loss, values[p], 1e-6);
    out.worst_rel_err = std::max(out.worst_rel_err, rel_err(grad[p], fd));
  }
  return out;
}

inline CheckResult check_mlp_film_query() {
  const Aabb box{{-0.4, -0.4, 0.5}, {0.4, 0.4, 1.3}};
  field::MlpField mlp({.width = 16, .depth = 3}, box, 111);
  field::FilmParams film = field::FilmParams::identity(3, 16);
  auto rng = CounterRng::keyed(113);
  for (auto& layer : film.gamma)
    for (double& g : layer) g = 1.0 + 0.2 * rng.next_gauss();
  for (auto& layer : film.beta)
    for (double& b : layer) b = 0.1 * rng.next_gauss();

  const Vec3 x{0.11, 0.04, 0.91};
  const Vec3 d = Vec3{0.1, 0.2, 1.0}.normalized();
  const field::Upstream up{1.0, 0.6};
  std::vector<double> grad(mlp.params().size(), 0.0);
  field::FilmGrad fgrad = field::FilmGrad::zeros(3, 16);
  mlp.query_grad(x, d, &film, up, grad, &fgrad);

  auto loss = [&] {
    const auto q = mlp.query(x, d, &film);
    return up.d_color * q.color + up.d_density * q.density;
  };

  CheckResult out{"mlp_film_query", 0.0, 1e-4};
  auto pick = CounterRng::keyed(115);
  auto& values = mlp.params().values();
  for (int t = 0; t < 40; ++t) {
    const auto p =
        static_cast<std::size_t>(pick.next_int(0, static_cast<std::int64_t>(values.size()) - 1));
    const double fd = central_diff(loss, values[p], 1e-6);
    if (std::abs(fd) < 1e-12 && std::abs(grad[p]) < 1e-12) continue;
    out.worst_rel_err = std::max(out.worst_rel_err, rel_err(grad[p], fd));
  }
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t i = 0; i < 16; i += 4) {
      const double fd_g = central_diff(loss, film.gamma[l][i], 1e-6);
      if (std::abs(fd_g) > 1e-12 || std::abs(fgrad.gamma[l][i]) > 1e-12)
        out.worst_rel_err = std::max(out.worst_rel_err, rel_err(fgrad.gamma[l][i], fd_g));
    }
  return out;
}

inline CheckResult check_transient_grad() {
  const Aabb box{{-0.4, -0.4, 0.5}, {0.4, 0.4, 1.3}};
  field::VoxelField f(8, 8, 8, box);
  auto rng = CounterRng::keyed(117);
  for (double& v : f.params().values()) v = rng.next_range(-0.6, 1.0);
  field::FieldRef ref(f);

  const Vec3 l{0.05, 0.0, 0.0};
  const Vec3 s{-0.1, 0.05, 0.0};
  const std::size_t b0 = 186, b1 = 190;
  render::TransientConfig cfg;
  cfg.samples = 200;
  cfg.rng_key = 21;
  cfg.march = {16, true};

  const auto fwd = render::render_transient(ref, l, s, b0, b1, 32e-12, cfg);
  std::vector<double> upstream(b1 - b0, 1.0);
  std::vector<std::vector<double>> chunk_grads(field::kGradChunks,
                                               std::vector<double>(f.params().size(), 0.0));
  render::render_transient_grad(ref, l, s, b0, b1, 32e-12, cfg, fwd.rng_checksum, upstream,
                                [&](std::size_t c) { return std::span<double>(chunk_grads[c]); });
  std::vector<double> grad(f.params().size(), 0.0);
  for (const auto& cg : chunk_grads)
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += cg[i];

  auto loss = [&] {
    const auto est = render::render_transient(ref, l, s, b0, b1, 32e-12, cfg);
    double acc = 0.0;
    for (double v : est.rates) acc += v;
    return acc;
  };

  CheckResult out{"transient_frozen_samples", 0.0, 1e-4};
  auto pick = CounterRng::keyed(119);
  auto& values = f.params().values();
  std::size_t checked = 0;
  for (int t = 0; t < 60 && checked < 16; ++t) {
    const auto p =
        static_cast<std::size_t>(pick.next_int(0, static_cast<std::int64_t>(values.size()) - 1));
    if (std::abs(grad[p]) < 1e-12) continue;
    const double fd = central_diff(loss, values[p], 1e-5);
    out.worst_rel_err = std::max(out.worst_rel_err, rel_err(grad[p], fd));
    ++checked;
  }
  return out;
}

inline CheckResult check_encoder_end_to_end() {
  auto pattern = make_scan_pattern(ScanKind::kNonconfocal, WallFrame{}, 1.0, 4, 4, 8, 2e-9);
  enc::EncoderConfig cfg;
  cfg.channels = 2;
  cfg.depth_planes = 4;
  cfg.depth_min = 0.4;
  cfg.depth_max = 1.2;
  cfg.wavelength = 1.2;
  cfg.cycles = 1.0;
  cfg.film_hidden = 4;
  cfg.seed = 121;
  field::MlpConfig mc;
  mc.width = 8;
  mc.depth = 2;
  mc.pos_orders = 2;
  mc.dir_orders = 1;
  mc.color_hidden = 4;
  const Aabb box{{-0.3, -0.3, 0.5}, {0.3, 0.3, 1.1}};
  field::MlpField mlp(mc, box, 123);
  enc::Encoder encoder(cfg, pattern, mc.depth, mc.width);

  auto rng = CounterRng::keyed(125);
  for (const auto& name : {std::string("film_w2"), std::string("film_b2"), std::string("film_b1")}) {
    const auto& b = encoder.params().find(name);
    for (std::size_t i = 0; i < b.size; ++i)
      encoder.params().values()[b.offset + i] = 0.3 * rng.next_gauss();
  }

  Tensor m({4, 4, 8});
  for (double& v : m.data()) v = rng.next_range(0.1, 1.0);
  const std::vector<Vec3> probes = {{0.05, -0.1, 0.72}, {-0.12, 0.08, 0.9}};
  const Vec3 d{0, 0, 1};

  auto loss = [&] {
    encoder.forward(m);
    field::FieldRef ref(mlp, &encoder);
    double acc = 0.0;
    for (const auto& x : probes) {
      const auto q = ref.query(x, d);
      acc += 2.0 * q.color + q.density;
    }
    return acc;
  };

  encoder.forward(m);
  encoder.zero_grad();
  field::FieldRef ref(mlp, &encoder);
  std::vector<double> mlp_grad(mlp.params().size(), 0.0);
  for (const auto& x : probes) ref.query_grad(x, d, {2.0, 1.0}, mlp_grad);
  const auto enc_grad = encoder.backward();

  CheckResult out{"encoder_end_to_end", 0.0, 1e-3};
  const auto& conv1 = encoder.params().find("conv1_w");
  auto pick = CounterRng::keyed(127);
  std::size_t checked = 0;
  for (int t = 0; t < 40 && checked < 10; ++t) {
    const auto p = conv1.offset + static_cast<std::size_t>(pick.next_int(
                                      0, static_cast<std::int64_t>(conv1.size) - 1));
    const double fd = central_diff(loss, encoder.params().values()[p], 1e-5);
    if (std::abs(fd) < 1e-10 && std::abs(enc_grad[p]) < 1e-10) continue;
    out.worst_rel_err = std::max(out.worst_rel_err, rel_err(enc_grad[p], fd));
    ++checked;
  }
  return out;
}

}  // namespace detail

/// Every registered finite-difference check, in a stable order.
inline std::vector<CheckResult> run_all() {
  return {
      detail::check_loss_mse(),       detail::check_loss_beta(),
      detail::check_loss_tv(),        detail::check_loss_poisson(),
      detail::check_voxel_query(),    detail::check_mlp_film_query(),
      detail::check_transient_grad(), detail::check_encoder_end_to_end(),
  };
}

}  // namespace nlos::gradcheck
