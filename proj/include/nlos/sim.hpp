// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "nlos/parallel.hpp"
#include "nlos/rng.hpp"
#include "nlos/scan.hpp"
#include "nlos/scene.hpp"
#include "nlos/tensor.hpp"

namespace nlos::sim {

/// Virtual SPAD model: temporal binning, count scaling and optional
/// Gaussian timing jitter.
struct SensorConfig {
  double bin_width = 32e-12;  // seconds
  std::size_t bins = 768;
  double photon_scale = 1.0;  // radiometric units -> expected counts
  double jitter_fwhm = 0.0;   // seconds, 0 disables the temporal blur
  std::uint64_t seed = 0;

  void validate() const {
    if (!(bin_width > 0.0)) throw std::invalid_argument("bin width must be positive");
    if (bins == 0) throw std::invalid_argument("bin count must be positive");
    if (!(photon_scale > 0.0)) throw std::invalid_argument("photon scale must be positive");
    if (jitter_fwhm < 0.0) throw std::invalid_argument("jitter fwhm must be nonnegative");
  }
};

/// Fast-capture perturbation: rows permuted within blocks plus bounded
/// circular shifts of each histogram.
struct RemapConfig {
  std::size_t block_height = 1;
  std::size_t max_shift_bins = 0;
  std::uint64_t seed = 0;
};

struct SimStats {
  std::uint64_t dropped_paths = 0;  // arrivals past the last bin
};

namespace detail {

inline std::vector<double> gaussian_kernel(double fwhm_bins) {
  const double sigma = fwhm_bins / (2.0 * std::sqrt(2.0 * std::log(2.0)));
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

inline void convolve_same(std::vector<double>& h, const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  const int n = static_cast<int>(h.size());
  std::vector<double> out(h.size(), 0.0);
  for (int b = 0; b < n; ++b) {
    double acc = 0.0;
    for (int i = -radius; i <= radius; ++i) {
      const int src = b - i;
      if (src >= 0 && src < n) acc += h[static_cast<std::size_t>(src)] * kernel[static_cast<std::size_t>(i + radius)];
    }
    out[static_cast<std::size_t>(b)] = acc;
  }
  h = std::move(out);
}

}  // namespace detail

/// Per-bin photon rates at a single (laser, sensor) wall pair: a Riemann
/// sum of the three-bounce path integral over the scene's surfels, with
/// Lambertian reflectance and unit visibility.
inline std::vector<double> impulse_response(const Scene& scene, const Vec3& l, const Vec3& s,
                                            const SensorConfig& sensor,
                                            SimStats* stats = nullptr) {
  sensor.validate();
  std::vector<double> hist(sensor.bins, 0.0);
  const double c_dt = kSpeedOfLight * sensor.bin_width;

  for (const Surfel& x : scene.samples) {
    const Vec3 to_l = l - x.position;
    const Vec3 to_s = s - x.position;
    const double rl = to_l.norm();
    const double rs = to_s.norm();
    if (rl < 1e-9 || rs < 1e-9) throw std::invalid_argument("degenerate path: surfel on the wall");

    const std::size_t bin = static_cast<std::size_t>((rl + rs) / c_dt);
    if (bin >= sensor.bins) {
      if (stats) ++stats->dropped_paths;
      continue;
    }

    const double cos_l = std::max(0.0, dot(to_l / rl, x.normal));
    const double cos_s = std::max(0.0, dot(to_s / rs, x.normal));
    const double fr = x.albedo / std::numbers::pi;
    hist[bin] += fr * (cos_l / (rl * rl)) * (cos_s / (rs * rs)) * x.area * sensor.photon_scale;
  }

  if (sensor.jitter_fwhm > 0.0)
    detail::convolve_same(hist, detail::gaussian_kernel(sensor.jitter_fwhm / sensor.bin_width));
  return hist;
}

/// Expected-rate measurement over a full scan pattern.
inline TransientMeasurement simulate_measurement(const Scene& scene, const ScanPattern& pattern,
                                                 const SensorConfig& sensor,
                                                 SimStats* stats = nullptr) {
  pattern.validate();
  if (pattern.bins != sensor.bins || pattern.bin_width != sensor.bin_width)
    throw std::invalid_argument("scan pattern and sensor binning disagree");

  TransientMeasurement m;
  m.pattern = pattern;
  m.data = Tensor({pattern.rows, pattern.cols, pattern.bins});
  m.is_counts = false;

  const std::size_t n_pix = pattern.rows * pattern.cols;
  std::vector<std::uint64_t> dropped(n_pix, 0);
  parallel_for(n_pix, [&](std::size_t p) {
    const std::size_t i = p / pattern.cols;
    const std::size_t j = p % pattern.cols;
    SimStats local;
    const auto hist =
        impulse_response(scene, pattern.laser_at(i, j), pattern.sensor_at(i, j), sensor, &local);
    std::copy(hist.begin(), hist.end(), m.data.data().begin() + static_cast<std::ptrdiff_t>(p * pattern.bins));
    dropped[p] = local.dropped_paths;
  });
  if (stats)
    for (std::uint64_t d : dropped) stats->dropped_paths += d;
  return m;
}

/// Draw Poisson photon counts from a rate measurement. Each bin uses an
/// RNG keyed by (seed, i, j, b), so results do not depend on scheduling.
inline TransientMeasurement spad_sample(const TransientMeasurement& rates, std::uint64_t seed) {
  rates.validate();
  TransientMeasurement counts = rates;
  counts.is_counts = true;
  const auto& p = rates.pattern;
  parallel_for(p.rows * p.cols, [&](std::size_t pix) {
    const std::size_t i = pix / p.cols;
    const std::size_t j = pix % p.cols;
    for (std::size_t b = 0; b < p.bins; ++b) {
      const double rate = rates.data(i, j, b);
      if (rate < 0.0) throw std::invalid_argument("negative rate");
      auto rng = CounterRng::keyed(seed, i, j, b);
      counts.data(i, j, b) = rate == 0.0 ? 0.0 : static_cast<double>(rng.next_poisson(rate));
    }
  });
  return counts;
}

/// Emulate fast-capture pixel remapping: permute rows within each block
/// of block_height scanlines and circularly shift every histogram by up
/// to max_shift_bins. Photon totals are conserved exactly.
inline TransientMeasurement apply_pixel_remapping(const TransientMeasurement& m,
                                                  const RemapConfig& cfg) {
  if (cfg.block_height < 1) throw std::invalid_argument("block height must be >= 1");
  m.validate();
  const auto& p = m.pattern;
  TransientMeasurement out = m;

  // Row permutation per block (Fisher-Yates keyed by block index).
  std::vector<std::size_t> row_map(p.rows);
  for (std::size_t i = 0; i < p.rows; ++i) row_map[i] = i;
  for (std::size_t block = 0; block * cfg.block_height < p.rows; ++block) {
    const std::size_t lo = block * cfg.block_height;
    const std::size_t hi = std::min(p.rows, lo + cfg.block_height);
    auto rng = CounterRng::keyed(cfg.seed, 0x726f77, block);
    for (std::size_t i = hi - 1; i > lo; --i) {
      const std::size_t j = lo + static_cast<std::size_t>(rng.next_int(0, static_cast<std::int64_t>(i - lo)));
      std::swap(row_map[i], row_map[j]);
    }
  }

  const std::int64_t max_shift = static_cast<std::int64_t>(cfg.max_shift_bins);
  for (std::size_t i = 0; i < p.rows; ++i) {
    const std::size_t src_row = row_map[i];
    for (std::size_t j = 0; j < p.cols; ++j) {
      auto rng = CounterRng::keyed(cfg.seed, 0x736866, i, j);
      const std::int64_t shift = max_shift == 0 ? 0 : rng.next_int(-max_shift, max_shift);
      for (std::size_t b = 0; b < p.bins; ++b) {
        const std::int64_t src_b =
            (static_cast<std::int64_t>(b) - shift % static_cast<std::int64_t>(p.bins) +
             static_cast<std::int64_t>(p.bins)) %
            static_cast<std::int64_t>(p.bins);
        out.data(i, j, b) = m.data(src_row, j, static_cast<std::size_t>(src_b));
      }
    }
  }
  return out;
}

}  // namespace nlos::sim
