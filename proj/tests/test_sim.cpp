// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <set>

#include "nlos/sim.hpp"
#include "oracles.hpp"

using namespace nlos;
using namespace nlos::sim;

namespace {

Scene single_surfel_scene(const Vec3& pos = {0, 0, 1}, double albedo = 1.0) {
  Scene scene;
  scene.bbox = {{-0.7, -0.7, 0.3}, {0.7, 0.7, 1.7}};
  Surfel s;
  s.position = pos;
  s.normal = {0, 0, -1};
  s.area = 1e-4;
  s.albedo = albedo;
  scene.samples = {s};
  scene.validate();
  return scene;
}

SensorConfig desk_sensor(std::size_t bins = 512) {
  SensorConfig cfg;
  cfg.bin_width = 32e-12;
  cfg.bins = bins;
  cfg.photon_scale = 1.0;
  return cfg;
}

Scene random_scene(std::uint64_t seed, std::size_t count) {
  Scene scene;
  scene.bbox = {{-0.6, -0.6, 0.3}, {0.6, 0.6, 1.6}};
  auto rng = CounterRng::keyed(seed, 0x7363656e);
  for (std::size_t i = 0; i < count; ++i) {
    Surfel s;
    s.position = {rng.next_range(-0.5, 0.5), rng.next_range(-0.5, 0.5), rng.next_range(0.4, 1.5)};
    const Vec3 n{rng.next_range(-1, 1), rng.next_range(-1, 1), rng.next_range(-1.5, -0.2)};
    s.normal = n.normalized();
    s.area = rng.next_range(5e-5, 5e-4);
    s.albedo = rng.next_range(0.2, 1.0);
    scene.samples.push_back(s);
  }
  scene.validate();
  return scene;
}

}  // namespace

TEST_CASE("empty scene yields an all-zero histogram") {
  Scene scene;
  scene.bbox = {{-1, -1, 0.1}, {1, 1, 2}};
  const auto hist = impulse_response(scene, {0, 0, 0}, {0, 0, 0}, desk_sensor());
  for (double v : hist) REQUIRE(v == 0.0);
}

TEST_CASE("single surfel lands in the analytic bin with the analytic amplitude") {
  const auto scene = single_surfel_scene();
  const auto hist = impulse_response(scene, {0, 0, 0}, {0, 0, 0}, desk_sensor());

  const auto expected_bin =
      static_cast<std::size_t>((2.0 / kSpeedOfLight) / 32e-12);  // floor(6.6713ns / 32ps)
  REQUIRE(expected_bin == 208);
  const double expected = (1.0 / std::numbers::pi) * 1e-4;

  for (std::size_t b = 0; b < hist.size(); ++b) {
    if (b == expected_bin) {
      REQUIRE(oracles::rel_err(hist[b], expected) < 1e-12);
    } else {
      REQUIRE(hist[b] == 0.0);
    }
  }
}

TEST_CASE("off-axis surfel matches the brute-force path-integral oracle") {
  const auto scene = single_surfel_scene({0.5, 0, 1});
  const auto sensor = desk_sensor();
  const auto hist = impulse_response(scene, {0, 0, 0}, {0, 0, 0}, sensor);
  const auto oracle =
      oracles::brute_force_impulse(scene, {0, 0, 0}, {0, 0, 0}, sensor.bin_width, sensor.bins, 1.0);
  for (std::size_t b = 0; b < hist.size(); ++b)
    REQUIRE(oracles::rel_err(hist[b], oracle[b]) < 1e-12);
}

TEST_CASE("impulse response agrees with the oracle on random scenes") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto scene = random_scene(seed, 40);
    const auto sensor = desk_sensor();
    const Vec3 l{0.1, -0.2, 0.0};
    const Vec3 s{-0.3, 0.25, 0.0};
    const auto hist = impulse_response(scene, l, s, sensor);
    const auto oracle =
        oracles::brute_force_impulse(scene, l, s, sensor.bin_width, sensor.bins, 1.0);
    for (std::size_t b = 0; b < hist.size(); ++b)
      REQUIRE(oracles::rel_err(hist[b], oracle[b]) < 1e-10);
  }
}

TEST_CASE("impulse response is linear, reciprocal and albedo-scaling") {
  const auto scene_a = random_scene(11, 25);
  const auto scene_b = random_scene(23, 25);
  const auto sensor = desk_sensor();
  const Vec3 l{0.2, 0.1, 0.0};
  const Vec3 s{-0.1, -0.3, 0.0};

  Scene merged = scene_a;
  merged.samples.insert(merged.samples.end(), scene_b.samples.begin(), scene_b.samples.end());

  const auto ha = impulse_response(scene_a, l, s, sensor);
  const auto hb = impulse_response(scene_b, l, s, sensor);
  const auto hm = impulse_response(merged, l, s, sensor);
  for (std::size_t b = 0; b < hm.size(); ++b)
    REQUIRE(oracles::rel_err(hm[b], ha[b] + hb[b]) < 1e-12);

  const auto swapped = impulse_response(merged, s, l, sensor);
  for (std::size_t b = 0; b < hm.size(); ++b) REQUIRE(oracles::rel_err(hm[b], swapped[b]) < 1e-12);

  Scene halved = scene_a;
  for (auto& surf : halved.samples) surf.albedo *= 0.5;
  const auto hd = impulse_response(scene_a, l, s, sensor);
  const auto hh = impulse_response(halved, l, s, sensor);
  for (std::size_t b = 0; b < hd.size(); ++b)
    REQUIRE(oracles::rel_err(hd[b], 2.0 * hh[b]) < 1e-12);
}

TEST_CASE("first arrival respects the time-of-flight bound") {
  const auto scene = random_scene(7, 30);
  const auto sensor = desk_sensor();
  const Vec3 l{0.0, 0.0, 0.0};
  const Vec3 s{0.2, -0.2, 0.0};
  const auto hist = impulse_response(scene, l, s, sensor);

  double min_path = 1e30;
  for (const auto& surf : scene.samples)
    min_path = std::min(min_path, distance(l, surf.position) + distance(s, surf.position));
  const auto bound = static_cast<std::size_t>(min_path / (kSpeedOfLight * sensor.bin_width));

  std::size_t first = hist.size();
  for (std::size_t b = 0; b < hist.size(); ++b)
    if (hist[b] > 0.0) {
      first = b;
      break;
    }
  REQUIRE(first >= bound);
}

TEST_CASE("degenerate surfel-on-wall paths are rejected") {
  Scene scene;
  scene.bbox = {{-0.7, -0.7, -0.1}, {0.7, 0.7, 1.7}};
  Surfel s;
  s.position = {0, 0, 0};
  s.normal = {0, 0, -1};
  s.area = 1e-4;
  s.albedo = 1.0;
  scene.samples = {s};
  REQUIRE_THROWS_WITH(impulse_response(scene, {0, 0, 0}, {0.1, 0, 0}, desk_sensor()),
                      Catch::Matchers::ContainsSubstring("degenerate"));
}

TEST_CASE("gaussian jitter preserves total rate and spreads the peak") {
  const auto scene = single_surfel_scene();
  auto sensor = desk_sensor();
  auto sharp = impulse_response(scene, {0, 0, 0}, {0, 0, 0}, sensor);
  sensor.jitter_fwhm = 100e-12;
  auto blurred = impulse_response(scene, {0, 0, 0}, {0, 0, 0}, sensor);

  double sum_sharp = 0.0, sum_blur = 0.0;
  std::size_t nonzero = 0;
  for (std::size_t b = 0; b < sharp.size(); ++b) {
    sum_sharp += sharp[b];
    sum_blur += blurred[b];
    if (blurred[b] > 0.0) ++nonzero;
  }
  REQUIRE(oracles::rel_err(sum_blur, sum_sharp) < 1e-9);
  REQUIRE(nonzero > 3);
}

TEST_CASE("confocal grid over a symmetric surfel gives identical histograms") {
  const auto scene = single_surfel_scene({0, 0, 1});
  WallFrame wall;
  // Symmetric 2x2 grid: all four wall points are equidistant from the surfel.
  auto pattern = make_scan_pattern(ScanKind::kConfocal, wall, 0.2, 2, 2, 512, 32e-12);
  const auto m = simulate_measurement(scene, pattern, desk_sensor());
  for (std::size_t b = 0; b < 512; ++b) {
    const double v = m.data(0, 0, b);
    REQUIRE(m.data(0, 1, b) == v);
    REQUIRE(m.data(1, 0, b) == v);
    REQUIRE(m.data(1, 1, b) == v);
  }
}

TEST_CASE("nonconfocal peak bins follow the per-pixel analytic path length") {
  const auto scene = single_surfel_scene({0.1, -0.2, 0.9});
  WallFrame wall;
  auto pattern = make_scan_pattern(ScanKind::kNonconfocal, wall, 1.0, 2, 2, 512, 32e-12);
  const auto m = simulate_measurement(scene, pattern, desk_sensor());

  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      const double path = distance(pattern.laser, scene.samples[0].position) +
                          distance(pattern.sensor_at(i, j), scene.samples[0].position);
      const auto bin = static_cast<std::size_t>(path / (kSpeedOfLight * 32e-12));
      std::size_t peak = 0;
      for (std::size_t b = 1; b < 512; ++b)
        if (m.data(i, j, b) > m.data(i, j, peak)) peak = b;
      REQUIRE(peak == bin);
    }
}

TEST_CASE("confocal and nonconfocal agree where the sensor meets the laser") {
  const auto scene = single_surfel_scene({0.05, 0.1, 1.1});
  WallFrame wall;
  // 3x3 grid: the center pixel sits exactly at the wall-center laser spot.
  auto conf = make_scan_pattern(ScanKind::kConfocal, wall, 0.9, 3, 3, 512, 32e-12);
  auto nonc = make_scan_pattern(ScanKind::kNonconfocal, wall, 0.9, 3, 3, 512, 32e-12);
  REQUIRE(nonc.sensor_at(1, 1) == nonc.laser);

  const auto mc = simulate_measurement(scene, conf, desk_sensor());
  const auto mn = simulate_measurement(scene, nonc, desk_sensor());
  for (std::size_t b = 0; b < 512; ++b) REQUIRE(mc.data(1, 1, b) == mn.data(1, 1, b));
}

TEST_CASE("spad sampling is deterministic, unbiased and preserves zeros") {
  WallFrame wall;
  TransientMeasurement rates;
  rates.pattern = make_scan_pattern(ScanKind::kNonconfocal, wall, 1.0, 10, 10, 1000, 32e-12);
  rates.data = Tensor({10, 10, 1000});
  // ~100k bins at rate 5 for the CLT bound; leave pixel (0,0) all zero.
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 10; ++j)
      for (std::size_t b = 0; b < 1000; ++b)
        if (i + j > 0) rates.data(i, j, b) = 5.0;

  const auto counts = spad_sample(rates, 1234);
  const auto counts2 = spad_sample(rates, 1234);
  const auto counts3 = spad_sample(rates, 99);

  REQUIRE(counts.is_counts);
  REQUIRE(counts.data.data() == counts2.data.data());
  REQUIRE(counts.data.data() != counts3.data.data());
  for (std::size_t b = 0; b < 1000; ++b) REQUIRE(counts.data(0, 0, b) == 0.0);

  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 10; ++j)
      for (std::size_t b = 0; b < 1000; ++b)
        if (i + j > 0) {
          sum += counts.data(i, j, b);
          ++n;
        }
  const double mean = sum / static_cast<double>(n);
  const double bound = 3.0 * std::sqrt(5.0 / static_cast<double>(n));
  REQUIRE(std::abs(mean - 5.0) < bound);
}

TEST_CASE("pixel remapping conserves photons within blocks") {
  WallFrame wall;
  TransientMeasurement m;
  m.pattern = make_scan_pattern(ScanKind::kNonconfocal, wall, 1.0, 8, 4, 64, 32e-12);
  m.data = Tensor({8, 4, 64});
  auto rng = CounterRng::keyed(5, 0x64617461);
  for (double& v : m.data.data()) v = static_cast<double>(rng.next_int(0, 20));
  m.is_counts = true;

  SECTION("identity config") {
    RemapConfig cfg;
    cfg.block_height = 1;
    cfg.max_shift_bins = 0;
    const auto out = apply_pixel_remapping(m, cfg);
    REQUIRE(out.data.data() == m.data.data());
  }

  SECTION("photon total is conserved exactly") {
    RemapConfig cfg;
    cfg.block_height = 4;
    cfg.max_shift_bins = 3;
    cfg.seed = 77;
    const auto out = apply_pixel_remapping(m, cfg);
    REQUIRE(out.data.sum() == m.data.sum());
  }

  SECTION("row multisets within each block are unchanged") {
    RemapConfig cfg;
    cfg.block_height = 4;
    cfg.max_shift_bins = 0;  // no shifts, so rows move as whole units
    cfg.seed = 3;
    const auto out = apply_pixel_remapping(m, cfg);
    for (std::size_t block = 0; block < 2; ++block) {
      std::multiset<std::vector<double>> before, after;
      for (std::size_t r = 0; r < 4; ++r) {
        const std::size_t row = block * 4 + r;
        std::vector<double> rb(
            m.data.data().begin() + static_cast<std::ptrdiff_t>(row * 4 * 64),
            m.data.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * 4 * 64));
        std::vector<double> ra(
            out.data.data().begin() + static_cast<std::ptrdiff_t>(row * 4 * 64),
            out.data.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * 4 * 64));
        before.insert(std::move(rb));
        after.insert(std::move(ra));
      }
      REQUIRE(before == after);
    }
  }

  SECTION("invalid block height is rejected") {
    RemapConfig cfg;
    cfg.block_height = 0;
    REQUIRE_THROWS_AS(apply_pixel_remapping(m, cfg), std::invalid_argument);
  }
}

TEST_CASE("arrivals beyond the last bin are dropped and counted") {
  const auto scene = single_surfel_scene({0, 0, 1});
  SimStats stats;
  auto sensor = desk_sensor(100);  // range ends before the 208-bin arrival
  const auto hist = impulse_response(scene, {0, 0, 0}, {0, 0, 0}, sensor, &stats);
  REQUIRE(stats.dropped_paths == 1);
  for (double v : hist) REQUIRE(v == 0.0);
}
