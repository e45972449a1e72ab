// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "nlos/field.hpp"
#include "oracles.hpp"

using namespace nlos;
using namespace nlos::field;

namespace {
const Aabb kBox{{-0.5, -0.5, 0.5}, {0.5, 0.5, 1.5}};
}

TEST_CASE("positional encoding basics") {
  const double zeros[3] = {0, 0, 0};
  const auto enc = positional_encode({zeros, 3}, 4);
  REQUIRE(enc.size() == 3 * (1 + 2 * 4));
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(enc[i] == 0.0);
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(enc[3 + 6 * k + i] == 0.0);          // sines
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(enc[3 + 6 * k + 3 + i] == 1.0);      // cosines
  }

  const double v[3] = {0.3, -0.7, 0.11};
  const auto id = positional_encode({v, 3}, 0);
  REQUIRE(id.size() == 3);
  REQUIRE(id[0] == v[0]);
  REQUIRE(id[2] == v[2]);

  REQUIRE(positional_encode({v, 3}, 6).size() == 39);
}

TEST_CASE("film modulation") {
  std::vector<double> h = {0.5, -1.0, 2.0};
  std::vector<double> ones = {1, 1, 1}, zeros = {0, 0, 0};
  const auto id = film_modulate(h, ones, zeros);
  REQUIRE(id == h);

  std::vector<double> beta = {0.1, 0.2, 0.3};
  const auto b = film_modulate(zeros, ones, beta);
  REQUIRE(b == beta);

  auto rng = CounterRng::keyed(4);
  std::vector<double> hv(16), gv(16), bv(16);
  for (std::size_t i = 0; i < 16; ++i) {
    hv[i] = rng.next_range(-2, 2);
    gv[i] = rng.next_range(-2, 2);
    bv[i] = rng.next_range(-2, 2);
  }
  const auto out = film_modulate(hv, gv, bv);
  for (std::size_t i = 0; i < 16; ++i) {
    // Independent elementwise loop.
    REQUIRE(out[i] == gv[i] * hv[i] + bv[i]);
  }

  std::vector<double> short_g = {1, 1};
  REQUIRE_THROWS_AS(film_modulate(hv, short_g, bv), std::invalid_argument);
}

TEST_CASE("constant voxel field returns the activated constants everywhere") {
  VoxelField f(4, 4, 4, kBox);
  f.fill_raw(0.7, -0.3);
  auto rng = CounterRng::keyed(8);
  for (int i = 0; i < 10; ++i) {
    const Vec3 x{rng.next_range(-0.5, 0.5), rng.next_range(-0.5, 0.5), rng.next_range(0.5, 1.5)};
    const auto q = f.query(x, {0, 0, 1});
    REQUIRE(q.density == Catch::Approx(softplus(0.7)).epsilon(1e-12));
    REQUIRE(q.color == Catch::Approx(sigmoid(-0.3)).epsilon(1e-12));
  }
}

TEST_CASE("trilinear interpolation reproduces affine functions exactly") {
  VoxelField f(5, 4, 6, kBox);
  const double a = 0.37, bx = 0.9, by = -1.4, bz = 0.55;
  auto raw = f.params().block(0);  // raw_sigma laid out (nx, ny, nz)
  for (std::size_t ix = 0; ix < 5; ++ix)
    for (std::size_t iy = 0; iy < 4; ++iy)
      for (std::size_t iz = 0; iz < 6; ++iz) {
        const Vec3 p{kBox.min.x + 1.0 * static_cast<double>(ix) / 4.0,
                     kBox.min.y + 1.0 * static_cast<double>(iy) / 3.0,
                     kBox.min.z + 1.0 * static_cast<double>(iz) / 5.0};
        raw[(ix * 4 + iy) * 6 + iz] = a + bx * p.x + by * p.y + bz * p.z;
      }

  auto rng = CounterRng::keyed(12);
  for (int t = 0; t < 20; ++t) {
    const Vec3 x{rng.next_range(-0.49, 0.49), rng.next_range(-0.49, 0.49),
                 rng.next_range(0.51, 1.49)};
    const double want_raw = a + bx * x.x + by * x.y + bz * x.z;
    const auto q = f.query(x, {0, 0, 1});
    REQUIRE(oracles::rel_err(q.density, softplus(want_raw)) < 1e-9);
  }
}

TEST_CASE("queries outside the bbox return zero by convention") {
  VoxelField f(4, 4, 4, kBox);
  f.fill_raw(2.0, 2.0);
  const auto q = f.query({0, 0, 2.0}, {0, 0, 1});
  REQUIRE(q.density == 0.0);
  REQUIRE(q.color == 0.0);

  MlpField mlp({.width = 16, .depth = 2}, kBox);
  const auto qm = mlp.query({0, 0, 0.2}, {0, 0, 1});
  REQUIRE(qm.density == 0.0);
  REQUIRE(qm.color == 0.0);
}

TEST_CASE("voxel gradients match trilinear weights times the activation slope") {
  VoxelField f(4, 4, 4, kBox);
  f.randomize(5, 0.5);
  const Vec3 x{0.12, -0.2, 0.83};
  const Vec3 d{0, 0, 1};

  SECTION("zero upstream gives zero gradients") {
    std::vector<double> grad(f.params().size(), 0.0);
    f.query_grad(x, d, {0.0, 0.0}, grad);
    for (double g : grad) REQUIRE(g == 0.0);
  }

  SECTION("density gradient vs central finite differences") {
    std::vector<double> grad(f.params().size(), 0.0);
    f.query_grad(x, d, {0.0, 1.0}, grad);

    auto& values = f.params().values();
    std::size_t checked = 0;
    for (std::size_t p = 0; p < values.size(); ++p) {
      if (grad[p] == 0.0) continue;
      const double fd = oracles::central_diff(
          [&] { return f.query(x, d).density; }, values[p], 1e-6);
      REQUIRE(oracles::rel_err(grad[p], fd) < 1e-6);
      ++checked;
    }
    REQUIRE(checked == 8);  // exactly the enclosing cell corners
  }

  SECTION("color gradient vs central finite differences") {
    std::vector<double> grad(f.params().size(), 0.0);
    f.query_grad(x, d, {1.0, 0.0}, grad);
    auto& values = f.params().values();
    for (std::size_t p = 0; p < values.size(); ++p) {
      if (grad[p] == 0.0) continue;
      const double fd = oracles::central_diff(
          [&] { return f.query(x, d).color; }, values[p], 1e-6);
      REQUIRE(oracles::rel_err(grad[p], fd) < 1e-6);
    }
  }
}

TEST_CASE("activation ranges hold for any parameters") {
  auto rng = CounterRng::keyed(77);
  VoxelField f(4, 4, 4, kBox);
  for (double& v : f.params().values()) v = rng.next_range(-50, 50);
  MlpField mlp({.width = 16, .depth = 2}, kBox, 3);
  for (int t = 0; t < 50; ++t) {
    const Vec3 x{rng.next_range(-0.5, 0.5), rng.next_range(-0.5, 0.5), rng.next_range(0.5, 1.5)};
    const Vec3 d = Vec3{rng.next_range(-1, 1), rng.next_range(-1, 1), rng.next_range(0.1, 1)}
                       .normalized();
    const auto qv = f.query(x, d);
    REQUIRE(qv.density >= 0.0);
    REQUIRE(qv.color >= 0.0);
    REQUIRE(qv.color < 1.0);
    const auto qm = mlp.query(x, d);
    REQUIRE(qm.density >= 0.0);
    REQUIRE(qm.color > 0.0);
    REQUIRE(qm.color < 1.0);
  }
}

TEST_CASE("identity film equals the unconditioned mlp bitwise") {
  MlpField mlp({.width = 32, .depth = 3}, kBox, 11);
  const auto film = FilmParams::identity(3, 32);
  auto rng = CounterRng::keyed(13);
  for (int t = 0; t < 20; ++t) {
    const Vec3 x{rng.next_range(-0.5, 0.5), rng.next_range(-0.5, 0.5), rng.next_range(0.5, 1.5)};
    const Vec3 d = Vec3{rng.next_range(-1, 1), rng.next_range(-1, 1), 1.0}.normalized();
    const auto plain = mlp.query(x, d);
    const auto conditioned = mlp.query(x, d, &film);
    REQUIRE(plain.color == conditioned.color);
    REQUIRE(plain.density == conditioned.density);
  }
}

TEST_CASE("mlp and film gradients match finite differences") {
  MlpField mlp({.width = 16, .depth = 3}, kBox, 21);
  FilmParams film = FilmParams::identity(3, 16);
  auto rng = CounterRng::keyed(31);
  for (auto& layer : film.gamma)
    for (double& g : layer) g = 1.0 + 0.2 * rng.next_gauss();
  for (auto& layer : film.beta)
    for (double& b : layer) b = 0.1 * rng.next_gauss();

  const Vec3 x{0.07, 0.21, 0.94};
  const Vec3 d = Vec3{0.2, -0.1, 1.0}.normalized();
  const Upstream up{0.8, 1.3};  // d_color, d_density

  std::vector<double> grad(mlp.params().size(), 0.0);
  FilmGrad fgrad = FilmGrad::zeros(3, 16);
  mlp.query_grad(x, d, &film, up, grad, &fgrad);

  auto loss = [&] {
    const auto q = mlp.query(x, d, &film);
    return up.d_color * q.color + up.d_density * q.density;
  };

  SECTION("parameter gradients") {
    auto& values = mlp.params().values();
    std::size_t checked = 0;
    auto pick = CounterRng::keyed(41);
    for (int t = 0; t < 60; ++t) {
      const auto p = static_cast<std::size_t>(pick.next_int(0, static_cast<std::int64_t>(values.size()) - 1));
      const double fd = oracles::central_diff(loss, values[p], 1e-6);
      if (std::abs(fd) < 1e-12 && std::abs(grad[p]) < 1e-12) continue;
      REQUIRE(oracles::rel_err(grad[p], fd) < 1e-5);
      ++checked;
    }
    REQUIRE(checked > 20);
  }

  SECTION("film gamma and beta gradients") {
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t i = 0; i < 16; i += 5) {
        const double fd_g = oracles::central_diff(loss, film.gamma[l][i], 1e-6);
        const double fd_b = oracles::central_diff(loss, film.beta[l][i], 1e-6);
        if (std::abs(fd_g) > 1e-12 || std::abs(fgrad.gamma[l][i]) > 1e-12)
          REQUIRE(oracles::rel_err(fgrad.gamma[l][i], fd_g) < 1e-4);
        if (std::abs(fd_b) > 1e-12 || std::abs(fgrad.beta[l][i]) > 1e-12)
          REQUIRE(oracles::rel_err(fgrad.beta[l][i], fd_b) < 1e-4);
      }
  }
}

TEST_CASE("directional derivative along a random parameter direction") {
  MlpField mlp({.width = 16, .depth = 3}, kBox, 51);
  const Vec3 x{-0.11, 0.02, 1.2};
  const Vec3 d{0, 0, 1};
  const Upstream up{1.0, 0.5};

  std::vector<double> grad(mlp.params().size(), 0.0);
  mlp.query_grad(x, d, nullptr, up, grad, nullptr);

  auto rng = CounterRng::keyed(61);
  std::vector<double> dir(mlp.params().size());
  double norm = 0.0;
  for (double& v : dir) {
    v = rng.next_gauss();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : dir) v /= norm;

  double analytic = 0.0;
  for (std::size_t i = 0; i < dir.size(); ++i) analytic += grad[i] * dir[i];

  const double eps = 1e-5;
  auto loss_at = [&](double shift) {
    auto& values = mlp.params().values();
    for (std::size_t i = 0; i < dir.size(); ++i) values[i] += shift * dir[i];
    const auto q = mlp.query(x, d);
    const double v = up.d_color * q.color + up.d_density * q.density;
    for (std::size_t i = 0; i < dir.size(); ++i) values[i] -= shift * dir[i];
    return v;
  };
  const double fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
  REQUIRE(oracles::rel_err(analytic, fd) < 1e-5);
}

TEST_CASE("param store checkpoints round trip") {
  VoxelField f(4, 4, 4, kBox);
  f.randomize(91, 0.8);
  const auto dir = std::filesystem::temp_directory_path() / "nlos_test_field_ckpt";
  f.params().save(dir, {{"backend", "voxel"}});

  VoxelField g(4, 4, 4, kBox);
  g.params().load(dir);
  // Checkpoints are f32 on disk, so round-tripped values match to f32.
  for (std::size_t i = 0; i < f.params().size(); ++i)
    REQUIRE(g.params().values()[i] == static_cast<double>(static_cast<float>(f.params().values()[i])));
}

TEST_CASE("queries are pure and deterministic") {
  MlpField mlp({.width = 16, .depth = 2}, kBox, 71);
  const Vec3 x{0.2, 0.3, 1.1};
  const Vec3 d{0, 0, 1};
  const auto a = mlp.query(x, d);
  const auto b = mlp.query(x, d);
  REQUIRE(a.color == b.color);
  REQUIRE(a.density == b.density);

  REQUIRE_THROWS_AS(mlp.query({std::nan(""), 0, 1}, d), std::invalid_argument);
}
