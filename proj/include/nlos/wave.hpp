// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <fftw3.h>

#include "nlos/parallel.hpp"
#include "nlos/scan.hpp"
#include "nlos/tensor.hpp"

namespace nlos::wave {

using Complex = std::complex<double>;

/// Reconstruction wave defaults, calibrated on the 32-sample / 1 m wall
/// so that single-scatterer focusing stays voxel-accurate while the
/// carrier is long enough to ride out block-level pixel remapping.
inline constexpr double kDefaultWavelength = 0.5;  // meters
inline constexpr double kDefaultCycles = 2.0;

/// Band-limited virtual illumination pulse: complex carrier at the
/// center wavelength under a Gaussian envelope, unit L2 norm.
struct IlluminationWave {
  double center_wavelength = 0.0;  // meters
  double cycles = 0.0;             // envelope width in carrier cycles
  double bin_width = 0.0;          // seconds between samples
  std::vector<Complex> samples;    // odd length, centered on index radius()

  std::size_t radius() const { return samples.size() / 2; }
};

inline IlluminationWave make_illumination_wave(double lambda_c, double cycles, double bin_width,
                                               std::size_t bins) {
  if (!(lambda_c > 0.0)) throw std::invalid_argument("wavelength must be positive");
  if (!(cycles > 0.0)) throw std::invalid_argument("cycle count must be positive");
  if (!(bin_width > 0.0)) throw std::invalid_argument("bin width must be positive");

  const double sigma_t = cycles * lambda_c / (2.0 * kSpeedOfLight);
  const auto radius = static_cast<std::size_t>(std::floor(3.0 * sigma_t / bin_width));
  const std::size_t length = 2 * radius + 1;
  if (length > bins) throw std::invalid_argument("wave too long for the temporal range");

  IlluminationWave w;
  w.center_wavelength = lambda_c;
  w.cycles = cycles;
  w.bin_width = bin_width;
  w.samples.resize(length);
  double norm2 = 0.0;
  for (std::size_t i = 0; i < length; ++i) {
    const double t = (static_cast<double>(i) - static_cast<double>(radius)) * bin_width;
    const double phase = 2.0 * std::numbers::pi * kSpeedOfLight * t / lambda_c;
    const double envelope = std::exp(-t * t / (2.0 * sigma_t * sigma_t));
    w.samples[i] = Complex(envelope * std::cos(phase), envelope * std::sin(phase));
    norm2 += std::norm(w.samples[i]);
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (Complex& c : w.samples) c *= inv;
  return w;
}

/// Complex-valued 2D field sampled on the wall grid.
struct ComplexImage {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Complex> v;

  ComplexImage() = default;
  ComplexImage(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c) {}
  Complex& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  const Complex& at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

/// Complex-valued (rows, cols, bins) cube, the phasor-domain measurement.
struct PhasorCube {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t bins = 0;
  std::vector<Complex> v;

  PhasorCube() = default;
  PhasorCube(std::size_t r, std::size_t c, std::size_t b) : rows(r), cols(c), bins(b), v(r * c * b) {}
  Complex& at(std::size_t i, std::size_t j, std::size_t b) { return v[(i * cols + j) * bins + b]; }
  const Complex& at(std::size_t i, std::size_t j, std::size_t b) const {
    return v[(i * cols + j) * bins + b];
  }
};

/// Complex volume over depth planes behind the wall.
struct PhasorVolume {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> depth_planes;  // strictly increasing, meters
  WallFrame wall;
  double pitch = 0.0;
  std::vector<Complex> v;  // (rows, cols, depth) with depth fastest

  Complex& at(std::size_t i, std::size_t j, std::size_t d) {
    return v[(i * cols + j) * depth_planes.size() + d];
  }
  const Complex& at(std::size_t i, std::size_t j, std::size_t d) const {
    return v[(i * cols + j) * depth_planes.size() + d];
  }

  /// World position of voxel (i, j, d): wall sample (i, j) pushed to the
  /// d-th depth plane along the wall normal.
  Vec3 voxel_center(std::size_t i, std::size_t j, std::size_t d) const {
    const double su = (static_cast<double>(j) - (static_cast<double>(cols) - 1.0) / 2.0) * pitch;
    const double sv = (static_cast<double>(i) - (static_cast<double>(rows) - 1.0) / 2.0) * pitch;
    return wall.point(su, sv) + wall.normal * depth_planes[d];
  }

  Tensor magnitude() const {
    Tensor t({rows, cols, depth_planes.size()});
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = std::abs(v[i]);
    return t;
  }
};

/// Per-pixel linear convolution along the time axis, "same" alignment:
/// out[b] = sum_k m[b-k] * w[k] over the centered kernel.
inline PhasorCube convolve_time(const Tensor& data, const IlluminationWave& wave) {
  if (data.rank() != 3) throw std::invalid_argument("expected (rows, cols, bins) tensor");
  const std::size_t rows = data.dim(0), cols = data.dim(1), bins = data.dim(2);
  if (wave.samples.size() > bins) throw std::invalid_argument("wave too long for the temporal range");

  PhasorCube out(rows, cols, bins);
  const auto radius = static_cast<std::ptrdiff_t>(wave.radius());
  parallel_for(rows * cols, [&](std::size_t p) {
    const double* h = data.data().data() + p * bins;
    Complex* o = out.v.data() + p * bins;
    for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(bins); ++b) {
      Complex acc(0.0, 0.0);
      for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        const std::ptrdiff_t src = b - k;
        if (src >= 0 && src < static_cast<std::ptrdiff_t>(bins))
          acc += h[src] * wave.samples[static_cast<std::size_t>(k + radius)];
      }
      o[b] = acc;
    }
  });
  return out;
}

inline PhasorCube convolve_time(const TransientMeasurement& m, const IlluminationWave& wave) {
  return convolve_time(m.data, wave);
}

namespace detail {

inline std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}

/// In-place 2D FFT on a rows x cols complex buffer.
inline void fft2d(std::vector<Complex>& buf, std::size_t rows, std::size_t cols, int sign) {
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_plan_mutex());
    plan = fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols),
                            reinterpret_cast<fftw_complex*>(buf.data()),
                            reinterpret_cast<fftw_complex*>(buf.data()), sign, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(fftw_plan_mutex());
    fftw_destroy_plan(plan);
  }
}

inline Complex rsd_kernel(double dx, double dy, double wavelength, double depth, double pitch) {
  const double r = std::sqrt(dx * dx + dy * dy + depth * depth);
  const double phase = 2.0 * std::numbers::pi * r / wavelength;
  return Complex(std::cos(phase), std::sin(phase)) * (pitch * pitch / r);
}

}  // namespace detail

/// Direct O(N^4) spherical-wave summation; the reference path for the
/// FFT-based operator.
inline ComplexImage rsd_propagate_direct(const ComplexImage& field, double pitch,
                                         double wavelength, double depth,
                                         bool conjugate = false) {
  if (!(pitch > 0.0) || !(wavelength > 0.0) || !(depth > 0.0))
    throw std::invalid_argument("rsd parameters must be positive");
  ComplexImage out(field.rows, field.cols);
  parallel_for(field.rows * field.cols, [&](std::size_t p) {
    const std::size_t pi = p / field.cols;
    const std::size_t pj = p % field.cols;
    Complex acc(0.0, 0.0);
    for (std::size_t qi = 0; qi < field.rows; ++qi)
      for (std::size_t qj = 0; qj < field.cols; ++qj) {
        const double dy = (static_cast<double>(pi) - static_cast<double>(qi)) * pitch;
        const double dx = (static_cast<double>(pj) - static_cast<double>(qj)) * pitch;
        Complex k = detail::rsd_kernel(dx, dy, wavelength, depth, pitch);
        if (conjugate) k = std::conj(k);
        acc += field.at(qi, qj) * k;
      }
    out.v[p] = acc;
  });
  return out;
}

/// Zero-padded FFT convolution with the same spherical-wave kernel.
/// `conjugate` applies the adjoint operator (the kernel is symmetric
/// under coordinate flip, so the adjoint is plain conjugation).
inline ComplexImage rsd_propagate(const ComplexImage& field, double pitch, double wavelength,
                                  double depth, bool conjugate = false) {
  if (!(pitch > 0.0) || !(wavelength > 0.0) || !(depth > 0.0))
    throw std::invalid_argument("rsd parameters must be positive");
  const std::size_t rows = field.rows, cols = field.cols;
  const std::size_t pr = 3 * rows - 2, pc = 3 * cols - 2;

  std::vector<Complex> fpad(pr * pc, Complex(0, 0));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) fpad[i * pc + j] = field.at(i, j);

  std::vector<Complex> kpad(pr * pc, Complex(0, 0));
  for (std::size_t i = 0; i < 2 * rows - 1; ++i)
    for (std::size_t j = 0; j < 2 * cols - 1; ++j) {
      const double dy = (static_cast<double>(i) - (static_cast<double>(rows) - 1.0)) * pitch;
      const double dx = (static_cast<double>(j) - (static_cast<double>(cols) - 1.0)) * pitch;
      Complex k = detail::rsd_kernel(dx, dy, wavelength, depth, pitch);
      kpad[i * pc + j] = conjugate ? std::conj(k) : k;
    }

  detail::fft2d(fpad, pr, pc, FFTW_FORWARD);
  detail::fft2d(kpad, pr, pc, FFTW_FORWARD);
  for (std::size_t i = 0; i < fpad.size(); ++i) fpad[i] *= kpad[i];
  detail::fft2d(fpad, pr, pc, FFTW_BACKWARD);
  const double scale = 1.0 / (static_cast<double>(pr) * static_cast<double>(pc));

  ComplexImage out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out.at(i, j) = fpad[(i + rows - 1) * pc + (j + cols - 1)] * scale;
  return out;
}

/// Focus a phasor cube onto depth planes: pick the round-trip
/// time slice t_z = 2z/c per plane and run RSD at the carrier wavelength.
inline PhasorVolume focus_phasor(const PhasorCube& cube, const ScanPattern& pattern,
                                 double wavelength, const std::vector<double>& depth_planes) {
  for (std::size_t d = 0; d + 1 < depth_planes.size(); ++d)
    if (!(depth_planes[d] < depth_planes[d + 1]))
      throw std::invalid_argument("depth planes must be strictly increasing");
  PhasorVolume vol;
  vol.rows = cube.rows;
  vol.cols = cube.cols;
  vol.depth_planes = depth_planes;
  vol.wall = pattern.wall;
  vol.pitch = pattern.pitch;
  vol.v.assign(cube.rows * cube.cols * depth_planes.size(), Complex(0, 0));

  const double c_dt = kSpeedOfLight * pattern.bin_width;
  parallel_for(depth_planes.size(), [&](std::size_t d) {
    const double z = depth_planes[d];
    if (!(z > 0.0)) throw std::invalid_argument("depth planes must be positive");
    const auto slice_bin = static_cast<std::ptrdiff_t>(std::llround(2.0 * z / c_dt));
    if (slice_bin < 0 || slice_bin >= static_cast<std::ptrdiff_t>(cube.bins))
      throw std::invalid_argument("depth plane outside the temporal range");

    ComplexImage slice(cube.rows, cube.cols);
    for (std::size_t p = 0; p < cube.rows * cube.cols; ++p)
      slice.v[p] = cube.v[p * cube.bins + static_cast<std::size_t>(slice_bin)];
    const ComplexImage focused = rsd_propagate(slice, pattern.pitch, wavelength, z);
    for (std::size_t p = 0; p < cube.rows * cube.cols; ++p)
      vol.v[p * depth_planes.size() + d] = focused.v[p];
  });
  return vol;
}

struct RsdResult {
  PhasorVolume volume;
  Tensor intensity;  // |volume|
};

/// Full inverse-propagation pipeline: illumination-wave convolution,
/// then per-plane RSD focusing. The laser-to-scene leg is absorbed by
/// the round-trip slice convention, which holds exactly for confocal
/// scans and paraxially for the wall-center laser.
inline RsdResult reconstruct_rsd(const TransientMeasurement& m, const IlluminationWave& wave,
                                 const std::vector<double>& depth_planes) {
  m.validate();
  const PhasorCube phasor = convolve_time(m, wave);
  PhasorVolume vol = focus_phasor(phasor, m.pattern, wave.center_wavelength, depth_planes);
  Tensor intensity = vol.magnitude();
  return {std::move(vol), std::move(intensity)};
}

/// Voxel grid for back-projection volumes.
struct VolumeGrid {
  Aabb bounds;
  std::size_t nx = 0, ny = 0, nz = 0;

  Vec3 cell() const {
    const Vec3 e = bounds.extent();
    return {e.x / static_cast<double>(nx), e.y / static_cast<double>(ny),
            e.z / static_cast<double>(nz)};
  }
  Vec3 center(std::size_t ix, std::size_t iy, std::size_t iz) const {
    const Vec3 c = cell();
    return bounds.min + Vec3{(static_cast<double>(ix) + 0.5) * c.x,
                             (static_cast<double>(iy) + 0.5) * c.y,
                             (static_cast<double>(iz) + 0.5) * c.z};
  }
  /// Index triple of the voxel containing p, clamped to the grid.
  std::array<std::size_t, 3> locate(const Vec3& p) const {
    const Vec3 c = cell();
    auto clampi = [](double v, std::size_t n) {
      const auto i = static_cast<std::ptrdiff_t>(std::floor(v));
      return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
    };
    return {clampi((p.x - bounds.min.x) / c.x, nx), clampi((p.y - bounds.min.y) / c.y, ny),
            clampi((p.z - bounds.min.z) / c.z, nz)};
  }
};

/// Unfiltered elliptical back-projection: smear every histogram bin over
/// the voxels whose two-segment path falls into it.
inline Tensor backproject(const TransientMeasurement& m, const VolumeGrid& grid) {
  m.validate();
  const auto& p = m.pattern;
  Tensor vol({grid.nx, grid.ny, grid.nz});
  const double c_dt = kSpeedOfLight * p.bin_width;

  parallel_for(grid.nx, [&](std::size_t ix) {
    for (std::size_t iy = 0; iy < grid.ny; ++iy)
      for (std::size_t iz = 0; iz < grid.nz; ++iz) {
        const Vec3 x = grid.center(ix, iy, iz);
        double acc = 0.0;
        for (std::size_t i = 0; i < p.rows; ++i)
          for (std::size_t j = 0; j < p.cols; ++j) {
            const double path = distance(p.laser_at(i, j), x) + distance(p.sensor_at(i, j), x);
            const auto bin = static_cast<std::size_t>(path / c_dt);
            if (bin < p.bins) acc += m.data(i, j, bin);
          }
        vol(ix, iy, iz) = acc;
      }
  });
  return vol;
}

}  // namespace nlos::wave
