// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <vector>

#include <png.h>

#include "nlos/tensor.hpp"

namespace nlos::img {

/// Write a 2D tensor as an 8-bit grayscale PNG: values are scaled by the
/// image maximum and gamma-encoded at 1/2.2 for inspection.
inline void write_png_gray(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 2) throw std::invalid_argument("png export expects a 2d tensor");
  const std::size_t h = image.dim(0), w = image.dim(1);

  double peak = 0.0;
  for (double v : image.data()) peak = std::max(peak, v);
  std::vector<unsigned char> bytes(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double v = peak > 0.0 ? std::max(0.0, image[i]) / peak : 0.0;
    bytes[i] = static_cast<unsigned char>(std::lround(255.0 * std::pow(v, 1.0 / 2.2)));
  }

  std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.string().c_str(), "wb"),
                                                     &std::fclose);
  if (!fp) throw std::runtime_error("cannot open png for writing: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t i = 0; i < h; ++i)
    png_write_row(png, reinterpret_cast<png_bytep>(bytes.data() + i * w));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Max-intensity projection of a (nx, ny, nz) volume along its last
/// axis, oriented like a frontal image (rows run down the y axis).
inline Tensor frontal_max_projection(const Tensor& volume) {
  if (volume.rank() != 3) throw std::invalid_argument("expected a 3d volume");
  const std::size_t nx = volume.dim(0), ny = volume.dim(1), nz = volume.dim(2);
  Tensor image({ny, nx});
  for (std::size_t ix = 0; ix < nx; ++ix)
    for (std::size_t iy = 0; iy < ny; ++iy) {
      double best = 0.0;
      for (std::size_t iz = 0; iz < nz; ++iz) best = std::max(best, volume(ix, iy, iz));
      image(ny - 1 - iy, ix) = best;
    }
  return image;
}

}  // namespace nlos::img
