// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlos/io.hpp"
#include "nlos/scene.hpp"
#include "nlos/tensor.hpp"
#include "nlos/vec3.hpp"

namespace nlos {

enum class ScanKind { kConfocal, kNonconfocal };

inline std::string to_string(ScanKind k) {
  return k == ScanKind::kConfocal ? "confocal" : "nonconfocal";
}

inline ScanKind scan_kind_from_string(const std::string& s) {
  if (s == "confocal") return ScanKind::kConfocal;
  if (s == "nonconfocal") return ScanKind::kNonconfocal;
  throw std::invalid_argument("unknown scan kind: " + s);
}

/// Wall-scan geometry and temporal binning of one acquisition.
///
/// Non-confocal scans share one virtual laser spot (the wall center by
/// convention); confocal scans co-locate laser and sensor per pixel.
/// origin_laser/origin_sensor record the physical device positions but
/// carry no radiometry.
struct ScanPattern {
  ScanKind kind = ScanKind::kNonconfocal;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Vec3> grid;  // rows*cols wall points, row-major
  Vec3 laser;              // shared virtual laser for nonconfocal scans
  std::size_t bins = 0;
  double bin_width = 0.0;  // seconds
  WallFrame wall;
  double pitch = 0.0;  // wall sample spacing, meters
  Vec3 origin_laser{0, 0, -1};
  Vec3 origin_sensor{0, 0, -1};

  const Vec3& sensor_at(std::size_t i, std::size_t j) const { return grid[i * cols + j]; }

  Vec3 laser_at(std::size_t i, std::size_t j) const {
    return kind == ScanKind::kConfocal ? sensor_at(i, j) : laser;
  }

  void validate() const {
    if (rows == 0 || cols == 0 || grid.size() != rows * cols)
      throw std::invalid_argument("scan grid dims mismatch");
    if (!(bin_width > 0.0)) throw std::invalid_argument("bin width must be positive");
    if (bins == 0) throw std::invalid_argument("bin count must be positive");
    if (!(pitch > 0.0)) throw std::invalid_argument("wall pitch must be positive");
    wall.validate();
  }
};

/// Build a centered rows x cols scan over a rectangular wall patch.
/// extent is the full side length in meters; the sample pitch is
/// extent / cols (square pixels assumed, rows scaled accordingly).
inline ScanPattern make_scan_pattern(ScanKind kind, const WallFrame& wall, double extent,
                                     std::size_t rows, std::size_t cols, std::size_t bins,
                                     double bin_width) {
  ScanPattern p;
  p.kind = kind;
  p.rows = rows;
  p.cols = cols;
  p.bins = bins;
  p.bin_width = bin_width;
  p.wall = wall;
  p.pitch = extent / static_cast<double>(cols);
  p.grid.reserve(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double sv = (static_cast<double>(i) - (static_cast<double>(rows) - 1.0) / 2.0) * p.pitch;
    for (std::size_t j = 0; j < cols; ++j) {
      const double su =
          (static_cast<double>(j) - (static_cast<double>(cols) - 1.0) / 2.0) * p.pitch;
      p.grid.push_back(wall.point(su, sv));
    }
  }
  p.laser = wall.origin;  // fixed virtual laser at the wall center
  p.validate();
  return p;
}

inline nlohmann::json scan_pattern_to_json(const ScanPattern& p) {
  nlohmann::json j;
  j["kind"] = to_string(p.kind);
  j["rows"] = p.rows;
  j["cols"] = p.cols;
  j["bins"] = p.bins;
  j["bin_width"] = p.bin_width;
  j["pitch"] = p.pitch;
  j["laser"] = detail::vec3_to_json(p.laser);
  j["origin_laser"] = detail::vec3_to_json(p.origin_laser);
  j["origin_sensor"] = detail::vec3_to_json(p.origin_sensor);
  j["wall"] = {{"origin", detail::vec3_to_json(p.wall.origin)},
               {"u", detail::vec3_to_json(p.wall.u)},
               {"v", detail::vec3_to_json(p.wall.v)},
               {"normal", detail::vec3_to_json(p.wall.normal)}};
  auto g = nlohmann::json::array();
  for (const Vec3& s : p.grid) g.push_back(detail::vec3_to_json(s));
  j["grid"] = std::move(g);
  return j;
}

inline ScanPattern scan_pattern_from_json(const nlohmann::json& j) {
  ScanPattern p;
  p.kind = scan_kind_from_string(j.at("kind").get<std::string>());
  p.rows = j.at("rows").get<std::size_t>();
  p.cols = j.at("cols").get<std::size_t>();
  p.bins = j.at("bins").get<std::size_t>();
  p.bin_width = j.at("bin_width").get<double>();
  p.pitch = j.at("pitch").get<double>();
  p.laser = detail::vec3_from_json(j.at("laser"));
  if (j.contains("origin_laser")) p.origin_laser = detail::vec3_from_json(j.at("origin_laser"));
  if (j.contains("origin_sensor")) p.origin_sensor = detail::vec3_from_json(j.at("origin_sensor"));
  const auto& w = j.at("wall");
  p.wall.origin = detail::vec3_from_json(w.at("origin"));
  p.wall.u = detail::vec3_from_json(w.at("u"));
  p.wall.v = detail::vec3_from_json(w.at("v"));
  p.wall.normal = detail::vec3_from_json(w.at("normal"));
  for (const auto& s : j.at("grid")) p.grid.push_back(detail::vec3_from_json(s));
  p.validate();
  return p;
}

/// Time-resolved wall measurement: rows x cols x bins of per-bin photon
/// rates or sampled counts.
struct TransientMeasurement {
  ScanPattern pattern;
  Tensor data;  // (rows, cols, bins)
  int channels = 1;
  bool is_counts = false;

  void validate() const {
    pattern.validate();
    if (channels != 1)
      throw std::invalid_argument("only single-channel measurements are supported");
    if (data.rank() != 3 || data.dim(0) != pattern.rows || data.dim(1) != pattern.cols ||
        data.dim(2) != pattern.bins)
      throw std::invalid_argument("measurement dims do not match scan pattern");
    for (double v : data.data())
      if (!(v >= 0.0)) throw std::invalid_argument("measurement values must be nonnegative");
  }
};

inline void save_measurement(const std::filesystem::path& path, const TransientMeasurement& m,
                             MetaMap extra = {}) {
  MetaMap meta = std::move(extra);
  meta["kind"] = m.is_counts ? "counts" : "rate";
  meta["pattern"] = scan_pattern_to_json(m.pattern).dump();
  meta["bin_width"] = std::to_string(m.pattern.bin_width);
  meta["c"] = "299792458";
  meta["channels"] = std::to_string(m.channels);
  write_tensor(path, m.data, meta);
}

inline TransientMeasurement load_measurement(const std::filesystem::path& path) {
  auto [data, meta] = read_tensor(path);
  TransientMeasurement m;
  if (!meta.count("pattern")) throw std::runtime_error("measurement file missing pattern metadata");
  m.pattern = scan_pattern_from_json(nlohmann::json::parse(meta.at("pattern")));
  m.data = std::move(data);
  m.is_counts = meta.count("kind") && meta.at("kind") == "counts";
  if (meta.count("channels")) m.channels = std::stoi(meta.at("channels"));
  m.validate();
  return m;
}

/// Camera for steady-state rendering. The orthographic-frontal kind
/// looks down the wall normal at the hidden volume.
struct Camera {
  enum class Kind { kOrthographicFrontal, kPerspective };

  Kind kind = Kind::kOrthographicFrontal;
  Vec3 position{0, 0, 0};
  Vec3 right{1, 0, 0};
  Vec3 up{0, 1, 0};
  Vec3 forward{0, 0, 1};
  std::size_t width = 0;
  std::size_t height = 0;
  double extent_x = 1.0;  // orthographic film width, meters
  double extent_y = 1.0;
  double fov_y = 0.7;  // perspective vertical field of view, radians

  void validate() const {
    if (width == 0 || height == 0) throw std::invalid_argument("camera dims must be positive");
    if (!right.is_unit(1e-9) || !up.is_unit(1e-9) || !forward.is_unit(1e-9) ||
        std::abs(dot(right, up)) > 1e-9 || std::abs(dot(right, forward)) > 1e-9 ||
        std::abs(dot(up, forward)) > 1e-9)
      throw std::invalid_argument("camera orientation must be orthonormal");
  }

  struct Ray {
    Vec3 origin;
    Vec3 dir;
  };

  /// Ray through pixel (i, j); i is the row from the image top.
  Ray ray(std::size_t i, std::size_t j) const {
    const double px = (static_cast<double>(j) + 0.5) / static_cast<double>(width) - 0.5;
    const double py = 0.5 - (static_cast<double>(i) + 0.5) / static_cast<double>(height);
    if (kind == Kind::kOrthographicFrontal) {
      return {position + right * (px * extent_x) + up * (py * extent_y), forward};
    }
    const double tan_half = std::tan(fov_y / 2.0);
    const double aspect = static_cast<double>(width) / static_cast<double>(height);
    const Vec3 d =
        (forward + right * (2.0 * px * tan_half * aspect) + up * (2.0 * py * tan_half))
            .normalized();
    return {position, d};
  }
};

inline nlohmann::json camera_to_json(const Camera& cam) {
  nlohmann::json j;
  j["kind"] = cam.kind == Camera::Kind::kOrthographicFrontal ? "ortho" : "perspective";
  j["position"] = detail::vec3_to_json(cam.position);
  j["right"] = detail::vec3_to_json(cam.right);
  j["up"] = detail::vec3_to_json(cam.up);
  j["forward"] = detail::vec3_to_json(cam.forward);
  j["width"] = cam.width;
  j["height"] = cam.height;
  j["extent"] = {cam.extent_x, cam.extent_y};
  j["fov_y"] = cam.fov_y;
  return j;
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera cam;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "ortho") {
    cam.kind = Camera::Kind::kOrthographicFrontal;
  } else if (kind == "perspective") {
    cam.kind = Camera::Kind::kPerspective;
  } else {
    throw std::invalid_argument("unknown camera kind: " + kind);
  }
  cam.position = detail::vec3_from_json(j.at("position"));
  cam.right = detail::vec3_from_json(j.at("right")).normalized();
  cam.up = detail::vec3_from_json(j.at("up")).normalized();
  cam.forward = detail::vec3_from_json(j.at("forward")).normalized();
  cam.width = j.at("width").get<std::size_t>();
  cam.height = j.at("height").get<std::size_t>();
  if (j.contains("extent")) {
    cam.extent_x = j.at("extent")[0].get<double>();
    cam.extent_y = j.at("extent")[1].get<double>();
  }
  if (j.contains("fov_y")) cam.fov_y = j.at("fov_y").get<double>();
  cam.validate();
  return cam;
}

/// Perspective camera at `position` aimed at `target`.
inline Camera make_look_at_camera(const Vec3& position, const Vec3& target, std::size_t width,
                                  std::size_t height, double fov_y) {
  Camera cam;
  cam.kind = Camera::Kind::kPerspective;
  cam.position = position;
  cam.forward = (target - position).normalized();
  Vec3 up{0, 1, 0};
  if (std::abs(dot(up, cam.forward)) > 0.99) up = {1, 0, 0};
  cam.right = cross(cam.forward, up).normalized();
  cam.up = cross(cam.right, cam.forward).normalized();
  cam.width = width;
  cam.height = height;
  cam.fov_y = fov_y;
  cam.validate();
  return cam;
}

/// Frontal orthographic camera covering the given bbox, looking along +n
/// from just outside the proximal face.
inline Camera make_frontal_camera(const Aabb& bbox, std::size_t width, std::size_t height) {
  Camera cam;
  cam.kind = Camera::Kind::kOrthographicFrontal;
  const Vec3 c = bbox.center();
  cam.position = {c.x, c.y, bbox.min.z - 0.01};
  cam.right = {1, 0, 0};
  cam.up = {0, 1, 0};
  cam.forward = {0, 0, 1};
  cam.width = width;
  cam.height = height;
  cam.extent_x = bbox.extent().x;
  cam.extent_y = bbox.extent().y;
  cam.validate();
  return cam;
}

}  // namespace nlos
