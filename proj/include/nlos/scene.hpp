// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlos/vec3.hpp"

namespace nlos {

/// Axis-aligned bounding box in meters.
struct Aabb {
  Vec3 min;
  Vec3 max;

  bool valid() const { return min.x < max.x && min.y < max.y && min.z < max.z; }
  bool contains(const Vec3& p, double tol = 1e-9) const {
    return p.x >= min.x - tol && p.x <= max.x + tol && p.y >= min.y - tol && p.y <= max.y + tol &&
           p.z >= min.z - tol && p.z <= max.z + tol;
  }
  Vec3 extent() const { return max - min; }
  Vec3 center() const { return (min + max) * 0.5; }
};

/// Origin and orthonormal basis of the relay-wall plane. u/v span the
/// wall, normal points into the hidden volume.
struct WallFrame {
  Vec3 origin{0, 0, 0};
  Vec3 u{1, 0, 0};
  Vec3 v{0, 1, 0};
  Vec3 normal{0, 0, 1};

  void validate() const {
    if (!u.is_unit(1e-9) || !v.is_unit(1e-9) || !normal.is_unit(1e-9))
      throw std::invalid_argument("wall frame basis must be unit length");
    if (std::abs(dot(u, v)) > 1e-9 || std::abs(dot(u, normal)) > 1e-9 ||
        std::abs(dot(v, normal)) > 1e-9)
      throw std::invalid_argument("wall frame basis must be orthogonal");
  }

  Vec3 point(double su, double sv) const { return origin + u * su + v * sv; }
};

/// One pre-sampled patch of the hidden surface.
struct Surfel {
  Vec3 position;
  Vec3 normal;
  double area = 0.0;    // m^2
  double albedo = 1.0;  // Lambertian reflectance in [0,1]
};

/// Hidden scene as surfel samples plus the relay-wall frame.
struct Scene {
  std::vector<Surfel> samples;
  WallFrame wall;
  Aabb bbox;

  void validate(double normal_tol = 1e-6) const {
    wall.validate();
    if (!bbox.valid()) throw std::invalid_argument("scene bbox is degenerate");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Surfel& s = samples[i];
      if (!s.position.is_finite()) throw std::invalid_argument("surfel position not finite");
      if (!bbox.contains(s.position, 1e-9))
        throw std::invalid_argument("surfel " + std::to_string(i) + " outside scene bbox");
      if (!s.normal.is_unit(normal_tol))
        throw std::invalid_argument("surfel " + std::to_string(i) + " has non-unit normal");
      if (!(s.area > 0.0)) throw std::invalid_argument("surfel area must be positive");
      if (s.albedo < 0.0 || s.albedo > 1.0)
        throw std::invalid_argument("surfel albedo must lie in [0,1]");
    }
  }
};

namespace detail {

inline Vec3 vec3_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("expected 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline nlohmann::json vec3_to_json(const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); }

}  // namespace detail

inline nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json j;
  j["wall"] = {{"origin", detail::vec3_to_json(scene.wall.origin)},
               {"u", detail::vec3_to_json(scene.wall.u)},
               {"v", detail::vec3_to_json(scene.wall.v)},
               {"normal", detail::vec3_to_json(scene.wall.normal)}};
  j["bbox"] = {{"min", detail::vec3_to_json(scene.bbox.min)},
               {"max", detail::vec3_to_json(scene.bbox.max)}};
  auto arr = nlohmann::json::array();
  for (const Surfel& s : scene.samples) {
    arr.push_back({{"position", detail::vec3_to_json(s.position)},
                   {"normal", detail::vec3_to_json(s.normal)},
                   {"area", s.area},
                   {"albedo", s.albedo}});
  }
  j["samples"] = std::move(arr);
  return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  Scene scene;
  const auto& w = j.at("wall");
  scene.wall.origin = detail::vec3_from_json(w.at("origin"));
  scene.wall.u = detail::vec3_from_json(w.at("u"));
  scene.wall.v = detail::vec3_from_json(w.at("v"));
  scene.wall.normal = detail::vec3_from_json(w.at("normal"));
  scene.bbox.min = detail::vec3_from_json(j.at("bbox").at("min"));
  scene.bbox.max = detail::vec3_from_json(j.at("bbox").at("max"));
  for (const auto& s : j.at("samples")) {
    Surfel surf;
    surf.position = detail::vec3_from_json(s.at("position"));
    surf.normal = detail::vec3_from_json(s.at("normal")).normalized();
    surf.area = s.at("area").get<double>();
    surf.albedo = s.at("albedo").get<double>();
    scene.samples.push_back(surf);
  }
  scene.validate();
  return scene;
}

inline Scene load_scene(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open scene file: " + path.string());
  nlohmann::json j;
  is >> j;
  return scene_from_json(j);
}

inline void save_scene(const std::filesystem::path& path, const Scene& scene) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open scene file for writing: " + path.string());
  os << scene_to_json(scene).dump(2) << "\n";
}

}  // namespace nlos
