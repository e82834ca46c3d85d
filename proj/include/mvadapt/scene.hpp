#pragma once

// Synthetic scenes: a few analytic primitives on a textured ground plane,
// seen by cameras on a jittered orbit. Appearance is a procedural 3D value
// noise evaluated at the hit point, so one 3D point has one color in every
// view and correspondences are exact.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mvadapt/camera.hpp"
#include "mvadapt/config.hpp"
#include "mvadapt/error.hpp"
#include "mvadapt/rng.hpp"
#include "json.hpp"

namespace mvadapt {

// Base spatial frequency of the value noise, in cycles per world unit.
inline constexpr double kDefaultTextureFrequency = 0.6;

// Finite rectangle through `center`, spanned by unit axes u and normal x u.
struct Plane {
  Vec3 center = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  Vec3 axis_u = Vec3::UnitX();
  double half_u = 1, half_v = 1;
};

struct Sphere {
  Vec3 center = Vec3::Zero();
  double radius = 1;
};

// Axis-aligned box.
struct Box {
  Vec3 center = Vec3::Zero();
  Vec3 half = Vec3::Ones();
};

using Surface = std::variant<Plane, Sphere, Box>;

struct Scene {
  std::vector<Surface> surfaces;
  std::uint64_t texture_seed = 0;
  double texture_frequency = kDefaultTextureFrequency;
  bool lambertian = false;
  std::vector<CameraView> cameras;
};

struct Hit {
  double t = 0;
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  std::size_t surface = 0;
};

namespace detail {

constexpr double kRayEps = 1e-9;

inline std::optional<Hit> intersect(const Plane& p, const Ray& r) {
  const double den = p.normal.dot(r.direction);
  if (std::abs(den) < 1e-12) return std::nullopt;
  const double t = p.normal.dot(p.center - r.origin) / den;
  if (t <= kRayEps) return std::nullopt;
  const Vec3 x = r.origin + t * r.direction;
  const Vec3 axis_v = p.normal.cross(p.axis_u);
  const Vec3 rel = x - p.center;
  if (std::abs(rel.dot(p.axis_u)) > p.half_u || std::abs(rel.dot(axis_v)) > p.half_v) return std::nullopt;
  return Hit{t, x, p.normal, 0};
}

inline std::optional<Hit> intersect(const Sphere& s, const Ray& r) {
  const Vec3 oc = r.origin - s.center;
  const double b = oc.dot(r.direction);
  const double c = oc.squaredNorm() - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0) return std::nullopt;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t <= kRayEps) t = -b + sq;
  if (t <= kRayEps) return std::nullopt;
  const Vec3 x = r.origin + t * r.direction;
  return Hit{t, x, (x - s.center).normalized(), 0};
}

inline std::optional<Hit> intersect(const Box& b, const Ray& r) {
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  int axis0 = -1, axis1 = -1;
  for (int a = 0; a < 3; ++a) {
    const double lo = b.center[a] - b.half[a], hi = b.center[a] + b.half[a];
    if (std::abs(r.direction[a]) < 1e-15) {
      if (r.origin[a] < lo || r.origin[a] > hi) return std::nullopt;
      continue;
    }
    double ta = (lo - r.origin[a]) / r.direction[a], tb = (hi - r.origin[a]) / r.direction[a];
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      axis0 = a;
    }
    if (tb < t1) {
      t1 = tb;
      axis1 = a;
    }
    if (t0 > t1) return std::nullopt;
  }
  double t = t0;
  int axis = axis0;
  if (t <= kRayEps) {
    t = t1;
    axis = axis1;
  }
  if (t <= kRayEps || axis < 0) return std::nullopt;
  const Vec3 x = r.origin + t * r.direction;
  Vec3 n = Vec3::Zero();
  n[axis] = x[axis] > b.center[axis] ? 1.0 : -1.0;
  return Hit{t, x, n, 0};
}

// Hash of an integer lattice point to [0, 1).
inline double lattice_value(std::int64_t x, std::int64_t y, std::int64_t z, std::uint64_t key) {
  std::uint64_t h = splitmix64(key ^ static_cast<std::uint64_t>(x));
  h = splitmix64(h ^ static_cast<std::uint64_t>(y));
  h = splitmix64(h ^ static_cast<std::uint64_t>(z));
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

inline double value_noise(const Vec3& p, std::uint64_t key) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy), iz = static_cast<std::int64_t>(fz);
  auto fade = [](double t) { return t * t * (3.0 - 2.0 * t); };
  const double tx = fade(p.x() - fx), ty = fade(p.y() - fy), tz = fade(p.z() - fz);
  double acc = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
        acc += w * lattice_value(ix + dx, iy + dy, iz + dz, key);
      }
  return acc;
}

}  // namespace detail

// Nearest intersection with any surface.
inline std::optional<Hit> cast_ray(const Scene& scene, const Ray& ray) {
  std::optional<Hit> best;
  for (std::size_t i = 0; i < scene.surfaces.size(); ++i) {
    auto h = std::visit([&](const auto& s) { return detail::intersect(s, ray); }, scene.surfaces[i]);
    if (h && (!best || h->t < best->t)) {
      h->surface = i;
      best = h;
    }
  }
  return best;
}

// Three-octave trilinear value noise per channel, in [0, 1].
inline std::array<float, 3> texture_color(const Scene& scene, const Vec3& p) {
  std::array<float, 3> rgb{};
  for (int ch = 0; ch < 3; ++ch) {
    double acc = 0, amp = 0.5, norm = 0, freq = scene.texture_frequency;
    for (int oct = 0; oct < 3; ++oct) {
      const std::uint64_t key = derive_seed(scene.texture_seed, "texture", static_cast<std::uint64_t>(ch * 8 + oct));
      acc += amp * detail::value_noise(p * freq, key);
      norm += amp;
      amp *= 0.5;
      freq *= 2.0;
    }
    rgb[static_cast<std::size_t>(ch)] = static_cast<float>(acc / norm);
  }
  return rgb;
}

struct Image {
  int width = 0, height = 0;
  std::vector<float> data;  // height * width * 3, interleaved RGB

  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

inline constexpr float kBackground = 0.5f;

// Color seen along one ray.
inline std::array<float, 3> shade(const Scene& scene, const Ray& ray) {
  const auto hit = cast_ray(scene, ray);
  if (!hit) return {kBackground, kBackground, kBackground};
  auto c = texture_color(scene, hit->point);
  if (scene.lambertian) {
    const Vec3 light = Vec3(0.3, -0.5, 0.8).normalized();
    const double k = 0.3 + 0.7 * std::max(0.0, hit->normal.dot(light));
    for (auto& v : c) v = static_cast<float>(v * k);
  }
  return c;
}

inline Image render_view(const Scene& scene, const CameraView& camera, int width, int height) {
  camera.validate();
  Image img{width, height, std::vector<float>(static_cast<std::size_t>(width) * height * 3)};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const auto c = shade(scene, pixel_ray(camera, (x + 0.5) / width, (y + 0.5) / height));
      std::copy(c.begin(), c.end(), img.data.begin() + (static_cast<std::ptrdiff_t>(y) * width + x) * 3);
    }
  return img;
}

inline Image render_view(const Scene& scene, const CameraView& camera) {
  return render_view(scene, camera, camera.width, camera.height);
}

// Outward unit normal of the surface containing `point` (within 1e-4).
inline Vec3 analytic_normal(const Scene& scene, const Vec3& point) {
  constexpr double tol = 1e-4;
  double best = tol;
  std::optional<Vec3> normal;
  for (const auto& s : scene.surfaces) {
    std::visit(
        [&](const auto& p) {
          using S = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<S, Plane>) {
            const Vec3 rel = point - p.center;
            const double d = std::abs(rel.dot(p.normal));
            const Vec3 axis_v = p.normal.cross(p.axis_u);
            if (d <= best && std::abs(rel.dot(p.axis_u)) <= p.half_u + tol && std::abs(rel.dot(axis_v)) <= p.half_v + tol) {
              best = d;
              normal = p.normal;
            }
          } else if constexpr (std::is_same_v<S, Sphere>) {
            const double d = std::abs((point - p.center).norm() - p.radius);
            if (d <= best) {
              best = d;
              normal = (point - p.center).normalized();
            }
          } else {
            const Vec3 rel = point - p.center;
            if ((rel.cwiseAbs() - p.half).maxCoeff() > tol) return;
            for (int a = 0; a < 3; ++a) {
              const double d = std::abs(std::abs(rel[a]) - p.half[a]);
              if (d <= best) {
                best = d;
                Vec3 n = Vec3::Zero();
                n[a] = rel[a] > 0 ? 1.0 : -1.0;
                normal = n;
              }
            }
          }
        },
        s);
  }
  if (!normal) throw NumericalError("analytic_normal: point is not on any surface");
  return *normal;
}

struct Correspondence {
  std::size_t view_i = 0, view_j = 0;
  Vec2 x_i = Vec2::Zero(), x_j = Vec2::Zero();
  Vec3 point = Vec3::Zero();
};

inline constexpr double kDepthTestEps = 1e-4;

// True when the first surface hit from `camera` toward `point` is `point`.
inline bool visible_from(const Scene& scene, const CameraView& camera, const Vec3& point) {
  const auto proj = project(camera, point);
  if (!proj.in_frame()) return false;
  const Vec3 to = point - camera.t;
  const double dist = to.norm();
  const auto hit = cast_ray(scene, Ray{camera.t, to / dist});
  return hit && std::abs(hit->t - dist) <= kDepthTestEps;
}

// Raised when fewer than k correspondences were found within the budget.
class InsufficientOverlap : public Error {
 public:
  InsufficientOverlap(std::size_t found, std::size_t wanted)
      : Error("sample_correspondences: found " + std::to_string(found) + " of " + std::to_string(wanted) +
              " correspondences within budget"),
        found_(found) {}
  std::size_t found() const { return found_; }

 private:
  std::size_t found_;
};

// Rejection-samples k points seen by both views. `budget` caps ray casts from view i.
inline std::vector<Correspondence> sample_correspondences(const Scene& scene, std::size_t view_i, std::size_t view_j,
                                                          std::size_t k, std::uint64_t seed, std::size_t budget = 0) {
  if (k < 1) throw ConfigError("k", "must be >= 1");
  if (view_i >= scene.cameras.size() || view_j >= scene.cameras.size()) throw ConfigError("view", "index out of range");
  if (budget == 0) budget = std::max<std::size_t>(256, 64 * k);
  const CameraView& ci = scene.cameras[view_i];
  const CameraView& cj = scene.cameras[view_j];
  Rng rng(seed);
  std::vector<Correspondence> out;
  for (std::size_t n = 0; n < budget && out.size() < k; ++n) {
    const Vec2 xi(uniform(rng, 0, 1), uniform(rng, 0, 1));
    const auto hit = cast_ray(scene, pixel_ray(ci, xi.x(), xi.y()));
    if (!hit) continue;
    if (!visible_from(scene, cj, hit->point)) continue;
    out.push_back({view_i, view_j, xi, project(cj, hit->point).uv, hit->point});
  }
  if (out.size() < k) throw InsufficientOverlap(out.size(), k);
  return out;
}

struct SceneConfig {
  std::size_t n_surfaces = 4;  // ground plane included
  std::size_t n_cameras = 12;
  double orbit_radius = 4.5;
  double fov_deg = 60.0;
  int image_size = 64;
  double min_elevation_deg = 25.0, max_elevation_deg = 50.0;
  double ground_half_extent = 3.0;
  double texture_frequency = kDefaultTextureFrequency;
  bool lambertian = false;
  std::size_t max_retries = 16;
};

inline void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = {{"n_surfaces", c.n_surfaces},
       {"n_cameras", c.n_cameras},
       {"orbit_radius", c.orbit_radius},
       {"fov_deg", c.fov_deg},
       {"image_size", c.image_size},
       {"min_elevation_deg", c.min_elevation_deg},
       {"max_elevation_deg", c.max_elevation_deg},
       {"ground_half_extent", c.ground_half_extent},
       {"texture_frequency", c.texture_frequency},
       {"lambertian", c.lambertian},
       {"max_retries", c.max_retries}};
}

inline void from_json(const nlohmann::json& j, SceneConfig& c) {
  check_keys(j, {"n_surfaces", "n_cameras", "orbit_radius", "fov_deg", "image_size", "min_elevation_deg",
                 "max_elevation_deg", "ground_half_extent", "texture_frequency", "lambertian", "max_retries"});
  read_field(j, "n_surfaces", c.n_surfaces);
  read_field(j, "n_cameras", c.n_cameras);
  read_field(j, "orbit_radius", c.orbit_radius);
  read_field(j, "fov_deg", c.fov_deg);
  read_field(j, "image_size", c.image_size);
  read_field(j, "min_elevation_deg", c.min_elevation_deg);
  read_field(j, "max_elevation_deg", c.max_elevation_deg);
  read_field(j, "ground_half_extent", c.ground_half_extent);
  read_field(j, "texture_frequency", c.texture_frequency);
  read_field(j, "lambertian", c.lambertian);
  read_field(j, "max_retries", c.max_retries);
  if (!(c.orbit_radius > 0)) throw ConfigError("orbit_radius", "must be > 0");
  if (!(c.fov_deg > 0 && c.fov_deg < 180)) throw ConfigError("fov_deg", "must be in (0, 180)");
  if (c.image_size < 8) throw ConfigError("image_size", "must be >= 8");
  if (!(c.texture_frequency > 0)) throw ConfigError("texture_frequency", "must be > 0");
  if (c.max_retries < 1) throw ConfigError("max_retries", "must be >= 1");
}

namespace detail {

inline bool sees_something(const Scene& scene, const CameraView& cam) {
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      if (cast_ray(scene, pixel_ray(cam, (x + 0.5) / 8, (y + 0.5) / 8))) return true;
  return false;
}

inline Scene generate_scene_attempt(std::uint64_t seed, const SceneConfig& cfg) {
  Rng rng(seed);
  Scene scene;
  scene.texture_seed = derive_seed(seed, "texture-seed");
  scene.texture_frequency = cfg.texture_frequency;
  scene.lambertian = cfg.lambertian;
  scene.surfaces.push_back(Plane{Vec3::Zero(), Vec3::UnitZ(), Vec3::UnitX(), cfg.ground_half_extent, cfg.ground_half_extent});
  Vec3 centroid = Vec3::Zero();
  for (std::size_t i = 1; i < cfg.n_surfaces; ++i) {
    const double ang = uniform(rng, 0, 2 * std::numbers::pi), rad = uniform(rng, 0.3, 1.8);
    const double x = rad * std::cos(ang), y = rad * std::sin(ang);
    if (uniform(rng, 0, 1) < 0.5) {
      const double r = uniform(rng, 0.35, 0.8);
      scene.surfaces.push_back(Sphere{Vec3(x, y, r * uniform(rng, 0.6, 1.2)), r});
      centroid += std::get<Sphere>(scene.surfaces.back()).center;
    } else {
      const Vec3 half(uniform(rng, 0.25, 0.7), uniform(rng, 0.25, 0.7), uniform(rng, 0.25, 0.8));
      scene.surfaces.push_back(Box{Vec3(x, y, half.z()), half});
      centroid += std::get<Box>(scene.surfaces.back()).center;
    }
  }
  if (cfg.n_surfaces > 1) centroid /= static_cast<double>(cfg.n_surfaces - 1);
  centroid.z() = 0.3;

  const double step = 2 * std::numbers::pi / static_cast<double>(cfg.n_cameras);
  const double az0 = uniform(rng, 0, 2 * std::numbers::pi);
  for (std::size_t k = 0; k < cfg.n_cameras; ++k) {
    const double az = az0 + step * static_cast<double>(k) + uniform(rng, -0.25, 0.25) * step;
    const double el = uniform(rng, cfg.min_elevation_deg, cfg.max_elevation_deg) * std::numbers::pi / 180.0;
    const double r = cfg.orbit_radius * uniform(rng, 0.9, 1.1);
    const Vec3 eye = centroid + r * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    const Vec3 target = centroid + Vec3(uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3), uniform(rng, -0.2, 0.2));
    scene.cameras.push_back(look_at(eye, target, Vec3::UnitZ(), cfg.fov_deg, cfg.image_size, cfg.image_size));
  }
  return scene;
}

}  // namespace detail

inline Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg = {}) {
  if (cfg.n_cameras < 2) throw ConfigError("n_cameras", "must be >= 2");
  if (cfg.n_surfaces < 1) throw ConfigError("n_surfaces", "must be >= 1");
  for (std::size_t attempt = 0; attempt < cfg.max_retries; ++attempt) {
    Scene s = detail::generate_scene_attempt(derive_seed(seed, "scene-attempt", attempt), cfg);
    if (std::all_of(s.cameras.begin(), s.cameras.end(), [&](const CameraView& c) { return detail::sees_something(s, c); }))
      return s;
  }
  throw ConfigError("scene", "no camera layout with every camera seeing a surface after " +
                                 std::to_string(cfg.max_retries) + " attempts");
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json scene_to_json(const Scene& s) {
  using nlohmann::json;
  auto v3 = [](const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); };
  json j;
  j["texture_seed"] = s.texture_seed;
  j["texture_frequency"] = s.texture_frequency;
  j["lambertian"] = s.lambertian;
  j["surfaces"] = json::array();
  for (const auto& surf : s.surfaces) {
    std::visit(
        [&](const auto& p) {
          using S = std::decay_t<decltype(p)>;
          json e;
          if constexpr (std::is_same_v<S, Plane>) {
            e = {{"type", "plane"}, {"center", v3(p.center)}, {"normal", v3(p.normal)}, {"axis_u", v3(p.axis_u)},
                 {"half_u", p.half_u}, {"half_v", p.half_v}};
          } else if constexpr (std::is_same_v<S, Sphere>) {
            e = {{"type", "sphere"}, {"center", v3(p.center)}, {"radius", p.radius}};
          } else {
            e = {{"type", "box"}, {"center", v3(p.center)}, {"half", v3(p.half)}};
          }
          j["surfaces"].push_back(e);
        },
        surf);
  }
  j["cameras"] = json::array();
  for (const auto& c : s.cameras) j["cameras"].push_back(camera_to_json(c));
  return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  auto v3 = [](const nlohmann::json& a) {
    const auto v = a.get<std::vector<double>>();
    if (v.size() != 3) throw ConfigError("surfaces", "expected a 3-vector");
    return Vec3(v[0], v[1], v[2]);
  };
  Scene s;
  try {
    s.texture_seed = j.at("texture_seed").get<std::uint64_t>();
    s.texture_frequency = j.value("texture_frequency", kDefaultTextureFrequency);
    s.lambertian = j.value("lambertian", false);
    for (const auto& e : j.at("surfaces")) {
      const auto type = e.at("type").get<std::string>();
      if (type == "plane")
        s.surfaces.push_back(Plane{v3(e.at("center")), v3(e.at("normal")), v3(e.at("axis_u")), e.at("half_u").get<double>(),
                                   e.at("half_v").get<double>()});
      else if (type == "sphere")
        s.surfaces.push_back(Sphere{v3(e.at("center")), e.at("radius").get<double>()});
      else if (type == "box")
        s.surfaces.push_back(Box{v3(e.at("center")), v3(e.at("half"))});
      else
        throw ConfigError("surfaces.type", "unknown primitive '" + type + "'");
    }
    for (const auto& c : j.at("cameras")) s.cameras.push_back(camera_from_json(c));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("scene", e.what());
  }
  if (s.surfaces.empty()) throw ConfigError("surfaces", "scene needs at least one surface");
  return s;
}

// Channel-planar little-endian float32 (3 planes of height x width) plus a
// JSON sidecar describing the layout.
inline void write_image(const Image& img, const std::filesystem::path& bin_path) {
  std::ofstream out(bin_path, std::ios::binary);
  if (!out) throw Error("cannot write " + bin_path.string());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const float v = img.at(y, x, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
      }
  nlohmann::json side{{"width", img.width}, {"height", img.height}, {"channels", 3}, {"dtype", "float32le"},
                      {"layout", "planar"}, {"file", bin_path.filename().string()}};
  std::ofstream(std::filesystem::path(bin_path).replace_extension(".json")) << side.dump(2) << '\n';
}

inline Image read_image(const std::filesystem::path& bin_path) {
  std::ifstream side_in(std::filesystem::path(bin_path).replace_extension(".json"));
  if (!side_in) throw ParseError(bin_path.string(), 0, "missing JSON sidecar");
  const auto side = nlohmann::json::parse(side_in);
  Image img;
  img.width = side.at("width").get<int>();
  img.height = side.at("height").get<int>();
  img.data.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  std::ifstream in(bin_path, std::ios::binary);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        float v = 0;
        if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ParseError(bin_path.string(), 0, "truncated image data");
        img.data[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = v;
      }
  return img;
}

}  // namespace mvadapt
