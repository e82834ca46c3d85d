#pragma once

// Pinhole cameras. Pose maps camera to world: X_w = R * X_c + t, with the
// OpenCV axis convention (x right, y down, z forward). Image positions are
// normalized to [0,1] by image size everywhere outside this header.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "mvadapt/error.hpp"
#include "mvadapt/rng.hpp"
#include "json.hpp"

namespace mvadapt {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct CameraView {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 center() const { return t; }
  Vec3 optical_axis() const { return R.col(2); }

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw NumericalError("camera: degenerate intrinsics (fx, fy must be > 0)");
    if (width <= 0 || height <= 0) throw NumericalError("camera: non-positive resolution");
    if (cx < 0 || cx > width || cy < 0 || cy > height) throw NumericalError("camera: principal point outside image");
    if ((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 || std::abs(R.determinant() - 1.0) > 1e-6)
      throw NumericalError("camera: rotation is not orthonormal with det +1");
  }

  bool operator==(const CameraView&) const = default;
};

// Pinhole camera whose optical axis points from `eye` at `target`.
inline CameraView look_at(const Vec3& eye, const Vec3& target, const Vec3& world_up, double fov_deg, int width,
                          int height) {
  CameraView c;
  c.width = width;
  c.height = height;
  c.fx = c.fy = 0.5 * width / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
  c.cx = 0.5 * width;
  c.cy = 0.5 * height;
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(world_up);
  if (x.norm() < 1e-9) x = z.unitOrthogonal();
  x.normalize();
  const Vec3 y = z.cross(x);
  c.R.col(0) = x;
  c.R.col(1) = y;
  c.R.col(2) = z;
  c.t = eye;
  return c;
}

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit
};

inline Ray pixel_ray(const CameraView& cam, double u, double v) {
  cam.validate();
  const Vec3 dc((u * cam.width - cam.cx) / cam.fx, (v * cam.height - cam.cy) / cam.fy, 1.0);
  return {cam.t, (cam.R * dc).normalized()};
}

struct Projection {
  Vec2 uv = Vec2::Zero();
  double depth = 0;
  bool behind = false;

  bool in_frame() const { return !behind && uv.x() >= 0 && uv.x() <= 1 && uv.y() >= 0 && uv.y() <= 1; }
};

inline Projection project(const CameraView& cam, const Vec3& point) {
  const Vec3 pc = cam.R.transpose() * (point - cam.t);
  Projection p;
  p.depth = pc.z();
  if (pc.z() <= 1e-6) {
    p.behind = true;
    return p;
  }
  p.uv = Vec2((cam.fx * pc.x() / pc.z() + cam.cx) / cam.width, (cam.fy * pc.y() / pc.z() + cam.cy) / cam.height);
  return p;
}

// Degrees between the two optical axes, in [0, 180].
inline double viewpoint_angle(const CameraView& a, const CameraView& b) {
  const double c = std::clamp(a.optical_axis().dot(b.optical_axis()), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

// Per-token rays of one view, expressed in the camera frame of view 0.
struct RayMap {
  std::size_t rows = 0, cols = 0;
  std::size_t reference_view = 0;
  bool moment_form = false;
  std::vector<double> data;  // rows * cols * 6: (o, d) or (d, o x d)

  std::span<const double> at(std::size_t r, std::size_t c) const { return {data.data() + (r * cols + c) * 6, 6}; }
};

// Normalized coordinate of the center of token (r, c) on a rows x cols grid.
inline Vec2 token_center(std::size_t r, std::size_t c, std::size_t rows, std::size_t cols) {
  return {(static_cast<double>(c) + 0.5) / static_cast<double>(cols),
          (static_cast<double>(r) + 0.5) / static_cast<double>(rows)};
}

inline RayMap plucker_raymap(std::span<const CameraView> cameras, std::size_t view_index, std::size_t rows,
                             std::size_t cols, bool moment_form = false) {
  if (cameras.empty()) throw ConfigError("cameras", "raymap needs at least one camera");
  if (view_index >= cameras.size()) throw ConfigError("view_index", "out of range");
  const CameraView& ref = cameras[0];
  const CameraView& cam = cameras[view_index];
  ref.validate();
  const Mat3 Rt = ref.R.transpose();
  RayMap map;
  map.rows = rows;
  map.cols = cols;
  map.moment_form = moment_form;
  map.data.reserve(rows * cols * 6);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const Vec2 uv = token_center(r, c, rows, cols);
      const Ray ray = pixel_ray(cam, uv.x(), uv.y());
      const Vec3 o = Rt * (ray.origin - ref.t);
      const Vec3 d = Rt * ray.direction;
      const Vec3 a = moment_form ? d : o;
      const Vec3 b = moment_form ? Vec3(o.cross(d)) : d;
      map.data.insert(map.data.end(), {a.x(), a.y(), a.z(), b.x(), b.y(), b.z()});
    }
  return map;
}

// Applies world transform (Rg, tg) to every pose.
inline std::vector<CameraView> transform_cameras(std::span<const CameraView> cameras, const Mat3& Rg, const Vec3& tg) {
  std::vector<CameraView> out(cameras.begin(), cameras.end());
  for (auto& c : out) {
    c.R = Rg * c.R;
    c.t = Rg * c.t + tg;
  }
  return out;
}

inline Mat3 orthonormalize(const Mat3& R) {
  Eigen::Quaterniond q(R);
  q.normalize();
  return q.toRotationMatrix();
}

// Zero-mean Gaussian pose noise: a rotation by a signed angle ~ N(0, sigma^2)
// about a uniformly random axis, and translation noise with per-component
// std sigma * |t|.
inline std::vector<CameraView> perturb_cameras(std::span<const CameraView> cameras, double sigma, std::uint64_t seed) {
  if (sigma < 0) throw ConfigError("noise_level", "must be >= 0");
  std::vector<CameraView> out(cameras.begin(), cameras.end());
  if (sigma == 0) return out;
  Rng rng(seed);
  for (auto& c : out) {
    Vec3 axis(gaussian(rng), gaussian(rng), gaussian(rng));
    if (axis.norm() < 1e-12) axis = Vec3::UnitZ();
    axis.normalize();
    const double angle = gaussian(rng, sigma);
    c.R = orthonormalize(Eigen::AngleAxisd(angle, axis).toRotationMatrix() * c.R);
    const double ts = sigma * c.t.norm();
    c.t += Vec3(gaussian(rng, ts), gaussian(rng, ts), gaussian(rng, ts));
  }
  return out;
}

// {fx, fy, cx, cy, width, height, R: 9 row-major, t: 3}
inline nlohmann::json camera_to_json(const CameraView& c) {
  nlohmann::json j;
  j["fx"] = c.fx;
  j["fy"] = c.fy;
  j["cx"] = c.cx;
  j["cy"] = c.cy;
  j["width"] = c.width;
  j["height"] = c.height;
  std::vector<double> r;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r.push_back(c.R(i, k));
  j["R"] = r;
  j["t"] = {c.t.x(), c.t.y(), c.t.z()};
  return j;
}

inline CameraView camera_from_json(const nlohmann::json& j) {
  CameraView c;
  try {
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    const auto r = j.at("R").get<std::vector<double>>();
    const auto t = j.at("t").get<std::vector<double>>();
    if (r.size() != 9) throw ConfigError("R", "expected 9 values");
    if (t.size() != 3) throw ConfigError("t", "expected 3 values");
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) c.R(i, k) = r[static_cast<std::size_t>(i * 3 + k)];
    c.t = Vec3(t[0], t[1], t[2]);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("camera", e.what());
  }
  c.validate();
  return c;
}

}  // namespace mvadapt
