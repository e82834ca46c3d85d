#pragma once

// COLMAP sparse-model text format (cameras.txt, images.txt, points3D.txt).
//
// COLMAP stores camera-from-world poses (x_cam = R * x_world + t). They are
// inverted on read so the rest of the code sees world-from-camera only, and
// inverted back on write.

#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mvadapt/camera.hpp"
#include "mvadapt/error.hpp"
#include "mvadapt/scene.hpp"

namespace mvadapt::colmap {

struct Camera {
  std::string model;  // PINHOLE or SIMPLE_PINHOLE
  CameraView intrinsics;  // pose left at identity
};

struct Observation {
  Vec2 xy = Vec2::Zero();   // pixels
  std::int64_t point3d_id = -1;
};

struct ImageEntry {
  std::uint32_t camera_id = 0;
  std::string name;
  Mat3 R = Mat3::Identity();  // world-from-camera
  Vec3 t = Vec3::Zero();
  std::vector<Observation> points2d;
};

struct TrackEntry {
  std::uint32_t image_id = 0;
  std::uint32_t point2d_idx = 0;
  bool operator<(const TrackEntry& o) const {
    return std::tie(image_id, point2d_idx) < std::tie(o.image_id, o.point2d_idx);
  }
  bool operator==(const TrackEntry&) const = default;
};

struct Point3D {
  Vec3 xyz = Vec3::Zero();
  std::array<int, 3> rgb{0, 0, 0};
  double error = 0;
  std::vector<TrackEntry> track;
};

struct SparseModel {
  std::map<std::uint32_t, Camera> cameras;
  std::map<std::uint32_t, ImageEntry> images;
  std::map<std::uint64_t, Point3D> points3d;

  // Full camera (intrinsics + pose) for an image.
  CameraView view(std::uint32_t image_id) const {
    const auto it = images.find(image_id);
    if (it == images.end()) throw ConfigError("image_id", "no image " + std::to_string(image_id));
    CameraView v = cameras.at(it->second.camera_id).intrinsics;
    v.R = it->second.R;
    v.t = it->second.t;
    return v;
  }
};

namespace detail {

struct Lines {
  std::string file;
  std::vector<std::string> text;
};

inline Lines read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ParseError(p.string(), 0, "cannot open file");
  Lines l{p.filename().string(), {}};
  std::string s;
  while (std::getline(in, s)) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    l.text.push_back(s);
  }
  return l;
}

inline bool skippable(const std::string& s) {
  const auto pos = s.find_first_not_of(" \t");
  return pos == std::string::npos || s[pos] == '#';
}

template <class V>
V read_field(std::istringstream& is, const std::string& file, std::size_t line, const char* what) {
  V v{};
  if (!(is >> v)) throw ParseError(file, line, std::string("malformed line: expected ") + what);
  return v;
}

inline void expect_end(std::istringstream& is, const std::string& file, std::size_t line) {
  std::string extra;
  if (is >> extra) throw ParseError(file, line, "malformed line: unexpected trailing token '" + extra + "'");
}

}  // namespace detail

inline std::map<std::uint32_t, Camera> parse_cameras(const std::filesystem::path& path) {
  const auto lines = detail::read_lines(path);
  std::map<std::uint32_t, Camera> out;
  for (std::size_t i = 0; i < lines.text.size(); ++i) {
    const auto& s = lines.text[i];
    if (detail::skippable(s)) continue;
    const std::size_t ln = i + 1;
    std::istringstream is(s);
    const auto id = detail::read_field<std::uint32_t>(is, lines.file, ln, "CAMERA_ID");
    Camera cam;
    cam.model = detail::read_field<std::string>(is, lines.file, ln, "MODEL");
    auto& v = cam.intrinsics;
    v.width = detail::read_field<int>(is, lines.file, ln, "WIDTH");
    v.height = detail::read_field<int>(is, lines.file, ln, "HEIGHT");
    if (cam.model == "PINHOLE") {
      v.fx = detail::read_field<double>(is, lines.file, ln, "fx");
      v.fy = detail::read_field<double>(is, lines.file, ln, "fy");
    } else if (cam.model == "SIMPLE_PINHOLE") {
      v.fx = v.fy = detail::read_field<double>(is, lines.file, ln, "f");
    } else {
      throw ParseError(lines.file, ln, "unknown camera model '" + cam.model + "'");
    }
    v.cx = detail::read_field<double>(is, lines.file, ln, "cx");
    v.cy = detail::read_field<double>(is, lines.file, ln, "cy");
    detail::expect_end(is, lines.file, ln);
    try {
      v.validate();
    } catch (const NumericalError& e) {
      throw ParseError(lines.file, ln, e.what());
    }
    if (!out.emplace(id, std::move(cam)).second) throw ParseError(lines.file, ln, "duplicate CAMERA_ID " + std::to_string(id));
  }
  return out;
}

inline std::map<std::uint32_t, ImageEntry> parse_images(const std::filesystem::path& path) {
  const auto lines = detail::read_lines(path);
  std::map<std::uint32_t, ImageEntry> out;
  for (std::size_t i = 0; i < lines.text.size(); ++i) {
    if (detail::skippable(lines.text[i])) continue;
    const std::size_t ln = i + 1;
    std::istringstream is(lines.text[i]);
    const auto id = detail::read_field<std::uint32_t>(is, lines.file, ln, "IMAGE_ID");
    double q[4], t[3];
    for (auto& v : q) v = detail::read_field<double>(is, lines.file, ln, "quaternion component");
    for (auto& v : t) v = detail::read_field<double>(is, lines.file, ln, "translation component");
    ImageEntry img;
    img.camera_id = detail::read_field<std::uint32_t>(is, lines.file, ln, "CAMERA_ID");
    img.name = detail::read_field<std::string>(is, lines.file, ln, "NAME");
    detail::expect_end(is, lines.file, ln);
    Eigen::Quaterniond quat(q[0], q[1], q[2], q[3]);
    if (std::abs(quat.norm() - 1.0) > 1e-3) throw ParseError(lines.file, ln, "quaternion is not unit length");
    quat.normalize();
    const Mat3 Rcw = quat.toRotationMatrix();
    img.R = Rcw.transpose();
    img.t = -(Rcw.transpose() * Vec3(t[0], t[1], t[2]));

    // The observation line always follows, even when empty.
    ++i;
    if (i >= lines.text.size()) throw ParseError(lines.file, ln + 1, "missing POINTS2D line for image " + std::to_string(id));
    std::istringstream ps(lines.text[i]);
    double x = 0;
    while (ps >> x) {
      Observation o;
      o.xy.x() = x;
      o.xy.y() = detail::read_field<double>(ps, lines.file, i + 1, "Y");
      o.point3d_id = detail::read_field<std::int64_t>(ps, lines.file, i + 1, "POINT3D_ID");
      img.points2d.push_back(o);
    }
    if (!ps.eof()) throw ParseError(lines.file, i + 1, "malformed line: non-numeric POINTS2D entry");
    if (!out.emplace(id, std::move(img)).second) throw ParseError(lines.file, ln, "duplicate IMAGE_ID " + std::to_string(id));
  }
  return out;
}

inline std::map<std::uint64_t, Point3D> parse_points3d(const std::filesystem::path& path) {
  const auto lines = detail::read_lines(path);
  std::map<std::uint64_t, Point3D> out;
  for (std::size_t i = 0; i < lines.text.size(); ++i) {
    if (detail::skippable(lines.text[i])) continue;
    const std::size_t ln = i + 1;
    std::istringstream is(lines.text[i]);
    const auto id = detail::read_field<std::uint64_t>(is, lines.file, ln, "POINT3D_ID");
    Point3D p;
    for (int k = 0; k < 3; ++k) p.xyz[k] = detail::read_field<double>(is, lines.file, ln, "coordinate");
    for (auto& c : p.rgb) c = detail::read_field<int>(is, lines.file, ln, "color");
    p.error = detail::read_field<double>(is, lines.file, ln, "ERROR");
    std::uint32_t image_id = 0;
    while (is >> image_id) p.track.push_back({image_id, detail::read_field<std::uint32_t>(is, lines.file, ln, "POINT2D_IDX")});
    if (!is.eof()) throw ParseError(lines.file, ln, "malformed line: non-numeric TRACK entry");
    if (!out.emplace(id, std::move(p)).second) throw ParseError(lines.file, ln, "duplicate POINT3D_ID " + std::to_string(id));
  }
  return out;
}

inline SparseModel parse_sparse_model(const std::filesystem::path& dir) {
  SparseModel m;
  m.cameras = parse_cameras(dir / "cameras.txt");
  m.images = parse_images(dir / "images.txt");
  m.points3d = parse_points3d(dir / "points3D.txt");
  for (const auto& [id, img] : m.images)
    if (!m.cameras.count(img.camera_id))
      throw ParseError("images.txt", 0, "image " + std::to_string(id) + " references missing CAMERA_ID " + std::to_string(img.camera_id));
  for (const auto& [id, p] : m.points3d)
    for (const auto& t : p.track) {
      const auto it = m.images.find(t.image_id);
      if (it == m.images.end())
        throw ParseError("points3D.txt", 0, "point " + std::to_string(id) + " references missing IMAGE_ID " + std::to_string(t.image_id));
      if (t.point2d_idx >= it->second.points2d.size())
        throw ParseError("points3D.txt", 0, "point " + std::to_string(id) + " references missing POINT2D_IDX " +
                                                std::to_string(t.point2d_idx) + " of image " + std::to_string(t.image_id));
    }
  return m;
}

inline void write_sparse_model(const SparseModel& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw Error("cannot write " + (dir / name).string());
    f << std::setprecision(17);
    return f;
  };
  {
    auto f = open("cameras.txt");
    f << "# Camera list with one line of data per camera:\n"
      << "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n"
      << "# Number of cameras: " << m.cameras.size() << '\n';
    for (const auto& [id, c] : m.cameras) {
      const auto& v = c.intrinsics;
      f << id << ' ' << c.model << ' ' << v.width << ' ' << v.height << ' ';
      if (c.model == "SIMPLE_PINHOLE") f << v.fx;
      else f << v.fx << ' ' << v.fy;
      f << ' ' << v.cx << ' ' << v.cy << '\n';
    }
  }
  {
    auto f = open("images.txt");
    f << "# Image list with two lines of data per image:\n"
      << "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n"
      << "#   POINTS2D[] as (X, Y, POINT3D_ID)\n"
      << "# Number of images: " << m.images.size() << '\n';
    for (const auto& [id, img] : m.images) {
      const Mat3 Rcw = img.R.transpose();
      const Vec3 tcw = -(Rcw * img.t);
      Eigen::Quaterniond q(Rcw);
      if (q.w() < 0) q.coeffs() *= -1;
      f << id << ' ' << q.w() << ' ' << q.x() << ' ' << q.y() << ' ' << q.z() << ' ' << tcw.x() << ' ' << tcw.y() << ' '
        << tcw.z() << ' ' << img.camera_id << ' ' << img.name << '\n';
      for (std::size_t k = 0; k < img.points2d.size(); ++k) {
        const auto& o = img.points2d[k];
        f << (k ? " " : "") << o.xy.x() << ' ' << o.xy.y() << ' ' << o.point3d_id;
      }
      f << '\n';
    }
  }
  {
    auto f = open("points3D.txt");
    f << "# 3D point list with one line of data per point:\n"
      << "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n"
      << "# Number of points: " << m.points3d.size() << '\n';
    for (const auto& [id, p] : m.points3d) {
      f << id << ' ' << p.xyz.x() << ' ' << p.xyz.y() << ' ' << p.xyz.z() << ' ' << p.rgb[0] << ' ' << p.rgb[1] << ' '
        << p.rgb[2] << ' ' << p.error;
      for (const auto& t : p.track) f << ' ' << t.image_id << ' ' << t.point2d_idx;
      f << '\n';
    }
  }
}

// Projected correspondences for every 3D point observed in both images,
// restricted to tracks of at least `min_track_len` distinct images. Each
// point is emitted once; points behind or outside either view are dropped.
inline std::vector<Correspondence> correspondences_from_model(const SparseModel& m, std::uint32_t image_a,
                                                              std::uint32_t image_b, std::size_t min_track_len = 2) {
  const CameraView va = m.view(image_a);
  const CameraView vb = m.view(image_b);
  std::vector<Correspondence> out;
  for (const auto& [id, p] : m.points3d) {
    std::set<std::uint32_t> imgs;
    for (const auto& t : p.track) imgs.insert(t.image_id);
    if (imgs.size() < min_track_len || !imgs.count(image_a) || !imgs.count(image_b)) continue;
    const auto pa = project(va, p.xyz);
    const auto pb = project(vb, p.xyz);
    if (!pa.in_frame() || !pb.in_frame()) continue;
    out.push_back({image_a, image_b, pa.uv, pb.uv, p.xyz});
  }
  return out;
}

// Exports a synthetic scene as a COLMAP model: one PINHOLE camera and one
// image per view, and `n_points` surface points with their full visibility
// tracks. Image ids and camera ids are view index + 1.
inline SparseModel sparse_model_from_scene(const Scene& scene, std::size_t n_points, std::uint64_t seed) {
  SparseModel m;
  for (std::size_t v = 0; v < scene.cameras.size(); ++v) {
    const auto id = static_cast<std::uint32_t>(v + 1);
    Camera cam{"PINHOLE", scene.cameras[v]};
    cam.intrinsics.R = Mat3::Identity();
    cam.intrinsics.t = Vec3::Zero();
    m.cameras.emplace(id, cam);
    ImageEntry img;
    img.camera_id = id;
    img.name = "view_" + std::to_string(v) + ".png";
    img.R = scene.cameras[v].R;
    img.t = scene.cameras[v].t;
    m.images.emplace(id, std::move(img));
  }
  Rng rng(seed);
  std::uint64_t next_id = 1;
  for (std::size_t attempt = 0; attempt < 200 * n_points && m.points3d.size() < n_points; ++attempt) {
    const std::size_t v0 = uniform_index(rng, scene.cameras.size());
    const auto hit = cast_ray(scene, pixel_ray(scene.cameras[v0], uniform(rng, 0, 1), uniform(rng, 0, 1)));
    if (!hit) continue;
    Point3D p;
    p.xyz = hit->point;
    const auto c = texture_color(scene, hit->point);
    for (int k = 0; k < 3; ++k) p.rgb[static_cast<std::size_t>(k)] = static_cast<int>(std::lround(c[static_cast<std::size_t>(k)] * 255));
    for (std::size_t v = 0; v < scene.cameras.size(); ++v) {
      if (!visible_from(scene, scene.cameras[v], hit->point)) continue;
      auto& img = m.images.at(static_cast<std::uint32_t>(v + 1));
      const auto uv = project(scene.cameras[v], hit->point).uv;
      p.track.push_back({static_cast<std::uint32_t>(v + 1), static_cast<std::uint32_t>(img.points2d.size())});
      img.points2d.push_back({Vec2(uv.x() * scene.cameras[v].width, uv.y() * scene.cameras[v].height),
                              static_cast<std::int64_t>(next_id)});
    }
    if (p.track.size() < 2) {
      for (const auto& t : p.track) m.images.at(t.image_id).points2d.pop_back();
      continue;
    }
    m.points3d.emplace(next_id++, std::move(p));
  }
  return m;
}

}  // namespace mvadapt::colmap
