#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mvadapt/colmap.hpp"

namespace mvadapt {
namespace {

namespace fs = std::filesystem;

const fs::path kFixtures = MVADAPT_FIXTURES;

fs::path scratch_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("mvadapt_colmap_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void expect_same_model(const colmap::SparseModel& a, const colmap::SparseModel& b) {
  ASSERT_EQ(a.cameras.size(), b.cameras.size());
  for (const auto& [id, c] : a.cameras) {
    const auto& d = b.cameras.at(id);
    EXPECT_EQ(c.model, d.model);
    EXPECT_EQ(c.intrinsics, d.intrinsics);
  }
  ASSERT_EQ(a.images.size(), b.images.size());
  for (const auto& [id, img] : a.images) {
    const auto& o = b.images.at(id);
    EXPECT_EQ(img.camera_id, o.camera_id);
    EXPECT_EQ(img.name, o.name);
    EXPECT_LT((img.R - o.R).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((img.t - o.t).cwiseAbs().maxCoeff(), 1e-12);
    ASSERT_EQ(img.points2d.size(), o.points2d.size());
    for (std::size_t k = 0; k < img.points2d.size(); ++k) {
      EXPECT_EQ(img.points2d[k].xy, o.points2d[k].xy);
      EXPECT_EQ(img.points2d[k].point3d_id, o.points2d[k].point3d_id);
    }
  }
  ASSERT_EQ(a.points3d.size(), b.points3d.size());
  for (const auto& [id, p] : a.points3d) {
    const auto& q = b.points3d.at(id);
    EXPECT_EQ(p.xyz, q.xyz);
    EXPECT_EQ(p.rgb, q.rgb);
    EXPECT_EQ(p.error, q.error);
    EXPECT_EQ(p.track, q.track);
  }
}

// Rewrites `file` in a copy of the small fixture with line `line` replaced.
fs::path with_line(const std::string& tag, const std::string& file, std::size_t line, const std::string& text) {
  const auto dir = scratch_dir(tag);
  for (const char* f : {"cameras.txt", "images.txt", "points3D.txt"}) fs::copy_file(kFixtures / "colmap_small" / f, dir / f);
  std::ifstream in(dir / file);
  std::vector<std::string> lines;
  for (std::string s; std::getline(in, s);) lines.push_back(s);
  in.close();
  lines.at(line - 1) = text;
  std::ofstream out(dir / file);
  for (const auto& s : lines) out << s << '\n';
  return dir;
}

void expect_parse_error(const fs::path& dir, const std::string& file, std::size_t line) {
  try {
    colmap::parse_sparse_model(dir);
    FAIL() << "expected ParseError in " << file;
  } catch (const ParseError& e) {
    EXPECT_EQ(e.file(), file);
    EXPECT_EQ(e.line(), line);
    const std::string what = e.what();
    if (line == 0) return;
    EXPECT_NE(what.find(file + ":" + std::to_string(line)), std::string::npos) << what;
  }
}

TEST(Colmap, ParsesFixture) {
  const auto m = colmap::parse_sparse_model(kFixtures / "colmap_small");
  ASSERT_EQ(m.cameras.size(), 2u);
  EXPECT_EQ(m.cameras.at(1).intrinsics.fy, 56.25);
  EXPECT_EQ(m.cameras.at(2).intrinsics.fx, m.cameras.at(2).intrinsics.fy);
  ASSERT_EQ(m.images.size(), 3u);
  EXPECT_EQ(m.images.at(1).points2d.size(), 3u);
  EXPECT_TRUE(m.images.at(3).points2d.empty());
  // Camera 1 sits 4 units behind the world origin along its optical axis.
  EXPECT_LT((m.images.at(1).t - Vec3(0, 0, -4)).norm(), 1e-12);
  EXPECT_EQ(m.points3d.at(1).track.size(), 2u);
}

TEST(Colmap, WorldFromCameraInversion) {
  const auto m = colmap::parse_sparse_model(kFixtures / "colmap_small");
  const auto& img = m.images.at(2);
  const Eigen::Quaterniond q(0.9238795325112867, 0, 0.3826834323650898, 0);
  const Mat3 Rcw = q.toRotationMatrix();
  const Vec3 tcw(-1, 0, 4);
  const Vec3 X(0.3, -0.2, 1.1);
  EXPECT_LT(((Rcw * X + tcw) - img.R.transpose() * (X - img.t)).norm(), 1e-12);
}

TEST(Colmap, FixtureRoundTrip) {
  const auto a = colmap::parse_sparse_model(kFixtures / "colmap_small");
  const auto dir = scratch_dir("fixture_rt");
  colmap::write_sparse_model(a, dir);
  expect_same_model(a, colmap::parse_sparse_model(dir));
}

TEST(Colmap, SyntheticSceneRoundTrip) {
  const auto scene = generate_scene(3);
  const auto a = colmap::sparse_model_from_scene(scene, 200, 1);
  ASSERT_EQ(a.points3d.size(), 200u);
  const auto dir = scratch_dir("scene_rt");
  colmap::write_sparse_model(a, dir);
  expect_same_model(a, colmap::parse_sparse_model(dir));
}

// Correspondences after a disk round trip against a hand-written projection
// with the original scene cameras.
TEST(Colmap, CorrespondencesMatchIndependentProjection) {
  const auto scene = generate_scene(8);
  const auto dir = scratch_dir("corr");
  colmap::write_sparse_model(colmap::sparse_model_from_scene(scene, 300, 2), dir);
  const auto m = colmap::parse_sparse_model(dir);
  auto proj = [](const CameraView& c, const Vec3& X) {
    const Vec3 p = c.R.transpose() * (X - c.t);
    return Vec2((c.fx * p.x() / p.z() + c.cx) / c.width, (c.fy * p.y() / p.z() + c.cy) / c.height);
  };
  std::size_t total = 0;
  for (std::uint32_t a = 1; a <= 3; ++a)
    for (std::uint32_t b = a + 1; b <= 4; ++b) {
      const auto corr = colmap::correspondences_from_model(m, a, b);
      total += corr.size();
      for (const auto& c : corr) {
        EXPECT_LT((proj(scene.cameras[a - 1], c.point) - c.x_i).norm(), 1e-6);
        EXPECT_LT((proj(scene.cameras[b - 1], c.point) - c.x_j).norm(), 1e-6);
      }
    }
  EXPECT_GT(total, 0u);
}

TEST(Colmap, StoredObservationsMatchProjection) {
  const auto scene = generate_scene(8);
  const auto m = colmap::sparse_model_from_scene(scene, 100, 3);
  for (const auto& [id, p] : m.points3d)
    for (const auto& t : p.track) {
      const auto& cam = scene.cameras[t.image_id - 1];
      const auto& obs = m.images.at(t.image_id).points2d.at(t.point2d_idx);
      EXPECT_EQ(obs.point3d_id, static_cast<std::int64_t>(id));
      const auto uv = project(cam, p.xyz).uv;
      EXPECT_LT((Vec2(uv.x() * cam.width, uv.y() * cam.height) - obs.xy).norm(), 1e-6);
    }
}

TEST(Colmap, MinTrackLengthFilters) {
  const auto m = colmap::sparse_model_from_scene(generate_scene(8), 200, 4);
  const auto all = colmap::correspondences_from_model(m, 1, 2, 2);
  const auto long_tracks = colmap::correspondences_from_model(m, 1, 2, 4);
  EXPECT_LE(long_tracks.size(), all.size());
  for (const auto& c : long_tracks) {
    std::size_t n = 0;
    for (const auto& [id, p] : m.points3d)
      if (p.xyz == c.point) n = p.track.size();
    EXPECT_GE(n, 4u);
  }
}

TEST(ColmapErrors, NonNumericIntrinsicNamesFileAndLine) {
  expect_parse_error(with_line("bad_cam", "cameras.txt", 4, "1 PINHOLE 64 48 abc 56.25 32 24"), "cameras.txt", 4);
}

TEST(ColmapErrors, UnknownCameraModel) {
  expect_parse_error(with_line("bad_model", "cameras.txt", 5, "2 FISHEYE 64 64 50 31.5 32.5"), "cameras.txt", 5);
}

TEST(ColmapErrors, TrailingTokenOnCameraLine) {
  expect_parse_error(with_line("bad_extra", "cameras.txt", 4, "1 PINHOLE 64 48 55.5 56.25 32 24 7"), "cameras.txt", 4);
}

TEST(ColmapErrors, TruncatedImageLine) {
  expect_parse_error(with_line("bad_img", "images.txt", 7, "2 0.9238795325112867 0 0.3826834323650898"), "images.txt", 7);
}

TEST(ColmapErrors, NonUnitQuaternion) {
  expect_parse_error(with_line("bad_quat", "images.txt", 5, "1 2 0 0 0 0 0 4 1 a.png"), "images.txt", 5);
}

TEST(ColmapErrors, BadObservationLine) {
  expect_parse_error(with_line("bad_obs", "images.txt", 6, "32 24 1 40.5 oops 2"), "images.txt", 6);
}

TEST(ColmapErrors, BadTrackFixture) {
  expect_parse_error(kFixtures / "colmap_bad_track", "points3D.txt", 4);
}

TEST(ColmapErrors, MissingFile) {
  const auto dir = scratch_dir("missing");
  fs::copy_file(kFixtures / "colmap_small" / "cameras.txt", dir / "cameras.txt");
  EXPECT_THROW(colmap::parse_sparse_model(dir), ParseError);
}

TEST(ColmapErrors, DanglingTrackReference) {
  expect_parse_error(with_line("dangling", "points3D.txt", 5, "2 0.25 -0.1 0.3 10 20 30 0.25 1 9"), "points3D.txt", 0);
}

}  // namespace
}  // namespace mvadapt
