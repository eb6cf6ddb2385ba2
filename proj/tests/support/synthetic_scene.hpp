#pragma once

// Synthetic COLMAP reconstructions for tests, plus an independent text
// serializer (separate from the library writer) used as a round-trip oracle.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>

#include "poolnet/rng.hpp"
#include "poolnet/sparse_model.hpp"

namespace poolnet::testing {

inline Eigen::Quaterniond random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  if (q.w() < 0) q.coeffs() *= -1.0;
  return q;
}

// Cameras on a noisy ring looking roughly inward, points in a unit ball, every
// point observed by 2..n_images images.
inline colmap::SparseModel random_sparse_model(Rng& rng, std::size_t n_images,
                                               std::size_t n_points) {
  colmap::SparseModel model;
  colmap::CameraIntrinsics cam;
  cam.camera_id = 1;
  cam.model_name = "PINHOLE";
  cam.width = 640;
  cam.height = 480;
  cam.params = {500.0 + rng.uniform(-10, 10), 500.0, 320.0, 240.0};
  model.cameras[1] = cam;
  for (std::size_t i = 0; i < n_images; ++i) {
    colmap::RegisteredImage img;
    img.image_id = static_cast<std::uint32_t>(i + 1);
    img.rotation = random_rotation(rng);
    img.translation = {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(2, 6)};
    img.camera_id = 1;
    img.name = "frame_" + std::to_string(i) + ".ppm";
    model.images[img.image_id] = img;
  }
  for (std::size_t p = 0; p < n_points; ++p) {
    colmap::Point3D pt;
    pt.point3d_id = p + 1;
    pt.xyz = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    pt.rgb = {static_cast<std::uint8_t>(rng.uniform_index(256)),
              static_cast<std::uint8_t>(rng.uniform_index(256)),
              static_cast<std::uint8_t>(rng.uniform_index(256))};
    pt.error = rng.uniform(0, 2);
    std::vector<std::uint32_t> ids;
    for (const auto& [id, _] : model.images) ids.push_back(id);
    rng.shuffle(ids);
    ids.resize(2 + rng.uniform_index(n_images - 1));
    for (auto id : ids) {
      auto& img = model.images[id];
      img.observations.push_back(
          {rng.uniform(0, 640), rng.uniform(0, 480), static_cast<std::int64_t>(pt.point3d_id)});
      pt.track.push_back({id, static_cast<std::uint32_t>(img.observations.size() - 1)});
    }
    model.points[pt.point3d_id] = pt;
  }
  // A few untriangulated keypoints.
  for (auto& [id, img] : model.images) {
    img.observations.push_back({rng.uniform(0, 640), rng.uniform(0, 480), -1});
  }
  return model;
}

// Model with `n_images` registered images and no points.
inline colmap::SparseModel images_only_model(std::size_t n_images) {
  colmap::SparseModel model;
  model.cameras[1] = {1, "SIMPLE_PINHOLE", 100, 100, {100, 50, 50}};
  for (std::size_t i = 0; i < n_images; ++i) {
    colmap::RegisteredImage img;
    img.image_id = static_cast<std::uint32_t>(i + 1);
    img.camera_id = 1;
    img.translation = {double(i), 0, 0};
    img.name = "f" + std::to_string(i) + ".ppm";
    model.images[img.image_id] = img;
  }
  return model;
}

inline void write_fixture_text(const colmap::SparseModel& model,
                               const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream cams(dir / "cameras.txt");
  cams << std::setprecision(17) << "# fixture cameras\n";
  for (const auto& [id, c] : model.cameras) {
    cams << id << " " << c.model_name << " " << c.width << " " << c.height;
    for (double p : c.params) cams << " " << p;
    cams << "\n";
  }
  std::ofstream imgs(dir / "images.txt");
  imgs << std::setprecision(17) << "# fixture images\n# second comment\n";
  for (const auto& [id, im] : model.images) {
    imgs << id << " " << im.rotation.w() << " " << im.rotation.x() << " "
         << im.rotation.y() << " " << im.rotation.z() << " "
         << im.translation.x() << " " << im.translation.y() << " "
         << im.translation.z() << " " << im.camera_id << " " << im.name << "\n";
    for (const auto& o : im.observations) {
      imgs << o.x << " " << o.y << " " << o.point3d_id << " ";
    }
    imgs << "\n";
  }
  std::ofstream pts(dir / "points3D.txt");
  pts << std::setprecision(17) << "# fixture points\n";
  for (const auto& [id, p] : model.points) {
    pts << id << " " << p.xyz.x() << " " << p.xyz.y() << " " << p.xyz.z() << " "
        << int(p.rgb[0]) << " " << int(p.rgb[1]) << " " << int(p.rgb[2]) << " "
        << p.error;
    for (const auto& t : p.track) pts << " " << t.image_id << " " << t.point2d_index;
    pts << "\n";
  }
}

// Field-level comparison; floats within `tol`.
inline bool models_equivalent(const colmap::SparseModel& a,
                              const colmap::SparseModel& b, double tol,
                              std::string* why = nullptr) {
  auto fail = [&](const std::string& m) {
    if (why) *why = m;
    return false;
  };
  auto close = [&](double x, double y) { return std::abs(x - y) <= tol; };
  if (a.cameras.size() != b.cameras.size()) return fail("camera count");
  for (const auto& [id, c] : a.cameras) {
    auto it = b.cameras.find(id);
    if (it == b.cameras.end()) return fail("camera id");
    const auto& d = it->second;
    if (c.model_name != d.model_name || c.width != d.width ||
        c.height != d.height || c.params.size() != d.params.size())
      return fail("camera fields");
    for (std::size_t i = 0; i < c.params.size(); ++i)
      if (!close(c.params[i], d.params[i])) return fail("camera params");
  }
  if (a.images.size() != b.images.size()) return fail("image count");
  for (const auto& [id, im] : a.images) {
    auto it = b.images.find(id);
    if (it == b.images.end()) return fail("image id");
    const auto& jm = it->second;
    if (im.camera_id != jm.camera_id || im.name != jm.name ||
        im.observations.size() != jm.observations.size())
      return fail("image fields");
    if (!close(im.rotation.w(), jm.rotation.w()) ||
        !close(im.rotation.x(), jm.rotation.x()) ||
        !close(im.rotation.y(), jm.rotation.y()) ||
        !close(im.rotation.z(), jm.rotation.z()))
      return fail("rotation");
    if ((im.translation - jm.translation).cwiseAbs().maxCoeff() > tol)
      return fail("translation");
    for (std::size_t i = 0; i < im.observations.size(); ++i) {
      const auto& o = im.observations[i];
      const auto& p = jm.observations[i];
      if (!close(o.x, p.x) || !close(o.y, p.y) || o.point3d_id != p.point3d_id)
        return fail("observation");
    }
  }
  if (a.points.size() != b.points.size()) return fail("point count");
  for (const auto& [id, p] : a.points) {
    auto it = b.points.find(id);
    if (it == b.points.end()) return fail("point id");
    const auto& q = it->second;
    if ((p.xyz - q.xyz).cwiseAbs().maxCoeff() > tol || p.rgb != q.rgb ||
        !close(p.error, q.error) || p.track.size() != q.track.size())
      return fail("point fields");
    for (std::size_t i = 0; i < p.track.size(); ++i)
      if (p.track[i].image_id != q.track[i].image_id ||
          p.track[i].point2d_index != q.track[i].point2d_index)
        return fail("track");
  }
  return true;
}

// Explicit quaternion -> rotation matrix, row-major, for oracles.
inline std::array<double, 9> quaternion_matrix(double w, double x, double y,
                                               double z) {
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

inline std::array<double, 3> center_oracle(const colmap::RegisteredImage& im) {
  const auto r = quaternion_matrix(im.rotation.w(), im.rotation.x(),
                                   im.rotation.y(), im.rotation.z());
  const auto& t = im.translation;
  std::array<double, 3> c{};
  for (int col = 0; col < 3; ++col) {
    c[col] = -(r[0 * 3 + col] * t.x() + r[1 * 3 + col] * t.y() + r[2 * 3 + col] * t.z());
  }
  return c;
}

}  // namespace poolnet::testing
