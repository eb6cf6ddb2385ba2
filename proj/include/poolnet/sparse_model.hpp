#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

// Reader, writer and geometric statistics for COLMAP sparse reconstructions
// in the text format (cameras.txt, images.txt, points3D.txt).
namespace poolnet::colmap {

struct CameraIntrinsics {
  std::uint32_t camera_id = 0;
  std::string model_name;
  std::uint64_t width = 0;
  std::uint64_t height = 0;
  std::vector<double> params;
};

struct Observation {
  double x = 0;
  double y = 0;
  // -1 when the keypoint was not triangulated.
  std::int64_t point3d_id = -1;
};

// Pose is world-to-camera: x_cam = R(rotation) * x_world + translation.
struct RegisteredImage {
  std::uint32_t image_id = 0;
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  std::uint32_t camera_id = 0;
  std::string name;
  std::vector<Observation> observations;
};

struct TrackElement {
  std::uint32_t image_id = 0;
  std::uint32_t point2d_index = 0;
};

struct Point3D {
  std::uint64_t point3d_id = 0;
  Eigen::Vector3d xyz = Eigen::Vector3d::Zero();
  std::array<std::uint8_t, 3> rgb{0, 0, 0};
  double error = 0;
  std::vector<TrackElement> track;
};

struct SparseModel {
  std::map<std::uint32_t, CameraIntrinsics> cameras;
  std::map<std::uint32_t, RegisteredImage> images;
  std::map<std::uint64_t, Point3D> points;
  std::string source_path;
};

// Number of intrinsic parameters for the named camera model, or -1 for a
// model whose parameters are kept opaquely.
int camera_model_arity(const std::string& model_name);

// Parses the text triple in `directory` and validates cross references.
// Throws NotAModel, ParseError or IntegrityError.
SparseModel parse_sparse_model(const std::filesystem::path& directory);

// Writes the text triple. Floating point values use the shortest
// representation that round-trips exactly.
void write_sparse_model(const SparseModel& model,
                        const std::filesystem::path& directory);

// C = -R^T t
Eigen::Vector3d camera_center(const RegisteredImage& image);

// Fraction of the input frames that were registered, clamped to [0, 1].
double registered_fraction(const SparseModel& model,
                           std::size_t total_input_frames);

struct PoseDiversity {
  // Mean pairwise center distance over the RMS radius about the centroid.
  double translational = 0;
  // Mean pairwise geodesic angle 2*acos(|<q_i, q_j>|), radians.
  double rotational = 0;
};

PoseDiversity pose_diversity(const SparseModel& model);

struct TriangulationAngle {
  double mean_angle = 0;  // radians
  std::size_t corners = 0;
  std::size_t skipped = 0;  // degenerate rays (camera center at the point)
};

// Mean over every point and every unordered pair of distinct observing images
// of the angle at the point between the rays to the two camera centers.
TriangulationAngle mean_triangulation_angle(const SparseModel& model);

struct SelectedModel {
  SparseModel model;
  std::size_t index = 0;
  // Candidates that failed to parse, with the reason.
  std::vector<std::pair<std::size_t, std::string>> failures;
};

// Picks the candidate with the most registered images; ties go to the lowest
// directory name in byte order. Throws NoValidModel if nothing parses.
SelectedModel select_largest_model(
    std::span<const std::filesystem::path> candidates);

}  // namespace poolnet::colmap
