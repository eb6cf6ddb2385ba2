#include "poolnet/sparse_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <string_view>

#include "poolnet/error.hpp"

namespace poolnet::colmap {
namespace fs = std::filesystem;

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) {
    return {};
  }
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

// Splits on runs of blanks; also reports where each token starts so callers
// can take "the rest of the line".
struct Tokens {
  std::vector<std::string_view> items;
  std::vector<std::size_t> offsets;
};

Tokens tokenize(std::string_view line) {
  Tokens t;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    t.items.push_back(line.substr(i, j - i));
    t.offsets.push_back(i);
    i = j;
  }
  return t;
}

// Line-oriented reader that remembers where it is for error messages.
class TextFile {
 public:
  explicit TextFile(const fs::path& path) : path_(path), stream_(path) {
    if (!stream_) {
      throw NotAModel("cannot open " + path.string());
    }
  }

  // Next raw line; false at end of file.
  bool next(std::string& line) {
    if (!std::getline(stream_, line)) {
      return false;
    }
    ++line_number_;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    return true;
  }

  // Next line that is neither blank nor a comment.
  bool next_content(std::string& line) {
    while (next(line)) {
      const auto t = trim(line);
      if (!t.empty() && t.front() != '#') {
        return true;
      }
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& line, const std::string& reason) const {
    throw ParseError(path_.string(), line_number_, line, reason);
  }

  template <typename Int>
  Int parse_int(std::string_view token, const std::string& line,
                const char* field) const {
    Int value{};
    const auto [ptr, ec] =
        std::from_chars(token.data(), token.data() + token.size(), value);
    if (ec != std::errc() || ptr != token.data() + token.size()) {
      fail(line, std::string("bad ") + field);
    }
    return value;
  }

  double parse_double(std::string_view token, const std::string& line,
                      const char* field) const {
    double value = 0;
    const auto [ptr, ec] =
        std::from_chars(token.data(), token.data() + token.size(), value);
    if (ec != std::errc() || ptr != token.data() + token.size() ||
        !std::isfinite(value)) {
      fail(line, std::string("bad ") + field);
    }
    return value;
  }

 private:
  fs::path path_;
  std::ifstream stream_;
  std::size_t line_number_ = 0;
};

void read_cameras(const fs::path& path, SparseModel& model) {
  TextFile file(path);
  std::string line;
  while (file.next_content(line)) {
    const auto tok = tokenize(line);
    if (tok.items.size() < 4) {
      file.fail(line, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]");
    }
    CameraIntrinsics camera;
    camera.camera_id = file.parse_int<std::uint32_t>(tok.items[0], line, "CAMERA_ID");
    camera.model_name = std::string(tok.items[1]);
    camera.width = file.parse_int<std::uint64_t>(tok.items[2], line, "WIDTH");
    camera.height = file.parse_int<std::uint64_t>(tok.items[3], line, "HEIGHT");
    if (camera.width == 0 || camera.height == 0) {
      file.fail(line, "camera size must be positive");
    }
    for (std::size_t i = 4; i < tok.items.size(); ++i) {
      camera.params.push_back(file.parse_double(tok.items[i], line, "PARAM"));
    }
    const int arity = camera_model_arity(camera.model_name);
    if (arity >= 0 && camera.params.size() != static_cast<std::size_t>(arity)) {
      file.fail(line, camera.model_name + " expects " + std::to_string(arity) +
                          " parameters");
    }
    if (!model.cameras.emplace(camera.camera_id, camera).second) {
      file.fail(line, "duplicate CAMERA_ID");
    }
  }
}

void read_images(const fs::path& path, SparseModel& model) {
  TextFile file(path);
  std::string line;
  while (file.next_content(line)) {
    const auto tok = tokenize(line);
    if (tok.items.size() < 10) {
      file.fail(line, "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME");
    }
    RegisteredImage image;
    image.image_id = file.parse_int<std::uint32_t>(tok.items[0], line, "IMAGE_ID");
    const double qw = file.parse_double(tok.items[1], line, "QW");
    const double qx = file.parse_double(tok.items[2], line, "QX");
    const double qy = file.parse_double(tok.items[3], line, "QY");
    const double qz = file.parse_double(tok.items[4], line, "QZ");
    const double norm = std::sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
    if (std::abs(norm - 1.0) >= 1e-3) {
      file.fail(line, "rotation quaternion is not unit length");
    }
    // Values already unit to rounding are kept bit-for-bit so that
    // write/parse cycles are exact.
    const double scale = std::abs(norm - 1.0) > 1e-12 ? 1.0 / norm : 1.0;
    image.rotation = Eigen::Quaterniond(qw * scale, qx * scale, qy * scale, qz * scale);
    image.translation = {file.parse_double(tok.items[5], line, "TX"),
                         file.parse_double(tok.items[6], line, "TY"),
                         file.parse_double(tok.items[7], line, "TZ")};
    image.camera_id = file.parse_int<std::uint32_t>(tok.items[8], line, "CAMERA_ID");
    image.name = std::string(trim(std::string_view(line).substr(tok.offsets[9])));

    // The observation line follows immediately and may be empty.
    std::string points_line;
    if (file.next(points_line)) {
      const auto pts = tokenize(points_line);
      if (pts.items.size() % 3 != 0) {
        file.fail(points_line, "expected X Y POINT3D_ID triples");
      }
      image.observations.reserve(pts.items.size() / 3);
      for (std::size_t i = 0; i < pts.items.size(); i += 3) {
        Observation obs;
        obs.x = file.parse_double(pts.items[i], points_line, "X");
        obs.y = file.parse_double(pts.items[i + 1], points_line, "Y");
        obs.point3d_id =
            file.parse_int<std::int64_t>(pts.items[i + 2], points_line, "POINT3D_ID");
        if (obs.point3d_id < -1) {
          file.fail(points_line, "bad POINT3D_ID");
        }
        image.observations.push_back(obs);
      }
    }
    if (!model.images.emplace(image.image_id, std::move(image)).second) {
      file.fail(line, "duplicate IMAGE_ID");
    }
  }
}

void read_points(const fs::path& path, SparseModel& model) {
  TextFile file(path);
  std::string line;
  while (file.next_content(line)) {
    const auto tok = tokenize(line);
    if (tok.items.size() < 8 || (tok.items.size() - 8) % 2 != 0) {
      file.fail(line, "expected POINT3D_ID X Y Z R G B ERROR TRACK[]");
    }
    Point3D point;
    point.point3d_id = file.parse_int<std::uint64_t>(tok.items[0], line, "POINT3D_ID");
    point.xyz = {file.parse_double(tok.items[1], line, "X"),
                 file.parse_double(tok.items[2], line, "Y"),
                 file.parse_double(tok.items[3], line, "Z")};
    for (int c = 0; c < 3; ++c) {
      const auto v = file.parse_int<unsigned>(tok.items[4 + c], line, "RGB");
      if (v > 255) {
        file.fail(line, "color component out of range");
      }
      point.rgb[c] = static_cast<std::uint8_t>(v);
    }
    point.error = file.parse_double(tok.items[7], line, "ERROR");
    for (std::size_t i = 8; i < tok.items.size(); i += 2) {
      point.track.push_back(
          {file.parse_int<std::uint32_t>(tok.items[i], line, "IMAGE_ID"),
           file.parse_int<std::uint32_t>(tok.items[i + 1], line, "POINT2D_IDX")});
    }
    if (!model.points.emplace(point.point3d_id, std::move(point)).second) {
      file.fail(line, "duplicate POINT3D_ID");
    }
  }
}

void check_integrity(const SparseModel& model) {
  const std::string where = " in " + model.source_path;
  for (const auto& [id, image] : model.images) {
    if (!model.cameras.count(image.camera_id)) {
      throw IntegrityError("image " + std::to_string(id) +
                           " references missing camera " +
                           std::to_string(image.camera_id) + where);
    }
    for (const auto& obs : image.observations) {
      if (obs.point3d_id >= 0 &&
          !model.points.count(static_cast<std::uint64_t>(obs.point3d_id))) {
        throw IntegrityError("image " + std::to_string(id) +
                             " observes missing point " +
                             std::to_string(obs.point3d_id) + where);
      }
    }
  }
  for (const auto& [id, point] : model.points) {
    if (point.track.size() < 2) {
      throw IntegrityError("point " + std::to_string(id) +
                           " has a track shorter than 2" + where);
    }
    for (const auto& el : point.track) {
      auto it = model.images.find(el.image_id);
      if (it == model.images.end()) {
        throw IntegrityError("point " + std::to_string(id) +
                             " references unregistered image " +
                             std::to_string(el.image_id) + where);
      }
      if (el.point2d_index >= it->second.observations.size()) {
        throw IntegrityError("point " + std::to_string(id) +
                             " references missing observation " +
                             std::to_string(el.point2d_index) + " of image " +
                             std::to_string(el.image_id) + where);
      }
    }
  }
}

// Last non-empty component, so "models/0/" compares as "0".
std::string directory_name(const fs::path& p) {
  auto name = p.filename().string();
  return name.empty() ? p.parent_path().filename().string() : name;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

int camera_model_arity(const std::string& model_name) {
  static const std::map<std::string, int> kArity = {
      {"SIMPLE_PINHOLE", 3}, {"PINHOLE", 4}, {"SIMPLE_RADIAL", 4},
      {"RADIAL", 5},         {"OPENCV", 8}};
  auto it = kArity.find(model_name);
  return it == kArity.end() ? -1 : it->second;
}

SparseModel parse_sparse_model(const fs::path& directory) {
  const fs::path cameras = directory / "cameras.txt";
  const fs::path images = directory / "images.txt";
  const fs::path points = directory / "points3D.txt";
  for (const auto& p : {cameras, images, points}) {
    if (!fs::is_regular_file(p)) {
      throw NotAModel(directory.string() + " has no " + p.filename().string());
    }
  }
  SparseModel model;
  model.source_path = directory.string();
  read_cameras(cameras, model);
  read_images(images, model);
  read_points(points, model);
  check_integrity(model);
  return model;
}

void write_sparse_model(const SparseModel& model, const fs::path& directory) {
  fs::create_directories(directory);
  auto open = [&](const char* name) {
    std::ofstream out(directory / name);
    if (!out) {
      throw Error("cannot write " + (directory / name).string());
    }
    return out;
  };
  {
    auto out = open("cameras.txt");
    out << "# Camera list with one line of data per camera:\n"
        << "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n"
        << "# Number of cameras: " << model.cameras.size() << "\n";
    for (const auto& [id, cam] : model.cameras) {
      out << id << ' ' << cam.model_name << ' ' << cam.width << ' '
          << cam.height;
      for (double p : cam.params) out << ' ' << format_double(p);
      out << '\n';
    }
  }
  {
    auto out = open("images.txt");
    out << "# Image list with two lines of data per image:\n"
        << "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n"
        << "#   POINTS2D[] as (X, Y, POINT3D_ID)\n"
        << "# Number of images: " << model.images.size() << "\n";
    for (const auto& [id, img] : model.images) {
      const auto& q = img.rotation;
      out << id << ' ' << format_double(q.w()) << ' ' << format_double(q.x())
          << ' ' << format_double(q.y()) << ' ' << format_double(q.z()) << ' '
          << format_double(img.translation.x()) << ' '
          << format_double(img.translation.y()) << ' '
          << format_double(img.translation.z()) << ' ' << img.camera_id << ' '
          << img.name << '\n';
      for (std::size_t i = 0; i < img.observations.size(); ++i) {
        const auto& o = img.observations[i];
        out << (i ? " " : "") << format_double(o.x) << ' ' << format_double(o.y)
            << ' ' << o.point3d_id;
      }
      out << '\n';
    }
  }
  {
    auto out = open("points3D.txt");
    out << "# 3D point list with one line of data per point:\n"
        << "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, "
           "POINT2D_IDX)\n"
        << "# Number of points: " << model.points.size() << "\n";
    for (const auto& [id, pt] : model.points) {
      out << id << ' ' << format_double(pt.xyz.x()) << ' '
          << format_double(pt.xyz.y()) << ' ' << format_double(pt.xyz.z())
          << ' ' << int(pt.rgb[0]) << ' ' << int(pt.rgb[1]) << ' '
          << int(pt.rgb[2]) << ' ' << format_double(pt.error);
      for (const auto& el : pt.track) {
        out << ' ' << el.image_id << ' ' << el.point2d_index;
      }
      out << '\n';
    }
  }
}

Eigen::Vector3d camera_center(const RegisteredImage& image) {
  return -(image.rotation.toRotationMatrix().transpose() * image.translation);
}

double registered_fraction(const SparseModel& model,
                           std::size_t total_input_frames) {
  if (total_input_frames == 0) {
    throw ContractError("registered_fraction: total_input_frames must be >= 1");
  }
  const double f = static_cast<double>(model.images.size()) /
                   static_cast<double>(total_input_frames);
  return std::clamp(f, 0.0, 1.0);
}

PoseDiversity pose_diversity(const SparseModel& model) {
  if (model.images.size() < 2) {
    throw InsufficientPoses("pose_diversity needs at least 2 registered images, got " +
                            std::to_string(model.images.size()));
  }
  std::vector<Eigen::Vector3d> centers;
  std::vector<Eigen::Quaterniond> rotations;
  for (const auto& [id, image] : model.images) {
    centers.push_back(camera_center(image));
    rotations.push_back(image.rotation.normalized());
  }
  const std::size_t n = centers.size();
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& c : centers) centroid += c;
  centroid /= double(n);
  double radius2 = 0;
  for (const auto& c : centers) radius2 += (c - centroid).squaredNorm();
  const double rms = std::sqrt(radius2 / double(n));

  double dist_sum = 0, angle_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dist_sum += (centers[i] - centers[j]).norm();
      const double dot = std::min(1.0, std::abs(rotations[i].dot(rotations[j])));
      angle_sum += 2.0 * std::acos(dot);
    }
  }
  const double pairs = double(n * (n - 1) / 2);
  PoseDiversity out;
  out.translational = rms > 1e-12 ? dist_sum / pairs / rms : 0.0;
  out.rotational = angle_sum / pairs;
  return out;
}

TriangulationAngle mean_triangulation_angle(const SparseModel& model) {
  std::map<std::uint32_t, Eigen::Vector3d> centers;
  for (const auto& [id, image] : model.images) {
    centers.emplace(id, camera_center(image));
  }
  TriangulationAngle out;
  double total = 0;
  for (const auto& [id, point] : model.points) {
    std::set<std::uint32_t> seen;
    std::vector<Eigen::Vector3d> rays;
    for (const auto& el : point.track) {
      auto it = centers.find(el.image_id);
      if (it == centers.end() || !seen.insert(el.image_id).second) {
        continue;
      }
      rays.push_back(it->second - point.xyz);
    }
    for (std::size_t i = 0; i < rays.size(); ++i) {
      for (std::size_t j = i + 1; j < rays.size(); ++j) {
        const double ni = rays[i].norm(), nj = rays[j].norm();
        if (ni == 0.0 || nj == 0.0) {
          ++out.skipped;
          continue;
        }
        // atan2 keeps precision near 0 and pi where acos does not.
        total += std::atan2(rays[i].cross(rays[j]).norm(), rays[i].dot(rays[j]));
        ++out.corners;
      }
    }
  }
  if (out.corners == 0) {
    throw InsufficientGeometry(
        "mean_triangulation_angle: no point with two distinct observing "
        "cameras" +
        (model.source_path.empty() ? std::string() : " in " + model.source_path));
  }
  out.mean_angle = total / double(out.corners);
  return out;
}

SelectedModel select_largest_model(std::span<const fs::path> candidates) {
  std::optional<SelectedModel> best;
  std::vector<std::pair<std::size_t, std::string>> failures;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    SparseModel model;
    try {
      model = parse_sparse_model(candidates[i]);
    } catch (const Error& e) {
      failures.emplace_back(i, e.what());
      continue;
    }
    if (!best) {
      best = SelectedModel{std::move(model), i, {}};
      continue;
    }
    const auto count = model.images.size();
    const auto best_count = best->model.images.size();
    const auto name = directory_name(candidates[i]);
    const auto best_name = directory_name(candidates[best->index]);
    const bool wins =
        count > best_count ||
        (count == best_count &&
         (name < best_name ||
          (name == best_name &&
           candidates[i].string() < candidates[best->index].string())));
    if (wins) {
      best = SelectedModel{std::move(model), i, {}};
    }
  }
  if (!best) {
    std::string reason = "no candidate sparse model could be parsed";
    if (!failures.empty()) {
      reason += " (first failure: " + failures.front().second + ")";
    }
    throw NoValidModel(reason);
  }
  best->failures = std::move(failures);
  return std::move(*best);
}

}  // namespace poolnet::colmap
