#include "poolnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <set>

#include "poolnet/error.hpp"
#include "poolnet/rng.hpp"
#include "poolnet/sparse_model.hpp"

namespace poolnet::data {
namespace fs = std::filesystem;
using nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::unassigned: break;
  }
  return "unassigned";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "unassigned" || s.empty()) return Split::unassigned;
  throw ContractError("unknown split '" + s + "'");
}

void validate_labels(const LabelSet& l, double threshold) {
  const bool finite = std::isfinite(l.T_o) && std::isfinite(l.V_t) &&
                      std::isfinite(l.V_r) &&
                      (!l.mean_tri_angle || std::isfinite(*l.mean_tri_angle));
  if (!finite) throw ContractError("label set holds a non-finite value");
  if (l.T_s != 0 && l.T_s != 1) throw ContractError("T_s must be 0 or 1");
  if ((l.T_s == 1) != (l.T_o >= threshold)) {
    throw ContractError("T_s=" + std::to_string(l.T_s) + " inconsistent with T_o=" +
                        std::to_string(l.T_o) + " at threshold " +
                        std::to_string(threshold));
  }
}

SceneRecord attach_labels(SceneRecord scene, const std::vector<fs::path>& model_dirs,
                          double threshold) {
  if (scene.total_input_frames() == 0) {
    throw ContractError("attach_labels: scene '" + scene.scene_id + "' has no frames");
  }
  LabelSet labels;
  try {
    auto selected = colmap::select_largest_model(model_dirs);
    labels.source_model_index = static_cast<std::int64_t>(selected.index);
    labels.T_o = colmap::registered_fraction(selected.model, scene.total_input_frames());
    if (selected.model.images.size() >= 2) {
      const auto d = colmap::pose_diversity(selected.model);
      labels.V_t = d.translational;
      labels.V_r = d.rotational;
    }
    try {
      labels.mean_tri_angle = colmap::mean_triangulation_angle(selected.model).mean_angle;
    } catch (const InsufficientGeometry&) {
    }
  } catch (const NoValidModel&) {
    labels = LabelSet{};
  }
  labels.T_s = labels.T_o >= threshold ? 1 : 0;
  scene.labels = labels;
  if (scene.label_source.empty()) scene.label_source = "colmap";
  return scene;
}

std::vector<SceneRecord> balance_classes(const std::vector<SceneRecord>& scenes,
                                         std::uint64_t seed) {
  std::vector<std::size_t> positive, negative;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (!scenes[i].labels) {
      throw ContractError("balance_classes: scene '" + scenes[i].scene_id + "' is unlabelled");
    }
    (scenes[i].labels->T_s == 1 ? positive : negative).push_back(i);
  }
  if (positive.empty()) throw ImbalanceError("no scenes in class T_s=1 (positive)");
  if (negative.empty()) throw ImbalanceError("no scenes in class T_s=0 (negative)");
  Rng rng(seed);
  rng.shuffle(positive);
  rng.shuffle(negative);
  const auto n = std::min(positive.size(), negative.size());
  std::vector<std::size_t> chosen(positive.begin(), positive.begin() + n);
  chosen.insert(chosen.end(), negative.begin(), negative.begin() + n);
  rng.shuffle(chosen);
  std::vector<SceneRecord> out;
  out.reserve(chosen.size());
  for (auto i : chosen) out.push_back(scenes[i]);
  return out;
}

std::pair<std::vector<SceneRecord>, std::vector<SceneRecord>> split_train_test(
    const std::vector<SceneRecord>& scenes, double ratio, std::uint64_t seed) {
  if (scenes.size() < 2) throw ContractError("split_train_test needs at least 2 scenes");
  if (!(ratio > 0 && ratio < 1)) throw ContractError("split ratio must be in (0, 1)");
  std::vector<std::size_t> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  auto cut = static_cast<std::size_t>(std::floor(ratio * double(scenes.size())));
  cut = std::clamp<std::size_t>(cut, 1, scenes.size() - 1);
  std::pair<std::vector<SceneRecord>, std::vector<SceneRecord>> out;
  for (std::size_t k = 0; k < order.size(); ++k) {
    SceneRecord r = scenes[order[k]];
    r.split = k < cut ? Split::train : Split::test;
    (k < cut ? out.first : out.second).push_back(std::move(r));
  }
  return out;
}

std::vector<fs::path> list_frames(const fs::path& dir, const DecoderRegistry& decoders) {
  std::vector<fs::path> frames;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && decoders.handles_extension(entry.path())) {
      frames.push_back(entry.path());
    }
  }
  std::sort(frames.begin(), frames.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string() < b.filename().string();
  });
  return frames;
}

namespace {

json labels_to_json(const LabelSet& l) {
  json j = {{"T_s", l.T_s},
            {"T_o", l.T_o},
            {"V_t", l.V_t},
            {"V_r", l.V_r},
            {"mean_tri_angle", nullptr},
            {"source_model_index", l.source_model_index}};
  if (l.mean_tri_angle) j["mean_tri_angle"] = *l.mean_tri_angle;
  return j;
}

LabelSet labels_from_json(const json& j) {
  LabelSet l;
  l.T_s = j.at("T_s").get<int>();
  l.T_o = j.at("T_o").get<double>();
  l.V_t = j.value("V_t", 0.0);
  l.V_r = j.value("V_r", 0.0);
  if (j.contains("mean_tri_angle") && !j["mean_tri_angle"].is_null()) {
    l.mean_tri_angle = j["mean_tri_angle"].get<double>();
  }
  l.source_model_index = j.value("source_model_index", std::int64_t{-1});
  return l;
}

}  // namespace

std::string manifest_line(const SceneRecord& scene, const fs::path& base) {
  json frames = json::array();
  for (const auto& f : scene.frame_paths) {
    fs::path stored = f;
    if (!base.empty() && f.is_absolute()) {
      auto rel = f.lexically_relative(base);
      if (!rel.empty() && *rel.begin() != "..") stored = rel;
    }
    frames.push_back(stored.generic_string());
  }
  json j = {{"scene_id", scene.scene_id},
            {"frames", frames},
            {"labels", scene.labels ? labels_to_json(*scene.labels) : json(nullptr)},
            {"split", split_name(scene.split)}};
  if (!scene.label_source.empty()) j["label_source"] = scene.label_source;
  return j.dump();
}

void write_manifest(const fs::path& path, const std::vector<SceneRecord>& scenes) {
  std::set<std::string> ids;
  for (const auto& s : scenes) {
    if (!ids.insert(s.scene_id).second) {
      throw ContractError("duplicate scene_id '" + s.scene_id + "' in manifest");
    }
  }
  const auto base = fs::absolute(path).parent_path();
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path.string());
  for (const auto& s : scenes) out << manifest_line(s, base) << "\n";
}

std::vector<SceneRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  const auto base = fs::absolute(path).parent_path();
  std::vector<SceneRecord> scenes;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& reason) {
      throw ParseError(path.string(), line_number, line, reason);
    };
    try {
      const auto j = json::parse(line);
      SceneRecord s;
      s.scene_id = j.at("scene_id").get<std::string>();
      for (const auto& f : j.at("frames")) {
        fs::path p = f.get<std::string>();
        s.frame_paths.push_back(p.is_absolute() ? p : base / p);
      }
      if (j.contains("labels") && !j["labels"].is_null()) {
        s.labels = labels_from_json(j["labels"]);
      }
      s.split = parse_split(j.value("split", std::string("unassigned")));
      s.label_source = j.value("label_source", std::string());
      if (s.frame_paths.empty()) fail("scene has no frames");
      if (!ids.insert(s.scene_id).second) fail("duplicate scene_id");
      scenes.push_back(std::move(s));
    } catch (const json::exception& e) {
      fail(e.what());
    } catch (const ContractError& e) {
      fail(e.what());
    }
  }
  return scenes;
}

}  // namespace poolnet::data
