#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "poolnet/image.hpp"

namespace poolnet::data {

inline constexpr double kDefaultSuccessThreshold = 0.45;

struct LabelSet {
  int T_s = 0;
  double T_o = 0;
  double V_t = 0;
  double V_r = 0;
  std::optional<double> mean_tri_angle;
  std::int64_t source_model_index = -1;
};

enum class Split { unassigned, train, test };

const char* split_name(Split s);
Split parse_split(const std::string& s);

struct SceneRecord {
  std::string scene_id;
  std::vector<std::filesystem::path> frame_paths;
  std::optional<LabelSet> labels;
  Split split = Split::unassigned;
  // Where T_s came from, e.g. "colmap" for the registration rule. Free form;
  // empty when unknown.
  std::string label_source;

  std::size_t total_input_frames() const { return frame_paths.size(); }
};

// Throws ContractError when the LabelSet breaks T_s <=> T_o >= threshold or
// holds non-finite values.
void validate_labels(const LabelSet& labels, double threshold);

// Runs model selection and the geometric statistics over the candidate
// sparse-model directories. A scene with no parsable model is labelled as a
// failure (T_s = 0, source_model_index = -1). Fewer than 2 registered images
// give V_t = V_r = 0; no triangulated corner leaves mean_tri_angle empty.
SceneRecord attach_labels(SceneRecord scene,
                          const std::vector<std::filesystem::path>& model_dirs,
                          double threshold = kDefaultSuccessThreshold);

// Equal-count subsample of both classes, shuffled. Throws ImbalanceError
// naming an empty class and ContractError on unlabelled records.
std::vector<SceneRecord> balance_classes(const std::vector<SceneRecord>& scenes,
                                         std::uint64_t seed);

// Seeded shuffle then prefix split at floor(ratio * n), with at least one
// scene on each side. The returned records have their split field set.
std::pair<std::vector<SceneRecord>, std::vector<SceneRecord>> split_train_test(
    const std::vector<SceneRecord>& scenes, double ratio, std::uint64_t seed);

// Image files directly inside `dir` that some decoder claims by extension,
// sorted by file name.
std::vector<std::filesystem::path> list_frames(
    const std::filesystem::path& dir,
    const DecoderRegistry& decoders = default_decoders());

// JSON Lines. Frame paths are stored relative to the manifest's directory
// when possible and resolved against it on read.
void write_manifest(const std::filesystem::path& path,
                    const std::vector<SceneRecord>& scenes);
std::vector<SceneRecord> read_manifest(const std::filesystem::path& path);

std::string manifest_line(const SceneRecord& scene,
                          const std::filesystem::path& base);

}  // namespace poolnet::data
