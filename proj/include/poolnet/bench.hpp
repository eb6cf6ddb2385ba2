#pragma once

#include <optional>
#include <string>
#include <vector>

#include "poolnet/dataset.hpp"
#include "poolnet/predict.hpp"

// Inference timing in the layout of a per-dataset seconds table: one row per
// dataset, one column per method, an Average row, and ratios of our mean to
// each baseline mean.
namespace poolnet::bench {

inline constexpr const char* kOursColumn = "Ours";

struct BaselineTiming {
  std::string dataset;
  std::string method;
  double seconds = 0;
};

// Columns dataset,method,seconds; an optional header line with exactly those
// names, blank lines and '#' comments are skipped. Throws ParseError naming
// the line for wrong arity, empty fields, non-numeric or negative seconds and
// duplicate (dataset, method) pairs.
std::vector<BaselineTiming> parse_baselines(const std::string& text, const std::string& origin);
std::vector<BaselineTiming> read_baselines(const std::string& path);

struct SceneTiming {
  std::string dataset;
  std::size_t frames = 0;
  std::size_t unreadable = 0;
  std::optional<double> seconds;  // empty when prediction failed
  std::string error;
};

// Wall-clock of ingest + embed every frame + classify, via predict_scene_full.
// Never throws for per-scene failures; those land in `error`.
SceneTiming time_scene(const data::SceneRecord& scene, const model::Encoder& encoder,
                       const model::SequenceModel& sequence,
                       const model::PredictOptions& options = {});

struct Row {
  std::string dataset;
  std::optional<std::size_t> frames, unreadable;
  std::vector<std::optional<double>> seconds;  // aligned with Table::methods
};

struct Table {
  std::vector<std::string> methods;  // baselines in first-seen order, then Ours
  std::vector<Row> rows;
  // Mean over the rows holding a value; empty when a column has none.
  std::vector<std::optional<double>> average;
  // Ours average / method average, for baseline columns only (same index as
  // methods); empty without both means.
  std::vector<std::optional<double>> ratio;
  // Baseline column with the smallest average, if any.
  std::optional<std::size_t> fastest_baseline;
  std::vector<std::string> errors;
};

// Rows: measured datasets in the given order, then baseline-only datasets in
// first-seen order.
Table build_table(const std::vector<SceneTiming>& ours, const std::vector<BaselineTiming>& baselines);

std::string render_text(const Table& table);
std::string render_csv(const Table& table);

}  // namespace poolnet::bench
