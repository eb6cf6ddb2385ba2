#include "poolnet/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "poolnet/bench.hpp"
#include "poolnet/checkpoint.hpp"
#include "poolnet/error.hpp"
#include "poolnet/predict.hpp"
#include "poolnet/trainer.hpp"

namespace poolnet::cli {

namespace fs = std::filesystem;

namespace {

// Missing files and similar invocation problems.
class InputError : public Error {
 public:
  using Error::Error;
};

// Collapse aborts and unexpected failures map to 1, everything the caller
// could fix by changing the invocation or its inputs to 2.
bool is_input_error(const std::exception& e) {
  return dynamic_cast<const InputError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
         dynamic_cast<const ParseError*>(&e) || dynamic_cast<const ContractError*>(&e) ||
         dynamic_cast<const ImbalanceError*>(&e) || dynamic_cast<const NotACheckpoint*>(&e) ||
         dynamic_cast<const VersionError*>(&e) || dynamic_cast<const CorruptCheckpoint*>(&e);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto res = std::from_chars(value.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  return parse_number<std::size_t>(key, value);
}

double parse_double(const std::string& key, const std::string& value) {
  return parse_number<double>(key, value);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << text;
}

std::vector<data::SceneRecord> load_scenes(const std::string& manifest) {
  if (!fs::is_regular_file(manifest)) throw InputError("manifest not found: " + manifest);
  auto scenes = data::read_manifest(manifest);
  if (scenes.empty()) throw InputError("manifest has no scenes: " + manifest);
  return scenes;
}

std::vector<data::SceneRecord> with_default_split(std::vector<data::SceneRecord> scenes,
                                                  const Config& cfg, std::ostream& err) {
  const bool unassigned = std::all_of(scenes.begin(), scenes.end(), [](const auto& s) {
    return s.split == data::Split::unassigned;
  });
  if (!unassigned) return scenes;
  auto [train, test] = data::split_train_test(scenes, cfg.split_ratio, cfg.seed);
  err << "note: manifest has no split; using ratio " << cfg.split_ratio << " with seed "
      << cfg.seed << " (" << train.size() << " train, " << test.size() << " test)\n";
  train.insert(train.end(), test.begin(), test.end());
  return train;
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw InputError(std::string(what) + " not found: " + path);
}

std::string format_probability(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", p);
  return buf;
}

std::string report_path(const std::string& explicit_path, const std::string& checkpoint) {
  return explicit_path.empty() ? checkpoint + ".report.jsonl" : explicit_path;
}

// --- commands ---------------------------------------------------------------

int cmd_label(const Config& cfg, const std::string& scenes_dir, const std::string& models_dir,
              const std::string& manifest, std::ostream& out, std::ostream& err) {
  if (!fs::is_directory(scenes_dir)) throw InputError("scenes directory not found: " + scenes_dir);
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(scenes_dir)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw InputError("no scene directories under " + scenes_dir);

  std::vector<data::SceneRecord> records;
  std::size_t failed = 0;
  for (const auto& dir : dirs) {
    const auto id = dir.filename().string();
    try {
      data::SceneRecord scene;
      scene.scene_id = id;
      scene.frame_paths = data::list_frames(dir);
      if (scene.frame_paths.empty()) throw InputError("no readable frame files in " + dir.string());
      std::vector<fs::path> candidates;
      const auto model_root = fs::path(models_dir) / id;
      if (fs::is_directory(model_root)) {
        for (const auto& entry : fs::directory_iterator(model_root)) {
          if (entry.is_directory()) candidates.push_back(entry.path());
        }
      }
      std::sort(candidates.begin(), candidates.end());
      records.push_back(data::attach_labels(std::move(scene), candidates, cfg.threshold));
    } catch (const std::exception& e) {
      ++failed;
      err << "error\t" << id << "\t" << e.what() << "\n";
    }
  }
  data::write_manifest(manifest, records);
  std::size_t positive = 0;
  for (const auto& r : records) positive += r.labels->T_s;
  out << "labelled " << records.size() << " scenes: T_s=1 " << positive << ", T_s=0 "
      << records.size() - positive << "; errors " << failed << "\n";
  return failed ? kPartialFailure : kSuccess;
}

int cmd_pretrain(const Config& cfg, const std::string& manifest, const std::string& out_path,
                 const std::string& report, std::ostream& out, std::ostream& err) {
  auto scenes = with_default_split(load_scenes(manifest), cfg, err);
  train::PretrainConfig pc;
  pc.encoder.input_side = cfg.image_side;
  pc.encoder.channels = cfg.channels;
  pc.batch_size = cfg.pretrain_batch_size;
  pc.epochs = cfg.pretrain_epochs;
  pc.adam = cfg.pretrain_adam;
  pc.margin = cfg.pretrain_margin;
  pc.tau = cfg.pretrain_tau;
  pc.eval_pairs = cfg.pretrain_eval_pairs;
  const auto result = train::pretrain_encoder(scenes, pc, cfg.seed);
  checkpoint::save_encoder(out_path, result.encoder,
                           checkpoint::OptimizerState::capture(result.optimizer));
  write_file(report_path(report, out_path), result.report.to_jsonl());
  for (const auto& w : result.report.warnings) err << "warning: " << w << "\n";
  out << "pretrained " << result.report.steps.size() << " steps; pair_accuracy "
      << result.report.final_metric;
  if (result.report.initial_metric) out << " (initial " << *result.report.initial_metric << ")";
  out << "\n";
  return kSuccess;
}

int cmd_train(const Config& cfg, const std::string& manifest, const std::string& encoder_path,
              const std::string& out_path, const std::string& report, std::ostream& out,
              std::ostream& err) {
  auto scenes = load_scenes(manifest);
  require_file(encoder_path, "encoder checkpoint");
  const auto encoder = checkpoint::load_encoder(encoder_path).params;
  if (encoder.config.latent_dim != model::kLatentDim) {
    throw ConfigError("encoder latent width " + std::to_string(encoder.config.latent_dim) +
                      " is not " + std::to_string(model::kLatentDim));
  }
  for (const auto& s : scenes) {
    if (!s.labels) throw InputError("scene '" + s.scene_id + "' has no labels; run label first");
  }
  scenes = with_default_split(data::balance_classes(scenes, cfg.seed), cfg, err);
  std::sort(scenes.begin(), scenes.end(),
            [](const auto& a, const auto& b) { return a.scene_id < b.scene_id; });

  train::ClassifierConfig cc;
  cc.sequence.sequence_length = cfg.sequence_length;
  cc.sequence.width = encoder.config.latent_dim;
  cc.sequence.heads = cfg.heads;
  cc.sequence.blocks = cfg.blocks;
  cc.batch_size = cfg.train_batch_size;
  cc.adam = cfg.train_adam;
  cc.max_steps = cfg.train_max_steps;
  cc.eval_every = cfg.train_eval_every;
  cc.patience = cfg.train_patience;
  cc.min_delta = cfg.train_min_delta;
  const auto before = read_file(encoder_path);
  const auto result = train::train_classifier(encoder, scenes, cc, cfg.seed);
  if (!result.encoder_unchanged || read_file(encoder_path) != before) {
    err << "error: encoder parameters changed during classifier training\n";
    return kPartialFailure;
  }
  checkpoint::save_sequence_model(out_path, result.sequence,
                                  checkpoint::OptimizerState::capture(result.optimizer));
  write_file(report_path(report, out_path), result.report.to_jsonl());
  for (const auto& w : result.report.warnings) err << "warning: " << w << "\n";
  out << "trained " << result.report.steps.size() << " steps"
      << (result.report.stopped_early ? " (early stop)" : "") << "; test_accuracy "
      << result.test_accuracy << "\n";
  return kSuccess;
}

struct Models {
  model::Encoder encoder;
  model::SequenceModel sequence;
};

Models load_models(const std::string& encoder_path, const std::string& model_path) {
  require_file(encoder_path, "encoder checkpoint");
  require_file(model_path, "model checkpoint");
  Models m{checkpoint::load_encoder(encoder_path).params,
           checkpoint::load_sequence_model(model_path).params};
  model::check_compatible(m.encoder, m.sequence);
  return m;
}

std::vector<data::SceneRecord> sorted(std::vector<data::SceneRecord> scenes) {
  std::sort(scenes.begin(), scenes.end(),
            [](const auto& a, const auto& b) { return a.scene_id < b.scene_id; });
  return scenes;
}

int cmd_predict(const Config& cfg, const std::string& manifest, const std::string& encoder_path,
                const std::string& model_path, bool full, std::ostream& out) {
  const auto scenes = sorted(load_scenes(manifest));
  const auto m = load_models(encoder_path, model_path);
  model::PredictOptions options;
  options.threshold = cfg.accept_threshold;
  std::size_t failed = 0;
  for (const auto& scene : scenes) {
    try {
      const auto p = full ? model::predict_scene_full(scene, m.encoder, m.sequence, options)
                          : model::predict_scene(scene, m.encoder, m.sequence, options);
      out << scene.scene_id << "\t" << format_probability(p.probability) << "\t"
          << (p.accept ? "true" : "false") << "\n";
    } catch (const Error& e) {
      ++failed;
      out << scene.scene_id << "\terror\t" << e.what() << "\n";
    }
    out.flush();
  }
  return failed == scenes.size() ? kPartialFailure : kSuccess;
}

int cmd_bench(const Config& cfg, const std::string& manifest, const std::string& encoder_path,
              const std::string& model_path, const std::string& baselines_path,
              const std::string& timings_path, const std::string& out_dir, std::ostream& out) {
  std::vector<bench::BaselineTiming> baselines;
  if (!baselines_path.empty()) {
    require_file(baselines_path, "baseline file");
    baselines = bench::parse_baselines(read_file(baselines_path), baselines_path);
  }
  if (!timings_path.empty()) {
    require_file(timings_path, "timings file");
    for (auto t : bench::parse_baselines(read_file(timings_path), timings_path)) {
      t.method = bench::kOursColumn;
      baselines.push_back(std::move(t));
    }
  }
  if (manifest.empty() && timings_path.empty()) {
    throw InputError("bench needs --manifest (with --encoder and --model) or --timings");
  }
  std::vector<bench::SceneTiming> measured;
  if (!manifest.empty()) {
    const auto scenes = sorted(load_scenes(manifest));
    const auto m = load_models(encoder_path, model_path);
    model::PredictOptions options;
    options.threshold = cfg.accept_threshold;
    for (const auto& s : scenes) measured.push_back(bench::time_scene(s, m.encoder, m.sequence, options));
  }
  const auto table = bench::build_table(measured, baselines);
  auto text = bench::render_text(table);
  double seconds = 0;
  std::size_t frames = 0;
  for (const auto& t : measured) {
    if (!t.seconds) continue;
    seconds += *t.seconds;
    frames += t.frames - t.unreadable;
  }
  if (seconds > 0) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "throughput: %.1f frames/s over %zu frames\n",
                  double(frames) / seconds, frames);
    text += buf;
  }
  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "bench.txt", text);
  write_file(fs::path(out_dir) / "bench.csv", bench::render_csv(table));
  out << text;
  return table.errors.empty() ? kSuccess : kPartialFailure;
}

}  // namespace

void Config::set(const std::string& key, const std::string& value) {
  if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
  else if (key == "threshold") threshold = parse_double(key, value);
  else if (key == "accept_threshold") accept_threshold = parse_double(key, value);
  else if (key == "image_side") image_side = parse_size(key, value);
  else if (key == "channels") {
    std::vector<std::size_t> c;
    std::istringstream in(value);
    std::string part;
    while (std::getline(in, part, ',')) c.push_back(parse_size(key, trim(part)));
    channels = std::move(c);
  }
  else if (key == "sequence_length") sequence_length = parse_size(key, value);
  else if (key == "heads") heads = parse_size(key, value);
  else if (key == "blocks") blocks = parse_size(key, value);
  else if (key == "split_ratio") split_ratio = parse_double(key, value);
  else if (key == "pretrain.batch_size") pretrain_batch_size = parse_size(key, value);
  else if (key == "pretrain.epochs") pretrain_epochs = parse_size(key, value);
  else if (key == "pretrain.learning_rate") pretrain_adam.learning_rate = parse_double(key, value);
  else if (key == "pretrain.margin") pretrain_margin = parse_double(key, value);
  else if (key == "pretrain.tau") pretrain_tau = parse_double(key, value);
  else if (key == "pretrain.eval_pairs") pretrain_eval_pairs = parse_size(key, value);
  else if (key == "train.batch_size") train_batch_size = parse_size(key, value);
  else if (key == "train.learning_rate") train_adam.learning_rate = parse_double(key, value);
  else if (key == "train.max_steps") train_max_steps = parse_size(key, value);
  else if (key == "train.eval_every") train_eval_every = parse_size(key, value);
  else if (key == "train.patience") train_patience = parse_size(key, value);
  else if (key == "train.min_delta") train_min_delta = parse_double(key, value);
  else if (key == "adam.beta1") pretrain_adam.beta1 = train_adam.beta1 = parse_double(key, value);
  else if (key == "adam.beta2") pretrain_adam.beta2 = train_adam.beta2 = parse_double(key, value);
  else if (key == "adam.epsilon") pretrain_adam.epsilon = train_adam.epsilon = parse_double(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

void Config::validate() const {
  if (!(threshold > 0 && threshold < 1)) {
    throw ConfigError("threshold must lie in (0,1), got " + std::to_string(threshold));
  }
  if (!(accept_threshold > 0 && accept_threshold < 1)) {
    throw ConfigError("accept_threshold must lie in (0,1), got " + std::to_string(accept_threshold));
  }
  if (sequence_length < 2) throw ConfigError("sequence_length must be at least 2");
  if (image_side == 0 || image_side % 16 != 0) {
    throw ConfigError("image_side must be a positive multiple of 16, got " + std::to_string(image_side));
  }
  if (!(split_ratio > 0 && split_ratio < 1)) throw ConfigError("split_ratio must lie in (0,1)");
  if (pretrain_batch_size == 0 || train_batch_size == 0) throw ConfigError("batch sizes must be positive");
  if (train_eval_every == 0) throw ConfigError("train.eval_every must be positive");
  model::EncoderConfig e;
  e.input_side = image_side;
  e.channels = channels;
  e.validate();
  model::SequenceModelConfig s;
  s.sequence_length = sequence_length;
  s.heads = heads;
  s.blocks = blocks;
  s.validate();
}

Config parse_config(const std::string& text, const std::string& origin, Config base) {
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const auto line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(origin, line_no, line, "expected key=value");
    const auto key = trim(line.substr(0, eq));
    try {
      base.set(key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ParseError(origin, line_no, line, e.what());
    }
  }
  return base;
}

Config load_config(const std::string& path, Config base) {
  return parse_config(read_file(path), path, std::move(base));
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"poolnet: predict structure-from-motion success from raw frames"};
  app.require_subcommand(1);

  std::string config_path;
  std::map<std::string, std::string> flag_values;
  // Flags that override config keys share one storage map.
  auto add_override = [&](CLI::App* sub, const std::string& flag, const std::string& key,
                          const std::string& help) {
    sub->add_option(flag, flag_values[sub->get_name() + key], help);
  };

  std::string scenes_dir, models_dir, manifest, out_path, report, encoder_path, model_path,
      baselines, timings, out_dir;
  bool full = false;

  auto* label = app.add_subcommand("label", "attach labels from sparse reconstructions");
  label->add_option("--scenes", scenes_dir, "directory with one frame folder per scene")->required();
  label->add_option("--models", models_dir, "directory with <scene>/<k>/ sparse models")->required();
  label->add_option("--manifest", manifest, "manifest to write")->required();
  add_override(label, "--threshold", "threshold", "registered fraction for success");

  auto* pretrain = app.add_subcommand("pretrain", "contrastive encoder pretraining");
  pretrain->add_option("--manifest", manifest)->required();
  pretrain->add_option("--out", out_path, "encoder checkpoint")->required();
  pretrain->add_option("--report", report, "JSON Lines report (default <out>.report.jsonl)");

  auto* trainc = app.add_subcommand("train", "sequence classifier on the frozen encoder");
  trainc->add_option("--manifest", manifest)->required();
  trainc->add_option("--encoder", encoder_path)->required();
  trainc->add_option("--out", out_path, "classifier checkpoint")->required();
  trainc->add_option("--report", report, "JSON Lines report (default <out>.report.jsonl)");

  auto* predict = app.add_subcommand("predict", "per-scene verdicts");
  predict->add_option("--manifest", manifest)->required();
  predict->add_option("--encoder", encoder_path)->required();
  predict->add_option("--model", model_path)->required();
  predict->add_flag("--full", full, "embed every frame and average window logits");
  add_override(predict, "--threshold", "accept_threshold", "acceptance probability");

  auto* benchc = app.add_subcommand("bench", "timing table against baseline methods");
  benchc->add_option("--manifest", manifest);
  benchc->add_option("--encoder", encoder_path);
  benchc->add_option("--model", model_path);
  benchc->add_option("--baselines", baselines, "CSV dataset,method,seconds");
  benchc->add_option("--timings", timings, "CSV dataset,method,seconds used as our column");
  benchc->add_option("--out", out_dir, "output directory")->required();

  for (auto* sub : {label, pretrain, trainc, predict, benchc}) {
    sub->add_option("--config", config_path, "key=value config file");
    add_override(sub, "--seed", "seed", "master seed");
  }
  for (auto* sub : {pretrain, trainc}) {
    add_override(sub, "--image-side", "image_side", "frame side length");
    add_override(sub, "--learning-rate",
                 sub == pretrain ? "pretrain.learning_rate" : "train.learning_rate", "Adam step size");
    add_override(sub, "--batch-size", sub == pretrain ? "pretrain.batch_size" : "train.batch_size",
                 "batch size");
  }
  add_override(pretrain, "--epochs", "pretrain.epochs", "passes over the training frames");
  add_override(trainc, "--max-steps", "train.max_steps", "hard step cap");

  std::vector<const char*> argv{"poolnet"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kInvalidInput;
  }

  try {
    Config cfg;
    if (!config_path.empty()) cfg = load_config(config_path, cfg);
    for (const auto& [key, value] : flag_values) {
      const auto* sub = app.get_subcommands().front();
      const auto prefix = sub->get_name();
      if (key.rfind(prefix, 0) != 0 || value.empty()) continue;
      cfg.set(key.substr(prefix.size()), value);
    }
    cfg.validate();

    if (label->parsed()) return cmd_label(cfg, scenes_dir, models_dir, manifest, out, err);
    if (pretrain->parsed()) return cmd_pretrain(cfg, manifest, out_path, report, out, err);
    if (trainc->parsed()) return cmd_train(cfg, manifest, encoder_path, out_path, report, out, err);
    if (predict->parsed()) return cmd_predict(cfg, manifest, encoder_path, model_path, full, out);
    return cmd_bench(cfg, manifest, encoder_path, model_path, baselines, timings, out_dir, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return is_input_error(e) ? kInvalidInput : kPartialFailure;
  }
}

}  // namespace poolnet::cli
