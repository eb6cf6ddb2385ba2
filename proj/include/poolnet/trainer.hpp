#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "poolnet/adam.hpp"
#include "poolnet/dataset.hpp"
#include "poolnet/model.hpp"

// Two-phase training: contrastive encoder pretraining, then the sequence
// classifier on top of the frozen encoder.
namespace poolnet::train {

// Lazily ingested, cached frames of a scene list.
class FrameStore {
 public:
  FrameStore(std::vector<data::SceneRecord> scenes, std::size_t side,
             const data::DecoderRegistry& decoders = data::default_decoders());

  std::size_t scene_count() const { return scenes_.size(); }
  std::size_t frame_count(std::size_t scene) const;
  const data::SceneRecord& scene(std::size_t i) const { return scenes_[i]; }
  const std::vector<data::SceneRecord>& scenes() const { return scenes_; }
  std::size_t side() const { return side_; }
  std::size_t total_frames() const;

  // Throws DecodeError / UnsupportedFormat for unreadable frames.
  const Tensor& frame(std::size_t scene, std::size_t index) const;

 private:
  std::vector<data::SceneRecord> scenes_;
  std::size_t side_;
  const data::DecoderRegistry* decoders_;
  mutable std::map<std::pair<std::size_t, std::size_t>, Tensor> cache_;
};

struct PairRow {
  std::size_t anchor_scene = 0, anchor_frame = 0;
  std::size_t partner_scene = 0, partner_frame = 0;
  bool same_scene = false;
};

// Each row: a fair coin picks the branch. Same-scene rows draw a scene with
// at least two frames and two distinct frames of it; different-scene rows draw
// an anchor scene, then a partner scene uniformly among the others. Frames are
// uniform within their scene. Throws ContractError with fewer than two
// non-empty scenes or no scene holding two frames.
std::vector<PairRow> sample_pair_rows(const std::vector<std::size_t>& frame_counts,
                                      std::size_t batch, Rng& rng);

struct PairBatch {
  Tensor anchors;   // [B,3,S,S]
  Tensor partners;  // [B,3,S,S]
  std::vector<std::uint8_t> same_scene;
  std::vector<PairRow> rows;
};

PairBatch sample_pair_batch(const FrameStore& store, std::size_t batch, Rng& rng);

struct SequenceRow {
  std::size_t scene = 0;
  std::vector<std::size_t> frames;  // ascending
};

// Scenes uniform with replacement; frames uniform without replacement when
// the scene has at least L of them, with replacement otherwise.
std::vector<SequenceRow> sample_sequence_rows(const std::vector<std::size_t>& frame_counts,
                                              const std::vector<std::size_t>& candidates,
                                              std::size_t length, std::size_t batch, Rng& rng);

struct SequenceBatch {
  Tensor frames;  // [B,L,3,S,S]
  std::vector<float> labels;
  std::vector<std::string> scene_ids;
};

SequenceBatch sample_sequence_batch(const FrameStore& store,
                                    const std::vector<std::size_t>& candidates,
                                    std::size_t length, std::size_t batch, Rng& rng);

struct StepRecord {
  std::size_t step = 0;
  double loss = 0;
};

struct TrainReport {
  std::string phase;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config;
  std::vector<StepRecord> steps;
  // Per-epoch (pretrain) or per-evaluation (classifier) metric.
  std::vector<double> epoch_metric;
  std::string metric_name;
  std::vector<double> eval_loss;
  std::optional<double> initial_metric;
  double final_metric = 0;
  double wall_clock_seconds = 0;
  std::vector<std::string> warnings;
  bool stopped_early = false;

  // One JSON object per line: config, steps, evaluations, summary. The
  // wall-clock field is the only timing-dependent value.
  std::string to_jsonl() const;
};

struct PretrainConfig {
  model::EncoderConfig encoder;
  std::size_t batch_size = 64;
  std::size_t epochs = 1;
  AdamHyperparameters adam;
  double margin = 0.0;
  double tau = 0.5;
  std::size_t eval_pairs = 1024;
  // Optional cap, mainly for tests.
  std::optional<std::size_t> max_steps;
};

struct PretrainResult {
  model::Encoder encoder;
  Adam optimizer;
  TrainReport report;
};

// Pair accuracy: same-scene pairs need cos > tau, different-scene pairs
// cos <= tau.
double pair_accuracy(const model::Encoder& encoder, const FrameStore& store,
                     std::size_t pairs, double tau, Rng& rng);

// Trains on scenes with split == train (unassigned counts as train) and
// evaluates on split == test. Throws CollapseError when an embedding norm
// falls below 1e-6.
PretrainResult pretrain_encoder(const std::vector<data::SceneRecord>& scenes,
                                const PretrainConfig& config, std::uint64_t seed,
                                const data::DecoderRegistry& decoders = data::default_decoders());

struct ClassifierConfig {
  model::SequenceModelConfig sequence;
  std::size_t batch_size = 16;
  AdamHyperparameters adam;
  std::size_t max_steps = 1500;
  std::size_t eval_every = 25;
  std::size_t patience = 8;
  double min_delta = 1e-4;
  bool zero_init_head = true;
};

struct ClassifierResult {
  model::SequenceModel sequence;
  Adam optimizer;
  TrainReport report;
  double test_accuracy = 0;
  bool encoder_unchanged = false;
};

// Frame embeddings of every scene, computed once with the frozen encoder.
std::vector<Tensor> embed_store(const model::Encoder& encoder, const FrameStore& store);

ClassifierResult train_classifier(const model::Encoder& encoder,
                                  const std::vector<data::SceneRecord>& scenes,
                                  const ClassifierConfig& config, std::uint64_t seed,
                                  const data::DecoderRegistry& decoders = data::default_decoders());

struct Confusion {
  std::size_t true_positive = 0, true_negative = 0, false_positive = 0, false_negative = 0;
  std::size_t total() const { return true_positive + true_negative + false_positive + false_negative; }
  double accuracy() const;
};

struct Evaluation {
  double accuracy = 0;
  Confusion confusion;
};

// Accuracy of accept decisions against T_s. Throws ContractError on an empty
// or unlabelled set.
Evaluation evaluate_accuracy(const std::vector<data::SceneRecord>& scenes,
                             const std::function<bool(const data::SceneRecord&)>& accept);

Evaluation evaluate_accuracy(const std::vector<data::SceneRecord>& scenes,
                             const model::Encoder& encoder, const model::SequenceModel& sequence,
                             double threshold = 0.5);

}  // namespace poolnet::train
