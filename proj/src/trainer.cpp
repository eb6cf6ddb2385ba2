#include "poolnet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <json.hpp>

#include "poolnet/error.hpp"
#include "poolnet/predict.hpp"

namespace poolnet::train {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Stream salts; fixed so that every phase draws from its own sequence.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kSampleStream = 2;
constexpr std::uint64_t kEvalStream = 3;

std::vector<std::size_t> counts_of(const FrameStore& store) {
  std::vector<std::size_t> c(store.scene_count());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = store.frame_count(i);
  return c;
}

Tensor gather_rows(const Tensor& source, const std::vector<std::size_t>& rows) {
  const auto width = source.numel() / source.dim(0);
  std::vector<float> out;
  out.reserve(rows.size() * width);
  for (auto r : rows) {
    out.insert(out.end(), source.data().begin() + r * width,
               source.data().begin() + (r + 1) * width);
  }
  Shape shape = source.shape();
  shape[0] = rows.size();
  return Tensor(std::move(shape), std::move(out));
}

void check_collapse(const Tensor& embeddings, std::size_t step, const char* which) {
  const auto d = embeddings.dim(1);
  for (std::size_t r = 0; r < embeddings.dim(0); ++r) {
    double n2 = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const double v = embeddings.data()[r * d + k];
      n2 += v * v;
    }
    if (std::sqrt(n2) < 1e-6) {
      throw CollapseError("embedding collapse at step " + std::to_string(step) + ": " + which +
                          " row " + std::to_string(r) + " has norm " +
                          std::to_string(std::sqrt(n2)) + " (< 1e-6)");
    }
  }
}

std::vector<data::SceneRecord> with_split(const std::vector<data::SceneRecord>& scenes,
                                          bool test) {
  std::vector<data::SceneRecord> out;
  for (const auto& s : scenes) {
    if ((s.split == data::Split::test) == test) out.push_back(s);
  }
  return out;
}

std::string to_string(double v) {
  nlohmann::json j = v;
  return j.dump();
}

}  // namespace

FrameStore::FrameStore(std::vector<data::SceneRecord> scenes, std::size_t side,
                       const data::DecoderRegistry& decoders)
    : scenes_(std::move(scenes)), side_(side), decoders_(&decoders) {}

std::size_t FrameStore::frame_count(std::size_t scene) const {
  return scenes_.at(scene).frame_paths.size();
}

std::size_t FrameStore::total_frames() const {
  std::size_t n = 0;
  for (const auto& s : scenes_) n += s.frame_paths.size();
  return n;
}

const Tensor& FrameStore::frame(std::size_t scene, std::size_t index) const {
  const auto key = std::make_pair(scene, index);
  auto it = cache_.find(key);
  if (it == cache_.end()) {
    it = cache_.emplace(key, data::ingest_frame(scenes_.at(scene).frame_paths.at(index), side_,
                                                *decoders_)).first;
  }
  return it->second;
}

std::vector<PairRow> sample_pair_rows(const std::vector<std::size_t>& frame_counts,
                                      std::size_t batch, Rng& rng) {
  std::vector<std::size_t> any, multi;
  for (std::size_t i = 0; i < frame_counts.size(); ++i) {
    if (frame_counts[i] >= 1) any.push_back(i);
    if (frame_counts[i] >= 2) multi.push_back(i);
  }
  if (any.size() < 2) {
    throw ContractError("pair sampling needs at least 2 scenes with frames, got " +
                        std::to_string(any.size()));
  }
  if (multi.empty()) throw ContractError("pair sampling needs a scene with at least 2 frames");
  std::vector<PairRow> rows(batch);
  for (auto& row : rows) {
    row.same_scene = rng.bernoulli(0.5);
    if (row.same_scene) {
      const auto s = multi[rng.uniform_index(multi.size())];
      const auto n = frame_counts[s];
      row.anchor_scene = row.partner_scene = s;
      row.anchor_frame = rng.uniform_index(n);
      const auto other = rng.uniform_index(n - 1);
      row.partner_frame = other >= row.anchor_frame ? other + 1 : other;
    } else {
      const auto a = rng.uniform_index(any.size());
      auto b = rng.uniform_index(any.size() - 1);
      if (b >= a) ++b;
      row.anchor_scene = any[a];
      row.partner_scene = any[b];
      row.anchor_frame = rng.uniform_index(frame_counts[row.anchor_scene]);
      row.partner_frame = rng.uniform_index(frame_counts[row.partner_scene]);
    }
  }
  return rows;
}

PairBatch sample_pair_batch(const FrameStore& store, std::size_t batch, Rng& rng) {
  PairBatch b;
  b.rows = sample_pair_rows(counts_of(store), batch, rng);
  std::vector<Tensor> anchors, partners;
  for (const auto& r : b.rows) {
    anchors.push_back(store.frame(r.anchor_scene, r.anchor_frame));
    partners.push_back(store.frame(r.partner_scene, r.partner_frame));
    b.same_scene.push_back(r.same_scene ? 1 : 0);
  }
  b.anchors = model::stack_frames(anchors);
  b.partners = model::stack_frames(partners);
  return b;
}

std::vector<SequenceRow> sample_sequence_rows(const std::vector<std::size_t>& frame_counts,
                                              const std::vector<std::size_t>& candidates,
                                              std::size_t length, std::size_t batch, Rng& rng) {
  if (candidates.empty()) throw ContractError("sequence sampling needs at least one scene");
  std::vector<SequenceRow> rows(batch);
  for (auto& row : rows) {
    row.scene = candidates[rng.uniform_index(candidates.size())];
    const auto n = frame_counts.at(row.scene);
    if (n == 0) throw ContractError("sequence sampling hit a scene without frames");
    if (n >= length) {
      // Partial Fisher-Yates: the first `length` slots are a uniform sample.
      std::vector<std::size_t> idx(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
      for (std::size_t i = 0; i < length; ++i) {
        std::swap(idx[i], idx[i + rng.uniform_index(n - i)]);
      }
      row.frames.assign(idx.begin(), idx.begin() + length);
    } else {
      for (std::size_t i = 0; i < length; ++i) row.frames.push_back(rng.uniform_index(n));
    }
    std::sort(row.frames.begin(), row.frames.end());
  }
  return rows;
}

SequenceBatch sample_sequence_batch(const FrameStore& store,
                                    const std::vector<std::size_t>& candidates,
                                    std::size_t length, std::size_t batch, Rng& rng) {
  const auto rows = sample_sequence_rows(counts_of(store), candidates, length, batch, rng);
  SequenceBatch b;
  std::vector<Tensor> frames;
  for (const auto& r : rows) {
    const auto& scene = store.scene(r.scene);
    if (!scene.labels) throw ContractError("scene '" + scene.scene_id + "' is unlabelled");
    b.labels.push_back(static_cast<float>(scene.labels->T_s));
    b.scene_ids.push_back(scene.scene_id);
    for (auto f : r.frames) frames.push_back(store.frame(r.scene, f));
  }
  const auto s = store.side();
  b.frames = model::stack_frames(frames);
  b.frames = Tensor({batch, length, 3, s, s}, b.frames.values());
  return b;
}

std::string TrainReport::to_jsonl() const {
  using nlohmann::json;
  std::string out;
  json cfg = {{"type", "config"}, {"phase", phase}, {"seed", seed}};
  for (const auto& [k, v] : config) cfg["config"][k] = v;
  out += cfg.dump() + "\n";
  for (const auto& s : steps) {
    out += json{{"type", "step"}, {"phase", phase}, {"step", s.step}, {"loss", s.loss}}.dump() + "\n";
  }
  for (std::size_t i = 0; i < epoch_metric.size(); ++i) {
    json e = {{"type", "eval"}, {"phase", phase}, {"index", i}, {metric_name, epoch_metric[i]}};
    if (i < eval_loss.size()) e["test_loss"] = eval_loss[i];
    out += e.dump() + "\n";
  }
  json summary = {{"type", "summary"},
                  {"phase", phase},
                  {"seed", seed},
                  {"steps", steps.size()},
                  {metric_name, final_metric},
                  {"stopped_early", stopped_early},
                  {"warnings", warnings},
                  {"wall_clock_seconds", wall_clock_seconds}};
  if (initial_metric) summary["initial_" + metric_name] = *initial_metric;
  if (!steps.empty()) summary["first_loss"] = steps.front().loss;
  out += summary.dump() + "\n";
  return out;
}

double pair_accuracy(const model::Encoder& encoder, const FrameStore& store, std::size_t pairs,
                     double tau, Rng& rng) {
  const auto rows = sample_pair_rows(counts_of(store), pairs, rng);
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> slot;
  std::vector<Tensor> frames;
  for (const auto& r : rows) {
    for (auto key : {std::pair{r.anchor_scene, r.anchor_frame},
                     std::pair{r.partner_scene, r.partner_frame}}) {
      if (slot.emplace(key, frames.size()).second) frames.push_back(store.frame(key.first, key.second));
    }
  }
  const auto e = model::embed_frames(encoder, model::stack_frames(frames));
  const auto d = e.dim(1);
  std::size_t correct = 0;
  for (const auto& r : rows) {
    const auto a = slot[{r.anchor_scene, r.anchor_frame}];
    const auto b = slot[{r.partner_scene, r.partner_frame}];
    const double cos = cosine_similarity<float>(e.data().subspan(a * d, d), e.data().subspan(b * d, d));
    correct += (r.same_scene ? cos > tau : cos <= tau) ? 1 : 0;
  }
  return double(correct) / double(rows.size());
}

PretrainResult pretrain_encoder(const std::vector<data::SceneRecord>& scenes,
                                const PretrainConfig& config, std::uint64_t seed,
                                const data::DecoderRegistry& decoders) {
  const auto start = Clock::now();
  config.encoder.validate();
  if (config.batch_size == 0) throw ConfigError("batch size must be positive");
  Rng root(seed);
  Rng init_rng = root.derive(kInitStream);
  Rng sample_rng = root.derive(kSampleStream);
  const Rng eval_seed_rng = root.derive(kEvalStream);

  const auto side = config.encoder.input_side;
  FrameStore train_store(with_split(scenes, false), side, decoders);
  FrameStore test_store(with_split(scenes, true), side, decoders);

  auto encoder = model::Encoder::initialize(config.encoder, init_rng);
  encoder.set_requires_grad(true);
  Adam adam(encoder.tensors(), config.adam);

  TrainReport report;
  report.phase = "pretrain";
  report.seed = seed;
  report.metric_name = "pair_accuracy";
  report.config = {{"input_side", std::to_string(side)},
                   {"batch_size", std::to_string(config.batch_size)},
                   {"epochs", std::to_string(config.epochs)},
                   {"learning_rate", to_string(config.adam.learning_rate)},
                   {"margin", to_string(config.margin)},
                   {"tau", to_string(config.tau)},
                   {"train_scenes", std::to_string(train_store.scene_count())},
                   {"test_scenes", std::to_string(test_store.scene_count())}};

  const bool can_eval = test_store.scene_count() >= 2;
  auto evaluate = [&] {
    Rng eval_rng = eval_seed_rng;  // identical pairs at every evaluation
    return pair_accuracy(encoder, test_store, config.eval_pairs, config.tau, eval_rng);
  };
  if (!can_eval) report.warnings.push_back("fewer than 2 test scenes; pair accuracy not evaluated");
  if (can_eval) report.initial_metric = evaluate();

  const auto steps_per_epoch =
      (train_store.total_frames() + config.batch_size - 1) / config.batch_size;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      if (config.max_steps && step >= *config.max_steps) break;
      const auto batch = sample_pair_batch(train_store, config.batch_size, sample_rng);
      adam.zero_grad();
      Tape tape;
      const auto ea = model::encode_frames(tape, encoder, batch.anchors);
      const auto eb = model::encode_frames(tape, encoder, batch.partners);
      check_collapse(ea, step, "anchor");
      check_collapse(eb, step, "partner");
      const auto loss = cosine_embedding_loss(tape, ea, eb, std::span<const std::uint8_t>(batch.same_scene),
                                              static_cast<float>(config.margin));
      tape.backward(loss);
      adam.step();
      report.steps.push_back({step, loss.item()});
      ++step;
    }
    if (can_eval) report.epoch_metric.push_back(evaluate());
  }
  report.final_metric = report.epoch_metric.empty() ? 0.0 : report.epoch_metric.back();
  encoder.set_requires_grad(false);
  for (auto t : encoder.tensors()) t.clear_grad();
  report.wall_clock_seconds = seconds_since(start);
  return {std::move(encoder), std::move(adam), std::move(report)};
}

std::vector<Tensor> embed_store(const model::Encoder& encoder, const FrameStore& store) {
  std::vector<Tensor> out;
  for (std::size_t s = 0; s < store.scene_count(); ++s) {
    std::vector<Tensor> frames;
    for (std::size_t f = 0; f < store.frame_count(s); ++f) frames.push_back(store.frame(s, f));
    out.push_back(model::embed_frames(encoder, model::stack_frames(frames)));
  }
  return out;
}

namespace {

struct SequenceEval {
  double loss = 0;
  Evaluation evaluation;
};

SequenceEval evaluate_sequences(const model::SequenceModel& sequence,
                                const std::vector<Tensor>& embeddings, const FrameStore& store,
                                const std::vector<std::size_t>& scenes) {
  const auto length = sequence.config.sequence_length;
  std::vector<float> stacked;
  std::vector<float> targets;
  for (auto s : scenes) {
    const auto idx = model::select_frame_indices(store.frame_count(s), length);
    const auto rows = gather_rows(embeddings[s], idx);
    stacked.insert(stacked.end(), rows.data().begin(), rows.data().end());
    targets.push_back(static_cast<float>(store.scene(s).labels->T_s));
  }
  Tape tape(false);
  const auto logits = model::encode_sequences(
      tape, sequence, Tensor({scenes.size(), length, sequence.config.width}, std::move(stacked)));
  SequenceEval out;
  out.loss = bce_with_logits(tape, logits, std::span<const float>(targets)).item();
  std::vector<data::SceneRecord> records;
  std::map<std::string, bool> decision;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    records.push_back(store.scene(scenes[i]));
    decision[records.back().scene_id] = model::decide(logits.data()[i], 0.5).accept;
  }
  out.evaluation = evaluate_accuracy(records, [&](const data::SceneRecord& r) {
    return decision.at(r.scene_id);
  });
  return out;
}

}  // namespace

ClassifierResult train_classifier(const model::Encoder& encoder,
                                  const std::vector<data::SceneRecord>& scenes,
                                  const ClassifierConfig& config, std::uint64_t seed,
                                  const data::DecoderRegistry& decoders) {
  const auto start = Clock::now();
  config.sequence.validate();
  if (config.batch_size == 0) throw ConfigError("batch size must be positive");
  if (encoder.config.latent_dim != config.sequence.width) {
    throw ConfigError("encoder latent width " + std::to_string(encoder.config.latent_dim) +
                      " does not match sequence model width " +
                      std::to_string(config.sequence.width));
  }
  for (const auto& s : scenes) {
    if (!s.labels) throw ContractError("scene '" + s.scene_id + "' is unlabelled");
  }
  Rng root(seed);
  Rng init_rng = root.derive(kInitStream);
  Rng sample_rng = root.derive(kSampleStream);

  // Frozen means frozen: work on a private copy and compare afterwards.
  std::vector<std::vector<float>> snapshot;
  for (const auto& t : encoder.tensors()) snapshot.push_back(t.values());

  FrameStore store(scenes, encoder.config.input_side, decoders);
  const auto embeddings = embed_store(encoder, store);
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    (scenes[i].split == data::Split::test ? test_idx : train_idx).push_back(i);
  }
  if (train_idx.empty()) throw ContractError("classifier training needs at least one train scene");

  TrainReport report;
  report.phase = "classifier";
  report.seed = seed;
  report.metric_name = "test_accuracy";
  report.config = {{"sequence_length", std::to_string(config.sequence.sequence_length)},
                   {"width", std::to_string(config.sequence.width)},
                   {"heads", std::to_string(config.sequence.heads)},
                   {"blocks", std::to_string(config.sequence.blocks)},
                   {"batch_size", std::to_string(config.batch_size)},
                   {"learning_rate", to_string(config.adam.learning_rate)},
                   {"max_steps", std::to_string(config.max_steps)},
                   {"train_scenes", std::to_string(train_idx.size())},
                   {"test_scenes", std::to_string(test_idx.size())}};
  std::size_t positives = 0;
  for (auto i : train_idx) positives += scenes[i].labels->T_s;
  const double ratio = double(positives) / double(train_idx.size());
  if (ratio < 0.4 || ratio > 0.6) {
    report.warnings.push_back("unbalanced training classes: positive fraction " + to_string(ratio));
  }
  if (test_idx.empty()) report.warnings.push_back("no test scenes; early stopping disabled");

  auto sequence = model::SequenceModel::initialize(config.sequence, init_rng, config.zero_init_head);
  sequence.set_requires_grad(true);
  Adam adam(sequence.tensors(), config.adam);

  const auto counts = counts_of(store);
  const auto length = config.sequence.sequence_length;
  const auto width = config.sequence.width;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t step = 0; step < config.max_steps; ++step) {
    const auto rows = sample_sequence_rows(counts, train_idx, length, config.batch_size, sample_rng);
    std::vector<float> stacked;
    std::vector<float> targets;
    for (const auto& r : rows) {
      const auto g = gather_rows(embeddings[r.scene], r.frames);
      stacked.insert(stacked.end(), g.data().begin(), g.data().end());
      targets.push_back(static_cast<float>(scenes[r.scene].labels->T_s));
    }
    adam.zero_grad();
    Tape tape;
    const auto logits = model::encode_sequences(
        tape, sequence, Tensor({rows.size(), length, width}, std::move(stacked)));
    const auto loss = bce_with_logits(tape, logits, std::span<const float>(targets));
    tape.backward(loss);
    adam.step();
    report.steps.push_back({step, loss.item()});

    if (!test_idx.empty() && (step + 1) % config.eval_every == 0) {
      const auto ev = evaluate_sequences(sequence, embeddings, store, test_idx);
      report.eval_loss.push_back(ev.loss);
      report.epoch_metric.push_back(ev.evaluation.accuracy);
      if (ev.loss < best - config.min_delta) {
        best = ev.loss;
        stale = 0;
      } else if (++stale >= config.patience) {
        report.stopped_early = true;
        break;
      }
    }
  }
  sequence.set_requires_grad(false);
  for (auto t : sequence.tensors()) t.clear_grad();

  ClassifierResult result{std::move(sequence), std::move(adam), std::move(report), 0.0, false};
  if (!test_idx.empty()) {
    result.test_accuracy = evaluate_sequences(result.sequence, embeddings, store, test_idx).evaluation.accuracy;
  }
  result.report.final_metric = result.test_accuracy;
  bool unchanged = true;
  const auto after = encoder.tensors();
  for (std::size_t i = 0; i < after.size(); ++i) unchanged = unchanged && after[i].values() == snapshot[i];
  result.encoder_unchanged = unchanged;
  result.report.wall_clock_seconds = seconds_since(start);
  return result;
}

double Confusion::accuracy() const {
  return total() == 0 ? 0.0 : double(true_positive + true_negative) / double(total());
}

Evaluation evaluate_accuracy(const std::vector<data::SceneRecord>& scenes,
                             const std::function<bool(const data::SceneRecord&)>& accept) {
  if (scenes.empty()) throw ContractError("evaluate_accuracy: empty test set");
  Evaluation ev;
  for (const auto& s : scenes) {
    if (!s.labels) throw ContractError("evaluate_accuracy: scene '" + s.scene_id + "' is unlabelled");
    const bool predicted = accept(s);
    const bool actual = s.labels->T_s == 1;
    auto& c = ev.confusion;
    if (predicted && actual) ++c.true_positive;
    else if (!predicted && !actual) ++c.true_negative;
    else if (predicted) ++c.false_positive;
    else ++c.false_negative;
  }
  ev.accuracy = ev.confusion.accuracy();
  return ev;
}

Evaluation evaluate_accuracy(const std::vector<data::SceneRecord>& scenes,
                             const model::Encoder& encoder, const model::SequenceModel& sequence,
                             double threshold) {
  model::PredictOptions options;
  options.threshold = threshold;
  return evaluate_accuracy(scenes, [&](const data::SceneRecord& s) {
    return model::predict_scene(s, encoder, sequence, options).accept;
  });
}

}  // namespace poolnet::train
