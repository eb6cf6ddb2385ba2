#include "poolnet/predict.hpp"

#include <algorithm>
#include <optional>

#include "poolnet/error.hpp"

namespace poolnet::model {

namespace {

constexpr std::size_t kEmbedBatch = 32;

std::optional<Tensor> try_ingest(const data::SceneRecord& scene, std::size_t index,
                                 std::size_t side, const data::DecoderRegistry& decoders) {
  try {
    return data::ingest_frame(scene.frame_paths[index], side, decoders);
  } catch (const DecodeError&) {
  } catch (const UnsupportedFormat&) {
  }
  return std::nullopt;
}

}  // namespace

ScenePrediction decide(double logit, double threshold) {
  ScenePrediction p;
  p.logit = logit;
  p.probability = sigmoid(logit);
  p.accept = p.probability >= threshold;
  return p;
}

Tensor stack_frames(const std::vector<Tensor>& frames) {
  if (frames.empty()) throw ContractError("stack_frames: no frames");
  const auto shape = frames.front().shape();
  std::vector<float> data;
  data.reserve(frames.size() * frames.front().numel());
  for (const auto& f : frames) {
    if (f.shape() != shape) {
      throw ContractError("stack_frames: mixed shapes " + shape_to_string(shape) + " and " +
                          shape_to_string(f.shape()));
    }
    data.insert(data.end(), f.data().begin(), f.data().end());
  }
  Shape out{frames.size()};
  out.insert(out.end(), shape.begin(), shape.end());
  return Tensor(std::move(out), std::move(data));
}

Tensor embed_frames(const Encoder& encoder, const Tensor& frames) {
  if (frames.rank() != 4) {
    throw ContractError("embed_frames: expected [N,3,S,S], got " + shape_to_string(frames.shape()));
  }
  const auto n = frames.dim(0);
  const auto per = frames.numel() / n;
  std::vector<float> out;
  out.reserve(n * encoder.config.latent_dim);
  Tape tape(false);
  for (std::size_t begin = 0; begin < n; begin += kEmbedBatch) {
    const auto end = std::min(n, begin + kEmbedBatch);
    std::vector<float> chunk(frames.data().begin() + begin * per,
                             frames.data().begin() + end * per);
    Shape shape = frames.shape();
    shape[0] = end - begin;
    const auto e = encode_frames(tape, encoder, Tensor(std::move(shape), std::move(chunk)));
    out.insert(out.end(), e.data().begin(), e.data().end());
  }
  return Tensor({n, encoder.config.latent_dim}, std::move(out));
}

double classify_embeddings(const SequenceModel& sequence, const Tensor& embeddings) {
  Tape tape(false);
  return encode_sequences(tape, sequence, embeddings).item();
}

ScenePrediction predict_scene(const data::SceneRecord& scene, const Encoder& encoder,
                              const SequenceModel& sequence, const PredictOptions& options) {
  check_compatible(encoder, sequence);
  const auto n = scene.frame_paths.size();
  if (n == 0) throw ScenePredictError(scene.scene_id + ": scene has no frames");
  const auto side = encoder.config.input_side;
  const auto length = sequence.config.sequence_length;
  const auto selected = select_frame_indices(n, length);

  std::vector<std::optional<Tensor>> cache(n);
  std::vector<bool> tried(n, false);
  auto load = [&](std::size_t i) -> const std::optional<Tensor>& {
    if (!tried[i]) {
      tried[i] = true;
      cache[i] = try_ingest(scene, i, side, *options.decoders);
    }
    return cache[i];
  };

  std::size_t failed = 0;
  for (auto i : selected) failed += load(i).has_value() ? 0 : 1;
  if (2 * failed > selected.size()) {
    throw ScenePredictError(scene.scene_id + ": " + std::to_string(failed) + " of " +
                            std::to_string(selected.size()) +
                            " selected frames could not be read");
  }

  std::vector<Tensor> frames;
  std::vector<std::size_t> used;
  std::size_t fallbacks = 0;
  for (auto i : selected) {
    std::optional<std::size_t> pick;
    if (load(i)) {
      pick = i;
    } else {
      ++fallbacks;
      for (std::size_t d = 1; d < n && !pick; ++d) {
        if (i >= d && load(i - d)) pick = i - d;
        else if (i + d < n && load(i + d)) pick = i + d;
      }
    }
    if (!pick) throw ScenePredictError(scene.scene_id + ": no readable frame");
    frames.push_back(*cache[*pick]);
    used.push_back(*pick);
  }
  const auto embeddings = embed_frames(encoder, stack_frames(frames));
  auto result = decide(classify_embeddings(sequence, embeddings), options.threshold);
  result.frames = std::move(used);
  result.fallbacks = fallbacks;
  result.unreadable = failed;
  return result;
}

ScenePrediction predict_scene_full(const data::SceneRecord& scene, const Encoder& encoder,
                                   const SequenceModel& sequence, const PredictOptions& options) {
  check_compatible(encoder, sequence);
  const auto n = scene.frame_paths.size();
  if (n == 0) throw ScenePredictError(scene.scene_id + ": scene has no frames");
  const auto side = encoder.config.input_side;
  const auto length = sequence.config.sequence_length;
  const auto dim = encoder.config.latent_dim;

  std::vector<Tensor> frames;
  std::vector<std::size_t> used;
  for (std::size_t i = 0; i < n; ++i) {
    if (auto t = try_ingest(scene, i, side, *options.decoders)) {
      frames.push_back(std::move(*t));
      used.push_back(i);
    }
  }
  const auto failed = n - frames.size();
  if (2 * failed > n) {
    throw ScenePredictError(scene.scene_id + ": " + std::to_string(failed) + " of " +
                            std::to_string(n) + " frames could not be read");
  }
  const auto embeddings = embed_frames(encoder, stack_frames(frames));
  const auto& e = embeddings.values();
  const auto count = frames.size();
  double logit_sum = 0;
  std::size_t windows = 0;
  for (std::size_t begin = 0; begin < count; begin += length) {
    std::vector<float> window;
    window.reserve(length * dim);
    for (std::size_t k = 0; k < length; ++k) {
      const auto row = std::min(begin + k, count - 1);
      window.insert(window.end(), e.begin() + row * dim, e.begin() + (row + 1) * dim);
    }
    logit_sum += classify_embeddings(sequence, Tensor({length, dim}, std::move(window)));
    ++windows;
  }
  auto result = decide(logit_sum / double(windows), options.threshold);
  result.frames = std::move(used);
  result.unreadable = failed;
  return result;
}

}  // namespace poolnet::model
