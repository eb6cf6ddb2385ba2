#pragma once

#include <cstddef>
#include <vector>

#include "poolnet/dataset.hpp"
#include "poolnet/model.hpp"

// Scene-level inference: frame selection, ingestion with neighbour fallback,
// embedding and classification.
namespace poolnet::model {

struct PredictOptions {
  double threshold = 0.5;  // accept when probability >= threshold
  const data::DecoderRegistry* decoders = &data::default_decoders();
};

struct ScenePrediction {
  double logit = 0;
  double probability = 0.5;
  bool accept = true;
  // Frame indices actually fed to the encoder (after fallback).
  std::vector<std::size_t> frames;
  std::size_t fallbacks = 0;
  std::size_t unreadable = 0;
};

// probability = sigmoid(logit), accept = probability >= threshold.
ScenePrediction decide(double logit, double threshold);

// Embeds frames [N,3,S,S] without recording, in fixed-size batches so that
// results do not depend on N. Returns [N, 64].
Tensor embed_frames(const Encoder& encoder, const Tensor& frames);

// Stacks [3,S,S] frames into [N,3,S,S].
Tensor stack_frames(const std::vector<Tensor>& frames);

// Even-spaced L-frame policy. A selected frame that fails to ingest is
// replaced by the nearest readable frame (lower index first on ties); more
// than half of the selected positions failing throws ScenePredictError.
ScenePrediction predict_scene(const data::SceneRecord& scene, const Encoder& encoder,
                              const SequenceModel& sequence,
                              const PredictOptions& options = {});

// All-frames mode: every readable frame is embedded, the embeddings are cut
// into consecutive windows of L (the last window padded with its final
// frame) and the window logits are averaged.
ScenePrediction predict_scene_full(const data::SceneRecord& scene, const Encoder& encoder,
                                   const SequenceModel& sequence,
                                   const PredictOptions& options = {});

// Logit for embeddings [L, 64] that are already selected.
double classify_embeddings(const SequenceModel& sequence, const Tensor& embeddings);

}  // namespace poolnet::model
