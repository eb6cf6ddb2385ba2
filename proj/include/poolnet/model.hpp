#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "poolnet/ops.hpp"
#include "poolnet/rng.hpp"

// Frame encoder (strided CNN -> 64-d latent) and the transformer sequence
// classifier that turns L frame embeddings into one success logit.
namespace poolnet::model {

inline constexpr std::size_t kLatentDim = 64;

struct EncoderConfig {
  std::size_t input_side = 64;
  // Output channels of each stride-2 conv stage (kernel 3, padding 1, ReLU).
  std::vector<std::size_t> channels{16, 32, 64, 64};
  std::size_t latent_dim = kLatentDim;

  // Throws ConfigError: latent_dim must be 64 and input_side must survive
  // every halving (a multiple of 2^stages).
  void validate() const;
  std::size_t final_side() const;
};

struct SequenceModelConfig {
  std::size_t sequence_length = 10;
  std::size_t width = kLatentDim;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t ffn_multiplier = 4;

  void validate() const;
};

template <typename T>
struct EncoderParams {
  EncoderConfig config;
  std::vector<BasicTensor<T>> conv_weight;  // [C_out, C_in, 3, 3]
  std::vector<BasicTensor<T>> conv_bias;    // [C_out]
  BasicTensor<T> projection_weight;         // [64, C_last]
  BasicTensor<T> projection_bias;           // [64]

  static EncoderParams initialize(const EncoderConfig& config, Rng& rng);
  // Zero-valued parameters with the right shapes (for loading).
  static EncoderParams zeros(const EncoderConfig& config);

  // Stable names, in the order used by checkpoints and optimizers.
  std::vector<std::pair<std::string, BasicTensor<T>>> named() const;
  std::vector<BasicTensor<T>> tensors() const;
  void set_requires_grad(bool value) const;

  template <typename U>
  EncoderParams<U> cast() const;
};

template <typename T>
struct BlockParams {
  BasicTensor<T> norm1_gain, norm1_shift;
  AttentionWeights<T> attention;
  BasicTensor<T> norm2_gain, norm2_shift;
  BasicTensor<T> ffn1_weight, ffn1_bias;  // [k*D, D]
  BasicTensor<T> ffn2_weight, ffn2_bias;  // [D, k*D]
};

template <typename T>
struct SequenceParams {
  SequenceModelConfig config;
  BasicTensor<T> positional;  // [L, D]
  std::vector<BlockParams<T>> blocks;
  BasicTensor<T> head_weight;  // [1, D]
  BasicTensor<T> head_bias;    // [1]

  // zero_head leaves the logit head at zero so the untrained classifier
  // outputs logit 0 for every input.
  static SequenceParams initialize(const SequenceModelConfig& config, Rng& rng,
                                   bool zero_head = false);
  static SequenceParams zeros(const SequenceModelConfig& config);

  std::vector<std::pair<std::string, BasicTensor<T>>> named() const;
  std::vector<BasicTensor<T>> tensors() const;
  void set_requires_grad(bool value) const;

  template <typename U>
  SequenceParams<U> cast() const;
};

using Encoder = EncoderParams<float>;
using SequenceModel = SequenceParams<float>;

// frames[N, 3, S, S] -> embeddings[N, 64]
template <typename T>
BasicTensor<T> encode_frames(BasicTape<T>& tape, const EncoderParams<T>& params,
                             const BasicTensor<T>& frames);

// embeddings[N, L, D] (or [L, D]) -> logits[N] (or [1]).
// Adds the positional table, applies the pre-norm blocks, mean-pools over L
// and projects to one logit.
template <typename T>
BasicTensor<T> encode_sequences(BasicTape<T>& tape,
                                const SequenceParams<T>& params,
                                const BasicTensor<T>& embeddings);

// Even spacing round(i*(n-1)/(L-1)); for n < L the indices 0..n-1 are
// followed by repeats of n-1.
std::vector<std::size_t> select_frame_indices(std::size_t frame_count,
                                              std::size_t sequence_length);

// Throws ConfigError when the encoder latent width and the sequence model
// width disagree.
template <typename T>
void check_compatible(const EncoderParams<T>& encoder,
                      const SequenceParams<T>& sequence);

}  // namespace poolnet::model
