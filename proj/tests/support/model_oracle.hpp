#pragma once

// Stage-by-stage composition of the loop oracles, mirroring the encoder and
// sequence classifier on plain vectors of doubles.

#include <vector>

#include "poolnet/model.hpp"
#include "support/oracles.hpp"

namespace poolnet::testing {

template <typename T>
std::vector<double> as_doubles(const BasicTensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

// frames: [N,3,S,S] flattened -> [N,64]
template <typename T>
std::vector<double> encoder_oracle(const model::EncoderParams<T>& p,
                                   const std::vector<double>& frames, std::size_t n) {
  std::vector<double> x = frames;
  std::size_t c = 3, side = p.config.input_side;
  for (std::size_t s = 0; s < p.conv_weight.size(); ++s) {
    const std::size_t o = p.conv_weight[s].dim(0);
    std::size_t oh = 0, ow = 0;
    x = conv2d_oracle(x, n, c, side, side, as_doubles(p.conv_weight[s]), o, 3, 3,
                      as_doubles(p.conv_bias[s]), 2, 1, &oh, &ow);
    for (auto& v : x) v = v > 0 ? v : 0;
    c = o;
    side = oh;
  }
  std::vector<double> pooled(n * c, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0;
      for (std::size_t i = 0; i < side * side; ++i) acc += x[(b * c + ch) * side * side + i];
      pooled[b * c + ch] = acc / double(side * side);
    }
  return linear_oracle(pooled, n, c, as_doubles(p.projection_weight), p.config.latent_dim,
                       as_doubles(p.projection_bias));
}

// embeddings: [N,L,D] flattened -> logits[N]
template <typename T>
std::vector<double> sequence_oracle(const model::SequenceParams<T>& p,
                                    const std::vector<double>& embeddings, std::size_t n) {
  const std::size_t len = p.config.sequence_length, d = p.config.width;
  const auto pos = as_doubles(p.positional);
  std::vector<double> x(embeddings);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < len * d; ++i) x[b * len * d + i] += pos[i];
  for (const auto& blk : p.blocks) {
    auto h = layer_norm_oracle(x, d, as_doubles(blk.norm1_gain), as_doubles(blk.norm1_shift), 1e-5);
    AttentionOracleWeights w{as_doubles(blk.attention.query_weight), as_doubles(blk.attention.query_bias),
                             as_doubles(blk.attention.key_weight),   as_doubles(blk.attention.key_bias),
                             as_doubles(blk.attention.value_weight), as_doubles(blk.attention.value_bias),
                             as_doubles(blk.attention.out_weight),   as_doubles(blk.attention.out_bias)};
    const auto a = attention_oracle(h, n, len, d, p.config.heads, w);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += a[i];
    h = layer_norm_oracle(x, d, as_doubles(blk.norm2_gain), as_doubles(blk.norm2_shift), 1e-5);
    const std::size_t hidden = blk.ffn1_weight.dim(0);
    auto f = linear_oracle(h, n * len, d, as_doubles(blk.ffn1_weight), hidden, as_doubles(blk.ffn1_bias));
    for (auto& v : f) v = v > 0 ? v : 0;
    const auto g = linear_oracle(f, n * len, hidden, as_doubles(blk.ffn2_weight), d, as_doubles(blk.ffn2_bias));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += g[i];
  }
  std::vector<double> pooled(n * d, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t k = 0; k < d; ++k) pooled[b * d + k] += x[(b * len + t) * d + k] / double(len);
  return linear_oracle(pooled, n, d, as_doubles(p.head_weight), 1, as_doubles(p.head_bias));
}

}  // namespace poolnet::testing
