#include "poolnet/model.hpp"

#include <cmath>

#include "poolnet/error.hpp"

namespace poolnet::model {

void EncoderConfig::validate() const {
  if (latent_dim != kLatentDim) {
    throw ConfigError("encoder latent_dim must be 64, got " + std::to_string(latent_dim));
  }
  if (channels.empty()) throw ConfigError("encoder needs at least one conv stage");
  for (auto c : channels) {
    if (c == 0) throw ConfigError("encoder channel width must be positive");
  }
  const std::size_t factor = std::size_t{1} << channels.size();
  if (input_side == 0 || input_side % factor != 0) {
    throw ConfigError("input side " + std::to_string(input_side) + " must be a multiple of " +
                      std::to_string(factor) + " for " + std::to_string(channels.size()) +
                      " stride-2 stages");
  }
}

std::size_t EncoderConfig::final_side() const {
  return input_side >> channels.size();
}

void SequenceModelConfig::validate() const {
  if (sequence_length < 2) throw ConfigError("sequence length must be at least 2");
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw ConfigError("model width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (ffn_multiplier == 0) throw ConfigError("ffn multiplier must be positive");
}

namespace {

template <typename T>
BasicTensor<T> uniform_tensor(Rng& rng, Shape shape, double bound) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>(std::move(shape), std::move(v));
}

// Fan-in scaled: unit-variance preserving through a following ReLU, or
// through a plain linear map.
template <typename T>
BasicTensor<T> fan_in_tensor(Rng& rng, Shape shape, std::size_t fan_in, bool before_relu) {
  return uniform_tensor<T>(rng, std::move(shape),
                           std::sqrt((before_relu ? 6.0 : 3.0) / double(fan_in)));
}

template <typename T, typename U>
BasicTensor<U> cast_tensor(const BasicTensor<T>& t) {
  return t.template cast<U>();
}

}  // namespace

template <typename T>
EncoderParams<T> EncoderParams<T>::initialize(const EncoderConfig& config, Rng& rng) {
  config.validate();
  EncoderParams p;
  p.config = config;
  std::size_t in = 3;
  for (auto out : config.channels) {
    p.conv_weight.push_back(fan_in_tensor<T>(rng, {out, in, 3, 3}, in * 9, true));
    p.conv_bias.push_back(BasicTensor<T>::zeros({out}));
    in = out;
  }
  p.projection_weight = fan_in_tensor<T>(rng, {config.latent_dim, in}, in, false);
  p.projection_bias = BasicTensor<T>::zeros({config.latent_dim});
  return p;
}

template <typename T>
EncoderParams<T> EncoderParams<T>::zeros(const EncoderConfig& config) {
  config.validate();
  EncoderParams p;
  p.config = config;
  std::size_t in = 3;
  for (auto out : config.channels) {
    p.conv_weight.push_back(BasicTensor<T>::zeros({out, in, 3, 3}));
    p.conv_bias.push_back(BasicTensor<T>::zeros({out}));
    in = out;
  }
  p.projection_weight = BasicTensor<T>::zeros({config.latent_dim, in});
  p.projection_bias = BasicTensor<T>::zeros({config.latent_dim});
  return p;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>>> EncoderParams<T>::named() const {
  std::vector<std::pair<std::string, BasicTensor<T>>> out;
  for (std::size_t i = 0; i < conv_weight.size(); ++i) {
    const auto stage = "encoder.conv" + std::to_string(i);
    out.emplace_back(stage + ".weight", conv_weight[i]);
    out.emplace_back(stage + ".bias", conv_bias[i]);
  }
  out.emplace_back("encoder.projection.weight", projection_weight);
  out.emplace_back("encoder.projection.bias", projection_bias);
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> EncoderParams<T>::tensors() const {
  std::vector<BasicTensor<T>> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

template <typename T>
void EncoderParams<T>::set_requires_grad(bool value) const {
  for (auto t : tensors()) t.set_requires_grad(value);
}

template <typename T>
template <typename U>
EncoderParams<U> EncoderParams<T>::cast() const {
  EncoderParams<U> p;
  p.config = config;
  for (const auto& w : conv_weight) p.conv_weight.push_back(cast_tensor<T, U>(w));
  for (const auto& b : conv_bias) p.conv_bias.push_back(cast_tensor<T, U>(b));
  p.projection_weight = cast_tensor<T, U>(projection_weight);
  p.projection_bias = cast_tensor<T, U>(projection_bias);
  return p;
}

template <typename T>
SequenceParams<T> SequenceParams<T>::initialize(const SequenceModelConfig& config,
                                                Rng& rng, bool zero_head) {
  config.validate();
  const auto d = config.width;
  const auto h = config.ffn_multiplier * d;
  SequenceParams p;
  p.config = config;
  std::vector<T> pos(config.sequence_length * d);
  for (auto& x : pos) x = static_cast<T>(rng.normal(0.0, 0.02));
  p.positional = BasicTensor<T>({config.sequence_length, d}, std::move(pos));
  for (std::size_t b = 0; b < config.blocks; ++b) {
    BlockParams<T> blk;
    blk.norm1_gain = BasicTensor<T>::full({d}, T(1));
    blk.norm1_shift = BasicTensor<T>::zeros({d});
    auto& a = blk.attention;
    a.query_weight = fan_in_tensor<T>(rng, {d, d}, d, false);
    a.query_bias = BasicTensor<T>::zeros({d});
    a.key_weight = fan_in_tensor<T>(rng, {d, d}, d, false);
    a.key_bias = BasicTensor<T>::zeros({d});
    a.value_weight = fan_in_tensor<T>(rng, {d, d}, d, false);
    a.value_bias = BasicTensor<T>::zeros({d});
    a.out_weight = fan_in_tensor<T>(rng, {d, d}, d, false);
    a.out_bias = BasicTensor<T>::zeros({d});
    blk.norm2_gain = BasicTensor<T>::full({d}, T(1));
    blk.norm2_shift = BasicTensor<T>::zeros({d});
    blk.ffn1_weight = fan_in_tensor<T>(rng, {h, d}, d, true);
    blk.ffn1_bias = BasicTensor<T>::zeros({h});
    blk.ffn2_weight = fan_in_tensor<T>(rng, {d, h}, h, false);
    blk.ffn2_bias = BasicTensor<T>::zeros({d});
    p.blocks.push_back(std::move(blk));
  }
  p.head_weight = zero_head ? BasicTensor<T>::zeros({1, d})
                            : fan_in_tensor<T>(rng, {1, d}, d, false);
  p.head_bias = BasicTensor<T>::zeros({1});
  return p;
}

template <typename T>
SequenceParams<T> SequenceParams<T>::zeros(const SequenceModelConfig& config) {
  config.validate();
  const auto d = config.width;
  const auto h = config.ffn_multiplier * d;
  SequenceParams p;
  p.config = config;
  p.positional = BasicTensor<T>::zeros({config.sequence_length, d});
  for (std::size_t b = 0; b < config.blocks; ++b) {
    BlockParams<T> blk;
    blk.norm1_gain = BasicTensor<T>::zeros({d});
    blk.norm1_shift = BasicTensor<T>::zeros({d});
    auto& a = blk.attention;
    for (auto* w : {&a.query_weight, &a.key_weight, &a.value_weight, &a.out_weight}) {
      *w = BasicTensor<T>::zeros({d, d});
    }
    for (auto* b2 : {&a.query_bias, &a.key_bias, &a.value_bias, &a.out_bias}) {
      *b2 = BasicTensor<T>::zeros({d});
    }
    blk.norm2_gain = BasicTensor<T>::zeros({d});
    blk.norm2_shift = BasicTensor<T>::zeros({d});
    blk.ffn1_weight = BasicTensor<T>::zeros({h, d});
    blk.ffn1_bias = BasicTensor<T>::zeros({h});
    blk.ffn2_weight = BasicTensor<T>::zeros({d, h});
    blk.ffn2_bias = BasicTensor<T>::zeros({d});
    p.blocks.push_back(std::move(blk));
  }
  p.head_weight = BasicTensor<T>::zeros({1, d});
  p.head_bias = BasicTensor<T>::zeros({1});
  return p;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>>> SequenceParams<T>::named() const {
  std::vector<std::pair<std::string, BasicTensor<T>>> out;
  out.emplace_back("sequence.positional", positional);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const auto pre = "sequence.block" + std::to_string(i) + ".";
    out.emplace_back(pre + "norm1.gain", b.norm1_gain);
    out.emplace_back(pre + "norm1.shift", b.norm1_shift);
    out.emplace_back(pre + "attention.query.weight", b.attention.query_weight);
    out.emplace_back(pre + "attention.query.bias", b.attention.query_bias);
    out.emplace_back(pre + "attention.key.weight", b.attention.key_weight);
    out.emplace_back(pre + "attention.key.bias", b.attention.key_bias);
    out.emplace_back(pre + "attention.value.weight", b.attention.value_weight);
    out.emplace_back(pre + "attention.value.bias", b.attention.value_bias);
    out.emplace_back(pre + "attention.out.weight", b.attention.out_weight);
    out.emplace_back(pre + "attention.out.bias", b.attention.out_bias);
    out.emplace_back(pre + "norm2.gain", b.norm2_gain);
    out.emplace_back(pre + "norm2.shift", b.norm2_shift);
    out.emplace_back(pre + "ffn1.weight", b.ffn1_weight);
    out.emplace_back(pre + "ffn1.bias", b.ffn1_bias);
    out.emplace_back(pre + "ffn2.weight", b.ffn2_weight);
    out.emplace_back(pre + "ffn2.bias", b.ffn2_bias);
  }
  out.emplace_back("sequence.head.weight", head_weight);
  out.emplace_back("sequence.head.bias", head_bias);
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> SequenceParams<T>::tensors() const {
  std::vector<BasicTensor<T>> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

template <typename T>
void SequenceParams<T>::set_requires_grad(bool value) const {
  for (auto t : tensors()) t.set_requires_grad(value);
}

template <typename T>
template <typename U>
SequenceParams<U> SequenceParams<T>::cast() const {
  SequenceParams<U> p;
  p.config = config;
  p.positional = cast_tensor<T, U>(positional);
  for (const auto& b : blocks) {
    BlockParams<U> c;
    c.norm1_gain = cast_tensor<T, U>(b.norm1_gain);
    c.norm1_shift = cast_tensor<T, U>(b.norm1_shift);
    c.attention.query_weight = cast_tensor<T, U>(b.attention.query_weight);
    c.attention.query_bias = cast_tensor<T, U>(b.attention.query_bias);
    c.attention.key_weight = cast_tensor<T, U>(b.attention.key_weight);
    c.attention.key_bias = cast_tensor<T, U>(b.attention.key_bias);
    c.attention.value_weight = cast_tensor<T, U>(b.attention.value_weight);
    c.attention.value_bias = cast_tensor<T, U>(b.attention.value_bias);
    c.attention.out_weight = cast_tensor<T, U>(b.attention.out_weight);
    c.attention.out_bias = cast_tensor<T, U>(b.attention.out_bias);
    c.norm2_gain = cast_tensor<T, U>(b.norm2_gain);
    c.norm2_shift = cast_tensor<T, U>(b.norm2_shift);
    c.ffn1_weight = cast_tensor<T, U>(b.ffn1_weight);
    c.ffn1_bias = cast_tensor<T, U>(b.ffn1_bias);
    c.ffn2_weight = cast_tensor<T, U>(b.ffn2_weight);
    c.ffn2_bias = cast_tensor<T, U>(b.ffn2_bias);
    p.blocks.push_back(std::move(c));
  }
  p.head_weight = cast_tensor<T, U>(head_weight);
  p.head_bias = cast_tensor<T, U>(head_bias);
  return p;
}

template <typename T>
BasicTensor<T> encode_frames(BasicTape<T>& tape, const EncoderParams<T>& params,
                             const BasicTensor<T>& frames) {
  const auto& cfg = params.config;
  if (frames.rank() != 4 || frames.dim(1) != 3 || frames.dim(2) != cfg.input_side ||
      frames.dim(3) != cfg.input_side) {
    throw ContractError("encode_frames: expected [N,3," + std::to_string(cfg.input_side) +
                        "," + std::to_string(cfg.input_side) + "], got " +
                        shape_to_string(frames.shape()));
  }
  BasicTensor<T> x = frames;
  for (std::size_t i = 0; i < params.conv_weight.size(); ++i) {
    x = relu(tape, conv2d(tape, x, params.conv_weight[i], params.conv_bias[i], 2, 1));
  }
  x = global_avg_pool(tape, x);
  return linear(tape, x, params.projection_weight, params.projection_bias);
}

template <typename T>
BasicTensor<T> encode_sequences(BasicTape<T>& tape, const SequenceParams<T>& params,
                                const BasicTensor<T>& embeddings) {
  const auto& cfg = params.config;
  BasicTensor<T> x = embeddings;
  if (x.rank() == 2) x = reshape(tape, x, {1, x.dim(0), x.dim(1)});
  if (x.rank() != 3 || x.dim(1) != cfg.sequence_length || x.dim(2) != cfg.width) {
    throw ContractError("encode_sequences: expected [N," + std::to_string(cfg.sequence_length) +
                        "," + std::to_string(cfg.width) + "], got " +
                        shape_to_string(embeddings.shape()));
  }
  const auto n = x.dim(0);
  x = add(tape, x, params.positional);
  for (const auto& b : params.blocks) {
    auto h = layer_norm(tape, x, b.norm1_gain, b.norm1_shift);
    x = add(tape, x, multi_head_attention(tape, h, b.attention, cfg.heads));
    h = layer_norm(tape, x, b.norm2_gain, b.norm2_shift);
    h = relu(tape, linear(tape, h, b.ffn1_weight, b.ffn1_bias));
    x = add(tape, x, linear(tape, h, b.ffn2_weight, b.ffn2_bias));
  }
  auto pooled = mean_over_sequence(tape, x);
  auto logits = linear(tape, pooled, params.head_weight, params.head_bias);
  return reshape(tape, logits, {n});
}

std::vector<std::size_t> select_frame_indices(std::size_t n, std::size_t length) {
  if (n == 0) throw ContractError("select_frame_indices: scene has no frames");
  if (length == 0) throw ContractError("select_frame_indices: sequence length must be positive");
  std::vector<std::size_t> out(length);
  if (n < length) {
    for (std::size_t i = 0; i < length; ++i) out[i] = std::min(i, n - 1);
    return out;
  }
  if (length == 1) {
    out[0] = 0;
    return out;
  }
  // round(i*(n-1)/(L-1)) with halves rounded up, in exact integer arithmetic.
  const std::size_t den = length - 1;
  for (std::size_t i = 0; i < length; ++i) {
    out[i] = (2 * i * (n - 1) + den) / (2 * den);
  }
  return out;
}

template <typename T>
void check_compatible(const EncoderParams<T>& encoder, const SequenceParams<T>& sequence) {
  if (encoder.config.latent_dim != sequence.config.width) {
    throw ConfigError("encoder latent width " + std::to_string(encoder.config.latent_dim) +
                      " does not match sequence model width " +
                      std::to_string(sequence.config.width));
  }
}

template struct EncoderParams<float>;
template struct EncoderParams<double>;
template struct SequenceParams<float>;
template struct SequenceParams<double>;
template EncoderParams<double> EncoderParams<float>::cast<double>() const;
template EncoderParams<float> EncoderParams<double>::cast<float>() const;
template SequenceParams<double> SequenceParams<float>::cast<double>() const;
template SequenceParams<float> SequenceParams<double>::cast<float>() const;
template BasicTensor<float> encode_frames(BasicTape<float>&, const EncoderParams<float>&,
                                          const BasicTensor<float>&);
template BasicTensor<double> encode_frames(BasicTape<double>&, const EncoderParams<double>&,
                                           const BasicTensor<double>&);
template BasicTensor<float> encode_sequences(BasicTape<float>&, const SequenceParams<float>&,
                                             const BasicTensor<float>&);
template BasicTensor<double> encode_sequences(BasicTape<double>&, const SequenceParams<double>&,
                                              const BasicTensor<double>&);
template void check_compatible(const EncoderParams<float>&, const SequenceParams<float>&);
template void check_compatible(const EncoderParams<double>&, const SequenceParams<double>&);

}  // namespace poolnet::model
