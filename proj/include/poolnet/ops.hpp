#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "poolnet/tape.hpp"
#include "poolnet/tensor.hpp"

// Differentiable operations over BasicTensor<T>.
//
// Every op computes its output eagerly and, when the tape is recording and an
// input requires a gradient, records a hand-written backward rule. Composite
// ops (conv2d, multi_head_attention, layer_norm) are recorded as one node each.
// All ops are instantiated for float (the model path) and double (the 64-bit
// shadow path used by gradient checks).
namespace poolnet {

template <typename T>
struct AttentionWeights {
  // Packed per-head projections: head h owns rows [h*D/H, (h+1)*D/H) of the
  // query/key/value weights and columns of the same range of `out_weight`.
  BasicTensor<T> query_weight, query_bias;
  BasicTensor<T> key_weight, key_bias;
  BasicTensor<T> value_weight, value_bias;
  BasicTensor<T> out_weight, out_bias;
};

// [N,C_in,H,W] * [C_out,C_in,kH,kW] + [C_out] -> [N,C_out,H',W'],
// zero padding outside the input.
template <typename T>
BasicTensor<T> conv2d(BasicTape<T>& tape, const BasicTensor<T>& input,
                      const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      std::size_t stride, std::size_t padding);

// input[..., D_in] . weight[D_out, D_in]^T + bias[D_out]; leading dimensions
// are treated as rows.
template <typename T>
BasicTensor<T> linear(BasicTape<T>& tape, const BasicTensor<T>& input,
                      const BasicTensor<T>& weight, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> relu(BasicTape<T>& tape, const BasicTensor<T>& input);

// a + b, where b's shape equals a trailing suffix of a's shape (b is repeated
// over a's leading dimensions).
template <typename T>
BasicTensor<T> add(BasicTape<T>& tape, const BasicTensor<T>& a,
                   const BasicTensor<T>& b);

// Elementwise product of equal shapes.
template <typename T>
BasicTensor<T> mul(BasicTape<T>& tape, const BasicTensor<T>& a,
                   const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> sum(BasicTape<T>& tape, const BasicTensor<T>& input);

// Softmax over the last axis with max subtraction.
template <typename T>
BasicTensor<T> softmax(BasicTape<T>& tape, const BasicTensor<T>& input);

// Normalizes each last-axis slice with its population variance, then applies
// gain and shift.
template <typename T>
BasicTensor<T> layer_norm(BasicTape<T>& tape, const BasicTensor<T>& input,
                          const BasicTensor<T>& gain,
                          const BasicTensor<T>& shift, T epsilon = T(1e-5));

// Unmasked scaled dot-product attention over x[N,L,D], scale 1/sqrt(D/heads).
// When `probabilities` is non-null it receives the attention weights laid out
// as [N, heads, L, L].
template <typename T>
BasicTensor<T> multi_head_attention(BasicTape<T>& tape, const BasicTensor<T>& x,
                                    const AttentionWeights<T>& weights,
                                    std::size_t heads,
                                    std::vector<T>* probabilities = nullptr);

// [N,C,H,W] -> [N,C]
template <typename T>
BasicTensor<T> global_avg_pool(BasicTape<T>& tape, const BasicTensor<T>& input);

// [N,L,D] -> [N,D]
template <typename T>
BasicTensor<T> mean_over_sequence(BasicTape<T>& tape,
                                  const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> reshape(BasicTape<T>& tape, const BasicTensor<T>& input,
                       Shape shape);

// Rows [begin, end) along axis 0.
template <typename T>
BasicTensor<T> slice_rows(BasicTape<T>& tape, const BasicTensor<T>& input,
                          std::size_t begin, std::size_t end);

// Mean over rows of: same -> 1 - cos(a_i, b_i); different -> max(0, cos - margin).
// a and b are [B,D] (or [D] for a single pair). Throws DegenerateEmbeddingError
// on a zero-norm row.
template <typename T>
BasicTensor<T> cosine_embedding_loss(BasicTape<T>& tape,
                                     const BasicTensor<T>& a,
                                     const BasicTensor<T>& b,
                                     std::span<const std::uint8_t> same_scene,
                                     T margin = T(0));

// Mean binary cross-entropy on logits[N] against targets in {0,1}, in the
// branch-free stable form max(z,0) - z*t + log1p(exp(-|z|)).
template <typename T>
BasicTensor<T> bce_with_logits(BasicTape<T>& tape, const BasicTensor<T>& logits,
                               std::span<const T> targets);

// --- plain value helpers ---------------------------------------------------

template <typename T>
double cosine_similarity(std::span<const T> a, std::span<const T> b);

template <typename T>
double cosine_similarity(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return cosine_similarity<T>(a.data(), b.data());
}

double cosine_embedding_loss_value(double cosine, bool same_scene,
                                   double margin);

double bce_with_logits_value(double logit, double target);

double sigmoid(double logit);

// While alive, every relu() on this thread appends one sign bit per input
// element to `signs`. Gradient checks compare the patterns at x+h and x-h to
// skip coordinates whose finite difference straddles a ReLU kink.
class ActivationProbe {
 public:
  explicit ActivationProbe(std::vector<std::uint8_t>& signs);
  ~ActivationProbe();
  ActivationProbe(const ActivationProbe&) = delete;
  ActivationProbe& operator=(const ActivationProbe&) = delete;

  static std::vector<std::uint8_t>* active();

 private:
  std::vector<std::uint8_t>* previous_;
};

}  // namespace poolnet
