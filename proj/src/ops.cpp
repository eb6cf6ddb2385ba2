#include "poolnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace poolnet {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) {
      out << ',';
    }
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

thread_local std::vector<std::uint8_t>* g_activation_probe = nullptr;

template <typename T>
void require_finite(const BasicTensor<T>& t, const char* op) {
  if (!t.all_finite()) {
    throw ContractError(std::string(op) + ": non-finite value in output");
  }
}

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op,
                  const char* what) {
  if (t.rank() != rank) {
    throw ContractError(std::string(op) + ": " + what + " must have rank " +
                        std::to_string(rank) + ", got " +
                        shape_to_string(t.shape()));
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a,
                                 const Shape& b) {
  throw ContractError(std::string(op) + ": shape mismatch " +
                      shape_to_string(a) + " vs " + shape_to_string(b));
}

// rows x in_dim times (out_dim x in_dim)^T.
template <typename T>
void linear_forward(std::span<const T> x, std::span<const T> w,
                    std::span<const T> b, std::span<T> y, std::size_t rows,
                    std::size_t in_dim, std::size_t out_dim) {
  for (std::size_t m = 0; m < rows; ++m) {
    const T* xr = x.data() + m * in_dim;
    T* yr = y.data() + m * out_dim;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const T* wr = w.data() + o * in_dim;
      T acc = b.empty() ? T(0) : b[o];
      for (std::size_t k = 0; k < in_dim; ++k) {
        acc += xr[k] * wr[k];
      }
      yr[o] = acc;
    }
  }
}

// Accumulates input, weight and bias gradients for y = x W^T + b. Empty spans
// skip the corresponding gradient.
template <typename T>
void linear_backward(std::span<const T> dy, std::span<const T> x,
                     std::span<const T> w, std::span<T> dx, std::span<T> dw,
                     std::span<T> db, std::size_t rows, std::size_t in_dim,
                     std::size_t out_dim) {
  for (std::size_t m = 0; m < rows; ++m) {
    const T* dyr = dy.data() + m * out_dim;
    const T* xr = x.data() + m * in_dim;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const T g = dyr[o];
      if (!db.empty()) {
        db[o] += g;
      }
      if (!dx.empty()) {
        T* dxr = dx.data() + m * in_dim;
        const T* wr = w.data() + o * in_dim;
        for (std::size_t k = 0; k < in_dim; ++k) {
          dxr[k] += g * wr[k];
        }
      }
      if (!dw.empty()) {
        T* dwr = dw.data() + o * in_dim;
        for (std::size_t k = 0; k < in_dim; ++k) {
          dwr[k] += g * xr[k];
        }
      }
    }
  }
}

template <typename T>
std::span<T> grad_if_needed(const BasicTensor<T>& t) {
  if (t.defined() && t.requires_grad()) {
    return t.mutable_grad();
  }
  return {};
}

// Valid output column range [lo, hi) for kernel offset j.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_extent,
                                                       std::size_t in_extent,
                                                       std::size_t offset,
                                                       std::size_t stride,
                                                       std::size_t padding) {
  // position = x*stride + offset - padding must lie in [0, in_extent).
  std::size_t lo = 0;
  if (offset < padding) {
    lo = (padding - offset + stride - 1) / stride;
  }
  const long long top = static_cast<long long>(in_extent) - 1 +
                        static_cast<long long>(padding) -
                        static_cast<long long>(offset);
  if (top < 0) {
    return {0, 0};
  }
  std::size_t hi =
      std::min(out_extent, static_cast<std::size_t>(top) / stride + 1);
  if (lo > hi) {
    lo = hi;
  }
  return {lo, hi};
}

}  // namespace

// --- ActivationProbe -------------------------------------------------------

ActivationProbe::ActivationProbe(std::vector<std::uint8_t>& signs)
    : previous_(g_activation_probe) {
  g_activation_probe = &signs;
}

ActivationProbe::~ActivationProbe() { g_activation_probe = previous_; }

std::vector<std::uint8_t>* ActivationProbe::active() {
  return g_activation_probe;
}

// --- conv2d ----------------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(BasicTape<T>& tape, const BasicTensor<T>& input,
                      const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  if (stride < 1) {
    throw ContractError("conv2d: stride must be >= 1");
  }
  const std::size_t n_batch = input.dim(0), in_c = input.dim(1),
                    in_h = input.dim(2), in_w = input.dim(3);
  const std::size_t out_c = weight.dim(0), k_h = weight.dim(2),
                    k_w = weight.dim(3);
  if (weight.dim(1) != in_c) {
    shape_mismatch("conv2d", input.shape(), weight.shape());
  }
  if (bias.rank() != 1 || bias.dim(0) != out_c) {
    shape_mismatch("conv2d", weight.shape(), bias.shape());
  }
  if (k_h > in_h + 2 * padding || k_w > in_w + 2 * padding) {
    shape_mismatch("conv2d", input.shape(), weight.shape());
  }
  const std::size_t out_h = (in_h + 2 * padding - k_h) / stride + 1;
  const std::size_t out_w = (in_w + 2 * padding - k_w) / stride + 1;

  std::vector<T> out(n_batch * out_c * out_h * out_w);
  const auto x = input.data();
  const auto w = weight.data();
  const auto b = bias.data();

  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t o = 0; o < out_c; ++o) {
      T* plane = out.data() + (n * out_c + o) * out_h * out_w;
      std::fill(plane, plane + out_h * out_w, b[o]);
      for (std::size_t c = 0; c < in_c; ++c) {
        const T* in_plane = x.data() + (n * in_c + c) * in_h * in_w;
        for (std::size_t i = 0; i < k_h; ++i) {
          const auto [y_lo, y_hi] = valid_range(out_h, in_h, i, stride, padding);
          for (std::size_t j = 0; j < k_w; ++j) {
            const auto [x_lo, x_hi] =
                valid_range(out_w, in_w, j, stride, padding);
            const T kv = w[((o * in_c + c) * k_h + i) * k_w + j];
            for (std::size_t y = y_lo; y < y_hi; ++y) {
              const T* in_row = in_plane + (y * stride + i - padding) * in_w;
              T* out_row = plane + y * out_w;
              for (std::size_t xo = x_lo; xo < x_hi; ++xo) {
                out_row[xo] += kv * in_row[xo * stride + j - padding];
              }
            }
          }
        }
      }
    }
  }

  BasicTensor<T> result({n_batch, out_c, out_h, out_w}, std::move(out));
  require_finite(result, "conv2d");
  tape.record(
      {input, weight, bias}, result,
      [input, weight, bias, stride, padding, n_batch, in_c, in_h, in_w, out_c,
       k_h, k_w, out_h, out_w](std::span<const T> dy) mutable {
        const auto x = input.data();
        const auto w = weight.data();
        auto dx = grad_if_needed(input);
        auto dw = grad_if_needed(weight);
        auto db = grad_if_needed(bias);
        for (std::size_t n = 0; n < n_batch; ++n) {
          for (std::size_t o = 0; o < out_c; ++o) {
            const T* g_plane = dy.data() + (n * out_c + o) * out_h * out_w;
            if (!db.empty()) {
              T acc = 0;
              for (std::size_t k = 0; k < out_h * out_w; ++k) {
                acc += g_plane[k];
              }
              db[o] += acc;
            }
            for (std::size_t c = 0; c < in_c; ++c) {
              const std::size_t in_off = (n * in_c + c) * in_h * in_w;
              for (std::size_t i = 0; i < k_h; ++i) {
                const auto [y_lo, y_hi] =
                    valid_range(out_h, in_h, i, stride, padding);
                for (std::size_t j = 0; j < k_w; ++j) {
                  const auto [x_lo, x_hi] =
                      valid_range(out_w, in_w, j, stride, padding);
                  const std::size_t w_idx = ((o * in_c + c) * k_h + i) * k_w + j;
                  const T kv = w[w_idx];
                  T wacc = 0;
                  for (std::size_t y = y_lo; y < y_hi; ++y) {
                    const std::size_t row =
                        in_off + (y * stride + i - padding) * in_w;
                    const T* g_row = g_plane + y * out_w;
                    for (std::size_t xo = x_lo; xo < x_hi; ++xo) {
                      const std::size_t idx = row + xo * stride + j - padding;
                      wacc += g_row[xo] * x[idx];
                      if (!dx.empty()) {
                        dx[idx] += kv * g_row[xo];
                      }
                    }
                  }
                  if (!dw.empty()) {
                    dw[w_idx] += wacc;
                  }
                }
              }
            }
          }
        }
      });
  return result;
}

// --- linear ----------------------------------------------------------------

template <typename T>
BasicTensor<T> linear(BasicTape<T>& tape, const BasicTensor<T>& input,
                      const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  require_rank(weight, 2, "linear", "weight");
  if (input.rank() < 1) {
    throw ContractError("linear: input must have rank >= 1");
  }
  const std::size_t in_dim = input.shape().back();
  const std::size_t out_dim = weight.dim(0);
  if (weight.dim(1) != in_dim) {
    shape_mismatch("linear", input.shape(), weight.shape());
  }
  if (bias.rank() != 1 || bias.dim(0) != out_dim) {
    shape_mismatch("linear", weight.shape(), bias.shape());
  }
  const std::size_t rows = input.numel() / in_dim;
  Shape out_shape = input.shape();
  out_shape.back() = out_dim;
  std::vector<T> out(rows * out_dim);
  linear_forward<T>(input.data(), weight.data(), bias.data(), out, rows,
                    in_dim, out_dim);
  BasicTensor<T> result(std::move(out_shape), std::move(out));
  require_finite(result, "linear");
  tape.record({input, weight, bias}, result,
              [input, weight, bias, rows, in_dim,
               out_dim](std::span<const T> dy) mutable {
                linear_backward<T>(dy, input.data(), weight.data(),
                                   grad_if_needed(input),
                                   grad_if_needed(weight),
                                   grad_if_needed(bias), rows, in_dim, out_dim);
              });
  return result;
}

// --- elementwise -----------------------------------------------------------

template <typename T>
BasicTensor<T> relu(BasicTape<T>& tape, const BasicTensor<T>& input) {
  const auto x = input.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] > T(0) ? x[i] : T(0);
  }
  if (auto* probe = g_activation_probe) {
    for (T v : x) {
      probe->push_back(v > T(0) ? 1 : 0);
    }
  }
  BasicTensor<T> result(input.shape(), std::move(out));
  tape.record({input}, result, [input](std::span<const T> dy) mutable {
    const auto x = input.data();
    auto dx = input.mutable_grad();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > T(0)) {
        dx[i] += dy[i];
      }
    }
  });
  return result;
}

template <typename T>
BasicTensor<T> add(BasicTape<T>& tape, const BasicTensor<T>& a,
                   const BasicTensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size() ||
      !std::equal(sb.begin(), sb.end(), sa.end() - sb.size())) {
    shape_mismatch("add", sa, sb);
  }
  const auto x = a.data();
  const auto y = b.data();
  const std::size_t inner = y.size();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] + y[i % inner];
  }
  BasicTensor<T> result(sa, std::move(out));
  require_finite(result, "add");
  tape.record({a, b}, result, [a, b, inner](std::span<const T> dy) mutable {
    auto da = grad_if_needed(a);
    auto dbv = grad_if_needed(b);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (!da.empty()) {
        da[i] += dy[i];
      }
      if (!dbv.empty()) {
        dbv[i % inner] += dy[i];
      }
    }
  });
  return result;
}

template <typename T>
BasicTensor<T> mul(BasicTape<T>& tape, const BasicTensor<T>& a,
                   const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    shape_mismatch("mul", a.shape(), b.shape());
  }
  const auto x = a.data();
  const auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] * y[i];
  }
  BasicTensor<T> result(a.shape(), std::move(out));
  require_finite(result, "mul");
  tape.record({a, b}, result, [a, b](std::span<const T> dy) mutable {
    const auto x = a.data();
    const auto y = b.data();
    // Accumulate through locals so mul(x, x) sees both contributions.
    std::vector<T> ga(dy.size()), gb(dy.size());
    for (std::size_t i = 0; i < dy.size(); ++i) {
      ga[i] = dy[i] * y[i];
      gb[i] = dy[i] * x[i];
    }
    if (auto da = grad_if_needed(a); !da.empty()) {
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += ga[i];
    }
    if (auto dbv = grad_if_needed(b); !dbv.empty()) {
      for (std::size_t i = 0; i < dy.size(); ++i) dbv[i] += gb[i];
    }
  });
  return result;
}

template <typename T>
BasicTensor<T> sum(BasicTape<T>& tape, const BasicTensor<T>& input) {
  T acc = 0;
  for (T v : input.data()) {
    acc += v;
  }
  auto result = BasicTensor<T>::scalar(acc);
  require_finite(result, "sum");
  tape.record({input}, result, [input](std::span<const T> dy) mutable {
    for (auto& g : input.mutable_grad()) {
      g += dy[0];
    }
  });
  return result;
}

// --- softmax / layer_norm --------------------------------------------------

namespace {

template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t width) {
  const std::size_t rows = x.size() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * width;
    T* yr = y.data() + r * width;
    T peak = *std::max_element(xr, xr + width);
    T total = 0;
    for (std::size_t k = 0; k < width; ++k) {
      yr[k] = std::exp(xr[k] - peak);
      total += yr[k];
    }
    for (std::size_t k = 0; k < width; ++k) {
      yr[k] /= total;
    }
  }
}

// dx = y * (dy - <dy, y>) per row, accumulated into dx.
template <typename T>
void softmax_rows_backward(std::span<const T> y, std::span<const T> dy,
                           std::span<T> dx, std::size_t width) {
  const std::size_t rows = y.size() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* yr = y.data() + r * width;
    const T* gr = dy.data() + r * width;
    T dot = 0;
    for (std::size_t k = 0; k < width; ++k) {
      dot += yr[k] * gr[k];
    }
    T* dr = dx.data() + r * width;
    for (std::size_t k = 0; k < width; ++k) {
      dr[k] += yr[k] * (gr[k] - dot);
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> softmax(BasicTape<T>& tape, const BasicTensor<T>& input) {
  if (input.rank() < 1) {
    throw ContractError("softmax: input must have rank >= 1");
  }
  const std::size_t width = input.shape().back();
  std::vector<T> out(input.numel());
  softmax_rows<T>(input.data(), out, width);
  BasicTensor<T> result(input.shape(), std::move(out));
  require_finite(result, "softmax");
  tape.record({input}, result,
              [input, result, width](std::span<const T> dy) mutable {
                softmax_rows_backward<T>(result.data(), dy,
                                         input.mutable_grad(), width);
              });
  return result;
}

template <typename T>
BasicTensor<T> layer_norm(BasicTape<T>& tape, const BasicTensor<T>& input,
                          const BasicTensor<T>& gain,
                          const BasicTensor<T>& shift, T epsilon) {
  if (input.rank() < 1) {
    throw ContractError("layer_norm: input must have rank >= 1");
  }
  const std::size_t width = input.shape().back();
  if (gain.numel() != width || shift.numel() != width) {
    shape_mismatch("layer_norm", input.shape(), gain.shape());
  }
  const std::size_t rows = input.numel() / width;
  const auto x = input.data();
  const auto g = gain.data();
  const auto s = shift.data();
  std::vector<T> normalized(x.size());
  std::vector<T> inv_std(rows);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * width;
    T mean = 0;
    for (std::size_t k = 0; k < width; ++k) mean += xr[k];
    mean /= T(width);
    T var = 0;
    for (std::size_t k = 0; k < width; ++k) {
      const T d = xr[k] - mean;
      var += d * d;
    }
    var /= T(width);
    const T rstd = T(1) / std::sqrt(var + epsilon);
    inv_std[r] = rstd;
    for (std::size_t k = 0; k < width; ++k) {
      const T xh = (xr[k] - mean) * rstd;
      normalized[r * width + k] = xh;
      out[r * width + k] = g[k] * xh + s[k];
    }
  }
  BasicTensor<T> result(input.shape(), std::move(out));
  require_finite(result, "layer_norm");
  tape.record(
      {input, gain, shift}, result,
      [input, gain, shift, normalized = std::move(normalized),
       inv_std = std::move(inv_std), rows, width](std::span<const T> dy) mutable {
        const auto g = gain.data();
        auto dx = grad_if_needed(input);
        auto dg = grad_if_needed(gain);
        auto ds = grad_if_needed(shift);
        std::vector<T> dxh(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = dy.data() + r * width;
          const T* xh = normalized.data() + r * width;
          T mean_dxh = 0, mean_dxh_xh = 0;
          for (std::size_t k = 0; k < width; ++k) {
            if (!dg.empty()) dg[k] += gr[k] * xh[k];
            if (!ds.empty()) ds[k] += gr[k];
            dxh[k] = gr[k] * g[k];
            mean_dxh += dxh[k];
            mean_dxh_xh += dxh[k] * xh[k];
          }
          if (dx.empty()) {
            continue;
          }
          mean_dxh /= T(width);
          mean_dxh_xh /= T(width);
          for (std::size_t k = 0; k < width; ++k) {
            dx[r * width + k] +=
                inv_std[r] * (dxh[k] - mean_dxh - xh[k] * mean_dxh_xh);
          }
        }
      });
  return result;
}

// --- attention -------------------------------------------------------------

template <typename T>
BasicTensor<T> multi_head_attention(BasicTape<T>& tape, const BasicTensor<T>& x,
                                    const AttentionWeights<T>& weights,
                                    std::size_t heads,
                                    std::vector<T>* probabilities) {
  require_rank(x, 3, "multi_head_attention", "input");
  const std::size_t n_batch = x.dim(0), len = x.dim(1), width = x.dim(2);
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("multi_head_attention: width " + std::to_string(width) +
                      " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  for (const auto* w : {&weights.query_weight, &weights.key_weight,
                        &weights.value_weight, &weights.out_weight}) {
    if (w->shape() != Shape{width, width}) {
      shape_mismatch("multi_head_attention", x.shape(), w->shape());
    }
  }
  for (const auto* b : {&weights.query_bias, &weights.key_bias,
                        &weights.value_bias, &weights.out_bias}) {
    if (b->shape() != Shape{width}) {
      shape_mismatch("multi_head_attention", x.shape(), b->shape());
    }
  }
  const std::size_t head_dim = width / heads;
  const std::size_t rows = n_batch * len;
  const T scale = T(1) / std::sqrt(T(head_dim));

  std::vector<T> q(rows * width), k(rows * width), v(rows * width);
  linear_forward<T>(x.data(), weights.query_weight.data(),
                    weights.query_bias.data(), q, rows, width, width);
  linear_forward<T>(x.data(), weights.key_weight.data(),
                    weights.key_bias.data(), k, rows, width, width);
  linear_forward<T>(x.data(), weights.value_weight.data(),
                    weights.value_bias.data(), v, rows, width, width);

  // probs laid out [N, H, L, L]
  std::vector<T> probs(n_batch * heads * len * len);
  std::vector<T> context(rows * width, T(0));
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + (n * heads + h) * len * len;
      const std::size_t col = h * head_dim;
      for (std::size_t i = 0; i < len; ++i) {
        const T* qi = q.data() + (n * len + i) * width + col;
        for (std::size_t j = 0; j < len; ++j) {
          const T* kj = k.data() + (n * len + j) * width + col;
          T dot = 0;
          for (std::size_t d = 0; d < head_dim; ++d) dot += qi[d] * kj[d];
          p[i * len + j] = dot * scale;
        }
      }
      softmax_rows<T>(std::span<const T>(p, len * len), std::span<T>(p, len * len),
                      len);
      for (std::size_t i = 0; i < len; ++i) {
        T* ci = context.data() + (n * len + i) * width + col;
        for (std::size_t j = 0; j < len; ++j) {
          const T pij = p[i * len + j];
          const T* vj = v.data() + (n * len + j) * width + col;
          for (std::size_t d = 0; d < head_dim; ++d) ci[d] += pij * vj[d];
        }
      }
    }
  }
  std::vector<T> out(rows * width);
  linear_forward<T>(context, weights.out_weight.data(), weights.out_bias.data(),
                    out, rows, width, width);
  if (probabilities != nullptr) {
    *probabilities = probs;
  }
  BasicTensor<T> result(x.shape(), std::move(out));
  require_finite(result, "multi_head_attention");

  AttentionWeights<T> w = weights;
  tape.record(
      {x, w.query_weight, w.query_bias, w.key_weight, w.key_bias,
       w.value_weight, w.value_bias, w.out_weight, w.out_bias},
      result,
      [x, w, q = std::move(q), k = std::move(k), v = std::move(v),
       probs = std::move(probs), context = std::move(context), n_batch, len,
       width, heads, head_dim, rows, scale](std::span<const T> dy) mutable {
        std::vector<T> dcontext(rows * width, T(0));
        linear_backward<T>(dy, context, w.out_weight.data(), dcontext,
                           grad_if_needed(w.out_weight),
                           grad_if_needed(w.out_bias), rows, width, width);
        std::vector<T> dq(rows * width, T(0)), dk(rows * width, T(0)),
            dv(rows * width, T(0));
        std::vector<T> dp(len * len), ds(len * len);
        for (std::size_t n = 0; n < n_batch; ++n) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + (n * heads + h) * len * len;
            const std::size_t col = h * head_dim;
            for (std::size_t i = 0; i < len; ++i) {
              const T* gi = dcontext.data() + (n * len + i) * width + col;
              for (std::size_t j = 0; j < len; ++j) {
                const T* vj = v.data() + (n * len + j) * width + col;
                T* dvj = dv.data() + (n * len + j) * width + col;
                T acc = 0;
                for (std::size_t d = 0; d < head_dim; ++d) {
                  acc += gi[d] * vj[d];
                  dvj[d] += p[i * len + j] * gi[d];
                }
                dp[i * len + j] = acc;
              }
            }
            std::fill(ds.begin(), ds.end(), T(0));
            softmax_rows_backward<T>(std::span<const T>(p, len * len), dp, ds,
                                     len);
            for (std::size_t i = 0; i < len; ++i) {
              const T* qi = q.data() + (n * len + i) * width + col;
              T* dqi = dq.data() + (n * len + i) * width + col;
              for (std::size_t j = 0; j < len; ++j) {
                const T g = ds[i * len + j] * scale;
                const T* kj = k.data() + (n * len + j) * width + col;
                T* dkj = dk.data() + (n * len + j) * width + col;
                for (std::size_t d = 0; d < head_dim; ++d) {
                  dqi[d] += g * kj[d];
                  dkj[d] += g * qi[d];
                }
              }
            }
          }
        }
        auto dx = grad_if_needed(x);
        linear_backward<T>(dq, x.data(), w.query_weight.data(), dx,
                           grad_if_needed(w.query_weight),
                           grad_if_needed(w.query_bias), rows, width, width);
        linear_backward<T>(dk, x.data(), w.key_weight.data(), dx,
                           grad_if_needed(w.key_weight),
                           grad_if_needed(w.key_bias), rows, width, width);
        linear_backward<T>(dv, x.data(), w.value_weight.data(), dx,
                           grad_if_needed(w.value_weight),
                           grad_if_needed(w.value_bias), rows, width, width);
      });
  return result;
}

// --- pooling / reshaping ---------------------------------------------------

template <typename T>
BasicTensor<T> global_avg_pool(BasicTape<T>& tape,
                               const BasicTensor<T>& input) {
  require_rank(input, 4, "global_avg_pool", "input");
  const std::size_t n_batch = input.dim(0), channels = input.dim(1);
  const std::size_t area = input.dim(2) * input.dim(3);
  const auto x = input.data();
  std::vector<T> out(n_batch * channels);
  for (std::size_t nc = 0; nc < n_batch * channels; ++nc) {
    T acc = 0;
    for (std::size_t k = 0; k < area; ++k) acc += x[nc * area + k];
    out[nc] = acc / T(area);
  }
  BasicTensor<T> result({n_batch, channels}, std::move(out));
  tape.record({input}, result, [input, area](std::span<const T> dy) mutable {
    auto dx = input.mutable_grad();
    for (std::size_t nc = 0; nc < dy.size(); ++nc) {
      const T g = dy[nc] / T(area);
      for (std::size_t k = 0; k < area; ++k) dx[nc * area + k] += g;
    }
  });
  return result;
}

template <typename T>
BasicTensor<T> mean_over_sequence(BasicTape<T>& tape,
                                  const BasicTensor<T>& input) {
  require_rank(input, 3, "mean_over_sequence", "input");
  const std::size_t n_batch = input.dim(0), len = input.dim(1),
                    width = input.dim(2);
  const auto x = input.data();
  std::vector<T> out(n_batch * width, T(0));
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t l = 0; l < len; ++l) {
      const T* row = x.data() + (n * len + l) * width;
      for (std::size_t d = 0; d < width; ++d) out[n * width + d] += row[d];
    }
    for (std::size_t d = 0; d < width; ++d) out[n * width + d] /= T(len);
  }
  BasicTensor<T> result({n_batch, width}, std::move(out));
  tape.record({input}, result,
              [input, n_batch, len, width](std::span<const T> dy) mutable {
                auto dx = input.mutable_grad();
                for (std::size_t n = 0; n < n_batch; ++n) {
                  for (std::size_t l = 0; l < len; ++l) {
                    for (std::size_t d = 0; d < width; ++d) {
                      dx[(n * len + l) * width + d] +=
                          dy[n * width + d] / T(len);
                    }
                  }
                }
              });
  return result;
}

template <typename T>
BasicTensor<T> reshape(BasicTape<T>& tape, const BasicTensor<T>& input,
                       Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    shape_mismatch("reshape", input.shape(), shape);
  }
  BasicTensor<T> result(std::move(shape), input.values());
  tape.record({input}, result, [input](std::span<const T> dy) mutable {
    auto dx = input.mutable_grad();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
  return result;
}

template <typename T>
BasicTensor<T> slice_rows(BasicTape<T>& tape, const BasicTensor<T>& input,
                          std::size_t begin, std::size_t end) {
  if (input.rank() < 1 || begin >= end || end > input.dim(0)) {
    throw ContractError("slice_rows: invalid range [" + std::to_string(begin) +
                        "," + std::to_string(end) + ") for shape " +
                        shape_to_string(input.shape()));
  }
  const std::size_t row = input.numel() / input.dim(0);
  Shape shape = input.shape();
  shape[0] = end - begin;
  const auto x = input.data();
  std::vector<T> out(x.begin() + begin * row, x.begin() + end * row);
  BasicTensor<T> result(std::move(shape), std::move(out));
  tape.record({input}, result,
              [input, offset = begin * row](std::span<const T> dy) mutable {
                auto dx = input.mutable_grad();
                for (std::size_t i = 0; i < dy.size(); ++i) {
                  dx[offset + i] += dy[i];
                }
              });
  return result;
}

// --- losses ----------------------------------------------------------------

template <typename T>
BasicTensor<T> cosine_embedding_loss(BasicTape<T>& tape,
                                     const BasicTensor<T>& a,
                                     const BasicTensor<T>& b,
                                     std::span<const std::uint8_t> same_scene,
                                     T margin) {
  if (a.shape() != b.shape() || a.rank() < 1 || a.rank() > 2) {
    shape_mismatch("cosine_embedding_loss", a.shape(), b.shape());
  }
  const std::size_t rows = a.rank() == 2 ? a.dim(0) : 1;
  const std::size_t width = a.shape().back();
  if (same_scene.size() != rows) {
    throw ContractError("cosine_embedding_loss: " +
                        std::to_string(same_scene.size()) + " flags for " +
                        std::to_string(rows) + " rows");
  }
  const auto x = a.data();
  const auto y = b.data();
  std::vector<T> cosines(rows), norm_a(rows), norm_b(rows);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* ar = x.data() + r * width;
    const T* br = y.data() + r * width;
    T dot = 0, aa = 0, bb = 0;
    for (std::size_t d = 0; d < width; ++d) {
      dot += ar[d] * br[d];
      aa += ar[d] * ar[d];
      bb += br[d] * br[d];
    }
    if (!(aa > T(0)) || !(bb > T(0))) {
      throw DegenerateEmbeddingError("cosine_embedding_loss: zero-norm row " +
                                     std::to_string(r));
    }
    norm_a[r] = std::sqrt(aa);
    norm_b[r] = std::sqrt(bb);
    cosines[r] = dot / (norm_a[r] * norm_b[r]);
    total += same_scene[r] ? T(1) - cosines[r]
                           : std::max(T(0), cosines[r] - margin);
  }
  auto result = BasicTensor<T>::scalar(total / T(rows));
  require_finite(result, "cosine_embedding_loss");
  std::vector<std::uint8_t> flags(same_scene.begin(), same_scene.end());
  tape.record(
      {a, b}, result,
      [a, b, flags = std::move(flags), cosines = std::move(cosines),
       norm_a = std::move(norm_a), norm_b = std::move(norm_b), rows, width,
       margin](std::span<const T> dy) mutable {
        const auto x = a.data();
        const auto y = b.data();
        auto da = grad_if_needed(a);
        auto dbv = grad_if_needed(b);
        for (std::size_t r = 0; r < rows; ++r) {
          // d loss / d cos for this row.
          T dcos;
          if (flags[r]) {
            dcos = T(-1);
          } else {
            dcos = cosines[r] - margin > T(0) ? T(1) : T(0);
          }
          const T g = dy[0] * dcos / T(rows);
          if (g == T(0)) {
            continue;
          }
          const T inv = T(1) / (norm_a[r] * norm_b[r]);
          const T ca = cosines[r] / (norm_a[r] * norm_a[r]);
          const T cb = cosines[r] / (norm_b[r] * norm_b[r]);
          for (std::size_t d = 0; d < width; ++d) {
            const T ad = x[r * width + d];
            const T bd = y[r * width + d];
            if (!da.empty()) da[r * width + d] += g * (bd * inv - ad * ca);
            if (!dbv.empty()) dbv[r * width + d] += g * (ad * inv - bd * cb);
          }
        }
      });
  return result;
}

template <typename T>
BasicTensor<T> bce_with_logits(BasicTape<T>& tape, const BasicTensor<T>& logits,
                               std::span<const T> targets) {
  const auto z = logits.data();
  if (targets.size() != z.size() || z.empty()) {
    throw ContractError("bce_with_logits: " + std::to_string(targets.size()) +
                        " targets for " + std::to_string(z.size()) + " logits");
  }
  T total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (targets[i] != T(0) && targets[i] != T(1)) {
      throw ContractError("bce_with_logits: targets must be 0 or 1");
    }
    total += std::max(z[i], T(0)) - z[i] * targets[i] +
             std::log1p(std::exp(-std::abs(z[i])));
  }
  auto result = BasicTensor<T>::scalar(total / T(z.size()));
  require_finite(result, "bce_with_logits");
  std::vector<T> t(targets.begin(), targets.end());
  tape.record({logits}, result,
              [logits, t = std::move(t)](std::span<const T> dy) mutable {
                const auto z = logits.data();
                auto dz = logits.mutable_grad();
                const T n = T(z.size());
                for (std::size_t i = 0; i < z.size(); ++i) {
                  const T s = z[i] >= T(0)
                                  ? T(1) / (T(1) + std::exp(-z[i]))
                                  : std::exp(z[i]) / (T(1) + std::exp(z[i]));
                  dz[i] += dy[0] * (s - t[i]) / n;
                }
              });
  return result;
}

// --- value helpers ---------------------------------------------------------

template <typename T>
double cosine_similarity(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw ContractError("cosine_similarity: length mismatch " +
                        std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()));
  }
  double dot = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    aa += double(a[i]) * double(a[i]);
    bb += double(b[i]) * double(b[i]);
  }
  if (!(aa > 0.0) || !(bb > 0.0)) {
    throw DegenerateEmbeddingError("cosine_similarity: zero-norm input");
  }
  return std::clamp(dot / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

double cosine_embedding_loss_value(double cosine, bool same_scene,
                                   double margin) {
  return same_scene ? 1.0 - cosine : std::max(0.0, cosine - margin);
}

double bce_with_logits_value(double logit, double target) {
  return std::max(logit, 0.0) - logit * target +
         std::log1p(std::exp(-std::abs(logit)));
}

// Kept strictly inside (0, 1): large logits would otherwise round to the
// endpoints.
double sigmoid(double logit) {
  double p;
  if (logit >= 0) {
    p = 1.0 / (1.0 + std::exp(-logit));
  } else {
    const double e = std::exp(logit);
    p = e / (1.0 + e);
  }
  return std::clamp(p, std::numeric_limits<double>::denorm_min(),
                    std::nextafter(1.0, 0.0));
}

#define POOLNET_INSTANTIATE_OPS(T)                                            \
  template BasicTensor<T> conv2d(BasicTape<T>&, const BasicTensor<T>&,        \
                                 const BasicTensor<T>&, const BasicTensor<T>&, \
                                 std::size_t, std::size_t);                   \
  template BasicTensor<T> linear(BasicTape<T>&, const BasicTensor<T>&,        \
                                 const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> relu(BasicTape<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> add(BasicTape<T>&, const BasicTensor<T>&,           \
                              const BasicTensor<T>&);                         \
  template BasicTensor<T> mul(BasicTape<T>&, const BasicTensor<T>&,           \
                              const BasicTensor<T>&);                         \
  template BasicTensor<T> sum(BasicTape<T>&, const BasicTensor<T>&);          \
  template BasicTensor<T> softmax(BasicTape<T>&, const BasicTensor<T>&);      \
  template BasicTensor<T> layer_norm(BasicTape<T>&, const BasicTensor<T>&,    \
                                     const BasicTensor<T>&,                   \
                                     const BasicTensor<T>&, T);               \
  template BasicTensor<T> multi_head_attention(                               \
      BasicTape<T>&, const BasicTensor<T>&, const AttentionWeights<T>&,       \
      std::size_t, std::vector<T>*);                                          \
  template BasicTensor<T> global_avg_pool(BasicTape<T>&,                      \
                                          const BasicTensor<T>&);             \
  template BasicTensor<T> mean_over_sequence(BasicTape<T>&,                   \
                                             const BasicTensor<T>&);          \
  template BasicTensor<T> reshape(BasicTape<T>&, const BasicTensor<T>&,       \
                                  Shape);                                     \
  template BasicTensor<T> slice_rows(BasicTape<T>&, const BasicTensor<T>&,    \
                                     std::size_t, std::size_t);               \
  template BasicTensor<T> cosine_embedding_loss(                              \
      BasicTape<T>&, const BasicTensor<T>&, const BasicTensor<T>&,            \
      std::span<const std::uint8_t>, T);                                      \
  template BasicTensor<T> bce_with_logits(BasicTape<T>&,                      \
                                          const BasicTensor<T>&,              \
                                          std::span<const T>);                \
  template double cosine_similarity<T>(std::span<const T>, std::span<const T>);

POOLNET_INSTANTIATE_OPS(float)
POOLNET_INSTANTIATE_OPS(double)

#undef POOLNET_INSTANTIATE_OPS

}  // namespace poolnet
