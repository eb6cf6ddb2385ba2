#pragma once

// Explicit-loop reference implementations used only by tests. They are kept
// deliberately naive and share no code with src/.

#include <cmath>
#include <cstddef>
#include <vector>

namespace poolnet::testing {

// input [N,C,H,W], weight [O,C,KH,KW], bias [O]
inline std::vector<double> conv2d_oracle(const std::vector<double>& input,
                                         std::size_t n, std::size_t c,
                                         std::size_t h, std::size_t w,
                                         const std::vector<double>& weight,
                                         std::size_t o, std::size_t kh,
                                         std::size_t kw,
                                         const std::vector<double>& bias,
                                         std::size_t stride,
                                         std::size_t padding, std::size_t* out_h,
                                         std::size_t* out_w) {
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
  std::vector<double> out(n * o * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = bias[oc];
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = long(y * stride + i) - long(padding);
                const long ix = long(x * stride + j) - long(padding);
                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(w)) continue;
                acc += input[((b * c + ic) * h + iy) * w + ix] *
                       weight[((oc * c + ic) * kh + i) * kw + j];
              }
          out[((b * o + oc) * oh + y) * ow + x] = acc;
        }
  *out_h = oh;
  *out_w = ow;
  return out;
}

inline std::vector<double> linear_oracle(const std::vector<double>& x,
                                         std::size_t rows, std::size_t in,
                                         const std::vector<double>& w,
                                         std::size_t out,
                                         const std::vector<double>& b) {
  std::vector<double> y(rows * out);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b[o];
      for (std::size_t k = 0; k < in; ++k) acc += x[r * in + k] * w[o * in + k];
      y[r * out + o] = acc;
    }
  return y;
}

inline std::vector<double> layer_norm_oracle(const std::vector<double>& x,
                                             std::size_t width,
                                             const std::vector<double>& gain,
                                             const std::vector<double>& shift,
                                             double eps) {
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < x.size() / width; ++r) {
    double mean = 0;
    for (std::size_t k = 0; k < width; ++k) mean += x[r * width + k];
    mean /= double(width);
    double var = 0;
    for (std::size_t k = 0; k < width; ++k) {
      var += (x[r * width + k] - mean) * (x[r * width + k] - mean);
    }
    var /= double(width);
    for (std::size_t k = 0; k < width; ++k) {
      y[r * width + k] =
          gain[k] * (x[r * width + k] - mean) / std::sqrt(var + eps) + shift[k];
    }
  }
  return y;
}

struct AttentionOracleWeights {
  std::vector<double> wq, bq, wk, bk, wv, bv, wo, bo;
};

// Per-head loop: for each head, slice the projections, compute scores,
// normalize, mix values; then concatenate and project.
inline std::vector<double> attention_oracle(const std::vector<double>& x,
                                            std::size_t n, std::size_t len,
                                            std::size_t d, std::size_t heads,
                                            const AttentionOracleWeights& p) {
  const std::size_t hd = d / heads;
  auto project = [&](const std::vector<double>& w, const std::vector<double>& b,
                     std::size_t b_idx, std::size_t t, std::size_t out_col) {
    double acc = b[out_col];
    for (std::size_t k = 0; k < d; ++k) {
      acc += x[(b_idx * len + t) * d + k] * w[out_col * d + k];
    }
    return acc;
  };
  std::vector<double> concat(n * len * d, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> scores(len);
        for (std::size_t j = 0; j < len; ++j) {
          double s = 0;
          for (std::size_t e = 0; e < hd; ++e) {
            s += project(p.wq, p.bq, b, i, h * hd + e) *
                 project(p.wk, p.bk, b, j, h * hd + e);
          }
          scores[j] = s / std::sqrt(double(hd));
        }
        double mx = scores[0];
        for (double s : scores) mx = s > mx ? s : mx;
        double z = 0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          z += s;
        }
        for (std::size_t e = 0; e < hd; ++e) {
          double acc = 0;
          for (std::size_t j = 0; j < len; ++j) {
            acc += scores[j] / z * project(p.wv, p.bv, b, j, h * hd + e);
          }
          concat[(b * len + i) * d + h * hd + e] = acc;
        }
      }
    }
  }
  return linear_oracle(concat, n * len, d, p.wo, d, p.bo);
}

// Scalar Adam run for `steps` iterations from x0 with a constant gradient.
inline double adam_oracle(double x0, double grad, int steps, double lr,
                          double beta1 = 0.9, double beta2 = 0.999,
                          double eps = 1e-8) {
  double x = x0, m = 0, v = 0;
  for (int t = 1; t <= steps; ++t) {
    m = beta1 * m + (1 - beta1) * grad;
    v = beta2 * v + (1 - beta2) * grad * grad;
    const double mh = m / (1 - std::pow(beta1, t));
    const double vh = v / (1 - std::pow(beta2, t));
    x -= lr * mh / (std::sqrt(vh) + eps);
  }
  return x;
}

}  // namespace poolnet::testing
