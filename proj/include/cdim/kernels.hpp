#pragma once

// Forward and backward loops for the dense layers. Every loop nest keeps
// a fixed per-row accumulation order, so a sample's result never depends
// on which batch it was evaluated in.

#include <limits>

#include "cdim/tensor.hpp"

namespace cdim::kernels {

/// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) acc[j] = crow[j];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<T>(acc[j]);
  }
}

/// C[K,N] += A[M,K]^T * D[M,N]
template <typename T>
void gemm_at_b_acc(const T* a, const T* d, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> acc(c, c + k * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* drow = d + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0) continue;
      double* crow = acc.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * drow[j];
    }
  }
  for (std::size_t i = 0; i < k * n; ++i) c[i] = static_cast<T>(acc[i]);
}

/// C[M,K] += D[M,N] * B[K,N]^T
template <typename T>
void gemm_a_bt_acc(const T* d, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_acc(d, bt.data(), c, m, n, k);
}

struct ConvGeometry {
  std::size_t batch, in_h, in_w, in_c;
  std::size_t k_h, k_w, out_c;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return k_h * k_w * in_c; }
  std::size_t rows() const { return batch * out_h * out_w; }
};

/// Validates shapes for conv2d over (H,W,C) or batched (N,H,W,C) input.
template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& kernels,
                           const Tensor<T>& bias, std::size_t stride, std::size_t padding) {
  if (input.rank() != 3 && input.rank() != 4) {
    throw ShapeError("conv2d input must be (H,W,C) or (N,H,W,C), got " +
                     to_string(input.shape()));
  }
  if (kernels.rank() != 4) {
    throw ShapeError("conv2d kernels must be (Kh,Kw,Cin,Cout), got " +
                     to_string(kernels.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  const bool batched = input.rank() == 4;
  ConvGeometry g{};
  g.batch = batched ? input.dim(0) : 1;
  g.in_h = input.dim(batched ? 1 : 0);
  g.in_w = input.dim(batched ? 2 : 1);
  g.in_c = input.dim(batched ? 3 : 2);
  g.k_h = kernels.dim(0);
  g.k_w = kernels.dim(1);
  g.out_c = kernels.dim(3);
  g.stride = stride;
  g.padding = padding;
  if (kernels.dim(2) != g.in_c) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(input.shape()) +
                     " vs kernels " + to_string(kernels.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != g.out_c) {
    throw ShapeError("conv2d bias " + to_string(bias.shape()) + " does not match kernels " +
                     to_string(kernels.shape()));
  }
  if (g.k_h > g.in_h + 2 * padding || g.k_w > g.in_w + 2 * padding) {
    throw ShapeError("conv2d kernels " + to_string(kernels.shape()) +
                     " larger than padded input " + to_string(input.shape()));
  }
  g.out_h = (g.in_h + 2 * padding - g.k_h) / stride + 1;
  g.out_w = (g.in_w + 2 * padding - g.k_w) / stride + 1;
  return g;
}

/// Unrolls receptive fields into rows of length Kh*Kw*Cin, zero padded.
template <typename T>
std::vector<T> im2col(std::span<const T> in, const ConvGeometry& g) {
  std::vector<T> cols(g.rows() * g.patch(), T{0});
  T* dst = cols.data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* img = in.data() + n * g.in_h * g.in_w * g.in_c;
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow, dst += g.patch()) {
        for (std::size_t kh = 0; kh < g.k_h; ++kh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kw = 0; kw < g.k_w; ++kw) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            const T* src = img + (static_cast<std::size_t>(ih) * g.in_w +
                                  static_cast<std::size_t>(iw)) * g.in_c;
            std::copy(src, src + g.in_c, dst + (kh * g.k_w + kw) * g.in_c);
          }
        }
      }
    }
  }
  return cols;
}

/// Scatters column gradients back into the input gradient (adds).
template <typename T>
void col2im_acc(std::span<const T> cols, const ConvGeometry& g, std::span<T> in_grad) {
  const T* src = cols.data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    T* img = in_grad.data() + n * g.in_h * g.in_w * g.in_c;
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow, src += g.patch()) {
        for (std::size_t kh = 0; kh < g.k_h; ++kh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kw = 0; kw < g.k_w; ++kw) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            T* dst = img + (static_cast<std::size_t>(ih) * g.in_w +
                            static_cast<std::size_t>(iw)) * g.in_c;
            const T* s = src + (kh * g.k_w + kw) * g.in_c;
            for (std::size_t c = 0; c < g.in_c; ++c) dst[c] += s[c];
          }
        }
      }
    }
  }
}

template <typename T>
Shape conv_output_shape(const ConvGeometry& g, bool batched) {
  if (batched) return {g.batch, g.out_h, g.out_w, g.out_c};
  return {g.out_h, g.out_w, g.out_c};
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  const ConvGeometry g = conv_geometry(input, kernels, bias, stride, padding);
  const auto cols = im2col<T>(input.data(), g);
  Tensor<T> out(conv_output_shape<T>(g, input.rank() == 4));
  T* o = out.data().data();
  for (std::size_t r = 0; r < g.rows(); ++r)
    std::copy(bias.data().begin(), bias.data().end(), o + r * g.out_c);
  gemm_acc(cols.data(), kernels.data().data(), o, g.rows(), g.patch(), g.out_c);
  return out;
}

struct PoolGeometry {
  std::size_t batch, in_h, in_w, c, window, stride, out_h, out_w;
};

template <typename T>
PoolGeometry pool_geometry(const Tensor<T>& input, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw ShapeError("maxpool2d window and stride must be positive");
  if (input.rank() != 3 && input.rank() != 4) {
    throw ShapeError("maxpool2d input must be (H,W,C) or (N,H,W,C), got " +
                     to_string(input.shape()));
  }
  const bool batched = input.rank() == 4;
  PoolGeometry g{};
  g.batch = batched ? input.dim(0) : 1;
  g.in_h = input.dim(batched ? 1 : 0);
  g.in_w = input.dim(batched ? 2 : 1);
  g.c = input.dim(batched ? 3 : 2);
  g.window = window;
  g.stride = stride;
  if (window > g.in_h || window > g.in_w) {
    throw ShapeError("maxpool2d window " + std::to_string(window) + " exceeds input " +
                     to_string(input.shape()));
  }
  g.out_h = (g.in_h - window) / stride + 1;
  g.out_w = (g.in_w - window) / stride + 1;
  return g;
}

/// Max pooling; `argmax` receives the flat input index of each winner.
/// Ties resolve to the lowest flat index.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t window, std::size_t stride,
                    std::vector<std::size_t>* argmax = nullptr) {
  const PoolGeometry g = pool_geometry(input, window, stride);
  Shape shape = input.rank() == 4 ? Shape{g.batch, g.out_h, g.out_w, g.c}
                                  : Shape{g.out_h, g.out_w, g.c};
  Tensor<T> out(std::move(shape));
  if (argmax) argmax->assign(out.size(), 0);
  const T* in = input.data().data();
  std::size_t o = 0;
  for (std::size_t n = 0; n < g.batch; ++n) {
    const std::size_t base = n * g.in_h * g.in_w * g.c;
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        for (std::size_t c = 0; c < g.c; ++c, ++o) {
          std::size_t best = base + ((oh * stride) * g.in_w + ow * stride) * g.c + c;
          for (std::size_t kh = 0; kh < window; ++kh) {
            for (std::size_t kw = 0; kw < window; ++kw) {
              const std::size_t idx =
                  base + ((oh * stride + kh) * g.in_w + ow * stride + kw) * g.c + c;
              if (in[idx] > in[best]) best = idx;
            }
          }
          out[o] = in[best];
          if (argmax) (*argmax)[o] = best;
        }
      }
    }
  }
  return out;
}

/// Channel means over the spatial axes: (H,W,C) -> (C), (N,H,W,C) -> (N,C).
template <typename T>
Tensor<T> global_average_pool(const Tensor<T>& input) {
  if (input.rank() != 3 && input.rank() != 4) {
    throw ShapeError("global_average_pool input must be (H,W,C) or (N,H,W,C), got " +
                     to_string(input.shape()));
  }
  const bool batched = input.rank() == 4;
  const std::size_t batch = batched ? input.dim(0) : 1;
  const std::size_t c = input.shape().back();
  const std::size_t spatial = input.size() / (batch * c);
  Tensor<T> out(batched ? Shape{batch, c} : Shape{c});
  for (std::size_t n = 0; n < batch; ++n) {
    const T* src = input.data().data() + n * spatial * c;
    T* dst = out.data().data() + n * c;
    for (std::size_t s = 0; s < spatial; ++s)
      for (std::size_t k = 0; k < c; ++k) dst[k] += src[s * c + k];
    for (std::size_t k = 0; k < c; ++k) dst[k] /= static_cast<T>(spatial);
  }
  return out;
}

/// Affine map on the last axis: (D)->(M) or (N,D)->(N,M).
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                          bool relu = false) {
  if (input.rank() != 1 && input.rank() != 2) {
    throw ShapeError("fully_connected input must be (D) or (N,D), got " +
                     to_string(input.shape()));
  }
  if (weights.rank() != 2 || weights.dim(0) != input.shape().back()) {
    throw ShapeError("fully_connected dimension mismatch: input " + to_string(input.shape()) +
                     " vs weights " + to_string(weights.shape()));
  }
  const std::size_t m = weights.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != m) {
    throw ShapeError("fully_connected bias " + to_string(bias.shape()) +
                     " does not match weights " + to_string(weights.shape()));
  }
  const std::size_t rows = input.rank() == 2 ? input.dim(0) : 1;
  Tensor<T> out(input.rank() == 2 ? Shape{rows, m} : Shape{m});
  T* o = out.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(bias.data().begin(), bias.data().end(), o + r * m);
  gemm_acc(input.data().data(), weights.data().data(), o, rows, weights.dim(0), m);
  if (relu) {
    for (T& v : out.data()) v = std::max(v, T{0});
  }
  return out;
}

/// Row-wise division by max(||row||_2, eps) over the last axis.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& input, T eps = static_cast<T>(1e-12)) {
  if (input.rank() == 0) throw ShapeError("l2_normalize needs rank >= 1");
  Tensor<T> out = input;
  const std::size_t d = input.shape().back();
  for (std::size_t r = 0; r < input.size() / d; ++r) {
    T* row = out.data().data() + r * d;
    double ss = 0;
    for (std::size_t i = 0; i < d; ++i) ss += static_cast<double>(row[i]) * row[i];
    const double denom = std::max(std::sqrt(ss), static_cast<double>(eps));
    for (std::size_t i = 0; i < d; ++i) row[i] = static_cast<T>(row[i] / denom);
  }
  return out;
}

template <typename T>
T euclidean_distance(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw ShapeError("euclidean_distance length mismatch: " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  }
  double ss = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    ss += d * d;
  }
  return static_cast<T>(std::sqrt(ss));
}

}  // namespace cdim::kernels
