#pragma once

// Differentiable operations recorded on a Tape. Each op accepts either a
// single sample or a batch with a leading axis; rows are independent.

#include <span>

#include "cdim/kernels.hpp"
#include "cdim/tape.hpp"

namespace cdim {

namespace detail {

template <typename T>
void add_into(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernels, Var<T> bias, std::size_t stride,
              std::size_t padding) {
  Tape<T>& tape = input.tape();
  const kernels::ConvGeometry g =
      kernels::conv_geometry(input.value(), kernels.value(), bias.value(), stride, padding);
  std::vector<T> cols = kernels::im2col<T>(input.value().data(), g);
  Tensor<T> out(kernels::conv_output_shape<T>(g, input.value().rank() == 4));
  T* o = out.data().data();
  for (std::size_t r = 0; r < g.rows(); ++r)
    std::copy(bias.value().data().begin(), bias.value().data().end(), o + r * g.out_c);
  kernels::gemm_acc(cols.data(), kernels.value().data().data(), o, g.rows(), g.patch(),
                    g.out_c);
  if (!tape.any_requires_grad({kernels})) cols.clear();
  const std::size_t xi = input.id(), ki = kernels.id(), bi = bias.id();
  return tape.record(
      OpKind::kConv2d, {input, kernels, bias}, std::move(out),
      [g, xi, ki, bi, cols = std::move(cols)](Tape<T>& t, std::size_t self) {
        const std::span<const T> gout = t.grad(self);
        if (t.requires_grad(bi)) {
          auto db = t.grad_buffer(bi);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.out_c; ++c) db[c] += gout[r * g.out_c + c];
        }
        if (t.requires_grad(ki)) {
          kernels::gemm_at_b_acc(cols.data(), gout.data(), t.grad_buffer(ki).data(), g.rows(),
                                 g.patch(), g.out_c);
        }
        if (t.requires_grad(xi)) {
          std::vector<T> dcols(g.rows() * g.patch(), T{0});
          kernels::gemm_a_bt_acc(gout.data(), t.value(ki).data().data(), dcols.data(),
                                 g.rows(), g.patch(), g.out_c);
          kernels::col2im_acc<T>(dcols, g, t.grad_buffer(xi));
        }
      });
}

template <typename T>
Var<T> maxpool2d(Var<T> input, std::size_t window, std::size_t stride) {
  std::vector<std::size_t> argmax;
  Tensor<T> out = kernels::maxpool2d(input.value(), window, stride, &argmax);
  const std::size_t xi = input.id();
  return input.tape().record(OpKind::kMaxPool2d, {input}, std::move(out),
                             [xi, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
                               const auto gout = t.grad(self);
                               auto dx = t.grad_buffer(xi);
                               for (std::size_t o = 0; o < argmax.size(); ++o)
                                 dx[argmax[o]] += gout[o];
                             });
}

template <typename T>
Var<T> global_average_pool(Var<T> input) {
  Tensor<T> out = kernels::global_average_pool(input.value());
  const std::size_t xi = input.id();
  const std::size_t c = input.shape().back();
  const std::size_t batch = input.value().rank() == 4 ? input.shape()[0] : 1;
  const std::size_t spatial = input.value().size() / (batch * c);
  return input.tape().record(
      OpKind::kGlobalAvgPool, {input}, std::move(out),
      [xi, c, batch, spatial](Tape<T>& t, std::size_t self) {
        const auto gout = t.grad(self);
        auto dx = t.grad_buffer(xi);
        const T inv = T{1} / static_cast<T>(spatial);
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t s = 0; s < spatial; ++s)
            for (std::size_t k = 0; k < c; ++k)
              dx[(n * spatial + s) * c + k] += gout[n * c + k] * inv;
      });
}

template <typename T>
Var<T> reshape(Var<T> input, Shape shape) {
  Tensor<T> out = input.value().reshaped(std::move(shape));
  const std::size_t xi = input.id();
  return input.tape().record(OpKind::kReshape, {input}, std::move(out),
                             [xi](Tape<T>& t, std::size_t self) {
                               detail::add_into<T>(t.grad_buffer(xi), t.grad(self));
                             });
}

/// (H,W,C) -> (H*W*C); a batched (N,H,W,C) map becomes (N, H*W*C).
template <typename T>
Var<T> flatten(Var<T> input) {
  const Shape& s = input.shape();
  if (s.size() == 4) return reshape(input, Shape{s[0], s[1] * s[2] * s[3]});
  return reshape(input, Shape{input.value().size()});
}

template <typename T>
Var<T> relu(Var<T> input) {
  Tensor<T> out = input.value();
  for (T& v : out.data()) v = std::max(v, T{0});
  const std::size_t xi = input.id();
  return input.tape().record(OpKind::kRelu, {input}, std::move(out),
                             [xi](Tape<T>& t, std::size_t self) {
                               const auto gout = t.grad(self);
                               const auto y = t.value(self).data();
                               auto dx = t.grad_buffer(xi);
                               for (std::size_t i = 0; i < dx.size(); ++i)
                                 if (y[i] > T{0}) dx[i] += gout[i];
                             });
}

template <typename T>
Var<T> fully_connected(Var<T> input, Var<T> weights, Var<T> bias, bool relu_activation = false) {
  Tensor<T> out = kernels::fully_connected(input.value(), weights.value(), bias.value());
  const std::size_t xi = input.id(), wi = weights.id(), bi = bias.id();
  const std::size_t rows = input.value().rank() == 2 ? input.shape()[0] : 1;
  const std::size_t d = weights.shape()[0], m = weights.shape()[1];
  Var<T> y = input.tape().record(
      OpKind::kFullyConnected, {input, weights, bias}, std::move(out),
      [xi, wi, bi, rows, d, m](Tape<T>& t, std::size_t self) {
        const auto gout = t.grad(self);
        if (t.requires_grad(bi)) {
          auto db = t.grad_buffer(bi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < m; ++j) db[j] += gout[r * m + j];
        }
        if (t.requires_grad(wi)) {
          kernels::gemm_at_b_acc(t.value(xi).data().data(), gout.data(),
                                 t.grad_buffer(wi).data(), rows, d, m);
        }
        if (t.requires_grad(xi)) {
          kernels::gemm_a_bt_acc(gout.data(), t.value(wi).data().data(),
                                 t.grad_buffer(xi).data(), rows, d, m);
        }
      });
  return relu_activation ? relu(y) : y;
}

/// Row-wise x / max(||x||_2, eps). A zero row maps to zero.
template <typename T>
Var<T> l2_normalize(Var<T> input, T eps = static_cast<T>(1e-12)) {
  if (input.value().rank() == 0) throw ShapeError("l2_normalize needs rank >= 1");
  const std::size_t d = input.shape().back();
  const std::size_t rows = input.value().size() / d;
  std::vector<T> denom(rows);
  Tensor<T> out = input.value();
  // Norms and the backward projection are accumulated in double: the
  // projection g - y (y . g) cancels heavily when g is nearly parallel to y.
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data().data() + r * d;
    double ss = 0;
    for (std::size_t i = 0; i < d; ++i) ss += static_cast<double>(row[i]) * row[i];
    norms[r] = std::sqrt(ss);
    denom[r] = std::max(static_cast<T>(norms[r]), eps);
    for (std::size_t i = 0; i < d; ++i) row[i] = static_cast<T>(row[i] / std::max(norms[r], static_cast<double>(eps)));
  }
  const std::size_t xi = input.id();
  return input.tape().record(
      OpKind::kL2Normalize, {input}, std::move(out),
      [xi, d, rows, eps, denom = std::move(denom), norms = std::move(norms)](Tape<T>& t,
                                                                             std::size_t self) {
        const auto gout = t.grad(self);
        const auto x = t.value(xi).data();
        auto dx = t.grad_buffer(xi);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t o = r * d;
          if (denom[r] > eps) {
            const double n = norms[r];
            double dot = 0;
            for (std::size_t i = 0; i < d; ++i) dot += x[o + i] / n * gout[o + i];
            for (std::size_t i = 0; i < d; ++i)
              dx[o + i] += static_cast<T>((gout[o + i] - x[o + i] / n * dot) / n);
          } else {
            for (std::size_t i = 0; i < d; ++i) dx[o + i] += gout[o + i] / eps;
          }
        }
      });
}

/// Joins parts end to end along the last axis. Parts are all (Ni) or all
/// (R, Ni) with a common R.
template <typename T>
Var<T> concatenate(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concatenate of an empty sequence");
  const std::size_t rank = parts.front().value().rank();
  if (rank != 1 && rank != 2) {
    throw ShapeError("concatenate parts must be rank 1 or 2, got " +
                     to_string(parts.front().shape()));
  }
  const std::size_t rows = rank == 2 ? parts.front().shape()[0] : 1;
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const Var<T>& p : parts) {
    if (p.value().rank() != rank || (rank == 2 && p.shape()[0] != rows)) {
      throw ShapeError("concatenate part " + to_string(p.shape()) + " incompatible with " +
                       to_string(parts.front().shape()));
    }
    widths.push_back(p.shape().back());
    ids.push_back(p.id());
    total += widths.back();
  }
  Tensor<T> out(rank == 2 ? Shape{rows, total} : Shape{total});
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t off = r * total;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto src = parts[k].value().data().subspan(r * widths[k], widths[k]);
      std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
      off += widths[k];
    }
  }
  return parts.front().tape().record(
      OpKind::kConcat, parts, std::move(out),
      [ids, widths, rows, total](Tape<T>& t, std::size_t self) {
        const auto gout = t.grad(self);
        std::size_t col = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (t.requires_grad(ids[k])) {
            auto dx = t.grad_buffer(ids[k]);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t i = 0; i < widths[k]; ++i)
                dx[r * widths[k] + i] += gout[r * total + col + i];
          }
          col += widths[k];
        }
      });
}

/// Rows [begin, end) along the leading axis.
template <typename T>
Var<T> slice_rows(Var<T> input, std::size_t begin, std::size_t end) {
  Tensor<T> out = cdim::slice_rows(input.value(), begin, end);
  const std::size_t stride = input.value().size() / input.shape()[0];
  const std::size_t xi = input.id();
  return input.tape().record(OpKind::kSliceRows, {input}, std::move(out),
                             [xi, stride, begin](Tape<T>& t, std::size_t self) {
                               const auto gout = t.grad(self);
                               auto dx = t.grad_buffer(xi);
                               for (std::size_t i = 0; i < gout.size(); ++i)
                                 dx[begin * stride + i] += gout[i];
                             });
}

/// Euclidean distance per row: (D),(D) -> scalar; (N,D),(N,D) -> (N).
/// The gradient at zero distance is the zero vector.
template <typename T>
Var<T> euclidean_distance(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape() || a.value().rank() == 0 || a.value().rank() > 2) {
    throw ShapeError("euclidean_distance shape mismatch: " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.value().size() / d;
  Tensor<T> out(a.value().rank() == 2 ? Shape{rows} : Shape{});
  for (std::size_t r = 0; r < rows; ++r) {
    out[r] = kernels::euclidean_distance<T>(a.value().data().subspan(r * d, d),
                                            b.value().data().subspan(r * d, d));
  }
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(
      OpKind::kEuclideanDistance, {a, b}, std::move(out),
      [ai, bi, d, rows](Tape<T>& t, std::size_t self) {
        const auto gout = t.grad(self);
        const auto dist = t.value(self).data();
        const auto av = t.value(ai).data();
        const auto bv = t.value(bi).data();
        std::span<T> da, db;
        if (t.requires_grad(ai)) da = t.grad_buffer(ai);
        if (t.requires_grad(bi)) db = t.grad_buffer(bi);
        for (std::size_t r = 0; r < rows; ++r) {
          if (dist[r] == T{0}) continue;
          const double s = static_cast<double>(gout[r]) / dist[r];
          for (std::size_t i = 0; i < d; ++i) {
            const T g = static_cast<T>(s * (static_cast<double>(av[r * d + i]) - bv[r * d + i]));
            if (!da.empty()) da[r * d + i] += g;
            if (!db.empty()) db[r * d + i] -= g;
          }
        }
      });
}

template <typename T>
Var<T> sum(Var<T> input) {
  T total{0};
  for (T v : input.value().data()) total += v;
  const std::size_t xi = input.id();
  return input.tape().record(OpKind::kSum, {input}, Tensor<T>::scalar(total),
                             [xi](Tape<T>& t, std::size_t self) {
                               const T g = t.grad(self)[0];
                               for (T& v : t.grad_buffer(xi)) v += g;
                             });
}

template <typename T>
Var<T> mean(Var<T> input) {
  T total{0};
  for (T v : input.value().data()) total += v;
  const std::size_t n = input.value().size();
  const std::size_t xi = input.id();
  return input.tape().record(OpKind::kMean, {input},
                             Tensor<T>::scalar(total / static_cast<T>(n)),
                             [xi, n](Tape<T>& t, std::size_t self) {
                               const T g = t.grad(self)[0] / static_cast<T>(n);
                               for (T& v : t.grad_buffer(xi)) v += g;
                             });
}

namespace detail {

template <typename T, typename Fwd, typename Da, typename Db>
Var<T> binary(OpKind kind, Var<T> a, Var<T> b, Fwd fwd, Da da, Db db) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op_name(kind)) + " shape mismatch: " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(out[i], bv[i]);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(kind, {a, b}, std::move(out),
                         [ai, bi, da, db](Tape<T>& t, std::size_t self) {
                           const auto g = t.grad(self);
                           const auto av = t.value(ai).data();
                           const auto bv = t.value(bi).data();
                           if (t.requires_grad(ai)) {
                             auto dx = t.grad_buffer(ai);
                             for (std::size_t i = 0; i < g.size(); ++i)
                               dx[i] += g[i] * da(av[i], bv[i]);
                           }
                           if (t.requires_grad(bi)) {
                             auto dx = t.grad_buffer(bi);
                             for (std::size_t i = 0; i < g.size(); ++i)
                               dx[i] += g[i] * db(av[i], bv[i]);
                           }
                         });
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      OpKind::kAdd, a, b, [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      OpKind::kSub, a, b, [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      OpKind::kMul, a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

/// scale * x + shift, elementwise.
template <typename T>
Var<T> affine(Var<T> input, T scale, T shift) {
  Tensor<T> out = input.value();
  for (T& v : out.data()) v = scale * v + shift;
  const std::size_t xi = input.id();
  return input.tape().record(OpKind::kAffineScalar, {input}, std::move(out),
                             [xi, scale](Tape<T>& t, std::size_t self) {
                               const auto g = t.grad(self);
                               auto dx = t.grad_buffer(xi);
                               for (std::size_t i = 0; i < g.size(); ++i) dx[i] += scale * g[i];
                             });
}

/// Mean over rows of -log softmax(logits)[label], max-subtracted.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const std::size_t> labels) {
  const Tensor<T>& z = logits.value();
  if (z.rank() != 1 && z.rank() != 2) {
    throw ShapeError("softmax_cross_entropy logits must be (K) or (N,K), got " +
                     to_string(z.shape()));
  }
  const std::size_t k = z.shape().back();
  const std::size_t rows = z.size() / k;
  if (labels.size() != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(rows) + " rows");
  }
  std::vector<T> probs(z.size());
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= k) {
      throw std::out_of_range("label " + std::to_string(labels[r]) + " outside [0," +
                              std::to_string(k) + ")");
    }
    const T* zr = z.data().data() + r * k;
    const T mx = *std::max_element(zr, zr + k);
    T se{0};
    for (std::size_t j = 0; j < k; ++j) se += std::exp(zr[j] - mx);
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(zr[j] - mx) / se;
    total += std::log(se) - (zr[labels[r]] - mx);
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const std::size_t zi = logits.id();
  return logits.tape().record(
      OpKind::kSoftmaxCrossEntropy, {logits},
      Tensor<T>::scalar(total / static_cast<T>(rows)),
      [zi, k, rows, lab = std::move(lab), probs = std::move(probs)](Tape<T>& t,
                                                                    std::size_t self) {
        const T g = t.grad(self)[0] / static_cast<T>(rows);
        auto dz = t.grad_buffer(zi);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < k; ++j)
            dz[r * k + j] += g * (probs[r * k + j] - (j == lab[r] ? T{1} : T{0}));
      });
}

}  // namespace cdim
