#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstring>
#include <utility>
#include <vector>

#include "iclab/rng.hpp"
#include "iclab/tensor.hpp"

namespace iclab {

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Shapes must match exactly; there is no broadcasting.
// ---------------------------------------------------------------------------

namespace detail {
template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}
}  // namespace detail

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<Scalar> out(a.shape());
  out.as_array() = a.as_array() + b.as_array();
  return out;
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<Scalar> out(a.shape());
  out.as_array() = a.as_array() - b.as_array();
  return out;
}

/// Elementwise (Hadamard) product.
template <typename Scalar>
Tensor<Scalar> hadamard(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "hadamard");
  Tensor<Scalar> out(a.shape());
  out.as_array() = a.as_array() * b.as_array();
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape());
  out.as_array() = a.as_array() * s;
  return out;
}

/// Elementwise max(x, 0).
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.as_array() = x.as_array().max(Scalar(0));
  return out;
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<Scalar> out({m, n});
  out.as_matrix(m, n).noalias() = a.as_matrix(m, k) * b.as_matrix(k, n);
  return out;
}

template <typename Scalar>
Tensor<Scalar> transpose2d(const Tensor<Scalar>& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d: expected rank-2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<Scalar> out({n, m});
  out.as_matrix(n, m) = a.as_matrix(m, n).transpose();
  return out;
}

// ---------------------------------------------------------------------------
// 2-D cross-correlation (no kernel flip), NCHW, zero padding
// ---------------------------------------------------------------------------

enum class Pad { kValid, kSame };

struct Conv2dGeometry {
  std::size_t batch, in_c, in_h, in_w;
  std::size_t filters, kh, kw, stride;
  std::size_t out_h, out_w;
  std::ptrdiff_t pad_top, pad_left;
};

/// Validates operand shapes and resolves output size and padding.
/// `same` uses ceil(H/stride) output with zero padding split evenly
/// (extra row/column at bottom/right); `valid` uses floor((H-k)/stride)+1.
inline Conv2dGeometry conv2d_geometry(const Shape& input, const Shape& kernel, std::size_t stride,
                                      Pad pad) {
  if (input.size() != 4 || kernel.size() != 4)
    throw ShapeError("conv2d: expected NxCxHxW input and FxCxKHxKW kernel, got " +
                     shape_str(input) + " and " + shape_str(kernel));
  if (input[1] != kernel[1])
    throw ShapeError("conv2d: input has " + std::to_string(input[1]) + " channels but kernel expects " +
                     std::to_string(kernel[1]));
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");

  Conv2dGeometry g;
  g.batch = input[0];
  g.in_c = input[1];
  g.in_h = input[2];
  g.in_w = input[3];
  g.filters = kernel[0];
  g.kh = kernel[2];
  g.kw = kernel[3];
  g.stride = stride;
  if (pad == Pad::kSame) {
    g.out_h = (g.in_h + stride - 1) / stride;
    g.out_w = (g.in_w + stride - 1) / stride;
    const std::size_t need_h = (g.out_h - 1) * stride + g.kh;
    const std::size_t need_w = (g.out_w - 1) * stride + g.kw;
    const std::size_t pad_h = need_h > g.in_h ? need_h - g.in_h : 0;
    const std::size_t pad_w = need_w > g.in_w ? need_w - g.in_w : 0;
    g.pad_top = static_cast<std::ptrdiff_t>(pad_h / 2);
    g.pad_left = static_cast<std::ptrdiff_t>(pad_w / 2);
  } else {
    if (g.in_h < g.kh || g.in_w < g.kw)
      throw ShapeError("conv2d: valid padding needs input at least kernel-sized, got " +
                       shape_str(input) + " with kernel " + shape_str(kernel));
    g.out_h = (g.in_h - g.kh) / stride + 1;
    g.out_w = (g.in_w - g.kw) / stride + 1;
    g.pad_top = 0;
    g.pad_left = 0;
  }
  return g;
}

/// Unfolds one CxHxW image into a (C*KH*KW) x (OH*OW) row-major patch matrix.
/// Out-of-bounds taps read as zero.
template <typename Scalar>
void im2col_image(const Scalar* img, const Conv2dGeometry& g, Scalar* col) {
  const std::size_t ohw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    const Scalar* plane = img + c * g.in_h * g.in_w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        Scalar* row = col + ((c * g.kh + ki) * g.kw + kj) * ohw;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * g.stride + ki) - g.pad_top;
          Scalar* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src_row = plane + static_cast<std::size_t>(ih) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + kj) - g.pad_left;
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w))
                          ? Scalar(0)
                          : src_row[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

/// Transpose of im2col_image: scatter-adds a patch matrix back into CxHxW.
template <typename Scalar>
void col2im_add_image(const Scalar* col, const Conv2dGeometry& g, Scalar* img) {
  const std::size_t ohw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    Scalar* plane = img + c * g.in_h * g.in_w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = col + ((c * g.kh + ki) * g.kw + kj) * ohw;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * g.stride + ki) - g.pad_top;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          Scalar* dst_row = plane + static_cast<std::size_t>(ih) * g.in_w;
          const Scalar* src = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + kj) - g.pad_left;
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            dst_row[static_cast<std::size_t>(iw)] += src[ow];
          }
        }
      }
    }
  }
}

/// Cross-correlation of an NxCxHxW batch with an FxCxKHxKW kernel,
/// implemented as per-image im2col followed by one GEMM per image.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      std::size_t stride, Pad pad) {
  const Conv2dGeometry g = conv2d_geometry(input.shape(), kernel.shape(), stride, pad);
  const std::size_t ckk = g.in_c * g.kh * g.kw;
  const std::size_t ohw = g.out_h * g.out_w;
  Tensor<Scalar> out({g.batch, g.filters, g.out_h, g.out_w});
  std::vector<Scalar> col(ckk * ohw);
  auto kmat = kernel.as_matrix(g.filters, ckk);
  using MatrixRM = typename Tensor<Scalar>::MatrixRM;
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col_image(input.data() + n * g.in_c * g.in_h * g.in_w, g, col.data());
    Eigen::Map<const MatrixRM> colmat(col.data(), static_cast<Eigen::Index>(ckk),
                                      static_cast<Eigen::Index>(ohw));
    Eigen::Map<MatrixRM> omat(out.data() + n * g.filters * ohw,
                              static_cast<Eigen::Index>(g.filters),
                              static_cast<Eigen::Index>(ohw));
    omat.noalias() = kmat * colmat;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Mean over the listed axes; reduced axes are dropped from the result shape.
template <typename Scalar>
Tensor<Scalar> reduce_mean(const Tensor<Scalar>& x, const std::vector<std::size_t>& axes) {
  std::vector<bool> reduced(x.rank(), false);
  for (std::size_t a : axes) {
    if (a >= x.rank()) throw ShapeError("reduce_mean: axis out of range");
    reduced[a] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t a = 0; a < x.rank(); ++a) {
    if (reduced[a])
      count *= x.dim(a);
    else
      out_shape.push_back(x.dim(a));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<Scalar> out(out_shape, Scalar(0));

  std::vector<std::size_t> idx(x.rank(), 0);
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t out_flat = 0;
    for (std::size_t a = 0; a < x.rank(); ++a)
      if (!reduced[a]) out_flat = out_flat * x.dim(a) + idx[a];
    out[out_flat] += x[flat];
    for (std::size_t a = x.rank(); a-- > 0;) {
      if (++idx[a] < x.dim(a)) break;
      idx[a] = 0;
    }
  }
  out.as_array() /= static_cast<Scalar>(count);
  return out;
}

/// Population variance over the listed axes.
template <typename Scalar>
Tensor<Scalar> reduce_var(const Tensor<Scalar>& x, const std::vector<std::size_t>& axes) {
  Tensor<Scalar> mean = reduce_mean(x, axes);
  Tensor<Scalar> sq(x.shape());
  sq.as_array() = x.as_array() * x.as_array();
  Tensor<Scalar> mean_sq = reduce_mean(sq, axes);
  Tensor<Scalar> out(mean.shape());
  out.as_array() = mean_sq.as_array() - mean.as_array() * mean.as_array();
  // clamp tiny negative values from cancellation
  out.as_array() = out.as_array().max(Scalar(0));
  return out;
}

/// NxCxHxW -> NxC spatial mean.
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expected NxCxHxW, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<Scalar> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    const Scalar* plane = x.data() + i * hw;
    Eigen::Map<const typename Tensor<Scalar>::ArrayX> m(plane, static_cast<Eigen::Index>(hw));
    out[i] = m.mean();
  }
  return out;
}

/// Index of the largest entry in each row of an NxK matrix (first on ties).
template <typename Scalar>
std::vector<std::size_t> argmax_rows(const Tensor<Scalar>& x) {
  if (x.rank() != 2) throw ShapeError("argmax_rows: expected rank-2, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), k = x.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar* row = x.data() + i * k;
    out[i] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random sampling
// ---------------------------------------------------------------------------

/// I.i.d. {0,1} gates, each 1 with probability p_keep.
template <typename Scalar = double>
Tensor<Scalar> sample_bernoulli(Rng& rng, double p_keep, Shape shape) {
  if (!(p_keep > 0.0 && p_keep <= 1.0))
    throw ValueError("sample_bernoulli: p_keep must be in (0, 1], got " + std::to_string(p_keep));
  Tensor<Scalar> out(std::move(shape));
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = rng.bernoulli(p_keep) ? Scalar(1) : Scalar(0);
  return out;
}

/// I.i.d. normal draws with the given mean and standard deviation.
template <typename Scalar = double>
Tensor<Scalar> sample_gaussian(Rng& rng, Shape shape, double mean = 0.0, double stddev = 1.0) {
  Tensor<Scalar> out(std::move(shape));
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<Scalar>(mean + stddev * rng.normal());
  return out;
}

template <typename Scalar = double>
Tensor<Scalar> sample_uniform(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0) {
  Tensor<Scalar> out(std::move(shape));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(rng.uniform(lo, hi));
  return out;
}

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& t) {
  return t.as_array().isFinite().all();
}

}  // namespace iclab
