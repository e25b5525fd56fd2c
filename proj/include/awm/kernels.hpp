#pragma once

// Forward and backward kernels on plain tensors. The differentiable graph in
// autodiff.hpp composes these; they are also usable directly.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "awm/tensor.hpp"

namespace awm {

struct Conv2dGeometry {
  Index batch, in_channels, height, width;
  Index out_channels, kernel_h, kernel_w;
  Index stride, padding;
  Index out_h, out_w;
};

template <typename Scalar>
Conv2dGeometry conv2d_geometry(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& kernel, Index stride,
                               Index padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (kernel.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input has " +
                     std::to_string(input.dim(1)));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  if (padding < 0) throw ShapeError("conv2d: padding must be non-negative");
  Conv2dGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), kernel.dim(2),
                   kernel.dim(3), stride, padding, 0, 0};
  if (g.kernel_h > g.height + 2 * padding || g.kernel_w > g.width + 2 * padding) {
    throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " larger than padded input " +
                     to_string(input.shape()));
  }
  g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;
  return g;
}

namespace detail {

template <typename Scalar>
using ColMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unfolds one image into (Cin*Kh*Kw) x (Ho*Wo) patch columns with zero padding.
template <typename Scalar>
void im2col(const Scalar* image, const Conv2dGeometry& g, ColMatrix<Scalar>& cols) {
  cols.resize(g.in_channels * g.kernel_h * g.kernel_w, g.out_h * g.out_w);
  Index row = 0;
  for (Index c = 0; c < g.in_channels; ++c) {
    const Scalar* plane = image + c * g.height * g.width;
    for (Index kh = 0; kh < g.kernel_h; ++kh) {
      for (Index kw = 0; kw < g.kernel_w; ++kw, ++row) {
        Scalar* dst = cols.row(row).data();
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst + oh * g.out_w, dst + (oh + 1) * g.out_w, Scalar(0));
            continue;
          }
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + kw;
            dst[oh * g.out_w + ow] = (iw < 0 || iw >= g.width) ? Scalar(0) : plane[ih * g.width + iw];
          }
        }
      }
    }
  }
}

// Scatter-adds patch columns back into an image gradient.
template <typename Scalar>
void col2im(const ColMatrix<Scalar>& cols, const Conv2dGeometry& g, Scalar* image) {
  Index row = 0;
  for (Index c = 0; c < g.in_channels; ++c) {
    Scalar* plane = image + c * g.height * g.width;
    for (Index kh = 0; kh < g.kernel_h; ++kh) {
      for (Index kw = 0; kw < g.kernel_w; ++kw, ++row) {
        const Scalar* src = cols.row(row).data();
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + kh;
          if (ih < 0 || ih >= g.height) continue;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + kw;
            if (iw >= 0 && iw < g.width) plane[ih * g.width + iw] += src[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Zero-padded 2-D cross-correlation (the usual CNN "convolution").
template <typename Scalar>
BasicTensor<Scalar> conv2d(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& kernel, Index stride,
                           Index padding) {
  const auto g = conv2d_geometry(input, kernel, stride, padding);
  BasicTensor<Scalar> out({g.batch, g.out_channels, g.out_h, g.out_w});
  const Index in_plane = g.in_channels * g.height * g.width;
  const Index out_plane = g.out_channels * g.out_h * g.out_w;
  Eigen::Map<const detail::ColMatrix<Scalar>> w(kernel.data(), g.out_channels,
                                                 g.in_channels * g.kernel_h * g.kernel_w);
  detail::ColMatrix<Scalar> cols;
  for (Index b = 0; b < g.batch; ++b) {
    detail::im2col(input.data() + b * in_plane, g, cols);
    Eigen::Map<detail::ColMatrix<Scalar>> y(out.data() + b * out_plane, g.out_channels, g.out_h * g.out_w);
    y.noalias() = w * cols;
  }
  return out;
}

/// Gradients of conv2d with respect to input and kernel. Either output pointer may be null.
template <typename Scalar>
void conv2d_backward(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& kernel,
                     const BasicTensor<Scalar>& grad_out, Index stride, Index padding, BasicTensor<Scalar>* grad_input,
                     BasicTensor<Scalar>* grad_kernel) {
  const auto g = conv2d_geometry(input, kernel, stride, padding);
  const Index in_plane = g.in_channels * g.height * g.width;
  const Index out_plane = g.out_channels * g.out_h * g.out_w;
  const Index patch = g.in_channels * g.kernel_h * g.kernel_w;
  Eigen::Map<const detail::ColMatrix<Scalar>> w(kernel.data(), g.out_channels, patch);
  detail::ColMatrix<Scalar> cols;
  detail::ColMatrix<Scalar> dcols;
  for (Index b = 0; b < g.batch; ++b) {
    Eigen::Map<const detail::ColMatrix<Scalar>> dy(grad_out.data() + b * out_plane, g.out_channels,
                                                    g.out_h * g.out_w);
    if (grad_kernel) {
      detail::im2col(input.data() + b * in_plane, g, cols);
      Eigen::Map<detail::ColMatrix<Scalar>> dw(grad_kernel->data(), g.out_channels, patch);
      dw.noalias() += dy * cols.transpose();
    }
    if (grad_input) {
      dcols.noalias() = w.transpose() * dy;
      detail::col2im(dcols, g, grad_input->data() + b * in_plane);
    }
  }
}

/// Per-channel spatial mean: B x C x H x W -> B x C.
template <typename Scalar>
BasicTensor<Scalar> global_avg_pool(const BasicTensor<Scalar>& input) {
  require_rank(input, 4, "global_avg_pool");
  const Index bc = input.dim(0) * input.dim(1);
  const Index hw = input.dim(2) * input.dim(3);
  BasicTensor<Scalar> out({input.dim(0), input.dim(1)});
  for (Index i = 0; i < bc; ++i) {
    Scalar acc(0);
    const Scalar* p = input.data() + i * hw;
    for (Index j = 0; j < hw; ++j) acc += p[j];
    out[i] = acc / Scalar(hw);
  }
  return out;
}

template <typename Scalar>
void global_avg_pool_backward(const BasicTensor<Scalar>& grad_out, BasicTensor<Scalar>& grad_input) {
  const Index bc = grad_input.dim(0) * grad_input.dim(1);
  const Index hw = grad_input.dim(2) * grad_input.dim(3);
  for (Index i = 0; i < bc; ++i) {
    const Scalar g = grad_out[i] / Scalar(hw);
    Scalar* p = grad_input.data() + i * hw;
    for (Index j = 0; j < hw; ++j) p[j] += g;
  }
}

/// Non-overlapping 2x2 average pooling with stride 2 (floor on odd sizes).
template <typename Scalar>
BasicTensor<Scalar> avg_pool2x2(const BasicTensor<Scalar>& input) {
  require_rank(input, 4, "avg_pool2x2");
  const Index oh = input.dim(2) / 2, ow = input.dim(3) / 2;
  if (oh < 1 || ow < 1) throw ShapeError("avg_pool2x2: spatial size below 2 in " + to_string(input.shape()));
  BasicTensor<Scalar> out({input.dim(0), input.dim(1), oh, ow});
  for (Index b = 0; b < input.dim(0); ++b)
    for (Index c = 0; c < input.dim(1); ++c)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j)
          out(b, c, i, j) = (input(b, c, 2 * i, 2 * j) + input(b, c, 2 * i, 2 * j + 1) +
                             input(b, c, 2 * i + 1, 2 * j) + input(b, c, 2 * i + 1, 2 * j + 1)) /
                            Scalar(4);
  return out;
}

template <typename Scalar>
void avg_pool2x2_backward(const BasicTensor<Scalar>& grad_out, BasicTensor<Scalar>& grad_input) {
  for (Index b = 0; b < grad_out.dim(0); ++b)
    for (Index c = 0; c < grad_out.dim(1); ++c)
      for (Index i = 0; i < grad_out.dim(2); ++i)
        for (Index j = 0; j < grad_out.dim(3); ++j) {
          const Scalar g = grad_out(b, c, i, j) / Scalar(4);
          grad_input(b, c, 2 * i, 2 * j) += g;
          grad_input(b, c, 2 * i, 2 * j + 1) += g;
          grad_input(b, c, 2 * i + 1, 2 * j) += g;
          grad_input(b, c, 2 * i + 1, 2 * j + 1) += g;
        }
}

/// input (B x D) * weight^T (D x E) + bias (E), bias broadcast across rows.
template <typename Scalar>
BasicTensor<Scalar> fully_connected(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& weight,
                                    const BasicTensor<Scalar>& bias) {
  require_rank(input, 2, "fully_connected input");
  require_rank(weight, 2, "fully_connected weight");
  require_rank(bias, 1, "fully_connected bias");
  if (weight.dim(1) != input.dim(1) || bias.dim(0) != weight.dim(0)) {
    throw ShapeError("fully_connected: input " + to_string(input.shape()) + ", weight " + to_string(weight.shape()) +
                     ", bias " + to_string(bias.shape()) + " are incompatible");
  }
  BasicTensor<Scalar> out({input.dim(0), weight.dim(0)});
  out.matrix().noalias() = input.matrix() * weight.matrix().transpose();
  out.matrix().rowwise() += bias.flat().transpose();
  return out;
}

enum class Activation { relu, sigmoid };

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  // Branching keeps exp() argument non-positive.
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
BasicTensor<Scalar> activation(BasicTensor<Scalar> input, Activation kind) {
  for (Scalar& v : input.values()) v = kind == Activation::relu ? std::max(v, Scalar(0)) : sigmoid(v);
  return input;
}

/// Accumulates d(activation)/d(input) * grad_out into grad_input, using the forward output.
template <typename Scalar>
void activation_backward(const BasicTensor<Scalar>& output, const BasicTensor<Scalar>& grad_out,
                         BasicTensor<Scalar>& grad_input, Activation kind) {
  for (Index i = 0; i < output.size(); ++i) {
    const Scalar y = output[i];
    grad_input[i] += kind == Activation::relu ? (y > Scalar(0) ? grad_out[i] : Scalar(0))
                                              : grad_out[i] * y * (Scalar(1) - y);
  }
}

enum class BatchNormMode { train, eval };

template <typename Scalar>
struct BatchNormStats {
  BasicTensor<Scalar> running_mean;
  BasicTensor<Scalar> running_var;

  static BatchNormStats identity(Index channels) {
    return {BasicTensor<Scalar>({channels}, Scalar(0)), BasicTensor<Scalar>({channels}, Scalar(1))};
  }
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Quantities saved by a train-mode forward for the backward pass.
template <typename Scalar>
struct BatchNormCache {
  BasicTensor<Scalar> normalized;  // x_hat
  std::vector<Scalar> inv_std;     // per channel
};

/// Per-channel batch normalization of B x C x H x W. Train mode normalizes with biased batch
/// statistics and blends the unbiased variance into the running estimate.
template <typename Scalar>
BasicTensor<Scalar> batch_norm(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& gamma,
                               const BasicTensor<Scalar>& beta, BatchNormStats<Scalar>& stats, BatchNormMode mode,
                               BatchNormCache<Scalar>* cache = nullptr) {
  require_rank(input, 4, "batch_norm input");
  const Index B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gamma.size() != C || beta.size() != C || stats.running_mean.size() != C || stats.running_var.size() != C) {
    throw ShapeError("batch_norm: parameter length does not match " + std::to_string(C) + " channels");
  }
  const Index n = B * HW;
  if (mode == BatchNormMode::train && n < 2) {
    throw NumericalError("batch_norm: train mode needs at least 2 values per channel (B*H*W = " +
                         std::to_string(n) + ")");
  }
  const Scalar eps(kBatchNormEpsilon);
  BasicTensor<Scalar> out(input.shape());
  if (cache) {
    cache->normalized = BasicTensor<Scalar>(input.shape());
    cache->inv_std.assign(static_cast<std::size_t>(C), Scalar(0));
  }
  for (Index c = 0; c < C; ++c) {
    Scalar mean, var;
    if (mode == BatchNormMode::train) {
      Scalar sum(0);
      for (Index b = 0; b < B; ++b) {
        const Scalar* p = input.data() + (b * C + c) * HW;
        for (Index j = 0; j < HW; ++j) sum += p[j];
      }
      mean = sum / Scalar(n);
      Scalar sq(0);
      for (Index b = 0; b < B; ++b) {
        const Scalar* p = input.data() + (b * C + c) * HW;
        for (Index j = 0; j < HW; ++j) sq += (p[j] - mean) * (p[j] - mean);
      }
      var = sq / Scalar(n);
      const Scalar m(kBatchNormMomentum);
      stats.running_mean[c] = (Scalar(1) - m) * stats.running_mean[c] + m * mean;
      stats.running_var[c] = (Scalar(1) - m) * stats.running_var[c] + m * sq / Scalar(n - 1);
    } else {
      mean = stats.running_mean[c];
      var = stats.running_var[c];
    }
    const Scalar inv_std = Scalar(1) / std::sqrt(var + eps);
    if (cache) cache->inv_std[static_cast<std::size_t>(c)] = inv_std;
    for (Index b = 0; b < B; ++b) {
      const Index base = (b * C + c) * HW;
      for (Index j = 0; j < HW; ++j) {
        const Scalar xhat = (input[base + j] - mean) * inv_std;
        if (cache) cache->normalized[base + j] = xhat;
        out[base + j] = gamma[c] * xhat + beta[c];
      }
    }
  }
  return out;
}

/// Backward of batch_norm given the forward cache. Eval mode treats statistics as constants.
template <typename Scalar>
void batch_norm_backward(const BatchNormCache<Scalar>& cache, const BasicTensor<Scalar>& gamma,
                         const BasicTensor<Scalar>& grad_out, BatchNormMode mode, BasicTensor<Scalar>* grad_input,
                         BasicTensor<Scalar>* grad_gamma, BasicTensor<Scalar>* grad_beta) {
  const Index B = grad_out.dim(0), C = grad_out.dim(1), HW = grad_out.dim(2) * grad_out.dim(3);
  const Scalar n = Scalar(B * HW);
  for (Index c = 0; c < C; ++c) {
    Scalar sum_dy(0), sum_dy_xhat(0);
    for (Index b = 0; b < B; ++b) {
      const Index base = (b * C + c) * HW;
      for (Index j = 0; j < HW; ++j) {
        sum_dy += grad_out[base + j];
        sum_dy_xhat += grad_out[base + j] * cache.normalized[base + j];
      }
    }
    if (grad_gamma) (*grad_gamma)[c] += sum_dy_xhat;
    if (grad_beta) (*grad_beta)[c] += sum_dy;
    if (!grad_input) continue;
    const Scalar scale = gamma[c] * cache.inv_std[static_cast<std::size_t>(c)];
    for (Index b = 0; b < B; ++b) {
      const Index base = (b * C + c) * HW;
      for (Index j = 0; j < HW; ++j) {
        if (mode == BatchNormMode::train) {
          (*grad_input)[base + j] +=
              scale * (grad_out[base + j] - sum_dy / n - cache.normalized[base + j] * sum_dy_xhat / n);
        } else {
          (*grad_input)[base + j] += scale * grad_out[base + j];
        }
      }
    }
  }
}

template <typename Scalar>
struct CrossEntropyResult {
  Scalar loss;
  BasicTensor<Scalar> grad_logits;  // d(mean loss)/d(logits)
};

/// Mean softmax cross-entropy with max-subtraction for stability.
template <typename Scalar>
CrossEntropyResult<Scalar> softmax_cross_entropy(const BasicTensor<Scalar>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy logits");
  const Index B = logits.dim(0), K = logits.dim(1);
  if (static_cast<Index>(labels.size()) != B) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(B));
  }
  CrossEntropyResult<Scalar> r{Scalar(0), BasicTensor<Scalar>(logits.shape())};
  for (Index b = 0; b < B; ++b) {
    const int label = labels[static_cast<std::size_t>(b)];
    if (label < 0 || label >= K) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                              std::to_string(K) + ")");
    }
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index k = 0; k < K; ++k) mx = std::max(mx, logits(b, k));
    Scalar z(0);
    for (Index k = 0; k < K; ++k) z += std::exp(logits(b, k) - mx);
    const Scalar log_z = std::log(z) + mx;
    r.loss += log_z - logits(b, label);
    for (Index k = 0; k < K; ++k) {
      r.grad_logits(b, k) = (std::exp(logits(b, k) - log_z) - (k == label ? Scalar(1) : Scalar(0))) / Scalar(B);
    }
  }
  r.loss /= Scalar(B);
  return r;
}

}  // namespace awm
