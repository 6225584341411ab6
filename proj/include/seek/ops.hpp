#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "seek/model.hpp"
#include "seek/tensor.hpp"

namespace seek {

// y = w * x + b. Convolutions are stride-1 cross-correlations with zero padding.
inline Tensor apply_linear(const LayerSpec& layer, const Tensor& x) {
  if (layer.kind == LayerKind::FullyConnected) {
    const FcParams& p = layer.fc();
    const std::size_t n_out = p.out_features(), n_in = p.in_features();
    if (x.size() != n_in) {
      throw StructuralError("fully-connected layer " + std::to_string(layer.id) + " expects " +
                            std::to_string(n_in) + " inputs, got " + shape_string(x.shape()));
    }
    Tensor y(Shape{n_out});
    const double* w = p.weight.values().data();
    const double* xv = x.values().data();
    for (std::size_t j = 0; j < n_out; ++j) {
      double acc = 0.0;
      const double* row = w + j * n_in;
      for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * xv[i];
      y[j] = acc + p.bias[j];
    }
    return y;
  }
  if (layer.kind != LayerKind::Convolution) {
    throw StructuralError("apply_linear on non-linear layer " + std::to_string(layer.id));
  }
  const ConvParams& p = layer.conv();
  if (x.rank() != 3 || x.dim(0) != p.in_channels()) {
    throw StructuralError("convolution layer " + std::to_string(layer.id) + " expects " +
                          std::to_string(p.in_channels()) + " input channels, got " +
                          shape_string(x.shape()));
  }
  const std::size_t n_out = p.out_channels(), n_in = p.in_channels();
  const std::size_t kh = p.kernel_h(), kw = p.kernel_w();
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(x.dim(1));
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(x.dim(2));
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(p.pad_h);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(p.pad_w);
  const std::ptrdiff_t OH = H + 2 * ph - static_cast<std::ptrdiff_t>(kh) + 1;
  const std::ptrdiff_t OW = W + 2 * pw - static_cast<std::ptrdiff_t>(kw) + 1;
  Tensor y(Shape{n_out, static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
  const double* w = p.weight.values().data();
  const double* xv = x.values().data();
  for (std::size_t co = 0; co < n_out; ++co) {
    for (std::ptrdiff_t oh = 0; oh < OH; ++oh) {
      for (std::ptrdiff_t ow = 0; ow < OW; ++ow) {
        double acc = 0.0;
        for (std::size_t ci = 0; ci < n_in; ++ci) {
          const double* kernel = w + (co * n_in + ci) * kh * kw;
          const double* plane = xv + ci * static_cast<std::size_t>(H * W);
          for (std::size_t a = 0; a < kh; ++a) {
            const std::ptrdiff_t ih = oh + static_cast<std::ptrdiff_t>(a) - ph;
            if (ih < 0 || ih >= H) continue;
            for (std::size_t b = 0; b < kw; ++b) {
              const std::ptrdiff_t iw = ow + static_cast<std::ptrdiff_t>(b) - pw;
              if (iw < 0 || iw >= W) continue;
              acc += kernel[a * kw + b] * plane[ih * W + iw];
            }
          }
        }
        y[(co * OH + oh) * OW + ow] = acc + p.bias[co];
      }
    }
  }
  return y;
}

inline Tensor apply_relu(Tensor y) {
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

inline void check_pool(const Shape& in, const PoolParams& pool) {
  if (pool.kernel_h == 0 || pool.kernel_w == 0 || pool.stride_h == 0 || pool.stride_w == 0) {
    throw StructuralError("pool kernel and stride must be positive");
  }
  if (in.size() != 3 || in[1] < pool.kernel_h || in[2] < pool.kernel_w ||
      (in[1] - pool.kernel_h) % pool.stride_h != 0 || (in[2] - pool.kernel_w) % pool.stride_w != 0) {
    throw StructuralError("pool window does not tile input " + shape_string(in));
  }
}

inline Shape pooled_shape(const Shape& in, const PoolParams& pool) {
  check_pool(in, pool);
  return {in[0], (in[1] - pool.kernel_h) / pool.stride_h + 1, (in[2] - pool.kernel_w) / pool.stride_w + 1};
}

// z = ReLU(maxpool(y)).
inline Tensor apply_maxpool_relu(const Tensor& y, const PoolParams& pool) {
  const Shape out_shape = pooled_shape(y.shape(), pool);
  Tensor z(out_shape);
  const std::size_t C = out_shape[0], OH = out_shape[1], OW = out_shape[2];
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow) {
        double best = 0.0;  // folds the ReLU into the max
        for (std::size_t a = 0; a < pool.kernel_h; ++a) {
          for (std::size_t b = 0; b < pool.kernel_w; ++b) {
            best = std::max(best, y.at(c, oh * pool.stride_h + a, ow * pool.stride_w + b));
          }
        }
        z.at(c, oh, ow) = best;
      }
    }
  }
  return z;
}

// Flat indices of the pooled outputs whose windows contain input feature `index`.
inline std::vector<std::size_t> pool_outputs_containing(const Shape& in, const PoolParams& pool,
                                                        std::size_t index) {
  const Shape out = pooled_shape(in, pool);
  const std::size_t H = in[1], W = in[2];
  const std::size_t c = index / (H * W), h = (index / W) % H, w = index % W;
  std::vector<std::size_t> result;
  for (std::size_t oh = 0; oh < out[1]; ++oh) {
    if (h < oh * pool.stride_h || h >= oh * pool.stride_h + pool.kernel_h) continue;
    for (std::size_t ow = 0; ow < out[2]; ++ow) {
      if (w < ow * pool.stride_w || w >= ow * pool.stride_w + pool.kernel_w) continue;
      result.push_back((c * out[1] + oh) * out[2] + ow);
    }
  }
  return result;
}

inline Tensor add_tensors(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw StructuralError("Add branch mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

// Exact ties resolve to the lowest index.
inline std::size_t argmax_lowest(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

}  // namespace seek
