#include "hydra/ops.hpp"

// Small products would otherwise take Eigen's coefficient-wise path, whose
// reductions peel by buffer address and so vary between runs.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>

#include "hydra/errors.hpp"

namespace hydra {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require_rank(const Shape& dims, std::size_t rank, const char* what) {
  if (dims.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(dims));
  }
}

// True when from_op will keep a backward record for these inputs.
template <typename T>
bool records_graph(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!GradMode::enabled()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

struct ConvGeom {
  std::size_t n, c, h, w, k, kh, kw, stride, pad, oh, ow;
  std::size_t plane() const { return oh * ow; }
  std::size_t patch() const { return c * kh * kw; }
};

// Per-sample patch matrix [C*kh*kw, oh*ow] for sample data x (C,H,W).
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t plane = g.plane();
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* src = x + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = cols + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          T* drow = dst + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(drow, drow + g.ow, T(0));
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            drow[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : srow[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const std::size_t plane = g.plane();
  for (std::size_t c = 0; c < g.c; ++c) {
    T* dst = dx + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* src = cols + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* drow = dst + static_cast<std::size_t>(iy) * g.w;
          const T* srow = src + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// One GEMM per sample, so a sample's output never depends on what else is in
// the batch.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding) {
  require_rank(input.dims(), 4, "conv2d input");
  require_rank(weight.dims(), 4, "conv2d weight");
  if (stride == 0) throw ParameterError("conv2d: stride must be positive");
  const auto& xd = input.dims();
  const auto& wd = weight.dims();
  if (wd[1] != xd[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(xd[1]) + " channels, weight expects " +
                     std::to_string(wd[1]));
  }
  if (bias.numel() != wd[0]) throw ShapeError("conv2d: bias length must equal output channels");
  if (xd[2] + 2 * padding < wd[2] || xd[3] + 2 * padding < wd[3]) {
    throw ShapeError("conv2d: kernel larger than padded input " + shape_str(xd));
  }
  ConvGeom g{xd[0], xd[1], xd[2], xd[3], wd[0], wd[2], wd[3], stride, padding, 0, 0};
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  const std::size_t plane = g.plane(), patch = g.patch();
  const bool pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;

  // Pointwise convolutions read the input directly; others keep their patch
  // matrices for the backward pass.
  const bool keep = records_graph<T>({&input, &weight, &bias});
  auto cols = std::make_shared<std::vector<T>>(pointwise ? 0 : (keep ? g.n : 1) * patch * plane);
  ConstMapMat<T> wmat(weight.data().data(), g.k, patch);
  std::vector<T> y(g.n * g.k * plane);
  auto b = bias.data();
  for (std::size_t n = 0; n < g.n; ++n) {
    const T* sample = input.data().data() + n * g.c * g.h * g.w;
    const T* cn = sample;
    if (!pointwise) {
      T* dst = cols->data() + (keep ? n : 0) * patch * plane;
      im2col(sample, g, dst);
      cn = dst;
    }
    MapMat<T> out(y.data() + n * g.k * plane, g.k, plane);
    out.noalias() = wmat * ConstMapMat<T>(cn, patch, plane);
    for (std::size_t k = 0; k < g.k; ++k) out.row(k).array() += b[k];
  }

  return BasicTensor<T>::from_op(
      {g.n, g.k, g.oh, g.ow}, std::move(y), {input, weight, bias},
      [g, cols, pointwise](TensorNode<T>& self) {
        const std::size_t plane = g.plane(), patch = g.patch();
        auto& x = *self.parents[0];
        auto& w = *self.parents[1];
        auto& bn = *self.parents[2];
        ConstMapMat<T> wmat(w.data.data(), g.k, patch);
        RowMat<T> dcols;
        for (std::size_t n = 0; n < g.n; ++n) {
          ConstMapMat<T> dout(self.grad.data() + n * g.k * plane, g.k, plane);
          const T* cn = pointwise ? x.data.data() + n * g.c * g.h * g.w : cols->data() + n * patch * plane;
          if (w.requires_grad) {
            MapMat<T>(w.grad_buffer().data(), g.k, patch).noalias() +=
                dout * ConstMapMat<T>(cn, patch, plane).transpose();
          }
          if (bn.requires_grad) {
            auto& gb = bn.grad_buffer();
            const T* d = self.grad.data() + n * g.k * plane;
            for (std::size_t k = 0; k < g.k; ++k) {
              T acc = 0;
              for (std::size_t p = 0; p < plane; ++p) acc += d[k * plane + p];
              gb[k] += acc;
            }
          }
          if (x.requires_grad) {
            T* dx = x.grad_buffer().data() + n * g.c * g.h * g.w;
            if (pointwise) {
              MapMat<T>(dx, patch, plane).noalias() += wmat.transpose() * dout;
            } else {
              dcols.noalias() = wmat.transpose() * dout;
              col2im_add(dcols.data(), g, dx);
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, BatchNormStats<T>* stats, BnMode mode,
                         double epsilon, double momentum) {
  if (!(epsilon > 0)) throw ParameterError("batchnorm: epsilon must be positive");
  require_rank(input.dims(), 4, "batchnorm input");
  const auto& d = input.dims();
  const std::size_t n = d[0], c = d[1], plane = d[2] * d[3];
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("batchnorm: gamma/beta must have " + std::to_string(c) + " entries");
  }
  if (mode == BnMode::kEval && stats == nullptr) {
    throw ParameterError("batchnorm: eval mode needs running statistics");
  }
  if (stats && (stats->mean.numel() != c || stats->var.numel() != c)) {
    throw ShapeError("batchnorm: running statistics have wrong length");
  }
  const std::size_t m = n * plane;
  auto x = input.data();
  auto gm = gamma.data();
  auto bt = beta.data();

  std::vector<T> mean(c), inv_std(c);
  if (mode == BnMode::kTrain) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data() + (i * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) s += p[q];
      }
      const double mu = s / static_cast<double>(m);
      double v = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data() + (i * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) v += (p[q] - mu) * (p[q] - mu);
      }
      v /= static_cast<double>(m);
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(v + epsilon));
      if (stats) {
        auto rm = stats->mean.mutable_data();
        auto rv = stats->var.mutable_data();
        rm[ch] = static_cast<T>(momentum * rm[ch] + (1.0 - momentum) * mu);
        rv[ch] = static_cast<T>(momentum * rv[ch] + (1.0 - momentum) * v);
      }
    }
  } else {
    auto rm = stats->mean.data();
    auto rv = stats->var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = rm[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[ch]) + epsilon));
    }
  }

  auto xhat = std::make_shared<std::vector<T>>(x.size());
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * plane;
      for (std::size_t q = 0; q < plane; ++q) {
        const T h = (x[off + q] - mean[ch]) * inv_std[ch];
        (*xhat)[off + q] = h;
        y[off + q] = gm[ch] * h + bt[ch];
      }
    }
  }

  return BasicTensor<T>::from_op(
      d, std::move(y), {input, gamma, beta},
      [n, c, plane, m, mode, xhat, inv_std](TensorNode<T>& self) {
        auto& xn = *self.parents[0];
        auto& gn = *self.parents[1];
        auto& bn = *self.parents[2];
        const auto& dy = self.grad;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * plane;
            for (std::size_t q = 0; q < plane; ++q) {
              sum_dy += dy[off + q];
              sum_dy_xhat += dy[off + q] * (*xhat)[off + q];
            }
          }
          if (gn.requires_grad) gn.grad_buffer()[ch] += static_cast<T>(sum_dy_xhat);
          if (bn.requires_grad) bn.grad_buffer()[ch] += static_cast<T>(sum_dy);
          if (!xn.requires_grad) continue;
          auto& dx = xn.grad_buffer();
          const T g = gn.data[ch];
          if (mode == BnMode::kEval) {
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t off = (i * c + ch) * plane;
              for (std::size_t q = 0; q < plane; ++q) dx[off + q] += dy[off + q] * g * inv_std[ch];
            }
          } else {
            const double mean_dy = sum_dy / static_cast<double>(m);
            const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(m);
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t off = (i * c + ch) * plane;
              for (std::size_t q = 0; q < plane; ++q) {
                const double v = dy[off + q] - mean_dy - (*xhat)[off + q] * mean_dy_xhat;
                dx[off + q] += static_cast<T>(g * inv_std[ch] * v);
              }
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  auto x = input.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return BasicTensor<T>::from_op(input.dims(), std::move(y), {input}, [](TensorNode<T>& self) {
    auto& xn = *self.parents[0];
    auto& dx = xn.grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (xn.data[i] > T(0)) dx[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul_broadcast(const BasicTensor<T>& attn, const BasicTensor<T>& feat) {
  require_rank(attn.dims(), 4, "mul_broadcast attn");
  require_rank(feat.dims(), 4, "mul_broadcast feat");
  const auto& ad = attn.dims();
  const auto& fd = feat.dims();
  if (ad[1] != 1) throw ShapeError("mul_broadcast: attention must have one channel");
  if (ad[0] != fd[0] || ad[2] != fd[2] || ad[3] != fd[3]) {
    throw ShapeError("mul_broadcast: attention " + shape_str(ad) + " vs feature " + shape_str(fd));
  }
  const std::size_t n = fd[0], c = fd[1], plane = fd[2] * fd[3];
  auto a = attn.data();
  auto f = feat.data();
  std::vector<T> y(f.size());
  for (std::size_t i = 0; i < n; ++i) {
    const T* ap = a.data() + i * plane;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * plane;
      for (std::size_t q = 0; q < plane; ++q) y[off + q] = ap[q] * f[off + q];
    }
  }
  return BasicTensor<T>::from_op(fd, std::move(y), {attn, feat}, [n, c, plane](TensorNode<T>& self) {
    auto& an = *self.parents[0];
    auto& fn = *self.parents[1];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t off = (i * c + ch) * plane;
        if (an.requires_grad) {
          auto& da = an.grad_buffer();
          for (std::size_t q = 0; q < plane; ++q) da[i * plane + q] += self.grad[off + q] * fn.data[off + q];
        }
        if (fn.requires_grad) {
          auto& df = fn.grad_buffer();
          for (std::size_t q = 0; q < plane; ++q) df[off + q] += self.grad[off + q] * an.data[i * plane + q];
        }
      }
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("mul: " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  }
  auto x = a.data();
  auto z = b.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * z[i];
  return BasicTensor<T>::from_op(a.dims(), std::move(y), {a, b}, [](TensorNode<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    // Separate buffers even when a and b alias, so x*x gets 2x.
    if (an.requires_grad) {
      std::vector<T> contrib(self.grad.size());
      for (std::size_t i = 0; i < contrib.size(); ++i) contrib[i] = self.grad[i] * bn.data[i];
      auto& da = an.grad_buffer();
      for (std::size_t i = 0; i < contrib.size(); ++i) da[i] += contrib[i];
    }
    if (bn.requires_grad) {
      std::vector<T> contrib(self.grad.size());
      for (std::size_t i = 0; i < contrib.size(); ++i) contrib[i] = self.grad[i] * an.data[i];
      auto& db = bn.grad_buffer();
      for (std::size_t i = 0; i < contrib.size(); ++i) db[i] += contrib[i];
    }
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input) {
  double s = 0;
  for (T v : input.data()) s += v;
  return BasicTensor<T>::from_op({1}, {static_cast<T>(s)}, {input}, [](TensorNode<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (auto& v : dx) v += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& d0 = parts.front().dims();
  if (d0.size() < 2) throw ShapeError("concat_channels: inputs need a channel axis");
  std::size_t total = 0;
  std::vector<std::size_t> channels;
  for (const auto& p : parts) {
    const auto& d = p.dims();
    bool ok = d.size() == d0.size() && d[0] == d0[0];
    for (std::size_t a = 2; ok && a < d.size(); ++a) ok = d[a] == d0[a];
    if (!ok) throw ShapeError("concat_channels: " + shape_str(d) + " vs " + shape_str(d0));
    channels.push_back(d[1]);
    total += d[1];
  }
  std::size_t plane = 1;
  for (std::size_t a = 2; a < d0.size(); ++a) plane *= d0[a];
  const std::size_t n = d0[0];
  std::vector<T> y(n * total * plane);
  std::size_t offset = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    auto src = parts[j].data();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(src.data() + i * channels[j] * plane, channels[j] * plane,
                  y.data() + (i * total + offset) * plane);
    }
    offset += channels[j];
  }
  Shape out = d0;
  out[1] = total;
  return BasicTensor<T>::from_op(out, std::move(y), parts,
                                 [n, total, plane, channels](TensorNode<T>& self) {
                                   std::size_t off = 0;
                                   for (std::size_t j = 0; j < channels.size(); ++j) {
                                     auto& pn = *self.parents[j];
                                     if (pn.requires_grad) {
                                       auto& dp = pn.grad_buffer();
                                       for (std::size_t i = 0; i < n; ++i) {
                                         const T* src = self.grad.data() + (i * total + off) * plane;
                                         T* dst = dp.data() + i * channels[j] * plane;
                                         for (std::size_t q = 0; q < channels[j] * plane; ++q) dst[q] += src[q];
                                       }
                                     }
                                     off += channels[j];
                                   }
                                 });
}

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, std::size_t begin, std::size_t count) {
  const auto& d = input.dims();
  if (d.size() < 2) throw ShapeError("slice_channels: input needs a channel axis");
  if (count == 0 || begin + count > d[1]) {
    throw IndexError("slice_channels: [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + std::to_string(d[1]) +
                     " channels");
  }
  std::size_t plane = 1;
  for (std::size_t a = 2; a < d.size(); ++a) plane *= d[a];
  const std::size_t n = d[0], c = d[1];
  auto x = input.data();
  std::vector<T> y(n * count * plane);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.data() + (i * c + begin) * plane, count * plane, y.data() + i * count * plane);
  }
  Shape out = d;
  out[1] = count;
  return BasicTensor<T>::from_op(out, std::move(y), {input},
                                 [n, c, plane, begin, count](TensorNode<T>& self) {
                                   auto& dx = self.parents[0]->grad_buffer();
                                   for (std::size_t i = 0; i < n; ++i) {
                                     const T* src = self.grad.data() + i * count * plane;
                                     T* dst = dx.data() + (i * c + begin) * plane;
                                     for (std::size_t q = 0; q < count * plane; ++q) dst[q] += src[q];
                                   }
                                 });
}

template <typename T>
BasicTensor<T> concat_batch(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no inputs");
  const auto& d0 = parts.front().dims();
  std::size_t total = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    const auto& d = p.dims();
    if (d.size() != d0.size() || !std::equal(d.begin() + 1, d.end(), d0.begin() + 1)) {
      throw ShapeError("concat_batch: " + shape_str(d) + " vs " + shape_str(d0));
    }
    sizes.push_back(p.numel());
    total += d[0];
  }
  std::vector<T> y;
  y.reserve(total * (parts.front().numel() / d0[0]));
  for (const auto& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
  Shape out = d0;
  out[0] = total;
  return BasicTensor<T>::from_op(out, std::move(y), parts, [sizes](TensorNode<T>& self) {
    std::size_t off = 0;
    for (std::size_t j = 0; j < sizes.size(); ++j) {
      auto& pn = *self.parents[j];
      if (pn.requires_grad) {
        auto& dp = pn.grad_buffer();
        for (std::size_t q = 0; q < sizes[j]; ++q) dp[q] += self.grad[off + q];
      }
      off += sizes[j];
    }
  });
}

template <typename T>
BasicTensor<T> batch_to_channels(const BasicTensor<T>& input, std::size_t groups) {
  require_rank(input.dims(), 2, "batch_to_channels");
  const auto& d = input.dims();
  if (groups == 0 || d[0] % groups != 0) {
    throw ShapeError("batch_to_channels: batch " + std::to_string(d[0]) + " not divisible by " +
                     std::to_string(groups));
  }
  const std::size_t n = d[0] / groups, c = d[1];
  auto x = input.data();
  std::vector<T> y(x.size());
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(x.data() + (g * n + i) * c, c, y.data() + i * groups * c + g * c);
    }
  }
  return BasicTensor<T>::from_op({n, groups * c}, std::move(y), {input},
                                 [n, c, groups](TensorNode<T>& self) {
                                   auto& dx = self.parents[0]->grad_buffer();
                                   for (std::size_t g = 0; g < groups; ++g) {
                                     for (std::size_t i = 0; i < n; ++i) {
                                       const T* src = self.grad.data() + i * groups * c + g * c;
                                       T* dst = dx.data() + (g * n + i) * c;
                                       for (std::size_t q = 0; q < c; ++q) dst[q] += src[q];
                                     }
                                   }
                                 });
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  require_rank(input.dims(), 4, "global_avg_pool");
  const auto& d = input.dims();
  const std::size_t n = d[0], c = d[1], plane = d[2] * d[3];
  auto x = input.data();
  std::vector<T> y(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0;
    for (std::size_t q = 0; q < plane; ++q) s += x[i * plane + q];
    y[i] = static_cast<T>(s / static_cast<double>(plane));
  }
  return BasicTensor<T>::from_op({n, c}, std::move(y), {input}, [n, c, plane](TensorNode<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    const T scale = T(1) / static_cast<T>(plane);
    for (std::size_t i = 0; i < n * c; ++i) {
      const T g = self.grad[i] * scale;
      for (std::size_t q = 0; q < plane; ++q) dx[i * plane + q] += g;
    }
  });
}

template <typename T>
BasicTensor<T> fully_connected(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                               const BasicTensor<T>& bias) {
  require_rank(input.dims(), 2, "fully_connected input");
  require_rank(weight.dims(), 2, "fully_connected weight");
  const std::size_t n = input.dim(0), d = input.dim(1), e = weight.dim(1);
  if (weight.dim(0) != d) {
    throw ShapeError("fully_connected: input " + shape_str(input.dims()) + " vs weight " +
                     shape_str(weight.dims()));
  }
  if (bias.numel() != e) throw ShapeError("fully_connected: bias length must be " + std::to_string(e));
  // Row by row in a fixed summation order, so a sample's output depends
  // neither on the batch size nor on buffer addresses.
  auto x = input.data();
  auto w = weight.data();
  auto b = bias.data();
  std::vector<T> out(n * e);
  for (std::size_t i = 0; i < n; ++i) {
    T* y = out.data() + i * e;
    std::copy(b.begin(), b.end(), y);
    for (std::size_t k = 0; k < d; ++k) {
      const T xv = x[i * d + k];
      const T* wr = w.data() + k * e;
      for (std::size_t j = 0; j < e; ++j) y[j] += xv * wr[j];
    }
  }
  return BasicTensor<T>::from_op({n, e}, std::move(out), {input, weight, bias},
                                 [n, d, e](TensorNode<T>& self) {
                                   auto& xn = *self.parents[0];
                                   auto& wn = *self.parents[1];
                                   auto& bn = *self.parents[2];
                                   ConstMapMat<T> dy(self.grad.data(), n, e);
                                   if (xn.requires_grad) {
                                     MapMat<T>(xn.grad_buffer().data(), n, d).noalias() +=
                                         dy * ConstMapMat<T>(wn.data.data(), d, e).transpose();
                                   }
                                   if (wn.requires_grad) {
                                     MapMat<T>(wn.grad_buffer().data(), d, e).noalias() +=
                                         ConstMapMat<T>(xn.data.data(), n, d).transpose() * dy;
                                   }
                                   if (bn.requires_grad) {
                                     auto& db = bn.grad_buffer();
                                     for (std::size_t i = 0; i < n; ++i) {
                                       for (std::size_t j = 0; j < e; ++j) db[j] += self.grad[i * e + j];
                                     }
                                   }
                                 });
}

template <typename T>
BasicTensor<T> max_pool(const BasicTensor<T>& input, std::size_t k, std::size_t stride,
                        std::size_t padding) {
  require_rank(input.dims(), 4, "max_pool");
  if (k == 0 || stride == 0) throw ParameterError("max_pool: k and stride must be positive");
  if (padding >= k) throw ParameterError("max_pool: padding must be smaller than the window");
  const auto& d = input.dims();
  const std::size_t n = d[0], c = d[1], h = d[2], w = d[3];
  if (k > h + 2 * padding || k > w + 2 * padding) {
    throw ShapeError("max_pool: window " + std::to_string(k) + " larger than input " + shape_str(d));
  }
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (w + 2 * padding - k) / stride + 1;
  auto x = input.data();
  std::vector<T> y(n * c * oh * ow);
  const bool keep = records_graph<T>({&input});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(keep ? y.size() : 0);
  if (n * c * h * w > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("max_pool: input too large");
  // Clamped window bounds per output row/column; padded cells never win.
  auto window = [&](std::size_t o, std::size_t len) {
    const long lo = static_cast<long>(o * stride) - static_cast<long>(padding);
    const long hi = lo + static_cast<long>(k);
    return std::pair<std::size_t, std::size_t>{static_cast<std::size_t>(std::max(lo, 0L)),
                                               static_cast<std::size_t>(std::min(hi, static_cast<long>(len)))};
  };
  std::vector<std::pair<std::size_t, std::size_t>> wy(oh), wx(ow);
  for (std::size_t o = 0; o < oh; ++o) wy[o] = window(o, h);
  for (std::size_t o = 0; o < ow; ++o) wx[o] = window(o, w);
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const T* src = x.data() + nc * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto [y0, y1] = wy[oy];
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto [x0, x1] = wx[ox];
        const std::size_t o = (nc * oh + oy) * ow + ox;
        if (!keep) {
          T best = src[y0 * w + x0];
          for (std::size_t iy = y0; iy < y1; ++iy) {
            for (std::size_t ix = x0; ix < x1; ++ix) best = std::max(best, src[iy * w + ix]);
          }
          y[o] = best;
          continue;
        }
        std::size_t best_idx = y0 * w + x0;
        T best = src[best_idx];
        for (std::size_t iy = y0; iy < y1; ++iy) {
          for (std::size_t ix = x0; ix < x1; ++ix) {
            if (src[iy * w + ix] > best) {
              best = src[iy * w + ix];
              best_idx = iy * w + ix;
            }
          }
        }
        y[o] = best;
        (*argmax)[o] = static_cast<std::uint32_t>(nc * h * w + best_idx);
      }
    }
  }
  return BasicTensor<T>::from_op({n, c, oh, ow}, std::move(y), {input}, [argmax](TensorNode<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < argmax->size(); ++o) dx[(*argmax)[o]] += self.grad[o];
  });
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input.dims(), 4, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ParameterError("bilinear_resize: target size must be positive");
  const auto& d = input.dims();
  const std::size_t nc = d[0] * d[1], h = d[2], w = d[3];
  if (out_h == h && out_w == w) {
    // Exact identity, including the gradient.
    return BasicTensor<T>::from_op(d, std::vector<T>(input.data().begin(), input.data().end()),
                                   {input}, [](TensorNode<T>& self) {
                                     auto& dx = self.parents[0]->grad_buffer();
                                     for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i];
                                   });
  }
  const auto ty = resize_taps(h, out_h);
  const auto tx = resize_taps(w, out_w);
  auto x = input.data();
  std::vector<T> y(nc * out_h * out_w);
  for (std::size_t p = 0; p < nc; ++p) {
    const T* src = x.data() + p * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const double top = src[a.i0 * w + b.i0] * (1 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
        const double bot = src[a.i1 * w + b.i0] * (1 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
        y[(p * out_h + oy) * out_w + ox] = static_cast<T>(top * (1 - a.w1) + bot * a.w1);
      }
    }
  }
  return BasicTensor<T>::from_op(
      {d[0], d[1], out_h, out_w}, std::move(y), {input},
      [nc, h, w, out_h, out_w, ty, tx](TensorNode<T>& self) {
        auto& dx = self.parents[0]->grad_buffer();
        for (std::size_t p = 0; p < nc; ++p) {
          T* dst = dx.data() + p * h * w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const auto& b = tx[ox];
              const double g = self.grad[(p * out_h + oy) * out_w + ox];
              dst[a.i0 * w + b.i0] += static_cast<T>(g * (1 - a.w1) * (1 - b.w1));
              dst[a.i0 * w + b.i1] += static_cast<T>(g * (1 - a.w1) * b.w1);
              dst[a.i1 * w + b.i0] += static_cast<T>(g * a.w1 * (1 - b.w1));
              dst[a.i1 * w + b.i1] += static_cast<T>(g * a.w1 * b.w1);
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> weighted_bce_with_logits(const BasicTensor<T>& logits,
                                        std::span<const std::uint8_t> targets,
                                        std::span<const double> pos_weight,
                                        std::span<const double> neg_weight) {
  require_rank(logits.dims(), 2, "weighted_bce_with_logits");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  if (targets.size() != n * m) throw ShapeError("weighted_bce_with_logits: target count mismatch");
  if (pos_weight.size() != m || neg_weight.size() != m) {
    throw ShapeError("weighted_bce_with_logits: weight vectors must have " + std::to_string(m) + " entries");
  }
  auto z = logits.data();
  double total = 0;
  auto dz = std::make_shared<std::vector<T>>(n * m);
  const double inv = 1.0 / static_cast<double>(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t idx = i * m + j;
      const double x = z[idx];
      const double y = targets[idx] ? 1.0 : 0.0;
      const double w = targets[idx] ? pos_weight[j] : neg_weight[j];
      // log(1 + e^x) - y x, evaluated without overflow
      total += w * (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))));
      const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      (*dz)[idx] = static_cast<T>(w * (sig - y) * inv);
    }
  }
  return BasicTensor<T>::from_op({1}, {static_cast<T>(total * inv)}, {logits}, [dz](TensorNode<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[0] * (*dz)[i];
  });
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets) {
  require_rank(logits.dims(), 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (targets.size() != n) throw ShapeError("softmax_cross_entropy: target count mismatch");
  auto z = logits.data();
  double total = 0;
  auto dz = std::make_shared<std::vector<T>>(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw IndexError("softmax_cross_entropy: class " + std::to_string(t) + " outside [0," +
                       std::to_string(k) + ")");
    }
    const T* row = z.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double denom = 0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    total += lse - row[t];
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(row[j] - lse);
      (*dz)[i * k + j] = static_cast<T>((p - (static_cast<std::size_t>(t) == j ? 1.0 : 0.0)) /
                                        static_cast<double>(n));
    }
  }
  return BasicTensor<T>::from_op({1}, {static_cast<T>(total / static_cast<double>(n))}, {logits},
                                 [dz](TensorNode<T>& self) {
                                   auto& dx = self.parents[0]->grad_buffer();
                                   for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[0] * (*dz)[i];
                                 });
}

#define HYDRA_INSTANTIATE_OPS(T)                                                                   \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                     \
                                 const BasicTensor<T>&, std::size_t, std::size_t);                 \
  template BasicTensor<T> batchnorm(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                    const BasicTensor<T>&, BatchNormStats<T>*, BnMode, double,     \
                                    double);                                                       \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                             \
  template BasicTensor<T> mul_broadcast(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                              \
  template BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>&);                     \
  template BasicTensor<T> slice_channels(const BasicTensor<T>&, std::size_t, std::size_t);         \
  template BasicTensor<T> concat_batch(const std::vector<BasicTensor<T>>&);                        \
  template BasicTensor<T> batch_to_channels(const BasicTensor<T>&, std::size_t);                   \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                  \
  template BasicTensor<T> fully_connected(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                          const BasicTensor<T>&);                                  \
  template BasicTensor<T> max_pool(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t); \
  template BasicTensor<T> bilinear_resize(const BasicTensor<T>&, std::size_t, std::size_t);        \
  template BasicTensor<T> weighted_bce_with_logits(const BasicTensor<T>&,                          \
                                                   std::span<const std::uint8_t>,                  \
                                                   std::span<const double>,                        \
                                                   std::span<const double>);                       \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);

HYDRA_INSTANTIATE_OPS(float)
HYDRA_INSTANTIATE_OPS(double)

#undef HYDRA_INSTANTIATE_OPS

}  // namespace hydra
