#pragma once

// Minimal layer set with hand-written backward passes. Every layer caches
// what its backward needs from the most recent forward call, so one forward
// must be followed by at most one backward.

#include <Eigen/Core>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "tada/tensor.hpp"

namespace tada::nn {

/// Freeze-boundary tag carried by every learnable tensor.
enum class Partition { trunk, head, discriminator };

inline const char* to_string(Partition p) {
  switch (p) {
    case Partition::trunk: return "trunk";
    case Partition::head: return "head";
    case Partition::discriminator: return "discriminator";
  }
  return "?";
}

template <class T>
struct Param {
  std::string name;
  Partition part = Partition::trunk;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Partition p, Shape4 s) : name(std::move(n)), part(p), value(s), grad(s) {}
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

/// Square-kernel convolution, zero padding k/2, stride 1 or 2.
/// Output size is ceil(in / stride) so odd sizes are handled.
template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, Partition part)
      : in_ch_(in_ch), out_ch_(out_ch), k_(kernel), stride_(stride), pad_(kernel / 2),
        weight_(name + ".weight", part, {out_ch, in_ch, kernel, kernel}),
        bias_(name + ".bias", part, {out_ch, 1, 1, 1}) {}

  /// He-normal weights, zero bias.
  void init(std::mt19937_64& rng, double gain = 2.0) {
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / (in_ch_ * k_ * k_)));
    for (auto& v : weight_.value.vec()) v = static_cast<T>(dist(rng));
    bias_.value.zero();
  }

  [[nodiscard]] int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  Tensor<T> forward(const Tensor<T>& x) {
    const Shape4 s = x.shape();
    if (s.c != in_ch_) {
      throw ShapeError(weight_.name + ": expected " + std::to_string(in_ch_) + " channels, got " +
                       s.str());
    }
    in_shape_ = s;
    ho_ = out_size(s.h);
    wo_ = out_size(s.w);
    const int kk = in_ch_ * k_ * k_;
    const int p = ho_ * wo_;
    cols_.assign(static_cast<std::size_t>(s.n) * kk * p, T{});
    Tensor<T> y({s.n, out_ch_, ho_, wo_});
    CMapMat<T> w(weight_.value.data(), out_ch_, kk);
    for (int n = 0; n < s.n; ++n) {
      T* col = cols_.data() + static_cast<std::size_t>(n) * kk * p;
      im2col(x.sample(n), s.h, s.w, col);
      MapMat<T> out(y.sample(n), out_ch_, p);
      out.noalias() = w * CMapMat<T>(col, kk, p);
      for (int o = 0; o < out_ch_; ++o) out.row(o).array() += bias_.value[o];
    }
    return y;
  }

  /// Accumulates parameter gradients; returns dL/dx unless `need_dx` is false.
  Tensor<T> backward(const Tensor<T>& dy, bool need_dx = true) {
    const int kk = in_ch_ * k_ * k_;
    const int p = ho_ * wo_;
    MapMat<T> dw(weight_.grad.data(), out_ch_, kk);
    CMapMat<T> w(weight_.value.data(), out_ch_, kk);
    Tensor<T> dx;
    if (need_dx) dx = Tensor<T>(in_shape_);
    RowMat<T> dcol(kk, p);
    for (int n = 0; n < in_shape_.n; ++n) {
      CMapMat<T> g(dy.sample(n), out_ch_, p);
      const T* col = cols_.data() + static_cast<std::size_t>(n) * kk * p;
      dw.noalias() += g * CMapMat<T>(col, kk, p).transpose();
      for (int o = 0; o < out_ch_; ++o) bias_.grad[o] += g.row(o).sum();
      if (need_dx) {
        dcol.noalias() = w.transpose() * g;
        col2im(dcol.data(), in_shape_.h, in_shape_.w, dx.sample(n));
      }
    }
    return dx;
  }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  void im2col(const T* x, int h, int w, T* col) const {
    const int p = ho_ * wo_;
    for (int c = 0; c < in_ch_; ++c) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          T* row = col + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * p;
          for (int oy = 0; oy < ho_; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            T* dst = row + oy * wo_;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + wo_, T{});
              continue;
            }
            const T* src = x + (static_cast<std::size_t>(c) * h + iy) * w;
            for (int ox = 0; ox < wo_; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T{};
            }
          }
        }
      }
    }
  }

  void col2im(const T* col, int h, int w, T* dx) const {
    const int p = ho_ * wo_;
    for (int c = 0; c < in_ch_; ++c) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const T* row = col + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * p;
          for (int oy = 0; oy < ho_; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) continue;
            T* dst = dx + (static_cast<std::size_t>(c) * h + iy) * w;
            const T* src = row + oy * wo_;
            for (int ox = 0; ox < wo_; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < w) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }

  int in_ch_ = 0, out_ch_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Param<T> weight_, bias_;
  Shape4 in_shape_{};
  int ho_ = 0, wo_ = 0;
  AlignedVector<T> cols_;
};

/// Leaky rectifier; slope 0 gives a plain ReLU.
template <class T>
class LeakyRelu {
 public:
  LeakyRelu() = default;
  explicit LeakyRelu(T slope) : slope_(slope) {}

  Tensor<T> forward(Tensor<T> x) {
    positive_.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      positive_[i] = x[i] > T{0};
      if (!positive_[i]) x[i] *= slope_;
    }
    return x;
  }
  Tensor<T> backward(Tensor<T> dy) const {
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (!positive_[i]) dy[i] *= slope_;
    }
    return dy;
  }

 private:
  T slope_{0};
  std::vector<bool> positive_;
};

/// Nearest-neighbour 2x upsampling cropped to an explicit target size.
template <class T>
Tensor<T> upsample2x(const Tensor<T>& x, int out_h, int out_w) {
  const Shape4 s = x.shape();
  Tensor<T> y({s.n, s.c, out_h, out_w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < out_h; ++i)
        for (int j = 0; j < out_w; ++j)
          y(n, c, i, j) = x(n, c, std::min(i / 2, s.h - 1), std::min(j / 2, s.w - 1));
  return y;
}

template <class T>
Tensor<T> upsample2x_backward(const Tensor<T>& dy, Shape4 in_shape) {
  Tensor<T> dx(in_shape);
  const Shape4 s = dy.shape();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j)
          dx(n, c, std::min(i / 2, in_shape.h - 1), std::min(j / 2, in_shape.w - 1)) +=
              dy(n, c, i, j);
  return dx;
}

/// Fully connected layer over [N, in, 1, 1] tensors.
template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, Partition part)
      : in_(in), out_(out), weight_(name + ".weight", part, {out, in, 1, 1}),
        bias_(name + ".bias", part, {out, 1, 1, 1}) {}

  void init(std::mt19937_64& rng, double gain = 2.0) {
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / in_));
    for (auto& v : weight_.value.vec()) v = static_cast<T>(dist(rng));
    bias_.value.zero();
  }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.shape().c * x.shape().h * x.shape().w != in_) {
      throw ShapeError(weight_.name + ": bad input " + x.shape().str());
    }
    input_ = x;
    Tensor<T> y({x.shape().n, out_, 1, 1});
    CMapMat<T> w(weight_.value.data(), out_, in_);
    CMapMat<T> xi(x.data(), x.shape().n, in_);
    MapMat<T> yo(y.data(), x.shape().n, out_);
    yo.noalias() = xi * w.transpose();
    for (int n = 0; n < x.shape().n; ++n)
      for (int o = 0; o < out_; ++o) yo(n, o) += bias_.value[o];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int n = input_.shape().n;
    CMapMat<T> g(dy.data(), n, out_);
    CMapMat<T> xi(input_.data(), n, in_);
    MapMat<T> dw(weight_.grad.data(), out_, in_);
    dw.noalias() += g.transpose() * xi;
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out_; ++o) bias_.grad[o] += g(i, o);
    Tensor<T> dx(input_.shape());
    MapMat<T> dxi(dx.data(), n, in_);
    dxi.noalias() = g * CMapMat<T>(weight_.value.data(), out_, in_);
    return dx;
  }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  int in_ = 0, out_ = 0;
  Param<T> weight_, bias_;
  Tensor<T> input_;
};

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape4 s = x.shape();
  Tensor<T> y({s.n, s.c, 1, 1});
  const T inv = T{1} / static_cast<T>(s.plane());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      T acc{};
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j) acc += x(n, c, i, j);
      y(n, c, 0, 0) = acc * inv;
    }
  return y;
}

template <class T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, Shape4 in_shape) {
  Tensor<T> dx(in_shape);
  const T inv = T{1} / static_cast<T>(in_shape.plane());
  for (int n = 0; n < in_shape.n; ++n)
    for (int c = 0; c < in_shape.c; ++c) {
      const T g = dy(n, c, 0, 0) * inv;
      for (int i = 0; i < in_shape.h; ++i)
        for (int j = 0; j < in_shape.w; ++j) dx(n, c, i, j) = g;
    }
  return dx;
}

/// Guard below which a raw normal is replaced by +z.
inline constexpr double kNormalEps = 1e-8;

/// Per-pixel unit normalisation of a 3-channel map.
template <class T>
Tensor<T> normalize_channels(const Tensor<T>& raw) {
  const Shape4 s = raw.shape();
  Tensor<T> y(s);
  for (int n = 0; n < s.n; ++n)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        const T x = raw(n, 0, i, j), yy = raw(n, 1, i, j), z = raw(n, 2, i, j);
        const T len = std::sqrt(x * x + yy * yy + z * z);
        if (len < static_cast<T>(kNormalEps)) {
          y(n, 0, i, j) = T{0};
          y(n, 1, i, j) = T{0};
          y(n, 2, i, j) = T{1};
        } else {
          y(n, 0, i, j) = x / len;
          y(n, 1, i, j) = yy / len;
          y(n, 2, i, j) = z / len;
        }
      }
  return y;
}

/// d/draw of normalize(raw): (g - (g.n) n) / |raw|. Guarded pixels get zero.
template <class T>
Tensor<T> normalize_channels_backward(const Tensor<T>& raw, const Tensor<T>& dy) {
  const Shape4 s = raw.shape();
  Tensor<T> dx(s);
  for (int n = 0; n < s.n; ++n)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        const T r[3] = {raw(n, 0, i, j), raw(n, 1, i, j), raw(n, 2, i, j)};
        const T len = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
        if (len < static_cast<T>(kNormalEps)) continue;
        T dot{};
        for (int c = 0; c < 3; ++c) dot += dy(n, c, i, j) * r[c] / len;
        for (int c = 0; c < 3; ++c) dx(n, c, i, j) = (dy(n, c, i, j) - dot * r[c] / len) / len;
      }
  return dx;
}

/// Per-sample RMS scaling: y = x / sqrt(mean(x^2) + eps) over each sample's C*H*W values.
template <class T>
Tensor<T> rms_normalize(const Tensor<T>& x, std::vector<double>& rms, double eps = 1e-12) {
  const Shape4 s = x.shape();
  const std::size_t per = x.size() / static_cast<std::size_t>(s.n);
  Tensor<T> y(s);
  rms.assign(static_cast<std::size_t>(s.n), 0.0);
  for (int n = 0; n < s.n; ++n) {
    const T* xp = x.data() + n * per;
    double m = 0.0;
    for (std::size_t i = 0; i < per; ++i) m += static_cast<double>(xp[i]) * xp[i];
    const double r = std::sqrt(m / static_cast<double>(per) + eps);
    rms[n] = r;
    T* yp = y.data() + n * per;
    for (std::size_t i = 0; i < per; ++i) yp[i] = static_cast<T>(xp[i] / r);
  }
  return y;
}

/// dx = (g - y * mean(g . y)) / rms, per sample.
template <class T>
Tensor<T> rms_normalize_backward(const Tensor<T>& y, const std::vector<double>& rms, const Tensor<T>& dy) {
  const Shape4 s = y.shape();
  const std::size_t per = y.size() / static_cast<std::size_t>(s.n);
  Tensor<T> dx(s);
  for (int n = 0; n < s.n; ++n) {
    const T* yp = y.data() + n * per;
    const T* gp = dy.data() + n * per;
    double dot = 0.0;
    for (std::size_t i = 0; i < per; ++i) dot += static_cast<double>(gp[i]) * yp[i];
    dot /= static_cast<double>(per);
    T* dp = dx.data() + n * per;
    for (std::size_t i = 0; i < per; ++i) dp[i] = static_cast<T>((gp[i] - yp[i] * dot) / rms[n]);
  }
  return dx;
}

}  // namespace tada::nn
