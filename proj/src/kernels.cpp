#include "wcnn/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace wcnn::kernels {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct Geometry {
  std::int64_t channels, in_h, in_w, kh, kw, out_h, out_w;
  int stride, padding;

  std::int64_t rows() const { return channels * kh * kw; }
  std::int64_t cols() const { return out_h * out_w; }
  bool trivial() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

template <typename T>
void im2col(const T* x, const Geometry& g, T* cols) {
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const T* plane = x + c * g.in_h * g.in_w;
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        T* dst = cols + ((c * g.kh + ki) * g.kw + kj) * g.cols();
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ki;
          T* row = dst + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(row, row + g.out_w, T(0));
            continue;
          }
          const T* src = plane + iy * g.in_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kj;
            row[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Accumulates columns back into the image (adjoint of im2col).
template <typename T>
void col2im(const T* cols, const Geometry& g, T* x) {
  for (std::int64_t c = 0; c < g.channels; ++c) {
    T* plane = x + c * g.in_h * g.in_w;
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const T* src = cols + ((c * g.kh + ki) * g.kw + kj) * g.cols();
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= g.in_h) continue;
          T* dst = plane + iy * g.in_w;
          const T* row = src + oy * g.out_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kj;
            if (ix >= 0 && ix < g.in_w) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void add_bias(T* out, const T* bias, std::int64_t channels, std::int64_t plane) {
  for (std::int64_t c = 0; c < channels; ++c) {
    const T b = bias[c];
    T* p = out + c * plane;
    for (std::int64_t i = 0; i < plane; ++i) p[i] += b;
  }
}

template <typename T>
void accumulate_bias_grad(const T* grad, std::int64_t channels, std::int64_t plane, T* gb) {
  for (std::int64_t c = 0; c < channels; ++c) {
    const T* p = grad + c * plane;
    T acc = 0;
    for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
    gb[c] += acc;
  }
}

void check_bias(const Tensor* bias, std::int64_t channels, const Tensor& x, const char* op) {
  if (bias == nullptr) return;
  check_same_dtype(x, *bias, op);
  if (!(bias->shape() == Shape{1, channels, 1, 1}))
    throw ShapeError(std::string(op) + ": bias shape " + bias->shape().str() + " expected 1x" +
                     std::to_string(channels) + "x1x1");
}

// Geometry of the convolution whose input is `image` (c, h, w) and whose
// output spatial size is (out_h, out_w).
Geometry make_geometry(Shape image, Shape weight, std::int64_t channels, std::int64_t out_h,
                       std::int64_t out_w, int stride, int padding) {
  return Geometry{channels, image.h, image.w, weight.h, weight.w, out_h, out_w, stride, padding};
}

}  // namespace

Shape conv2d_output_shape(Shape x, Shape weight, int stride, int padding) {
  if (stride < 1) throw ConfigError("conv2d: stride must be positive");
  if (padding < 0) throw ConfigError("conv2d: padding must be non-negative");
  if (x.c != weight.c)
    throw ShapeError("conv2d: input " + x.str() + " has " + std::to_string(x.c) +
                     " channels but weight " + weight.str() + " expects " +
                     std::to_string(weight.c));
  const std::int64_t ph = x.h + 2 * padding;
  const std::int64_t pw = x.w + 2 * padding;
  if (ph < weight.h || pw < weight.w)
    throw ShapeError("conv2d: padded input " + x.str() + " smaller than kernel " + weight.str());
  return {x.n, weight.n, (ph - weight.h) / stride + 1, (pw - weight.w) / stride + 1};
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride, int padding) {
  check_same_dtype(x, weight, "conv2d");
  const Shape os = conv2d_output_shape(x.shape(), weight.shape(), stride, padding);
  check_bias(bias, os.c, x, "conv2d");
  Tensor out(os, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const Shape xs = x.shape();
    const Geometry g = make_geometry(xs, weight.shape(), xs.c, os.h, os.w, stride, padding);
    ConstMapMat<T> w(weight.data<T>().data(), os.c, g.rows());
    std::vector<T> cols(g.trivial() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
    for (std::int64_t n = 0; n < xs.n; ++n) {
      const T* xn = x.data<T>().data() + n * xs.c * xs.plane();
      const T* cp = xn;
      if (!g.trivial()) {
        im2col(xn, g, cols.data());
        cp = cols.data();
      }
      ConstMapMat<T> c(cp, g.rows(), g.cols());
      MapMat<T> o(out.data<T>().data() + n * os.c * os.plane(), os.c, g.cols());
      o.noalias() = w * c;
      if (bias) add_bias(o.data(), bias->data<T>().data(), os.c, os.plane());
    }
  });
  return out;
}

ConvGrads conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                          int stride, int padding, bool need_x, bool need_weight,
                          bool need_bias) {
  const Shape os = conv2d_output_shape(x.shape(), weight.shape(), stride, padding);
  if (!(grad_out.shape() == os))
    throw ShapeError("conv2d_backward: grad " + grad_out.shape().str() + " expected " + os.str());
  ConvGrads grads;
  if (need_x) grads.x = x.zeros_like();
  if (need_weight) grads.weight = weight.zeros_like();
  if (need_bias) grads.bias = Tensor({1, os.c, 1, 1}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const Shape xs = x.shape();
    const Geometry g = make_geometry(xs, weight.shape(), xs.c, os.h, os.w, stride, padding);
    ConstMapMat<T> w(weight.data<T>().data(), os.c, g.rows());
    std::vector<T> cols(g.trivial() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
    for (std::int64_t n = 0; n < xs.n; ++n) {
      const T* go = grad_out.data<T>().data() + n * os.c * os.plane();
      ConstMapMat<T> gmat(go, os.c, g.cols());
      if (need_bias) accumulate_bias_grad(go, os.c, os.plane(), grads.bias.template data<T>().data());
      if (need_weight) {
        const T* xn = x.data<T>().data() + n * xs.c * xs.plane();
        const T* cp = xn;
        if (!g.trivial()) {
          im2col(xn, g, cols.data());
          cp = cols.data();
        }
        ConstMapMat<T> c(cp, g.rows(), g.cols());
        MapMat<T> gw(grads.weight.template data<T>().data(), os.c, g.rows());
        gw.noalias() += gmat * c.transpose();
      }
      if (need_x) {
        T* gx = grads.x.template data<T>().data() + n * xs.c * xs.plane();
        if (g.trivial()) {
          MapMat<T> gxm(gx, g.rows(), g.cols());
          gxm.noalias() = w.transpose() * gmat;
        } else {
          MapMat<T> gc(cols.data(), g.rows(), g.cols());
          gc.noalias() = w.transpose() * gmat;
          col2im(cols.data(), g, gx);
        }
      }
    }
  });
  return grads;
}

Shape conv_transpose2d_output_shape(Shape x, Shape weight, int stride, int padding) {
  if (stride < 1) throw ConfigError("conv_transpose2d: stride must be positive");
  if (padding < 0) throw ConfigError("conv_transpose2d: padding must be non-negative");
  if (x.c != weight.n)
    throw ShapeError("conv_transpose2d: input " + x.str() + " has " + std::to_string(x.c) +
                     " channels but weight " + weight.str() + " expects " +
                     std::to_string(weight.n));
  const std::int64_t oh = (x.h - 1) * stride - 2 * padding + weight.h;
  const std::int64_t ow = (x.w - 1) * stride - 2 * padding + weight.w;
  if (oh < 1 || ow < 1)
    throw ShapeError("conv_transpose2d: empty output for input " + x.str() + " and weight " +
                     weight.str());
  return {x.n, weight.c, oh, ow};
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride,
                        int padding) {
  check_same_dtype(x, weight, "conv_transpose2d");
  const Shape os = conv_transpose2d_output_shape(x.shape(), weight.shape(), stride, padding);
  check_bias(bias, os.c, x, "conv_transpose2d");
  Tensor out(os, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const Shape xs = x.shape();
    // The equivalent forward conv maps an (out_c, oh, ow) image to (x.c, h, w).
    const Geometry g = make_geometry(os, weight.shape(), os.c, xs.h, xs.w, stride, padding);
    ConstMapMat<T> w(weight.data<T>().data(), xs.c, g.rows());
    std::vector<T> cols(static_cast<std::size_t>(g.rows() * g.cols()));
    for (std::int64_t n = 0; n < xs.n; ++n) {
      ConstMapMat<T> xn(x.data<T>().data() + n * xs.c * xs.plane(), xs.c, g.cols());
      T* on = out.data<T>().data() + n * os.c * os.plane();
      if (g.trivial()) {
        MapMat<T> o(on, g.rows(), g.cols());
        o.noalias() = w.transpose() * xn;
      } else {
        MapMat<T> c(cols.data(), g.rows(), g.cols());
        c.noalias() = w.transpose() * xn;
        col2im(cols.data(), g, on);
      }
      if (bias) add_bias(on, bias->data<T>().data(), os.c, os.plane());
    }
  });
  return out;
}

ConvGrads conv_transpose2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                                    int stride, int padding, bool need_x, bool need_weight,
                                    bool need_bias) {
  const Shape os = conv_transpose2d_output_shape(x.shape(), weight.shape(), stride, padding);
  if (!(grad_out.shape() == os))
    throw ShapeError("conv_transpose2d_backward: grad " + grad_out.shape().str() + " expected " +
                     os.str());
  ConvGrads grads;
  if (need_x) grads.x = x.zeros_like();
  if (need_weight) grads.weight = weight.zeros_like();
  if (need_bias) grads.bias = Tensor({1, os.c, 1, 1}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const Shape xs = x.shape();
    const Geometry g = make_geometry(os, weight.shape(), os.c, xs.h, xs.w, stride, padding);
    ConstMapMat<T> w(weight.data<T>().data(), xs.c, g.rows());
    std::vector<T> cols(g.trivial() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
    for (std::int64_t n = 0; n < xs.n; ++n) {
      const T* go = grad_out.data<T>().data() + n * os.c * os.plane();
      if (need_bias) accumulate_bias_grad(go, os.c, os.plane(), grads.bias.template data<T>().data());
      if (!need_x && !need_weight) continue;
      const T* cp = go;
      if (!g.trivial()) {
        im2col(go, g, cols.data());
        cp = cols.data();
      }
      ConstMapMat<T> c(cp, g.rows(), g.cols());
      if (need_x) {
        MapMat<T> gx(grads.x.template data<T>().data() + n * xs.c * xs.plane(), xs.c, g.cols());
        gx.noalias() = w * c;
      }
      if (need_weight) {
        ConstMapMat<T> xn(x.data<T>().data() + n * xs.c * xs.plane(), xs.c, g.cols());
        MapMat<T> gw(grads.weight.template data<T>().data(), xs.c, g.rows());
        gw.noalias() += xn * c.transpose();
      }
    }
  });
  return grads;
}

namespace {

struct Tap {
  std::int64_t i0, i1;
  double frac;
};

// Half-pixel-center source taps for each output coordinate.
std::vector<Tap> bilinear_taps(std::int64_t in, std::int64_t out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  if (out_h < 1 || out_w < 1) throw ConfigError("resize_bilinear: output dims must be >= 1");
  const Shape xs = x.shape();
  Tensor out({xs.n, xs.c, out_h, out_w}, x.dtype());
  const auto ty = bilinear_taps(xs.h, out_h);
  const auto tx = bilinear_taps(xs.w, out_w);
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* src = x.data<T>().data();
    T* dst = out.data<T>().data();
    for (std::int64_t p = 0; p < xs.n * xs.c; ++p) {
      const T* plane = src + p * xs.plane();
      T* oplane = dst + p * out_h * out_w;
      for (std::int64_t y = 0; y < out_h; ++y) {
        const Tap& a = ty[static_cast<std::size_t>(y)];
        const T wy1 = static_cast<T>(a.frac);
        const T wy0 = T(1) - wy1;
        const T* r0 = plane + a.i0 * xs.w;
        const T* r1 = plane + a.i1 * xs.w;
        for (std::int64_t xo = 0; xo < out_w; ++xo) {
          const Tap& b = tx[static_cast<std::size_t>(xo)];
          const T wx1 = static_cast<T>(b.frac);
          const T wx0 = T(1) - wx1;
          oplane[y * out_w + xo] = wy0 * (wx0 * r0[b.i0] + wx1 * r0[b.i1]) +
                                   wy1 * (wx0 * r1[b.i0] + wx1 * r1[b.i1]);
        }
      }
    }
  });
  return out;
}

Tensor resize_bilinear_backward(const Tensor& grad_out, Shape input_shape) {
  const Shape gs = grad_out.shape();
  Tensor gx(input_shape, grad_out.dtype());
  const auto ty = bilinear_taps(input_shape.h, gs.h);
  const auto tx = bilinear_taps(input_shape.w, gs.w);
  dispatch(grad_out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* g = grad_out.data<T>().data();
    T* d = gx.data<T>().data();
    for (std::int64_t p = 0; p < gs.n * gs.c; ++p) {
      const T* gplane = g + p * gs.plane();
      T* plane = d + p * input_shape.plane();
      for (std::int64_t y = 0; y < gs.h; ++y) {
        const Tap& a = ty[static_cast<std::size_t>(y)];
        const T wy1 = static_cast<T>(a.frac);
        const T wy0 = T(1) - wy1;
        T* r0 = plane + a.i0 * input_shape.w;
        T* r1 = plane + a.i1 * input_shape.w;
        for (std::int64_t xo = 0; xo < gs.w; ++xo) {
          const Tap& b = tx[static_cast<std::size_t>(xo)];
          const T wx1 = static_cast<T>(b.frac);
          const T wx0 = T(1) - wx1;
          const T v = gplane[y * gs.w + xo];
          r0[b.i0] += wy0 * wx0 * v;
          r0[b.i1] += wy0 * wx1 * v;
          r1[b.i0] += wy1 * wx0 * v;
          r1[b.i1] += wy1 * wx1 * v;
        }
      }
    }
  });
  return gx;
}

namespace {
void require_even(const Shape& s, const char* op) {
  if (s.h % 2 != 0 || s.w % 2 != 0)
    throw ShapeError(std::string(op) + ": spatial dims must be even, got " + s.str());
}
}  // namespace

MaxPoolResult max_pool2x2(const Tensor& x) {
  const Shape xs = x.shape();
  require_even(xs, "max_pool2x2");
  const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
  MaxPoolResult r{Tensor(os, x.dtype()), std::vector<std::int64_t>(static_cast<std::size_t>(os.numel()))};
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* src = x.data<T>().data();
    T* dst = r.out.template data<T>().data();
    std::int64_t o = 0;
    for (std::int64_t p = 0; p < xs.n * xs.c; ++p) {
      const std::int64_t base = p * xs.plane();
      for (std::int64_t i = 0; i < os.h; ++i) {
        for (std::int64_t j = 0; j < os.w; ++j, ++o) {
          std::int64_t best = base + 2 * i * xs.w + 2 * j;
          for (std::int64_t di = 0; di < 2; ++di)
            for (std::int64_t dj = 0; dj < 2; ++dj) {
              const std::int64_t idx = base + (2 * i + di) * xs.w + 2 * j + dj;
              if (src[idx] > src[best]) best = idx;
            }
          dst[o] = src[best];
          r.argmax[static_cast<std::size_t>(o)] = best;
        }
      }
    }
  });
  return r;
}

Tensor max_pool2x2_backward(const Tensor& grad_out, std::span<const std::int64_t> argmax,
                            Shape input_shape) {
  Tensor gx(input_shape, grad_out.dtype());
  dispatch(grad_out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* g = grad_out.data<T>().data();
    T* d = gx.data<T>().data();
    for (std::size_t o = 0; o < argmax.size(); ++o) d[argmax[o]] += g[o];
  });
  return gx;
}

Tensor avg_pool2x2(const Tensor& x) {
  const Shape xs = x.shape();
  require_even(xs, "avg_pool2x2");
  Tensor out({xs.n, xs.c, xs.h / 2, xs.w / 2}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* src = x.data<T>().data();
    T* dst = out.data<T>().data();
    const std::int64_t oh = xs.h / 2, ow = xs.w / 2;
    for (std::int64_t p = 0; p < xs.n * xs.c; ++p) {
      const T* s = src + p * xs.plane();
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) {
          const T* r0 = s + 2 * i * xs.w + 2 * j;
          const T* r1 = r0 + xs.w;
          *dst++ = (r0[0] + r0[1] + r1[0] + r1[1]) / T(4);
        }
    }
  });
  return out;
}

namespace {
void check_channel_vector(const Tensor& v, std::int64_t c, const char* what) {
  if (!(v.shape() == Shape{1, c, 1, 1}))
    throw ShapeError(std::string("batch_norm: ") + what + " shape " + v.shape().str() +
                     " expected 1x" + std::to_string(c) + "x1x1");
}
}  // namespace

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        BatchNormCache& cache, std::vector<double>& batch_mean,
                        std::vector<double>& batch_var_unbiased) {
  const Shape xs = x.shape();
  check_channel_vector(gamma, xs.c, "gamma");
  check_channel_vector(beta, xs.c, "beta");
  check_same_dtype(x, gamma, "batch_norm");
  const std::int64_t m = xs.n * xs.plane();
  Tensor out(xs, x.dtype());
  cache.xhat = Tensor(xs, x.dtype());
  cache.inv_std.assign(static_cast<std::size_t>(xs.c), 0.0);
  batch_mean.assign(static_cast<std::size_t>(xs.c), 0.0);
  batch_var_unbiased.assign(static_cast<std::size_t>(xs.c), 0.0);
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* src = x.data<T>().data();
    T* dst = out.data<T>().data();
    T* xh = cache.xhat.template data<T>().data();
    const T* gm = gamma.data<T>().data();
    const T* bt = beta.data<T>().data();
    for (std::int64_t c = 0; c < xs.c; ++c) {
      double sum = 0.0;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const T* p = src + (n * xs.c + c) * xs.plane();
        for (std::int64_t i = 0; i < xs.plane(); ++i) sum += p[i];
      }
      const double mean = sum / static_cast<double>(m);
      double sq = 0.0;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const T* p = src + (n * xs.c + c) * xs.plane();
        for (std::int64_t i = 0; i < xs.plane(); ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(m);
      const double inv_std = 1.0 / std::sqrt(var + eps);
      const auto ci = static_cast<std::size_t>(c);
      cache.inv_std[ci] = inv_std;
      batch_mean[ci] = mean;
      batch_var_unbiased[ci] = m > 1 ? sq / static_cast<double>(m - 1) : 0.0;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const std::int64_t off = (n * xs.c + c) * xs.plane();
        for (std::int64_t i = 0; i < xs.plane(); ++i) {
          const T v = static_cast<T>((src[off + i] - mean) * inv_std);
          xh[off + i] = v;
          dst[off + i] = gm[c] * v + bt[c];
        }
      }
    }
  });
  return out;
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const Tensor& running_mean, const Tensor& running_var, double eps) {
  const Shape xs = x.shape();
  check_channel_vector(gamma, xs.c, "gamma");
  check_channel_vector(beta, xs.c, "beta");
  check_channel_vector(running_mean, xs.c, "running_mean");
  check_channel_vector(running_var, xs.c, "running_var");
  Tensor out(xs, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* src = x.data<T>().data();
    T* dst = out.data<T>().data();
    for (std::int64_t c = 0; c < xs.c; ++c) {
      const double inv_std = 1.0 / std::sqrt(running_var.flat(c) + eps);
      const T scale = static_cast<T>(gamma.flat(c) * inv_std);
      const T shift = static_cast<T>(beta.flat(c) - gamma.flat(c) * running_mean.flat(c) * inv_std);
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const std::int64_t off = (n * xs.c + c) * xs.plane();
        for (std::int64_t i = 0; i < xs.plane(); ++i) dst[off + i] = scale * src[off + i] + shift;
      }
    }
  });
  return out;
}

BatchNormGrads batch_norm_backward(const Tensor& grad_out, const BatchNormCache& cache,
                                   const Tensor& gamma) {
  const Shape xs = grad_out.shape();
  BatchNormGrads g{Tensor(xs, grad_out.dtype()), gamma.zeros_like(), gamma.zeros_like()};
  const auto m = static_cast<double>(xs.n * xs.plane());
  dispatch(grad_out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* go = grad_out.data<T>().data();
    const T* xh = cache.xhat.template data<T>().data();
    T* gx = g.x.template data<T>().data();
    for (std::int64_t c = 0; c < xs.c; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const std::int64_t off = (n * xs.c + c) * xs.plane();
        for (std::int64_t i = 0; i < xs.plane(); ++i) {
          sum_g += go[off + i];
          sum_gx += static_cast<double>(go[off + i]) * xh[off + i];
        }
      }
      g.gamma.set_flat(c, sum_gx);
      g.beta.set_flat(c, sum_g);
      const double k = gamma.flat(c) * cache.inv_std[static_cast<std::size_t>(c)] / m;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const std::int64_t off = (n * xs.c + c) * xs.plane();
        for (std::int64_t i = 0; i < xs.plane(); ++i)
          gx[off + i] = static_cast<T>(k * (m * go[off + i] - sum_g - xh[off + i] * sum_gx));
      }
    }
  });
  return g;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto s = x.data<T>();
    auto d = out.data<T>();
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = s[i] > T(0) ? s[i] : T(0);
  });
  return out;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& x) {
  Tensor gx(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto s = x.data<T>();
    auto g = grad_out.data<T>();
    auto d = gx.data<T>();
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = s[i] > T(0) ? g[i] : T(0);
  });
  return gx;
}

Tensor softmax_channels(const Tensor& x) {
  const Shape xs = x.shape();
  Tensor out(xs, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* s = x.data<T>().data();
    T* d = out.data<T>().data();
    for (std::int64_t n = 0; n < xs.n; ++n) {
      const std::int64_t base = n * xs.c * xs.plane();
      for (std::int64_t i = 0; i < xs.plane(); ++i) {
        T mx = s[base + i];
        for (std::int64_t c = 1; c < xs.c; ++c) mx = std::max(mx, s[base + c * xs.plane() + i]);
        T sum = 0;
        for (std::int64_t c = 0; c < xs.c; ++c) {
          const std::int64_t k = base + c * xs.plane() + i;
          d[k] = std::exp(s[k] - mx);
          sum += d[k];
        }
        for (std::int64_t c = 0; c < xs.c; ++c) d[base + c * xs.plane() + i] /= sum;
      }
    }
  });
  return out;
}

Tensor softmax_channels_backward(const Tensor& grad_out, const Tensor& y) {
  const Shape ys = y.shape();
  Tensor gx(ys, y.dtype());
  dispatch(y.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* g = grad_out.data<T>().data();
    const T* p = y.data<T>().data();
    T* d = gx.data<T>().data();
    for (std::int64_t n = 0; n < ys.n; ++n) {
      const std::int64_t base = n * ys.c * ys.plane();
      for (std::int64_t i = 0; i < ys.plane(); ++i) {
        T inner = 0;
        for (std::int64_t c = 0; c < ys.c; ++c) {
          const std::int64_t k = base + c * ys.plane() + i;
          inner += g[k] * p[k];
        }
        for (std::int64_t c = 0; c < ys.c; ++c) {
          const std::int64_t k = base + c * ys.plane() + i;
          d[k] = p[k] * (g[k] - inner);
        }
      }
    }
  });
  return gx;
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  Shape s = parts[0].shape();
  std::int64_t channels = 0;
  for (const auto& p : parts) {
    check_same_dtype(parts[0], p, "concat_channels");
    const Shape ps = p.shape();
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w)
      throw ShapeError("concat_channels: " + ps.str() + " incompatible with " + s.str());
    channels += ps.c;
  }
  s.c = channels;
  Tensor out(s, parts[0].dtype());
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* d = out.data<T>().data();
    for (std::int64_t n = 0; n < s.n; ++n) {
      for (const auto& p : parts) {
        const std::int64_t len = p.shape().c * s.plane();
        const T* src = p.data<T>().data() + n * len;
        d = std::copy(src, src + len, d);
      }
    }
  });
  return out;
}

Tensor slice_channels(const Tensor& x, std::int64_t begin, std::int64_t count) {
  const Shape xs = x.shape();
  if (begin < 0 || count < 1 || begin + count > xs.c)
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + xs.str());
  Tensor out({xs.n, count, xs.h, xs.w}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* s = x.data<T>().data();
    T* d = out.data<T>().data();
    for (std::int64_t n = 0; n < xs.n; ++n) {
      const T* src = s + (n * xs.c + begin) * xs.plane();
      d = std::copy(src, src + count * xs.plane(), d);
    }
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  check_same_dtype(a, b, "add");
  Tensor out = a;
  out.add_(b);
  return out;
}

}  // namespace wcnn::kernels
