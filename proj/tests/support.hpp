#pragma once

// Test-only oracles: direct scalar loops that share no code with the
// kernels they check. Finite differences come from wcnn::gradcheck.

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "wcnn/autodiff.hpp"
#include "wcnn/gradcheck.hpp"
#include "wcnn/params.hpp"
#include "wcnn/random.hpp"
#include "wcnn/tensor.hpp"

namespace wcnn::testing {

// out[n,o,i,j] = b[o] + sum_{c,ki,kj} x[n,c,i*s-p+ki, j*s-p+kj] * w[o,c,ki,kj]
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor* b, int s, int p) {
  const Shape xs = x.shape(), ws = w.shape();
  const std::int64_t oh = (xs.h + 2 * p - ws.h) / s + 1;
  const std::int64_t ow = (xs.w + 2 * p - ws.w) / s + 1;
  Tensor out({xs.n, ws.n, oh, ow}, DType::f64);
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t o = 0; o < ws.n; ++o)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) {
          double acc = b ? b->flat(o) : 0.0;
          for (std::int64_t c = 0; c < xs.c; ++c)
            for (std::int64_t ki = 0; ki < ws.h; ++ki)
              for (std::int64_t kj = 0; kj < ws.w; ++kj) {
                const std::int64_t y = i * s - p + ki, z = j * s - p + kj;
                if (y < 0 || z < 0 || y >= xs.h || z >= xs.w) continue;
                acc += x.at(n, c, y, z) * w.at(o, c, ki, kj);
              }
          out.set(n, o, i, j, acc);
        }
  return out;
}

// Scalar bilinear with half-pixel centers: src = max(0, (dst + 0.5) * in / out - 0.5).
inline Tensor naive_bilinear(const Tensor& x, std::int64_t oh, std::int64_t ow) {
  const Shape xs = x.shape();
  Tensor out({xs.n, xs.c, oh, ow}, DType::f64);
  auto coord = [](std::int64_t o, std::int64_t in, std::int64_t out_size) {
    double src = (o + 0.5) * static_cast<double>(in) / static_cast<double>(out_size) - 0.5;
    return src < 0 ? 0.0 : src;
  };
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t c = 0; c < xs.c; ++c)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) {
          const double sy = coord(i, xs.h, oh), sx = coord(j, xs.w, ow);
          const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(sy), xs.h - 1);
          const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(sx), xs.w - 1);
          const std::int64_t y1 = std::min(y0 + 1, xs.h - 1), x1 = std::min(x0 + 1, xs.w - 1);
          const double fy = sy - y0, fx = sx - x0;
          const double v = (1 - fy) * ((1 - fx) * x.at(n, c, y0, x0) + fx * x.at(n, c, y0, x1)) +
                           fy * ((1 - fx) * x.at(n, c, y1, x0) + fx * x.at(n, c, y1, x1));
          out.set(n, c, i, j, v);
        }
  return out;
}

using gradcheck::check_gradient;
using gradcheck::GradCheck;
using gradcheck::layer_gradient_check;
using gradcheck::LossBuilder;
using gradcheck::numeric_gradient;
using gradcheck::relative_error;
using gradcheck::smooth_instances_error;

inline double gradient_error(const LossBuilder& f, const std::vector<Tensor>& inputs, double step = 1e-5) {
  return check_gradient(f, inputs, step).error;
}

/// Values bounded away from zero so ReLU/max kinks are not straddled by a
/// finite-difference step.
inline Tensor kink_free(Rng& rng, Shape s) {
  Tensor t(s, DType::f64);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double u = rng.uniform(0.05, 1.0);
    t.set_flat(i, rng.uniform() < 0.5 ? -u : u);
  }
  return t;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("wcnn_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

}  // namespace wcnn::testing
