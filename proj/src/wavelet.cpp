#include "wcnn/wavelet.hpp"

#include <algorithm>
#include <cmath>

#include "wcnn/random.hpp"

namespace wcnn::wavelet {
namespace {

std::array<double, 2> as_taps(const std::vector<double>& v, const char* name) {
  if (v.size() != 2)
    throw ConfigError(std::string("FilterPair: ") + name + " has " + std::to_string(v.size()) +
                      " taps; only length-2 filters are supported");
  return {v[0], v[1]};
}

using Taps = std::array<double, 2>;

// Filters applied along rows (first tap index) and columns for each band,
// in ll, lh, hl, hh order.
struct BandFilters {
  std::array<Taps, 4> row;
  std::array<Taps, 4> col;
};

BandFilters bands(const Taps& lo, const Taps& hi) {
  return {{lo, lo, hi, hi}, {lo, hi, lo, hi}};
}

// y_b[i, j] = sum_{k,l} x[2i+k, 2j+l] row_b[k] col_b[l]
std::array<Tensor, 4> analyze(const Tensor& x, const BandFilters& f) {
  const Shape xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0)
    throw ShapeError("dwt2: spatial dims must be even, got " + xs.str());
  const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
  std::array<Tensor, 4> out{Tensor(os, x.dtype()), Tensor(os, x.dtype()), Tensor(os, x.dtype()),
                            Tensor(os, x.dtype())};
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::array<std::array<T, 4>, 4> k{};
    for (int b = 0; b < 4; ++b)
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) k[b][r * 2 + c] = static_cast<T>(f.row[b][r] * f.col[b][c]);
    const T* src = x.data<T>().data();
    std::array<T*, 4> dst{};
    for (int b = 0; b < 4; ++b) dst[b] = out[b].template data<T>().data();
    std::int64_t o = 0;
    for (std::int64_t p = 0; p < xs.n * xs.c; ++p) {
      const T* plane = src + p * xs.plane();
      for (std::int64_t i = 0; i < os.h; ++i) {
        const T* r0 = plane + 2 * i * xs.w;
        const T* r1 = r0 + xs.w;
        for (std::int64_t j = 0; j < os.w; ++j, ++o) {
          const T a = r0[2 * j], b = r0[2 * j + 1], c = r1[2 * j], d = r1[2 * j + 1];
          for (int band = 0; band < 4; ++band)
            dst[band][o] = a * k[band][0] + b * k[band][1] + c * k[band][2] + d * k[band][3];
        }
      }
    }
  });
  return out;
}

// x[2i+a, 2j+b] = sum_band y_band[i, j] row_band[a] col_band[b]
Tensor synthesize(const std::array<const Tensor*, 4>& y, const BandFilters& f) {
  const Shape ys = y[0]->shape();
  const Shape os{ys.n, ys.c, ys.h * 2, ys.w * 2};
  Tensor out(os, y[0]->dtype());
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::array<std::array<T, 4>, 4> k{};
    for (int b = 0; b < 4; ++b)
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) k[b][r * 2 + c] = static_cast<T>(f.row[b][r] * f.col[b][c]);
    std::array<const T*, 4> src{};
    for (int b = 0; b < 4; ++b) src[b] = y[b]->template data<T>().data();
    T* dst = out.data<T>().data();
    std::int64_t o = 0;
    for (std::int64_t p = 0; p < ys.n * ys.c; ++p) {
      T* plane = dst + p * os.plane();
      for (std::int64_t i = 0; i < ys.h; ++i) {
        T* r0 = plane + 2 * i * os.w;
        T* r1 = r0 + os.w;
        for (std::int64_t j = 0; j < ys.w; ++j, ++o) {
          const T ll = src[0][o], lh = src[1][o], hl = src[2][o], hh = src[3][o];
          for (int t = 0; t < 4; ++t) {
            const T v = ll * k[0][t] + lh * k[1][t] + hl * k[2][t] + hh * k[3][t];
            T* row = t < 2 ? r0 : r1;
            row[2 * j + (t & 1)] = v;
          }
        }
      }
    }
  });
  return out;
}

void check_bands(const Tensor& ll, const Tensor& lh, const Tensor& hl, const Tensor& hh) {
  const Tensor* named[] = {&ll, &lh, &hl, &hh};
  const char* names[] = {"y_ll", "y_lh", "y_hl", "y_hh"};
  for (int i = 0; i < 4; ++i)
    if (!named[i]->defined()) throw ShapeError(std::string("subband ") + names[i] + " is undefined");
  for (int i = 1; i < 4; ++i) {
    if (!(named[i]->shape() == ll.shape()))
      throw ShapeError(std::string("subband ") + names[i] + " has dims " +
                       named[i]->shape().str() + " but y_ll has " + ll.shape().str());
    check_same_dtype(ll, *named[i], "subbands");
  }
}

}  // namespace

FilterPair::FilterPair(Unchecked, std::vector<double> phi, std::vector<double> psi,
                       std::vector<double> phi_syn, std::vector<double> psi_syn)
    : phi_(as_taps(phi, "phi")),
      psi_(as_taps(psi, "psi")),
      phi_syn_(as_taps(phi_syn, "phi_syn")),
      psi_syn_(as_taps(psi_syn, "psi_syn")) {}

FilterPair::FilterPair(std::vector<double> phi, std::vector<double> psi,
                       std::vector<double> phi_syn, std::vector<double> psi_syn)
    : FilterPair(Unchecked{}, std::move(phi), std::move(psi), std::move(phi_syn),
                 std::move(psi_syn)) {
  const double err = reconstruction_error();
  if (!(err <= 1e-12))
    throw ConfigError("FilterPair does not reconstruct perfectly (max error " +
                      std::to_string(err) + ")");
}

FilterPair FilterPair::unchecked(std::vector<double> phi, std::vector<double> psi,
                                 std::vector<double> phi_syn, std::vector<double> psi_syn) {
  return FilterPair(Unchecked{}, std::move(phi), std::move(psi), std::move(phi_syn),
                    std::move(psi_syn));
}

double FilterPair::reconstruction_error(std::uint64_t seed) const {
  Rng rng(seed);
  const Tensor x = rng.uniform_tensor({2, 3, 6, 8}, -1.0, 1.0, DType::f64);
  return max_abs_diff(idwt2_single(dwt2_single(x, *this), *this), x);
}

const FilterPair& haar_filters() {
  static const FilterPair haar({0.5, 0.5}, {0.5, -0.5}, {1.0, 1.0}, {1.0, -1.0});
  return haar;
}

void SubbandSet::validate() const { check_bands(ll, lh, hl, hh); }

void WaveletStack::validate() const {
  if (levels.empty()) throw ShapeError("wavelet stack has no levels");
  for (std::size_t k = 0; k < levels.size(); ++k) {
    levels[k].validate();
    if (k > 0) {
      const Shape prev = levels[k - 1].shape();
      const Shape cur = levels[k].shape();
      if (cur.n != prev.n || cur.c != prev.c || cur.h * 2 != prev.h || cur.w * 2 != prev.w)
        throw ShapeError("wavelet stack level " + std::to_string(k) + " has dims " + cur.str() +
                         ", expected half of level " + std::to_string(k - 1) + " (" +
                         prev.str() + ")");
    }
  }
  if (!coarsest_ll.defined() || !(coarsest_ll.shape() == levels.back().shape()))
    throw ShapeError("wavelet stack coarsest_ll does not match the coarsest level dims");
}

SubbandSet dwt2_single(const Tensor& x, const FilterPair& f) {
  auto y = analyze(x, bands(f.phi(), f.psi()));
  return {std::move(y[0]), std::move(y[1]), std::move(y[2]), std::move(y[3])};
}

Tensor idwt2_single(const SubbandSet& s, const FilterPair& f) {
  s.validate();
  return synthesize({&s.ll, &s.lh, &s.hl, &s.hh}, bands(f.phi_syn(), f.psi_syn()));
}

WaveletStack dwt2_multi(const Tensor& x, int levels, const FilterPair& f) {
  if (levels < 1) throw ConfigError("dwt2_multi: levels must be >= 1");
  WaveletStack stack;
  Tensor current = x;
  for (int k = 0; k < levels; ++k) {
    const Shape s = current.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0)
      throw ShapeError("dwt2_multi: level " + std::to_string(k + 1) + " input " + s.str() +
                       " has odd spatial dims; input " + x.shape().str() +
                       " is not divisible by 2^" + std::to_string(levels));
    stack.levels.push_back(dwt2_single(current, f));
    current = stack.levels.back().ll;
  }
  stack.coarsest_ll = std::move(current);
  return stack;
}

Tensor idwt2_multi(const WaveletStack& stack, const FilterPair& f) {
  stack.validate();
  Tensor current = stack.coarsest_ll;
  for (auto it = stack.levels.rbegin(); it != stack.levels.rend(); ++it) {
    current = synthesize({&current, &it->lh, &it->hl, &it->hh}, bands(f.phi_syn(), f.psi_syn()));
  }
  return current;
}

SubbandVars dwt2(Var x, const FilterPair& f) {
  Tape& tape = x.tape();
  auto y = analyze(x.value(), bands(f.phi(), f.psi()));
  const BandFilters adjoint = bands(f.phi(), f.psi());
  std::vector<Tensor> outs(std::make_move_iterator(y.begin()), std::make_move_iterator(y.end()));
  auto ids = tape.record(std::move(outs), {x.id()},
                         [adjoint](std::span<const Tensor> g, GradSink& sink) {
                           // Missing band gradients contribute zero.
                           const Tensor* any = nullptr;
                           for (const auto& t : g)
                             if (t.defined()) any = &t;
                           Tensor zero = any->zeros_like();
                           std::array<const Tensor*, 4> in{};
                           for (int b = 0; b < 4; ++b) in[b] = g[b].defined() ? &g[b] : &zero;
                           sink.add(0, synthesize(in, adjoint));
                         });
  return {{tape, ids[0]}, {tape, ids[1]}, {tape, ids[2]}, {tape, ids[3]}};
}

Var idwt2(Var ll, Var lh, Var hl, Var hh, const FilterPair& f) {
  Tape& tape = ll.tape();
  if (&lh.tape() != &tape || &hl.tape() != &tape || &hh.tape() != &tape)
    throw ContractError("idwt2: inputs on different tapes");
  check_bands(ll.value(), lh.value(), hl.value(), hh.value());
  Tensor out = synthesize({&ll.value(), &lh.value(), &hl.value(), &hh.value()},
                          bands(f.phi_syn(), f.psi_syn()));
  const BandFilters adjoint = bands(f.phi_syn(), f.psi_syn());
  auto id = tape.record(std::move(out), {ll.id(), lh.id(), hl.id(), hh.id()},
                        [adjoint](std::span<const Tensor> g, GradSink& sink) {
                          auto y = analyze(g[0], adjoint);
                          for (std::size_t b = 0; b < 4; ++b)
                            if (sink.wants(b)) sink.add(b, std::move(y[b]));
                        });
  return {tape, id};
}

}  // namespace wcnn::wavelet
