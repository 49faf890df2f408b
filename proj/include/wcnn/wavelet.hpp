#pragma once

#include <array>
#include <vector>

#include "wcnn/autodiff.hpp"
#include "wcnn/tensor.hpp"

namespace wcnn::wavelet {

/// Bi-orthogonal analysis/synthesis filter quadruple for a separable 2-D DWT.
///
/// Only length-2 filters are accepted: with non-overlapping 2x2 blocks no
/// boundary extension is ever needed. Construction certifies perfect
/// reconstruction numerically on random data.
class FilterPair {
 public:
  FilterPair(std::vector<double> phi, std::vector<double> psi, std::vector<double> phi_syn,
             std::vector<double> psi_syn);

  /// Skips the reconstruction check. Used to build negative controls.
  static FilterPair unchecked(std::vector<double> phi, std::vector<double> psi,
                              std::vector<double> phi_syn, std::vector<double> psi_syn);

  const std::array<double, 2>& phi() const { return phi_; }
  const std::array<double, 2>& psi() const { return psi_; }
  const std::array<double, 2>& phi_syn() const { return phi_syn_; }
  const std::array<double, 2>& psi_syn() const { return psi_syn_; }

  /// Max abs round-trip error on a random f64 tensor.
  double reconstruction_error(std::uint64_t seed = 7) const;

 private:
  struct Unchecked {};
  FilterPair(Unchecked, std::vector<double> phi, std::vector<double> psi,
             std::vector<double> phi_syn, std::vector<double> psi_syn);

  std::array<double, 2> phi_{};
  std::array<double, 2> psi_{};
  std::array<double, 2> phi_syn_{};
  std::array<double, 2> psi_syn_{};
};

/// phi = (1/2, 1/2), psi = (1/2, -1/2); synthesis filters are twice the
/// analysis ones.
const FilterPair& haar_filters();

/// The four same-shaped coefficient tensors of one DWT level.
/// Naming: first letter is the filter along rows (vertical), second along
/// columns (horizontal).
struct SubbandSet {
  Tensor ll;
  Tensor lh;
  Tensor hl;
  Tensor hh;

  const Shape& shape() const { return ll.shape(); }
  /// Throws ShapeError unless all four tensors share dims and dtype.
  void validate() const;
};

/// Cascaded decomposition, finest level first.
struct WaveletStack {
  std::vector<SubbandSet> levels;
  Tensor coarsest_ll;

  void validate() const;
};

/// Single-level channelwise DWT. Requires even spatial dims.
SubbandSet dwt2_single(const Tensor& x, const FilterPair& f = haar_filters());
/// Single-level channelwise inverse DWT.
Tensor idwt2_single(const SubbandSet& s, const FilterPair& f = haar_filters());

/// Repeats the DWT on each level's low-low band. Requires spatial dims
/// divisible by 2^levels.
WaveletStack dwt2_multi(const Tensor& x, int levels, const FilterPair& f = haar_filters());
/// Reconstructs from coarse to fine using each level's high bands; the
/// intermediate low-low bands stored in the stack are not consulted.
Tensor idwt2_multi(const WaveletStack& stack, const FilterPair& f = haar_filters());

/// Differentiable counterparts recorded on the input's tape.
struct SubbandVars {
  Var ll;
  Var lh;
  Var hl;
  Var hh;
};

SubbandVars dwt2(Var x, const FilterPair& f = haar_filters());
Var idwt2(Var ll, Var lh, Var hl, Var hh, const FilterPair& f = haar_filters());

}  // namespace wcnn::wavelet
