#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "matchformer/tensor.hpp"

namespace matchformer {

struct FdOptions {
  double h = 1e-5;
  double tol = 1e-4;
  /// Denominator floor for the relative error, so near-zero gradients are
  /// compared on an absolute scale.
  double floor = 1e-6;
  /// Coordinates checked per tensor; 0 means every coordinate.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct FdReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<tensor index>[<flat index>]"
  bool passed = false;
};

/// Compares the reverse-mode gradient of `f` against central differences,
/// perturbing the listed tensors in place. `f` must return a scalar and may
/// read the tensors through captured handles.
FdReport fd_check(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                  const FdOptions& options = {});

FdReport fd_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5,
                  double tol = 1e-4);

}  // namespace matchformer
