#pragma once

// Central finite-difference gradient checking.

#include <cstdint>
#include <functional>
#include <vector>

#include "mvgnn/tensor.hpp"

namespace mvgnn::diff {

struct GradcheckOptions {
  double step = 1e-5;
  // 0 checks every coordinate; otherwise a seeded random subset per leaf.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  // Per leaf: ||analytic - numeric|| / max(||analytic||, ||numeric||) over the
  // probed coordinates (0 when both vanish).
  std::vector<double> leaf_errors;
  double max_relative_error = 0.0;
  // Same measure over all probed coordinates of all leaves together. Robust
  // when some leaves have gradients near the finite-difference noise floor.
  double global_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
};

// `loss_fn` must build a scalar from `leaves` (captured by the caller). It is
// evaluated once on a tape for the analytic gradient, then repeatedly without
// a tape while each probed coordinate is perturbed in place by +-step.
GradcheckResult gradcheck(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& leaves,
                          const GradcheckOptions& options = {});

}  // namespace mvgnn::diff
