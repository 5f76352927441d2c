#pragma once

// Finite-difference suites shared by the CLI and the acceptance runner.

#include <cstdint>
#include <string>
#include <vector>

#include "mvgnn/gradcheck.hpp"
#include "mvgnn/models.hpp"

namespace mvgnn::diagnostics {

struct OpCheck {
  std::string name;
  std::size_t probes = 0;
  // Worst per-leaf relative error over all probes.
  double max_relative_error = 0.0;
};

// Checks every differentiable op on `probes` freshly drawn inputs each. The
// scalar loss is a fixed random contraction of the op output.
std::vector<OpCheck> op_gradchecks(std::size_t probes, std::uint64_t seed);

// Loss gradient of a freshly initialized model on a 3-node N-body graph,
// probing up to max_coordinates entries per parameter (0 = all). The task
// field of cfg is ignored.
diff::GradcheckResult model_gradcheck(const models::ModelConfig& cfg, std::uint64_t seed,
                                      std::size_t max_coordinates = 12);

}  // namespace mvgnn::diagnostics
