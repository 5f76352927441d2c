#include "mvgnn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mvgnn/error.hpp"

namespace mvgnn::diff {

GradcheckResult gradcheck(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& leaves,
                          const GradcheckOptions& options) {
  for (const auto& leaf : leaves) {
    if (!leaf.defined() || !leaf.requires_grad()) {
      throw ContractError("diffgraph", "gradcheck", "every probed leaf must require gradients");
    }
  }
  for (auto leaf : leaves) leaf.zero_grad();
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = loss_fn();
    }
    tape.backward(loss);
  }

  std::mt19937_64 rng(options.seed);
  GradcheckResult result;
  double total_diff_sq = 0.0, total_a_sq = 0.0, total_n_sq = 0.0;
  for (auto leaf : leaves) {
    const std::size_t n = leaf.numel();
    std::vector<double> analytic(n, 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coordinates != 0 && options.max_coordinates < n) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coordinates);
      std::sort(coords.begin(), coords.end());
    }

    double diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
    auto values = leaf.mutable_data();
    for (std::size_t c : coords) {
      const double saved = values[c];
      values[c] = saved + options.step;
      const double up = loss_fn().item();
      values[c] = saved - options.step;
      const double down = loss_fn().item();
      values[c] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      diff_sq += (analytic[c] - numeric) * (analytic[c] - numeric);
      a_sq += analytic[c] * analytic[c];
      n_sq += numeric * numeric;
    }
    const double denom = std::sqrt(std::max(a_sq, n_sq));
    const double err = denom > 0.0 ? std::sqrt(diff_sq) / denom : 0.0;
    result.leaf_errors.push_back(err);
    result.max_relative_error = std::max(result.max_relative_error, err);
    result.coordinates_checked += coords.size();
    total_diff_sq += diff_sq;
    total_a_sq += a_sq;
    total_n_sq += n_sq;
    leaf.zero_grad();
  }
  const double total_denom = std::sqrt(std::max(total_a_sq, total_n_sq));
  result.global_relative_error = total_denom > 0.0 ? std::sqrt(total_diff_sq) / total_denom : 0.0;
  return result;
}

}  // namespace mvgnn::diff
