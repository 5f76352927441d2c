#pragma once

#include <random>
#include <vector>

#include "mvgnn/clifford.hpp"
#include "mvgnn/tensor.hpp"

namespace mvgnn::testing {

inline clifford::Multivector random_multivector(std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  clifford::Multivector m;
  for (auto& c : m.coeffs) c = n(rng);
  return m;
}

inline diff::Tensor random_tensor(std::mt19937_64& rng, diff::Shape shape, bool requires_grad = false,
                                  double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> data(diff::shape_numel(shape));
  for (auto& x : data) x = n(rng);
  return diff::Tensor(std::move(shape), std::move(data), requires_grad);
}

// Applies rho(R) to every multivector of an MV array, returning a new constant tensor.
inline diff::Tensor rotate_mv(const clifford::OrthogonalMap& R, const diff::Tensor& v) {
  std::vector<double> data(v.data().begin(), v.data().end());
  clifford::apply_orthogonal_inplace(R, data);
  return diff::Tensor(v.shape(), std::move(data));
}

// Applies R to every row of an (N, 3) tensor.
inline diff::Tensor rotate_rows(const clifford::OrthogonalMap& R, const diff::Tensor& x) {
  std::vector<double> data(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i + 2 < data.size(); i += 3) {
    const auto y = R.apply({data[i], data[i + 1], data[i + 2]});
    data[i] = y[0];
    data[i + 1] = y[1];
    data[i + 2] = y[2];
  }
  return diff::Tensor(x.shape(), std::move(data));
}

inline double max_abs_diff(const diff::Tensor& a, const diff::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace mvgnn::testing
