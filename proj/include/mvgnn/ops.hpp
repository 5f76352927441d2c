#pragma once

// The differentiable op set. Shape violations throw ShapeError naming the op
// and the offending extents; out-of-range indices throw IndexError.

#include <cstddef>
#include <span>
#include <vector>

#include "mvgnn/tensor.hpp"

namespace mvgnn::diff {

using Index = std::vector<std::size_t>;

// x: (N, in), weight: (in, out), bias: (out) or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

// x has shape prefix ++ rest, factors has shape prefix; every trailing block of
// x is multiplied by the matching factor entry.
Tensor mul_prefix(const Tensor& x, const Tensor& factors);

// Multiplies row r (first axis) by the constant factors[r].
Tensor scale_rows(const Tensor& x, std::span<const double> factors);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);

// Gradient at exactly zero is taken as zero.
Tensor sqrt(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);

Tensor sum(const Tensor& x, std::size_t axis);
Tensor sum_all(const Tensor& x);
Tensor mean(const Tensor& x);

// values: (E, ...) -> (n_targets, ...), out[index[e]] += values[e].
Tensor scatter_sum(const Tensor& values, const Index& index, std::size_t n_targets);
// values: (N, ...) -> (E, ...), out[e] = values[index[e]].
Tensor gather(const Tensor& values, const Index& index);

// Mean of squared differences over all entries; scalar result.
Tensor mse(const Tensor& prediction, const Tensor& target);

// ---- Multivector ops. MV arrays have shape (rows, channels, 8). ----

// weight: (4, c_out, c_in); each grade is mixed across channels independently.
Tensor mv_linear(const Tensor& v, const Tensor& weight);

// Channel-wise geometric product of two MV arrays of identical shape.
Tensor mv_geometric_product(const Tensor& a, const Tensor& b);

// Quadratic form per channel: (rows, c). With per_grade, one value per grade:
// (rows, c, 4).
Tensor mv_quadratic(const Tensor& v, bool per_grade);

// Scales each grade of each channel: grade_factors has shape (rows, c, 4).
Tensor mv_scale_grades(const Tensor& v, const Tensor& grade_factors);

// Per channel: q if b(q,k) >= 0, else the rejection of q from k normalized by
// sqrt(b(k,k) + eps).
Tensor mv_rejection(const Tensor& q, const Tensor& k, double eps);

// Replaces the grade-0 slot of every channel: scalars has shape (rows, c).
Tensor mv_set_scalar(const Tensor& v, const Tensor& scalars);

// Grade-0 slot of every channel: (rows, c).
Tensor mv_scalar_part(const Tensor& v);

// Grade-1 slots of channel `channel`: (rows, 3).
Tensor mv_vector_part(const Tensor& v, std::size_t channel);

}  // namespace mvgnn::diff
