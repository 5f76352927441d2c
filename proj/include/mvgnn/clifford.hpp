#pragma once

// Exact reference implementation of the Euclidean Clifford algebra Cl(R^3).
//
// Multivectors are stored as 8 coefficients over the basis
//   [1, e1, e2, e3, e12, e13, e23, e123]
// with blade orientation fixed by ascending generator index. Everything
// downstream (the differentiable multivector ops, layers, equivariance audits)
// derives its sign conventions from the tables defined here.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace mvgnn::clifford {

inline constexpr std::size_t kBladeCount = 8;
inline constexpr std::size_t kGradeCount = 4;

// Grade of each basis slot.
inline constexpr std::array<int, kBladeCount> kGradeOfSlot = {0, 1, 1, 1, 2, 2, 2, 3};

// Bitmask of generators for each slot (bit 0 = e1, bit 1 = e2, bit 2 = e3).
inline constexpr std::array<unsigned, kBladeCount> kSlotBitmask = {0b000, 0b001, 0b010, 0b100,
                                                                   0b011, 0b101, 0b110, 0b111};

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

// One nonzero entry of the Cayley table: e_a * e_b = sign * e_slot.
struct BladeProduct {
  int sign;
  std::size_t slot;
};

using CayleyTable = std::array<std::array<BladeProduct, kBladeCount>, kBladeCount>;

namespace detail {

constexpr std::size_t slot_of_bitmask(unsigned mask) {
  for (std::size_t s = 0; s < kBladeCount; ++s) {
    if (kSlotBitmask[s] == mask) return s;
  }
  return kBladeCount;
}

constexpr int popcount3(unsigned x) { return int(x & 1u) + int((x >> 1) & 1u) + int((x >> 2) & 1u); }

// Sign from reordering the concatenated generator string of blades a and b
// into ascending order; repeated generators square to +1.
constexpr int reorder_sign(unsigned a, unsigned b) {
  int swaps = 0;
  for (unsigned shifted = a >> 1; shifted != 0; shifted >>= 1) swaps += popcount3(shifted & b);
  return (swaps % 2 == 0) ? 1 : -1;
}

constexpr CayleyTable make_cayley_table() {
  CayleyTable table{};
  for (std::size_t i = 0; i < kBladeCount; ++i) {
    for (std::size_t j = 0; j < kBladeCount; ++j) {
      const unsigned a = kSlotBitmask[i];
      const unsigned b = kSlotBitmask[j];
      table[i][j] = BladeProduct{reorder_sign(a, b), slot_of_bitmask(a ^ b)};
    }
  }
  return table;
}

}  // namespace detail

inline constexpr CayleyTable kCayley = detail::make_cayley_table();

// Dense structure constants C[i][j][k]: (e_i * e_j) has coefficient C[i][j][k] on e_k.
using StructureConstants = std::array<std::array<std::array<double, kBladeCount>, kBladeCount>, kBladeCount>;
StructureConstants structure_constants();

struct Multivector {
  std::array<double, kBladeCount> coeffs{};

  static Multivector scalar(double s);
  static Multivector blade(std::size_t slot, double value = 1.0);

  double& operator[](std::size_t i) { return coeffs[i]; }
  double operator[](std::size_t i) const { return coeffs[i]; }

  Multivector& operator+=(const Multivector& o);
  Multivector& operator-=(const Multivector& o);
  Multivector& operator*=(double s);

  friend bool operator==(const Multivector&, const Multivector&) = default;
};

Multivector operator+(Multivector a, const Multivector& b);
Multivector operator-(Multivector a, const Multivector& b);
Multivector operator-(Multivector a);
Multivector operator*(double s, Multivector a);
Multivector operator*(Multivector a, double s);
// Geometric product.
Multivector operator*(const Multivector& a, const Multivector& b);

Multivector geometric_product(const Multivector& a, const Multivector& b);

// Throws InvalidGradeError for k outside 0..3.
Multivector grade_project(const Multivector& v, int k);

// Grade-k part multiplied by (-1)^(k(k-1)/2).
Multivector reverse(const Multivector& v);

// Scalar part of reverse(v) * w. Positive definite for this signature.
double bilinear_form(const Multivector& v, const Multivector& w);
double quadratic_form(const Multivector& v);
// Coefficient-wise dot product; equal to bilinear_form for signature (3,0).
double coefficient_dot(const Multivector& v, const Multivector& w);

Multivector embed_vector(const Vec3& x);
Multivector embed_scalar(double s);
Vec3 extract_vector(const Multivector& v);
double extract_scalar(const Multivector& v);

double max_abs_difference(const Multivector& a, const Multivector& b);

// An element of O(3). Construction validates orthogonality and the determinant
// against det_sign; violations throw InvalidMapError.
class OrthogonalMap {
 public:
  OrthogonalMap(const Mat3& matrix, int det_sign);

  static OrthogonalMap identity();

  const Mat3& matrix() const noexcept { return matrix_; }
  int det_sign() const noexcept { return det_sign_; }

  Vec3 apply(const Vec3& x) const;

  // The outermorphism rho(R) as a dense 8x8 matrix acting on coefficient vectors.
  using ActionMatrix = std::array<std::array<double, kBladeCount>, kBladeCount>;
  const ActionMatrix& action() const noexcept { return action_; }

 private:
  Mat3 matrix_;
  int det_sign_;
  ActionMatrix action_;
};

Multivector apply_orthogonal(const OrthogonalMap& R, const Multivector& v);

// Applies rho(R) to a flat buffer of multivectors (length divisible by 8).
void apply_orthogonal_inplace(const OrthogonalMap& R, std::span<double> multivectors);

// Orthonormalized Gaussian 3x3 matrix; one column flipped if needed so the
// determinant equals det_sign. Deterministic in seed.
OrthogonalMap random_orthogonal(std::uint64_t seed, int det_sign);

double determinant(const Mat3& m);

}  // namespace mvgnn::clifford
