#include "mvgnn/clifford.hpp"

#include <cmath>
#include <random>
#include <string>

#include "mvgnn/error.hpp"

namespace mvgnn::clifford {

StructureConstants structure_constants() {
  StructureConstants c{};
  for (std::size_t i = 0; i < kBladeCount; ++i) {
    for (std::size_t j = 0; j < kBladeCount; ++j) {
      c[i][j][kCayley[i][j].slot] = kCayley[i][j].sign;
    }
  }
  return c;
}

Multivector Multivector::scalar(double s) {
  Multivector m;
  m.coeffs[0] = s;
  return m;
}

Multivector Multivector::blade(std::size_t slot, double value) {
  Multivector m;
  m.coeffs.at(slot) = value;
  return m;
}

Multivector& Multivector::operator+=(const Multivector& o) {
  for (std::size_t i = 0; i < kBladeCount; ++i) coeffs[i] += o.coeffs[i];
  return *this;
}

Multivector& Multivector::operator-=(const Multivector& o) {
  for (std::size_t i = 0; i < kBladeCount; ++i) coeffs[i] -= o.coeffs[i];
  return *this;
}

Multivector& Multivector::operator*=(double s) {
  for (auto& c : coeffs) c *= s;
  return *this;
}

Multivector operator+(Multivector a, const Multivector& b) { return a += b; }
Multivector operator-(Multivector a, const Multivector& b) { return a -= b; }
Multivector operator-(Multivector a) { return a *= -1.0; }
Multivector operator*(double s, Multivector a) { return a *= s; }
Multivector operator*(Multivector a, double s) { return a *= s; }

Multivector geometric_product(const Multivector& a, const Multivector& b) {
  Multivector out;
  for (std::size_t i = 0; i < kBladeCount; ++i) {
    if (a.coeffs[i] == 0.0) continue;
    for (std::size_t j = 0; j < kBladeCount; ++j) {
      const auto& p = kCayley[i][j];
      out.coeffs[p.slot] += p.sign * a.coeffs[i] * b.coeffs[j];
    }
  }
  return out;
}

Multivector operator*(const Multivector& a, const Multivector& b) { return geometric_product(a, b); }

Multivector grade_project(const Multivector& v, int k) {
  if (k < 0 || k > 3) {
    throw InvalidGradeError("clifford", "grade_project", "grade " + std::to_string(k) + " outside 0..3");
  }
  Multivector out;
  for (std::size_t i = 0; i < kBladeCount; ++i) {
    if (kGradeOfSlot[i] == k) out.coeffs[i] = v.coeffs[i];
  }
  return out;
}

Multivector reverse(const Multivector& v) {
  Multivector out = v;
  for (std::size_t i = 0; i < kBladeCount; ++i) {
    const int k = kGradeOfSlot[i];
    if ((k * (k - 1) / 2) % 2 != 0) out.coeffs[i] = -out.coeffs[i];
  }
  return out;
}

double bilinear_form(const Multivector& v, const Multivector& w) {
  return geometric_product(reverse(v), w).coeffs[0];
}

double quadratic_form(const Multivector& v) { return bilinear_form(v, v); }

double coefficient_dot(const Multivector& v, const Multivector& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < kBladeCount; ++i) s += v.coeffs[i] * w.coeffs[i];
  return s;
}

Multivector embed_vector(const Vec3& x) {
  Multivector m;
  m.coeffs[1] = x[0];
  m.coeffs[2] = x[1];
  m.coeffs[3] = x[2];
  return m;
}

Multivector embed_scalar(double s) { return Multivector::scalar(s); }

Vec3 extract_vector(const Multivector& v) { return {v.coeffs[1], v.coeffs[2], v.coeffs[3]}; }

double extract_scalar(const Multivector& v) { return v.coeffs[0]; }

double max_abs_difference(const Multivector& a, const Multivector& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < kBladeCount; ++i) m = std::max(m, std::abs(a.coeffs[i] - b.coeffs[i]));
  return m;
}

double determinant(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

namespace {

constexpr double kMapTolerance = 1e-12;

void validate_map(const Mat3& m, int det_sign) {
  if (det_sign != 1 && det_sign != -1) {
    throw InvalidMapError("clifford", "OrthogonalMap", "det_sign must be +1 or -1");
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += m[k][i] * m[k][j];
      const double expected = (i == j) ? 1.0 : 0.0;
      if (!std::isfinite(dot) || std::abs(dot - expected) > kMapTolerance) {
        throw InvalidMapError("clifford", "OrthogonalMap", "matrix is not orthogonal (R^T R deviates from I)");
      }
    }
  }
  if (std::abs(determinant(m) - det_sign) > kMapTolerance) {
    throw InvalidMapError("clifford", "OrthogonalMap", "determinant does not match det_sign");
  }
}

}  // namespace

OrthogonalMap::OrthogonalMap(const Mat3& matrix, int det_sign) : matrix_(matrix), det_sign_(det_sign), action_{} {
  validate_map(matrix_, det_sign_);

  // Images of the generators are the matrix columns; every basis blade maps to
  // the geometric product of its mapped generators.
  std::array<Multivector, 3> generator_images;
  for (int g = 0; g < 3; ++g) {
    generator_images[g] = embed_vector({matrix_[0][g], matrix_[1][g], matrix_[2][g]});
  }
  for (std::size_t slot = 0; slot < kBladeCount; ++slot) {
    Multivector image = Multivector::scalar(1.0);
    for (int g = 0; g < 3; ++g) {
      if (kSlotBitmask[slot] & (1u << g)) image = image * generator_images[g];
    }
    for (std::size_t row = 0; row < kBladeCount; ++row) action_[row][slot] = image.coeffs[row];
  }
}

OrthogonalMap OrthogonalMap::identity() {
  return OrthogonalMap(Mat3{{{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}}}, 1);
}

Vec3 OrthogonalMap::apply(const Vec3& x) const {
  Vec3 y{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) y[i] += matrix_[i][j] * x[j];
  }
  return y;
}

Multivector apply_orthogonal(const OrthogonalMap& R, const Multivector& v) {
  Multivector out;
  const auto& a = R.action();
  for (std::size_t i = 0; i < kBladeCount; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < kBladeCount; ++j) s += a[i][j] * v.coeffs[j];
    out.coeffs[i] = s;
  }
  return out;
}

void apply_orthogonal_inplace(const OrthogonalMap& R, std::span<double> multivectors) {
  if (multivectors.size() % kBladeCount != 0) {
    throw ShapeError("clifford", "apply_orthogonal", "buffer length is not a multiple of 8");
  }
  for (std::size_t off = 0; off < multivectors.size(); off += kBladeCount) {
    Multivector v;
    for (std::size_t i = 0; i < kBladeCount; ++i) v.coeffs[i] = multivectors[off + i];
    const Multivector w = apply_orthogonal(R, v);
    for (std::size_t i = 0; i < kBladeCount; ++i) multivectors[off + i] = w.coeffs[i];
  }
}

OrthogonalMap random_orthogonal(std::uint64_t seed, int det_sign) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Columns of a Gaussian matrix, orthonormalized by modified Gram-Schmidt.
  std::array<Vec3, 3> cols{};
  for (auto& c : cols) {
    for (auto& x : c) x = normal(rng);
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < i; ++j) {
      double d = 0.0;
      for (int k = 0; k < 3; ++k) d += cols[i][k] * cols[j][k];
      for (int k = 0; k < 3; ++k) cols[i][k] -= d * cols[j][k];
    }
    double n = 0.0;
    for (int k = 0; k < 3; ++k) n += cols[i][k] * cols[i][k];
    n = std::sqrt(n);
    for (int k = 0; k < 3; ++k) cols[i][k] /= n;
  }
  Mat3 m{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m[r][c] = cols[c][r];
  }
  const int sign = det_sign < 0 ? -1 : 1;
  if ((determinant(m) < 0.0) != (sign < 0)) {
    for (int r = 0; r < 3; ++r) m[r][2] = -m[r][2];
  }
  return OrthogonalMap(m, sign);
}

}  // namespace mvgnn::clifford
