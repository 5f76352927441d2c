#pragma once

// Equivariant building blocks. Multivector-valued inputs are MV arrays of
// shape (rows, channels, 8); scalar inputs are (rows, width).
//
// Every layer registers its parameters in a ParameterStore under a dotted
// prefix at construction and is immutable afterwards.

#include <random>
#include <string>

#include "mvgnn/ops.hpp"
#include "mvgnn/parameters.hpp"

namespace mvgnn::layers {

using diff::ParameterStore;
using diff::Tensor;

inline constexpr double kRejectionEps = 1e-8;

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, std::mt19937_64& rng,
         bool bias = true);
  Tensor operator()(const Tensor& x) const;

  std::size_t in() const noexcept { return in_; }
  std::size_t out() const noexcept { return out_; }

 private:
  Tensor weight_, bias_;
  std::size_t in_ = 0, out_ = 0;
};

// Two SiLU hidden layers and a linear output.
class ScalarMLP {
 public:
  ScalarMLP() = default;
  ScalarMLP(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out,
            std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;

  std::size_t in() const noexcept { return l1_.in(); }
  std::size_t out() const noexcept { return l3_.out(); }

 private:
  Linear l1_, l2_, l3_;
};

// Grade-wise channel mixing, no bias.
class MVLinear {
 public:
  MVLinear() = default;
  MVLinear(ParameterStore& store, const std::string& prefix, std::size_t c_in, std::size_t c_out,
           std::mt19937_64& rng);
  Tensor operator()(const Tensor& v) const;

  std::size_t c_in() const noexcept { return c_in_; }
  std::size_t c_out() const noexcept { return c_out_; }
  const Tensor& weight() const noexcept { return weight_; }

 private:
  Tensor weight_;
  std::size_t c_in_ = 0, c_out_ = 0;
};

// Per channel i with q = Q(v), k = K(v): q_i when b(q_i, k_i) >= 0, else the
// rejection of q_i from k_i / sqrt(b(k_i, k_i) + eps).
class MVNNonlinearity {
 public:
  MVNNonlinearity() = default;
  MVNNonlinearity(ParameterStore& store, const std::string& prefix, std::size_t channels, std::mt19937_64& rng);
  Tensor operator()(const Tensor& v) const;

  const MVLinear& query() const noexcept { return q_; }
  const MVLinear& key() const noexcept { return k_; }

 private:
  MVLinear q_, k_;
};

// Functional form: q = Q(v), k = K(v), then the per-channel rejection rule.
Tensor mvn_nonlinearity(const Tensor& v, const MVLinear& q, const MVLinear& k);

enum class GPComposition {
  // out(GP(a(v), b(v))) + res(v)
  reference,
  // out(GP(a(v), b(v)))
  no_residual,
};

// Geometric-product layer psi: linear images, unparameterized channel-wise
// geometric product, linear output map and a linear residual path.
class GeometricProductLayer {
 public:
  GeometricProductLayer() = default;
  GeometricProductLayer(ParameterStore& store, const std::string& prefix, std::size_t channels, std::mt19937_64& rng,
                        GPComposition composition = GPComposition::reference);
  Tensor operator()(const Tensor& v) const;

 private:
  MVLinear a_, b_, out_, res_;
  GPComposition composition_ = GPComposition::reference;
};

// mv_linear -> rejection nonlinearity -> mv_linear.
class MVNMLP {
 public:
  MVNMLP() = default;
  MVNMLP(ParameterStore& store, const std::string& prefix, std::size_t c_in, std::size_t c_out,
         std::mt19937_64& rng);
  Tensor operator()(const Tensor& v) const;

  std::size_t c_out() const noexcept { return l2_.c_out(); }

 private:
  MVLinear l1_;
  MVNNonlinearity act_;
  MVLinear l2_;
};

// Invariant features of a multivector array: sqrt(q) per channel, or per
// (channel, grade) with per_grade set.
std::size_t invariant_width(std::size_t channels, bool per_grade);

struct ScalarsAndMultivectors {
  Tensor s;
  Tensor v;
};

// Linear multivector perceptron:
//   v_mu, v_h = phi_mu(v), phi_h(v)
//   s_mu, s_h = sqrt(q(v_mu)), sqrt(q(v_h))
//   s', v'    = phi([s_h, s]), sigmoid(s_mu) * v_mu
class MVPLin {
 public:
  MVPLin() = default;
  MVPLin(ParameterStore& store, const std::string& prefix, std::size_t s_in, std::size_t c_in, std::size_t s_out,
         std::size_t c_out, std::size_t hidden, std::mt19937_64& rng, bool per_grade = false);
  ScalarsAndMultivectors operator()(const Tensor& s, const Tensor& v) const;

 private:
  MVLinear mu_, h_;
  ScalarMLP phi_;
  bool per_grade_ = false;
};

// Geometric-product multivector perceptron:
//   w = psi(v);  v' = phi(w + v);
//   [s_new, g] = phi_s([s, v'^(0)]);  v'^(0) <- g
class MVPGP {
 public:
  MVPGP() = default;
  MVPGP(ParameterStore& store, const std::string& prefix, std::size_t s_width, std::size_t channels,
        std::size_t hidden, std::mt19937_64& rng);
  ScalarsAndMultivectors operator()(const Tensor& s, const Tensor& v) const;

  // phi(psi(v) + v), before the grade-0 overwrite.
  Tensor mix(const Tensor& v) const;
  // Scalar MLP on [s, mixed^(0)]: first s_width columns are the new scalars,
  // the remaining `channels` columns replace the grade-0 slots.
  Tensor heads(const Tensor& s, const Tensor& mixed) const;

 private:
  GeometricProductLayer psi_;
  MVLinear phi_;
  ScalarMLP scalar_;
  std::size_t s_width_ = 0, channels_ = 0;
};

}  // namespace mvgnn::layers
