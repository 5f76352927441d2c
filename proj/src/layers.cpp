#include "mvgnn/layers.hpp"

#include <cmath>

#include "mvgnn/clifford.hpp"
#include "mvgnn/error.hpp"

namespace mvgnn::layers {

using namespace mvgnn::diff;

Linear::Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
               std::mt19937_64& rng, bool bias)
    : in_(in), out_(out) {
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  weight_ = store.add_uniform(prefix + ".weight", {in, out}, bound, rng);
  if (bias) bias_ = store.add_uniform(prefix + ".bias", {out}, bound, rng);
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight_, bias_); }

ScalarMLP::ScalarMLP(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t hidden,
                     std::size_t out, std::mt19937_64& rng)
    : l1_(store, prefix + ".l1", in, hidden, rng),
      l2_(store, prefix + ".l2", hidden, hidden, rng),
      l3_(store, prefix + ".l3", hidden, out, rng) {}

Tensor ScalarMLP::operator()(const Tensor& x) const { return l3_(silu(l2_(silu(l1_(x))))); }

MVLinear::MVLinear(ParameterStore& store, const std::string& prefix, std::size_t c_in, std::size_t c_out,
                   std::mt19937_64& rng)
    : c_in_(c_in), c_out_(c_out) {
  const double bound = std::sqrt(1.0 / static_cast<double>(c_in));
  weight_ = store.add_uniform(prefix + ".weight", {clifford::kGradeCount, c_out, c_in}, bound, rng);
}

Tensor MVLinear::operator()(const Tensor& v) const { return mv_linear(v, weight_); }

Tensor mvn_nonlinearity(const Tensor& v, const MVLinear& q, const MVLinear& k) {
  if (q.c_in() != q.c_out() || k.c_in() != k.c_out() || q.c_in() != k.c_in()) {
    throw ShapeError("layers", "mvn_nonlinearity", "query and key maps must both be c -> c");
  }
  return mv_rejection(q(v), k(v), kRejectionEps);
}

MVNNonlinearity::MVNNonlinearity(ParameterStore& store, const std::string& prefix, std::size_t channels,
                                 std::mt19937_64& rng)
    : q_(store, prefix + ".q", channels, channels, rng), k_(store, prefix + ".k", channels, channels, rng) {}

Tensor MVNNonlinearity::operator()(const Tensor& v) const { return mvn_nonlinearity(v, q_, k_); }

GeometricProductLayer::GeometricProductLayer(ParameterStore& store, const std::string& prefix, std::size_t channels,
                                             std::mt19937_64& rng, GPComposition composition)
    : a_(store, prefix + ".a", channels, channels, rng),
      b_(store, prefix + ".b", channels, channels, rng),
      out_(store, prefix + ".out", channels, channels, rng),
      composition_(composition) {
  if (composition_ == GPComposition::reference) res_ = MVLinear(store, prefix + ".res", channels, channels, rng);
}

Tensor GeometricProductLayer::operator()(const Tensor& v) const {
  Tensor product = out_(mv_geometric_product(a_(v), b_(v)));
  if (composition_ == GPComposition::no_residual) return product;
  return add(product, res_(v));
}

MVNMLP::MVNMLP(ParameterStore& store, const std::string& prefix, std::size_t c_in, std::size_t c_out,
               std::mt19937_64& rng)
    : l1_(store, prefix + ".l1", c_in, c_out, rng),
      act_(store, prefix + ".act", c_out, rng),
      l2_(store, prefix + ".l2", c_out, c_out, rng) {}

Tensor MVNMLP::operator()(const Tensor& v) const { return l2_(act_(l1_(v))); }

std::size_t invariant_width(std::size_t channels, bool per_grade) {
  return per_grade ? channels * clifford::kGradeCount : channels;
}

namespace {

// sqrt(q) features flattened to (rows, invariant_width).
Tensor flat_norms(const Tensor& v, bool per_grade) {
  Tensor n = diff::sqrt(mv_quadratic(v, per_grade));
  return per_grade ? reshape(n, {v.extent(0), v.extent(1) * clifford::kGradeCount}) : n;
}

}  // namespace

MVPLin::MVPLin(ParameterStore& store, const std::string& prefix, std::size_t s_in, std::size_t c_in,
               std::size_t s_out, std::size_t c_out, std::size_t hidden, std::mt19937_64& rng, bool per_grade)
    : mu_(store, prefix + ".mu", c_in, c_out, rng),
      h_(store, prefix + ".h", c_in, c_out, rng),
      phi_(store, prefix + ".phi", invariant_width(c_out, per_grade) + s_in, hidden, s_out, rng),
      per_grade_(per_grade) {}

ScalarsAndMultivectors MVPLin::operator()(const Tensor& s, const Tensor& v) const {
  const Tensor v_mu = mu_(v);
  const Tensor v_h = h_(v);
  const Tensor s_h = flat_norms(v_h, per_grade_);
  const Tensor s_out = phi_(concat({s_h, s}, 1));
  Tensor v_out;
  if (per_grade_) {
    v_out = mv_scale_grades(v_mu, sigmoid(diff::sqrt(mv_quadratic(v_mu, true))));
  } else {
    v_out = mul_prefix(v_mu, sigmoid(diff::sqrt(mv_quadratic(v_mu, false))));
  }
  return {s_out, v_out};
}

MVPGP::MVPGP(ParameterStore& store, const std::string& prefix, std::size_t s_width, std::size_t channels,
             std::size_t hidden, std::mt19937_64& rng)
    : psi_(store, prefix + ".psi", channels, rng),
      phi_(store, prefix + ".phi", channels, channels, rng),
      scalar_(store, prefix + ".scalar", s_width + channels, hidden, s_width + channels, rng),
      s_width_(s_width),
      channels_(channels) {}

Tensor MVPGP::mix(const Tensor& v) const { return phi_(add(psi_(v), v)); }

Tensor MVPGP::heads(const Tensor& s, const Tensor& mixed) const {
  return scalar_(concat({s, mv_scalar_part(mixed)}, 1));
}

ScalarsAndMultivectors MVPGP::operator()(const Tensor& s, const Tensor& v) const {
  const Tensor v_new = mix(v);
  const Tensor h = heads(s, v_new);
  return {slice(h, 1, 0, s_width_), mv_set_scalar(v_new, slice(h, 1, s_width_, channels_))};
}

}  // namespace mvgnn::layers
