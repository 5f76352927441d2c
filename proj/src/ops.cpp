#include "mvgnn/ops.hpp"

#include <array>
#include <cmath>
#include <mutex>

#include <cblas.h>

#include "mvgnn/clifford.hpp"
#include "mvgnn/error.hpp"

namespace mvgnn::diff {

namespace {

using detail::Node;

bool wants(const Node& n, std::size_t i) { return n.parents[i] && n.parents[i]->requires_grad; }

[[noreturn]] void shape_fail(const char* op, const std::string& detail) { throw ShapeError("diffgraph", op, detail); }

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw ContractError("diffgraph", op, "undefined tensor input");
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  require_defined(op, a);
  require_defined(op, b);
  if (a.shape() != b.shape()) {
    shape_fail(op, "shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  require_defined(op, t);
  if (t.rank() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank) + ", got shape " + shape_to_string(t.shape()));
  }
}

void require_mv(const char* op, const Tensor& v) {
  require_rank(op, v, 3);
  if (v.extent(2) != clifford::kBladeCount) {
    shape_fail(op, "multivector array must have last extent 8, got shape " + shape_to_string(v.shape()));
  }
  if (v.extent(1) == 0) shape_fail(op, "multivector array needs at least one channel");
}

// Splits a shape around `axis` into (outer, extent, inner) block counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// C (m x n) += op(A) (m x k) * op(B) (k x n), all row-major and densely packed.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c) {
  if (m == 0 || n == 0 || k == 0) return;
  static std::once_flag single_threaded;
  std::call_once(single_threaded, [] { openblas_set_num_threads(1); });
  const auto M = static_cast<blasint>(m), N = static_cast<blasint>(n), K = static_cast<blasint>(k);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, M, N, K, 1.0,
              a, trans_a ? M : K, b, trans_b ? K : N, 1.0, c, N);
}

// Contiguous slot ranges sharing one grade: {first slot, slot count, grade}.
struct GradeBlock {
  std::size_t first, count, grade;
};
constexpr std::array<GradeBlock, 4> kGradeBlocks{{{0, 1, 0}, {1, 3, 1}, {4, 3, 2}, {7, 1, 3}}};

// (rows, c, 8) -> (8, rows, c).
std::vector<double> pack_slots(std::span<const double> v, std::size_t rows, std::size_t c) {
  std::vector<double> out(v.size());
  const std::size_t plane = rows * c;
  for (std::size_t rc = 0; rc < plane; ++rc) {
    for (std::size_t s = 0; s < clifford::kBladeCount; ++s) out[s * plane + rc] = v[rc * clifford::kBladeCount + s];
  }
  return out;
}

// (8, rows, c) added into (rows, c, 8).
void unpack_slots_add(const std::vector<double>& packed, std::size_t rows, std::size_t c, std::vector<double>& out) {
  const std::size_t plane = rows * c;
  for (std::size_t rc = 0; rc < plane; ++rc) {
    for (std::size_t s = 0; s < clifford::kBladeCount; ++s) {
      out[rc * clifford::kBladeCount + s] += packed[s * plane + rc];
    }
  }
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const std::size_t n = x.extent(0), in = x.extent(1), out = weight.extent(1);
  if (weight.extent(0) != in) {
    shape_fail("linear", "input width " + std::to_string(in) + " does not match weight " +
                             shape_to_string(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.extent(0) != out)) {
    shape_fail("linear", "bias shape " + shape_to_string(bias.shape()) + " does not match output width " +
                             std::to_string(out));
  }
  std::vector<double> y(n * out, 0.0);
  if (has_bias) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < n; ++r) std::copy(bv.begin(), bv.end(), y.begin() + static_cast<long>(r * out));
  }
  gemm(false, false, n, out, in, x.data().data(), weight.data().data(), y.data());
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result({n, out}, std::move(y), inputs, [n, in, out, has_bias](Node& self) {
    const auto& g = self.grad;
    if (wants(self, 0)) {
      gemm(false, true, n, in, out, g.data(), self.parents[1]->value.data(), self.parents[0]->grad_buffer().data());
    }
    if (wants(self, 1)) {
      gemm(true, false, in, out, n, self.parents[0]->value.data(), g.data(), self.parents[1]->grad_buffer().data());
    }
    if (has_bias && wants(self, 2)) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t o = 0; o < out; ++o) gb[o] += g[r * out + o];
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> y(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(y), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      auto& gp = self.parents[p]->grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> y(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(y), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      auto& g0 = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g0.size(); ++i) g0[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g1 = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g1.size(); ++i) g1[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> y(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(y), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (wants(self, 0)) {
      auto& g0 = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g0.size(); ++i) g0[i] += self.grad[i] * bv[i];
    }
    if (wants(self, 1)) {
      auto& g1 = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g1.size(); ++i) g1[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  require_defined("scale", x);
  std::vector<double> y(x.data().begin(), x.data().end());
  for (auto& v : y) v *= factor;
  return make_result(x.shape(), std::move(y), {x}, [factor](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor mul_prefix(const Tensor& x, const Tensor& factors) {
  require_defined("mul_prefix", x);
  require_defined("mul_prefix", factors);
  const auto& xs = x.shape();
  const auto& fs = factors.shape();
  if (fs.size() > xs.size() || !std::equal(fs.begin(), fs.end(), xs.begin())) {
    shape_fail("mul_prefix", "factor shape " + shape_to_string(fs) + " is not a prefix of " + shape_to_string(xs));
  }
  const std::size_t blocks = factors.numel();
  const std::size_t inner = blocks == 0 ? 0 : x.numel() / blocks;
  std::vector<double> y(x.numel());
  const auto xv = x.data(), fv = factors.data();
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t i = 0; i < inner; ++i) y[b * inner + i] = xv[b * inner + i] * fv[b];
  }
  return make_result(xs, std::move(y), {x, factors}, [blocks, inner](Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& fv = self.parents[1]->value;
    const auto& g = self.grad;
    if (wants(self, 0)) {
      auto& gx = self.parents[0]->grad_buffer();
      for (std::size_t b = 0; b < blocks; ++b) {
        for (std::size_t i = 0; i < inner; ++i) gx[b * inner + i] += g[b * inner + i] * fv[b];
      }
    }
    if (wants(self, 1)) {
      auto& gf = self.parents[1]->grad_buffer();
      for (std::size_t b = 0; b < blocks; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < inner; ++i) s += g[b * inner + i] * xv[b * inner + i];
        gf[b] += s;
      }
    }
  });
}

Tensor scale_rows(const Tensor& x, std::span<const double> factors) {
  require_defined("scale_rows", x);
  if (x.rank() == 0 || x.extent(0) != factors.size()) {
    shape_fail("scale_rows", "need one factor per row of " + shape_to_string(x.shape()) + ", got " +
                                 std::to_string(factors.size()));
  }
  const std::size_t rows = factors.size();
  const std::size_t inner = rows == 0 ? 0 : x.numel() / rows;
  std::vector<double> f(factors.begin(), factors.end());
  std::vector<double> y(x.numel());
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < inner; ++i) y[r * inner + i] = xv[r * inner + i] * f[r];
  }
  return make_result(x.shape(), std::move(y), {x}, [f = std::move(f), inner](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < f.size(); ++r) {
      for (std::size_t i = 0; i < inner; ++i) g[r * inner + i] += self.grad[r * inner + i] * f[r];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  for (const auto& p : parts) require_defined("concat", p);
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) shape_fail("concat", "axis " + std::to_string(axis) + " out of range for " + shape_to_string(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) {
      shape_fail("concat", "incompatible extents " + shape_to_string(s0) + " and " + shape_to_string(s) +
                               " on axis " + std::to_string(axis));
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const AxisSplit sp = split_at(out_shape, axis);
  std::vector<double> y(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].data();
    const std::size_t block = extents[p] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.data() + o * block, block, y.data() + o * sp.extent * sp.inner + offset * sp.inner);
    }
    offset += extents[p];
  }
  return make_result(out_shape, std::move(y), parts, [extents, sp](Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < extents.size(); ++p) {
      const std::size_t block = extents[p] * sp.inner;
      if (wants(self, p)) {
        auto& gp = self.parents[p]->grad_buffer();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* src = self.grad.data() + o * sp.extent * sp.inner + offset * sp.inner;
          double* dst = gp.data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      offset += extents[p];
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined("slice", x);
  const Shape& s = x.shape();
  if (axis >= s.size() || start + length > s[axis]) {
    shape_fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") on axis " +
                            std::to_string(axis) + " exceeds shape " + shape_to_string(s));
  }
  const AxisSplit sp = split_at(s, axis);
  Shape out_shape = s;
  out_shape[axis] = length;
  std::vector<double> y(shape_numel(out_shape));
  const auto xv = x.data();
  const std::size_t block = length * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.data() + o * sp.extent * sp.inner + start * sp.inner, block, y.data() + o * block);
  }
  return make_result(out_shape, std::move(y), {x}, [sp, start, block](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      double* dst = g.data() + o * sp.extent * sp.inner + start * sp.inner;
      const double* src = self.grad.data() + o * block;
      for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined("reshape", x);
  if (shape_numel(shape) != x.numel()) {
    shape_fail("reshape", "cannot reshape " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
  }
  std::vector<double> y(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(y), {x}, [](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sqrt(const Tensor& x) {
  require_defined("sqrt", x);
  std::vector<double> y(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::sqrt(xv[i]);
  return make_result(x.shape(), std::move(y), {x}, [](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double r = self.value[i];
      if (r > 0.0) g[i] += self.grad[i] * 0.5 / r;
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  require_defined("sigmoid", x);
  std::vector<double> y(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  return make_result(x.shape(), std::move(y), {x}, [](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = self.value[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Tensor silu(const Tensor& x) {
  require_defined("silu", x);
  std::vector<double> y(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] / (1.0 + std::exp(-xv[i]));
  return make_result(x.shape(), std::move(y), {x}, [](Node& self) {
    if (!wants(self, 0)) return;
    const auto& xv = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      g[i] += self.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

Tensor sum(const Tensor& x, std::size_t axis) {
  require_defined("sum", x);
  const Shape& s = x.shape();
  if (axis >= s.size()) shape_fail("sum", "axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  const AxisSplit sp = split_at(s, axis);
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  std::vector<double> y(sp.outer * sp.inner, 0.0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t e = 0; e < sp.extent; ++e) {
      const double* src = xv.data() + (o * sp.extent + e) * sp.inner;
      double* dst = y.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  return make_result(out_shape, std::move(y), {x}, [sp](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t e = 0; e < sp.extent; ++e) {
        double* dst = g.data() + (o * sp.extent + e) * sp.inner;
        const double* src = self.grad.data() + o * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor sum_all(const Tensor& x) {
  require_defined("sum_all", x);
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {x}, [](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = self.parents[0]->grad_buffer();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined("mean", x);
  if (x.numel() == 0) shape_fail("mean", "mean of an empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

namespace {

std::size_t trailing_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
  return n;
}

void check_index(const char* op, const Index& index, std::size_t bound) {
  for (std::size_t e = 0; e < index.size(); ++e) {
    if (index[e] >= bound) {
      throw IndexError("diffgraph", op, "index[" + std::to_string(e) + "] = " + std::to_string(index[e]) +
                                            " is out of range for extent " + std::to_string(bound));
    }
  }
}

}  // namespace

Tensor scatter_sum(const Tensor& values, const Index& index, std::size_t n_targets) {
  require_defined("scatter_sum", values);
  if (values.rank() == 0 || values.extent(0) != index.size()) {
    shape_fail("scatter_sum", "values " + shape_to_string(values.shape()) + " need one index per row, got " +
                                  std::to_string(index.size()));
  }
  check_index("scatter_sum", index, n_targets);
  Shape out_shape = values.shape();
  out_shape[0] = n_targets;
  const std::size_t inner = trailing_numel(values.shape());
  std::vector<double> y(shape_numel(out_shape), 0.0);
  const auto vv = values.data();
  for (std::size_t e = 0; e < index.size(); ++e) {
    const double* src = vv.data() + e * inner;
    double* dst = y.data() + index[e] * inner;
    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
  }
  return make_result(out_shape, std::move(y), {values}, [index, inner](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t e = 0; e < index.size(); ++e) {
      const double* src = self.grad.data() + index[e] * inner;
      double* dst = g.data() + e * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor gather(const Tensor& values, const Index& index) {
  require_defined("gather", values);
  if (values.rank() == 0) shape_fail("gather", "cannot gather from a scalar");
  check_index("gather", index, values.extent(0));
  Shape out_shape = values.shape();
  out_shape[0] = index.size();
  const std::size_t inner = trailing_numel(values.shape());
  std::vector<double> y(index.size() * inner);
  const auto vv = values.data();
  for (std::size_t e = 0; e < index.size(); ++e) std::copy_n(vv.data() + index[e] * inner, inner, y.data() + e * inner);
  return make_result(out_shape, std::move(y), {values}, [index, inner](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t e = 0; e < index.size(); ++e) {
      const double* src = self.grad.data() + e * inner;
      double* dst = g.data() + index[e] * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor mse(const Tensor& prediction, const Tensor& target) {
  require_same_shape("mse", prediction, target);
  const std::size_t n = prediction.numel();
  if (n == 0) shape_fail("mse", "empty input");
  const auto pv = prediction.data(), tv = target.data();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pv[i] - tv[i];
    s += d * d;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return make_result({}, {s * inv_n}, {prediction, target}, [inv_n](Node& self) {
    const auto& pv = self.parents[0]->value;
    const auto& tv = self.parents[1]->value;
    const double g0 = self.grad[0] * 2.0 * inv_n;
    if (wants(self, 0)) {
      auto& gp = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g0 * (pv[i] - tv[i]);
    }
    if (wants(self, 1)) {
      auto& gt = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= g0 * (pv[i] - tv[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Multivector ops

namespace {
constexpr std::size_t kB = clifford::kBladeCount;
}

Tensor mv_linear(const Tensor& v, const Tensor& weight) {
  require_mv("mv_linear", v);
  require_rank("mv_linear", weight, 3);
  const std::size_t rows = v.extent(0), c_in = v.extent(1);
  if (weight.extent(0) != clifford::kGradeCount || weight.extent(2) != c_in) {
    shape_fail("mv_linear", "weight " + shape_to_string(weight.shape()) + " incompatible with input channels " +
                                std::to_string(c_in));
  }
  const std::size_t c_out = weight.extent(1);
  // Slot-major packing turns each grade into one matrix product.
  const std::vector<double> vp = pack_slots(v.data(), rows, c_in);
  std::vector<double> yp(kB * rows * c_out, 0.0);
  for (const auto& [first, count, grade] : kGradeBlocks) {
    gemm(false, true, count * rows, c_out, c_in, vp.data() + first * rows * c_in,
         weight.data().data() + grade * c_out * c_in, yp.data() + first * rows * c_out);
  }
  std::vector<double> y(rows * c_out * kB, 0.0);
  unpack_slots_add(yp, rows, c_out, y);
  return make_result({rows, c_out, kB}, std::move(y), {v, weight}, [rows, c_in, c_out](Node& self) {
    const std::vector<double> gp = pack_slots(self.grad, rows, c_out);
    const auto& wv = self.parents[1]->value;
    if (wants(self, 0)) {
      std::vector<double> gvp(kB * rows * c_in, 0.0);
      for (const auto& [first, count, grade] : kGradeBlocks) {
        gemm(false, false, count * rows, c_in, c_out, gp.data() + first * rows * c_out,
             wv.data() + grade * c_out * c_in, gvp.data() + first * rows * c_in);
      }
      unpack_slots_add(gvp, rows, c_in, self.parents[0]->grad_buffer());
    }
    if (wants(self, 1)) {
      const std::vector<double> vp = pack_slots(self.parents[0]->value, rows, c_in);
      auto& gw = self.parents[1]->grad_buffer();
      for (const auto& [first, count, grade] : kGradeBlocks) {
        gemm(true, false, c_out, c_in, count * rows, gp.data() + first * rows * c_out, vp.data() + first * rows * c_in,
             gw.data() + grade * c_out * c_in);
      }
    }
  });
}

Tensor mv_geometric_product(const Tensor& a, const Tensor& b) {
  require_mv("mv_geometric_product", a);
  require_same_shape("mv_geometric_product", a, b);
  const std::size_t count = a.numel() / kB;
  const auto av = a.data(), bv = b.data();
  std::vector<double> y(a.numel(), 0.0);
  const auto& table = clifford::kCayley;
  for (std::size_t m = 0; m < count; ++m) {
    const double* am = av.data() + m * kB;
    const double* bm = bv.data() + m * kB;
    double* ym = y.data() + m * kB;
    for (std::size_t i = 0; i < kB; ++i) {
      for (std::size_t j = 0; j < kB; ++j) ym[table[i][j].slot] += table[i][j].sign * am[i] * bm[j];
    }
  }
  return make_result(a.shape(), std::move(y), {a, b}, [count](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const auto& table = clifford::kCayley;
    const bool ga_on = wants(self, 0), gb_on = wants(self, 1);
    double* ga = ga_on ? self.parents[0]->grad_buffer().data() : nullptr;
    double* gb = gb_on ? self.parents[1]->grad_buffer().data() : nullptr;
    for (std::size_t m = 0; m < count; ++m) {
      const double* am = av.data() + m * kB;
      const double* bm = bv.data() + m * kB;
      const double* gm = self.grad.data() + m * kB;
      for (std::size_t i = 0; i < kB; ++i) {
        for (std::size_t j = 0; j < kB; ++j) {
          const double sg = table[i][j].sign * gm[table[i][j].slot];
          if (ga_on) ga[m * kB + i] += sg * bm[j];
          if (gb_on) gb[m * kB + j] += sg * am[i];
        }
      }
    }
  });
}

Tensor mv_quadratic(const Tensor& v, bool per_grade) {
  require_mv("mv_quadratic", v);
  const std::size_t rows = v.extent(0), c = v.extent(1);
  const std::size_t width = per_grade ? clifford::kGradeCount : 1;
  const auto vv = v.data();
  std::vector<double> y(rows * c * width, 0.0);
  for (std::size_t m = 0; m < rows * c; ++m) {
    for (std::size_t s = 0; s < kB; ++s) {
      const double x = vv[m * kB + s];
      y[m * width + (per_grade ? clifford::kGradeOfSlot[s] : 0)] += x * x;
    }
  }
  Shape out_shape = per_grade ? Shape{rows, c, width} : Shape{rows, c};
  return make_result(out_shape, std::move(y), {v}, [width, per_grade](Node& self) {
    if (!wants(self, 0)) return;
    const auto& vv = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    const std::size_t count = vv.size() / kB;
    for (std::size_t m = 0; m < count; ++m) {
      for (std::size_t s = 0; s < kB; ++s) {
        const double up = self.grad[m * width + (per_grade ? clifford::kGradeOfSlot[s] : 0)];
        g[m * kB + s] += 2.0 * vv[m * kB + s] * up;
      }
    }
  });
}

Tensor mv_scale_grades(const Tensor& v, const Tensor& grade_factors) {
  require_mv("mv_scale_grades", v);
  require_rank("mv_scale_grades", grade_factors, 3);
  if (grade_factors.extent(0) != v.extent(0) || grade_factors.extent(1) != v.extent(1) ||
      grade_factors.extent(2) != clifford::kGradeCount) {
    shape_fail("mv_scale_grades", "factors " + shape_to_string(grade_factors.shape()) + " incompatible with " +
                                      shape_to_string(v.shape()));
  }
  const std::size_t count = v.numel() / kB;
  const auto vv = v.data(), fv = grade_factors.data();
  std::vector<double> y(v.numel());
  for (std::size_t m = 0; m < count; ++m) {
    for (std::size_t s = 0; s < kB; ++s) y[m * kB + s] = vv[m * kB + s] * fv[m * 4 + clifford::kGradeOfSlot[s]];
  }
  return make_result(v.shape(), std::move(y), {v, grade_factors}, [count](Node& self) {
    const auto& vv = self.parents[0]->value;
    const auto& fv = self.parents[1]->value;
    const auto& g = self.grad;
    if (wants(self, 0)) {
      auto& gv = self.parents[0]->grad_buffer();
      for (std::size_t m = 0; m < count; ++m) {
        for (std::size_t s = 0; s < kB; ++s) gv[m * kB + s] += g[m * kB + s] * fv[m * 4 + clifford::kGradeOfSlot[s]];
      }
    }
    if (wants(self, 1)) {
      auto& gf = self.parents[1]->grad_buffer();
      for (std::size_t m = 0; m < count; ++m) {
        for (std::size_t s = 0; s < kB; ++s) gf[m * 4 + clifford::kGradeOfSlot[s]] += g[m * kB + s] * vv[m * kB + s];
      }
    }
  });
}

Tensor mv_rejection(const Tensor& q, const Tensor& k, double eps) {
  require_mv("mv_rejection", q);
  require_same_shape("mv_rejection", q, k);
  const std::size_t count = q.numel() / kB;
  const auto qv = q.data(), kv = k.data();
  std::vector<double> y(qv.begin(), qv.end());
  for (std::size_t m = 0; m < count; ++m) {
    const double* qm = qv.data() + m * kB;
    const double* km = kv.data() + m * kB;
    double qk = 0.0, kk = 0.0;
    for (std::size_t s = 0; s < kB; ++s) {
      qk += qm[s] * km[s];
      kk += km[s] * km[s];
    }
    if (qk >= 0.0) continue;
    const double alpha = qk / (kk + eps);
    for (std::size_t s = 0; s < kB; ++s) y[m * kB + s] = qm[s] - alpha * km[s];
  }
  return make_result(q.shape(), std::move(y), {q, k}, [count, eps](Node& self) {
    const auto& qv = self.parents[0]->value;
    const auto& kv = self.parents[1]->value;
    const bool gq_on = wants(self, 0), gk_on = wants(self, 1);
    double* gq = gq_on ? self.parents[0]->grad_buffer().data() : nullptr;
    double* gk = gk_on ? self.parents[1]->grad_buffer().data() : nullptr;
    for (std::size_t m = 0; m < count; ++m) {
      const double* qm = qv.data() + m * kB;
      const double* km = kv.data() + m * kB;
      const double* gm = self.grad.data() + m * kB;
      double qk = 0.0, kk = 0.0, gkd = 0.0;
      for (std::size_t s = 0; s < kB; ++s) {
        qk += qm[s] * km[s];
        kk += km[s] * km[s];
        gkd += gm[s] * km[s];
      }
      if (qk >= 0.0) {
        if (gq_on) {
          for (std::size_t s = 0; s < kB; ++s) gq[m * kB + s] += gm[s];
        }
        continue;
      }
      // out = q - alpha k with alpha = <q,k> / (<k,k> + eps).
      const double denom = kk + eps;
      const double alpha = qk / denom;
      if (gq_on) {
        for (std::size_t s = 0; s < kB; ++s) gq[m * kB + s] += gm[s] - gkd / denom * km[s];
      }
      if (gk_on) {
        for (std::size_t s = 0; s < kB; ++s) {
          gk[m * kB + s] += -alpha * gm[s] - gkd * (qm[s] / denom - 2.0 * qk * km[s] / (denom * denom));
        }
      }
    }
  });
}

Tensor mv_set_scalar(const Tensor& v, const Tensor& scalars) {
  require_mv("mv_set_scalar", v);
  require_rank("mv_set_scalar", scalars, 2);
  if (scalars.extent(0) != v.extent(0) || scalars.extent(1) != v.extent(1)) {
    shape_fail("mv_set_scalar", "scalars " + shape_to_string(scalars.shape()) + " incompatible with " +
                                    shape_to_string(v.shape()));
  }
  const std::size_t count = v.numel() / kB;
  std::vector<double> y(v.data().begin(), v.data().end());
  const auto sv = scalars.data();
  for (std::size_t m = 0; m < count; ++m) y[m * kB] = sv[m];
  return make_result(v.shape(), std::move(y), {v, scalars}, [count](Node& self) {
    if (wants(self, 0)) {
      auto& gv = self.parents[0]->grad_buffer();
      for (std::size_t m = 0; m < count; ++m) {
        for (std::size_t s = 1; s < kB; ++s) gv[m * kB + s] += self.grad[m * kB + s];
      }
    }
    if (wants(self, 1)) {
      auto& gs = self.parents[1]->grad_buffer();
      for (std::size_t m = 0; m < count; ++m) gs[m] += self.grad[m * kB];
    }
  });
}

Tensor mv_scalar_part(const Tensor& v) {
  require_mv("mv_scalar_part", v);
  return reshape(slice(v, 2, 0, 1), {v.extent(0), v.extent(1)});
}

Tensor mv_vector_part(const Tensor& v, std::size_t channel) {
  require_mv("mv_vector_part", v);
  if (channel >= v.extent(1)) {
    shape_fail("mv_vector_part", "channel " + std::to_string(channel) + " out of range for " +
                                     shape_to_string(v.shape()));
  }
  return reshape(slice(slice(v, 1, channel, 1), 2, 1, 3), {v.extent(0), 3});
}

}  // namespace mvgnn::diff
