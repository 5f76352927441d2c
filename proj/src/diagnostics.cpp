#include "mvgnn/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "mvgnn/ops.hpp"

namespace mvgnn::diagnostics {

namespace {

using diff::Index;
using diff::Shape;
using diff::Tensor;

using Inputs = std::vector<Tensor>;
using MakeFn = std::function<Inputs(std::mt19937_64&)>;
using OpFn = std::function<Tensor(const Inputs&)>;

Tensor normal_tensor(std::mt19937_64& rng, Shape shape, bool requires_grad) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> data(diff::shape_numel(shape));
  for (auto& x : data) x = n(rng);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Inputs normals(std::mt19937_64& rng, std::initializer_list<Shape> shapes) {
  Inputs out;
  for (const auto& s : shapes) out.push_back(normal_tensor(rng, s, true));
  return out;
}

MakeFn shapes(std::initializer_list<Shape> list) {
  std::vector<Shape> copy(list);
  return [copy](std::mt19937_64& rng) {
    Inputs out;
    for (const auto& s : copy) out.push_back(normal_tensor(rng, s, true));
    return out;
  };
}

struct Case {
  const char* name;
  MakeFn make;
  OpFn op;
};

std::vector<Case> cases() {
  using namespace diff;
  const Index edge_index = {0, 2, 1, 1, 0};
  return {
      {"linear", shapes({{5, 4}, {4, 3}, {3}}), [](const Inputs& t) { return linear(t[0], t[1], t[2]); }},
      {"add", shapes({{3, 4}, {3, 4}}), [](const Inputs& t) { return add(t[0], t[1]); }},
      {"sub", shapes({{3, 4}, {3, 4}}), [](const Inputs& t) { return sub(t[0], t[1]); }},
      {"mul", shapes({{3, 4}, {3, 4}}), [](const Inputs& t) { return mul(t[0], t[1]); }},
      {"scale", shapes({{3, 4}}), [](const Inputs& t) { return scale(t[0], -1.7); }},
      {"mul_prefix", shapes({{3, 2, 8}, {3, 2}}), [](const Inputs& t) { return mul_prefix(t[0], t[1]); }},
      {"scale_rows", shapes({{3, 4}}),
       [](const Inputs& t) { return scale_rows(t[0], std::vector<double>{0.5, -2.0, 0.0}); }},
      {"concat", shapes({{2, 3, 8}, {2, 1, 8}}), [](const Inputs& t) { return concat({t[0], t[1]}, 1); }},
      {"slice", shapes({{3, 5, 2}}), [](const Inputs& t) { return slice(t[0], 1, 1, 3); }},
      {"reshape", shapes({{3, 4}}), [](const Inputs& t) { return reshape(t[0], {2, 6}); }},
      {"sqrt",
       [](std::mt19937_64& r) {
         auto t = normals(r, {{4, 3}});
         for (auto& x : t[0].mutable_data()) x = 0.5 + x * x;
         return t;
       },
       [](const Inputs& t) { return diff::sqrt(t[0]); }},
      {"sigmoid", shapes({{4, 3}}), [](const Inputs& t) { return sigmoid(t[0]); }},
      {"silu", shapes({{4, 3}}), [](const Inputs& t) { return silu(t[0]); }},
      {"sum", shapes({{3, 4, 2}}), [](const Inputs& t) { return sum(t[0], 1); }},
      {"sum_all", shapes({{3, 4}}), [](const Inputs& t) { return sum_all(t[0]); }},
      {"mean", shapes({{3, 4}}), [](const Inputs& t) { return mean(t[0]); }},
      {"scatter_sum", shapes({{5, 2, 8}}), [edge_index](const Inputs& t) { return scatter_sum(t[0], edge_index, 4); }},
      {"gather", shapes({{3, 2, 8}}), [edge_index](const Inputs& t) { return gather(t[0], edge_index); }},
      {"mse", shapes({{4, 3}, {4, 3}}), [](const Inputs& t) { return mse(t[0], t[1]); }},
      {"mv_linear", shapes({{3, 2, 8}, {4, 3, 2}}), [](const Inputs& t) { return mv_linear(t[0], t[1]); }},
      {"mv_geometric_product", shapes({{3, 2, 8}, {3, 2, 8}}),
       [](const Inputs& t) { return mv_geometric_product(t[0], t[1]); }},
      {"mv_quadratic", shapes({{3, 2, 8}}), [](const Inputs& t) { return mv_quadratic(t[0], false); }},
      {"mv_quadratic_per_grade", shapes({{3, 2, 8}}), [](const Inputs& t) { return mv_quadratic(t[0], true); }},
      {"mv_scale_grades", shapes({{3, 2, 8}, {3, 2, 4}}), [](const Inputs& t) { return mv_scale_grades(t[0], t[1]); }},
      {"mv_rejection",
       [](std::mt19937_64& r) {
         // Keep every channel away from the branch boundary b(q, k) = 0.
         for (;;) {
           auto t = normals(r, {{4, 3, 8}, {4, 3, 8}});
           bool clear = true;
           for (std::size_t m = 0; m < 12 && clear; ++m) {
             double qk = 0.0;
             for (std::size_t s = 0; s < 8; ++s) qk += t[0].data()[m * 8 + s] * t[1].data()[m * 8 + s];
             clear = std::abs(qk) > 1e-2;
           }
           if (clear) return t;
         }
       },
       [](const Inputs& t) { return mv_rejection(t[0], t[1], 1e-8); }},
      {"mv_set_scalar", shapes({{3, 2, 8}, {3, 2}}), [](const Inputs& t) { return mv_set_scalar(t[0], t[1]); }},
      {"mv_scalar_part", shapes({{3, 2, 8}}), [](const Inputs& t) { return mv_scalar_part(t[0]); }},
      {"mv_vector_part", shapes({{3, 2, 8}}), [](const Inputs& t) { return mv_vector_part(t[0], 1); }},
  };
}

}  // namespace

std::vector<OpCheck> op_gradchecks(std::size_t probes, std::uint64_t seed) {
  std::vector<OpCheck> out;
  for (const auto& c : cases()) {
    std::mt19937_64 rng(seed++);
    OpCheck check{c.name, probes, 0.0};
    for (std::size_t p = 0; p < probes; ++p) {
      const auto inputs = c.make(rng);
      const Tensor weights = normal_tensor(rng, c.op(inputs).shape(), false);
      const auto res =
          diff::gradcheck([&] { return diff::sum_all(diff::mul(c.op(inputs), weights)); }, inputs);
      check.max_relative_error = std::max(check.max_relative_error, res.max_relative_error);
    }
    out.push_back(std::move(check));
  }
  return out;
}

diff::GradcheckResult model_gradcheck(const models::ModelConfig& cfg, std::uint64_t seed,
                                      std::size_t max_coordinates) {
  auto model_cfg = cfg;
  model_cfg.task = data::Task::nbody;
  data::SimConfig sim;
  sim.n = 3;
  sim.steps = 20;
  sim.seed = seed;
  const auto graph = models::featurize(data::simulate(sim, 0), data::Task::nbody);

  diff::ParameterStore store;
  const models::Model model(model_cfg, store, seed);
  std::vector<Tensor> leaves;
  for (const auto& [name, entry] : store.entries()) leaves.push_back(entry.tensor);
  diff::GradcheckOptions opts;
  opts.max_coordinates = max_coordinates;
  opts.seed = seed;
  return diff::gradcheck([&] { return diff::mse(model.forward(graph).positions, graph.targets); }, leaves, opts);
}

}  // namespace mvgnn::diagnostics
