#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mvgnn/error.hpp"
#include "mvgnn/diagnostics.hpp"
#include "mvgnn/models.hpp"
#include "test_util.hpp"

using namespace mvgnn;
using namespace mvgnn::models;
using diff::Tensor;
using mvgnn::testing::max_abs_diff;
using mvgnn::testing::rotate_mv;
using mvgnn::testing::rotate_rows;

namespace {

constexpr Architecture kAll[] = {Architecture::clifford_egnn, Architecture::mvn_gnn, Architecture::mvp_gnn,
                                 Architecture::egnn};

data::Sample nbody_sample(std::uint64_t seed, std::size_t n = 5) {
  data::SimConfig cfg;
  cfg.n = n;
  cfg.steps = 20;
  cfg.seed = 3;
  return data::simulate(cfg, seed);
}

data::Sample chain_sample(std::uint64_t seed, std::size_t len = 24) {
  data::ChainConfig cfg;
  cfg.chain_len = len;
  cfg.seed = 4;
  return data::make_chain_sample(cfg, seed);
}

GraphBatch two_graphs(Task task) {
  const GraphBatch a = task == Task::nbody ? featurize(nbody_sample(1), task) : featurize(chain_sample(1), task);
  const GraphBatch b = task == Task::nbody ? featurize(nbody_sample(2), task) : featurize(chain_sample(2), task);
  return collate({&a, &b});
}

ModelConfig config(Architecture arch, Task task) {
  ModelConfig cfg;
  cfg.architecture = arch;
  cfg.task = task;
  return cfg;
}

void zero_all(diff::ParameterStore& store) {
  for (const auto& [name, e] : store.entries()) {
    Tensor t = e.tensor;
    for (auto& x : t.mutable_data()) x = 0.0;
  }
}

// Applies `perm` (new index -> old index) to every per-node array of a sample.
data::Sample permute(const data::Sample& s, const std::vector<std::size_t>& perm) {
  data::Sample out = s;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out.attributes[i] = s.attributes[perm[i]];
    for (std::size_t a = 0; a < 3; ++a) {
      out.positions[i * 3 + a] = s.positions[perm[i] * 3 + a];
      out.velocities[i * 3 + a] = s.velocities[perm[i] * 3 + a];
      out.targets[i * 3 + a] = s.targets[perm[i] * 3 + a];
    }
  }
  return out;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t w = x.numel() / x.extent(0);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t k = 0; k < w; ++k) out[i * w + k] = x.data()[perm[i] * w + k];
  }
  return Tensor(x.shape(), std::move(out));
}

}  // namespace

TEST_CASE("nbody featurization") {
  const auto s = nbody_sample(7);
  const GraphBatch g = featurize(s, Task::nbody);
  CHECK(g.num_edges() == 20);
  CHECK(g.num_nodes() == 5);
  for (std::size_t e = 0; e < g.num_edges(); ++e) CHECK(g.receivers[e] != g.senders[e]);
  for (std::size_t d : g.degree) CHECK(d == 4);
  for (std::size_t a = 0; a < 3; ++a) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 5; ++i) mean += g.positions.data()[i * 3 + a];
    CHECK(std::abs(mean / 5.0) <= 1e-12);
  }
  CHECK(max_abs_diff(diff::add(g.positions, g.center), g.initial) <= 1e-14);
  CHECK(g.h.shape() == diff::Shape{5, 1});
  CHECK(g.h.data()[2] == s.attributes[2]);
  validate(g);
}

TEST_CASE("k nearest neighbors") {
  const auto s = chain_sample(3, 30);
  const GraphBatch g = featurize(s, Task::denoise);
  CHECK(g.num_edges() == 30 * kNeighbors);
  for (std::size_t d : g.degree) CHECK(d == kNeighbors);
  CHECK(g.h.shape() == diff::Shape{30, 3});

  // Oracle: full sort of distances per node.
  for (std::size_t i = 0; i < 30; ++i) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t j = 0; j < 30; ++j) {
      if (j == i) continue;
      double d = 0.0;
      for (std::size_t a = 0; a < 3; ++a) d += std::pow(s.positions[i * 3 + a] - s.positions[j * 3 + a], 2);
      all.emplace_back(d, j);
    }
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> expect, got;
    for (std::size_t r = 0; r < kNeighbors; ++r) expect.push_back(all[r].second);
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
      if (g.receivers[e] == i) got.push_back(g.senders[e]);
    }
    std::sort(expect.begin(), expect.end());
    std::sort(got.begin(), got.end());
    CHECK(got == expect);
  }

  data::Sample small = s;
  small.positions.resize(16 * 3);
  small.velocities.resize(16 * 3);
  small.targets.resize(16 * 3);
  small.attributes.resize(16);
  CHECK_THROWS_AS(featurize(small, Task::denoise), GraphTooSmallError);
}

TEST_CASE("collate and validation") {
  const GraphBatch b = two_graphs(Task::nbody);
  CHECK(b.num_graphs == 2);
  CHECK(b.num_nodes() == 10);
  CHECK(b.num_edges() == 40);
  for (std::size_t e = 0; e < b.num_edges(); ++e) CHECK(b.graph_id[b.receivers[e]] == b.graph_id[b.senders[e]]);
  validate(b);

  GraphBatch bad = b;
  bad.degree[3] = 0;
  CHECK_THROWS_AS(validate(bad), ContractError);
  bad = b;
  bad.senders[0] = 99;
  CHECK_THROWS_AS(validate(bad), IndexError);
  bad = b;
  bad.senders[0] = 7;
  CHECK_THROWS_AS(validate(bad), ContractError);

  const GraphBatch d = featurize(chain_sample(1), Task::denoise);
  CHECK_THROWS_AS(collate({&b, &d}), ContractError);
  CHECK_THROWS_AS(parse_architecture("gvp"), ContractError);
  CHECK(parse_architecture("mvp-gnn") == Architecture::mvp_gnn);
}

TEST_CASE("full-model O(3) equivariance and invariance") {
  for (Task task : {Task::nbody, Task::denoise}) {
    const GraphBatch batch = two_graphs(task);
    for (Architecture arch : kAll) {
      CAPTURE(architecture_name(arch));
      CAPTURE(data::task_name(task));
      diff::ParameterStore store;
      const Model model(config(arch, task), store, 11);
      const auto base = model.forward(batch);
      double pos_err = 0.0, h_err = 0.0, v_err = 0.0;
      const int trials = task == Task::nbody ? 40 : 6;
      for (int t = 0; t < trials; ++t) {
        const auto R = clifford::random_orthogonal(900 + t, t % 2 ? -1 : 1);
        const auto moved = model.forward(transform(batch, R));
        pos_err = std::max(pos_err, max_abs_diff(moved.positions, rotate_rows(R, base.positions)));
        h_err = std::max(h_err, max_abs_diff(moved.state.h, base.state.h));
        if (arch != Architecture::egnn) {
          v_err = std::max(v_err, max_abs_diff(moved.state.v, rotate_mv(R, base.state.v)));
        }
      }
      CHECK(pos_err <= 1e-8);
      CHECK(h_err <= 1e-9);
      CHECK(v_err <= 1e-8);
    }
  }
}

TEST_CASE("translation covariance") {
  const auto s = nbody_sample(5);
  data::Sample shifted = s;
  const double t[3] = {3.0, -1.5, 0.25};
  for (std::size_t i = 0; i < s.positions.size(); ++i) {
    shifted.positions[i] += t[i % 3];
    shifted.targets[i] += t[i % 3];
  }
  for (Architecture arch : kAll) {
    CAPTURE(architecture_name(arch));
    diff::ParameterStore store;
    const Model model(config(arch, Task::nbody), store, 12);
    const Tensor a = model.forward(featurize(s, Task::nbody)).positions;
    const Tensor b = model.forward(featurize(shifted, Task::nbody)).positions;
    double err = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) err = std::max(err, std::abs(b.data()[i] - a.data()[i] - t[i % 3]));
    CHECK(err <= 1e-10);
  }
}

TEST_CASE("permutation equivariance") {
  const std::vector<std::size_t> perm5{3, 0, 4, 1, 2};
  std::vector<std::size_t> perm24(24);
  std::iota(perm24.begin(), perm24.end(), 0);
  std::shuffle(perm24.begin(), perm24.end(), std::mt19937_64(6));
  for (Task task : {Task::nbody, Task::denoise}) {
    const auto s = task == Task::nbody ? nbody_sample(9) : chain_sample(9);
    const auto& perm = task == Task::nbody ? perm5 : perm24;
    for (Architecture arch : kAll) {
      CAPTURE(architecture_name(arch));
      diff::ParameterStore store;
      const Model model(config(arch, task), store, 13);
      const auto a = model.forward(featurize(s, task));
      const auto b = model.forward(featurize(permute(s, perm), task));
      CHECK(max_abs_diff(b.positions, permute_rows(a.positions, perm)) <= 1e-10);
      CHECK(max_abs_diff(b.state.h, permute_rows(a.state.h, perm)) <= 1e-10);
    }
  }
}

TEST_CASE("zero weights predict the initial positions") {
  const GraphBatch batch = two_graphs(Task::nbody);
  for (Architecture arch : kAll) {
    CAPTURE(architecture_name(arch));
    diff::ParameterStore store;
    const Model model(config(arch, Task::nbody), store, 14);
    zero_all(store);
    CHECK(max_abs_diff(model.forward(batch).positions, batch.initial) <= 1e-14);
  }
}

TEST_CASE("EGNN layer with zero position network keeps positions") {
  const GraphBatch batch = two_graphs(Task::nbody);
  std::mt19937_64 rng(15);
  diff::ParameterStore store;
  const EGNNLayer layer(store, "l", config(Architecture::egnn, Task::nbody), rng);
  zero_all(store);
  for (const auto& [name, e] : store.entries()) {
    if (name.rfind("l.phi_x", 0) == 0) continue;
    Tensor t = e.tensor;
    std::normal_distribution<double> n;
    for (auto& x : t.mutable_data()) x = n(rng);
  }
  NodeState state{mvgnn::testing::random_tensor(rng, {10, 64}), {}, batch.positions};
  const NodeState out = layer(state, batch);
  CHECK(max_abs_diff(out.x, batch.positions) == 0.0);
}

TEST_CASE("single node without edges passes its multivectors through") {
  data::Sample s = nbody_sample(1, 1);
  GraphBatch g = featurize(s, Task::nbody);
  CHECK(g.num_edges() == 0);
  std::mt19937_64 rng(16);
  for (Architecture arch : {Architecture::clifford_egnn, Architecture::mvn_gnn}) {
    diff::ParameterStore store;
    const auto cfg = config(arch, Task::nbody);
    std::shared_ptr<MessageLayer> layer;
    if (arch == Architecture::clifford_egnn) {
      layer = std::make_shared<CliffordEGNNLayer>(store, "l", cfg, rng);
    } else {
      layer = std::make_shared<MVNGNNLayer>(store, "l", cfg, rng);
    }
    const NodeState in{mvgnn::testing::random_tensor(rng, {1, 64}), mvgnn::testing::random_tensor(rng, {1, 16, 8}), {}};
    CHECK(max_abs_diff((*layer)(in, g).v, in.v) == 0.0);
  }
  // MVP still updates the node from its own features.
  diff::ParameterStore store;
  const MVPGNNLayer mvp(store, "l", config(Architecture::mvp_gnn, Task::nbody), rng);
  const NodeState in{mvgnn::testing::random_tensor(rng, {1, 64}), mvgnn::testing::random_tensor(rng, {1, 16, 8}), {}};
  CHECK(max_abs_diff(mvp(in, g).v, in.v) > 1e-3);
}

TEST_CASE("MVN layer with vanishing edge multivectors leaves v unchanged") {
  const GraphBatch batch = two_graphs(Task::nbody);
  std::mt19937_64 rng(17);
  diff::ParameterStore store;
  const MVNGNNLayer layer(store, "l", config(Architecture::mvn_gnn, Task::nbody), rng);
  for (auto& x : store.at("l.mvn_mlp.l2.weight").mutable_data()) x = 0.0;
  const NodeState in{mvgnn::testing::random_tensor(rng, {10, 64}), mvgnn::testing::random_tensor(rng, {10, 16, 8}), {}};
  CHECK(max_abs_diff(layer(in, batch).v, in.v) == 0.0);
}

TEST_CASE("doubling every edge scales the normalized aggregation by sqrt 2") {
  const GraphBatch batch = two_graphs(Task::nbody);
  GraphBatch doubled = batch;
  doubled.receivers.insert(doubled.receivers.end(), batch.receivers.begin(), batch.receivers.end());
  doubled.senders.insert(doubled.senders.end(), batch.senders.begin(), batch.senders.end());
  refresh_degrees(doubled);
  validate(doubled);
  for (std::size_t i = 0; i < batch.num_nodes(); ++i) CHECK(doubled.degree[i] == 2 * batch.degree[i]);

  std::mt19937_64 rng(18);
  const Tensor values = mvgnn::testing::random_tensor(rng, {batch.num_edges(), 6});
  const Tensor once = aggregate(values, batch);
  const Tensor twice = aggregate(diff::concat({values, values}, 0), doubled);
  CHECK(max_abs_diff(twice, diff::scale(once, std::sqrt(2.0))) <= 1e-12);

  // With the geometric-product term of psi_v switched off, psi_v is linear and
  // the layer's v increment scales by 2 / sqrt(2).
  diff::ParameterStore store;
  const CliffordEGNNLayer layer(store, "l", config(Architecture::clifford_egnn, Task::nbody), rng);
  for (auto& x : store.at("l.psi_v.a.weight").mutable_data()) x = 0.0;
  const NodeState in{mvgnn::testing::random_tensor(rng, {10, 64}), mvgnn::testing::random_tensor(rng, {10, 16, 8}), {}};
  const Tensor d1 = diff::sub(layer(in, batch).v, in.v);
  const Tensor d2 = diff::sub(layer(in, doubled).v, in.v);
  CHECK(max_abs_diff(d2, diff::scale(d1, std::sqrt(2.0))) <= 1e-12);
}

TEST_CASE("layer-level equivariance") {
  const GraphBatch batch = two_graphs(Task::nbody);
  std::mt19937_64 rng(19);
  for (Architecture arch : {Architecture::clifford_egnn, Architecture::mvn_gnn, Architecture::mvp_gnn}) {
    CAPTURE(architecture_name(arch));
    diff::ParameterStore store;
    const auto cfg = config(arch, Task::nbody);
    std::shared_ptr<MessageLayer> layer;
    if (arch == Architecture::clifford_egnn) layer = std::make_shared<CliffordEGNNLayer>(store, "l", cfg, rng);
    if (arch == Architecture::mvn_gnn) layer = std::make_shared<MVNGNNLayer>(store, "l", cfg, rng);
    if (arch == Architecture::mvp_gnn) layer = std::make_shared<MVPGNNLayer>(store, "l", cfg, rng);
    double v_err = 0.0, h_err = 0.0;
    for (int t = 0; t < 50; ++t) {
      const auto R = clifford::random_orthogonal(300 + t, t % 2 ? -1 : 1);
      const NodeState in{mvgnn::testing::random_tensor(rng, {10, 64}), mvgnn::testing::random_tensor(rng, {10, 16, 8}),
                         {}};
      const NodeState a = (*layer)(in, batch);
      const NodeState b = (*layer)(NodeState{in.h, rotate_mv(R, in.v), {}}, batch);
      v_err = std::max(v_err, max_abs_diff(b.v, rotate_mv(R, a.v)));
      h_err = std::max(h_err, max_abs_diff(b.h, a.h));
    }
    CHECK(v_err <= 1e-9);
    CHECK(h_err <= 1e-10);
  }
  diff::ParameterStore store;
  const EGNNLayer egnn(store, "l", config(Architecture::egnn, Task::nbody), rng);
  double x_err = 0.0, h_err = 0.0;
  for (int t = 0; t < 50; ++t) {
    const auto R = clifford::random_orthogonal(400 + t, t % 2 ? -1 : 1);
    const NodeState in{mvgnn::testing::random_tensor(rng, {10, 64}), {}, mvgnn::testing::random_tensor(rng, {10, 3})};
    const NodeState a = egnn(in, batch);
    const NodeState b = egnn(NodeState{in.h, {}, rotate_rows(R, in.x)}, batch);
    x_err = std::max(x_err, max_abs_diff(b.x, rotate_rows(R, a.x)));
    h_err = std::max(h_err, max_abs_diff(b.h, a.h));
  }
  CHECK(x_err <= 1e-9);
  CHECK(h_err <= 1e-10);
}

TEST_CASE("per-grade invariants keep equivariance") {
  const GraphBatch batch = two_graphs(Task::nbody);
  for (Architecture arch : {Architecture::clifford_egnn, Architecture::mvp_gnn}) {
    auto cfg = config(arch, Task::nbody);
    cfg.per_grade_invariants = true;
    diff::ParameterStore store;
    const Model model(cfg, store, 20);
    const auto base = model.forward(batch);
    const auto R = clifford::random_orthogonal(77, -1);
    const auto moved = model.forward(transform(batch, R));
    CHECK(max_abs_diff(moved.positions, rotate_rows(R, base.positions)) <= 1e-8);
    CHECK(max_abs_diff(moved.state.h, base.state.h) <= 1e-9);
  }
}

TEST_CASE("loss gradients of every architecture on a 3-node graph") {
  for (Architecture arch : kAll) {
    CAPTURE(architecture_name(arch));
    const auto res = diagnostics::model_gradcheck(config(arch, Task::nbody), 22);
    CHECK(res.coordinates_checked > 0);
    CHECK(res.global_relative_error <= 1e-5);
  }
}

TEST_CASE("model forward contracts") {
  diff::ParameterStore store;
  const Model model(config(Architecture::clifford_egnn, Task::nbody), store, 23);
  CHECK_THROWS_AS(model.forward(featurize(chain_sample(1), Task::denoise)), ContractError);
  ModelConfig bad;
  bad.layers = 0;
  diff::ParameterStore other;
  CHECK_THROWS_AS(Model(bad, other, 1), ContractError);

  // Same seed, same parameters.
  diff::ParameterStore a, b;
  const Model ma(config(Architecture::mvp_gnn, Task::nbody), a, 5), mb(config(Architecture::mvp_gnn, Task::nbody), b, 5);
  CHECK(diff::encode_checkpoint(a) == diff::encode_checkpoint(b));
}
