#include "mvgnn/models.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mvgnn/error.hpp"

namespace mvgnn::models {

using namespace mvgnn::diff;

namespace {

Tensor rows3(std::vector<double> data) {
  const std::size_t n = data.size() / 3;
  return Tensor({n, 3}, std::move(data));
}

Tensor transform_rows(const clifford::OrthogonalMap& R, const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i + 2 < out.size(); i += 3) {
    const auto y = R.apply({out[i], out[i + 1], out[i + 2]});
    std::copy(y.begin(), y.end(), out.begin() + static_cast<long>(i));
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor concat_rows(const std::vector<const GraphBatch*>& graphs, Tensor GraphBatch::*field) {
  std::vector<double> out;
  std::size_t width = 0, rows = 0;
  for (const auto* g : graphs) {
    const Tensor& t = g->*field;
    width = t.extent(1);
    rows += t.extent(0);
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return Tensor({rows, width}, std::move(out));
}

// Invariant edge features q(v_ij): (E, c) or (E, 4c) per grade.
Tensor edge_invariants(const Tensor& v_ij, bool per_grade) {
  const Tensor q = mv_quadratic(v_ij, per_grade);
  return per_grade ? reshape(q, {v_ij.extent(0), v_ij.extent(1) * clifford::kGradeCount}) : q;
}

// Shared tail of the Clifford-EGNN and MVN-GNN layers, given v_ij.
NodeState clifford_message_update(const NodeState& state, const GraphBatch& batch, const Tensor& v_ij,
                                  const layers::ScalarMLP& phi_e, const layers::ScalarMLP& phi_v,
                                  const layers::ScalarMLP& phi_h, const layers::GeometricProductLayer& psi_v,
                                  bool per_grade) {
  const std::size_t n = batch.num_nodes();
  const Tensor s_ij =
      concat({gather(state.h, batch.receivers), gather(state.h, batch.senders), edge_invariants(v_ij, per_grade)}, 1);
  const Tensor m_ij = phi_e(s_ij);
  const Tensor m_i = scatter_sum(m_ij, batch.receivers, n);
  const Tensor gated = mul_prefix(v_ij, phi_v(m_ij));
  const Tensor update = scale_rows(psi_v(scatter_sum(gated, batch.receivers, n)), batch.inv_sqrt_degree);
  return {phi_h(concat({state.h, m_i}, 1)), add(state.v, update), {}};
}

}  // namespace

void refresh_degrees(GraphBatch& batch) {
  const std::size_t n = batch.num_nodes();
  batch.degree.assign(n, 0);
  for (std::size_t r : batch.receivers) {
    if (r >= n) throw IndexError("models", "refresh_degrees", "receiver " + std::to_string(r) + " out of range");
    ++batch.degree[r];
  }
  batch.inv_sqrt_degree.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (batch.degree[i] > 0) batch.inv_sqrt_degree[i] = 1.0 / std::sqrt(static_cast<double>(batch.degree[i]));
  }
}

void validate(const GraphBatch& batch) {
  const std::size_t n = batch.num_nodes();
  auto fail = [](const std::string& detail) { throw ContractError("models", "validate", detail); };
  if (batch.senders.size() != batch.receivers.size()) fail("sender and receiver lists differ in length");
  if (batch.degree.size() != n || batch.inv_sqrt_degree.size() != n) fail("degree arrays do not match node count");
  for (const Tensor* t : {&batch.positions, &batch.velocities, &batch.center, &batch.initial, &batch.targets}) {
    if (t->shape() != Shape{n, 3}) fail("geometric field has shape " + shape_to_string(t->shape()));
  }
  if (batch.h.rank() != 2 || batch.h.extent(0) != n) fail("h has shape " + shape_to_string(batch.h.shape()));
  std::vector<std::size_t> counted(n, 0);
  for (std::size_t e = 0; e < batch.num_edges(); ++e) {
    const std::size_t i = batch.receivers[e], j = batch.senders[e];
    if (i >= n || j >= n) {
      throw IndexError("models", "validate", "edge " + std::to_string(e) + " references a node out of range");
    }
    if (batch.graph_id[i] != batch.graph_id[j]) fail("edge " + std::to_string(e) + " crosses graphs");
    ++counted[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (counted[i] != batch.degree[i]) {
      fail("node " + std::to_string(i) + " has degree " + std::to_string(batch.degree[i]) + " but receives " +
           std::to_string(counted[i]) + " edges");
    }
    const double expect = counted[i] ? 1.0 / std::sqrt(static_cast<double>(counted[i])) : 0.0;
    if (batch.inv_sqrt_degree[i] != expect) fail("node " + std::to_string(i) + " has a stale normalization");
  }
}

std::pair<Index, Index> knn_edges(std::span<const double> positions, std::size_t k) {
  const std::size_t n = positions.size() / 3;
  if (n < k + 1) {
    throw GraphTooSmallError("models", "knn_edges",
                             std::to_string(n) + " nodes cannot give " + std::to_string(k) + " neighbors each");
  }
  Index receivers, senders;
  receivers.reserve(n * k);
  senders.reserve(n * k);
  std::vector<std::pair<double, std::size_t>> order(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t m = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d = 0.0;
      for (std::size_t a = 0; a < 3; ++a) {
        const double diff = positions[i * 3 + a] - positions[j * 3 + a];
        d += diff * diff;
      }
      order[m++] = {d, j};
    }
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end());
    for (std::size_t r = 0; r < k; ++r) {
      receivers.push_back(i);
      senders.push_back(order[r].second);
    }
  }
  return {std::move(receivers), std::move(senders)};
}

GraphBatch featurize(const data::Sample& sample, Task task) {
  const std::size_t n = sample.nodes();
  if (sample.positions.size() != n * 3 || sample.velocities.size() != n * 3 || sample.targets.size() != n * 3) {
    throw ShapeError("models", "featurize", "sample arrays do not match " + std::to_string(n) + " nodes");
  }
  GraphBatch g;
  g.task = task;
  g.num_graphs = 1;
  g.graph_id.assign(n, 0);

  std::array<double, 3> mean{};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < 3; ++a) mean[a] += sample.positions[i * 3 + a];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  std::vector<double> centered(sample.positions), center(n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < 3; ++a) {
      centered[i * 3 + a] -= mean[a];
      center[i * 3 + a] = mean[a];
    }
  }
  g.positions = rows3(std::move(centered));
  g.center = rows3(std::move(center));
  g.initial = rows3(sample.positions);
  g.targets = rows3(sample.targets);

  if (task == Task::nbody) {
    g.velocities = rows3(sample.velocities);
    g.h = Tensor({n, 1}, sample.attributes);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        g.receivers.push_back(i);
        g.senders.push_back(j);
      }
    }
  } else {
    g.velocities = Tensor::zeros({n, 3});
    std::vector<double> onehot(n * 3, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double role = sample.attributes[i];
      if (role != 0.0 && role != 1.0 && role != 2.0) {
        throw ContractError("models", "featurize", "atom role " + std::to_string(role) + " is not 0, 1 or 2");
      }
      onehot[i * 3 + static_cast<std::size_t>(role)] = 1.0;
    }
    g.h = Tensor({n, 3}, std::move(onehot));
    std::tie(g.receivers, g.senders) = knn_edges(sample.positions, kNeighbors);
  }
  refresh_degrees(g);
  return g;
}

GraphBatch collate(const std::vector<const GraphBatch*>& graphs) {
  if (graphs.empty()) throw ContractError("models", "collate", "no graphs");
  GraphBatch b;
  b.task = graphs.front()->task;
  std::size_t offset = 0;
  for (const auto* g : graphs) {
    if (g->task != b.task) throw ContractError("models", "collate", "graphs from different tasks");
    for (std::size_t e = 0; e < g->num_edges(); ++e) {
      b.receivers.push_back(g->receivers[e] + offset);
      b.senders.push_back(g->senders[e] + offset);
    }
    for (std::size_t id : g->graph_id) b.graph_id.push_back(id + b.num_graphs);
    b.degree.insert(b.degree.end(), g->degree.begin(), g->degree.end());
    b.inv_sqrt_degree.insert(b.inv_sqrt_degree.end(), g->inv_sqrt_degree.begin(), g->inv_sqrt_degree.end());
    b.num_graphs += g->num_graphs;
    offset += g->num_nodes();
  }
  b.h = concat_rows(graphs, &GraphBatch::h);
  b.positions = concat_rows(graphs, &GraphBatch::positions);
  b.velocities = concat_rows(graphs, &GraphBatch::velocities);
  b.center = concat_rows(graphs, &GraphBatch::center);
  b.initial = concat_rows(graphs, &GraphBatch::initial);
  b.targets = concat_rows(graphs, &GraphBatch::targets);
  return b;
}

std::vector<GraphBatch> featurize_all(const data::Dataset& dataset) {
  std::vector<GraphBatch> out;
  out.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) out.push_back(featurize(s, dataset.task));
  return out;
}

GraphBatch transform(const GraphBatch& batch, const clifford::OrthogonalMap& R) {
  GraphBatch out = batch;
  out.positions = transform_rows(R, batch.positions);
  out.velocities = transform_rows(R, batch.velocities);
  out.center = transform_rows(R, batch.center);
  out.initial = transform_rows(R, batch.initial);
  out.targets = transform_rows(R, batch.targets);
  return out;
}

Tensor aggregate(const Tensor& edge_values, const GraphBatch& batch) {
  return scale_rows(scatter_sum(edge_values, batch.receivers, batch.num_nodes()), batch.inv_sqrt_degree);
}

std::string_view architecture_name(Architecture arch) {
  switch (arch) {
    case Architecture::clifford_egnn: return "clifford-egnn";
    case Architecture::mvn_gnn: return "mvn-gnn";
    case Architecture::mvp_gnn: return "mvp-gnn";
    case Architecture::egnn: return "egnn";
  }
  return "unknown";
}

Architecture parse_architecture(std::string_view name) {
  for (auto a : {Architecture::clifford_egnn, Architecture::mvn_gnn, Architecture::mvp_gnn, Architecture::egnn}) {
    if (architecture_name(a) == name) return a;
  }
  throw ContractError("models", "parse_architecture", "unknown model '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (layers < 1) throw ContractError("models", "ModelConfig", "layers must be >= 1");
  if (channels < 1 || scalar_width < 1 || hidden < 1) {
    throw ContractError("models", "ModelConfig", "widths must be >= 1");
  }
}

std::size_t raw_scalar_width(const ModelConfig& cfg) {
  if (cfg.task == Task::denoise) return 3;
  return cfg.architecture == Architecture::egnn ? 2 : 1;
}

std::size_t raw_vector_channels(Task task) { return task == Task::nbody ? 2 : 1; }

EGNNLayer::EGNNLayer(ParameterStore& store, const std::string& prefix, const ModelConfig& cfg, std::mt19937_64& rng)
    : phi_e_(store, prefix + ".phi_e", 2 * cfg.scalar_width + 1, cfg.hidden, cfg.scalar_width, rng),
      phi_x_(store, prefix + ".phi_x", cfg.scalar_width, cfg.hidden, 1, rng),
      phi_h_(store, prefix + ".phi_h", 2 * cfg.scalar_width, cfg.hidden, cfg.scalar_width, rng) {}

NodeState EGNNLayer::operator()(const NodeState& state, const GraphBatch& batch) const {
  const std::size_t n = batch.num_nodes(), e = batch.num_edges();
  const Tensor rel = sub(gather(state.x, batch.receivers), gather(state.x, batch.senders));
  const Tensor dist = reshape(diff::sqrt(sum(mul(rel, rel), 1)), {e, 1});
  const Tensor m_ij = phi_e_(concat({gather(state.h, batch.receivers), gather(state.h, batch.senders), dist}, 1));
  const Tensor m_i = scatter_sum(m_ij, batch.receivers, n);
  const Tensor shift = scatter_sum(mul_prefix(rel, reshape(phi_x_(m_ij), {e})), batch.receivers, n);
  return {phi_h_(concat({state.h, m_i}, 1)), {}, add(state.x, shift)};
}

CliffordEGNNLayer::CliffordEGNNLayer(ParameterStore& store, const std::string& prefix, const ModelConfig& cfg,
                                     std::mt19937_64& rng)
    : edge_mv_(store, prefix + ".phi_e_mv", cfg.channels, cfg.channels, rng),
      phi_e_(store, prefix + ".phi_e",
             2 * cfg.scalar_width + layers::invariant_width(cfg.channels, cfg.per_grade_invariants), cfg.hidden,
             cfg.scalar_width, rng),
      phi_v_(store, prefix + ".phi_v", cfg.scalar_width, cfg.hidden, cfg.channels, rng),
      phi_h_(store, prefix + ".phi_h", 2 * cfg.scalar_width, cfg.hidden, cfg.scalar_width, rng),
      psi_v_(store, prefix + ".psi_v", cfg.channels, rng),
      per_grade_(cfg.per_grade_invariants) {}

NodeState CliffordEGNNLayer::operator()(const NodeState& state, const GraphBatch& batch) const {
  const Tensor v_ij = edge_mv_(sub(gather(state.v, batch.receivers), gather(state.v, batch.senders)));
  return clifford_message_update(state, batch, v_ij, phi_e_, phi_v_, phi_h_, psi_v_, per_grade_);
}

MVNGNNLayer::MVNGNNLayer(ParameterStore& store, const std::string& prefix, const ModelConfig& cfg,
                         std::mt19937_64& rng)
    : edge_mlp_(store, prefix + ".mvn_mlp", 2 * cfg.channels, cfg.channels, rng),
      phi_e_(store, prefix + ".phi_e",
             2 * cfg.scalar_width + layers::invariant_width(cfg.channels, cfg.per_grade_invariants), cfg.hidden,
             cfg.scalar_width, rng),
      phi_v_(store, prefix + ".phi_v", cfg.scalar_width, cfg.hidden, cfg.channels, rng),
      phi_h_(store, prefix + ".phi_h", 2 * cfg.scalar_width, cfg.hidden, cfg.scalar_width, rng),
      psi_v_(store, prefix + ".psi_v", cfg.channels, rng),
      per_grade_(cfg.per_grade_invariants) {}

NodeState MVNGNNLayer::operator()(const NodeState& state, const GraphBatch& batch) const {
  const Tensor v_ij = edge_mlp_(concat({gather(state.v, batch.receivers), gather(state.v, batch.senders)}, 1));
  return clifford_message_update(state, batch, v_ij, phi_e_, phi_v_, phi_h_, psi_v_, per_grade_);
}

MVPGNNLayer::MVPGNNLayer(ParameterStore& store, const std::string& prefix, const ModelConfig& cfg,
                         std::mt19937_64& rng)
    : edge_mv_(store, prefix + ".phi_e_mv", 2 * cfg.channels, cfg.channels, rng),
      edge_s_(store, prefix + ".phi_e", 2 * cfg.scalar_width, cfg.hidden, cfg.scalar_width, rng),
      lin_e_(store, prefix + ".lin_e", cfg.scalar_width, cfg.channels, cfg.scalar_width, cfg.channels, cfg.hidden, rng,
             cfg.per_grade_invariants),
      lin_v_(store, prefix + ".lin_v", 2 * cfg.scalar_width, 2 * cfg.channels, cfg.scalar_width, cfg.channels,
             cfg.hidden, rng, cfg.per_grade_invariants),
      gp_e_(store, prefix + ".gp_e", cfg.scalar_width, cfg.channels, cfg.hidden, rng),
      gp_v_(store, prefix + ".gp_v", cfg.scalar_width, cfg.channels, cfg.hidden, rng) {}

NodeState MVPGNNLayer::operator()(const NodeState& state, const GraphBatch& batch) const {
  const Tensor v_ij = edge_mv_(concat({gather(state.v, batch.receivers), gather(state.v, batch.senders)}, 1));
  const Tensor s_ij = edge_s_(concat({gather(state.h, batch.receivers), gather(state.h, batch.senders)}, 1));
  const auto lin = lin_e_(s_ij, v_ij);
  const auto msg = gp_e_(lin.s, lin.v);
  const Tensor s_agg = aggregate(msg.s, batch);
  const Tensor v_agg = aggregate(msg.v, batch);
  const auto node_lin = lin_v_(concat({state.h, s_agg}, 1), concat({state.v, v_agg}, 1));
  const auto node = gp_v_(node_lin.s, node_lin.v);
  return {add(state.h, node.s), add(state.v, node.v), {}};
}

Model::Model(const ModelConfig& cfg, ParameterStore& store, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  lift_h_ = layers::Linear(store, "lift.h", raw_scalar_width(cfg_), cfg_.scalar_width, rng);
  const bool clifford = cfg_.architecture != Architecture::egnn;
  if (clifford) lift_v_ = layers::MVLinear(store, "lift.v", raw_vector_channels(cfg_.task), cfg_.channels, rng);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l);
    switch (cfg_.architecture) {
      case Architecture::clifford_egnn:
        layers_.push_back(std::make_shared<CliffordEGNNLayer>(store, prefix, cfg_, rng));
        break;
      case Architecture::mvn_gnn:
        layers_.push_back(std::make_shared<MVNGNNLayer>(store, prefix, cfg_, rng));
        break;
      case Architecture::mvp_gnn:
        layers_.push_back(std::make_shared<MVPGNNLayer>(store, prefix, cfg_, rng));
        break;
      case Architecture::egnn:
        layers_.push_back(std::make_shared<EGNNLayer>(store, prefix, cfg_, rng));
        break;
    }
  }
  if (clifford) readout_ = layers::MVLinear(store, "readout", cfg_.channels, 1, rng);
}

NodeState Model::raw_inputs(const GraphBatch& batch) const {
  const std::size_t n = batch.num_nodes();
  const auto pos = batch.positions.data();
  const auto vel = batch.velocities.data();
  NodeState raw;
  if (cfg_.architecture == Architecture::egnn) {
    if (cfg_.task == Task::nbody) {
      std::vector<double> h(n * 2);
      for (std::size_t i = 0; i < n; ++i) {
        h[i * 2] = batch.h.data()[i];
        h[i * 2 + 1] = std::sqrt(vel[i * 3] * vel[i * 3] + vel[i * 3 + 1] * vel[i * 3 + 1] + vel[i * 3 + 2] * vel[i * 3 + 2]);
      }
      raw.h = Tensor({n, 2}, std::move(h));
    } else {
      raw.h = batch.h;
    }
    raw.x = batch.positions;
    return raw;
  }
  const std::size_t c = raw_vector_channels(cfg_.task);
  std::vector<double> v(n * c * 8, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < 3; ++a) {
      v[(i * c) * 8 + 1 + a] = pos[i * 3 + a];
      if (c > 1) v[(i * c + 1) * 8 + 1 + a] = vel[i * 3 + a];
    }
  }
  raw.h = batch.h;
  raw.v = Tensor({n, c, 8}, std::move(v));
  return raw;
}

ModelOutput Model::forward(const GraphBatch& batch) const {
  validate(batch);
  if (batch.task != cfg_.task) {
    throw ContractError("models", "forward", "batch task " + std::string(data::task_name(batch.task)) +
                                                 " does not match model task " +
                                                 std::string(data::task_name(cfg_.task)));
  }
  if (batch.h.extent(1) != (cfg_.task == Task::nbody ? 1u : 3u)) {
    throw ShapeError("models", "forward", "h has width " + std::to_string(batch.h.extent(1)));
  }
  const NodeState raw = raw_inputs(batch);
  NodeState state{lift_h_(raw.h), {}, raw.x};
  if (cfg_.architecture != Architecture::egnn) state.v = lift_v_(raw.v);
  for (const auto& layer : layers_) state = (*layer)(state, batch);

  ModelOutput out;
  if (cfg_.architecture == Architecture::egnn) {
    out.positions = add(state.x, batch.center);
  } else {
    const Tensor offset = mv_vector_part(readout_(state.v), 0);
    out.positions = add(offset, cfg_.task == Task::nbody ? batch.initial : batch.center);
  }
  out.state = std::move(state);
  return out;
}

}  // namespace mvgnn::models
