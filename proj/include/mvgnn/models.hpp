#pragma once

// Graph batches, featurization and the four message-passing architectures.
//
// Edges are directed (receiver i, sender j): messages flow j -> i, and the
// neighborhood N_i is the set of senders of edges received by i.

#include <cstdint>
#include <memory>
#include <random>
#include <string_view>
#include <vector>

#include "mvgnn/clifford.hpp"
#include "mvgnn/datasets.hpp"
#include "mvgnn/layers.hpp"

namespace mvgnn::models {

using data::Task;
using diff::Index;
using diff::ParameterStore;
using diff::Tensor;

inline constexpr std::size_t kNeighbors = 16;

struct GraphBatch {
  Task task = Task::nbody;
  std::size_t num_graphs = 0;

  // (N, s0): charge for nbody, one-hot role for denoise.
  Tensor h;
  // (N, 3) positions centered per graph.
  Tensor positions;
  // (N, 3) velocities; zeros for denoise.
  Tensor velocities;
  // (N, 3) per-graph center repeated per node.
  Tensor center;
  // (N, 3) uncentered initial positions.
  Tensor initial;
  // (N, 3) target positions.
  Tensor targets;

  Index receivers, senders;
  std::vector<std::size_t> graph_id;
  std::vector<std::size_t> degree;
  // 1/sqrt(degree), 0 where degree is 0.
  std::vector<double> inv_sqrt_degree;

  std::size_t num_nodes() const noexcept { return graph_id.size(); }
  std::size_t num_edges() const noexcept { return receivers.size(); }
};

// Checks edge endpoints, graph membership and degrees (ContractError, IndexError).
void validate(const GraphBatch& batch);

// Recomputes degree and inv_sqrt_degree from the edge lists.
void refresh_degrees(GraphBatch& batch);

// Every node's k nearest other nodes by Euclidean distance, ties broken by
// index. Returns (receiver, sender) lists. Throws GraphTooSmallError when
// there are not k other nodes.
std::pair<Index, Index> knn_edges(std::span<const double> positions, std::size_t k);

// One sample as a single-graph batch: nbody is fully connected without
// self-loops, denoise uses the kNeighbors nearest neighbors.
GraphBatch featurize(const data::Sample& sample, Task task);
GraphBatch collate(const std::vector<const GraphBatch*>& graphs);
std::vector<GraphBatch> featurize_all(const data::Dataset& dataset);

// Applies an orthogonal map to every geometric field; h and edges are kept.
GraphBatch transform(const GraphBatch& batch, const clifford::OrthogonalMap& R);

// sum over N_i of values[e], times 1/sqrt(|N_i|).
Tensor aggregate(const Tensor& edge_values, const GraphBatch& batch);

enum class Architecture { clifford_egnn, mvn_gnn, mvp_gnn, egnn };

std::string_view architecture_name(Architecture arch);
// Throws ContractError for an unknown name.
Architecture parse_architecture(std::string_view name);

struct ModelConfig {
  Architecture architecture = Architecture::clifford_egnn;
  Task task = Task::nbody;
  std::size_t layers = 4;
  std::size_t channels = 16;
  std::size_t scalar_width = 64;
  std::size_t hidden = 64;
  bool per_grade_invariants = false;

  // Throws ContractError.
  void validate() const;
};

// Width of the raw scalar features h0 the model consumes.
std::size_t raw_scalar_width(const ModelConfig& cfg);
// Number of raw grade-1 channels (positions, velocities).
std::size_t raw_vector_channels(Task task);

// Per-layer state. Clifford models use h and v; EGNN uses h and x.
struct NodeState {
  Tensor h;
  Tensor v;
  Tensor x;
};

class MessageLayer {
 public:
  virtual ~MessageLayer() = default;
  virtual NodeState operator()(const NodeState& state, const GraphBatch& batch) const = 0;
};

// m_ij = phi_e(h_i, h_j, |x_i - x_j|); x_i += sum phi_x(m_ij)(x_i - x_j);
// h_i = phi_h(h_i, m_i).
class EGNNLayer final : public MessageLayer {
 public:
  EGNNLayer(ParameterStore& store, const std::string& prefix, const ModelConfig& cfg, std::mt19937_64& rng);
  NodeState operator()(const NodeState& state, const GraphBatch& batch) const override;

 private:
  layers::ScalarMLP phi_e_, phi_x_, phi_h_;
};

// v_ij = phi_e(v_i - v_j); m_ij = phi_e([h_i, h_j, q(v_ij)]);
// v_i += psi_v(sum phi_v(m_ij) v_ij) / sqrt|N_i|; h_i = phi_h(h_i, m_i).
class CliffordEGNNLayer final : public MessageLayer {
 public:
  CliffordEGNNLayer(ParameterStore& store, const std::string& prefix, const ModelConfig& cfg,
                    std::mt19937_64& rng);
  NodeState operator()(const NodeState& state, const GraphBatch& batch) const override;

 private:
  layers::MVLinear edge_mv_;
  layers::ScalarMLP phi_e_, phi_v_, phi_h_;
  layers::GeometricProductLayer psi_v_;
  bool per_grade_;
};

// As CliffordEGNNLayer with v_ij = MVN-MLP([v_i, v_j]).
class MVNGNNLayer final : public MessageLayer {
 public:
  MVNGNNLayer(ParameterStore& store, const std::string& prefix, const ModelConfig& cfg, std::mt19937_64& rng);
  NodeState operator()(const NodeState& state, const GraphBatch& batch) const override;

 private:
  layers::MVNMLP edge_mlp_;
  layers::ScalarMLP phi_e_, phi_v_, phi_h_;
  layers::GeometricProductLayer psi_v_;
  bool per_grade_;
};

// Edge perceptrons MVP-GP_e . MVP-Lin_e on (phi_e([s_i, s_j]), phi_e([v_i, v_j])),
// normalized aggregation, node perceptrons on [old, aggregated] and a residual
// on both streams.
class MVPGNNLayer final : public MessageLayer {
 public:
  MVPGNNLayer(ParameterStore& store, const std::string& prefix, const ModelConfig& cfg, std::mt19937_64& rng);
  NodeState operator()(const NodeState& state, const GraphBatch& batch) const override;

 private:
  layers::MVLinear edge_mv_;
  layers::ScalarMLP edge_s_;
  layers::MVPLin lin_e_, lin_v_;
  layers::MVPGP gp_e_, gp_v_;
};

struct ModelOutput {
  // (N, 3)
  Tensor positions;
  NodeState state;
};

// Input lift, L message-passing layers and the position readout. Parameters
// live in the store passed at construction.
class Model {
 public:
  Model(const ModelConfig& cfg, ParameterStore& store, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return cfg_; }
  ModelOutput forward(const GraphBatch& batch) const;

  // Raw inputs before the lift: h0 and the (N, c_raw, 8) multivector array.
  NodeState raw_inputs(const GraphBatch& batch) const;

 private:
  ModelConfig cfg_;
  layers::Linear lift_h_;
  layers::MVLinear lift_v_, readout_;
  std::vector<std::shared_ptr<const MessageLayer>> layers_;
};

}  // namespace mvgnn::models
