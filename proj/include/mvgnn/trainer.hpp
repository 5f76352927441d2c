#pragma once

// Training loop, evaluation, equivariance audit and benchmark timing.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mvgnn/models.hpp"

namespace mvgnn::trainer {

using models::GraphBatch;
using models::ModelConfig;
using models::ModelOutput;

struct TrainConfig {
  std::size_t batch = 100;
  double lr = 5e-3;
  double weight_decay = 1e-4;
  // Global gradient-norm cap per step; 0 disables clipping.
  double clip_norm = 1.0;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  diff::Precision precision = diff::Precision::f64;
  // Workers for evaluation shards; training steps are sequential.
  std::size_t threads = 1;

  // Task defaults: nbody 100 / 5e-3 / 100 epochs, denoise 16 / 1e-3 / 30;
  // gradient norm capped at 1 for both.
  static TrainConfig defaults(data::Task task);
  // Throws ContractError.
  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mse = 0.0;
  double seconds = 0.0;
};

struct MetricsReport {
  std::vector<EpochRecord> epochs;
  // Loss of the very first optimizer step, before any update.
  double first_batch_loss = 0.0;
  std::size_t best_epoch = 0;
  double best_val_mse = 0.0;
  std::optional<double> test_mse;
  double seconds_per_iteration = 0.0;
  std::size_t peak_rss_bytes = 0;
  std::size_t peak_tensor_bytes = 0;
};

// Equal up to the timing and memory fields.
bool same_metrics(const MetricsReport& a, const MetricsReport& b);

// JSON lines: one {"type":"epoch","epoch","train_loss","val_mse","seconds"}
// record per epoch, then one {"type":"summary","first_batch_loss",
// "best_epoch","best_val_mse","test_mse","seconds_per_iteration",
// "peak_rss_bytes","peak_tensor_bytes"} record. test_mse is null when absent.
std::string metrics_to_jsonl(const MetricsReport& report);
// Throws FormatError on a malformed document.
MetricsReport metrics_from_jsonl(const std::string& text);

struct TrainResult {
  MetricsReport report;
  // Parameters of the best validation epoch.
  diff::ParameterStore params;
};

// Called after every epoch; useful for progress output.
using EpochCallback = std::function<void(const EpochRecord&)>;

// Initializes a model from train_cfg.seed and minimizes the position MSE with
// Adam. Throws ContractError when a dataset task differs from the model task
// and TrainingDivergedError on a non-finite loss.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const data::Dataset& train_set,
                  const data::Dataset& val_set, const data::Dataset* test_set = nullptr,
                  const EpochCallback& on_epoch = {});

// Mean squared position error over all coordinates of all samples. Batches
// are evaluated on `threads` workers and merged in batch order.
double evaluate(const models::Model& model, const std::vector<GraphBatch>& graphs, std::size_t batch_size,
                std::size_t threads = 1, diff::Precision precision = diff::Precision::f64);
double evaluate(const models::Model& model, const data::Dataset& dataset, std::size_t batch_size,
                std::size_t threads = 1, diff::Precision precision = diff::Precision::f64);

// Identity baseline: predict the input positions.
double identity_mse(const data::Dataset& dataset);

struct AuditReport {
  std::size_t trials = 0;
  double max_rotation_error = 0.0;
  double max_reflection_error = 0.0;
  double max_h_invariance_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

using ForwardFn = std::function<ModelOutput(const GraphBatch&)>;

struct TrialError {
  // Max deviation of positions and multivector features from R forward(batch).
  double equivariance = 0.0;
  double h_invariance = 0.0;
};

// One comparison of forward(R batch) against R applied to `base`, which must
// be forward(batch).
TrialError audit_trial(const ForwardFn& forward, const GraphBatch& batch, const ModelOutput& base,
                       const clifford::OrthogonalMap& R);

// Trial t draws a random map of determinant +1 (t even) or -1 (t odd) and
// compares forward(R batch) with R forward(batch) on positions and, when
// present, multivector features; h must be unchanged.
AuditReport audit_equivariance(const ForwardFn& forward, const GraphBatch& batch, std::size_t n_trials, double tol,
                               std::uint64_t seed);

struct BenchReport {
  std::size_t iterations = 0;
  double seconds_per_iteration = 0.0;
  double stddev_seconds = 0.0;
  std::size_t peak_rss_bytes = 0;
  std::size_t peak_tensor_bytes = 0;
};

// Times forward + backward + Adam step on one synthetic batch of the model's
// task for n_iters iterations after `warmup` untimed ones.
BenchReport bench(const ModelConfig& model_cfg, std::size_t batch_size, std::size_t n_iters, std::uint64_t seed,
                  std::size_t warmup = 10);

// Peak resident set (VmHWM) in bytes and a best-effort reset of it.
std::size_t peak_rss_bytes();
void reset_peak_rss();

}  // namespace mvgnn::trainer
