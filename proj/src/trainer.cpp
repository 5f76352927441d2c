#include "mvgnn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mvgnn/error.hpp"
#include "mvgnn/ops.hpp"
#include "mvgnn/parallel.hpp"

namespace mvgnn::trainer {

namespace {

using Clock = std::chrono::steady_clock;
using json = nlohmann::ordered_json;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void require(bool ok, const std::string& op, const std::string& detail) {
  if (!ok) throw ContractError("trainer", op, detail);
}

void check_task(const ModelConfig& cfg, const data::Dataset& ds, const std::string& op, const std::string& which) {
  require(ds.task == cfg.task, op,
          which + " dataset task " + std::string(data::task_name(ds.task)) + " differs from model task " +
              std::string(data::task_name(cfg.task)));
}

GraphBatch collate_range(const std::vector<GraphBatch>& graphs, const std::vector<std::size_t>& order,
                         std::size_t begin, std::size_t end) {
  std::vector<const GraphBatch*> parts;
  parts.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) parts.push_back(&graphs[order[i]]);
  return models::collate(parts);
}

double squared_error(const diff::Tensor& prediction, const diff::Tensor& target) {
  const auto p = prediction.data(), t = target.data();
  double ss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) ss += (p[i] - t[i]) * (p[i] - t[i]);
  return ss;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<double> rotate_rows(const clifford::OrthogonalMap& R, std::span<const double> x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i + 2 < x.size(); i += 3) {
    const auto y = R.apply({x[i], x[i + 1], x[i + 2]});
    std::copy(y.begin(), y.end(), out.begin() + i);
  }
  return out;
}

std::vector<double> rotate_multivectors(const clifford::OrthogonalMap& R, std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  clifford::apply_orthogonal_inplace(R, out);
  return out;
}

std::size_t read_status_kib(const std::string& key) {
  std::ifstream in("/proc/self/status");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(key + ":", 0) == 0) {
      std::istringstream fields(line.substr(key.size() + 1));
      std::size_t kib = 0;
      fields >> kib;
      return kib;
    }
  }
  return 0;
}

}  // namespace

TrainConfig TrainConfig::defaults(data::Task task) {
  TrainConfig cfg;
  if (task == data::Task::denoise) {
    cfg.batch = 16;
    cfg.lr = 1e-3;
    cfg.epochs = 30;
  }
  return cfg;
}

void TrainConfig::validate() const {
  require(batch >= 1, "TrainConfig", "batch must be >= 1");
  require(std::isfinite(lr) && lr > 0.0, "TrainConfig", "lr must be positive");
  require(std::isfinite(weight_decay) && weight_decay >= 0.0, "TrainConfig", "weight decay must be >= 0");
  require(std::isfinite(clip_norm) && clip_norm >= 0.0, "TrainConfig", "clip norm must be >= 0");
  require(epochs >= 1, "TrainConfig", "epochs must be >= 1");
  require(threads >= 1, "TrainConfig", "threads must be >= 1");
}

bool same_metrics(const MetricsReport& a, const MetricsReport& b) {
  if (a.epochs.size() != b.epochs.size()) return false;
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    const auto &x = a.epochs[i], &y = b.epochs[i];
    if (x.epoch != y.epoch || x.train_loss != y.train_loss || x.val_mse != y.val_mse) return false;
  }
  return a.first_batch_loss == b.first_batch_loss && a.best_epoch == b.best_epoch &&
         a.best_val_mse == b.best_val_mse && a.test_mse == b.test_mse;
}

std::string metrics_to_jsonl(const MetricsReport& report) {
  std::string out;
  for (const auto& e : report.epochs) {
    json rec;
    rec["type"] = "epoch";
    rec["epoch"] = e.epoch;
    rec["train_loss"] = e.train_loss;
    rec["val_mse"] = e.val_mse;
    rec["seconds"] = e.seconds;
    out += rec.dump() + "\n";
  }
  json summary;
  summary["type"] = "summary";
  summary["first_batch_loss"] = report.first_batch_loss;
  summary["best_epoch"] = report.best_epoch;
  summary["best_val_mse"] = report.best_val_mse;
  summary["test_mse"] = report.test_mse ? json(*report.test_mse) : json(nullptr);
  summary["seconds_per_iteration"] = report.seconds_per_iteration;
  summary["peak_rss_bytes"] = report.peak_rss_bytes;
  summary["peak_tensor_bytes"] = report.peak_tensor_bytes;
  out += summary.dump() + "\n";
  return out;
}

MetricsReport metrics_from_jsonl(const std::string& text) {
  MetricsReport report;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool have_summary = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fail = [&](const std::string& what) {
      throw FormatError("trainer", "metrics_from_jsonl", "line " + std::to_string(line_no) + ": " + what);
    };
    if (have_summary) fail("record after summary");
    try {
      const json rec = json::parse(line);
      const auto type = rec.at("type").get<std::string>();
      if (type == "epoch") {
        report.epochs.push_back(EpochRecord{rec.at("epoch").get<std::size_t>(), rec.at("train_loss").get<double>(),
                                            rec.at("val_mse").get<double>(), rec.at("seconds").get<double>()});
      } else if (type == "summary") {
        report.first_batch_loss = rec.at("first_batch_loss").get<double>();
        report.best_epoch = rec.at("best_epoch").get<std::size_t>();
        report.best_val_mse = rec.at("best_val_mse").get<double>();
        const auto& test = rec.at("test_mse");
        if (!test.is_null()) report.test_mse = test.get<double>();
        report.seconds_per_iteration = rec.at("seconds_per_iteration").get<double>();
        report.peak_rss_bytes = rec.at("peak_rss_bytes").get<std::size_t>();
        report.peak_tensor_bytes = rec.at("peak_tensor_bytes").get<std::size_t>();
        have_summary = true;
      } else {
        fail("unknown record type \"" + type + "\"");
      }
    } catch (const json::exception& e) {
      fail(e.what());
    }
  }
  if (!have_summary) throw FormatError("trainer", "metrics_from_jsonl", "missing summary record");
  return report;
}

double evaluate(const models::Model& model, const std::vector<GraphBatch>& graphs, std::size_t batch_size,
                std::size_t threads, diff::Precision precision) {
  require(batch_size >= 1, "evaluate", "batch size must be >= 1");
  require(!graphs.empty(), "evaluate", "empty dataset");
  std::vector<std::size_t> order(graphs.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t n_batches = (graphs.size() + batch_size - 1) / batch_size;
  std::vector<double> sse(n_batches, 0.0);
  std::vector<std::size_t> counts(n_batches, 0);
  parallel_for(n_batches, threads, [&](std::size_t b) {
    diff::PrecisionScope scope(precision);
    const std::size_t begin = b * batch_size, end = std::min(graphs.size(), begin + batch_size);
    const GraphBatch batch = collate_range(graphs, order, begin, end);
    const auto out = model.forward(batch);
    sse[b] = squared_error(out.positions, batch.targets);
    counts[b] = batch.targets.numel();
  });
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < n_batches; ++b) {
    total += sse[b];
    count += counts[b];
  }
  return total / double(count);
}

double evaluate(const models::Model& model, const data::Dataset& dataset, std::size_t batch_size,
                std::size_t threads, diff::Precision precision) {
  check_task(model.config(), dataset, "evaluate", "evaluation");
  return evaluate(model, models::featurize_all(dataset), batch_size, threads, precision);
}

double identity_mse(const data::Dataset& dataset) {
  return data::baseline_mse(dataset, [](const data::Sample& s) { return s.positions; });
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const data::Dataset& train_set,
                  const data::Dataset& val_set, const data::Dataset* test_set, const EpochCallback& on_epoch) {
  model_cfg.validate();
  train_cfg.validate();
  check_task(model_cfg, train_set, "train", "training");
  check_task(model_cfg, val_set, "train", "validation");
  if (test_set) check_task(model_cfg, *test_set, "train", "test");
  require(!train_set.samples.empty(), "train", "empty training set");
  require(!val_set.samples.empty(), "train", "empty validation set");

  diff::ParameterStore store;
  const models::Model model(model_cfg, store, train_cfg.seed);
  const auto train_graphs = models::featurize_all(train_set);
  const auto val_graphs = models::featurize_all(val_set);

  diff::Adam adam({train_cfg.lr, train_cfg.weight_decay});
  std::seed_seq shuffle_seed{std::uint32_t(train_cfg.seed), std::uint32_t(train_cfg.seed >> 32), 0x5EEDu};
  std::mt19937_64 shuffle_rng(shuffle_seed);
  std::vector<std::size_t> order(train_graphs.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  MetricsReport& report = result.report;
  std::vector<double> step_seconds;
  diff::TensorMemory::reset_peak();
  reset_peak_rss();

  for (std::size_t epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    std::size_t batch_no = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += train_cfg.batch) {
      ++batch_no;
      const std::size_t end = std::min(order.size(), begin + train_cfg.batch);
      const GraphBatch batch = collate_range(train_graphs, order, begin, end);
      const auto step_start = Clock::now();
      diff::PrecisionScope precision(train_cfg.precision);
      diff::Tape tape;
      diff::Tensor loss;
      {
        diff::TapeScope scope(tape);
        loss = diff::mse(model.forward(batch).positions, batch.targets);
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw TrainingDivergedError("trainer", "train",
                                    "non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                        std::to_string(batch_no) + "; last finite epoch " +
                                        std::to_string(epoch - 1));
      }
      if (epoch == 1 && batch_no == 1) report.first_batch_loss = value;
      auto grads = diff::backward(tape, loss, store);
      diff::clip_gradient_norm(grads, train_cfg.clip_norm);
      adam.step(store, grads);
      step_seconds.push_back(seconds_since(step_start));
      const std::size_t count = batch.targets.numel();
      loss_sum += value * double(count);
      loss_count += count;
    }
    const double val = evaluate(model, val_graphs, train_cfg.batch, train_cfg.threads, train_cfg.precision);
    if (!std::isfinite(val)) {
      throw TrainingDivergedError("trainer", "train",
                                  "non-finite validation MSE at epoch " + std::to_string(epoch) +
                                      "; last finite epoch " + std::to_string(epoch - 1));
    }
    EpochRecord rec{epoch, loss_sum / double(loss_count), val, seconds_since(epoch_start)};
    report.epochs.push_back(rec);
    if (report.best_epoch == 0 || val < report.best_val_mse) {
      report.best_epoch = epoch;
      report.best_val_mse = val;
      result.params = store.clone();
    }
    if (on_epoch) on_epoch(rec);
  }

  const std::size_t warmup = step_seconds.size() > 10 ? 10 : 0;
  report.seconds_per_iteration =
      std::accumulate(step_seconds.begin() + warmup, step_seconds.end(), 0.0) / double(step_seconds.size() - warmup);
  report.peak_tensor_bytes = diff::TensorMemory::peak();
  report.peak_rss_bytes = peak_rss_bytes();

  store.copy_values_from(result.params);
  if (test_set) {
    report.test_mse = evaluate(model, *test_set, train_cfg.batch, train_cfg.threads, train_cfg.precision);
  }
  return result;
}

TrialError audit_trial(const ForwardFn& forward, const GraphBatch& batch, const ModelOutput& base,
                       const clifford::OrthogonalMap& R) {
  const ModelOutput moved = forward(models::transform(batch, R));
  TrialError err;
  err.equivariance = max_abs_diff(moved.positions.data(), rotate_rows(R, base.positions.data()));
  if (base.state.v.defined() && moved.state.v.defined()) {
    err.equivariance =
        std::max(err.equivariance, max_abs_diff(moved.state.v.data(), rotate_multivectors(R, base.state.v.data())));
  }
  if (base.state.h.defined() && moved.state.h.defined()) {
    err.h_invariance = max_abs_diff(moved.state.h.data(), base.state.h.data());
  }
  return err;
}

AuditReport audit_equivariance(const ForwardFn& forward, const GraphBatch& batch, std::size_t n_trials, double tol,
                               std::uint64_t seed) {
  AuditReport report;
  report.trials = n_trials;
  report.tolerance = tol;
  const ModelOutput base = forward(batch);
  for (std::size_t t = 0; t < n_trials; ++t) {
    const int det = t % 2 == 0 ? 1 : -1;
    const TrialError err = audit_trial(forward, batch, base, clifford::random_orthogonal(seed + t, det));
    double& slot = det > 0 ? report.max_rotation_error : report.max_reflection_error;
    slot = std::max(slot, err.equivariance);
    report.max_h_invariance_error = std::max(report.max_h_invariance_error, err.h_invariance);
  }
  const auto ok = [tol](double e) { return std::isfinite(e) && e <= tol; };
  report.passed =
      ok(report.max_rotation_error) && ok(report.max_reflection_error) && ok(report.max_h_invariance_error);
  return report;
}

BenchReport bench(const ModelConfig& model_cfg, std::size_t batch_size, std::size_t n_iters, std::uint64_t seed,
                  std::size_t warmup) {
  model_cfg.validate();
  require(batch_size >= 1, "bench", "batch size must be >= 1");
  require(n_iters >= 1, "bench", "n_iters must be >= 1");

  data::Dataset ds;
  if (model_cfg.task == data::Task::nbody) {
    data::SimConfig sim;
    sim.steps = 10;
    sim.seed = seed;
    ds = data::make_nbody(sim, 0, batch_size);
  } else {
    data::ChainConfig chain;
    chain.seed = seed;
    ds = data::make_chain_denoise(chain, 0, batch_size);
  }
  const auto graphs = models::featurize_all(ds);
  std::vector<const GraphBatch*> parts;
  for (const auto& g : graphs) parts.push_back(&g);
  const GraphBatch batch = models::collate(parts);

  diff::ParameterStore store;
  const models::Model model(model_cfg, store, seed);
  diff::Adam adam({TrainConfig::defaults(model_cfg.task).lr, 1e-4});
  const auto step = [&] {
    diff::Tape tape;
    diff::Tensor loss;
    {
      diff::TapeScope scope(tape);
      loss = diff::mse(model.forward(batch).positions, batch.targets);
    }
    adam.step(store, diff::backward(tape, loss, store));
  };

  for (std::size_t i = 0; i < warmup; ++i) step();
  diff::TensorMemory::reset_peak();
  reset_peak_rss();
  std::vector<double> times;
  times.reserve(n_iters);
  for (std::size_t i = 0; i < n_iters; ++i) {
    const auto start = Clock::now();
    step();
    times.push_back(seconds_since(start));
  }

  BenchReport report;
  report.iterations = n_iters;
  const double mean = std::accumulate(times.begin(), times.end(), 0.0) / double(n_iters);
  double var = 0.0;
  for (double t : times) var += (t - mean) * (t - mean);
  report.seconds_per_iteration = mean;
  report.stddev_seconds = n_iters > 1 ? std::sqrt(var / double(n_iters - 1)) : 0.0;
  report.peak_tensor_bytes = diff::TensorMemory::peak();
  report.peak_rss_bytes = peak_rss_bytes();
  return report;
}

std::size_t peak_rss_bytes() { return read_status_kib("VmHWM") * 1024; }

void reset_peak_rss() {
  std::ofstream out("/proc/self/clear_refs");
  if (out) out << "5";
}

}  // namespace mvgnn::trainer
