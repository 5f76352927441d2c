#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mvgnn/error.hpp"
#include "mvgnn/ops.hpp"
#include "mvgnn/trainer.hpp"

using namespace mvgnn;
using namespace mvgnn::trainer;
using models::Architecture;

namespace {

data::Dataset nbody_set(std::uint64_t first, std::size_t count, std::size_t steps = 100) {
  data::SimConfig cfg;
  cfg.steps = steps;
  return data::make_nbody(cfg, first, count);
}

ModelConfig small_config(Architecture arch, data::Task task = data::Task::nbody) {
  ModelConfig cfg;
  cfg.architecture = arch;
  cfg.task = task;
  cfg.layers = 2;
  cfg.channels = 4;
  cfg.scalar_width = 16;
  cfg.hidden = 16;
  return cfg;
}

TrainConfig quick_train(std::size_t epochs, std::size_t batch = 8) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch = batch;
  return cfg;
}

void zero_parameters(diff::ParameterStore& store) {
  for (auto& [name, entry] : store.entries()) {
    auto t = entry.tensor;
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  }
}

}  // namespace

TEST_CASE("train config defaults and contracts") {
  const auto nbody = TrainConfig::defaults(data::Task::nbody);
  CHECK(nbody.batch == 100);
  CHECK(nbody.lr == 5e-3);
  CHECK(nbody.weight_decay == 1e-4);
  CHECK(nbody.epochs == 100);
  const auto denoise = TrainConfig::defaults(data::Task::denoise);
  CHECK(denoise.batch == 16);
  CHECK(denoise.lr == 1e-3);
  CHECK(denoise.epochs == 30);
  CHECK(nbody.clip_norm == 1.0);
  CHECK(denoise.clip_norm == 1.0);

  TrainConfig bad;
  bad.batch = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = TrainConfig{};
  bad.clip_norm = -1.0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = TrainConfig{};
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = TrainConfig{};
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("first batch loss matches the initial model") {
  const auto ds = nbody_set(0, 12);
  const auto cfg = small_config(Architecture::clifford_egnn);
  auto tc = quick_train(1, 64);
  tc.seed = 5;
  const auto result = train(cfg, tc, ds, ds);
  diff::ParameterStore store;
  const models::Model model(cfg, store, 5);
  const double direct = evaluate(model, ds, 64);
  CHECK(std::isfinite(result.report.first_batch_loss));
  CHECK(std::abs(result.report.first_batch_loss - direct) <= 1e-12 * direct);
}

TEST_CASE("training is deterministic") {
  const auto train_set = nbody_set(0, 20), val_set = nbody_set(20, 6), test_set = nbody_set(26, 6);
  for (auto arch : {Architecture::clifford_egnn, Architecture::egnn}) {
    const auto cfg = small_config(arch);
    const auto tc = quick_train(3);
    const auto a = train(cfg, tc, train_set, val_set, &test_set);
    const auto b = train(cfg, tc, train_set, val_set, &test_set);
    CHECK(same_metrics(a.report, b.report));
    CHECK(diff::encode_checkpoint(a.params) == diff::encode_checkpoint(b.params));
    REQUIRE(a.report.test_mse.has_value());

    auto tc2 = tc;
    tc2.seed = 1;
    const auto c = train(cfg, tc2, train_set, val_set);
    CHECK(c.report.first_batch_loss != a.report.first_batch_loss);
  }
}

TEST_CASE("best checkpoint is never worse than the final epoch") {
  const auto train_set = nbody_set(0, 24), val_set = nbody_set(24, 8);
  const auto cfg = small_config(Architecture::clifford_egnn);
  const auto result = train(cfg, quick_train(6), train_set, val_set);
  const auto& r = result.report;
  REQUIRE(r.epochs.size() == 6);
  CHECK(r.best_val_mse <= r.epochs.back().val_mse);
  for (const auto& e : r.epochs) CHECK(r.best_val_mse <= e.val_mse);
  CHECK(r.epochs[r.best_epoch - 1].val_mse == r.best_val_mse);

  diff::ParameterStore store;
  const models::Model model(cfg, store, 0);
  store.copy_values_from(result.params);
  CHECK(evaluate(model, val_set, 8) == r.best_val_mse);
  CHECK(r.seconds_per_iteration > 0.0);
  CHECK(r.peak_tensor_bytes > 0);
}

TEST_CASE("a tiny dataset is memorized") {
  const auto ds = nbody_set(0, 10, 300);
  for (auto arch : {Architecture::clifford_egnn, Architecture::egnn}) {
    const auto cfg = small_config(arch);
    auto tc = quick_train(200, 10);
    const auto result = train(cfg, tc, ds, ds);
    diff::ParameterStore store;
    const models::Model model(cfg, store, 0);
    const double initial = evaluate(model, ds, 10);
    store.copy_values_from(result.params);
    const double final_mse = evaluate(model, ds, 10);
    CAPTURE(architecture_name(arch));
    CHECK(final_mse <= 0.1 * initial);
  }
}

TEST_CASE("training errors") {
  const auto ds = nbody_set(0, 8);
  data::ChainConfig chain;
  chain.chain_len = 20;
  const auto chains = data::make_chain_denoise(chain, 0, 4);
  const auto cfg = small_config(Architecture::clifford_egnn);
  CHECK_THROWS_AS(train(cfg, quick_train(1), chains, ds), ContractError);
  CHECK_THROWS_AS(train(cfg, quick_train(1), ds, chains), ContractError);

  auto tc = quick_train(3, 2);
  tc.lr = 1e200;
  try {
    train(cfg, tc, ds, ds);
    FAIL("expected divergence");
  } catch (const TrainingDivergedError& e) {
    CHECK(std::string(e.what()).find("last finite epoch") != std::string::npos);
  }
}

TEST_CASE("evaluation") {
  const auto ds = nbody_set(0, 15);
  const auto cfg = small_config(Architecture::mvn_gnn);
  diff::ParameterStore store;
  const models::Model model(cfg, store, 3);

  // Order and sharding do not change the result.
  const double base = evaluate(model, ds, 4);
  auto shuffled = ds;
  std::mt19937_64 rng(1);
  std::shuffle(shuffled.samples.begin(), shuffled.samples.end(), rng);
  CHECK(std::abs(evaluate(model, shuffled, 4) - base) <= 1e-12 * base);
  CHECK(evaluate(model, ds, 4, 3) == base);

  // Zero weights predict the input positions.
  zero_parameters(store);
  double msd = 0.0;
  std::size_t n = 0;
  for (const auto& s : ds.samples) {
    for (std::size_t i = 0; i < s.positions.size(); ++i, ++n) msd += std::pow(s.targets[i] - s.positions[i], 2);
  }
  msd /= double(n);
  CHECK(std::abs(identity_mse(ds) - msd) <= 1e-15 * msd);
  CHECK(std::abs(evaluate(model, ds, 4) - msd) <= 1e-12 * msd);

  auto exact = ds;
  for (auto& s : exact.samples) s.targets = s.positions;
  CHECK(evaluate(model, exact, 4) <= 1e-28);

  data::ChainConfig chain;
  chain.chain_len = 20;
  CHECK_THROWS_AS(evaluate(model, data::make_chain_denoise(chain, 0, 2), 4), ContractError);
}

TEST_CASE("metrics round trip through json lines") {
  MetricsReport r;
  r.epochs = {{1, 0.5, 0.25, 1.5}, {2, 0.1 + 0.2, 1.0 / 3.0, 2e-3}};
  r.first_batch_loss = 0.7;
  r.best_epoch = 2;
  r.best_val_mse = 1.0 / 3.0;
  r.test_mse = 0.123456789012345678;
  r.seconds_per_iteration = 0.01;
  r.peak_rss_bytes = 1 << 20;
  r.peak_tensor_bytes = 12345;
  const auto text = metrics_to_jsonl(r);
  CHECK(text.rfind("{\"type\":\"epoch\",\"epoch\":1,\"train_loss\":", 0) == 0);
  const auto back = metrics_from_jsonl(text);
  CHECK(same_metrics(r, back));
  CHECK(back.epochs[1].seconds == 2e-3);
  CHECK(back.peak_rss_bytes == r.peak_rss_bytes);
  CHECK(metrics_to_jsonl(back) == text);

  r.test_mse.reset();
  CHECK_FALSE(metrics_from_jsonl(metrics_to_jsonl(r)).test_mse.has_value());
  CHECK_THROWS_AS(metrics_from_jsonl("{\"type\":\"epoch\"}\n"), FormatError);
  CHECK_THROWS_AS(metrics_from_jsonl("not json\n"), FormatError);
  CHECK_THROWS_AS(metrics_from_jsonl(""), FormatError);
}

TEST_CASE("equivariance audit") {
  const auto ds = nbody_set(0, 3);
  const auto graphs = models::featurize_all(ds);
  const auto batch = models::collate({&graphs[0], &graphs[1], &graphs[2]});
  diff::ParameterStore store;
  const models::Model model(small_config(Architecture::clifford_egnn), store, 1);
  const ForwardFn forward = [&](const GraphBatch& b) { return model.forward(b); };

  const auto identity = audit_trial(forward, batch, forward(batch), clifford::OrthogonalMap::identity());
  CHECK(identity.equivariance == 0.0);
  CHECK(identity.h_invariance == 0.0);

  const auto report = audit_equivariance(forward, batch, 20, 1e-8, 4);
  CHECK(report.passed);
  CHECK(report.trials == 20);
  CHECK(report.max_rotation_error <= 1e-8);
  CHECK(report.max_reflection_error <= 1e-8);
  CHECK(report.max_h_invariance_error <= 1e-9);

  // A constant grade-1 bias on the output breaks equivariance.
  const ForwardFn biased = [&](const GraphBatch& b) {
    auto out = model.forward(b);
    std::vector<double> bias(out.positions.numel(), 0.0);
    for (std::size_t i = 0; i < bias.size(); i += 3) bias[i] = 1e-3;
    out.positions = diff::add(out.positions, diff::Tensor(out.positions.shape(), bias));
    return out;
  };
  const auto broken = audit_equivariance(biased, batch, 4, 1e-8, 4);
  CHECK_FALSE(broken.passed);
  CHECK(broken.max_rotation_error > 1e-4);
}

TEST_CASE("bench") {
  auto cfg = small_config(Architecture::clifford_egnn);
  cfg.layers = 2;
  const auto r = bench(cfg, 20, 50, 0);
  CHECK(r.iterations == 50);
  CHECK(r.seconds_per_iteration > 0.0);
  CHECK(r.stddev_seconds / r.seconds_per_iteration < 0.25);

  std::size_t previous_tensor = 0, previous_rss = 0;
  for (std::size_t c : {8, 16, 32}) {
    cfg.channels = c;
    const auto m = bench(cfg, 20, 3, 0, 1);
    CHECK(m.peak_tensor_bytes >= previous_tensor);
    CHECK(m.peak_rss_bytes >= previous_rss);
    previous_tensor = m.peak_tensor_bytes;
    previous_rss = m.peak_rss_bytes;
  }
}
