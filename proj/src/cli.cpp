#include "mvgnn/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mvgnn/binary_io.hpp"
#include "mvgnn/diagnostics.hpp"
#include "mvgnn/error.hpp"
#include "mvgnn/trainer.hpp"

namespace mvgnn::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using models::Architecture;
using models::ModelConfig;
using trainer::TrainConfig;

constexpr const char* kCheckpointFile = "model.mvgn";
constexpr const char* kMetricsFile = "metrics.jsonl";
constexpr const char* kConfigFile = "config.json";
constexpr const char* kDatasetInfoFile = "dataset.json";

struct Options {
  std::string task = "nbody";
  std::string model = "clifford-egnn";
  std::size_t layers = 4;
  std::size_t channels = 16;
  std::size_t scalar_width = 64;
  std::size_t hidden = 64;
  bool per_grade = false;
  std::size_t batch = 0;
  double lr = 0.0;
  double wd = 1e-4;
  double clip = 1.0;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string precision = "f64";
  std::string data;
  std::string out;
  bool json = false;

  std::size_t n_train = 3000, n_val = 2000, n_test = 2000;
  std::size_t particles = 5, steps = 1000, chain_len = 48;
  double dt = 1e-3, noise = 0.5;

  std::string checkpoint;
  std::size_t trials = 200, probes = 20, iters = 50, warmup = 10, samples = 4;
  double tol = 0.0;
};

// Subcommand plus the set of flags given explicitly.
struct Invocation {
  CLI::App* app = nullptr;
  Options* opts = nullptr;
  bool given(const std::string& flag) const { return app->count(flag) > 0; }
};

[[noreturn]] void fail(const std::string& op, const std::string& detail) {
  throw ContractError("cli", op, detail);
}

diff::Precision parse_precision(const std::string& p) { return p == "f32" ? diff::Precision::f32 : diff::Precision::f64; }

std::string precision_name(diff::Precision p) { return p == diff::Precision::f32 ? "f32" : "f64"; }

void add_task_flag(CLI::App* sub, Options& o) {
  sub->add_option("--task", o.task, "Task")->check(CLI::IsMember({"nbody", "denoise"}))->capture_default_str();
}

void add_model_flags(CLI::App* sub, Options& o, bool allow_all = false) {
  std::vector<std::string> names{"clifford-egnn", "mvn-gnn", "mvp-gnn", "egnn"};
  if (allow_all) names.push_back("all");
  sub->add_option("--model", o.model, "Architecture")->check(CLI::IsMember(names))->capture_default_str();
  sub->add_option("--layers", o.layers, "Message-passing layers")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--channels", o.channels, "Multivector channels")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--scalar-width", o.scalar_width, "Scalar feature width")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--hidden", o.hidden, "Hidden width of scalar networks")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_flag("--per-grade-invariants", o.per_grade, "Feed one quadratic form per grade to scalar networks");
}

void add_common_flags(CLI::App* sub, Options& o) {
  sub->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  sub->add_option("--threads", o.threads, "Worker threads (MVGNN_THREADS sets the default)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_flag("--json", o.json, "Machine-readable output");
}

void add_precision_flag(CLI::App* sub, Options& o) {
  sub->add_option("--precision", o.precision, "Numeric mode")->check(CLI::IsMember({"f64", "f32"}))->capture_default_str();
}

ModelConfig model_config(const Options& o, data::Task task) {
  ModelConfig cfg;
  cfg.architecture = models::parse_architecture(o.model);
  cfg.task = task;
  cfg.layers = o.layers;
  cfg.channels = o.channels;
  cfg.scalar_width = o.scalar_width;
  cfg.hidden = o.hidden;
  cfg.per_grade_invariants = o.per_grade;
  cfg.validate();
  return cfg;
}

TrainConfig train_config(const Invocation& inv, data::Task task) {
  const Options& o = *inv.opts;
  TrainConfig cfg = TrainConfig::defaults(task);
  if (inv.given("--batch")) cfg.batch = o.batch;
  if (inv.given("--lr")) cfg.lr = o.lr;
  if (inv.given("--wd")) cfg.weight_decay = o.wd;
  if (inv.given("--clip")) cfg.clip_norm = o.clip;
  if (inv.given("--epochs")) cfg.epochs = o.epochs;
  cfg.seed = o.seed;
  cfg.threads = o.threads;
  cfg.precision = parse_precision(o.precision);
  cfg.validate();
  return cfg;
}

json model_to_json(const ModelConfig& cfg) {
  return {{"architecture", models::architecture_name(cfg.architecture)},
          {"task", data::task_name(cfg.task)},
          {"layers", cfg.layers},
          {"channels", cfg.channels},
          {"scalar_width", cfg.scalar_width},
          {"hidden", cfg.hidden},
          {"per_grade_invariants", cfg.per_grade_invariants}};
}

json train_to_json(const TrainConfig& cfg) {
  return {{"batch", cfg.batch},        {"lr", cfg.lr},     {"weight_decay", cfg.weight_decay}, {"clip_norm", cfg.clip_norm},
          {"epochs", cfg.epochs},      {"seed", cfg.seed}, {"precision", precision_name(cfg.precision)},
          {"threads", cfg.threads}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig cfg;
  cfg.architecture = models::parse_architecture(j.at("architecture").get<std::string>());
  cfg.task = data::parse_task(j.at("task").get<std::string>());
  cfg.layers = j.at("layers").get<std::size_t>();
  cfg.channels = j.at("channels").get<std::size_t>();
  cfg.scalar_width = j.at("scalar_width").get<std::size_t>();
  cfg.hidden = j.at("hidden").get<std::size_t>();
  cfg.per_grade_invariants = j.at("per_grade_invariants").get<bool>();
  cfg.validate();
  return cfg;
}

json read_json(const fs::path& path, const std::string& op) {
  const auto bytes = io::read_file(path, "cli", op.c_str());
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError("cli", op, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text, const std::string& op) {
  io::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()), "cli", op.c_str());
}

// Rejects an explicit --task that disagrees with a dataset's header tag.
data::Task resolve_task(const Invocation& inv, data::Task dataset_task, const std::string& op) {
  if (inv.given("--task") && data::parse_task(inv.opts->task) != dataset_task) {
    fail(op, "--task " + inv.opts->task + " conflicts with dataset task " + std::string(data::task_name(dataset_task)));
  }
  return dataset_task;
}

fs::path dataset_file(const std::string& data, const char* default_split, const std::string& op) {
  if (data.empty()) fail(op, "--data is required");
  const fs::path p(data);
  return fs::is_directory(p) ? p / default_split : p;
}

fs::path checkpoint_file(const std::string& path) {
  const fs::path p(path);
  return fs::is_directory(p) ? p / kCheckpointFile : p;
}

// Model configuration of a checkpoint: its config.json sidecar when present,
// otherwise the flags. Explicit model flags must agree with the sidecar.
ModelConfig checkpoint_model(const Invocation& inv, const fs::path& ckpt, std::optional<data::Task> task,
                             const std::string& op) {
  const Options& o = *inv.opts;
  const fs::path sidecar = ckpt.parent_path() / kConfigFile;
  if (!fs::exists(sidecar)) {
    return model_config(o, task.value_or(data::parse_task(o.task)));
  }
  const ModelConfig cfg = model_from_json(read_json(sidecar, op).at("model"));
  const ModelConfig flags = model_config(o, cfg.task);
  const auto check = [&](const char* flag, bool same) {
    if (inv.given(flag) && !same) fail(op, std::string(flag) + " conflicts with " + sidecar.string());
  };
  check("--model", flags.architecture == cfg.architecture);
  check("--layers", flags.layers == cfg.layers);
  check("--channels", flags.channels == cfg.channels);
  check("--scalar-width", flags.scalar_width == cfg.scalar_width);
  check("--hidden", flags.hidden == cfg.hidden);
  check("--per-grade-invariants", flags.per_grade_invariants == cfg.per_grade_invariants);
  check("--task", data::parse_task(o.task) == cfg.task);
  if (task && *task != cfg.task) {
    fail(op, "dataset task " + std::string(data::task_name(*task)) + " differs from checkpoint task " +
                 std::string(data::task_name(cfg.task)));
  }
  return cfg;
}

void print_config(std::ostream& err, const std::string& command, const json& config) {
  err << "mvgnn " << command << " config " << config.dump() << "\n";
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

// ---- subcommands -----------------------------------------------------------

int cmd_generate(const Invocation& inv, std::ostream& out, std::ostream& err) {
  const Options& o = *inv.opts;
  const data::Task task = data::parse_task(o.task);
  const fs::path dir = o.out.empty() ? fs::path("data") : fs::path(o.out);
  const data::SplitCounts counts{o.n_train, o.n_val, o.n_test};
  json info{{"task", o.task}, {"seed", o.seed}, {"train", o.n_train}, {"val", o.n_val}, {"test", o.n_test}};
  if (task == data::Task::nbody) {
    data::SimConfig sim;
    sim.n = o.particles;
    sim.steps = o.steps;
    sim.dt = o.dt;
    sim.seed = o.seed;
    sim.validate();
    info["particles"] = sim.n;
    info["steps"] = sim.steps;
    info["dt"] = sim.dt;
    info["softening"] = sim.softening;
    info["coupling"] = sim.coupling;
    print_config(err, "generate", info);
    data::generate_nbody(counts, sim, dir, o.threads);
  } else {
    data::ChainConfig chain;
    chain.chain_len = o.chain_len;
    chain.noise_std = o.noise;
    chain.seed = o.seed;
    chain.validate();
    info["chain_len"] = chain.chain_len;
    info["noise_std"] = chain.noise_std;
    info["neighbors"] = models::kNeighbors;
    print_config(err, "generate", info);
    data::generate_chain_denoise(counts, chain, dir, o.threads);
  }
  write_text(dir / kDatasetInfoFile, info.dump(2) + "\n", "generate");

  json files = json::array();
  const std::array<std::size_t, 3> sizes{o.n_train, o.n_val, o.n_test};
  for (std::size_t s = 0; s < 3; ++s) {
    const fs::path path = dir / data::kSplitFiles[s];
    files.push_back({{"path", path.string()}, {"samples", sizes[s]}});
    if (!o.json) out << "wrote " << path.string() << " (" << sizes[s] << " samples)\n";
  }
  if (o.json) out << json{{"command", "generate"}, {"task", o.task}, {"files", files}}.dump() << "\n";
  return kExitOk;
}

int cmd_train(const Invocation& inv, std::ostream& out, std::ostream& err) {
  const Options& o = *inv.opts;
  if (o.data.empty()) fail("train", "--data is required");
  if (o.out.empty()) fail("train", "--out is required");
  const fs::path dir(o.data);
  const data::Dataset train_set = data::load_dataset(dir / data::kSplitFiles[0]);
  const data::Dataset val_set = data::load_dataset(dir / data::kSplitFiles[1]);
  std::optional<data::Dataset> test_set;
  if (fs::exists(dir / data::kSplitFiles[2])) test_set = data::load_dataset(dir / data::kSplitFiles[2]);
  const data::Task task = resolve_task(inv, train_set.task, "train");

  const ModelConfig mcfg = model_config(o, task);
  const TrainConfig tcfg = train_config(inv, task);
  const json config{{"model", model_to_json(mcfg)}, {"train", train_to_json(tcfg)}};
  print_config(err, "train", config);

  const auto result = trainer::train(mcfg, tcfg, train_set, val_set, test_set ? &*test_set : nullptr,
                                     [&](const trainer::EpochRecord& e) {
                                       if (!o.json) {
                                         out << "epoch " << e.epoch << " train_loss " << fixed(e.train_loss, 6)
                                             << " val_mse " << fixed(e.val_mse, 6) << "\n";
                                       }
                                     });
  const fs::path out_dir(o.out);
  fs::create_directories(out_dir);
  diff::save_checkpoint(out_dir / kCheckpointFile, result.params);
  write_text(out_dir / kMetricsFile, trainer::metrics_to_jsonl(result.report), "train");
  write_text(out_dir / kConfigFile, config.dump(2) + "\n", "train");

  const auto& r = result.report;
  if (o.json) {
    json j{{"command", "train"},
           {"checkpoint", (out_dir / kCheckpointFile).string()},
           {"metrics", (out_dir / kMetricsFile).string()},
           {"best_epoch", r.best_epoch},
           {"best_val_mse", r.best_val_mse},
           {"test_mse", r.test_mse ? json(*r.test_mse) : json(nullptr)},
           {"seconds_per_iteration", r.seconds_per_iteration},
           {"peak_rss_bytes", r.peak_rss_bytes}};
    out << j.dump() << "\n";
  } else {
    out << "best epoch " << r.best_epoch << " val_mse " << fixed(r.best_val_mse, 6) << "\n";
    if (r.test_mse) out << "test_mse " << fixed(*r.test_mse, 6) << "\n";
    out << "seconds/iteration " << fixed(r.seconds_per_iteration, 4) << "  memory "
        << fixed(double(r.peak_rss_bytes) / (1 << 20), 4) << " MiB\n";
    out << "wrote " << (out_dir / kCheckpointFile).string() << "\n";
  }
  return kExitOk;
}

int cmd_eval(const Invocation& inv, std::ostream& out, std::ostream& err) {
  const Options& o = *inv.opts;
  if (o.checkpoint.empty()) fail("eval", "--checkpoint is required");
  const fs::path data_path = dataset_file(o.data, "test.mvds", "eval");
  const data::Dataset ds = data::load_dataset(data_path);
  resolve_task(inv, ds.task, "eval");
  const fs::path ckpt = checkpoint_file(o.checkpoint);
  const ModelConfig mcfg = checkpoint_model(inv, ckpt, ds.task, "eval");
  const std::size_t batch = inv.given("--batch") ? o.batch : TrainConfig::defaults(ds.task).batch;
  if (batch == 0) fail("eval", "--batch must be >= 1");
  print_config(err, "eval",
               {{"model", model_to_json(mcfg)},
                {"checkpoint", ckpt.string()},
                {"data", data_path.string()},
                {"batch", batch},
                {"threads", o.threads},
                {"precision", o.precision}});

  diff::ParameterStore store;
  const models::Model model(mcfg, store, o.seed);
  diff::load_checkpoint(ckpt, store);
  const double mse = trainer::evaluate(model, ds, batch, o.threads, parse_precision(o.precision));
  const double identity = trainer::identity_mse(ds);

  std::optional<double> linear;
  const fs::path info_path = data_path.parent_path() / kDatasetInfoFile;
  if (ds.task == data::Task::nbody && fs::exists(info_path)) {
    const json info = read_json(info_path, "eval");
    data::SimConfig sim;
    sim.steps = info.at("steps").get<std::size_t>();
    sim.dt = info.at("dt").get<double>();
    linear = data::baseline_mse(ds, [&](const data::Sample& s) { return data::linear_extrapolation(s, sim); });
  }

  if (o.json) {
    out << json{{"command", "eval"},
                {"mse", mse},
                {"samples", ds.samples.size()},
                {"identity_mse", identity},
                {"linear_mse", linear ? json(*linear) : json(nullptr)}}
               .dump()
        << "\n";
  } else {
    out << "mse " << fixed(mse, 8) << "\n";
    out << "identity baseline " << fixed(identity, 8) << " (ratio " << fixed(mse / identity, 4) << ")\n";
    if (linear) out << "linear extrapolation baseline " << fixed(*linear, 8) << " (ratio " << fixed(mse / *linear, 4) << ")\n";
  }
  return kExitOk;
}

int cmd_audit(const Invocation& inv, std::ostream& out, std::ostream& err) {
  const Options& o = *inv.opts;
  const double tol = inv.given("--tol") ? o.tol : 1e-8;
  std::optional<data::Dataset> ds;
  if (!o.data.empty()) ds = data::load_dataset(dataset_file(o.data, "test.mvds", "audit-equivariance"));
  std::optional<data::Task> task;
  if (ds) task = resolve_task(inv, ds->task, "audit-equivariance");

  ModelConfig mcfg;
  fs::path ckpt;
  if (!o.checkpoint.empty()) {
    ckpt = checkpoint_file(o.checkpoint);
    mcfg = checkpoint_model(inv, ckpt, task, "audit-equivariance");
  } else {
    mcfg = model_config(o, task.value_or(data::parse_task(o.task)));
  }
  if (o.samples == 0) fail("audit-equivariance", "--samples must be >= 1");

  if (!ds) {
    if (mcfg.task == data::Task::nbody) {
      data::SimConfig sim;
      sim.steps = 100;
      sim.seed = o.seed;
      ds = data::make_nbody(sim, 0, o.samples);
    } else {
      data::ChainConfig chain;
      chain.seed = o.seed;
      ds = data::make_chain_denoise(chain, 0, o.samples);
    }
  }
  if (ds->samples.size() > o.samples) ds->samples.resize(o.samples);
  print_config(err, "audit-equivariance",
               {{"model", model_to_json(mcfg)},
                {"checkpoint", ckpt.empty() ? json(nullptr) : json(ckpt.string())},
                {"trials", o.trials},
                {"tol", tol},
                {"samples", ds->samples.size()},
                {"seed", o.seed},
                {"precision", o.precision}});

  diff::ParameterStore store;
  const models::Model model(mcfg, store, o.seed);
  if (!ckpt.empty()) diff::load_checkpoint(ckpt, store);
  const auto graphs = models::featurize_all(*ds);
  std::vector<const models::GraphBatch*> parts;
  for (const auto& g : graphs) parts.push_back(&g);
  const auto batch = models::collate(parts);
  const auto precision = parse_precision(o.precision);
  const auto report = trainer::audit_equivariance(
      [&](const models::GraphBatch& b) {
        diff::PrecisionScope scope(precision);
        return model.forward(b);
      },
      batch, o.trials, tol, o.seed);

  if (o.json) {
    out << json{{"command", "audit-equivariance"},
                {"passed", report.passed},
                {"trials", report.trials},
                {"tolerance", report.tolerance},
                {"max_rotation_error", report.max_rotation_error},
                {"max_reflection_error", report.max_reflection_error},
                {"max_h_invariance_error", report.max_h_invariance_error}}
               .dump()
        << "\n";
  } else {
    out << (report.passed ? "PASS" : "FAIL") << " equivariance audit (" << report.trials << " trials, tol "
        << fixed(tol, 3) << ")\n";
    out << "max rotation error     " << fixed(report.max_rotation_error, 3) << "\n";
    out << "max reflection error   " << fixed(report.max_reflection_error, 3) << "\n";
    out << "max h-invariance error " << fixed(report.max_h_invariance_error, 3) << "\n";
  }
  return report.passed ? kExitOk : kExitCheckFailed;
}

int cmd_gradcheck(const Invocation& inv, std::ostream& out, std::ostream& err) {
  const Options& o = *inv.opts;
  const double tol = inv.given("--tol") ? o.tol : 1e-5;
  std::vector<Architecture> archs;
  if (inv.given("--model")) {
    archs.push_back(models::parse_architecture(o.model));
  } else {
    archs = {Architecture::clifford_egnn, Architecture::mvn_gnn, Architecture::mvp_gnn, Architecture::egnn};
  }
  if (o.probes == 0) fail("gradcheck", "--probes must be >= 1");
  print_config(err, "gradcheck",
               {{"probes", o.probes},
                {"tol", tol},
                {"seed", o.seed},
                {"layers", o.layers},
                {"channels", o.channels},
                {"scalar_width", o.scalar_width},
                {"hidden", o.hidden}});

  struct Row {
    std::string name;
    double error;
  };
  std::vector<Row> rows;
  for (const auto& c : diagnostics::op_gradchecks(o.probes, o.seed)) rows.push_back({c.name, c.max_relative_error});
  for (Architecture arch : archs) {
    Options model_opts = o;
    model_opts.model = std::string(models::architecture_name(arch));
    const auto res = diagnostics::model_gradcheck(model_config(model_opts, data::Task::nbody), o.seed);
    rows.push_back({"model:" + model_opts.model, res.global_relative_error});
  }

  bool passed = true;
  json table = json::array();
  if (!o.json) out << std::left << std::setw(28) << "check" << "max relative error\n";
  for (const auto& r : rows) {
    const bool ok = r.error <= tol;
    passed = passed && ok;
    table.push_back({{"name", r.name}, {"max_relative_error", r.error}, {"passed", ok}});
    if (!o.json) {
      out << std::left << std::setw(28) << r.name << std::setw(14) << fixed(r.error, 3) << (ok ? "ok" : "FAIL")
          << "\n";
    }
  }
  if (o.json) {
    out << json{{"command", "gradcheck"}, {"passed", passed}, {"tolerance", tol}, {"checks", table}}.dump() << "\n";
  } else {
    out << (passed ? "PASS" : "FAIL") << " gradcheck (tol " << fixed(tol, 3) << ")\n";
  }
  return passed ? kExitOk : kExitCheckFailed;
}

int cmd_bench(const Invocation& inv, std::ostream& out, std::ostream& err) {
  const Options& o = *inv.opts;
  const data::Task task = data::parse_task(o.task);
  const std::size_t batch = inv.given("--batch") ? o.batch : TrainConfig::defaults(task).batch;
  if (batch == 0) fail("bench", "--batch must be >= 1");
  if (o.iters == 0) fail("bench", "--iters must be >= 1");
  std::vector<Architecture> archs;
  if (o.model == "all") {
    archs = {Architecture::egnn, Architecture::clifford_egnn, Architecture::mvn_gnn, Architecture::mvp_gnn};
  } else {
    archs.push_back(models::parse_architecture(o.model));
  }
  Options first = o;
  first.model = std::string(models::architecture_name(archs.front()));
  print_config(err, "bench",
               {{"model", o.model},
                {"task", o.task},
                {"layers", o.layers},
                {"channels", o.channels},
                {"scalar_width", o.scalar_width},
                {"hidden", o.hidden},
                {"batch", batch},
                {"iters", o.iters},
                {"warmup", o.warmup},
                {"seed", o.seed}});

  json rows = json::array();
  if (!o.json) {
    out << std::left << std::setw(16) << "Model" << std::setw(22) << "Seconds/Iteration" << "Memory (MiB)\n";
  }
  for (Architecture arch : archs) {
    Options model_opts = o;
    model_opts.model = std::string(models::architecture_name(arch));
    const auto r = trainer::bench(model_config(model_opts, task), batch, o.iters, o.seed, o.warmup);
    const double mib = double(r.peak_rss_bytes) / (1 << 20);
    rows.push_back({{"model", model_opts.model},
                    {"task", o.task},
                    {"batch", batch},
                    {"iterations", r.iterations},
                    {"seconds_per_iteration", r.seconds_per_iteration},
                    {"stddev_seconds", r.stddev_seconds},
                    {"peak_rss_bytes", r.peak_rss_bytes},
                    {"peak_tensor_bytes", r.peak_tensor_bytes}});
    if (!o.json) {
      std::ostringstream secs;
      secs << std::fixed << std::setprecision(4) << r.seconds_per_iteration << " +- " << std::setprecision(4)
           << r.stddev_seconds;
      std::ostringstream mem;
      mem << std::fixed << std::setprecision(1) << mib;
      out << std::left << std::setw(16) << model_opts.model << std::setw(22) << secs.str() << mem.str() << "\n";
    }
  }
  if (o.json) out << json{{"command", "bench"}, {"rows", rows}}.dump() << "\n";
  return kExitOk;
}

std::size_t env_threads() {
  const char* v = std::getenv("MVGNN_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const unsigned long long n = std::strtoull(v, &end, 10);
  if (*end != '\0' || n == 0) fail("run", std::string("MVGNN_THREADS must be a positive integer, got \"") + v + "\"");
  return std::size_t(n);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"O(3)-equivariant Clifford graph networks"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "Write train/val/test datasets");
  add_task_flag(gen, o);
  add_common_flags(gen, o);
  gen->add_option("--out", o.out, "Output directory (default: data)");
  gen->add_option("--train", o.n_train, "Training samples")->capture_default_str();
  gen->add_option("--val", o.n_val, "Validation samples")->capture_default_str();
  gen->add_option("--test", o.n_test, "Test samples")->capture_default_str();
  gen->add_option("--particles", o.particles, "N-body: particles per system")->capture_default_str();
  gen->add_option("--steps", o.steps, "N-body: integration steps")->capture_default_str();
  gen->add_option("--dt", o.dt, "N-body: time step")->capture_default_str();
  gen->add_option("--chain-len", o.chain_len, "Denoise: chain length")->capture_default_str();
  gen->add_option("--noise", o.noise, "Denoise: noise standard deviation")->capture_default_str();

  auto* trn = app.add_subcommand("train", "Train a model; writes checkpoint, metrics and config");
  add_task_flag(trn, o);
  add_model_flags(trn, o);
  add_common_flags(trn, o);
  add_precision_flag(trn, o);
  trn->add_option("--data", o.data, "Directory with train/val/test.mvds");
  trn->add_option("--out", o.out, "Output directory");
  trn->add_option("--batch", o.batch, "Graphs per batch (nbody 100, denoise 16)");
  trn->add_option("--lr", o.lr, "Learning rate (nbody 5e-3, denoise 1e-3)");
  trn->add_option("--wd", o.wd, "Decoupled weight decay")->capture_default_str();
  trn->add_option("--clip", o.clip, "Global gradient-norm cap, 0 disables")->capture_default_str();
  trn->add_option("--epochs", o.epochs, "Epochs (nbody 100, denoise 30)");

  auto* evl = app.add_subcommand("eval", "Mean squared position error of a checkpoint");
  add_task_flag(evl, o);
  add_model_flags(evl, o);
  add_common_flags(evl, o);
  add_precision_flag(evl, o);
  evl->add_option("--checkpoint", o.checkpoint, "Checkpoint file or training output directory");
  evl->add_option("--data", o.data, "Dataset file, or a directory (uses test.mvds)");
  evl->add_option("--batch", o.batch, "Graphs per evaluation batch");

  auto* aud = app.add_subcommand("audit-equivariance", "Random rotation and reflection audit");
  add_task_flag(aud, o);
  add_model_flags(aud, o);
  add_common_flags(aud, o);
  add_precision_flag(aud, o);
  aud->add_option("--checkpoint", o.checkpoint, "Checkpoint (default: freshly initialized from --seed)");
  aud->add_option("--data", o.data, "Dataset file or directory (default: synthetic)");
  aud->add_option("--trials", o.trials, "Random maps, alternating determinant")->capture_default_str();
  aud->add_option("--tol", o.tol, "Maximum absolute error (default 1e-8)");
  aud->add_option("--samples", o.samples, "Graphs in the audited batch")->capture_default_str();

  auto* grd = app.add_subcommand("gradcheck", "Finite-difference checks of every op and architecture");
  add_model_flags(grd, o);
  add_common_flags(grd, o);
  grd->add_option("--probes", o.probes, "Random inputs per op")->capture_default_str();
  grd->add_option("--tol", o.tol, "Maximum relative error (default 1e-5)");

  auto* bch = app.add_subcommand("bench", "Seconds per training iteration and peak memory");
  add_task_flag(bch, o);
  add_model_flags(bch, o, true);
  add_common_flags(bch, o);
  bch->add_option("--batch", o.batch, "Graphs per batch (nbody 100, denoise 16)");
  bch->add_option("--iters", o.iters, "Timed iterations")->capture_default_str();
  bch->add_option("--warmup", o.warmup, "Untimed warmup iterations")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitError;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const Invocation inv{sub, &o};
    if (!inv.given("--threads")) o.threads = env_threads();
    const std::string name = sub->get_name();
    if (name == "generate") return cmd_generate(inv, out, err);
    if (name == "train") return cmd_train(inv, out, err);
    if (name == "eval") return cmd_eval(inv, out, err);
    if (name == "audit-equivariance") return cmd_audit(inv, out, err);
    if (name == "gradcheck") return cmd_gradcheck(inv, out, err);
    return cmd_bench(inv, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
  } catch (const fs::filesystem_error& e) {
    err << "error: cli::run: " << e.what() << "\n";
  }
  return kExitError;
}

}  // namespace mvgnn::cli
