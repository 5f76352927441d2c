#include "mvgnn/datasets.hpp"

#include <cmath>
#include <random>
#include <string>

#include "mvgnn/binary_io.hpp"
#include "mvgnn/error.hpp"
#include "mvgnn/parallel.hpp"

namespace mvgnn::data {

namespace {

constexpr std::string_view kDatasetMagic = "MVDS";

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t sample_seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(sample_seed), static_cast<std::uint32_t>(sample_seed >> 32)};
  return std::mt19937_64(seq);
}

// Pairwise softened Coulomb accelerations, unit masses. Each pair is visited
// once and applied with opposite signs.
void accelerations(const SimConfig& cfg, std::span<const double> x, std::span<const double> q,
                   std::vector<double>& a) {
  const std::size_t n = q.size();
  std::fill(a.begin(), a.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d[3], r2 = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        d[k] = x[i * 3 + k] - x[j * 3 + k];
        r2 += d[k] * d[k];
      }
      const double s = r2 + cfg.softening;
      const double f = cfg.coupling * q[i] * q[j] / (s * std::sqrt(s));
      for (std::size_t k = 0; k < 3; ++k) {
        a[i * 3 + k] += f * d[k];
        a[j * 3 + k] -= f * d[k];
      }
    }
  }
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::array<double, 3> unit_vector(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  for (;;) {
    std::array<double, 3> u{n(rng), n(rng), n(rng)};
    const double norm = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    if (norm > 1e-12) return {u[0] / norm, u[1] / norm, u[2] / norm};
  }
}

std::vector<double> walk(const ChainConfig& cfg, std::mt19937_64& rng) {
  std::vector<double> x(cfg.chain_len * 3, 0.0);
  auto d = unit_vector(rng);
  for (std::size_t i = 1; i < cfg.chain_len; ++i) {
    if (i > 1) {
      const auto u = unit_vector(rng);
      double norm = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        d[k] = cfg.persistence * d[k] + (1.0 - cfg.persistence) * u[k];
        norm += d[k] * d[k];
      }
      norm = std::sqrt(norm);
      for (auto& c : d) c /= norm;
    }
    for (std::size_t k = 0; k < 3; ++k) x[i * 3 + k] = x[(i - 1) * 3 + k] + cfg.step * d[k];
  }
  return x;
}

[[noreturn]] void dataset_truncated(std::size_t offset, const char* what) {
  throw FormatError("datasets", "load_dataset",
                    std::string("truncated dataset while reading ") + what + " at byte offset " +
                        std::to_string(offset));
}

template <typename MakeSample>
Dataset make_split(Task task, std::size_t nodes, std::uint64_t first_seed, std::size_t count, std::size_t threads,
                   MakeSample&& make) {
  Dataset ds;
  ds.task = task;
  ds.nodes = nodes;
  ds.samples.resize(count);
  parallel_for(count, threads, [&](std::size_t i) { ds.samples[i] = make(first_seed + i); });
  return ds;
}

void write_splits(const SplitCounts& counts, const std::filesystem::path& dir,
                  const std::function<Dataset(std::uint64_t, std::size_t)>& make) {
  if (counts.train < 1 || counts.val < 1 || counts.test < 1) {
    throw ContractError("datasets", "generate", "split counts must be >= 1");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("datasets", "generate", "cannot create '" + dir.string() + "': " + ec.message());
  const auto offsets = split_offsets(counts);
  const std::array<std::size_t, 3> sizes{counts.train, counts.val, counts.test};
  for (std::size_t s = 0; s < 3; ++s) save_dataset(dir / kSplitFiles[s], make(offsets[s], sizes[s]));
}

}  // namespace

std::string_view task_name(Task task) { return task == Task::nbody ? "nbody" : "denoise"; }

Task parse_task(std::string_view name) {
  if (name == "nbody") return Task::nbody;
  if (name == "denoise") return Task::denoise;
  throw ContractError("datasets", "parse_task", "unknown task '" + std::string(name) + "'");
}

void SimConfig::validate() const {
  auto fail = [](const std::string& d) { throw ContractError("datasets", "simulate", d); };
  if (n < 1) fail("n must be >= 1");
  if (steps < 1) fail("steps must be >= 1");
  if (!(dt > 0.0)) fail("dt must be > 0");
  if (!(softening > 0.0)) fail("softening must be > 0");
  if (!(pos_std >= 0.0) || !(vel_std >= 0.0)) fail("initial spreads must be >= 0");
}

Sample simulate(const SimConfig& cfg, std::uint64_t sample_seed, const SimObserver& observer) {
  cfg.validate();
  auto rng = sample_rng(cfg.seed, sample_seed);
  std::normal_distribution<double> pos(0.0, cfg.pos_std), vel(0.0, cfg.vel_std);
  std::bernoulli_distribution coin(0.5);
  std::vector<double> x(cfg.n * 3), v(cfg.n * 3), q(cfg.n);
  for (auto& c : x) c = pos(rng);
  for (auto& c : v) c = vel(rng);
  for (auto& c : q) c = coin(rng) ? 1.0 : -1.0;
  return simulate_from(cfg, std::move(x), std::move(v), std::move(q), observer);
}

Sample simulate_from(const SimConfig& cfg, std::vector<double> positions, std::vector<double> velocities,
                     std::vector<double> charges, const SimObserver& observer) {
  cfg.validate();
  const std::size_t n = charges.size();
  if (positions.size() != n * 3 || velocities.size() != n * 3) {
    throw ShapeError("datasets", "simulate", "initial conditions do not match " + std::to_string(n) + " particles");
  }
  Sample s;
  s.positions = positions;
  s.velocities = velocities;
  s.attributes = charges;

  std::vector<double>& x = positions;
  std::vector<double>& v = velocities;
  std::vector<double> a(n * 3);
  accelerations(cfg, x, charges, a);
  if (observer) observer(0, x, v);
  const double half = 0.5 * cfg.dt;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (std::size_t i = 0; i < n * 3; ++i) v[i] += half * a[i];
    for (std::size_t i = 0; i < n * 3; ++i) x[i] += cfg.dt * v[i];
    accelerations(cfg, x, charges, a);
    for (std::size_t i = 0; i < n * 3; ++i) v[i] += half * a[i];
    if (!all_finite(x) || !all_finite(v)) {
      throw SimulationDivergedError("datasets", "simulate", "non-finite state at step " + std::to_string(step));
    }
    if (observer) observer(step, x, v);
  }
  s.targets = std::move(x);
  return s;
}

double total_energy(const SimConfig& cfg, std::span<const double> positions, std::span<const double> velocities,
                    std::span<const double> charges) {
  double kinetic = 0.0, potential = 0.0;
  for (double c : velocities) kinetic += 0.5 * c * c;
  const std::size_t n = charges.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double r2 = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        const double d = positions[i * 3 + k] - positions[j * 3 + k];
        r2 += d * d;
      }
      potential += cfg.coupling * charges[i] * charges[j] / std::sqrt(r2 + cfg.softening);
    }
  }
  return kinetic + potential;
}

std::array<double, 3> total_momentum(std::span<const double> velocities) {
  std::array<double, 3> p{};
  for (std::size_t i = 0; i < velocities.size(); ++i) p[i % 3] += velocities[i];
  return p;
}

std::array<std::uint64_t, 3> split_offsets(const SplitCounts& counts) {
  return {0, counts.train, counts.train + counts.val};
}

Dataset make_nbody(const SimConfig& cfg, std::uint64_t first_seed, std::size_t count, std::size_t threads) {
  cfg.validate();
  return make_split(Task::nbody, cfg.n, first_seed, count, threads,
                    [&](std::uint64_t seed) { return simulate(cfg, seed); });
}

void generate_nbody(const SplitCounts& counts, const SimConfig& cfg, const std::filesystem::path& dir,
                    std::size_t threads) {
  write_splits(counts, dir, [&](std::uint64_t first, std::size_t count) {
    return make_nbody(cfg, first, count, threads);
  });
}

void ChainConfig::validate() const {
  if (chain_len < 17) {
    throw GraphTooSmallError("datasets", "generate_chain_denoise",
                             "chain length " + std::to_string(chain_len) + " is below the 17 nodes k = 16 needs");
  }
  if (!(noise_std >= 0.0)) throw ContractError("datasets", "generate_chain_denoise", "noise_std must be >= 0");
  if (!(step > 0.0)) throw ContractError("datasets", "generate_chain_denoise", "step must be > 0");
  if (!(persistence >= 0.0 && persistence < 1.0)) {
    throw ContractError("datasets", "generate_chain_denoise", "persistence must be in [0, 1)");
  }
}

std::vector<double> chain_walk(const ChainConfig& cfg, std::uint64_t sample_seed) {
  cfg.validate();
  auto rng = sample_rng(cfg.seed, sample_seed);
  return walk(cfg, rng);
}

Sample make_chain_sample(const ChainConfig& cfg, std::uint64_t sample_seed) {
  cfg.validate();
  auto rng = sample_rng(cfg.seed, sample_seed);
  Sample s;
  s.targets = walk(cfg, rng);
  s.positions = s.targets;
  std::normal_distribution<double> noise(0.0, cfg.noise_std);
  if (cfg.noise_std > 0.0) {
    for (auto& c : s.positions) c += noise(rng);
  }
  s.velocities.assign(cfg.chain_len * 3, 0.0);
  s.attributes.resize(cfg.chain_len);
  for (std::size_t i = 0; i < cfg.chain_len; ++i) s.attributes[i] = static_cast<double>(i % 3);
  return s;
}

Dataset make_chain_denoise(const ChainConfig& cfg, std::uint64_t first_seed, std::size_t count, std::size_t threads) {
  cfg.validate();
  return make_split(Task::denoise, cfg.chain_len, first_seed, count, threads,
                    [&](std::uint64_t seed) { return make_chain_sample(cfg, seed); });
}

void generate_chain_denoise(const SplitCounts& counts, const ChainConfig& cfg, const std::filesystem::path& dir,
                            std::size_t threads) {
  cfg.validate();
  write_splits(counts, dir, [&](std::uint64_t first, std::size_t count) {
    return make_chain_denoise(cfg, first, count, threads);
  });
}

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset) {
  io::ByteWriter w;
  w.bytes(kDatasetMagic);
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dataset.task));
  w.put<std::uint64_t>(dataset.samples.size());
  w.put<std::uint64_t>(dataset.nodes);
  const std::size_t n = dataset.nodes;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    if (s.positions.size() != n * 3 || s.velocities.size() != n * 3 || s.attributes.size() != n ||
        s.targets.size() != n * 3) {
      throw ShapeError("datasets", "save_dataset", "sample " + std::to_string(i) + " does not have " +
                                                       std::to_string(n) + " nodes");
    }
    for (const auto* block : {&s.positions, &s.velocities, &s.attributes, &s.targets}) {
      for (double x : *block) w.put<double>(x);
    }
  }
  return w.buffer();
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes, dataset_truncated);
  if (r.bytes(4, "magic") != kDatasetMagic) {
    throw FormatError("datasets", "load_dataset", "bad magic at byte offset 0, expected \"MVDS\"");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kDatasetVersion) {
    throw FormatError("datasets", "load_dataset",
                      "unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  const auto tag = r.get<std::uint8_t>("task");
  if (tag > 1) throw FormatError("datasets", "load_dataset", "unknown task tag " + std::to_string(tag) + " at byte offset 8");
  const auto count = r.get<std::uint64_t>("sample count");
  const auto nodes = r.get<std::uint64_t>("node count");
  const std::uint64_t per_sample = nodes * 10 * sizeof(double);
  if (nodes != 0 && (per_sample / nodes != 10 * sizeof(double) || count > r.remaining() / per_sample)) {
    throw FormatError("datasets", "load_dataset",
                      "truncated dataset: " + std::to_string(count) + " samples of " + std::to_string(nodes) +
                          " nodes do not fit in the " + std::to_string(r.remaining()) +
                          " bytes after byte offset " + std::to_string(r.offset()));
  }
  Dataset ds;
  ds.task = static_cast<Task>(tag);
  ds.nodes = nodes;
  ds.samples.resize(count);
  for (auto& s : ds.samples) {
    for (auto [block, len] : {std::pair{&s.positions, nodes * 3}, std::pair{&s.velocities, nodes * 3},
                              std::pair{&s.attributes, nodes}, std::pair{&s.targets, nodes * 3}}) {
      block->resize(len);
      for (auto& x : *block) x = r.get<double>("sample values");
    }
  }
  if (r.remaining() != 0) {
    throw FormatError("datasets", "load_dataset", "trailing bytes at byte offset " + std::to_string(r.offset()));
  }
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  io::write_file(path, encode_dataset(dataset), "datasets", "save_dataset");
}

Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path, "datasets", "load_dataset"));
}

double baseline_mse(const Dataset& dataset, const std::function<std::vector<double>(const Sample&)>& prediction) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : dataset.samples) {
    const auto p = prediction(s);
    for (std::size_t i = 0; i < s.targets.size(); ++i) {
      const double d = p[i] - s.targets[i];
      total += d * d;
    }
    count += s.targets.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

std::vector<double> linear_extrapolation(const Sample& sample, const SimConfig& cfg) {
  std::vector<double> out(sample.positions);
  const double horizon = cfg.dt * static_cast<double>(cfg.steps);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += sample.velocities[i] * horizon;
  return out;
}

}  // namespace mvgnn::data
