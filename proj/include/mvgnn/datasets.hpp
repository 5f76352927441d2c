#pragma once

// Charged-particle N-body simulator, synthetic chain-denoising generator and
// the MVDS dataset container.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

namespace mvgnn::data {

enum class Task : std::uint8_t { nbody = 0, denoise = 1 };

std::string_view task_name(Task task);
// Throws ContractError for an unknown name.
Task parse_task(std::string_view name);

// Per-node arrays are flat and row-major: positions/velocities/targets hold
// n*3 values, attributes holds n (charges for nbody, roles 0/1/2 for denoise).
struct Sample {
  std::vector<double> positions;
  std::vector<double> velocities;
  std::vector<double> attributes;
  std::vector<double> targets;

  std::size_t nodes() const noexcept { return attributes.size(); }
};

struct Dataset {
  Task task = Task::nbody;
  std::size_t nodes = 0;
  std::vector<Sample> samples;
};

struct SimConfig {
  std::size_t n = 5;
  std::size_t steps = 1000;
  double dt = 1e-3;
  double softening = 0.01;
  double coupling = 1.0;
  double pos_std = 1.0;
  double vel_std = 0.5;
  std::uint64_t seed = 0;

  // Throws ContractError.
  void validate() const;
};

// Called with (step, positions, velocities) for step = 0 (initial state)
// through cfg.steps.
using SimObserver = std::function<void(std::size_t, std::span<const double>, std::span<const double>)>;

// Draws initial conditions from (cfg.seed, sample_seed) and integrates.
Sample simulate(const SimConfig& cfg, std::uint64_t sample_seed, const SimObserver& observer = {});

// Integrates explicit initial conditions with kick-drift-kick leapfrog.
// Throws SimulationDivergedError naming the step on a non-finite state.
Sample simulate_from(const SimConfig& cfg, std::vector<double> positions, std::vector<double> velocities,
                     std::vector<double> charges, const SimObserver& observer = {});

// Kinetic plus softened Coulomb potential energy, unit masses.
double total_energy(const SimConfig& cfg, std::span<const double> positions, std::span<const double> velocities,
                    std::span<const double> charges);
std::array<double, 3> total_momentum(std::span<const double> velocities);

struct SplitCounts {
  std::size_t train = 3000;
  std::size_t val = 2000;
  std::size_t test = 2000;
};

// First sample seed of each split: 0, train, train + val.
std::array<std::uint64_t, 3> split_offsets(const SplitCounts& counts);
inline constexpr std::array<std::string_view, 3> kSplitFiles = {"train.mvds", "val.mvds", "test.mvds"};

// Samples first_seed .. first_seed + count - 1, generated on `threads` workers.
Dataset make_nbody(const SimConfig& cfg, std::uint64_t first_seed, std::size_t count, std::size_t threads = 1);
// Writes train.mvds, val.mvds and test.mvds into dir.
void generate_nbody(const SplitCounts& counts, const SimConfig& cfg, const std::filesystem::path& dir,
                    std::size_t threads = 1);

struct ChainConfig {
  std::size_t chain_len = 48;
  double noise_std = 0.5;
  double step = 1.0;
  double persistence = 0.8;
  std::uint64_t seed = 0;

  // Throws GraphTooSmallError when chain_len < 17, ContractError otherwise.
  void validate() const;
};

// Clean chain coordinates (n*3) for one sample seed.
std::vector<double> chain_walk(const ChainConfig& cfg, std::uint64_t sample_seed);
Sample make_chain_sample(const ChainConfig& cfg, std::uint64_t sample_seed);
Dataset make_chain_denoise(const ChainConfig& cfg, std::uint64_t first_seed, std::size_t count,
                           std::size_t threads = 1);
void generate_chain_denoise(const SplitCounts& counts, const ChainConfig& cfg, const std::filesystem::path& dir,
                            std::size_t threads = 1);

// Container:
//   "MVDS" | u32 version | u8 task | u64 count | u64 nodes |
//   per sample float64: positions (n*3), velocities (n*3), attributes (n), targets (n*3).
inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
// Throws FormatError with the byte offset; nothing is returned on failure.
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);

// Mean squared error of predicting `prediction(sample)` for every target
// coordinate, averaged over all coordinates of all samples.
double baseline_mse(const Dataset& dataset, const std::function<std::vector<double>(const Sample&)>& prediction);
// x0 + v0 * dt * steps.
std::vector<double> linear_extrapolation(const Sample& sample, const SimConfig& cfg);

}  // namespace mvgnn::data
