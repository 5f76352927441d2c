#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mvgnn/tensor.hpp"

namespace mvgnn::diff {

// Named parameters keyed by dotted path. Iteration is sorted by name.
class ParameterStore {
 public:
  struct Entry {
    Tensor tensor;
    bool trainable = true;
  };

  // Throws ContractError on a duplicate name.
  Tensor add(const std::string& name, Tensor value, bool trainable = true);
  // Uniform in [-bound, bound], drawn from rng in element order.
  Tensor add_uniform(const std::string& name, Shape shape, double bound, std::mt19937_64& rng);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  const std::map<std::string, Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();

  // Copies every value from `other`; names and shapes must match exactly.
  void copy_values_from(const ParameterStore& other);

  // Deep copy with fresh leaves.
  ParameterStore clone() const;

 private:
  std::map<std::string, Entry> entries_;
};

// Gradients keyed by parameter name, aligned with a ParameterStore.
using Gradients = std::map<std::string, std::vector<double>>;

// Clears the parameter gradients, runs tape.backward(loss) and collects the
// gradient of every trainable parameter; parameters the loss does not reach
// get zeros.
Gradients backward(Tape& tape, const Tensor& loss, ParameterStore& params);

// Euclidean norm over all gradient entries.
double gradient_norm(const Gradients& grads);

// Rescales grads so their joint norm is at most max_norm; returns the norm
// before rescaling. max_norm <= 0 leaves grads untouched.
double clip_gradient_norm(Gradients& grads, double max_norm);

struct AdamConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with decoupled weight decay: p <- p(1 - lr*wd), then the Adam update.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  // Throws ContractError if a trainable parameter has no entry in grads.
  void step(ParameterStore& params, const Gradients& grads);

  std::uint64_t steps_taken() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// Binary checkpoint:
//   "MVGN" | u32 version | u32 count |
//   per parameter: u16 name length, UTF-8 name, u8 rank, u64 extents[rank],
//                  float64 payload; all little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params);
std::vector<std::uint8_t> encode_checkpoint(const ParameterStore& params);

// Loads into an existing store; names and shapes must match (ContractError);
// malformed files raise FormatError with the byte offset.
void load_checkpoint(const std::filesystem::path& path, ParameterStore& params);
void decode_checkpoint(const std::vector<std::uint8_t>& bytes, ParameterStore& params);

}  // namespace mvgnn::diff
