#include "mvgnn/parameters.hpp"

#include <cmath>
#include <fstream>

#include "mvgnn/binary_io.hpp"
#include "mvgnn/error.hpp"

namespace mvgnn {

namespace io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path, const char* module, const char* op) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(module, op, "cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError(module, op, "read failure on '" + path.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes, const char* module,
                const char* op) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(module, op, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(module, op, "write failure on '" + path.string() + "'");
}

}  // namespace io

namespace diff {

Tensor ParameterStore::add(const std::string& name, Tensor value, bool trainable) {
  if (entries_.count(name)) throw ContractError("diffgraph", "ParameterStore", "duplicate parameter '" + name + "'");
  Tensor leaf = value.detach(trainable);
  entries_.emplace(name, Entry{leaf, trainable});
  return leaf;
}

Tensor ParameterStore::add_uniform(const std::string& name, Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(shape_numel(shape));
  for (auto& x : data) x = dist(rng);
  return add(name, Tensor(std::move(shape), std::move(data)), true);
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("diffgraph", "ParameterStore", "unknown parameter '" + name + "'");
  return it->second.tensor;
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("diffgraph", "ParameterStore", "unknown parameter '" + name + "'");
  return it->second.tensor;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.tensor.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, e] : entries_) e.tensor.zero_grad();
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
  if (other.entries_.size() != entries_.size()) {
    throw ContractError("diffgraph", "ParameterStore", "parameter count mismatch");
  }
  for (auto& [name, e] : entries_) {
    const Tensor& src = other.at(name);
    if (src.shape() != e.tensor.shape()) {
      throw ContractError("diffgraph", "ParameterStore", "shape mismatch for '" + name + "'");
    }
    auto dst = e.tensor.mutable_data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
}

ParameterStore ParameterStore::clone() const {
  ParameterStore out;
  for (const auto& [name, e] : entries_) out.add(name, e.tensor, e.trainable);
  return out;
}

Gradients backward(Tape& tape, const Tensor& loss, ParameterStore& params) {
  params.zero_grad();
  tape.backward(loss);
  Gradients grads;
  for (const auto& [name, e] : params.entries()) {
    if (!e.trainable) continue;
    if (e.tensor.has_grad()) {
      grads[name] = std::vector<double>(e.tensor.grad().begin(), e.tensor.grad().end());
    } else {
      grads[name] = std::vector<double>(e.tensor.numel(), 0.0);
    }
  }
  return grads;
}

double gradient_norm(const Gradients& grads) {
  double sq = 0.0;
  for (const auto& [_, g] : grads)
    for (double x : g) sq += x * x;
  return std::sqrt(sq);
}

double clip_gradient_norm(Gradients& grads, double max_norm) {
  const double norm = gradient_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [_, g] : grads)
      for (auto& x : g) x *= scale;
  }
  return norm;
}

void Adam::step(ParameterStore& params, const Gradients& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, e] : params.entries()) {
    if (!e.trainable) continue;
    auto git = grads.find(name);
    if (git == grads.end()) throw ContractError("diffgraph", "adam_step", "missing gradient for '" + name + "'");
    const auto& g = git->second;
    auto p = params.at(name).mutable_data();
    if (g.size() != p.size()) throw ContractError("diffgraph", "adam_step", "gradient size mismatch for '" + name + "'");
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= 1.0 - cfg_.lr * cfg_.weight_decay;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

namespace {

constexpr std::string_view kCheckpointMagic = "MVGN";

[[noreturn]] void checkpoint_truncated(std::size_t offset, const char* what) {
  throw FormatError("diffgraph", "load_checkpoint",
                    std::string("truncated checkpoint while reading ") + what + " at byte offset " +
                        std::to_string(offset));
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParameterStore& params) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, e] : params.entries()) {
    if (name.size() > 0xFFFF) throw ContractError("diffgraph", "save_checkpoint", "parameter name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    const auto& shape = e.tensor.shape();
    w.put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
    for (auto ext : shape) w.put<std::uint64_t>(ext);
    for (double x : e.tensor.data()) w.put<double>(x);
  }
  return w.buffer();
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params) {
  io::write_file(path, encode_checkpoint(params), "diffgraph", "save_checkpoint");
}

void decode_checkpoint(const std::vector<std::uint8_t>& bytes, ParameterStore& params) {
  io::ByteReader r(bytes, checkpoint_truncated);
  const std::string magic = r.bytes(4, "magic");
  if (magic != kCheckpointMagic) {
    throw FormatError("diffgraph", "load_checkpoint", "bad magic at byte offset 0, expected \"MVGN\"");
  }
  const auto version_offset = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("diffgraph", "load_checkpoint",
                      "unsupported version " + std::to_string(version) + " at byte offset " +
                          std::to_string(version_offset));
  }
  const auto count = r.get<std::uint32_t>("parameter count");
  if (count != params.size()) {
    throw ContractError("diffgraph", "load_checkpoint",
                        "checkpoint holds " + std::to_string(count) + " parameters, model expects " +
                            std::to_string(params.size()));
  }
  // Decode fully before touching the store so a bad file leaves it unchanged.
  std::vector<std::pair<std::string, std::vector<double>>> decoded;
  for (std::uint32_t p = 0; p < count; ++p) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name = r.bytes(len, "name");
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape;
    for (std::uint8_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("extent")));
    if (!params.contains(name)) {
      throw ContractError("diffgraph", "load_checkpoint", "unexpected parameter '" + name + "'");
    }
    if (params.at(name).shape() != shape) {
      throw ContractError("diffgraph", "load_checkpoint",
                          "shape mismatch for '" + name + "': checkpoint " + shape_to_string(shape) + ", model " +
                              shape_to_string(params.at(name).shape()));
    }
    std::vector<double> data(shape_numel(shape));
    for (auto& x : data) x = r.get<double>("payload");
    decoded.emplace_back(std::move(name), std::move(data));
  }
  if (r.remaining() != 0) {
    throw FormatError("diffgraph", "load_checkpoint", "trailing bytes at byte offset " + std::to_string(r.offset()));
  }
  for (auto& [name, data] : decoded) {
    auto dst = params.at(name).mutable_data();
    std::copy(data.begin(), data.end(), dst.begin());
  }
}

void load_checkpoint(const std::filesystem::path& path, ParameterStore& params) {
  decode_checkpoint(io::read_file(path, "diffgraph", "load_checkpoint"), params);
}

}  // namespace diff
}  // namespace mvgnn
