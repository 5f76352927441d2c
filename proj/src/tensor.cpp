#include "mvgnn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <malloc.h>
#include <sstream>
#include <unordered_set>

#include "mvgnn/error.hpp"

namespace mvgnn::diff {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local Precision g_precision = Precision::f64;

std::atomic<std::size_t> g_current_bytes{0};
std::atomic<std::size_t> g_peak_bytes{0};

void track_alloc(std::size_t bytes) {
  const std::size_t now = g_current_bytes.fetch_add(bytes) + bytes;
  std::size_t peak = g_peak_bytes.load();
  while (now > peak && !g_peak_bytes.compare_exchange_weak(peak, now)) {
  }
}

void track_free(std::size_t bytes) { g_current_bytes.fetch_sub(bytes); }

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

namespace detail {

Node::Node(Shape s, std::vector<double> v, bool rg) : shape(std::move(s)), value(std::move(v)), requires_grad(rg) {
  track_alloc(value.size() * sizeof(double));
}

Node::~Node() { track_free((value.size() + grad.size()) * sizeof(double)); }

std::vector<double>& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) {
    grad.assign(value.size(), 0.0);
    track_alloc(grad.size() * sizeof(double));
  }
  return grad;
}

}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("diffgraph", "Tensor", "data length " + std::to_string(data.size()) +
                                                " does not match shape " + shape_to_string(shape));
  }
  node_ = std::make_shared<detail::Node>(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor(Shape{}, {value}, requires_grad); }

namespace {
const detail::Node& checked(const std::shared_ptr<detail::Node>& n) {
  if (!n) throw ContractError("diffgraph", "Tensor", "use of an undefined tensor");
  return *n;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::extent(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("diffgraph", "Tensor", "axis " + std::to_string(axis) + " out of range for shape " +
                                                shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

std::span<double> Tensor::mutable_data() {
  checked(node_);
  return node_->value;
}

double Tensor::item() const {
  const auto& n = checked(node_);
  if (n.value.size() != 1) {
    throw ShapeError("diffgraph", "item", "tensor of shape " + shape_to_string(n.shape) + " is not a scalar");
  }
  return n.value[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(node_).grad; }

void Tensor::zero_grad() {
  checked(node_);
  track_free(node_->grad.size() * sizeof(double));
  node_->grad.clear();
  node_->grad.shrink_to_fit();
}

Tensor Tensor::detach(bool requires_grad) const {
  const auto& n = checked(node_);
  return Tensor(n.shape, n.value, requires_grad);
}

void Tape::record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("diffgraph", "backward",
                        "loss must be a scalar tensor, got shape " +
                            (loss.defined() ? shape_to_string(loss.shape()) : std::string("<undefined>")));
  }
  auto* root = loss.node();
  if (!root->requires_grad) {
    throw ContractError("diffgraph", "backward", "loss does not depend on any tensor that requires gradients");
  }
  const bool leaf_loss = !root->backward;
  if (!leaf_loss) {
    const bool on_tape = std::any_of(nodes_.begin(), nodes_.end(), [&](const auto& n) { return n.get() == root; });
    if (!on_tape) throw ContractError("diffgraph", "backward", "loss was not recorded on this tape");
  }
  root->grad_buffer()[0] += 1.0;

  // Creation order is a topological order; walk it backwards.
  bool reached = false;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& n = **it;
    if (&n == root) reached = true;
    if (!reached || n.grad.empty() || !n.backward) continue;
    n.backward(n);
  }
  // Intermediate gradients are no longer needed; leaves keep theirs.
  for (auto& n : nodes_) {
    if (n->backward) {
      track_free(n->grad.size() * sizeof(double));
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

PrecisionScope::PrecisionScope(Precision p) : previous_(g_precision) { g_precision = p; }
PrecisionScope::~PrecisionScope() { g_precision = previous_; }

Precision active_precision() noexcept { return g_precision; }

std::size_t TensorMemory::current() noexcept { return g_current_bytes.load(); }
std::size_t TensorMemory::peak() noexcept { return g_peak_bytes.load(); }
void TensorMemory::reset_peak() noexcept { g_peak_bytes.store(g_current_bytes.load()); }

Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   std::function<void(detail::Node&)> backward) {
  if (g_precision == Precision::f32) {
    for (auto& x : value) x = static_cast<double>(static_cast<float>(x));
  }
  Tape* tape = g_active_tape;
  bool needs_grad = false;
  if (tape != nullptr) {
    for (const auto& in : inputs) needs_grad = needs_grad || (in.defined() && in.node()->requires_grad);
  }
  auto node = std::make_shared<detail::Node>(std::move(shape), std::move(value), needs_grad);
  if (needs_grad) {
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

}  // namespace mvgnn::diff
