#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major arrays.
//
// A Tensor is a shared handle to a node. When a Tape is active on the current
// thread (see TapeScope) and an op has at least one input requiring gradients,
// the op records its output node on that tape together with a closure that
// propagates the output gradient to its parents. Without an active tape every
// op is a plain forward evaluation and records nothing.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mvgnn::diff {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

enum class Precision { f64, f32 };

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Node(Shape s, std::vector<double> v, bool rg);
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Allocates (zero-filled) on first use.
  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; intended for parameters, optimizers and test fixtures.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // A fresh leaf holding a copy of the values (no tape history).
  Tensor detach(bool requires_grad = false) const;

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_result(Shape, std::vector<double>, const std::vector<Tensor>&,
                            std::function<void(detail::Node&)>);
};

// One computation tape. Confined to one thread at a time.
class Tape {
 public:
  void record(std::shared_ptr<detail::Node> node);
  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() noexcept { nodes_.clear(); }

  // Reverse-topological accumulation from a scalar loss; gradients land in
  // every leaf that requires them. Throws ContractError on non-scalar loss or
  // a loss that was not recorded on this tape.
  void backward(const Tensor& loss);

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// Activates a tape on the current thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

// Per-thread numeric mode. In f32 mode every op output is rounded to single
// precision before it is stored.
class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision previous_;
};

Precision active_precision() noexcept;

// Bytes currently held by tensor values and gradients, and the peak since the
// last reset. Process-wide.
struct TensorMemory {
  static std::size_t current() noexcept;
  static std::size_t peak() noexcept;
  static void reset_peak() noexcept;
};

// Keeps large freed buffers in the heap so repeated training steps do not
// return and re-fault their pages. Process-wide; call once from main.
void tune_allocator();

// Builds an op output. When recording, the inputs become the node's parents
// (in order) and `backward` is attached; it should read node.grad and
// accumulate into the grad_buffer() of each parent that requires gradients.
Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   std::function<void(detail::Node&)> backward);

}  // namespace mvgnn::diff
