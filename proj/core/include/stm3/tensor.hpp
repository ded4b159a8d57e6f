#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace stm3 {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

/// Dense row-major array of doubles.
///
/// Storage is shared between copies and reshapes, and is treated as
/// immutable once an operation has produced it. Only parameters (tensors
/// with requires_grad set) are mutated in place, and only between steps.
///
/// A tensor participates in differentiation in one of two ways: it is a
/// parameter, in which case every tape that sees it creates a leaf for it,
/// or it was produced by an operation while a tape was active, in which
/// case it refers to that tape's node.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor eye(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_->size(); }

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  /// Mutable access to the shared storage. Reserved for parameters and
  /// freshly created tensors.
  std::span<double> mutable_data() { return {data_->data(), data_->size()}; }

  double item() const;
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on = true);

  /// True when recorded on (or a parameter visible to) the active tape.
  bool tracked() const;

  /// Same values, no tape history, not a parameter.
  Tensor detach() const;
  /// Deep copy of the values; keeps the parameter flag, drops the history.
  Tensor clone() const;

  /// Storage identity, used to key parameter gradients.
  const void* storage_id() const { return data_.get(); }

 private:
  friend class Tape;
  friend class OpRecorder;

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
  Tape* tape_ = nullptr;
  std::int64_t node_ = -1;
};

/// Gradient buffers handed to an operation's backward closure.
class BackwardContext {
 public:
  std::span<const double> grad_out() const { return grad_out_; }
  /// Whether input i needs a gradient at all.
  bool needs(std::size_t i) const;
  /// Accumulation buffer for input i (zero-initialized on first use).
  std::span<double> grad_in(std::size_t i);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::span<const std::int64_t> parents, std::span<const double> grad_out)
      : tape_(tape), parents_(parents), grad_out_(grad_out) {}
  Tape& tape_;
  std::span<const std::int64_t> parents_;
  std::span<const double> grad_out_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Gradients of a scalar with respect to the parameters seen on a tape.
class Gradients {
 public:
  /// d loss / d param; zeros when the parameter was not on the path.
  Tensor of(const Tensor& param) const;
  bool contains(const Tensor& param) const;
  std::size_t count() const { return by_storage_.size(); }

 private:
  friend class Tape;
  std::unordered_map<const void*, std::vector<double>> by_storage_;
};

/// Ordered record of operations for reverse-mode differentiation.
/// Single owner; use one tape per thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Reverse sweep from a scalar loss recorded on this tape.
  Gradients backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear();

  /// The tape currently recording on this thread, or nullptr.
  static Tape* active();

 private:
  friend class BackwardContext;
  friend class OpRecorder;
  friend class TapeScope;

  struct Node {
    std::size_t size = 0;
    std::vector<std::int64_t> parents;
    BackwardFn backward;
    const void* leaf_key = nullptr;
    std::vector<double> grad;
  };

  std::int64_t node_of(const Tensor& t);
  std::span<double> grad_buffer(std::int64_t id);

  std::vector<Node> nodes_;
  std::unordered_map<const void*, std::int64_t> leaves_;
};

/// Makes a tape the active recorder for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on the current thread.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// Used by operation implementations: validates the freshly computed output
/// and, when any input is tracked on the active tape, records a node.
class OpRecorder {
 public:
  static Tensor finish(const char* op, Tensor out, std::initializer_list<const Tensor*> inputs,
                       BackwardFn backward);
  static Tensor finish(const char* op, Tensor out, const std::vector<const Tensor*>& inputs,
                       BackwardFn backward);
  /// Output sharing the input's storage (reshape-like views).
  static Tensor view(const Tensor& in, Shape shape);
};

}  // namespace stm3
