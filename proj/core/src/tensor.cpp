#include "stm3/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "stm3/error.hpp"

namespace stm3 {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : shape_{}, data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(shape_size(shape_), 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(values))) {
  if (data_->size() != shape_size(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_->size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::eye(std::size_t n) {
  Tensor t({n, n});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw DimensionError("index rank mismatch for " + shape_str(shape_));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of range for " + shape_str(shape_));
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return (*data_)[flat];
}

Tensor& Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  return *this;
}

bool Tensor::tracked() const {
  Tape* tape = Tape::active();
  if (!tape) return false;
  return requires_grad_ || (tape_ == tape && node_ >= 0);
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t(shape_, *data_);
  t.requires_grad_ = requires_grad_;
  return t;
}

// ---------------------------------------------------------------------------

bool BackwardContext::needs(std::size_t i) const { return i < parents_.size() && parents_[i] >= 0; }

std::span<double> BackwardContext::grad_in(std::size_t i) {
  if (!needs(i)) return {};
  return tape_.grad_buffer(parents_[i]);
}

Tensor Gradients::of(const Tensor& param) const {
  auto it = by_storage_.find(param.storage_id());
  if (it == by_storage_.end()) return Tensor::zeros(param.shape());
  return Tensor(param.shape(), it->second);
}

bool Gradients::contains(const Tensor& param) const {
  return by_storage_.count(param.storage_id()) != 0;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::clear() {
  nodes_.clear();
  leaves_.clear();
}

std::int64_t Tape::node_of(const Tensor& t) {
  if (t.tape_ == this && t.node_ >= 0) return t.node_;
  if (!t.requires_grad_) return -1;
  const void* key = t.storage_id();
  auto it = leaves_.find(key);
  if (it != leaves_.end()) return it->second;
  Node leaf;
  leaf.size = t.size();
  leaf.leaf_key = key;
  nodes_.push_back(std::move(leaf));
  const auto id = static_cast<std::int64_t>(nodes_.size() - 1);
  leaves_.emplace(key, id);
  return id;
}

std::span<double> Tape::grad_buffer(std::int64_t id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad.assign(n.size, 0.0);
  return n.grad;
}

Gradients Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ArgumentError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  Gradients out;
  if (loss.tape_ != this || loss.node_ < 0) {
    // The loss does not depend on anything tracked here.
    return out;
  }
  grad_buffer(loss.node_)[0] = 1.0;
  // Nodes are appended in execution order, so parents always precede children.
  for (std::int64_t id = loss.node_; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) continue;
    if (n.leaf_key) {
      out.by_storage_[n.leaf_key] = n.grad;
      continue;
    }
    if (!n.backward) continue;
    BackwardContext ctx(*this, n.parents, n.grad);
    n.backward(ctx);
    // Intermediate gradients are no longer needed once propagated.
    std::vector<double>().swap(n.grad);
  }
  return out;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

// ---------------------------------------------------------------------------

namespace {

void check_finite(const char* op, const Tensor& out) {
  for (double v : out.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op + " (shape " +
                         shape_str(out.shape()) + ")");
    }
  }
}

}  // namespace

Tensor OpRecorder::finish(const char* op, Tensor out, const std::vector<const Tensor*>& inputs,
                          BackwardFn backward) {
  check_finite(op, out);
  Tape* tape = Tape::active();
  if (!tape) return out;
  std::vector<std::int64_t> parents;
  parents.reserve(inputs.size());
  bool any = false;
  for (const Tensor* in : inputs) {
    const std::int64_t id = in ? tape->node_of(*in) : -1;
    any = any || id >= 0;
    parents.push_back(id);
  }
  if (!any) return out;
  Tape::Node node;
  node.size = out.size();
  node.parents = std::move(parents);
  node.backward = std::move(backward);
  tape->nodes_.push_back(std::move(node));
  out.tape_ = tape;
  out.node_ = static_cast<std::int64_t>(tape->nodes_.size() - 1);
  out.requires_grad_ = false;
  return out;
}

Tensor OpRecorder::finish(const char* op, Tensor out, std::initializer_list<const Tensor*> inputs,
                          BackwardFn backward) {
  return finish(op, std::move(out), std::vector<const Tensor*>(inputs), std::move(backward));
}

Tensor OpRecorder::view(const Tensor& in, Shape shape) {
  if (shape_size(shape) != in.size()) {
    throw DimensionError("cannot view " + shape_str(in.shape()) + " as " + shape_str(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = in.data_;
  Tape* tape = Tape::active();
  if (!tape) return out;
  const std::int64_t id = tape->node_of(in);
  if (id < 0) return out;
  Tape::Node node;
  node.size = out.size();
  node.parents = {id};
  node.backward = [](BackwardContext& ctx) {
    auto g = ctx.grad_in(0);
    auto go = ctx.grad_out();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
  };
  tape->nodes_.push_back(std::move(node));
  out.tape_ = tape;
  out.node_ = static_cast<std::int64_t>(tape->nodes_.size() - 1);
  return out;
}

}  // namespace stm3
