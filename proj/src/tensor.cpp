#include "crformer/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <utility>

#include "crformer/error.hpp"
#include "crformer/instrument.hpp"

namespace crformer {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct TapeState {
  struct Op {
    const char* name;
    std::vector<std::optional<std::size_t>> inputs;
    std::size_t output;
    BackwardRule<T> rule;
  };

  std::vector<Shape> node_shapes;
  std::vector<bool> is_leaf;
  std::vector<Op> ops;

  std::size_t add_node(const Shape& shape, bool leaf) {
    node_shapes.push_back(shape);
    is_leaf.push_back(leaf);
    return node_shapes.size() - 1;
  }

  static Tensor<T> bind(const std::shared_ptr<TapeState>& self, Tensor<T> t, std::size_t node) {
    t.tape_ = self;
    t.node_ = node;
    t.requires_grad_ = true;
    return t;
  }

  static Tensor<T> record(const char* name, Tensor<T> out, const std::vector<const Tensor<T>*>& inputs,
                          BackwardRule<T> rule) {
    OpCounter::count();
    std::shared_ptr<TapeState> tape;
    for (const auto* in : inputs) {
      if (!in->tape_) continue;
      if (tape && tape != in->tape_) {
        throw ContractError(std::string(name) + ": inputs are recorded on different tapes");
      }
      tape = in->tape_;
    }
    out.tape_.reset();
    out.requires_grad_ = false;
    if (!tape) return out;

    Op op{name, {}, 0, std::move(rule)};
    op.inputs.reserve(inputs.size());
    for (const auto* in : inputs) {
      op.inputs.push_back(in->tape_ ? std::optional<std::size_t>(in->node_) : std::nullopt);
    }
    op.output = tape->add_node(out.shape_, false);
    const std::size_t node = op.output;
    tape->ops.push_back(std::move(op));
    return bind(tape, std::move(out), node);
  }
};

}  // namespace detail

template <typename T>
Tensor<T>::Tensor(Shape shape) : Tensor(shape, std::vector<T>(crformer::numel(shape), T(0))) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)) {
  for (auto e : shape_) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
  }
  if (crformer::numel(shape_) != data.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape_) + " given " +
                         std::to_string(data.size()) + " values");
  }
  data_ = std::make_shared<std::vector<T>>(std::move(data));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = crformer::numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!data_) return {};
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<T>>(*data_);
  tape_.reset();
  node_ = 0;
  // The buffer was allocated non-const and is now uniquely owned.
  auto& buf = const_cast<std::vector<T>&>(*data_);
  return {buf.data(), buf.size()};
}

template <typename T>
std::vector<T> Tensor<T>::to_vector() const {
  return data_ ? *data_ : std::vector<T>{};
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw DimensionError("index rank mismatch for " + shape_str(shape_));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of range for " + shape_str(shape_));
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return (*data_)[flat];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  requires_grad_ = flag;
  return *this;
}

template <typename T>
std::optional<std::size_t> Tensor<T>::node() const {
  return tape_ ? std::optional<std::size_t>(node_) : std::nullopt;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out;
  out.shape_ = shape_;
  out.data_ = data_;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::with_shape(Shape shape) const {
  if (crformer::numel(shape) != numel()) {
    throw DimensionError("cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  Tensor out = detach();
  out.shape_ = std::move(shape);
  return out;
}

template <typename T>
Tensor<T> Gradients<T>::of(const Tensor<T>& leaf) const {
  if (!leaf.tape_ || leaf.tape_ != tape_) {
    throw ContractError("gradient requested for a tensor that is not a leaf of this tape");
  }
  if (!tape_->is_leaf[leaf.node_]) {
    throw ContractError("gradient requested for an intermediate tensor");
  }
  const auto& g = grads_[leaf.node_];
  if (!g) return Tensor<T>(leaf.shape_);
  return Tensor<T>(leaf.shape_, *g);
}

template <typename T>
Tape<T>::Tape() : state_(std::make_shared<detail::TapeState<T>>()) {}

template <typename T>
Tensor<T> Tape<T>::leaf(const Tensor<T>& value) {
  if (!value.defined()) throw ContractError("cannot bind an undefined tensor");
  const auto node = state_->add_node(value.shape_, true);
  return detail::TapeState<T>::bind(state_, value.detach(), node);
}

template <typename T>
Gradients<T> Tape<T>::backward(const Tensor<T>& loss) const {
  if (loss.numel() != 1) {
    throw ContractError("backward needs a one-element loss, got shape " + shape_str(loss.shape_));
  }
  Gradients<T> out;
  out.tape_ = state_;
  out.grads_.resize(state_->node_shapes.size());
  if (!loss.tape_) return out;
  if (loss.tape_ != state_) throw ContractError("loss was recorded on a different tape");

  auto& grads = out.grads_;
  grads[loss.node_] = std::vector<T>{T(1)};
  std::vector<std::span<T>> slots;
  for (auto it = state_->ops.rbegin(); it != state_->ops.rend(); ++it) {
    auto& g_out = grads[it->output];
    if (!g_out) continue;
    slots.clear();
    for (const auto& in : it->inputs) {
      if (!in) {
        slots.emplace_back();
        continue;
      }
      auto& g_in = grads[*in];
      if (!g_in) g_in.emplace(numel(state_->node_shapes[*in]), T(0));
      slots.emplace_back(g_in->data(), g_in->size());
    }
    it->rule(std::span<const T>(g_out->data(), g_out->size()), slots);
    g_out.reset();
  }
  return out;
}

template <typename T>
std::size_t Tape<T>::num_ops() const {
  return state_->ops.size();
}

template <typename T>
std::size_t Tape<T>::num_nodes() const {
  return state_->node_shapes.size();
}

template <typename T>
Tensor<T> record_op(const char* name, Tensor<T> out, const std::vector<const Tensor<T>*>& inputs,
                    BackwardRule<T> rule) {
  return detail::TapeState<T>::record(name, std::move(out), inputs, std::move(rule));
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class Gradients<float>;
template class Gradients<double>;
template Tensor<float> record_op(const char*, Tensor<float>, const std::vector<const Tensor<float>*>&,
                                 BackwardRule<float>);
template Tensor<double> record_op(const char*, Tensor<double>, const std::vector<const Tensor<double>*>&,
                                  BackwardRule<double>);

}  // namespace crformer
