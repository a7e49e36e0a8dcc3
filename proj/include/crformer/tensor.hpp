#pragma once

// Dense row-major tensors and the reverse-mode gradient tape they record on.
//
// Tensor values are immutable once constructed and share their buffer on copy,
// so copies are cheap and safe to hand between threads. A tensor becomes
// differentiable by binding it to a Tape with Tape::leaf(); every primitive op
// whose inputs include a bound tensor records a backward rule on that tape.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crformer {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tape;
template <typename T>
class Gradients;

namespace detail {
template <typename T>
struct TapeState;
}

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  /// Zero-filled tensor.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> data);

  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }

  std::span<const T> data() const;
  /// Writable view. Detaches from any tape and from buffers shared with
  /// other tensors (copy-on-write).
  std::span<T> mutable_data();
  std::vector<T> to_vector() const;
  const std::shared_ptr<const std::vector<T>> storage() const { return data_; }

  T item() const;
  T operator[](std::size_t flat) const { return (*data_)[flat]; }
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool flag);

  /// Node handle on the owning tape, if this tensor is being tracked.
  std::optional<std::size_t> node() const;
  bool tracked() const { return tape_ != nullptr; }

  /// Copy of the values with no tape binding.
  Tensor detach() const;

  /// Same buffer, new extents, detached from any tape. Throws DimensionError
  /// on element-count mismatch.
  Tensor with_shape(Shape shape) const;

 private:
  friend class Tape<T>;
  friend class Gradients<T>;
  template <typename U>
  friend struct detail::TapeState;

  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  bool requires_grad_ = false;
  std::shared_ptr<detail::TapeState<T>> tape_;
  std::size_t node_ = 0;
};

/// Gradients produced by one backward pass, keyed by leaf node.
template <typename T>
class Gradients {
 public:
  /// Gradient of the loss with respect to `leaf`. Leaves unreachable from the
  /// loss yield zeros. Throws ContractError for tensors that were never bound
  /// as leaves of the tape that produced these gradients.
  Tensor<T> of(const Tensor<T>& leaf) const;

 private:
  friend class Tape<T>;
  std::shared_ptr<detail::TapeState<T>> tape_;
  std::vector<std::optional<std::vector<T>>> grads_;
};

/// Ordered record of primitive ops for one model evaluation.
template <typename T>
class Tape {
 public:
  Tape();

  /// Returns a copy of `value` bound to a fresh leaf node with requires_grad set.
  Tensor<T> leaf(const Tensor<T>& value);

  /// Reverse pass from a one-element loss. Does not mutate the tape, so it can
  /// be replayed.
  Gradients<T> backward(const Tensor<T>& loss) const;

  std::size_t num_ops() const;
  std::size_t num_nodes() const;

 private:
  std::shared_ptr<detail::TapeState<T>> state_;
};

/// Backward rule: receives the output gradient and one writable gradient span
/// per input (empty when that input is not tracked); must accumulate (+=).
template <typename T>
using BackwardRule = std::function<void(std::span<const T>, std::vector<std::span<T>>&)>;

/// Records `out` as the result of a primitive op over `inputs`. Untracked when
/// no input is tracked. Throws ContractError when inputs live on different tapes.
template <typename T>
Tensor<T> record_op(const char* name, Tensor<T> out, const std::vector<const Tensor<T>*>& inputs,
                    BackwardRule<T> rule);

template <typename T, typename U>
Tensor<T> tensor_cast(const Tensor<U>& src) {
  std::vector<T> out(src.numel());
  auto in = src.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(in[i]);
  return Tensor<T>(src.shape(), std::move(out));
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;
extern template class Gradients<float>;
extern template class Gradients<double>;

}  // namespace crformer
