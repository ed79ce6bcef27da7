#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "poisonbench/error.hpp"

namespace pb {

using Shape = std::vector<std::size_t>;

enum class DType { float32, float64 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? DType::float32 : DType::float64;
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using VectorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major tensor. Copies share storage (handle semantics, like the
// tape that records them); use clone() for an independent buffer.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() : node_(std::make_shared<detail::TensorNode<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : node_(std::make_shared<detail::TensorNode<T>>()) {
    validate_shape(shape);
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data)
      : node_(std::make_shared<detail::TensorNode<T>>()) {
    validate_shape(shape);
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " elements, got " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* ptr() { return node_->data.data(); }
  const T* ptr() const { return node_->data.data(); }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    }
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  // Allocates a zero gradient buffer on first use.
  std::span<T> grad_buffer() {
    if (node_->grad.empty()) node_->grad.assign(numel(), T(0));
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void clear_grad() { node_->grad.clear(); node_->grad.shrink_to_fit(); }

  // Independent copy of the values; never participates in a tape.
  Tensor clone() const { return Tensor(shape(), node_->data); }
  Tensor detach() const { return clone(); }

  // Sub-tensor of leading-index `i` (copy), e.g. one image of a batch.
  Tensor slice0(std::size_t i) const { return slice0(i, i + 1, true); }
  Tensor slice0(std::size_t begin, std::size_t end, bool drop = false) const {
    if (rank() == 0 || begin > end || end > dim(0)) {
      throw ShapeError("slice0: range [" + std::to_string(begin) + "," +
                       std::to_string(end) + ") out of " + shape_str(shape()));
    }
    const std::size_t inner = numel() / dim(0);
    Shape s = shape();
    if (drop && end - begin == 1 && s.size() > 1) {
      s.erase(s.begin());
    } else {
      s[0] = end - begin;
    }
    std::vector<T> out(node_->data.begin() + static_cast<std::ptrdiff_t>(begin * inner),
                       node_->data.begin() + static_cast<std::ptrdiff_t>(end * inner));
    return Tensor(std::move(s), std::move(out));
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out));
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<detail::TensorNode<T>>& node() const { return node_; }

  ConstMatrixMap<T> matrix() const {
    return ConstMatrixMap<T>(ptr(), static_cast<Eigen::Index>(dim(0)),
                             static_cast<Eigen::Index>(numel() / dim(0)));
  }
  MatrixMap<T> matrix() {
    return MatrixMap<T>(ptr(), static_cast<Eigen::Index>(dim(0)),
                        static_cast<Eigen::Index>(numel() / dim(0)));
  }
  ConstVectorMap<T> vec() const {
    return ConstVectorMap<T>(ptr(), static_cast<Eigen::Index>(numel()));
  }
  VectorMap<T> vec() { return VectorMap<T>(ptr(), static_cast<Eigen::Index>(numel())); }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor: empty shape");
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor: non-positive extent in " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::TensorNode<T>> node_;
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>::zeros(t.shape());
}

// Bitwise equality of values (shape included).
template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
}

// Ordered record of differentiable operations executed while the tape is
// active on the current thread. Replayed in reverse by backward().
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

  struct Record {
    std::string op;
    NodePtr output;
    std::function<void()> backward;
  };

  void record(std::string op, const Tensor<T>& output, std::function<void()> backward) {
    records_.push_back({std::move(op), output.node(), std::move(backward)});
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  // Seeds d(loss)/d(loss) = 1, runs every recorded backward once in reverse
  // execution order, accumulates into requires_grad tensors, then clears.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    auto g = loss.grad_buffer();
    g[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (!it->output->grad.empty()) it->backward();
    }
    records_.clear();
  }

  static Tape*& active() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

 private:
  std::vector<Record> records_;
};

// Activates a tape on the current thread for the lifetime of the scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active()) { Tape<T>::active() = &tape; }
  ~TapeScope() { Tape<T>::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording on the current thread.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGradScope() { Tape<T>::active() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
void backward(Tensor<T>& loss) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) throw Error("backward: no active tape");
  tape->backward(loss);
}

namespace detail {

// Returns the active tape if any input participates in differentiation.
template <typename T, typename... Ts>
Tape<T>* recording_tape(const Ts&... inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  return (inputs.requires_grad() || ...) ? tape : nullptr;
}

}  // namespace detail

}  // namespace pb
