#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dbp {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

using Shape = std::vector<std::size_t>;
using Buffer = std::vector<double>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

// Gradient rule of one recorded operation. `need[i]` is nonzero when the
// i-th input lies on a path to a wanted leaf; only those entries of
// `grad_in` have to be filled.
using BackwardFn = std::function<void(const Buffer& grad_out,
                                      std::span<Buffer> grad_in,
                                      std::span<const char> need)>;

struct Node {
  Node(const char* name, std::vector<Tensor> inputs, BackwardFn backward,
       bool checkpoint = false);
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  const char* name;
  std::vector<Tensor> inputs;
  BackwardFn backward;
  bool checkpoint;
};

struct TensorImpl {
  Shape shape;
  Buffer data;
  Dtype dtype = Dtype::F64;
  bool requires_grad = false;
  std::optional<Buffer> grad;
  std::shared_ptr<Node> node;
};

}  // namespace detail

// Dense row-major tensor with shared-handle semantics. Copies of a Tensor
// alias the same storage; use clone() or detach() for an independent value.
// Values are held in double precision; F32 tensors have every stored value
// rounded to the nearest float.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Buffer values, Dtype dtype = Dtype::F64,
         bool requires_grad = false);

  static Tensor zeros(Shape shape, Dtype dtype = Dtype::F64);
  static Tensor full(Shape shape, double value, Dtype dtype = Dtype::F64);
  static Tensor scalar(double value, Dtype dtype = Dtype::F64);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  Dtype dtype() const;

  std::span<const double> data() const;
  // Writable view; only valid on leaves (no recorded history).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  // New leaf with a copy of the values and no history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }
  Tensor to(Dtype dtype) const;

  const std::shared_ptr<detail::Node>& node() const;
  detail::TensorImpl* impl() const { return impl_.get(); }

  static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Round every value to float precision when dtype is F32.
void round_to_dtype(Buffer& values, Dtype dtype);

Dtype promote(Dtype a, Dtype b);

bool bitwise_equal(std::span<const double> a, std::span<const double> b);
bool bitwise_equal(const Tensor& a, const Tensor& b);

// Concatenates tensors of identical trailing shape along a new or existing
// leading axis. Not differentiable.
Tensor stack_rows(std::span<const Tensor> rows);
// Copy of row `index` of a tensor with leading batch axis, keeping a batch
// axis of size one.
Tensor row(const Tensor& batch, std::size_t index);

}  // namespace dbp
