#include "dbp/tensor.hpp"

#include <cstring>
#include <sstream>

#include "dbp/error.hpp"

namespace dbp {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
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

void round_to_dtype(Buffer& values, Dtype dtype) {
  if (dtype != Dtype::F32) return;
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
}

Dtype promote(Dtype a, Dtype b) {
  return (a == Dtype::F64 || b == Dtype::F64) ? Dtype::F64 : Dtype::F32;
}

Tensor::Tensor(Shape shape, Buffer values, Dtype dtype, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  round_to_dtype(values, dtype);
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->dtype = dtype;
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, Dtype dtype) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), Buffer(n, 0.0), dtype);
}

Tensor Tensor::full(Shape shape, double value, Dtype dtype) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), Buffer(n, value), dtype);
}

Tensor Tensor::scalar(double value, Dtype dtype) {
  return Tensor({1}, Buffer{value}, dtype);
}

Tensor Tensor::from_impl(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

namespace {
void require(const std::shared_ptr<detail::TensorImpl>& impl) {
  if (!impl) throw Error("use of an undefined tensor");
}
}  // namespace

const Shape& Tensor::shape() const {
  require(impl_);
  return impl_->shape;
}

std::size_t Tensor::numel() const {
  require(impl_);
  return impl_->data.size();
}

Dtype Tensor::dtype() const {
  require(impl_);
  return impl_->dtype;
}

std::span<const double> Tensor::data() const {
  require(impl_);
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  require(impl_);
  if (impl_->node) throw Error("mutable_data() on a non-leaf tensor");
  return impl_->data;
}

double Tensor::item() const {
  require(impl_);
  if (impl_->data.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(impl_->shape));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const {
  require(impl_);
  return impl_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool flag) {
  require(impl_);
  if (impl_->node && !flag) throw Error("cannot clear requires_grad on a non-leaf");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const {
  require(impl_);
  return impl_->node == nullptr;
}

bool Tensor::has_grad() const {
  require(impl_);
  return impl_->grad.has_value();
}

std::span<const double> Tensor::grad() const {
  require(impl_);
  if (!impl_->grad) throw Error("tensor has no gradient");
  return *impl_->grad;
}

Tensor Tensor::grad_tensor() const {
  require(impl_);
  if (!impl_->grad) return Tensor::zeros(impl_->shape, impl_->dtype);
  return Tensor(impl_->shape, *impl_->grad, Dtype::F64);
}

void Tensor::zero_grad() {
  require(impl_);
  impl_->grad.reset();
}

Tensor Tensor::detach() const {
  require(impl_);
  return Tensor(impl_->shape, impl_->data, impl_->dtype);
}

Tensor Tensor::to(Dtype dtype) const {
  require(impl_);
  return Tensor(impl_->shape, impl_->data, dtype);
}

const std::shared_ptr<detail::Node>& Tensor::node() const {
  require(impl_);
  return impl_->node;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  return a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.dtype() == b.dtype() &&
         bitwise_equal(a.data(), b.data());
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw ShapeError("stack_rows needs at least one tensor");
  const Shape& first = rows[0].shape();
  if (first.empty()) throw ShapeError("stack_rows needs a leading axis");
  Shape trailing(first.begin() + 1, first.end());
  std::size_t lead = 0;
  Buffer out;
  Dtype dtype = rows[0].dtype();
  for (const auto& r : rows) {
    const Shape& s = r.shape();
    if (s.empty() || Shape(s.begin() + 1, s.end()) != trailing) {
      throw ShapeError("stack_rows trailing shape mismatch: " + shape_str(s) +
                       " vs " + shape_str(first));
    }
    lead += s[0];
    out.insert(out.end(), r.data().begin(), r.data().end());
    dtype = promote(dtype, r.dtype());
  }
  Shape shape{lead};
  shape.insert(shape.end(), trailing.begin(), trailing.end());
  return Tensor(std::move(shape), std::move(out), dtype);
}

Tensor row(const Tensor& batch, std::size_t index) {
  const Shape& s = batch.shape();
  if (s.empty() || index >= s[0]) {
    throw ShapeError("row index " + std::to_string(index) + " out of range for " +
                     shape_str(s));
  }
  const std::size_t width = batch.numel() / s[0];
  Shape shape = s;
  shape[0] = 1;
  auto first = batch.data().begin() + static_cast<std::ptrdiff_t>(index * width);
  return Tensor(std::move(shape), Buffer(first, first + static_cast<std::ptrdiff_t>(width)),
                batch.dtype());
}

}  // namespace dbp
