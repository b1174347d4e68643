#pragma once

#include <optional>
#include <span>

#include "dbp/tensor.hpp"

namespace dbp {

enum class OpKind {
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Exp,
  Log,
  Sqrt,
  Tanh,
  Relu,
  Clamp,
};

struct ClampBounds {
  double lo;
  double hi;
};

// Single entry point for the elementwise family. Binary kinds need `b`;
// Clamp needs `bounds`. Binary ops broadcast over trailing dimensions.
Tensor elementwise(OpKind kind, const Tensor& a,
                   const std::optional<Tensor>& b = std::nullopt,
                   std::optional<ClampBounds> bounds = std::nullopt);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, Shape shape);

// Full reductions to a one-element tensor of shape {1}.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Reduction over one axis (the axis is removed).
Tensor sum(const Tensor& a, std::size_t axis);

// Per-row softmax cross-entropy of logits [B, C] against integer labels.
// Returns the per-row losses, shape {B}.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

std::vector<int> argmax_rows(const Tensor& logits);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }

}  // namespace dbp
