#include "dbp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dbp/autograd.hpp"
#include "dbp/error.hpp"
#include "dbp/kernels.hpp"

namespace dbp {

namespace {

using detail::BackwardFn;

Tensor make_result(const char* name, Shape shape, Buffer data, Dtype dtype,
                   std::vector<Tensor> inputs, BackwardFn rule) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite result in ") + name);
  }
  round_to_dtype(data, dtype);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->dtype = dtype;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    impl->requires_grad = true;
    impl->node = std::make_shared<detail::Node>(name, std::move(inputs), std::move(rule));
  }
  return Tensor::from_impl(std::move(impl));
}

double dtype_eps(Dtype d) {
  return d == Dtype::F32 ? static_cast<double>(std::numeric_limits<float>::epsilon())
                         : std::numeric_limits<double>::epsilon();
}

// Numpy-style broadcast of two shapes aligned at their trailing dimension.
Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// For every flat index of `out`, the flat index into an operand of shape `in`.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  const std::size_t nd = out.size();
  const std::size_t off = nd - in.size();
  std::vector<std::size_t> in_stride(nd, 0);
  std::size_t stride = 1;
  for (std::size_t i = nd; i-- > off;) {
    const std::size_t d = in[i - off];
    in_stride[i] = d == 1 ? 0 : stride;
    stride *= d;
  }
  std::vector<std::size_t> counter(nd, 0);
  std::size_t pos = 0;
  for (std::size_t k = 0; k < n; ++k) {
    idx[k] = pos;
    for (std::size_t i = nd; i-- > 0;) {
      ++counter[i];
      pos += in_stride[i];
      if (counter[i] < out[i]) break;
      pos -= in_stride[i] * counter[i];
      counter[i] = 0;
    }
  }
  return idx;
}

struct BinaryPlan {
  Shape out;
  std::vector<std::size_t> ia;  // empty when identity
  std::vector<std::size_t> ib;
  std::size_t size_a;
  std::size_t size_b;

  std::size_t a(std::size_t k) const { return ia.empty() ? k : ia[k]; }
  std::size_t b(std::size_t k) const { return ib.empty() ? k : ib[k]; }
};

BinaryPlan plan_binary(const Tensor& a, const Tensor& b) {
  BinaryPlan p;
  p.out = broadcast_shape(a.shape(), b.shape());
  p.size_a = a.numel();
  p.size_b = b.numel();
  if (a.shape() != p.out) p.ia = broadcast_index(a.shape(), p.out);
  if (b.shape() != p.out) p.ib = broadcast_index(b.shape(), p.out);
  return p;
}

enum class Bin { Add, Sub, Mul, Div };

Tensor binary(Bin op, const Tensor& a, const Tensor& b) {
  auto plan = std::make_shared<const BinaryPlan>(plan_binary(a, b));
  const std::size_t n = shape_numel(plan->out);
  auto da = a.data();
  auto db = b.data();
  Buffer out(n);
  const char* name = "add";
  switch (op) {
    case Bin::Add:
      for (std::size_t k = 0; k < n; ++k) out[k] = da[plan->a(k)] + db[plan->b(k)];
      break;
    case Bin::Sub:
      name = "sub";
      for (std::size_t k = 0; k < n; ++k) out[k] = da[plan->a(k)] - db[plan->b(k)];
      break;
    case Bin::Mul:
      name = "mul";
      for (std::size_t k = 0; k < n; ++k) out[k] = da[plan->a(k)] * db[plan->b(k)];
      break;
    case Bin::Div: {
      name = "div";
      const double guard = dtype_eps(promote(a.dtype(), b.dtype()));
      for (double v : db) {
        if (std::abs(v) < guard) throw NumericError("division by a value below the underflow guard");
      }
      for (std::size_t k = 0; k < n; ++k) out[k] = da[plan->a(k)] / db[plan->b(k)];
      break;
    }
  }
  BackwardFn rule = [op, plan, a, b](const Buffer& g, std::span<Buffer> gin,
                                     std::span<const char> need) {
    const std::size_t n = g.size();
    auto da = a.data();
    auto db = b.data();
    if (need[0]) {
      Buffer ga(plan->size_a, 0.0);
      for (std::size_t k = 0; k < n; ++k) {
        double d = 1.0;
        if (op == Bin::Mul) d = db[plan->b(k)];
        if (op == Bin::Div) d = 1.0 / db[plan->b(k)];
        ga[plan->a(k)] += g[k] * d;
      }
      gin[0] = std::move(ga);
    }
    if (need[1]) {
      Buffer gb(plan->size_b, 0.0);
      for (std::size_t k = 0; k < n; ++k) {
        double d = 1.0;
        if (op == Bin::Sub) d = -1.0;
        if (op == Bin::Mul) d = da[plan->a(k)];
        if (op == Bin::Div) {
          const double bv = db[plan->b(k)];
          d = -da[plan->a(k)] / (bv * bv);
        }
        gb[plan->b(k)] += g[k] * d;
      }
      gin[1] = std::move(gb);
    }
  };
  return make_result(name, plan->out, std::move(out), promote(a.dtype(), b.dtype()), {a, b},
                     std::move(rule));
}

// Unary op whose derivative is expressed through the input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, Deriv deriv) {
  auto in = a.data();
  Buffer out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  auto y = std::make_shared<Buffer>(out);
  round_to_dtype(*y, a.dtype());
  BackwardFn rule = [a, y, deriv](const Buffer& g, std::span<Buffer> gin,
                                  std::span<const char> need) {
    if (!need[0]) return;
    auto x = a.data();
    Buffer ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * deriv(x[i], (*y)[i]);
    gin[0] = std::move(ga);
  };
  return make_result(name, a.shape(), std::move(out), a.dtype(), {a}, std::move(rule));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(Bin::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Bin::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Bin::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(Bin::Div, a, b); }

Tensor neg(const Tensor& a) {
  return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw NumericError("log of a non-positive value");
  }
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw NumericError("sqrt of a negative value");
  }
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](double, double y) {
                 if (y == 0.0) throw NumericError("sqrt derivative at zero");
                 return 0.5 / y;
               });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ConfigError("clamp bounds out of order");
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary("add_scalar", a, [value](double x) { return x + value; },
               [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Tensor elementwise(OpKind kind, const Tensor& a, const std::optional<Tensor>& b,
                   std::optional<ClampBounds> bounds) {
  auto need_b = [&]() -> const Tensor& {
    if (!b || !b->defined()) throw ShapeError("binary elementwise op needs a second operand");
    return *b;
  };
  switch (kind) {
    case OpKind::Add: return add(a, need_b());
    case OpKind::Sub: return sub(a, need_b());
    case OpKind::Mul: return mul(a, need_b());
    case OpKind::Div: return div(a, need_b());
    case OpKind::Neg: return neg(a);
    case OpKind::Exp: return exp(a);
    case OpKind::Log: return log(a);
    case OpKind::Sqrt: return sqrt(a);
    case OpKind::Tanh: return tanh(a);
    case OpKind::Relu: return relu(a);
    case OpKind::Clamp:
      if (!bounds) throw ConfigError("clamp needs bounds");
      return clamp(a, bounds->lo, bounds->hi);
  }
  throw ConfigError("unknown elementwise op");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t n = b.shape()[1];
  Buffer out(m * n);
  kernels::gemm_nn(m, k, n, a.data(), b.data(), out);
  BackwardFn rule = [a, b, m, k, n](const Buffer& g, std::span<Buffer> gin,
                                    std::span<const char> need) {
    if (need[0]) {
      Buffer ga(m * k);
      kernels::gemm_nt(m, n, k, g, b.data(), ga);
      gin[0] = std::move(ga);
    }
    if (need[1]) {
      Buffer gb(k * n);
      kernels::gemm_tn(m, k, n, a.data(), g, gb);
      gin[1] = std::move(gb);
    }
  };
  return make_result("matmul", {m, n}, std::move(out), promote(a.dtype(), b.dtype()), {a, b},
                     std::move(rule));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  for (auto d : shape) {
    if (d == 0) throw ShapeError("reshape to zero extent");
  }
  Buffer out(a.data().begin(), a.data().end());
  BackwardFn rule = [](const Buffer& g, std::span<Buffer> gin, std::span<const char> need) {
    if (need[0]) gin[0] = g;
  };
  return make_result("reshape", std::move(shape), std::move(out), a.dtype(), {a},
                     std::move(rule));
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const std::size_t n = a.numel();
  BackwardFn rule = [n](const Buffer& g, std::span<Buffer> gin, std::span<const char> need) {
    if (need[0]) gin[0] = Buffer(n, g[0]);
  };
  return make_result("sum", {1}, Buffer{acc}, a.dtype(), {a}, std::move(rule));
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw ShapeError("sum axis out of range for " + shape_str(s));
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  const std::size_t len = s[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  auto in = a.data();
  Buffer out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const double* src = in.data() + (o * len + l) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  BackwardFn rule = [outer, len, inner](const Buffer& g, std::span<Buffer> gin,
                                        std::span<const char> need) {
    if (!need[0]) return;
    Buffer ga(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t l = 0; l < len; ++l) {
        std::copy_n(g.data() + o * inner, inner, ga.data() + (o * len + l) * inner);
      }
    }
    gin[0] = std::move(ga);
  };
  return make_result("sum_axis", std::move(out_shape), std::move(out), a.dtype(), {a},
                     std::move(rule));
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2) {
    throw ShapeError("cross-entropy expects [B, C] logits, got " + shape_str(logits.shape()));
  }
  const std::size_t rows = logits.shape()[0];
  const std::size_t classes = logits.shape()[1];
  if (labels.size() != rows) {
    throw ShapeError("cross-entropy label count " + std::to_string(labels.size()) +
                     " does not match batch " + std::to_string(rows));
  }
  auto z = logits.data();
  auto probs = std::make_shared<Buffer>(rows * classes);
  Buffer out(rows);
  std::vector<int> y(labels.begin(), labels.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (y[r] < 0 || static_cast<std::size_t>(y[r]) >= classes) {
      throw ShapeError("label " + std::to_string(y[r]) + " out of range");
    }
    const double* zr = z.data() + r * classes;
    const double mx = *std::max_element(zr, zr + classes);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(zr[c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < classes; ++c) {
      (*probs)[r * classes + c] = std::exp(zr[c] - lse);
    }
    out[r] = lse - zr[y[r]];
  }
  BackwardFn rule = [probs, y, rows, classes](const Buffer& g, std::span<Buffer> gin,
                                              std::span<const char> need) {
    if (!need[0]) return;
    Buffer gz(rows * classes);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double onehot = static_cast<int>(c) == y[r] ? 1.0 : 0.0;
        gz[r * classes + c] = g[r] * ((*probs)[r * classes + c] - onehot);
      }
    }
    gin[0] = std::move(gz);
  };
  return make_result("softmax_cross_entropy", {rows}, std::move(out), logits.dtype(),
                     {logits}, std::move(rule));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.dim() != 2) throw ShapeError("argmax_rows expects [B, C]");
  const std::size_t rows = logits.shape()[0];
  const std::size_t classes = logits.shape()[1];
  std::vector<int> out(rows);
  auto z = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = z.data() + r * classes;
    out[r] = static_cast<int>(std::max_element(zr, zr + classes) - zr);
  }
  return out;
}

}  // namespace dbp
