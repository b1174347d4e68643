#include <doctest.h>

#include <cmath>
#include <limits>

#include "dbp/autograd.hpp"
#include "dbp/error.hpp"
#include "dbp/ops.hpp"

using namespace dbp;

namespace {

Tensor vec(std::initializer_list<double> v, bool rg = false) {
  return Tensor({v.size()}, Buffer(v), Dtype::F64, rg);
}

void check_values(const Tensor& t, std::initializer_list<double> expected) {
  REQUIRE(t.numel() == expected.size());
  std::size_t i = 0;
  for (double e : expected) CHECK(t.at(i++) == doctest::Approx(e).epsilon(1e-12));
}

}  // namespace

TEST_CASE("constructor validates data length and extents") {
  CHECK_THROWS_AS(Tensor({2, 2}, Buffer{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({0}, Buffer{}), ShapeError);
  Tensor t({2, 3}, Buffer(6, 1.0));
  CHECK(t.numel() == 6);
  CHECK(t.dim() == 2);
}

TEST_CASE("add of two vectors") { check_values(add(vec({1, 2}), vec({3, 4})), {4, 6}); }

TEST_CASE("mul(x, x) gradient") {
  Tensor x = vec({1, 2}, true);
  backward(sum(mul(x, x)));
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("clamp clips into the range") {
  check_values(clamp(vec({-2, 0.5, 3}), 0, 1), {0, 0.5, 1});
  check_values(elementwise(OpKind::Clamp, vec({-2, 0.5, 3}), std::nullopt, ClampBounds{0, 1}),
               {0, 0.5, 1});
}

TEST_CASE("elementwise dispatch matches the named ops") {
  Tensor a = vec({0.5, 1.5, 2.5});
  Tensor b = vec({2, 4, 8});
  CHECK(bitwise_equal(elementwise(OpKind::Add, a, b), add(a, b)));
  CHECK(bitwise_equal(elementwise(OpKind::Sub, a, b), sub(a, b)));
  CHECK(bitwise_equal(elementwise(OpKind::Mul, a, b), mul(a, b)));
  CHECK(bitwise_equal(elementwise(OpKind::Div, a, b), div(a, b)));
  CHECK(bitwise_equal(elementwise(OpKind::Neg, a), neg(a)));
  CHECK(bitwise_equal(elementwise(OpKind::Exp, a), exp(a)));
  CHECK(bitwise_equal(elementwise(OpKind::Log, a), log(a)));
  CHECK(bitwise_equal(elementwise(OpKind::Sqrt, a), sqrt(a)));
  CHECK(bitwise_equal(elementwise(OpKind::Tanh, a), tanh(a)));
  CHECK(bitwise_equal(elementwise(OpKind::Relu, a), relu(a)));
  CHECK_THROWS_AS(elementwise(OpKind::Add, a), ShapeError);
}

TEST_CASE("trailing-dimension broadcasting") {
  Tensor m({2, 3}, Buffer{1, 2, 3, 4, 5, 6});
  Tensor r({3}, Buffer{10, 20, 30});
  check_values(add(m, r), {11, 22, 33, 14, 25, 36});
  Tensor c({2, 1}, Buffer{100, 200});
  check_values(add(m, c), {101, 102, 103, 204, 205, 206});
  CHECK(add(m, c).shape() == Shape{2, 3});
  CHECK_THROWS_AS(add(m, vec({1, 2})), ShapeError);
}

TEST_CASE("broadcast gradients reduce onto the smaller operand") {
  Tensor m({2, 3}, Buffer{1, 2, 3, 4, 5, 6}, Dtype::F64, true);
  Tensor r({3}, Buffer{1, 1, 1}, Dtype::F64, true);
  backward(sum(mul(m, r)));
  CHECK(r.grad()[0] == 5.0);
  CHECK(r.grad()[1] == 7.0);
  CHECK(r.grad()[2] == 9.0);
  CHECK(m.grad()[4] == 1.0);
}

TEST_CASE("domain violations raise instead of producing NaN") {
  CHECK_THROWS_AS(div(vec({1}), vec({0})), NumericError);
  CHECK_THROWS_AS(div(vec({1}), vec({1e-300})), NumericError);
  CHECK_THROWS_AS(log(vec({0})), NumericError);
  CHECK_THROWS_AS(log(vec({-1})), NumericError);
  CHECK_THROWS_AS(sqrt(vec({-1})), NumericError);
  CHECK_THROWS_AS(exp(vec({1000})), NumericError);
  Tensor z = vec({0}, true);
  CHECK_THROWS_AS(backward(sum(sqrt(z))), NumericError);
}

TEST_CASE("f32 guard is float epsilon") {
  Tensor a({1}, Buffer{1}, Dtype::F32);
  Tensor b({1}, Buffer{1e-9}, Dtype::F32);
  CHECK_THROWS_AS(div(a, b), NumericError);
}

TEST_CASE("f32 tensors hold float-rounded values") {
  Tensor a({1}, Buffer{0.1}, Dtype::F32);
  CHECK(a.at(0) == static_cast<double>(0.1f));
  Tensor b = add(a, a);
  CHECK(b.dtype() == Dtype::F32);
  CHECK(b.at(0) == static_cast<double>(0.1f + 0.1f));
  CHECK(promote(Dtype::F32, Dtype::F64) == Dtype::F64);
}

TEST_CASE("matmul identity and scalar cases") {
  Tensor eye({2, 2}, Buffer{1, 0, 0, 1});
  Tensor x({2, 3}, Buffer{1, 2, 3, 4, 5, 6});
  CHECK(bitwise_equal(matmul(eye, x), x));
  check_values(matmul(Tensor({1, 1}, Buffer{2}), Tensor({1, 1}, Buffer{3})), {6});
  CHECK_THROWS_AS(matmul(x, x), ShapeError);
  CHECK_THROWS_AS(matmul(vec({1, 2}), x), ShapeError);
}

TEST_CASE("reshape and reductions") {
  Tensor x({2, 3}, Buffer{1, 2, 3, 4, 5, 6}, Dtype::F64, true);
  check_values(sum(x), {21});
  check_values(mean(x), {3.5});
  check_values(sum(x, 0), {5, 7, 9});
  check_values(sum(x, 1), {6, 15});
  CHECK_THROWS_AS(sum(x, 2), ShapeError);
  CHECK(reshape(x, {3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(reshape(x, {4}), ShapeError);
}

TEST_CASE("sum backward gives ones; detached loss gives no gradient") {
  Tensor x = vec({1, 2, 3}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  Tensor y = vec({1, 2, 3}, true);
  Tensor loss = sum(y.detach());
  CHECK(!loss.requires_grad());
  auto g = grad(sum(add(vec({1, 1, 1}), y.detach())), std::vector<Tensor>{y});
  for (double v : g[0].data()) CHECK(v == 0.0);
  CHECK(!y.has_grad());
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = vec({1, 2}, true);
  CHECK_THROWS_AS(backward(mul(x, x)), ShapeError);
}

TEST_CASE("cross-entropy of uniform logits is ln C") {
  Tensor z = Tensor::zeros({2, 4});
  std::vector<int> y{0, 3};
  Tensor ce = softmax_cross_entropy(z, y);
  CHECK(ce.shape() == Shape{2});
  CHECK(ce.at(0) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK_THROWS_AS(softmax_cross_entropy(z, std::vector<int>{0}), ShapeError);
  CHECK_THROWS_AS(softmax_cross_entropy(z, std::vector<int>{0, 4}), ShapeError);
}

TEST_CASE("argmax_rows picks the first maximum") {
  Tensor z({2, 3}, Buffer{0, 2, 2, 5, 1, 0});
  auto a = argmax_rows(z);
  CHECK(a[0] == 1);
  CHECK(a[1] == 0);
}

TEST_CASE("stack_rows and row") {
  Tensor a({1, 2}, Buffer{1, 2});
  Tensor b({1, 2}, Buffer{3, 4});
  std::vector<Tensor> parts{a, b};
  Tensor s = stack_rows(parts);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(bitwise_equal(row(s, 1), b));
}

TEST_CASE("mutable_data is refused on non-leaves") {
  Tensor x = vec({1}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS(y.mutable_data());
}
