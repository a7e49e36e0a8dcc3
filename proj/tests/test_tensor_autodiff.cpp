#include <doctest.h>

#include <cmath>
#include <numeric>

#include "crformer/error.hpp"
#include "crformer/instrument.hpp"
#include "test_util.hpp"

using namespace crformer;
using testutil::away_from_zero;
using testutil::random_tensor;
using testutil::weighted_sum;

namespace {

using TD = Tensor<double>;

// Runs the finite-difference oracle for one primitive wrapped as a weighted sum.
void expect_primitive_grad(const char* name, const std::vector<TD>& params,
                           const std::function<TD(const std::vector<TD>&)>& op) {
  ScalarFn<double> f = [&](const std::vector<TD>& p) { return weighted_sum(op(p), 99); };
  const auto report = finite_diff_check<double>(f, params, 1e-5, 1e-6);
  INFO(name << " max rel error " << report.max_rel_error);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-6);
}

TD naive_matmul(const TD& a, const TD& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < k; ++t) out[i * n + j] += a[i * k + t] * b[t * n + j];
  return TD({m, n}, out);
}

}  // namespace

TEST_CASE("tensor extents must match the buffer") {
  CHECK_THROWS_AS(TD({2, 3}, std::vector<double>(5)), DimensionError);
  CHECK_THROWS_AS(TD(Shape{2, 0}), DimensionError);
  TD t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.at({1, 2}) == 6);
  CHECK(t.with_shape({3, 2}).at({2, 0}) == 5);
  CHECK_THROWS_AS(t.with_shape({4}), DimensionError);
}

TEST_CASE("copies share values and mutable_data copies on write") {
  TD a({3}, {1, 2, 3});
  TD b = a;
  b.mutable_data()[0] = 10;
  CHECK(a[0] == 1);
  CHECK(b[0] == 10);
}

TEST_CASE("matmul examples") {
  TD eye({2, 2}, {1, 0, 0, 1});
  TD m({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, m).to_vector() == m.to_vector());
  TD col({2, 1}, {5, 6});
  CHECK(matmul(m, col).to_vector() == std::vector<double>{17, 39});
  CHECK_THROWS_AS(matmul(TD(Shape{2, 3}), TD(Shape{4, 2})), DimensionError);
}

TEST_CASE("matmul agrees with a triple loop on random shapes") {
  CounterRng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t m = 1 + rng.below(9), k = 1 + rng.below(40), n = 1 + rng.below(9);
    const auto a = random_tensor(rng, {m, k});
    const auto b = random_tensor(rng, {k, n});
    CHECK(testutil::max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
    CHECK(testutil::max_abs_diff(matmul_nt(a, transpose(b)), naive_matmul(a, b)) < 1e-12);
  }
}

TEST_CASE("softmax examples") {
  const auto u = softmax_lastdim(TD({3}, {0, 0, 0}));
  for (double p : u.to_vector()) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-15));
  const auto q = softmax_lastdim(TD({2}, {0, std::log(3.0)}));
  CHECK(q[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(q[1] == doctest::Approx(0.75).epsilon(1e-15));
  const std::vector<std::uint8_t> keep{1, 0};
  const auto r = softmax_lastdim(TD({2}, {5, 9}), keep);
  CHECK(r[0] == 1.0);
  CHECK(r[1] == 0.0);
  const std::vector<std::uint8_t> none{0, 0};
  CHECK_THROWS_AS(softmax_lastdim(TD({2}, {5, 9}), none), DegenerateRowError);
}

TEST_CASE("softmax rows are distributions on 1000 random draws") {
  CounterRng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 1 + rng.below(6), cols = 1 + rng.below(12);
    const auto x = random_tensor<double>(rng, {rows, cols}, -30, 30);
    std::vector<std::uint8_t> keep(cols, 1);
    const bool masked = rng.below(2) == 1;
    if (masked) {
      for (auto& k : keep) k = rng.below(3) != 0;
      keep[rng.below(cols)] = 1;
    }
    const auto p = softmax_lastdim(x, masked ? std::span<const std::uint8_t>(keep) : std::span<const std::uint8_t>());
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double v = p[r * cols + c];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        if (!keep[c]) CHECK(v == 0.0);
        s += v;
      }
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("backward of sum(x*x) is 2x") {
  Tape<double> tape;
  const auto x = tape.leaf(TD({3}, {1, 2, 3}));
  const auto g = tape.backward(sum(mul(x, x))).of(x);
  CHECK(g.to_vector() == std::vector<double>{2, 4, 6});
}

TEST_CASE("unreachable leaves get zero gradients") {
  Tape<double> tape;
  const auto x = tape.leaf(TD({2}, {1, 2}));
  const auto p = tape.leaf(TD({2}, {3, 4}));
  const auto loss = sum(mul(x, x.detach()));
  const auto grads = tape.backward(loss);
  CHECK(grads.of(p).to_vector() == std::vector<double>{0, 0});
  CHECK(grads.of(x).to_vector() == std::vector<double>{1, 2});
  CHECK_THROWS_AS(grads.of(loss), ContractError);
}

TEST_CASE("untracked tensors record nothing") {
  Tape<double> tape;
  TD a({2}, {1, 2});
  const auto y = add(a, a);
  CHECK_FALSE(y.tracked());
  CHECK_FALSE(y.requires_grad());
  CHECK(tape.num_ops() == 0);
}

TEST_CASE("ops mixing two tapes are rejected") {
  Tape<double> t1, t2;
  const auto a = t1.leaf(TD({2}, {1, 2}));
  const auto b = t2.leaf(TD({2}, {3, 4}));
  CHECK_THROWS_AS(add(a, b), ContractError);
}

TEST_CASE("finite_diff_check: linear layer with squared loss passes") {
  CounterRng rng(5);
  const auto x = random_tensor(rng, {4, 3});
  const auto target = random_tensor(rng, {4, 2});
  ScalarFn<double> f = [&](const std::vector<TD>& p) {
    const auto d = sub(affine(x, p[0], p[1]), target);
    return sum(mul(d, d));
  };
  const auto r = finite_diff_check<double>(f, {random_tensor(rng, {3, 2}), random_tensor(rng, {2})}, 1e-5, 1e-6,
                                           {"w", "b"});
  CHECK(r.pass);
  CHECK(r.max_rel_error < 1e-6);
  REQUIRE(r.params.size() == 2);
  CHECK(r.params[0].name == "w");
}

TEST_CASE("finite_diff_check: constant function passes") {
  ScalarFn<double> f = [](const std::vector<TD>&) { return TD::scalar(3.0); };
  const auto r = finite_diff_check<double>(f, {TD({2}, {1, 2})}, 1e-5, 1e-6);
  CHECK(r.pass);
  CHECK(r.max_rel_error == 0.0);
}

TEST_CASE("finite_diff_check: relu at its kink is reported as a mismatch") {
  ScalarFn<double> f = [](const std::vector<TD>& p) { return sum(relu(p[0])); };
  const auto r = finite_diff_check<double>(f, {TD({1}, {0.0})}, 1e-5, 1e-6);
  CHECK_FALSE(r.pass);
  CHECK(r.params[0].analytic == 0.0);
  CHECK(r.params[0].numeric == doctest::Approx(0.5));
}

TEST_CASE("finite_diff_check rejects a non-positive step") {
  ScalarFn<double> f = [](const std::vector<TD>& p) { return sum(p[0]); };
  CHECK_THROWS_AS(finite_diff_check<double>(f, {TD({1}, {1.0})}, 0.0, 1e-6), ContractError);
}

TEST_CASE("every primitive matches central differences") {
  CounterRng rng(31337);
  auto r = [&](Shape s) { return random_tensor(rng, std::move(s)); };

  expect_primitive_grad("matmul", {r({3, 4}), r({4, 2})}, [](auto& p) { return matmul(p[0], p[1]); });
  expect_primitive_grad("matmul_nt", {r({3, 4}), r({5, 4})}, [](auto& p) { return matmul_nt(p[0], p[1]); });
  expect_primitive_grad("affine", {r({2, 3, 4}), r({4, 5}), r({5})},
                        [](auto& p) { return affine(p[0], p[1], p[2]); });
  expect_primitive_grad("affine without bias", {r({3, 4}), r({4, 2})},
                        [](auto& p) { return affine(p[0], p[1], TD()); });
  expect_primitive_grad("add", {r({2, 3}), r({2, 3})}, [](auto& p) { return add(p[0], p[1]); });
  expect_primitive_grad("sub", {r({2, 3}), r({2, 3})}, [](auto& p) { return sub(p[0], p[1]); });
  expect_primitive_grad("mul", {r({2, 3}), r({2, 3})}, [](auto& p) { return mul(p[0], p[1]); });
  expect_primitive_grad("mul self", {r({4})}, [](auto& p) { return mul(p[0], p[0]); });
  expect_primitive_grad("scale", {r({2, 3})}, [](auto& p) { return scale(p[0], -1.75); });
  expect_primitive_grad("scale_by", {r({2, 3}), r({1})}, [](auto& p) { return scale_by(p[0], p[1]); });
  expect_primitive_grad("relu", {away_from_zero(rng, {3, 4})}, [](auto& p) { return relu(p[0]); });
  expect_primitive_grad("softmax", {r({3, 5})}, [](auto& p) { return softmax_lastdim(p[0]); });
  const std::vector<std::uint8_t> col_keep{1, 0, 1, 1, 0};
  expect_primitive_grad("softmax column mask", {r({3, 5})},
                        [&](auto& p) { return softmax_lastdim(p[0], col_keep); });
  const std::vector<std::uint8_t> elem_keep{1, 0, 1, 0, 0, 1, 1, 1, 1, 0};
  expect_primitive_grad("softmax element mask", {r({2, 5})},
                        [&](auto& p) { return softmax_lastdim(p[0], elem_keep); });
  expect_primitive_grad("concat axis 0", {r({2, 3}), r({1, 3})}, [](auto& p) { return concat<double>({p[0], p[1]}, 0); });
  expect_primitive_grad("concat axis 1", {r({2, 3}), r({2, 2})}, [](auto& p) { return concat<double>({p[0], p[1]}, 1); });
  expect_primitive_grad("reshape", {r({2, 6})}, [](auto& p) { return reshape(p[0], {3, 4}); });
  expect_primitive_grad("transpose", {r({2, 5})}, [](auto& p) { return transpose(p[0]); });
  expect_primitive_grad("mean axis 0", {r({4, 3})}, [](auto& p) { return mean(p[0], 0); });
  expect_primitive_grad("mean axis 1", {r({4, 3})}, [](auto& p) { return mean(p[0], 1); });
  expect_primitive_grad("sum", {r({4, 3})}, [](auto& p) { return sum(p[0]); });
  expect_primitive_grad("slice", {r({5, 3})}, [](auto& p) { return slice(p[0], 0, 1, 4); });
  expect_primitive_grad("slice last axis", {r({2, 6})}, [](auto& p) { return slice(p[0], 1, 2, 5); });
  const std::vector<int> ids{2, 0, 2, 3};
  expect_primitive_grad("gather_rows", {r({4, 3})}, [&](auto& p) { return gather_rows(p[0], ids); });
  expect_primitive_grad("conv2d 3x3", {r({5, 5, 2}), r({18, 3}), r({3})},
                        [](auto& p) { return conv2d(p[0], p[1], p[2], 3, 1, 1); });
  expect_primitive_grad("conv2d stride 2", {r({6, 6, 2}), r({18, 2}), r({2})},
                        [](auto& p) { return conv2d(p[0], p[1], p[2], 3, 2, 1); });
  expect_primitive_grad("conv2d 1x1", {r({3, 3, 4}), r({4, 2}), r({2})},
                        [](auto& p) { return conv2d(p[0], p[1], p[2], 1, 1, 0); });
  expect_primitive_grad("layer_norm", {r({3, 6}), r({6}), r({6})},
                        [](auto& p) { return layer_norm(p[0], p[1], p[2]); });
  expect_primitive_grad("avgpool2x2", {r({4, 6, 2})}, [](auto& p) { return avgpool2x2(p[0]); });
  expect_primitive_grad("upsample2x", {r({2, 3, 2})}, [](auto& p) { return upsample2x(p[0]); });
  expect_primitive_grad("pixel_shuffle", {r({2, 3, 8})}, [](auto& p) { return pixel_shuffle(p[0], 2); });
  const auto targets = TD({2, 3}, {1, 0, 1, 0, 0, 1});
  expect_primitive_grad("bce_with_logits", {r({2, 3})}, [&](auto& p) { return bce_with_logits(p[0], targets); });
}

TEST_CASE("tape backward is linear in the loss") {
  CounterRng rng(8);
  Tape<double> tape;
  const auto a = tape.leaf(random_tensor(rng, {3, 4}));
  const auto b = tape.leaf(random_tensor(rng, {4, 2}));
  const auto y = matmul(a, b);
  const auto l1 = weighted_sum(softmax_lastdim(y), 1);
  const auto l2 = weighted_sum(mul(y, y), 2);
  const auto both = tape.backward(add(l1, l2));
  const auto g1 = tape.backward(l1), g2 = tape.backward(l2);
  for (const auto* leaf : {&a, &b}) {
    const auto s = both.of(*leaf), x = g1.of(*leaf), z = g2.of(*leaf);
    for (std::size_t i = 0; i < s.numel(); ++i) CHECK(s[i] == doctest::Approx(x[i] + z[i]).epsilon(1e-12));
  }
}

TEST_CASE("replaying a tape gives bitwise-identical gradients") {
  CounterRng rng(9);
  Tape<double> tape;
  const auto w = tape.leaf(random_tensor(rng, {4, 4}));
  const auto x = random_tensor(rng, {3, 4});
  const auto loss = weighted_sum(layer_norm(softmax_lastdim(matmul(x, w)), TD::full({4}, 1.0), TD({4})), 3);
  const auto g1 = tape.backward(loss).of(w), g2 = tape.backward(loss).of(w);
  CHECK(g1.to_vector() == g2.to_vector());
}

TEST_CASE("tape records ops in topological order") {
  Tape<double> tape;
  const auto x = tape.leaf(TD({2}, {1, 2}));
  CHECK(tape.num_nodes() == 1);
  const auto y = mul(x, x);
  const auto z = sum(y);
  CHECK(tape.num_ops() == 2);
  CHECK(*x.node() < *y.node());
  CHECK(*y.node() < *z.node());
}

TEST_CASE("op counter and scoped tags") {
  OpCounter::reset();
  TD a({2}, {1, 2});
  {
    ScopedTag outer("outer");
    add(a, a);
    {
      ScopedTag inner("inner");
      add(a, a);
      add(a, a);
    }
    CHECK(current_tag() == "outer");
  }
  CHECK(OpCounter::count_for("outer") == 1);
  CHECK(OpCounter::count_for("inner") == 2);
  CHECK(OpCounter::total() == 3);
}

TEST_CASE("softmax observer sees probabilities") {
  std::vector<SoftmaxEvent> events;
  {
    ScopedSoftmaxObserver obs([&](const SoftmaxEvent& e) { events.push_back(e); });
    ScopedTag tag("probe");
    softmax_lastdim(TD({2, 2}, {0, 0, 1, 1}));
  }
  softmax_lastdim(TD({2}, {0, 0}));
  REQUIRE(events.size() == 1);
  CHECK(events[0].tag == "probe");
  CHECK(events[0].rows == 2);
  CHECK(events[0].cols == 2);
  CHECK(events[0].probs[0] == 0.5);
}

TEST_CASE("counter rng is SplitMix64 addressed by counter") {
  CounterRng rng(0);
  CHECK(rng.next_u64() == 0xE220A8397B1DCDAFULL);
  CounterRng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(CounterRng(42).stream(3).key() == CounterRng(42).stream(3).key());
  CHECK(CounterRng(42).stream(3).key() != CounterRng(42).stream(4).key());
  CounterRng c(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(c.below(5) < 5);
  }
}

TEST_CASE("float and double tensors agree on a small graph") {
  CounterRng rng(4);
  const auto x = random_tensor(rng, {3, 4});
  const auto w = random_tensor(rng, {4, 4});
  const auto yd = softmax_lastdim(matmul(x, w));
  const auto yf = softmax_lastdim(matmul(tensor_cast<float>(x), tensor_cast<float>(w)));
  CHECK(testutil::max_abs_diff(tensor_cast<double>(yf), yd) < 1e-6);
}
