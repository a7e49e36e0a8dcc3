#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crformer/error.hpp"
#include "crformer/instrument.hpp"
#include "crformer/nn.hpp"
#include "test_util.hpp"

using namespace crformer;
using testutil::max_abs_diff;
using testutil::random_tensor;
using testutil::weighted_sum;

namespace {

using TD = Tensor<double>;

Linear<double> identity_linear(std::size_t n) {
  std::vector<double> w(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) w[i * n + i] = 1.0;
  return {TD({n, n}, w), TD({n})};
}

TD permute_rows(const TD& x, const std::vector<std::size_t>& perm) {
  const std::size_t c = x.dim(1);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = x[perm[r] * c + j];
  return TD(x.shape(), out);
}

// Gradient check of a whole parameterized block: binds every tensor visited
// by visit_params, plus the input, as parameters.
template <typename P, typename F>
void expect_block_grad(const char* name, P params, const TD& x, F&& apply) {
  std::vector<std::string> names;
  std::vector<TD*> slots;
  visit_params(std::string(name), params, [&](const std::string& n, TD& t) {
    names.push_back(n);
    slots.push_back(&t);
  });
  std::vector<TD> values;
  for (auto* s : slots) values.push_back(*s);
  values.push_back(x);
  names.push_back("input");
  ScalarFn<double> f = [&](const std::vector<TD>& p) {
    P local = params;
    std::size_t i = 0;
    visit_params(std::string(name), local, [&](const std::string&, TD& t) { t = p[i++]; });
    return weighted_sum(apply(local, p.back()), 17);
  };
  const auto r = finite_diff_check<double>(f, values, 1e-5, 1e-5, names);
  INFO(name << " max rel error " << r.max_rel_error);
  CHECK(r.pass);
}

// Biases start at zero; jitter them so the check is not at relu kinks.
template <typename P>
P jitter(P p, std::uint64_t seed) {
  CounterRng rng(seed);
  visit_params(std::string("p"), p, [&](const std::string&, TD& t) {
    auto d = t.mutable_data();
    for (auto& v : d) v += rng.uniform(-0.2, 0.2);
  });
  return p;
}

}  // namespace

TEST_CASE("linear examples") {
  CounterRng rng(1);
  const auto x = random_tensor(rng, {3, 4});
  CHECK(linear(identity_linear(4), x).to_vector() == x.to_vector());
  Linear<double> p{TD({2, 2}, {1, 0, 0, 2}), TD({2}, {1, 1})};
  CHECK(linear(p, TD({1, 2}, {1, 1})).to_vector() == std::vector<double>{2, 3});
  CHECK_THROWS_AS(linear(identity_linear(4), TD(Shape{2, 3})), DimensionError);
}

TEST_CASE("make_linear is Glorot uniform with zero bias") {
  CounterRng rng(3);
  const auto p = make_linear<double>(rng, 30, 20);
  const double bound = std::sqrt(6.0 / 50.0);
  for (double w : p.weight.to_vector()) CHECK(std::fabs(w) <= bound);
  for (double b : p.bias.to_vector()) CHECK(b == 0.0);
  CHECK_FALSE(make_linear<double>(rng, 3, 2, false).bias.defined());
}

TEST_CASE("conv examples") {
  CounterRng rng(2);
  const auto x = random_tensor(rng, {4, 5, 3});
  std::vector<double> eye(9, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Conv<double> one{TD({3, 3}, eye), TD({3}), 1, 1};
  CHECK(conv(one, x).to_vector() == x.to_vector());

  Conv<double> ones{TD::full({9, 1}, 1.0), TD({1}), 3, 1};
  TD hot({3, 3, 1}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
  for (double v : conv(ones, hot).to_vector()) CHECK(v == 1.0);

  std::vector<double> w(9);
  std::iota(w.begin(), w.end(), 1.0);
  Conv<double> k{TD({9, 1}, w), TD({1}), 3, 1};
  const auto y = conv(k, TD({1, 1, 1}, {2.0}));
  CHECK(y.shape() == Shape{1, 1, 1});
  CHECK(y[0] == 2.0 * 5.0);

  CHECK_THROWS_AS(conv(one, random_tensor(rng, {4, 4, 2})), DimensionError);
}

TEST_CASE("layernorm examples") {
  const auto unit = make_layer_norm<double>(2);
  const auto z = layernorm(unit, TD({1, 2}, {4, 4}));
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);
  const auto y = layernorm(unit, TD({1, 2}, {1, 3}));
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-4));
  LayerNormParams<double> affine_p{TD::full({2}, 3.0), TD::full({2}, 5.0)};
  const auto a = layernorm(affine_p, TD({1, 2}, {1, 3}));
  CHECK((a[0] + a[1]) / 2 == doctest::Approx(5.0));
  CHECK(a[1] - a[0] == doctest::Approx(6.0).epsilon(1e-4));
}

TEST_CASE("layernorm normalizes random rows") {
  CounterRng rng(12);
  const auto unit = make_layer_norm<double>(16);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_tensor(rng, {4, 16}, -3, 3);
    const auto y = layernorm(unit, x);
    for (std::size_t r = 0; r < 4; ++r) {
      double m = 0, v = 0;
      for (std::size_t c = 0; c < 16; ++c) m += y[r * 16 + c];
      m /= 16;
      for (std::size_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m);
      v /= 16;
      CHECK(std::fabs(m) < 1e-6);
      CHECK(std::fabs(v - 1.0) < 1e-4);
    }
  }
}

TEST_CASE("attention configuration is validated") {
  CounterRng rng(1);
  CHECK_THROWS_AS(make_attention<double>(rng, 10, 4), ConfigError);
  CHECK_THROWS_AS(make_attention<double>(rng, 8, 0), ConfigError);
  CHECK_NOTHROW(make_attention<double>(rng, 8, 4));
}

TEST_CASE("mhsa on one token is out(value(x))") {
  CounterRng rng(4);
  const auto p = jitter(make_attention<double>(rng, 8, 2), 5);
  const auto x = random_tensor(rng, {1, 8});
  CHECK(max_abs_diff(mhsa(p, x), linear(p.out, linear(p.value, x))) < 1e-12);
}

TEST_CASE("zero query projection gives uniform attention") {
  CounterRng rng(6);
  auto p = jitter(make_attention<double>(rng, 8, 2), 7);
  p.query.weight = TD(Shape{8, 8});
  p.query.bias = TD(Shape{8});
  const auto x = random_tensor(rng, {5, 8});
  const auto y = mhsa(p, x);
  const auto expected = linear(p.out, mean(linear(p.value, x), 0));
  for (std::size_t r = 0; r < 5; ++r) CHECK(max_abs_diff(slice(y, 0, r, r + 1), expected) < 1e-12);
}

TEST_CASE("mhsa is permutation equivariant") {
  CounterRng rng(8);
  const auto p = jitter(make_attention<double>(rng, 8, 4), 9);
  const auto x = random_tensor(rng, {6, 8});
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  CHECK(max_abs_diff(mhsa(p, permute_rows(x, perm)), permute_rows(mhsa(p, x), perm)) < 1e-12);
}

TEST_CASE("mhca properties") {
  CounterRng rng(10);
  const auto p = jitter(make_attention<double>(rng, 8, 2), 11);
  const auto q = random_tensor(rng, {3, 8});

  const auto single = random_tensor(rng, {1, 8});
  const auto y1 = mhca(p, q, single);
  const auto expected = linear(p.out, linear(p.value, single));
  for (std::size_t r = 0; r < 3; ++r) CHECK(max_abs_diff(slice(y1, 0, r, r + 1), expected) < 1e-12);

  const auto same = concat<double>({single, single, single, single}, 0);
  const auto y2 = mhca(p, q, same);
  for (std::size_t r = 1; r < 3; ++r) CHECK(max_abs_diff(slice(y2, 0, r, r + 1), slice(y2, 0, 0, 1)) < 1e-12);

  const auto kv = random_tensor(rng, {5, 8});
  const std::vector<std::size_t> perm{4, 2, 0, 3, 1};
  CHECK(max_abs_diff(mhca(p, q, permute_rows(kv, perm)), mhca(p, q, kv)) < 1e-12);
  CHECK(max_abs_diff(mhca(p, kv, kv), mhsa(p, kv)) == 0.0);
}

TEST_CASE("masked keys do not influence mhca") {
  CounterRng rng(13);
  const auto p = jitter(make_attention<double>(rng, 8, 2), 14);
  const auto q = random_tensor(rng, {2, 8});
  auto kv = random_tensor(rng, {4, 8});
  const std::vector<std::uint8_t> keep{1, 1, 0, 1};
  const auto before = mhca(p, q, kv, keep);
  auto d = kv.mutable_data();
  for (std::size_t c = 0; c < 8; ++c) d[2 * 8 + c] += 100.0;
  CHECK(max_abs_diff(mhca(p, q, kv, keep), before) < 1e-12);
}

TEST_CASE("attention rows sum to one") {
  CounterRng rng(15);
  const auto p = jitter(make_attention<double>(rng, 16, 4), 16);
  std::size_t seen = 0;
  ScopedSoftmaxObserver obs([&](const SoftmaxEvent& e) {
    for (std::size_t r = 0; r < e.rows; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < e.cols; ++c) s += e.probs[r * e.cols + c];
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
    ++seen;
  });
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t s = 1 + rng.below(6), m = 1 + rng.below(6);
    mhca(p, random_tensor(rng, {s, 16}), random_tensor(rng, {m, 16}));
  }
  CHECK(seen > 0);
}

TEST_CASE("sinusoidal position banks") {
  const auto b = sine_positional_1d<double>(5, 8);
  for (std::size_t c = 0; c < 8; ++c) CHECK(b[c] == (c % 2 == 0 ? 0.0 : 1.0));
  CHECK(b.at({3, 2}) == doctest::Approx(std::sin(3.0 / std::pow(10000.0, 2.0 / 8))));
  CHECK(b.at({3, 3}) == doctest::Approx(std::cos(3.0 / std::pow(10000.0, 2.0 / 8))));
  CHECK(sine_positional_1d<double>(5, 8).to_vector() == b.to_vector());
  CHECK_THROWS_AS(sine_positional_1d<double>(5, 7), ConfigError);

  const auto g = sine_positional_2d<double>(3, 4, 8);
  const auto rows = sine_positional_1d<double>(3, 4), cols = sine_positional_1d<double>(4, 4);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t k = 0; k < 4; ++k) {
        CHECK(g.at({r, c, k}) == rows.at({r, k}));
        CHECK(g.at({r, c, 4 + k}) == cols.at({c, k}));
      }
  CHECK_THROWS_AS(sine_positional_2d<double>(3, 4, 6), ConfigError);
}

TEST_CASE("pooling and upsampling") {
  const auto c = TD::full({4, 6, 2}, 1.5);
  for (double v : avgpool2x2(c).to_vector()) CHECK(v == 1.5);
  for (double v : upsample2x(c).to_vector()) CHECK(v == 1.5);
  CHECK(upsample2x(avgpool2x2(c)).to_vector() == c.to_vector());
  CHECK(avgpool2x2(TD({2, 2, 1}, {1, 2, 3, 4})).to_vector() == std::vector<double>{2.5});
  CHECK_THROWS_AS(avgpool2x2(TD(Shape{3, 4, 1})), DimensionError);
  CHECK(upsample2x(c).shape() == Shape{8, 12, 2});
}

TEST_CASE("parameterized blocks match central differences") {
  CounterRng rng(21);
  expect_block_grad("linear", jitter(make_linear<double>(rng, 4, 3), 1), random_tensor(rng, {3, 4}),
                    [](const auto& p, const TD& x) { return linear(p, x); });
  expect_block_grad("conv", jitter(make_conv<double>(rng, 3, 2, 3), 2), random_tensor(rng, {4, 4, 2}),
                    [](const auto& p, const TD& x) { return conv(p, x); });
  expect_block_grad("conv_s2", jitter(make_conv<double>(rng, 3, 2, 2, 2), 3), random_tensor(rng, {4, 4, 2}),
                    [](const auto& p, const TD& x) { return conv(p, x); });
  expect_block_grad("layernorm", jitter(make_layer_norm<double>(5), 4), random_tensor(rng, {3, 5}),
                    [](const auto& p, const TD& x) { return layernorm(p, x); });
  expect_block_grad("mlp", jitter(make_mlp<double>(rng, 4, 6), 5), random_tensor(rng, {3, 4}),
                    [](const auto& p, const TD& x) { return mlp(p, x); });
  expect_block_grad("mhsa", jitter(make_attention<double>(rng, 8, 2), 6), random_tensor(rng, {4, 8}),
                    [](const auto& p, const TD& x) { return mhsa(p, x); });
  const auto kv = random_tensor(rng, {5, 8});
  const std::vector<std::uint8_t> keep{1, 0, 1, 1, 1};
  expect_block_grad("mhca", jitter(make_attention<double>(rng, 8, 4), 7), random_tensor(rng, {3, 8}),
                    [&](const auto& p, const TD& x) { return mhca(p, x, kv, keep); });
}
