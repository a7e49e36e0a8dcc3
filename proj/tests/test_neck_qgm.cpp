#include <doctest.h>

#include <cmath>

#include "crformer/error.hpp"
#include "crformer/neck_qgm.hpp"
#include "hull_oracle.hpp"
#include "test_util.hpp"

using namespace crformer;
using testutil::max_abs_diff;
using testutil::random_tensor;
using testutil::weighted_sum;

namespace {

using TD = Tensor<double>;

template <typename P>
P jitter(P p, std::uint64_t seed, double amount = 0.1) {
  CounterRng rng(seed);
  visit_params(std::string("p"), p, [&](const std::string&, TD& t) {
    for (auto& v : t.mutable_data()) v += rng.uniform(-amount, amount);
  });
  return p;
}

FeaturePyramid<double> random_pyramid(CounterRng& rng, std::size_t s3, std::size_t c2, std::size_t c3,
                                      std::size_t c4) {
  return {random_tensor(rng, {2 * s3, 2 * s3, c2}), random_tensor(rng, {s3, s3, c3}),
          random_tensor(rng, {s3 / 2, s3 / 2, c4})};
}

std::vector<std::uint8_t> prefix_keep(std::size_t cap, std::size_t len) {
  std::vector<std::uint8_t> k(cap, 0);
  for (std::size_t i = 0; i < len; ++i) k[i] = 1;
  return k;
}

template <typename P, typename F>
void expect_grad(const char* name, P params, std::vector<TD> inputs, F&& apply, double tol) {
  std::vector<TD> values;
  std::vector<std::string> names;
  visit_params(std::string(name), params, [&](const std::string& n, TD& t) {
    values.push_back(t);
    names.push_back(n);
  });
  const std::size_t np = values.size();
  for (auto& x : inputs) {
    values.push_back(x);
    names.push_back("input");
  }
  ScalarFn<double> f = [&](const std::vector<TD>& p) {
    P local = params;
    std::size_t i = 0;
    visit_params(std::string(name), local, [&](const std::string&, TD& t) { t = p[i++]; });
    return apply(local, std::vector<TD>(p.begin() + static_cast<std::ptrdiff_t>(np), p.end()));
  };
  const auto r = finite_diff_check<double>(f, values, 1e-5, tol, names);
  INFO(name << " max rel error " << r.max_rel_error);
  CHECK(r.pass);
}

}  // namespace

TEST_CASE("coord_grid examples") {
  const auto one = coord_grid<double>(1, 1);
  CHECK(one.to_vector() == std::vector<double>{0, 0});
  const auto g3 = coord_grid<double>(3, 3);
  CHECK(g3.at({0, 0, 0}) == -1.0);
  CHECK(g3.at({0, 0, 1}) == -1.0);
  CHECK(g3.at({0, 2, 0}) == 1.0);
  CHECK(g3.at({0, 2, 1}) == -1.0);
  CHECK(g3.at({2, 0, 0}) == -1.0);
  CHECK(g3.at({2, 0, 1}) == 1.0);
  CHECK(g3.at({2, 2, 0}) == 1.0);
  CHECK(g3.at({2, 2, 1}) == 1.0);
  for (double v : coord_grid<double>(2, 2).to_vector()) CHECK((v == -1.0 || v == 1.0));
  const auto row = coord_grid<double>(1, 4);
  for (std::size_t x = 0; x < 4; ++x) CHECK(row.at({0, x, 1}) == 0.0);
}

TEST_CASE("fusion_neck extents and determinism") {
  CounterRng rng(1);
  const auto p = make_neck<double>(rng, 8, 4, 6, 10);
  const auto pyr = random_pyramid(rng, 8, 4, 6, 10);
  const auto y = fusion_neck(pyr, p);
  CHECK(y.shape() == Shape{8, 8, 8});
  FeaturePyramid<double> zero{TD(Shape{16, 16, 4}), TD(Shape{8, 8, 6}), TD(Shape{4, 4, 10})};
  const auto z1 = fusion_neck(zero, p), z2 = fusion_neck(zero, p);
  CHECK(z1.to_vector() == z2.to_vector());
  FeaturePyramid<double> bad{TD(Shape{16, 16, 4}), TD(Shape{8, 8, 6}), TD(Shape{2, 2, 10})};
  CHECK_THROWS_AS(fusion_neck(bad, p), DimensionError);
}

TEST_CASE("zero pyramid depends on biases and coordinates only") {
  CounterRng rng(2);
  const auto p = jitter(make_neck<double>(rng, 8, 4, 6, 10), 3);
  FeaturePyramid<double> zero{TD(Shape{8, 8, 4}), TD(Shape{4, 4, 6}), TD(Shape{2, 2, 10})};
  const auto y = fusion_neck(zero, p);
  auto pw = p;
  for (auto* l : {&pw.v4, &pw.v3, &pw.v2}) l->weight = random_tensor(rng, l->weight.shape());
  CHECK(fusion_neck(zero, pw).to_vector() == y.to_vector());
}

TEST_CASE("severing the side paths leaves only the deepest level") {
  CounterRng rng(4);
  auto p = jitter(make_neck<double>(rng, 8, 4, 6, 10), 5);
  auto w = p.aggregate.weight.mutable_data();
  const std::size_t c = 8;
  for (std::size_t row = 0; row < 4 * c; ++row)
    for (std::size_t col = 0; col < c; ++col) w[row * c + col] = 0.0;
  const auto a = random_pyramid(rng, 4, 4, 6, 10);
  auto b = random_pyramid(rng, 4, 4, 6, 10);
  b.f4 = a.f4;
  CHECK(max_abs_diff(fusion_neck(a, p), fusion_neck(b, p)) == 0.0);
  auto c2 = a;
  c2.f4 = random_tensor(rng, a.f4.shape());
  CHECK(max_abs_diff(fusion_neck(a, p), fusion_neck(c2, p)) > 0.0);
}

TEST_CASE("qgm with a single word") {
  CounterRng rng(6);
  const auto p = jitter(make_qgm<double>(rng, 8, 5, 16), 7);
  const auto grid = random_tensor(rng, {4, 4, 8});
  const auto word = random_tensor(rng, {1, 8});
  const std::vector<std::uint8_t> one{1};
  const auto q = qgm(grid, word, one, p);
  CHECK(q.attention.shape() == Shape{5, 1});
  for (double a : q.attention.to_vector()) CHECK(a == 1.0);
  const auto v = relu(linear(p.value_proj, word));
  for (std::size_t n = 0; n < 5; ++n) CHECK(max_abs_diff(slice(q.queries, 0, n, n + 1), v) < 1e-12);

  const std::vector<std::uint8_t> two{1, 1, 0};
  const auto dup = qgm(grid, concat<double>({word, word, random_tensor(rng, {1, 8})}, 0), two, p);
  CHECK(max_abs_diff(dup.queries, q.queries) < 1e-12);
  CHECK(dup.attention.at({0, 2}) == 0.0);
}

TEST_CASE("qgm with one query is a convex combination") {
  CounterRng rng(8);
  const auto p = jitter(make_qgm<double>(rng, 6, 1, 9), 9);
  const auto words = random_tensor(rng, {4, 6});
  const auto keep = prefix_keep(4, 3);
  const auto q = qgm(random_tensor(rng, {3, 3, 6}), words, keep, p);
  CHECK(q.queries.shape() == Shape{1, 6});
  const auto v = relu(linear(p.value_proj, slice(words, 0, 0, 3)));
  std::vector<std::vector<double>> verts(3, std::vector<double>(6));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 6; ++c) verts[i][c] = v.at({i, c});
  CHECK(testutil::in_convex_hull(verts, q.queries.to_vector()));
}

TEST_CASE("qgm attention and hull invariants on random draws") {
  CounterRng rng(10);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t c = 6, nq = 1 + rng.below(8), cap = 1 + rng.below(8), len = 1 + rng.below(cap);
    const auto p = jitter(make_qgm<double>(rng, c, nq, 4), 100 + trial, 0.3);
    const auto words = random_tensor(rng, {cap, c});
    const auto keep = prefix_keep(cap, len);
    const auto grid = random_tensor(rng, {2, 2, c});
    const auto q = qgm(grid, words, keep, p);
    for (double scale : {1.0, 7.5}) {
      const auto qs = scale == 1.0 ? q : qgm(crformer::scale(grid, scale), words, keep, p);
      for (std::size_t n = 0; n < nq; ++n) {
        double s = 0;
        for (std::size_t i = 0; i < cap; ++i) {
          const double a = qs.attention.at({n, i});
          CHECK(a >= 0.0);
          CHECK(a <= 1.0);
          if (!keep[i]) CHECK(a == 0.0);
          s += a;
        }
        CHECK(std::fabs(s - 1.0) < 1e-6);
      }
    }
    const auto v = relu(linear(p.value_proj, slice(words, 0, 0, len)));
    std::vector<std::vector<double>> verts(len, std::vector<double>(c));
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t k = 0; k < c; ++k) verts[i][k] = v.at({i, k});
    for (std::size_t n = 0; n < nq; ++n) {
      const auto row = slice(q.queries, 0, n, n + 1).to_vector();
      CHECK(testutil::in_convex_hull(verts, row));
    }
  }
}

TEST_CASE("qgm rejects all-pad text and mismatched grids") {
  CounterRng rng(11);
  const auto p = make_qgm<double>(rng, 4, 2, 4);
  const std::vector<std::uint8_t> none{0, 0};
  CHECK_THROWS_AS(qgm(random_tensor(rng, {2, 2, 4}), random_tensor(rng, {2, 4}), none, p), DegenerateRowError);
  const std::vector<std::uint8_t> one{1};
  CHECK_THROWS_AS(qgm(random_tensor(rng, {3, 2, 4}), random_tensor(rng, {1, 4}), one, p), DimensionError);
}

TEST_CASE("neck and qgm match central differences") {
  CounterRng rng(12);
  const auto pyr = random_pyramid(rng, 4, 3, 4, 5);
  expect_grad(
      "neck", jitter(make_neck<double>(rng, 4, 3, 4, 5), 13), {pyr.f2, pyr.f3, pyr.f4},
      [](const NeckParams<double>& p, const std::vector<TD>& x) {
        return weighted_sum(fusion_neck(FeaturePyramid<double>{x[0], x[1], x[2]}, p), 14);
      },
      1e-4);
  const auto keep = prefix_keep(5, 3);
  expect_grad(
      "qgm", jitter(make_qgm<double>(rng, 4, 3, 9), 15, 0.3), {random_tensor(rng, {3, 3, 4}), random_tensor(rng, {5, 4})},
      [&](const QgmParams<double>& p, const std::vector<TD>& x) {
        const auto q = qgm(x[0], x[1], keep, p);
        return add(weighted_sum(q.queries, 16), weighted_sum(q.attention, 17));
      },
      1e-4);
}

TEST_CASE("hull oracle separates inside from outside") {
  const std::vector<std::vector<double>> tri{{0, 0, 1}, {1, 0, 1}, {0, 1, 1}};
  CHECK(testutil::in_convex_hull(tri, {0.25, 0.25, 1}));
  CHECK(testutil::in_convex_hull(tri, {1, 0, 1}));
  CHECK_FALSE(testutil::in_convex_hull(tri, {0.75, 0.75, 1}));
  CHECK_FALSE(testutil::in_convex_hull(tri, {0.25, 0.25, 0.9}));
  const std::vector<std::vector<double>> dup{{1, 2}, {1, 2}, {3, 4}};
  CHECK(testutil::in_convex_hull(dup, {2, 3}));
  CHECK_FALSE(testutil::in_convex_hull(dup, {2, 3.5}));
}
