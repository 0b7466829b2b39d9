#include <cmath>
#include <numeric>
#include <random>

#include "cbag/compute.hpp"
#include "cbag/error.hpp"
#include "doctest.h"

using namespace cbag::compute;
using TD = Tensor<double>;

namespace {

TD randn(Shape shape, std::mt19937_64& rng, double std = 1.0, bool grad = true) {
  std::normal_distribution<double> nd(0.0, std);
  std::vector<double> v(element_count(shape));
  for (auto& x : v) x = nd(rng);
  return TD::from_values(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST_CASE("matmul shape algebra and mismatch message") {
  auto a = TD::zeros({2, 3});
  auto b = TD::zeros({3, 4});
  CHECK(matmul(a, b).shape() == Shape{2, 4});
  auto bad = TD::zeros({2, 4});
  try {
    matmul(a, bad);
    FAIL("expected ShapeError");
  } catch (const cbag::ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(2, 4)") != std::string::npos);
  }
}

TEST_CASE("relu and dropout degenerate cases") {
  auto x = TD::from_values({2}, {-1.0, 2.0});
  auto y = relu(x);
  CHECK(y.values()[0] == 0.0);
  CHECK(y.values()[1] == 2.0);
  std::mt19937_64 rng(3);
  auto z = dropout(x, 0.0, &rng);
  CHECK(z.values()[0] == -1.0);
  CHECK(z.values()[1] == 2.0);
  auto w = dropout(x, 0.5, nullptr);
  CHECK(w.values()[1] == 2.0);
}

TEST_CASE("dropout keeps expectation") {
  std::mt19937_64 rng(11);
  auto x = TD::from_values({10000}, std::vector<double>(10000, 1.0));
  auto y = dropout(x, 0.25, &rng);
  double s = 0.0;
  std::size_t zeros = 0;
  for (double v : y.values()) {
    s += v;
    zeros += v == 0.0;
  }
  CHECK(s / 10000.0 == doctest::Approx(1.0).epsilon(0.03));
  CHECK(zeros > 2300);
  CHECK(zeros < 2700);
}

TEST_CASE("softmax examples") {
  auto u = softmax_lastdim(TD::from_values({4}, {0, 0, 0, 0}));
  for (double v : u.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  auto big = softmax_lastdim(TD::from_values({2}, {1000, 0}));
  CHECK(std::isfinite(big.values()[0]));
  CHECK(big.values()[0] == doctest::Approx(1.0));
  CHECK(big.values()[1] < 1e-300);
  auto q = softmax_lastdim(TD::from_values({2}, {std::log(1.0), std::log(3.0)}));
  CHECK(std::abs(q.values()[0] - 0.25) < 1e-15);
  CHECK(std::abs(q.values()[1] - 0.75) < 1e-15);
  CHECK_THROWS_AS(softmax_lastdim(TD::from_values({2}, {NAN, 0.0})), cbag::NumericalError);
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = randn({7, 13}, rng, 5.0, false);
    auto s = softmax_lastdim(x);
    for (std::size_t r = 0; r < 7; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 13; ++c) {
        CHECK(s.values()[r * 13 + c] >= 0.0);
        sum += s.values()[r * 13 + c];
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("layer norm examples") {
  auto gain = TD::from_values({2}, {1, 1});
  auto bias = TD::from_values({2}, {0, 0});
  auto c = layer_norm(TD::from_values({1, 2}, {3, 3}), gain, bias, 1e-5);
  CHECK(c.values()[0] == 0.0);
  CHECK(c.values()[1] == 0.0);
  auto r = layer_norm(TD::from_values({1, 2}, {1, -1}), gain, bias, 1e-12);
  CHECK(r.values()[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(r.values()[1] == doctest::Approx(-1.0).epsilon(1e-10));
  auto k = layer_norm(TD::from_values({1, 2}, {4, -7}), TD::from_values({2}, {0, 0}), TD::from_values({2}, {2.5, 2.5}),
                      1e-5);
  CHECK(k.values()[0] == 2.5);
  CHECK(k.values()[1] == 2.5);
}

TEST_CASE("layer norm rows have zero mean") {
  std::mt19937_64 rng(8);
  auto x = randn({20, 64}, rng, 3.0, false);
  auto ones = TD::from_values({64}, std::vector<double>(64, 1.0));
  auto zeros = TD::zeros({64});
  auto y = layer_norm(x, ones, zeros, 1e-5);
  for (std::size_t r = 0; r < 20; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < 64; ++c) mean += y.values()[r * 64 + c];
    CHECK(std::abs(mean / 64.0) < 1e-7);
  }
}

TEST_CASE("cross entropy examples") {
  auto uniform = cross_entropy_logits(TD::from_values({1, 5}, {0.3, 0.3, 0.3, 0.3, 0.3}), 2);
  CHECK(uniform.item() == doctest::Approx(std::log(5.0)).epsilon(1e-14));
  auto sure = cross_entropy_logits(TD::from_values({1, 3}, {50, 0, 0}), 0);
  CHECK(sure.item() < 1e-20);
  // -log(e^2 / (e^2 + 2)), evaluated at 30 digits
  auto v = cross_entropy_logits(TD::from_values({1, 3}, {2, 0, 0}), 0);
  CHECK(std::abs(v.item() - 0.239544766221884504868922893154) < 1e-15);
  CHECK_THROWS_AS(cross_entropy_logits(TD::from_values({1, 3}, {2, 0, 0}), 3), cbag::UsageError);
}

TEST_CASE("cross entropy gradient is softmax minus one-hot") {
  auto logits = TD::from_values({1, 3}, {0.5, -1.0, 2.0}, true);
  auto loss = cross_entropy_logits(logits, 1);
  backward(loss);
  auto p = softmax_lastdim(TD::from_values({3}, {0.5, -1.0, 2.0}));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(logits.grad()[i] == doctest::Approx(p.values()[i] - (i == 1 ? 1.0 : 0.0)).epsilon(1e-14));
  }
}

TEST_CASE("masked cross entropy ignores padded rows") {
  auto logits = TD::from_values({3, 2}, {1, 0, 0, 1, 100, -100});
  std::vector<std::int32_t> labels{0, 1, 1};
  std::vector<std::uint8_t> mask{1, 1, 0};
  auto l = cross_entropy(logits, labels, mask);
  CHECK(l.item() == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
  std::vector<std::uint8_t> none{0, 0, 0};
  CHECK_THROWS_AS(cross_entropy(logits, labels, none), cbag::UsageError);
}

TEST_CASE("backward on hand derivatives") {
  auto x = TD::scalar(3.0, true);
  backward(mul(x, x));
  CHECK(x.grad()[0] == 6.0);

  auto a = TD::scalar(2.0, true);
  auto b = TD::scalar(5.0, true);
  backward(mul(a, b));
  CHECK(a.grad()[0] == 5.0);
  CHECK(b.grad()[0] == 2.0);

  // a second call accumulates
  backward(mul(a, b));
  CHECK(a.grad()[0] == 10.0);

  CHECK_THROWS_AS(backward(TD::zeros({2})), cbag::ShapeError);
}

TEST_CASE("backward is linear in the loss scale") {
  std::mt19937_64 rng(21);
  auto w = randn({4, 3}, rng);
  auto x = randn({5, 4}, rng, 1.0, false);
  auto f = [&] { return sum(relu(matmul(x, w))); };
  backward(f());
  std::vector<double> g1(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(scale(f(), 7.0));
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(w.grad()[i] == doctest::Approx(7.0 * g1[i]).epsilon(1e-14));
}

TEST_CASE("no-grad guard records nothing") {
  auto w = TD::from_values({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = sum(mul(w, w));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("attention examples") {
  std::mt19937_64 rng(2);
  auto q = randn({3, 4}, rng, 1.0, false);
  auto k1 = randn({1, 4}, rng, 1.0, false);
  auto v1 = TD::from_values({1, 4}, {1, 2, 3, 4});
  auto out = attention(q, k1, v1, false);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.values()[r * 4 + c] == doctest::Approx(c + 1.0).epsilon(1e-14));
  }

  auto q0 = TD::from_values({1, 2}, {0, 0});
  auto k = TD::from_values({3, 2}, {1, 0, 0, 1, 1, 1});
  auto v = TD::from_values({3, 2}, {3, 0, 0, 6, 0, 0});
  auto mean = attention(q0, k, v, false);
  CHECK(mean.values()[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(mean.values()[1] == doctest::Approx(2.0).epsilon(1e-14));

  // score gap (ln 3) * sqrt(d_k) with d_k = 4
  const double gap = std::log(3.0) * 2.0;
  auto qq = TD::from_values({1, 4}, {1, 0, 0, 0});
  auto kk = TD::from_values({2, 4}, {gap, 0, 0, 0, 0, 0, 0, 0});
  auto vv = TD::from_values({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  auto w = attention(qq, kk, vv, false);
  CHECK(std::abs(w.values()[0] - 0.75) < 1e-14);
  CHECK(std::abs(w.values()[1] - 0.25) < 1e-14);
}

TEST_CASE("multi-head attention masks keys past the valid length and the query position") {
  std::mt19937_64 rng(9);
  AttentionLayout layout{2, 4, 4, 2, true, {4, 3}};
  auto q = randn({8, 6}, rng, 1.0, false);
  auto k = randn({8, 6}, rng, 1.0, false);
  auto v = randn({8, 6}, rng, 1.0, false);
  auto base = multi_head_attention(q, k, v, layout);
  // changing padded key 3 of the second sequence and the last key of the
  // first sequence only affects the last query of the first sequence
  auto k2 = TD::from_values({8, 6}, std::vector<double>(k.values().begin(), k.values().end()));
  auto v2 = TD::from_values({8, 6}, std::vector<double>(v.values().begin(), v.values().end()));
  for (std::size_t c = 0; c < 6; ++c) {
    k2.mutable_values()[3 * 6 + c] += 1.0;
    v2.mutable_values()[7 * 6 + c] += 1.0;
    k2.mutable_values()[7 * 6 + c] -= 2.0;
  }
  auto moved = multi_head_attention(q, k2, v2, layout);
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 6; ++c) {
      if (r == 3) continue;
      CHECK(moved.values()[r * 6 + c] == base.values()[r * 6 + c]);
    }
  }
}

TEST_CASE("finite differences agree on every primitive") {
  std::mt19937_64 rng(17);
  auto a = randn({3, 4}, rng);
  auto b = randn({4, 5}, rng);
  auto g = randn({5}, rng);
  auto bias = randn({5}, rng);
  auto table = randn({6, 5}, rng);
  std::vector<std::int32_t> ids{0, 5, 2};
  std::vector<std::int32_t> labels{1, 4, 0};
  std::vector<std::uint8_t> mask{1, 1, 1};
  std::vector<TD> params{a, b, g, bias, table};
  auto f = [&] {
    auto h = matmul(a, b);
    h = add(h, embedding_gather(table, ids));
    h = layer_norm(h, g, bias, 1e-5);
    std::vector<TD> parts{relu(h), scale(h, 0.5)};
    auto cat = concat_lastdim<double>(parts);
    auto back = matmul(cat, TD::from_values({10, 5}, std::vector<double>(50, 0.1)));
    auto s = softmax_lastdim(mul(back, h));
    return add(cross_entropy(add(h, s), labels, mask), sum(scale(s, 0.3)));
  };
  auto res = finite_diff_check<double>(f, params, 1e-5, 200, 4);
  CHECK(res.checked == 72);  // exhaustive once samples cover every coordinate
  CHECK(res.max_relative_error < 1e-4);
}

TEST_CASE("finite differences on attention and a linear function") {
  std::mt19937_64 rng(23);
  auto q = randn({6, 4}, rng);
  auto k = randn({6, 4}, rng);
  auto v = randn({6, 4}, rng);
  std::vector<TD> params{q, k, v};
  AttentionLayout layout{2, 3, 3, 2, true, {3, 2}};
  auto f = [&] { return sum(mul(multi_head_attention(q, k, v, layout), v)); };
  auto res = finite_diff_check<double>(f, params, 1e-5, 72, 5);
  CHECK(res.max_relative_error < 1e-4);

  auto w = randn({5}, rng);
  auto c = randn({5}, rng, 1.0, false);
  std::vector<TD> lin{w};
  auto linear = [&] { return sum(mul(w, c)); };
  CHECK(finite_diff_check<double>(linear, lin, 1e-5, 5, 1).max_relative_error < 1e-8);
}

TEST_CASE("softmax cross entropy composite checks to 1e-6") {
  std::mt19937_64 rng(31);
  auto logits = randn({4, 6}, rng);
  std::vector<std::int32_t> labels{0, 3, 5, 2};
  std::vector<std::uint8_t> mask{1, 1, 0, 1};
  std::vector<TD> params{logits};
  auto f = [&] { return cross_entropy(logits, labels, mask); };
  auto res = finite_diff_check<double>(f, params, 1e-5, 24, 2);
  CHECK(res.max_relative_error < 1e-6);
}

TEST_CASE("finite difference check reports the offending coordinate") {
  // a deliberately wrong backward: detach half the function
  auto w = TD::from_values({3}, {0.5, 1.5, -2.0}, true);
  std::vector<TD> params{w};
  auto f = [&] {
    auto detached = TD::from_values({3}, std::vector<double>(w.values().begin(), w.values().end()));
    return add(sum(mul(w, w)), sum(mul(detached, detached)));
  };
  auto res = finite_diff_check<double>(f, params, 1e-5, 3, 1);
  CHECK(res.max_relative_error > 1e-3);
  CHECK(res.worst_param == 0);
  CHECK(res.worst_index < 3);
  CHECK(res.worst_numeric == doctest::Approx(2.0 * res.worst_analytic).epsilon(1e-6));
}
