#include <cmath>
#include <sstream>

#include "doctest.h"
#include "matchformer/errors.hpp"
#include "matchformer/gradcheck.hpp"
#include "matchformer/parallel.hpp"
#include "matchformer/tensor.hpp"
#include "test_util.hpp"

using namespace matchformer;
using testutil::max_abs_diff;
using testutil::probe;
using testutil::randn;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::int64_t p = 0; p < k; ++p) s += a.at(i * k + p) * b.at(p * n + j);
      out[i * n + j] = s;
    }
  return Tensor::from({m, n}, out);
}

Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad, int groups) {
  const auto bn = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto cout = w.dim(0), cg = w.dim(1), k = w.dim(2);
  const auto ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  const auto out_per_group = cout / groups;
  std::vector<double> out(static_cast<std::size_t>(bn * cout * ho * wo), 0.0);
  for (std::int64_t b = 0; b < bn; ++b)
    for (std::int64_t oc = 0; oc < cout; ++oc)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double s = bias.at(oc);
          const auto g = oc / out_per_group;
          for (std::int64_t ic = 0; ic < cg; ++ic)
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const auto iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
                const auto c = g * cg + ic;
                s += x.at(((b * cin + c) * h + iy) * wd + ix) * w.at(((oc * cg + ic) * k + ky) * k + kx);
              }
          out[((b * cout + oc) * ho + oy) * wo + ox] = s;
        }
  (void)cin;
  return Tensor::from({bn, cout, ho, wo}, out);
}

}  // namespace

TEST_CASE("elementwise values and broadcasting") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == doctest::Approx(0.5));
  Tensor s = add(Tensor::from({2}, {1, 2}), Tensor::from({2}, {3, 4}));
  CHECK(s.at(0) == 4);
  CHECK(s.at(1) == 6);
  Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor row = Tensor::from({3}, {10, 20, 30});
  Tensor r = add(m, row);
  CHECK(r.at(4) == 25);
  CHECK(mul(m, Tensor::scalar(2.0)).at(5) == 12);
  CHECK_THROWS_AS(add(m, Tensor::from({2}, {1, 2})), ShapeError);
  CHECK_THROWS_AS(div(Tensor::from({1}, {1.0}), Tensor::from({1}, {0.0})), NumericalError);
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(exp(Tensor::scalar(1.0)).item() == doctest::Approx(std::exp(1.0)));
}

TEST_CASE("product rule gradient") {
  Tensor a = Tensor::from({1}, {2.0}, true), b = Tensor::from({1}, {3.0}, true);
  sum(mul(a, b)).backward();
  CHECK(a.grad()[0] == 3.0);
  CHECK(b.grad()[0] == 2.0);
}

TEST_CASE("matmul against the triple-loop oracle") {
  Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  CHECK(max_abs_diff(matmul(i2, i2), i2) == 0.0);
  Tensor p = matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 2}, {0, 1, 1, 0}));
  CHECK(max_abs_diff(p, Tensor::from({2, 2}, {2, 1, 4, 3})) == 0.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> ext(1, 8);
    const int m = ext(rng), k = ext(rng), n = ext(rng);
    Tensor a = randn({m, k}, seed + 100), b = randn({k, n}, seed + 200);
    CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
  }
  Tensor a = randn({5, 7}, 1), b = randn({7, 3}, 2);
  CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
  // Large enough to exercise the packed kernel and its edges.
  Tensor big_a = randn({37, 53}, 3), big_b = randn({53, 29}, 4);
  CHECK(max_abs_diff(matmul(big_a, big_b), naive_matmul(big_a, big_b)) < 1e-10);
  CHECK_THROWS_AS(matmul(randn({2, 3}, 0), randn({4, 2}, 0)), ShapeError);
}

TEST_CASE("batched matmul matches per-slice products") {
  Tensor a = randn({2, 3, 4, 5}, 7), b = randn({2, 3, 5, 6}, 8);
  Tensor c = matmul(a, b);
  for (int s = 0; s < 6; ++s) {
    Tensor as = reshape(slice(reshape(a, {6, 4, 5}), 0, s, s + 1), {4, 5});
    Tensor bs = reshape(slice(reshape(b, {6, 5, 6}), 0, s, s + 1), {5, 6});
    Tensor cs = reshape(slice(reshape(c, {6, 4, 6}), 0, s, s + 1), {4, 6});
    CHECK(max_abs_diff(cs, naive_matmul(as, bs)) < 1e-12);
  }
}

TEST_CASE("matmul rows are independent of batch position") {
  Tensor w = randn({16, 24}, 11);
  Tensor x = randn({3, 10, 16}, 12);
  Tensor full = matmul(x, w);
  Tensor one = matmul(slice(x, 0, 1, 2), w);
  CHECK(testutil::bit_equal(slice(full, 0, 1, 2), one));
}

TEST_CASE("softmax") {
  Tensor u = softmax(Tensor::from({3}, {0, 0, 0}), 0);
  for (int i = 0; i < 3; ++i) CHECK(u.at(i) == doctest::Approx(1.0 / 3));
  Tensor big = softmax(Tensor::from({2}, {1000, 0}), 0);
  CHECK(std::fabs(big.at(0) - 1.0) < 1e-12);
  CHECK(big.at(1) < 1e-12);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tensor x = randn({4, 6}, seed, 1e3);
    for (int axis : {0, 1}) {
      Tensor y = softmax(x, axis);
      const int other = axis == 0 ? 6 : 4, along = axis == 0 ? 4 : 6;
      for (int o = 0; o < other; ++o) {
        double s = 0;
        for (int a = 0; a < along; ++a) s += axis == 0 ? y.at(a * 6 + o) : y.at(o * 6 + a);
        CHECK(std::fabs(s - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("conv2d against the direct loop oracle") {
  Tensor ones = Tensor::full({1, 1, 4, 4}, 1.0);
  Tensor k3 = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor c = conv2d(ones, k3, Tensor::zeros({1}), 1, 1);
  CHECK(c.at(0) == 4);
  CHECK(c.at(5) == 9);
  CHECK(c.at(15) == 4);
  Tensor id = conv2d(randn({1, 1, 5, 5}, 3), Tensor::full({1, 1, 1, 1}, 1.0), Tensor::zeros({1}), 1, 0);
  CHECK(max_abs_diff(id, randn({1, 1, 5, 5}, 3)) == 0.0);
  struct Case {
    int b, cin, cout, h, w, k, stride, pad, groups;
  };
  const Case cases[] = {{1, 3, 4, 7, 6, 3, 1, 1, 1}, {2, 4, 4, 8, 8, 3, 2, 1, 4}, {1, 2, 6, 8, 7, 5, 2, 2, 2},
                        {2, 3, 5, 8, 8, 7, 4, 3, 1}, {1, 6, 3, 5, 5, 1, 1, 0, 3}, {1, 4, 4, 6, 6, 2, 2, 0, 1},
                        {2, 8, 8, 4, 4, 3, 1, 1, 8}, {1, 1, 8, 8, 8, 7, 2, 3, 1}};
  std::uint64_t seed = 0;
  for (const auto& cs : cases) {
    Tensor x = randn({cs.b, cs.cin, cs.h, cs.w}, ++seed);
    Tensor w = randn({cs.cout, cs.cin / cs.groups, cs.k, cs.k}, ++seed);
    Tensor bias = randn({cs.cout}, ++seed);
    CHECK(max_abs_diff(conv2d(x, w, bias, cs.stride, cs.pad, cs.groups),
                       naive_conv(x, w, bias, cs.stride, cs.pad, cs.groups)) < 1e-10);
  }
  CHECK_THROWS_AS(conv2d(randn({1, 3, 4, 4}, 0), randn({4, 1, 3, 3}, 0), Tensor::zeros({4}), 1, 1, 2), ShapeError);
  CHECK_THROWS_AS(conv2d(randn({1, 1, 2, 2}, 0), randn({1, 1, 5, 5}, 0), Tensor::zeros({1}), 1, 0), ShapeError);
}

TEST_CASE("layer_norm statistics") {
  Tensor g = Tensor::full({5}, 1.0), o = Tensor::zeros({5});
  Tensor c = layer_norm(Tensor::full({2, 5}, 3.0), g, o);
  for (double v : c.data()) CHECK(v == 0.0);
  Tensor y = layer_norm(randn({4, 16}, 5, 3.0), Tensor::full({16}, 1.0), Tensor::zeros({16}));
  for (int r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (int k = 0; k < 16; ++k) m += y.at(r * 16 + k);
    m /= 16;
    for (int k = 0; k < 16; ++k) v += (y.at(r * 16 + k) - m) * (y.at(r * 16 + k) - m);
    v /= 16;
    CHECK(std::fabs(m) < 1e-9);
    CHECK(std::fabs(v - 1.0) < 1e-6);
  }
}

TEST_CASE("structural ops") {
  Tensor x = randn({2, 3, 4}, 9);
  CHECK(testutil::bit_equal(reshape(reshape(x, {6, 4}), {2, 3, 4}), x));
  CHECK(testutil::bit_equal(transpose(transpose(x)), x));
  CHECK(testutil::bit_equal(permute(permute(x, {2, 0, 1}), {1, 2, 0}), x));
  CHECK(testutil::bit_equal(concat({slice(x, 1, 0, 1), slice(x, 1, 1, 3)}, 1), x));
  Tensor up = upsample_bilinear2x(Tensor::full({1, 2, 3, 3}, 0.7));
  CHECK(up.dim(2) == 6);
  for (double v : up.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
  Tensor n = l2_normalize(Tensor::from({2, 2}, {3, 4, 0, 0}));
  CHECK(n.at(0) == doctest::Approx(0.6));
  CHECK(n.at(1) == doctest::Approx(0.8));
  CHECK(n.at(2) == 0.0);
  CHECK(n.at(3) == 0.0);
  Tensor m = randn({2, 5, 3, 4}, 4);
  CHECK(testutil::bit_equal(seq_to_map(map_to_seq(m), 3, 4), m));
  CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);
  Tensor t = take(Tensor::from({4}, {1, 2, 3, 4}), {3, 0});
  CHECK(t.at(0) == 4);
  CHECK(t.at(1) == 1);
}

TEST_CASE("bilinear sampling") {
  Tensor map = Tensor::from({1, 2, 2}, {0, 1, 2, 3});
  Tensor s = sample_bilinear(map, {{0.5, 0.5}, {0, 0}, {1, 1}, {-3, 0}});
  CHECK(s.at(0) == doctest::Approx(1.5));
  CHECK(s.at(1) == 0);
  CHECK(s.at(2) == 3);
  CHECK(s.at(3) == 0);
}

TEST_CASE("backward basics") {
  Tensor x = randn({3, 4}, 1, 1.0, true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);
  Tensor y = randn({3, 4}, 2, 1.0, true);
  sum(mul(y, y)).backward();
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.grad()[i] == doctest::Approx(2 * y.at(i)));
  // A tensor used twice accumulates both contributions.
  Tensor z = Tensor::from({1}, {1.5}, true);
  sum(add(mul(z, 2.0), mul(z, 3.0))).backward();
  CHECK(z.grad()[0] == doctest::Approx(5.0));
  CHECK_THROWS_AS(x.backward(), ShapeError);
}

TEST_CASE("every differentiable op passes fd_check on ten seeds") {
  using Op = std::function<Tensor(const Tensor&, std::uint64_t)>;
  struct Named {
    const char* name;
    Shape shape;
    Op op;
  };
  const std::vector<Named> ops = {
      {"add", {3, 4}, [](const Tensor& x, std::uint64_t s) { return add(x, randn({4}, s)); }},
      {"sub", {3, 4}, [](const Tensor& x, std::uint64_t s) { return sub(randn({3, 4}, s), x); }},
      {"mul", {3, 4}, [](const Tensor& x, std::uint64_t) { return mul(x, x); }},
      {"div", {3, 4},
       [](const Tensor& x, std::uint64_t s) { return div(x, add(mul(exp(randn({3, 4}, s)), 1.0), 0.5)); }},
      {"div_denominator", {4}, [](const Tensor& x, std::uint64_t) { return div(Tensor::full({4}, 1.0), add(exp(x), 1.0)); }},
      {"sigmoid", {3, 4}, [](const Tensor& x, std::uint64_t) { return sigmoid(x); }},
      {"gelu", {3, 4}, [](const Tensor& x, std::uint64_t) { return gelu(x); }},
      {"exp", {3, 4}, [](const Tensor& x, std::uint64_t) { return exp(x); }},
      {"log", {3, 4}, [](const Tensor& x, std::uint64_t) { return log(add(mul(x, x), 0.5)); }},
      {"mean", {3, 4}, [](const Tensor& x, std::uint64_t) { return mul(mean(x), mean(x)); }},
      {"matmul", {3, 5}, [](const Tensor& x, std::uint64_t s) { return matmul(x, randn({5, 2}, s)); }},
      {"matmul_rhs", {5, 2}, [](const Tensor& x, std::uint64_t s) { return matmul(randn({2, 3, 5}, s), x); }},
      {"softmax_last", {3, 5}, [](const Tensor& x, std::uint64_t) { return softmax(x, -1); }},
      {"softmax_first", {3, 5}, [](const Tensor& x, std::uint64_t) { return softmax(x, 0); }},
      {"conv2d", {1, 2, 5, 5},
       [](const Tensor& x, std::uint64_t s) { return conv2d(x, randn({3, 2, 3, 3}, s), randn({3}, s + 1), 2, 1); }},
      {"conv2d_depthwise", {1, 3, 4, 4},
       [](const Tensor& x, std::uint64_t s) { return conv2d(x, randn({3, 1, 3, 3}, s), randn({3}, s), 1, 1, 3); }},
      {"layer_norm", {3, 6},
       [](const Tensor& x, std::uint64_t s) { return layer_norm(x, randn({6}, s), randn({6}, s + 1)); }},
      {"reshape_permute", {2, 3, 4},
       [](const Tensor& x, std::uint64_t) { return mul(permute(reshape(x, {2, 4, 3}), {2, 0, 1}), 1.5); }},
      {"transpose", {2, 3, 4}, [](const Tensor& x, std::uint64_t) { return transpose(x); }},
      {"slice_concat", {4, 3},
       [](const Tensor& x, std::uint64_t) { return concat({slice(x, 0, 2, 4), mul(slice(x, 0, 0, 3), 2.0)}, 0); }},
      {"upsample", {1, 2, 3, 3}, [](const Tensor& x, std::uint64_t) { return upsample_bilinear2x(x); }},
      {"pad_replicate", {1, 1, 3, 3}, [](const Tensor& x, std::uint64_t) { return pad_replicate(x, 2); }},
      {"l2_normalize", {3, 4}, [](const Tensor& x, std::uint64_t) { return l2_normalize(x); }},
      {"take", {3, 4}, [](const Tensor& x, std::uint64_t) { return take(x, {0, 5, 5, 11}); }},
      {"sample_bilinear", {2, 4, 4},
       [](const Tensor& x, std::uint64_t) { return sample_bilinear(x, {{0.3, 1.7}, {2.5, 2.25}, {-0.2, 3.0}}); }},
      {"map_seq", {1, 2, 2, 3},
       [](const Tensor& x, std::uint64_t) { return seq_to_map(mul(map_to_seq(x), 3.0), 2, 3); }},
  };
  for (const auto& op : ops) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Tensor x = randn(op.shape, 1000 + seed);
      FdReport r = fd_check([&](const Tensor& v) { return probe(op.op(v, seed + 1), 77 + seed); }, x, 1e-5, 1e-4);
      INFO(op.name << " seed " << seed << " worst " << r.worst << " rel " << r.max_rel_error);
      CHECK(r.passed);
    }
  }
}

TEST_CASE("fd_check harness") {
  Tensor x = randn({4, 3}, 3);
  FdReport r = fd_check([](const Tensor& v) { return sum(v); }, x);
  CHECK(r.max_rel_error < 1e-10);
  FdReport s = fd_check([](const Tensor& v) {
    Tensor p = softmax(v, -1);
    return sum(mul(p, p));
  }, x);
  CHECK(s.passed);
  testing::set_gradient_fault(true);
  FdReport bad = fd_check([](const Tensor& v) { return sum(sigmoid(v)); }, x);
  testing::set_gradient_fault(false);
  CHECK_FALSE(bad.passed);
  CHECK_THROWS_AS(fd_check([](const Tensor& v) { return v; }, x), ShapeError);
  CHECK_THROWS_AS(fd_check([](const Tensor& v) { return sum(v); }, x, 1e-2), ConfigError);
}

TEST_CASE("no-grad guard and detach") {
  Tensor x = randn({3}, 1, 1.0, true);
  {
    NoGradGuard g;
    Tensor y = mul(x, 2.0);
    CHECK_FALSE(y.requires_grad());
  }
  Tensor y = mul(x.detach(), 2.0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("non-finite forward values are hard errors") {
  CHECK_THROWS_AS(exp(Tensor::scalar(1000.0)), NumericalError);
  CHECK_THROWS_AS(log(Tensor::scalar(-1.0)), NumericalError);
  CHECK_THROWS_AS(add(Tensor::from({1}, {NAN}), 1.0), NumericalError);
}

TEST_CASE("snapshot round trip") {
  Tensor x = randn({2, 3, 5}, 42);
  std::stringstream ss;
  write_snapshot(ss, x);
  Tensor y = read_snapshot(ss);
  CHECK(testutil::bit_equal(x, y));
  std::stringstream bad("shape: 2 2\n1 2 3\n");
  CHECK_THROWS_AS(read_snapshot(bad, "fixture"), ParseError);
  std::stringstream bad2("shap 2\n1 2\n");
  CHECK_THROWS_AS(read_snapshot(bad2, "fixture"), ParseError);
}

TEST_CASE("results do not depend on the thread count") {
  Tensor a = randn({64, 96}, 5), b = randn({96, 80}, 6);
  set_thread_count(1);
  Tensor one = matmul(a, b);
  Tensor c1 = conv2d(randn({2, 8, 16, 16}, 7), randn({8, 8, 3, 3}, 8), Tensor::zeros({8}), 1, 1);
  set_thread_count(3);
  Tensor three = matmul(a, b);
  Tensor c3 = conv2d(randn({2, 8, 16, 16}, 7), randn({8, 8, 3, 3}, 8), Tensor::zeros({8}), 1, 1);
  set_thread_count(0);
  CHECK(testutil::bit_equal(one, three));
  CHECK(testutil::bit_equal(c1, c3));
}
