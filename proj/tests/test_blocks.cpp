#include <cmath>
#include <numeric>

#include "doctest.h"
#include "matchformer/blocks.hpp"
#include "matchformer/errors.hpp"
#include "matchformer/gradcheck.hpp"
#include "test_util.hpp"

using namespace matchformer;
using testutil::bit_equal;
using testutil::max_abs_diff;
using testutil::probe;
using testutil::randn;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat rows(const Tensor& t, std::int64_t batch) {
  const auto n = t.dim(1), c = t.dim(2);
  Mat m(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(c)));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < c; ++k) m[i][k] = t.at((batch * n + i) * c + k);
  return m;
}

Mat affine(const Mat& x, const Linear& l) {
  const auto in = l.weight.dim(0), out = l.weight.dim(1);
  Mat y(x.size(), std::vector<double>(static_cast<std::size_t>(out)));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::int64_t o = 0; o < out; ++o) {
      double s = l.bias.defined() ? l.bias.at(o) : 0.0;
      for (std::int64_t k = 0; k < in; ++k) s += x[i][k] * l.weight.at(k * out + o);
      y[i][o] = s;
    }
  return y;
}

void softmax_inplace(std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double z = 0;
  for (auto& x : v) z += (x = std::exp(x - m));
  for (auto& x : v) x /= z;
}

// Straight-line multi-head scaled dot-product attention on plain rows.
Mat naive_attention(const Mat& q, const Mat& k, const Mat& v, int heads) {
  const std::size_t c = q[0].size(), d = c / heads;
  Mat out(q.size(), std::vector<double>(c, 0.0));
  for (int h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> w(k.size());
      for (std::size_t j = 0; j < k.size(); ++j) {
        double s = 0;
        for (std::size_t e = 0; e < d; ++e) s += q[i][h * d + e] * k[j][h * d + e];
        w[j] = s / std::sqrt(static_cast<double>(d));
      }
      softmax_inplace(w);
      for (std::size_t j = 0; j < k.size(); ++j)
        for (std::size_t e = 0; e < d; ++e) out[i][h * d + e] += w[j] * v[j][h * d + e];
    }
  return out;
}

// The factorized linear-attention formula evaluated through the explicit
// N x N' weight matrix rho_q(Q) rho_k(K)^T.
Mat naive_linear(const Mat& q, const Mat& k, const Mat& v, int heads) {
  const std::size_t c = q[0].size(), d = c / heads;
  Mat out(q.size(), std::vector<double>(c, 0.0));
  for (int h = 0; h < heads; ++h) {
    Mat rq(q.size(), std::vector<double>(d)), rk(k.size(), std::vector<double>(d));
    for (std::size_t i = 0; i < q.size(); ++i) {
      for (std::size_t e = 0; e < d; ++e) rq[i][e] = q[i][h * d + e];
      softmax_inplace(rq[i]);
    }
    for (std::size_t e = 0; e < d; ++e) {
      std::vector<double> col(k.size());
      for (std::size_t j = 0; j < k.size(); ++j) col[j] = k[j][h * d + e];
      softmax_inplace(col);
      for (std::size_t j = 0; j < k.size(); ++j) rk[j][e] = col[j];
    }
    for (std::size_t i = 0; i < q.size(); ++i)
      for (std::size_t j = 0; j < k.size(); ++j) {
        double w = 0;
        for (std::size_t e = 0; e < d; ++e) w += rq[i][e] * rk[j][e];
        for (std::size_t e = 0; e < d; ++e) out[i][h * d + e] += w * v[j][h * d + e];
      }
  }
  return out;
}

double max_diff(const Mat& a, const Tensor& t, std::int64_t batch) {
  Mat b = rows(t, batch);
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].size(); ++k) m = std::max(m, std::fabs(a[i][k] - b[i][k]));
  return m;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::int64_t>& perm) {
  std::vector<Tensor> parts;
  for (auto p : perm) parts.push_back(slice(x, 1, p, p + 1));
  return concat(parts, 1);
}

StageConfig toy_stage(AttentionKind kind, int channels, int heads, int reduction) {
  StageConfig s;
  s.channels = channels;
  s.attention = kind;
  s.heads = heads;
  s.reduction = reduction;
  s.layers = 1;
  s.cross_flags = {false};
  return s;
}

// Parameters start at their initial values; shake them so biases and norm
// offsets are not trivially zero/one.
void jitter(ParamStore& ps, std::uint64_t seed, double scale = 0.2) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& [_, t] : ps.items())
    for (auto& v : const_cast<Tensor&>(t).mutable_data()) v += n(rng);
}

}  // namespace

TEST_CASE("pos_pe") {
  ParamStore ps;
  Initializer init(1);
  PosPE pe = PosPE::create(ps, "pe", 1, 8, 7, 4, 3, init);
  Tensor zero = pe(Tensor::zeros({1, 1, 64, 64}));
  CHECK(zero.shape() == Shape{1, 8, 16, 16});
  for (double v : zero.data()) CHECK(v == 0.0);
  ParamStore ps2;
  PosPE large = PosPE::create(ps2, "pe", 1, 128, 7, 2, 3, init);
  CHECK(large(Tensor::zeros({1, 1, 64, 64})).shape() == Shape{1, 128, 32, 32});

  // A saturated gate reduces the embedding to the plain conv.
  Tensor x = randn({1, 1, 32, 32}, 2);
  for (auto& v : pe.gate.weight.mutable_data()) v = 0.0;
  for (auto& v : pe.gate.bias.mutable_data()) v = 50.0;
  CHECK(max_abs_diff(pe(x), pe.conv(x)) < 1e-15 * 100);
  CHECK_THROWS_AS(PosPE::create(ps, "even", 1, 8, 4, 4, 0, init), ConfigError);
  CHECK(pe.gate.groups == 8);
  CHECK(pe.gate.weight.shape() == Shape{8, 1, 3, 3});
}

TEST_CASE("std_pe") {
  ParamStore ps;
  Initializer init(3);
  StdPE single = StdPE::create(ps, "a", 1, 8, 16, init);
  CHECK(std_pe(randn({1, 1, 16, 16}, 1), single).shape() == Shape{1, 1, 8});
  StdPE pe = StdPE::create(ps, "b", 1, 8, 4, init);
  CHECK(std_pe(randn({1, 1, 64, 64}, 1), pe).shape() == Shape{1, 256, 8});
  CHECK_THROWS_AS(std_pe(randn({1, 1, 18, 16}, 1), pe), ShapeError);

  Tensor code = sinusoidal_code_2d(8, 3, 5);
  for (int c = 0; c < 8; ++c) CHECK(code.at(c * 15) == (c % 2 == 0 ? 0.0 : 1.0));
  // Zero weights leave exactly the code.
  for (auto& v : pe.proj.weight.mutable_data()) v = 0.0;
  Tensor y = pe(randn({1, 1, 12, 20}, 4));
  CHECK(bit_equal(reshape(y, {8, 3, 5}), code));
  // Row code varies along y only.
  CHECK(code.at(0 * 15 + 1 * 5 + 0) == code.at(0 * 15 + 1 * 5 + 4));
  CHECK(code.at(4 * 15 + 0 * 5 + 2) == code.at(4 * 15 + 2 * 5 + 2));
}

TEST_CASE("full attention") {
  ParamStore ps;
  Initializer init(5);
  AttentionParams a = AttentionParams::create(ps, "att", AttentionKind::Full, 16, 4, 1, init);
  jitter(ps, 6);
  Tensor q = randn({2, 7, 16}, 7), kv = randn({2, 9, 16}, 8);
  Tensor out = full_attention(q, kv, a);
  CHECK(out.shape() == Shape{2, 7, 16});

  for (std::int64_t b = 0; b < 2; ++b) {
    Mat val = affine(rows(kv, b), a.v);
    Mat ref = affine(naive_attention(affine(rows(q, b), a.q), affine(rows(kv, b), a.k), val, 4), a.proj);
    CHECK(max_diff(ref, out, b) < 1e-12);
  }

  // One key: each query returns the projected value row.
  Tensor one = randn({1, 1, 16}, 9);
  Tensor single = full_attention(randn({1, 5, 16}, 10), one, a);
  Tensor expect = a.proj(a.v(one));
  for (int i = 0; i < 5; ++i) CHECK(max_abs_diff(slice(single, 1, i, i + 1), expect) < 1e-12);

  // Duplicating a key doubles its weight, as direct softmax over all rows says.
  Tensor dup = concat({kv, slice(kv, 1, 0, 1)}, 1);
  Tensor dout = full_attention(q, dup, a);
  Mat dval = affine(rows(dup, 0), a.v);
  Mat dref = affine(naive_attention(affine(rows(q, 0), a.q), affine(rows(dup, 0), a.k), dval, 4), a.proj);
  CHECK(max_diff(dref, dout, 0) < 1e-12);

  const std::vector<std::int64_t> perm = {3, 8, 0, 5, 1, 7, 2, 6, 4};
  CHECK(max_abs_diff(full_attention(q, permute_rows(kv, perm), a), out) < 1e-12);
  const std::vector<std::int64_t> qperm = {6, 2, 4, 0, 5, 1, 3};
  CHECK(max_abs_diff(full_attention(permute_rows(q, qperm), kv, a), permute_rows(out, qperm)) < 1e-12);
  CHECK_THROWS_AS(full_attention(randn({1, 3, 8}, 1), kv, a), ShapeError);
}

TEST_CASE("full attention evaluated in query chunks without gradients") {
  // 2 x 2 heads x 1100 x 1100 scores exceeds the chunk budget.
  const std::int64_t n = 1100;
  REQUIRE(4 * n * n > kAttentionChunkElements);
  Tensor q = randn({2, n, 8}, 1), k = randn({2, n, 8}, 2), v = randn({2, n, 8}, 3);
  Tensor whole = attention_core_full(q, k, v, 2);
  NoGradGuard ng;
  Tensor chunked = attention_core_full(q, k, v, 2);
  CHECK(bit_equal(whole, chunked));
}

TEST_CASE("linear attention") {
  ParamStore ps;
  Initializer init(11);
  AttentionParams a = AttentionParams::create(ps, "att", AttentionKind::Linear, 16, 2, 1, init);
  jitter(ps, 12, 0.5);
  Tensor q = randn({1, 16, 16}, 13), kv = randn({1, 16, 16}, 14);
  Tensor out = linear_attention(q, kv, a);
  Mat ref = affine(naive_linear(affine(rows(q, 0), a.q), affine(rows(kv, 0), a.k), affine(rows(kv, 0), a.v), 2), a.proj);
  CHECK(max_diff(ref, out, 0) < 1e-12);

  Tensor one = randn({1, 1, 16}, 15);
  Tensor single = linear_attention(randn({1, 4, 16}, 16), one, a);
  Tensor expect = a.proj(a.v(one));
  for (int i = 0; i < 4; ++i) CHECK(max_abs_diff(slice(single, 1, i, i + 1), expect) < 1e-12);

  std::vector<std::int64_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
  CHECK(max_abs_diff(linear_attention(q, permute_rows(kv, perm), a), out) < 1e-12);
}

TEST_CASE("spatial efficient attention") {
  ParamStore ps;
  Initializer init(21);
  AttentionParams r1 = AttentionParams::create(ps, "r1", AttentionKind::SpatialReduction, 16, 2, 1, init);
  jitter(ps, 22);
  CHECK_FALSE(r1.sr.weight.defined());
  AttentionParams full = r1;
  full.kind = AttentionKind::Full;
  Tensor map = randn({2, 16, 4, 4}, 23);
  Tensor q = map_to_seq(map);
  CHECK(bit_equal(spatial_efficient_attention(q, map, r1), full_attention(q, q, full)));
  CHECK(bit_equal(attend(q, q, 4, 4, r1), full_attention(q, q, full)));

  ParamStore ps4;
  AttentionParams r4 = AttentionParams::create(ps4, "r4", AttentionKind::SpatialReduction, 16, 1, 4, init);
  Tensor big = randn({1, 16, 16, 16}, 24);
  Tensor reduced = map_to_seq(r4.sr(big));
  CHECK(reduced.dim(1) == 16);
  CHECK(spatial_efficient_attention(map_to_seq(big), big, r4).shape() == Shape{1, 256, 16});

  // Reduce-then-attend, straight-line: strided conv by loops, layer norm by
  // hand, then the naive attention above.
  ParamStore ps2;
  AttentionParams r2 = AttentionParams::create(ps2, "r2", AttentionKind::SpatialReduction, 8, 2, 2, init);
  jitter(ps2, 25);
  Tensor m2 = randn({1, 8, 6, 4}, 26);
  Tensor got = spatial_efficient_attention(map_to_seq(m2), m2, r2);
  Mat red(6, std::vector<double>(8));
  for (int oy = 0; oy < 3; ++oy)
    for (int ox = 0; ox < 2; ++ox)
      for (int oc = 0; oc < 8; ++oc) {
        double s = r2.sr.bias.at(oc);
        for (int ic = 0; ic < 8; ++ic)
          for (int ky = 0; ky < 2; ++ky)
            for (int kx = 0; kx < 2; ++kx)
              s += m2.at((ic * 6 + oy * 2 + ky) * 4 + ox * 2 + kx) * r2.sr.weight.at(((oc * 8 + ic) * 2 + ky) * 2 + kx);
        red[oy * 2 + ox][oc] = s;
      }
  for (auto& row : red) {
    double mu = 0, var = 0;
    for (double v : row) mu += v / 8;
    for (double v : row) var += (v - mu) * (v - mu) / 8;
    for (int c = 0; c < 8; ++c) row[c] = (row[c] - mu) / std::sqrt(var + 1e-6) * r2.sr_norm.gain.at(c) + r2.sr_norm.offset.at(c);
  }
  Mat qs = rows(map_to_seq(m2), 0);
  Mat ref = affine(naive_attention(affine(qs, r2.q), affine(red, r2.k), affine(red, r2.v), 2), r2.proj);
  CHECK(max_diff(ref, got, 0) < 1e-12);
  CHECK_THROWS_AS(spatial_efficient_attention(map_to_seq(randn({1, 8, 5, 4}, 1)), randn({1, 8, 5, 4}, 1), r2),
                  ShapeError);
}

TEST_CASE("mix_ffn") {
  ParamStore ps;
  Initializer init(31);
  FFNParams f = FFNParams::create(ps, "ffn", 128, 4, init);
  CHECK(f.fc1.weight.shape() == Shape{128, 512});
  CHECK(f.dw.weight.shape() == Shape{512, 1, 3, 3});
  ParamStore ps2;
  FFNParams z = FFNParams::create(ps2, "ffn", 8, 4, init);
  for (auto& [_, t] : ps2.items())
    for (auto& v : const_cast<Tensor&>(t).mutable_data()) v = 0.0;
  Tensor zero = mix_ffn(randn({1, 12, 8}, 1), 3, 4, z);
  for (double v : zero.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(mix_ffn(randn({1, 12, 8}, 1), 3, 5, z), ShapeError);
}

TEST_CASE("attention block wiring") {
  for (AttentionKind kind : {AttentionKind::Linear, AttentionKind::SpatialReduction, AttentionKind::Full}) {
    ParamStore ps;
    Initializer init(41);
    const int r = kind == AttentionKind::SpatialReduction ? 2 : 1;
    AttentionBlock blk = AttentionBlock::create(ps, "blk", toy_stage(kind, 16, 2, r), init);
    jitter(ps, 42);
    Tensor xa = randn({1, 16, 16}, 43), xb = randn({1, 16, 16}, 44);

    auto [sa, sb] = attention_block(xa, xb, 4, 4, false, blk);
    CHECK(sa.shape() == xa.shape());
    auto [sa0, sb0] = attention_block(xa, Tensor::zeros({1, 16, 16}), 4, 4, false, blk);
    CHECK(bit_equal(sa, sa0));
    CHECK(bit_equal(sa, blk.forward_joint(xa, 4, 4, false)));

    auto [ca, cb] = attention_block(xa, xa, 4, 4, true, blk);
    CHECK(bit_equal(ca, blk.forward_joint(xa, 4, 4, false)));
    CHECK(bit_equal(ca, cb));

    auto [xa1, xb1] = attention_block(xa, xb, 4, 4, true, blk);
    auto [xb2, xa2] = attention_block(xb, xa, 4, 4, true, blk);
    CHECK(bit_equal(xa1, xa2));
    CHECK(bit_equal(xb1, xb2));
    CHECK(max_abs_diff(xa1, sa) > 0.0);
    CHECK_THROWS_AS(attention_block(xa, randn({1, 16, 8}, 1), 4, 4, true, blk), ShapeError);
  }
}

TEST_CASE("block gradients pass fd_check and reach every parameter") {
  for (AttentionKind kind : {AttentionKind::Linear, AttentionKind::SpatialReduction, AttentionKind::Full}) {
    for (bool cross : {false, true}) {
      ParamStore ps;
      Initializer init(51);
      const int r = kind == AttentionKind::SpatialReduction ? 2 : 1;
      AttentionBlock blk = AttentionBlock::create(ps, "blk", toy_stage(kind, 8, 2, r), init);
      jitter(ps, 52);
      Tensor x = randn({2, 16, 8}, 53);
      auto loss = [&] { return probe(blk.forward_joint(x, 4, 4, cross), 54); };
      FdOptions opt;
      opt.tol = 1e-3;
      std::vector<Tensor> wrt = ps.tensors();
      x.set_requires_grad(true);
      wrt.push_back(x);
      FdReport rep = fd_check(loss, wrt, opt);
      INFO(to_string(kind) << " cross " << cross << " worst " << rep.worst << " " << rep.max_rel_error);
      CHECK(rep.passed);

      ps.zero_grad();
      loss().backward();
      for (const auto& [name, t] : ps.items()) {
        double mag = 0;
        for (double g : t.grad()) mag += std::fabs(g);
        INFO(name);
        CHECK(mag > 1e-9);
      }
    }
  }
  ParamStore ps;
  Initializer init(55);
  PosPE pe = PosPE::create(ps, "pe", 2, 4, 3, 2, 1, init);
  jitter(ps, 56);
  Tensor x = randn({1, 2, 8, 8}, 57);
  FdOptions opt;
  opt.tol = 1e-3;
  CHECK(fd_check([&] { return probe(pe(x), 58); }, ps.tensors(), opt).passed);
}
