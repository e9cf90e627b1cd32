#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "matchformer/blocks.hpp"
#include "matchformer/errors.hpp"
#include "matchformer/evalkit.hpp"
#include "matchformer/gradcheck.hpp"
#include "matchformer/trainer.hpp"

using namespace matchformer;

namespace mfcli {

namespace {

// A group returns an empty string on success, otherwise the first failure.
using Group = std::function<std::string()>;

Tensor randn(Shape shape, std::uint64_t seed, double scale = 1.0, bool grad = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

double max_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.at(i) != b.at(i)) return false;
  return true;
}

Tensor probe(const Tensor& y, std::uint64_t seed) { return sum(mul(y, randn(y.shape(), seed))); }

std::string fmt(const char* f, double a, double b = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

void jitter(ParamStore& ps, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& [name, t] : ps.items())
    for (auto& v : const_cast<Tensor&>(t).mutable_data()) v += n(rng);
}

std::string elementwise_gradients() {
  using F = std::function<Tensor(const Tensor&)>;
  const Tensor other = randn({3, 4}, 99);
  const Tensor gain = randn({4}, 98), offset = randn({4}, 97);
  const Tensor w = randn({4, 5}, 96);
  const Tensor cw = randn({2, 2, 3, 3}, 95);
  const std::vector<std::pair<const char*, F>> ops = {
      {"add", [&](const Tensor& x) { return probe(add(x, other), 1); }},
      {"mul", [&](const Tensor& x) { return probe(mul(x, other), 2); }},
      {"div", [&](const Tensor& x) { return probe(div(other, add(mul(x, x), 1.0)), 3); }},
      {"sigmoid", [](const Tensor& x) { return probe(sigmoid(x), 4); }},
      {"gelu", [](const Tensor& x) { return probe(gelu(x), 5); }},
      {"exp", [](const Tensor& x) { return probe(exp(x), 6); }},
      {"log", [](const Tensor& x) { return probe(log(add(mul(x, x), 0.5)), 7); }},
      {"softmax", [](const Tensor& x) { return probe(softmax(x, -1), 8); }},
      {"layer_norm", [&](const Tensor& x) { return probe(layer_norm(x, gain, offset), 9); }},
      {"matmul", [&](const Tensor& x) { return probe(matmul(x, w), 10); }},
      {"l2_normalize", [](const Tensor& x) { return probe(l2_normalize(x), 11); }},
      {"conv2d", [&](const Tensor& x) { return probe(conv2d(reshape(x, {1, 2, 2, 3}), cw, Tensor(), 1, 1), 12); }},
  };
  const Tensor x = randn({3, 4}, 13);
  for (const auto& [name, f] : ops) {
    const FdReport r = fd_check(f, x.clone(), 1e-5, 1e-4);
    if (!r.passed) return std::string(name) + fmt(": relative error %.3g", r.max_rel_error);
  }
  return "";
}

std::string dense_oracles() {
  const Tensor a = randn({7, 9}, 1), b = randn({9, 5}, 2);
  const Tensor c = matmul(a, b);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 5; ++j) {
      double s = 0;
      for (int k = 0; k < 9; ++k) s += a.at(i * 9 + k) * b.at(k * 5 + j);
      if (std::fabs(s - c.at(i * 5 + j)) > 1e-12) return "matmul differs from the triple loop";
    }
  const Tensor x = randn({1, 2, 5, 6}, 3), w = randn({4, 2, 3, 3}, 4), bias = randn({4}, 5);
  const Tensor y = conv2d(x, w, bias, 2, 1);
  const std::int64_t ho = y.dim(2), wo = y.dim(3);
  for (int o = 0; o < 4; ++o)
    for (std::int64_t i = 0; i < ho; ++i)
      for (std::int64_t j = 0; j < wo; ++j) {
        double s = bias.at(o);
        for (int ci = 0; ci < 2; ++ci)
          for (int u = 0; u < 3; ++u)
            for (int v = 0; v < 3; ++v) {
              const std::int64_t yy = i * 2 - 1 + u, xx = j * 2 - 1 + v;
              if (yy < 0 || xx < 0 || yy >= 5 || xx >= 6) continue;
              s += x.at(static_cast<std::size_t>((ci * 5 + yy) * 6 + xx)) * w.at(static_cast<std::size_t>(((o * 2 + ci) * 3 + u) * 3 + v));
            }
        if (std::fabs(s - y.at(static_cast<std::size_t>((o * ho + i) * wo + j))) > 1e-12) return "conv2d differs from the direct sum";
      }
  return "";
}

StageConfig stage(AttentionKind kind, int reduction) {
  StageConfig s;
  s.channels = 8;
  s.heads = 2;
  s.attention = kind;
  s.reduction = reduction;
  s.ffn_ratio = 2;
  return s;
}

std::string block_gradients() {
  const std::vector<std::pair<AttentionKind, int>> kinds = {
      {AttentionKind::Linear, 1}, {AttentionKind::SpatialReduction, 2}, {AttentionKind::Full, 1}};
  for (const auto& [kind, red] : kinds) {
    for (bool cross : {false, true}) {
      ParamStore ps;
      Initializer init(7);
      const AttentionBlock blk = AttentionBlock::create(ps, "blk", stage(kind, red), init);
      jitter(ps, 8, 0.1);
      const Tensor x = randn({2, 16, 8}, 9, 1.0, true);
      std::vector<Tensor> wrt = ps.tensors();
      wrt.push_back(x);
      FdOptions opt;
      opt.tol = 1e-3;
      const FdReport r = fd_check([&] { return probe(blk.forward_joint(x, 4, 4, cross), 10); }, wrt, opt);
      if (!r.passed)
        return to_string(kind) + (cross ? " cross" : " self") + fmt(" block: relative error %.3g", r.max_rel_error);
    }
  }
  ParamStore ps;
  Initializer init(3);
  const PosPE pe = PosPE::create(ps, "pe", 2, 4, 3, 2, 1, init);
  jitter(ps, 4, 0.1);
  const Tensor x = randn({1, 2, 8, 8}, 5, 1.0, true);
  std::vector<Tensor> wrt = ps.tensors();
  wrt.push_back(x);
  FdOptions opt;
  opt.tol = 1e-3;
  const FdReport r = fd_check([&] { return probe(pe(x), 6); }, wrt, opt);
  if (!r.passed) return fmt("PosPE: relative error %.3g", r.max_rel_error);
  return "";
}

// Row-by-row softmax(q k^T / sqrt(d)) v, one head.
Tensor naive_full(const Tensor& q, const Tensor& k, const Tensor& v) {
  const auto n = q.dim(0), m = k.dim(0), d = q.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n * d), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<double> s(static_cast<std::size_t>(m));
    double mx = -INFINITY;
    for (std::int64_t j = 0; j < m; ++j) {
      double t = 0;
      for (std::int64_t c = 0; c < d; ++c) t += q.at(i * d + c) * k.at(j * d + c);
      s[j] = t / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (auto& t : s) z += (t = std::exp(t - mx));
    for (std::int64_t j = 0; j < m; ++j)
      for (std::int64_t c = 0; c < d; ++c) out[i * d + c] += s[j] / z * v.at(j * d + c);
  }
  return Tensor::from({1, n, d}, out);
}

// Linear attention with the N x N' weight matrix formed explicitly.
Tensor naive_linear(const Tensor& q, const Tensor& k, const Tensor& v) {
  const auto n = q.dim(0), m = k.dim(0), d = q.dim(1);
  auto softmax_rows = [](std::vector<double> a, std::int64_t rows, std::int64_t cols, bool over_rows) {
    const std::int64_t outer = over_rows ? cols : rows, inner = over_rows ? rows : cols;
    for (std::int64_t o = 0; o < outer; ++o) {
      auto at = [&](std::int64_t i) -> double& { return over_rows ? a[i * cols + o] : a[o * cols + i]; };
      double mx = -INFINITY, z = 0;
      for (std::int64_t i = 0; i < inner; ++i) mx = std::max(mx, at(i));
      for (std::int64_t i = 0; i < inner; ++i) z += (at(i) = std::exp(at(i) - mx));
      for (std::int64_t i = 0; i < inner; ++i) at(i) /= z;
    }
    return a;
  };
  const auto qs = softmax_rows({q.data().begin(), q.data().end()}, n, d, false);
  const auto ks = softmax_rows({k.data().begin(), k.data().end()}, m, d, true);
  std::vector<double> out(static_cast<std::size_t>(n * d), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j) {
      double a = 0;
      for (std::int64_t c = 0; c < d; ++c) a += qs[i * d + c] * ks[j * d + c];
      for (std::int64_t c = 0; c < d; ++c) out[i * d + c] += a * v.at(j * d + c);
    }
  return Tensor::from({1, n, d}, out);
}

std::string attention_equivalences() {
  ParamStore ps;
  Initializer init(21);
  AttentionParams sea = AttentionParams::create(ps, "sea", AttentionKind::SpatialReduction, 8, 2, 1, init);
  AttentionParams full = sea;
  full.kind = AttentionKind::Full;
  const Tensor xq = randn({1, 16, 8}, 22), xkv = randn({1, 16, 8}, 23);
  if (!bit_equal(spatial_efficient_attention(xq, seq_to_map(xkv, 4, 4), sea), full_attention(xq, xkv, full)))
    return "SEA with R=1 is not bit-exact to full attention";
  const Tensor q = randn({1, 16, 8}, 24), k = randn({1, 16, 8}, 25), v = randn({1, 16, 8}, 26);
  const Tensor la = attention_core_linear(q, k, v, 1);
  const double e = max_diff(la, naive_linear(reshape(q, {16, 8}), reshape(k, {16, 8}), reshape(v, {16, 8})));
  if (!(e < 1e-12)) return fmt("linear attention vs O(N^2) oracle: %.3g", e);
  const double f = max_diff(attention_core_full(q, k, v, 1),
                            naive_full(reshape(q, {16, 8}), reshape(k, {16, 8}), reshape(v, {16, 8})));
  if (!(f < 1e-12)) return fmt("full attention vs row oracle: %.3g", f);
  return "";
}

Tensor permute_rows(const Tensor& x, const std::vector<std::int64_t>& perm) {
  const auto c = x.dim(2);
  std::vector<std::int64_t> idx;
  for (auto p : perm)
    for (std::int64_t j = 0; j < c; ++j) idx.push_back(p * c + j);
  return reshape(take(x, idx), x.shape());
}

std::string permutation_invariance() {
  const Tensor q = randn({1, 12, 8}, 31), k = randn({1, 20, 8}, 32), v = randn({1, 20, 8}, 33);
  std::vector<std::int64_t> perm(20);
  for (int i = 0; i < 20; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(34));
  const Tensor kp = permute_rows(k, perm), vp = permute_rows(v, perm);
  const double f = max_diff(attention_core_full(q, k, v, 2), attention_core_full(q, kp, vp, 2));
  const double l = max_diff(attention_core_linear(q, k, v, 2), attention_core_linear(q, kp, vp, 2));
  if (!(f < 1e-10)) return fmt("full attention changes under K/V permutation by %.3g", f);
  if (!(l < 1e-10)) return fmt("linear attention changes under K/V permutation by %.3g", l);
  return "";
}

Tensor image(std::uint64_t seed, std::int64_t h, std::int64_t w) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(h * w));
  for (auto& x : v) x = u(rng);
  return Tensor::from({1, 1, h, w}, v);
}

std::string encoder_streams() {
  NoGradGuard ng;
  const Tensor a = image(1, 64, 64), b = image(2, 64, 64), b2 = image(3, 64, 64);
  ModelConfig c = make_toy_config(Variant::Lite, AttentionKind::Linear, {8, 16, 16, 16});
  apply_schedule(c, uniform_schedule(false));
  const Model self_only(c, 4);
  const auto [pa, pb] = encode_pair(a, b, self_only.encoder());
  const auto [qa, qb] = encode_pair(a, b2, self_only.encoder());
  const FeaturePyramid single = encode_single(a, self_only.encoder());
  for (int i = 0; i < kStages; ++i)
    if (!bit_equal(pa[i], qa[i]) || !bit_equal(pa[i], single[i]))
      return "self-only encoder output of A depends on B at stage " + std::to_string(i + 1);
  const Model crossed(make_toy_config(Variant::Lite, AttentionKind::Linear, {8, 16, 16, 16}), 4);
  const auto [ra, rb] = encode_pair(a, b, crossed.encoder());
  const auto [sa, sb] = encode_pair(a, b2, crossed.encoder());
  if (!(max_diff(ra[3], sa[3]) > 0)) return "cross schedule: F4 of A ignores B";
  const auto [ta, tb] = encode_pair(b, a, crossed.encoder());
  for (int i = 0; i < kStages; ++i)
    if (!bit_equal(ra[i], tb[i])) return "swapping the inputs does not swap the outputs";
  return "";
}

std::string variant_shapes() {
  struct Row {
    Variant v;
    int coarse_scale;
    int fine_channels;
  };
  for (const Row& row : {Row{Variant::Lite, 4, 192}, Row{Variant::Large, 2, 256}})
    for (AttentionKind a : {AttentionKind::Linear, AttentionKind::SpatialReduction}) {
      const ModelConfig cfg = make_config(row.v, a);
      const auto s = pyramid_shapes(cfg, 1, 480, 640);
      const int channels[4] = {128, 192, 256, 512};
      for (int i = 0; i < kStages; ++i) {
        const std::int64_t r = static_cast<std::int64_t>(row.coarse_scale) << i;
        if (s[i] != Shape{1, channels[i], 480 / r, 640 / r})
          return "MatchFormer-" + to_string(row.v) + "-" + to_string(a) + " stage " + std::to_string(i + 1) + " is " +
                 shape_str(s[i]);
      }
      if (cfg.coarse_scale() != row.coarse_scale || cfg.coarse_channels != 128 || cfg.fine_channels != row.fine_channels)
        return "MatchFormer-" + to_string(row.v) + "-" + to_string(a) + " output widths";
    }
  NoGradGuard ng;
  const Model toy(make_toy_config(Variant::Large, AttentionKind::SpatialReduction, {8, 16, 16, 16}), 1);
  const FusionOutput out = toy.forward_joint(concat({image(1, 64, 64), image(2, 64, 64)}, 0));
  if (out.coarse.shape() != Shape{2, toy.config().coarse_channels, 32, 32} ||
      out.fine.shape() != Shape{2, toy.config().fine_channels, 8, 8})
    return "forward pass shapes " + shape_str(out.coarse.shape()) + ", " + shape_str(out.fine.shape());
  return "";
}

std::string dual_softmax_bounds() {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const std::int64_t n = 2 + static_cast<std::int64_t>(s % 7), m = 3 + static_cast<std::int64_t>(s % 5);
    const Tensor sc = randn({n, m}, s, 1.0 + static_cast<double>(s % 4) * 5);
    const Tensor p = dual_softmax(sc);
    const Tensor row = softmax(sc, 1), col = softmax(sc, 0);
    std::vector<double> rs(static_cast<std::size_t>(n), 0), cs(static_cast<std::size_t>(m), 0);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < m; ++j) {
        const std::size_t k = static_cast<std::size_t>(i * m + j);
        const double v = p.at(k);
        if (!(v >= 0 && v <= 1)) return "entry outside [0, 1]";
        if (std::fabs(v - row.at(k) * col.at(k)) > 1e-15) return "not the product of the two softmaxes";
        if (v > std::min(row.at(k), col.at(k)) + 1e-15) return "entry exceeds a marginal";
        rs[i] += v;
        cs[j] += v;
      }
    for (double r : rs)
      if (r > 1 + 1e-12) return "row sum above 1";
    for (double c : cs)
      if (c > 1 + 1e-12) return "column sum above 1";
  }
  return "";
}

std::string mutual_nearest() {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> v(100);
    for (auto& x : v) x = u(rng);
    const Tensor p = Tensor::from({10, 10}, v);
    const CoarseMatchResult r = select_coarse(p, 0.0);
    std::vector<std::pair<std::int64_t, std::int64_t>> want;
    for (int i = 0; i < 10; ++i) {
      int bj = 0;
      for (int j = 1; j < 10; ++j)
        if (v[i * 10 + j] > v[i * 10 + bj]) bj = j;
      int bi = 0;
      for (int k = 1; k < 10; ++k)
        if (v[k * 10 + bj] > v[bi * 10 + bj]) bi = k;
      if (bi == i) want.emplace_back(i, bj);
    }
    if (want.size() != r.matches.size()) return "match count differs from brute force";
    for (std::size_t k = 0; k < want.size(); ++k)
      if (r.matches[k].i != want[k].first || r.matches[k].j != want[k].second) return "match differs from brute force";
  }
  return "";
}

std::string fine_expectation_oracle() {
  // One-hot fine maps: B is a perfect copy of A, so the expectation is the
  // window center.
  const int c = 25;
  std::vector<double> a(static_cast<std::size_t>(c * 8 * 8), 0.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) a[static_cast<std::size_t>(((y * 8 + x) % c) * 64 + y * 8 + x)] = 1.0;
  const Tensor fa = Tensor::from({c, 8, 8}, a);
  FineSpec spec;
  spec.coarse_scale = 8;
  spec.fine_scale = 8;
  spec.coarse_wa = spec.coarse_wb = 8;
  spec.temperature = 0.01;
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  for (std::int64_t i = 18; i < 46; i += 9) pairs.emplace_back(i, i);
  const FineExpectation e = fine_expectation(fa, fa, pairs, spec);
  for (std::size_t k = 0; k < e.offsets.numel(); ++k)
    if (std::fabs(e.offsets.at(k)) > 1e-9) return fmt("point mass offset %.3g", e.offsets.at(k));
  const Tensor flat = Tensor::full({4, 8, 8}, 0.5);
  const FineExpectation u = fine_expectation(flat, flat, pairs, spec);
  for (std::size_t k = 0; k < u.offsets.numel(); ++k)
    if (std::fabs(u.offsets.at(k)) > 1e-12) return fmt("uniform window offset %.3g", u.offsets.at(k));
  return "";
}

std::string geometry() {
  const Homography gt = random_homography(5, HomographyBounds{}, 480, 640);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> ux(0, 639), uy(0, 479);
  std::vector<Correspondence> c;
  for (int i = 0; i < 100; ++i) {
    const Point2 a{ux(rng), uy(rng)};
    c.push_back({a, gt.apply(a)});
  }
  const Homography d = dlt_homography(c);
  for (const auto& x : c) {
    const Point2 q = d.apply(x.a);
    if (std::hypot(q.x - x.b.x, q.y - x.b.y) > 1e-8) return "DLT reprojection above 1e-8 px";
  }
  for (int i = 0; i < 30; ++i) c[static_cast<std::size_t>(i * 3)].b = {ux(rng), uy(rng)};
  const RansacResult r = ransac_homography(c);
  const double ce = corner_error(r.h, gt, 640, 480);
  if (!(ce < 0.5)) return fmt("RANSAC corner error %.3g px with 30%% outliers", ce);
  const double shift = corner_error(compose(gt, Homography::translation(2, 0)), gt, 640, 480);
  if (std::fabs(shift - 2.0) > 1e-9) return "corner error of a 2 px shift";
  MatchSet m;
  for (int i = 0; i < 10; ++i) {
    const Point2 q = gt.apply({10.0 * i, 20.0});
    m.push_back({10.0 * i, 20.0, q.x + 2.5, q.y, 1});
  }
  const MmaCurve curve = mma(m, gt);
  for (int t = 1; t <= 10; ++t)
    if (curve.accuracy[t - 1] != (t <= 2 ? 0.0 : 1.0)) return "MMA step at 2.5 px";
  return "";
}

std::string identity_pair() {
  for (std::uint64_t seed : {1, 2, 3}) {
    const Model model(make_toy_config(Variant::Lite, AttentionKind::SpatialReduction), seed);
    const Image img = gen_pattern(seed + 100, 64, 64);
    MatchOptions opt;
    opt.theta = 0.0;
    const MatchSet m = match_pair(to_tensor(img), to_tensor(img), model, opt);
    int good = 0;
    for (const auto& x : m)
      if (std::fabs(x.x1 - x.x2) < 4 && std::fabs(x.y1 - x.y2) < 4) ++good;
    if (good < 0.95 * 256) return "seed " + std::to_string(seed) + ": " + std::to_string(good) + "/256 identity cells";
  }
  return "";
}

std::string loss_gradient() {
  const ModelConfig c = make_toy_config(Variant::Lite, AttentionKind::SpatialReduction, {8, 8, 8, 8});
  Model m(c, 11);
  jitter(m.params(), 12, 0.05);
  const PairSample pair = make_pair(21, HomographyBounds{}, 32, 32);
  const Tensor a = to_tensor(pair.a), b = to_tensor(pair.b);
  auto loss = [&] {
    auto [oa, ob] = m.forward_pair(a, b);
    const PairLoss l = pair_losses(oa, ob, pair.h, c, 32, 32, MatchOptions{}, true);
    if (!l.fine.defined()) throw ConfigError("no supervised fine pair");
    return add(l.coarse, l.fine);
  };
  FdOptions opt;
  opt.tol = 1e-3;
  opt.max_coords = 4;
  const FdReport r = fd_check(loss, m.params().tensors(), opt);
  if (!r.passed) return fmt("relative error %.3g", r.max_rel_error) + " at " + r.worst;
  return "";
}

}  // namespace

int cmd_selftest(const Options& o) {
  testing::set_gradient_fault(o.inject_fault);
  struct Entry {
    const char* name;
    Group run;
    bool slow;
  };
  const std::vector<Entry> groups = {
      {"elementwise gradients", elementwise_gradients, false},
      {"dense oracles", dense_oracles, false},
      {"block gradients", block_gradients, false},
      {"attention equivalences", attention_equivalences, false},
      {"permutation invariance", permutation_invariance, false},
      {"encoder streams", encoder_streams, false},
      {"variant shapes", variant_shapes, false},
      {"dual softmax", dual_softmax_bounds, false},
      {"mutual nearest neighbours", mutual_nearest, false},
      {"fine expectation", fine_expectation_oracle, false},
      {"geometry", geometry, false},
      {"identity pair", identity_pair, true},
      {"loss gradient", loss_gradient, true},
  };
  std::vector<std::string> failed;
  std::size_t skipped = 0;
  for (const auto& g : groups) {
    if (o.quick && g.slow) {
      std::printf("SKIP  %s\n", g.name);
      ++skipped;
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    std::string err;
    try {
      err = g.run();
    } catch (const std::exception& e) {
      err = std::string("threw: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (err.empty()) {
      std::printf("PASS  %-26s %6.2fs\n", g.name, secs);
    } else {
      std::printf("FAIL  %-26s %6.2fs  %s\n", g.name, secs, err.c_str());
      failed.emplace_back(g.name);
    }
    std::fflush(stdout);
  }
  testing::set_gradient_fault(false);
  if (failed.empty()) {
    std::printf("%zu groups passed, %zu skipped\n", groups.size() - skipped, skipped);
    return kExitOk;
  }
  std::string names;
  for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
  std::fprintf(stderr, "selftest failed: %s\n", names.c_str());
  return kExitFailure;
}

}  // namespace mfcli
