#include "matchformer/blocks.hpp"

#include <algorithm>
#include <cmath>

#include "matchformer/errors.hpp"

namespace matchformer {

// ---------------------------------------------------------------- patch embeddings

Tensor PosPE::operator()(const Tensor& x) const {
  Tensor c = conv(x);
  return mul(c, sigmoid(gate(c)));
}

PosPE PosPE::create(ParamStore& ps, const std::string& name, int in, int out, int kernel, int stride, int padding,
                    Initializer& init) {
  if (kernel % 2 == 0) throw ConfigError(name + ": PosPE kernel must be odd");
  PosPE p;
  p.conv = Conv::create(ps, name + ".conv", in, out, kernel, stride, padding, 1, init);
  p.gate = Conv::create(ps, name + ".gate", out, out, 3, 1, 1, out, init);
  return p;
}

Tensor sinusoidal_code_2d(int channels, std::int64_t h, std::int64_t w) {
  if (channels % 4 != 0) throw ShapeError("sinusoidal code needs channels divisible by 4");
  const int half = channels / 2;
  std::vector<double> code(static_cast<std::size_t>(channels * h * w));
  auto at = [&](int c, std::int64_t y, std::int64_t x) -> double& {
    return code[static_cast<std::size_t>((c * h + y) * w + x)];
  };
  for (int k = 0; k < half / 2; ++k) {
    const double omega = 1.0 / std::pow(10000.0, 2.0 * k / half);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        at(2 * k, y, x) = std::sin(static_cast<double>(y) * omega);
        at(2 * k + 1, y, x) = std::cos(static_cast<double>(y) * omega);
        at(half + 2 * k, y, x) = std::sin(static_cast<double>(x) * omega);
        at(half + 2 * k + 1, y, x) = std::cos(static_cast<double>(x) * omega);
      }
  }
  return Tensor::from({channels, h, w}, std::move(code));
}

Tensor StdPE::operator()(const Tensor& x) const {
  const auto patch = proj.stride;
  if (x.dim(2) % patch != 0 || x.dim(3) % patch != 0)
    throw ShapeError("std_pe: input " + shape_str(x.shape()) + " not divisible by patch " + std::to_string(patch));
  Tensor y = proj(x);
  return add(y, sinusoidal_code_2d(static_cast<int>(y.dim(1)), y.dim(2), y.dim(3)));
}

StdPE StdPE::create(ParamStore& ps, const std::string& name, int in, int out, int patch, Initializer& init) {
  StdPE p;
  p.proj = Conv::create(ps, name + ".proj", in, out, patch, patch, 0, 1, init);
  return p;
}

Tensor std_pe(const Tensor& x, const StdPE& pe) { return map_to_seq(pe(x)); }

// ---------------------------------------------------------------- attention

namespace {

Tensor split_heads(const Tensor& x, int heads) {
  const auto b = x.dim(0), n = x.dim(1), c = x.dim(2);
  return permute(reshape(x, {b, n, heads, c / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const auto b = x.dim(0), a = x.dim(1), n = x.dim(2), d = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, n, a * d});
}

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3)
    throw ShapeError("attention: expected [B,N,C] operands");
  if (q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0) || q.dim(2) != k.dim(2) || k.dim(2) != v.dim(2) ||
      k.dim(1) != v.dim(1))
    throw ShapeError("attention: mismatched operands " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                     shape_str(v.shape()));
  if (heads <= 0 || q.dim(2) % heads != 0) throw ShapeError("attention: channels not divisible by heads");
}

void check_sources(const Tensor& q_src, const Tensor& kv_src, const AttentionParams& a) {
  if (q_src.ndim() != 3 || kv_src.ndim() != 3)
    throw ShapeError("attention: expected [B,N,C] sources, got " + shape_str(q_src.shape()) + " and " +
                     shape_str(kv_src.shape()));
  if (q_src.dim(2) != a.channels || kv_src.dim(2) != a.channels || q_src.dim(0) != kv_src.dim(0))
    throw ShapeError("attention: source " + shape_str(q_src.shape()) + "/" + shape_str(kv_src.shape()) +
                     " does not match model dim " + std::to_string(a.channels));
}

}  // namespace

AttentionParams AttentionParams::create(ParamStore& ps, const std::string& name, AttentionKind kind, int channels,
                                        int heads, int reduction, Initializer& init) {
  if (channels % heads != 0) throw ConfigError(name + ": channels not divisible by heads");
  if (reduction < 1) throw ConfigError(name + ": reduction must be >= 1");
  AttentionParams a;
  a.kind = kind;
  a.heads = heads;
  a.channels = channels;
  a.reduction = kind == AttentionKind::SpatialReduction ? reduction : 1;
  a.q = Linear::create(ps, name + ".q", channels, channels, init);
  // Softmax ignores a per-row (full) or per-column (linear) shift, so a key
  // bias would never receive gradient.
  a.k = Linear::create(ps, name + ".k", channels, channels, init, false);
  a.v = Linear::create(ps, name + ".v", channels, channels, init);
  a.proj = Linear::create(ps, name + ".proj", channels, channels, init);
  if (kind == AttentionKind::SpatialReduction && a.reduction > 1) {
    a.sr = Conv::create(ps, name + ".sr", channels, channels, a.reduction, a.reduction, 0, 1, init);
    a.sr_norm = LayerNorm::create(ps, name + ".sr_norm", channels);
  }
  return a;
}

Tensor attention_core_full(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  check_qkv(q, k, v, heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(2) / heads));
  Tensor qh = split_heads(q, heads), kh = split_heads(k, heads), vh = split_heads(v, heads);
  Tensor kt = transpose(kh);
  auto rows = [&](const Tensor& qs) { return matmul(softmax(mul(matmul(qs, kt), scale), -1), vh); };
  // Without a graph to keep, bound the live score matrix by processing query
  // rows in chunks. Rows are independent, so the result is bit-identical.
  const std::int64_t n = q.dim(1), per_row = q.dim(0) * heads * k.dim(1);
  const std::int64_t chunk = std::max<std::int64_t>(1, kAttentionChunkElements / per_row);
  if (grad_enabled() || chunk >= n) return merge_heads(rows(qh));
  std::vector<Tensor> parts;
  for (std::int64_t r0 = 0; r0 < n; r0 += chunk) parts.push_back(rows(slice(qh, 2, r0, std::min(n, r0 + chunk))));
  return merge_heads(concat(parts, 2));
}

Tensor attention_core_linear(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  check_qkv(q, k, v, heads);
  Tensor qh = softmax(split_heads(q, heads), -1);
  Tensor kh = softmax(split_heads(k, heads), -2);
  Tensor context = matmul(transpose(kh), split_heads(v, heads));  // [B, A, d, d]
  return merge_heads(matmul(qh, context));
}

Tensor full_attention(const Tensor& q_src, const Tensor& kv_src, const AttentionParams& a) {
  check_sources(q_src, kv_src, a);
  return a.proj(attention_core_full(a.q(q_src), a.k(kv_src), a.v(kv_src), a.heads));
}

Tensor linear_attention(const Tensor& q_src, const Tensor& kv_src, const AttentionParams& a) {
  check_sources(q_src, kv_src, a);
  return a.proj(attention_core_linear(a.q(q_src), a.k(kv_src), a.v(kv_src), a.heads));
}

Tensor spatial_efficient_attention(const Tensor& q_src, const Tensor& kv_map, const AttentionParams& a) {
  if (kv_map.ndim() != 4) throw ShapeError("SEA: key/value source must be a [B,C,h,w] map");
  const int r = a.reduction;
  if (kv_map.dim(2) % r != 0 || kv_map.dim(3) % r != 0)
    throw ShapeError("SEA: map " + shape_str(kv_map.shape()) + " not divisible by reduction " + std::to_string(r));
  Tensor kv = map_to_seq(kv_map);
  if (r > 1) kv = a.sr_norm(map_to_seq(a.sr(kv_map)));
  return full_attention(q_src, kv, a);
}

Tensor attend(const Tensor& q_src, const Tensor& kv_src, std::int64_t h, std::int64_t w, const AttentionParams& a) {
  switch (a.kind) {
    case AttentionKind::Full: return full_attention(q_src, kv_src, a);
    case AttentionKind::Linear: return linear_attention(q_src, kv_src, a);
    case AttentionKind::SpatialReduction:
      if (a.reduction == 1) return full_attention(q_src, kv_src, a);
      return spatial_efficient_attention(q_src, seq_to_map(kv_src, h, w), a);
  }
  throw ConfigError("unknown attention kind");
}

// ---------------------------------------------------------------- feed-forward

FFNParams FFNParams::create(ParamStore& ps, const std::string& name, int channels, int ratio, Initializer& init) {
  FFNParams f;
  f.ratio = ratio;
  const int hidden = channels * ratio;
  f.fc1 = Linear::create(ps, name + ".fc1", channels, hidden, init);
  f.dw = Conv::create(ps, name + ".dw", hidden, hidden, 3, 1, 1, hidden, init);
  f.fc2 = Linear::create(ps, name + ".fc2", hidden, channels, init);
  return f;
}

Tensor mix_ffn(const Tensor& x, std::int64_t h, std::int64_t w, const FFNParams& f) {
  if (x.ndim() != 3 || x.dim(1) != h * w)
    throw ShapeError("mix_ffn: sequence " + shape_str(x.shape()) + " is not a " + std::to_string(h) + "x" +
                     std::to_string(w) + " map");
  Tensor hidden = f.fc1(x);
  Tensor mixed = map_to_seq(f.dw(seq_to_map(hidden, h, w)));
  return f.fc2(gelu(mixed));
}

// ---------------------------------------------------------------- block

Tensor swap_streams(const Tensor& joint) {
  const auto b2 = joint.dim(0);
  if (b2 % 2 != 0) throw ShapeError("swap_streams: batch must hold two equal halves");
  return concat({slice(joint, 0, b2 / 2, b2), slice(joint, 0, 0, b2 / 2)}, 0);
}

Tensor AttentionBlock::forward_joint(const Tensor& x, std::int64_t h, std::int64_t w, bool is_cross) const {
  Tensor xn = norm1(x);
  Tensor partner = is_cross ? swap_streams(xn) : xn;
  Tensor x1 = add(x, attend(xn, partner, h, w, attn));
  return add(x1, mix_ffn(norm2(x1), h, w, ffn));
}

AttentionBlock AttentionBlock::create(ParamStore& ps, const std::string& name, const StageConfig& stage,
                                      Initializer& init) {
  AttentionBlock b;
  b.norm1 = LayerNorm::create(ps, name + ".norm1", stage.channels);
  b.attn = AttentionParams::create(ps, name + ".attn", stage.attention, stage.channels, stage.heads, stage.reduction,
                                   init);
  b.norm2 = LayerNorm::create(ps, name + ".norm2", stage.channels);
  b.ffn = FFNParams::create(ps, name + ".ffn", stage.channels, stage.ffn_ratio, init);
  return b;
}

std::pair<Tensor, Tensor> attention_block(const Tensor& xa, const Tensor& xb, std::int64_t h, std::int64_t w,
                                          bool is_cross, const AttentionBlock& block) {
  if (xa.shape() != xb.shape())
    throw ShapeError("attention_block: stream shapes differ, " + shape_str(xa.shape()) + " vs " +
                     shape_str(xb.shape()));
  const auto b = xa.dim(0);
  Tensor joint = block.forward_joint(concat({xa, xb}, 0), h, w, is_cross);
  return {slice(joint, 0, 0, b), slice(joint, 0, b, 2 * b)};
}

}  // namespace matchformer
