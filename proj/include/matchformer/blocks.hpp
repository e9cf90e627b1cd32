#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "matchformer/config.hpp"
#include "matchformer/nn.hpp"
#include "matchformer/tensor.hpp"

namespace matchformer {

/// Overlapping strided conv gated by sigmoid(depthwise 3x3 of its output):
/// y = c * sigmoid(dw(c)), c = conv_{K,S,P}(x).
struct PosPE {
  Conv conv;
  Conv gate;
  Tensor operator()(const Tensor& x) const;  // map in, map out
  static PosPE create(ParamStore& ps, const std::string& name, int in, int out, int kernel, int stride,
                      int padding, Initializer& init);
};

/// Fixed 2-D sinusoidal code, [1, C, h, w]. The first C/2 channels encode the
/// row, the rest the column, as interleaved (sin, cos) pairs.
Tensor sinusoidal_code_2d(int channels, std::int64_t h, std::int64_t w);

/// Non-overlapping PxP patches linearly projected, plus the sinusoidal code.
struct StdPE {
  Conv proj;
  Tensor operator()(const Tensor& x) const;  // map in, map out
  static StdPE create(ParamStore& ps, const std::string& name, int in, int out, int patch, Initializer& init);
};

/// Returns the token sequence [B, HW/P^2, C].
Tensor std_pe(const Tensor& x, const StdPE& pe);

struct AttentionParams {
  AttentionKind kind = AttentionKind::Full;
  int heads = 1;
  int channels = 0;
  int reduction = 1;
  Linear q, k, v, proj;
  Conv sr;           // SEA with reduction > 1 only
  LayerNorm sr_norm;  // idem
  int head_dim() const { return channels / heads; }
  static AttentionParams create(ParamStore& ps, const std::string& name, AttentionKind kind, int channels,
                                int heads, int reduction, Initializer& init);
};

// Attention cores on already-projected tensors [B, N, C] split into `heads`.
/// Score-matrix entries above which gradient-free evaluation of full
/// attention runs in query chunks.
constexpr std::int64_t kAttentionChunkElements = std::int64_t{1} << 22;

/// softmax(Q K^T / sqrt(d)) V per head.
Tensor attention_core_full(const Tensor& q, const Tensor& k, const Tensor& v, int heads);
/// rho_q(Q) (rho_k(K)^T V): softmax over features per query, over positions
/// per key feature. Never forms an N x N' matrix.
Tensor attention_core_linear(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

Tensor full_attention(const Tensor& q_src, const Tensor& kv_src, const AttentionParams& a);
Tensor linear_attention(const Tensor& q_src, const Tensor& kv_src, const AttentionParams& a);
/// K/V from `kv_map` [B, C, h, w] reduced by an RxR stride-R conv and a layer
/// norm. R = 1 skips the reduction and is exactly full attention.
Tensor spatial_efficient_attention(const Tensor& q_src, const Tensor& kv_map, const AttentionParams& a);

/// Dispatch on `a.kind`. `kv_src` is a sequence of an h x w map.
Tensor attend(const Tensor& q_src, const Tensor& kv_src, std::int64_t h, std::int64_t w, const AttentionParams& a);

/// Linear C->EC, depthwise 3x3, GELU, linear EC->C. No residual.
struct FFNParams {
  int ratio = 4;
  Linear fc1;
  Conv dw;
  Linear fc2;
  static FFNParams create(ParamStore& ps, const std::string& name, int channels, int ratio, Initializer& init);
};

Tensor mix_ffn(const Tensor& x, std::int64_t h, std::int64_t w, const FFNParams& f);

/// Pre-norm transformer layer shared by both image streams.
struct AttentionBlock {
  LayerNorm norm1;
  AttentionParams attn;
  LayerNorm norm2;
  FFNParams ffn;

  /// `x` stacks the streams along the batch axis: the first half is stream A,
  /// the second half stream B. With `is_cross`, each half attends to the
  /// other half's pre-update features; otherwise each attends to itself.
  Tensor forward_joint(const Tensor& x, std::int64_t h, std::int64_t w, bool is_cross) const;

  static AttentionBlock create(ParamStore& ps, const std::string& name, const StageConfig& stage, Initializer& init);
};

std::pair<Tensor, Tensor> attention_block(const Tensor& xa, const Tensor& xb, std::int64_t h, std::int64_t w,
                                          bool is_cross, const AttentionBlock& block);

/// Swaps the two stream halves of a batch-stacked tensor.
Tensor swap_streams(const Tensor& joint);

}  // namespace matchformer
