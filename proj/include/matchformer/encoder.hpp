#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "matchformer/blocks.hpp"
#include "matchformer/config.hpp"
#include "matchformer/nn.hpp"
#include "matchformer/tensor.hpp"

namespace matchformer {

/// Stage outputs F1..F4 of one image stream, each [B, C_i, h_i, w_i].
struct FeaturePyramid {
  std::array<Tensor, kStages> levels;
  Tensor& operator[](int i) { return levels[static_cast<std::size_t>(i)]; }
  const Tensor& operator[](int i) const { return levels[static_cast<std::size_t>(i)]; }
};

struct EncoderStage {
  PatchEmbedKind embed_kind = PatchEmbedKind::Positional;
  PosPE pos_embed;
  StdPE std_embed;
  std::vector<AttentionBlock> blocks;
  std::vector<bool> cross_flags;
  LayerNorm norm;

  /// Map [B, C_in, H, W] -> map [B, C, H/S, W/S].
  Tensor embed(const Tensor& x) const;
};

class Encoder {
 public:
  Encoder() = default;
  static Encoder create(ParamStore& ps, const ModelConfig& cfg, Initializer& init);

  /// `images` stacks stream A then stream B along the batch axis. Cross layers
  /// exchange halves when `allow_cross`; otherwise every layer is self.
  FeaturePyramid forward_joint(const Tensor& images, bool allow_cross = true) const;

  const ModelConfig& config() const { return cfg_; }
  const std::array<EncoderStage, kStages>& stages() const { return stages_; }

 private:
  ModelConfig cfg_;
  std::array<EncoderStage, kStages> stages_;
};

std::pair<FeaturePyramid, FeaturePyramid> encode_pair(const Tensor& img_a, const Tensor& img_b, const Encoder& enc);
FeaturePyramid encode_single(const Tensor& img, const Encoder& enc);

/// Halves of a batch-stacked pyramid.
std::pair<FeaturePyramid, FeaturePyramid> split_pyramid(const FeaturePyramid& joint);

/// Pyramid shapes computed from the conv arithmetic alone, without running
/// the network.
std::array<Shape, kStages> pyramid_shapes(const ModelConfig& cfg, std::int64_t batch, std::int64_t h, std::int64_t w);

}  // namespace matchformer
