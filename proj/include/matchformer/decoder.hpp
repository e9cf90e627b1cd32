#pragma once

#include <array>
#include <utility>

#include "matchformer/config.hpp"
#include "matchformer/encoder.hpp"
#include "matchformer/nn.hpp"

namespace matchformer {

struct FusionOutput {
  Tensor coarse;  // [B, coarse_channels, H / r_c, W / r_c]
  Tensor fine;    // [B, fine_channels, H / 8, W / 8]
};

/// FPN-style top-down fusion. Every level is projected to the fusion width by
/// a 1x1 lateral conv; merging runs F4 -> F1 as upsample x2, add lateral,
/// 3x3 smoothing conv (edge-replicated padding).
class Decoder {
 public:
  Decoder() = default;
  static Decoder create(ParamStore& ps, const ModelConfig& cfg, Initializer& init);

  FusionOutput operator()(const FeaturePyramid& p) const;

  std::array<Conv, kStages> lateral;
  std::array<Conv, kStages - 1> smooth;  // smooth[i] acts on the level-i merge
  Conv coarse_head;
  Conv fine_head;

 private:
  ModelConfig cfg_;
};

FusionOutput fuse(const FeaturePyramid& p, const Decoder& d);

}  // namespace matchformer
