#include "matchformer/decoder.hpp"

#include "matchformer/errors.hpp"

namespace matchformer {

Decoder Decoder::create(ParamStore& ps, const ModelConfig& cfg, Initializer& init) {
  cfg.validate();
  Decoder d;
  d.cfg_ = cfg;
  const int f = cfg.fusion_channels;
  for (int i = 0; i < kStages; ++i)
    d.lateral[i] =
        Conv::create(ps, "decoder.lateral" + std::to_string(i + 1), cfg.stages[i].channels, f, 1, 1, 0, 1, init);
  for (int i = 0; i < kStages - 1; ++i)
    d.smooth[i] = Conv::create(ps, "decoder.smooth" + std::to_string(i + 1), f, f, 3, 1, 0, 1, init);
  d.coarse_head = Conv::create(ps, "decoder.coarse_head", f, cfg.coarse_channels, 1, 1, 0, 1, init);
  d.fine_head = Conv::create(ps, "decoder.fine_head", f, cfg.fine_channels, 1, 1, 0, 1, init);
  return d;
}

FusionOutput Decoder::operator()(const FeaturePyramid& p) const {
  for (int i = 0; i < kStages; ++i) {
    if (!p[i].defined() || p[i].ndim() != 4 || p[i].dim(1) != cfg_.stages[i].channels)
      throw ShapeError("decoder: level F" + std::to_string(i + 1) + " does not match the config");
    if (i > 0 && (p[i].dim(2) * 2 != p[i - 1].dim(2) || p[i].dim(3) * 2 != p[i - 1].dim(3)))
      throw ShapeError("decoder: F" + std::to_string(i + 1) + " is not half the extent of F" + std::to_string(i));
  }
  const int fine_level = cfg_.fine_stage();
  FusionOutput out;
  Tensor m = lateral[kStages - 1](p[kStages - 1]);
  if (fine_level == kStages - 1) out.fine = fine_head(m);
  for (int i = kStages - 2; i >= 0; --i) {
    m = add(upsample_bilinear2x(m), lateral[i](p[i]));
    m = smooth[i](pad_replicate(m, 1));
    if (i == fine_level) out.fine = fine_head(m);
  }
  out.coarse = coarse_head(m);
  return out;
}

FusionOutput fuse(const FeaturePyramid& p, const Decoder& d) { return d(p); }

}  // namespace matchformer
