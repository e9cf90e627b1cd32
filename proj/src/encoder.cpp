#include "matchformer/encoder.hpp"

#include "matchformer/errors.hpp"

namespace matchformer {

Tensor EncoderStage::embed(const Tensor& x) const {
  return embed_kind == PatchEmbedKind::Positional ? pos_embed(x) : std_embed(x);
}

Encoder Encoder::create(ParamStore& ps, const ModelConfig& cfg, Initializer& init) {
  cfg.validate();
  Encoder enc;
  enc.cfg_ = cfg;
  int in = cfg.in_channels;
  for (int i = 0; i < kStages; ++i) {
    const auto& sc = cfg.stages[i];
    auto& st = enc.stages_[i];
    const std::string name = "encoder.stage" + std::to_string(i + 1);
    st.embed_kind = cfg.patch_embed;
    if (cfg.patch_embed == PatchEmbedKind::Positional)
      st.pos_embed = PosPE::create(ps, name + ".embed", in, sc.channels, sc.kernel, sc.stride, sc.padding, init);
    else
      st.std_embed = StdPE::create(ps, name + ".embed", in, sc.channels, sc.stride, init);
    for (int j = 0; j < sc.layers; ++j)
      st.blocks.push_back(AttentionBlock::create(ps, name + ".block" + std::to_string(j + 1), sc, init));
    st.cross_flags = sc.cross_flags;
    st.norm = LayerNorm::create(ps, name + ".norm", sc.channels);
    in = sc.channels;
  }
  return enc;
}

FeaturePyramid Encoder::forward_joint(const Tensor& images, bool allow_cross) const {
  if (images.ndim() != 4 || images.dim(1) != cfg_.in_channels)
    throw ShapeError("encoder: expected [B," + std::to_string(cfg_.in_channels) + ",H,W] images, got " +
                     shape_str(images.shape()));
  if (allow_cross && images.dim(0) % 2 != 0) throw ShapeError("encoder: paired batch must have even size");
  cfg_.check_input(images.dim(2), images.dim(3));
  FeaturePyramid out;
  Tensor x = images;
  for (int i = 0; i < kStages; ++i) {
    const auto& st = stages_[i];
    Tensor map = st.embed(x);
    const auto h = map.dim(2), w = map.dim(3);
    Tensor seq = map_to_seq(map);
    for (std::size_t j = 0; j < st.blocks.size(); ++j)
      seq = st.blocks[j].forward_joint(seq, h, w, allow_cross && st.cross_flags[j]);
    out[i] = seq_to_map(st.norm(seq), h, w);
    x = out[i];
  }
  return out;
}

std::pair<FeaturePyramid, FeaturePyramid> split_pyramid(const FeaturePyramid& joint) {
  FeaturePyramid a, b;
  for (int i = 0; i < kStages; ++i) {
    const auto n = joint[i].dim(0);
    if (n % 2 != 0) throw ShapeError("split_pyramid: odd batch");
    a[i] = slice(joint[i], 0, 0, n / 2);
    b[i] = slice(joint[i], 0, n / 2, n);
  }
  return {a, b};
}

std::pair<FeaturePyramid, FeaturePyramid> encode_pair(const Tensor& img_a, const Tensor& img_b, const Encoder& enc) {
  if (img_a.shape() != img_b.shape())
    throw ShapeError("encode_pair: image shapes differ, " + shape_str(img_a.shape()) + " vs " +
                     shape_str(img_b.shape()));
  return split_pyramid(enc.forward_joint(concat({img_a, img_b}, 0), true));
}

FeaturePyramid encode_single(const Tensor& img, const Encoder& enc) { return enc.forward_joint(img, false); }

std::array<Shape, kStages> pyramid_shapes(const ModelConfig& cfg, std::int64_t batch, std::int64_t h, std::int64_t w) {
  cfg.check_input(h, w);
  std::array<Shape, kStages> out;
  for (int i = 0; i < kStages; ++i) {
    const auto& s = cfg.stages[i];
    const int k = cfg.patch_embed == PatchEmbedKind::Positional ? s.kernel : s.stride;
    const int p = cfg.patch_embed == PatchEmbedKind::Positional ? s.padding : 0;
    h = (h + 2 * p - k) / s.stride + 1;
    w = (w + 2 * p - k) / s.stride + 1;
    out[i] = {batch, s.channels, h, w};
  }
  return out;
}

}  // namespace matchformer
