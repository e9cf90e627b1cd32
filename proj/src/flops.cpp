#include <cmath>

#include "matchformer/errors.hpp"
#include "matchformer/evalkit.hpp"

namespace matchformer {

double FlopsBreakdown::total() const {
  double s = 0;
  for (const auto& i : items) s += i.flops;
  return s;
}

double FlopsBreakdown::total(const std::string& kind) const {
  double s = 0;
  for (const auto& i : items)
    if (i.kind == kind) s += i.flops;
  return s;
}

double attention_core_flops(AttentionKind kind, std::int64_t n, int channels, int heads, int reduction) {
  const double c = channels, d = static_cast<double>(channels) / heads, nn = static_cast<double>(n);
  switch (kind) {
    case AttentionKind::Full: return 2.0 * 2.0 * nn * nn * c;  // QK^T and PV, summed over heads
    case AttentionKind::SpatialReduction: {
      const double kv = nn / (static_cast<double>(reduction) * reduction);
      return 2.0 * 2.0 * nn * kv * c;
    }
    case AttentionKind::Linear: return 2.0 * 2.0 * nn * d * c;  // K^T V and Q (K^T V)
  }
  return 0;
}

double conv_flops(int k, int cin, int cout, int groups, std::int64_t ho, std::int64_t wo) {
  return 2.0 * k * k * (static_cast<double>(cin) / groups) * cout * static_cast<double>(ho * wo);
}

double linear_flops(std::int64_t n, int cin, int cout) { return 2.0 * static_cast<double>(n) * cin * cout; }

FlopsBreakdown flops_count(const ModelConfig& cfg, std::int64_t height, std::int64_t width, bool include_matcher,
                           int window) {
  cfg.validate();
  cfg.check_input(height, width);
  FlopsBreakdown fb;
  const double streams = 2.0;
  auto push = [&](std::string scope, std::string kind, double f) {
    fb.items.push_back({std::move(scope), std::move(kind), streams * f});
  };

  std::int64_t h = height, w = width;
  int cin = cfg.in_channels;
  std::array<std::int64_t, kStages> hs{}, ws{};
  for (int i = 0; i < kStages; ++i) {
    const auto& s = cfg.stages[i];
    const std::string scope = "encoder.stage" + std::to_string(i + 1);
    const bool pos = cfg.patch_embed == PatchEmbedKind::Positional;
    const int k = pos ? s.kernel : s.stride;
    const int pad = pos ? s.padding : 0;
    h = (h + 2 * pad - k) / s.stride + 1;
    w = (w + 2 * pad - k) / s.stride + 1;
    hs[i] = h;
    ws[i] = w;
    const std::int64_t n = h * w;
    const int c = s.channels;
    push(scope + ".embed", "conv", conv_flops(k, cin, c, 1, h, w));
    if (pos) push(scope + ".embed", "conv", conv_flops(3, c, c, c, h, w));
    for (int j = 0; j < s.layers; ++j) {
      const std::string b = scope + ".block" + std::to_string(j + 1);
      const int r = s.attention == AttentionKind::SpatialReduction ? s.reduction : 1;
      const std::int64_t nkv = n / (static_cast<std::int64_t>(r) * r);
      push(b + ".attn", "linear", linear_flops(n, c, c));        // q
      push(b + ".attn", "linear", 2 * linear_flops(nkv, c, c));  // k, v
      push(b + ".attn", "linear", linear_flops(n, c, c));        // proj
      if (r > 1) push(b + ".attn", "conv", conv_flops(r, c, c, 1, h / r, w / r));
      push(b + ".attn", "attention", attention_core_flops(s.attention, n, c, s.heads, r));
      const int hidden = c * s.ffn_ratio;
      push(b + ".ffn", "linear", linear_flops(n, c, hidden));
      push(b + ".ffn", "conv", conv_flops(3, hidden, hidden, hidden, h, w));
      push(b + ".ffn", "linear", linear_flops(n, hidden, c));
    }
    cin = c;
  }

  const int f = cfg.fusion_channels;
  for (int i = 0; i < kStages; ++i)
    push("decoder.lateral" + std::to_string(i + 1), "conv", conv_flops(1, cfg.stages[i].channels, f, 1, hs[i], ws[i]));
  for (int i = 0; i < kStages - 1; ++i)
    push("decoder.smooth" + std::to_string(i + 1), "conv", conv_flops(3, f, f, 1, hs[i], ws[i]));
  push("decoder.coarse_head", "conv", conv_flops(1, f, cfg.coarse_channels, 1, hs[0], ws[0]));
  const int fs = cfg.fine_stage();
  push("decoder.fine_head", "conv", conv_flops(1, f, cfg.fine_channels, 1, hs[fs], ws[fs]));

  if (include_matcher) {
    const double nc = static_cast<double>(hs[0] * ws[0]);
    // Counted once: the matcher compares the pair rather than running per stream.
    fb.items.push_back({"matcher.coarse", "matcher", 2.0 * nc * nc * cfg.coarse_channels});
    fb.items.push_back(
        {"matcher.fine", "matcher", 2.0 * nc * static_cast<double>(window) * window * cfg.fine_channels});
  }
  return fb;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("loglog_slope: need two or more paired samples");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace matchformer
