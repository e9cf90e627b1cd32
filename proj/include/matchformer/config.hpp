#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace matchformer {

enum class Variant { Lite, Large };
enum class AttentionKind { Full, Linear, SpatialReduction };
enum class PatchEmbedKind { Positional, Standard };

std::string to_string(Variant v);
std::string to_string(AttentionKind a);
std::string to_string(PatchEmbedKind p);
Variant parse_variant(const std::string& s);
AttentionKind parse_attention(const std::string& s);
PatchEmbedKind parse_patch_embed(const std::string& s);

constexpr int kStages = 4;

struct StageConfig {
  int channels = 0;
  int kernel = 3;
  int stride = 2;
  int padding = 1;
  int layers = 3;
  std::vector<bool> cross_flags;  // one per layer
  AttentionKind attention = AttentionKind::Linear;
  int heads = 8;
  int reduction = 1;  // SEA only
  int ffn_ratio = 4;
};

/// Full architecture description. The four full-width variants and the toy
/// variants used for desk-scale training are all instances of this.
struct ModelConfig {
  Variant variant = Variant::Lite;
  AttentionKind attention = AttentionKind::Linear;
  PatchEmbedKind patch_embed = PatchEmbedKind::Positional;
  std::array<StageConfig, kStages> stages;
  int in_channels = 1;
  int fusion_channels = 128;  // FPN width
  int coarse_channels = 128;
  int fine_channels = 192;

  /// Cumulative downsampling of stage i's output.
  int stage_scale(int stage) const;
  int coarse_scale() const { return stage_scale(0); }
  /// Stage whose resolution is 1/fine_scale (the 1/8 level).
  int fine_stage() const;
  int fine_scale() const { return 8; }

  /// Throws ConfigError on any internal inconsistency.
  void validate() const;
  /// Throws ShapeError when (h, w) cannot pass through the network.
  void check_input(std::int64_t h, std::int64_t w) const;
};

using Schedule = std::array<std::vector<bool>, kStages>;

/// SSC / SSC / SCC / SCC.
Schedule default_schedule(Variant variant);
Schedule uniform_schedule(bool cross, int layers = 3);
/// Parses "SSC" style strings; 'S' = self, 'C' = cross.
std::vector<bool> parse_flags(const std::string& s);
std::string format_flags(const std::vector<bool>& flags);

ModelConfig make_config(Variant variant, AttentionKind attention);
/// Toy-width model: channels {32, 48, 64, 128} unless overridden.
ModelConfig make_toy_config(Variant variant, AttentionKind attention,
                            std::array<int, kStages> channels = {32, 48, 64, 128});

void apply_schedule(ModelConfig& cfg, const Schedule& schedule);
/// Rescales widths and derives heads/output widths the same way the full
/// model derives them from its channels.
void apply_channels(ModelConfig& cfg, const std::array<int, kStages>& channels);

/// Key/value configuration text: one `key = value` per line, `#` comments,
/// keys in any order. Unknown keys are an error.
using KeyValues = std::map<std::string, std::string>;
KeyValues parse_key_values(const std::string& text, const std::string& source);
KeyValues load_key_values(const std::string& path);

/// Builds a model config from parsed keys. Recognized keys:
///   variant, attention, patch_embed, toy, channels,
///   cross_flags.stage1 .. cross_flags.stage4
/// Keys listed in `extra_allowed` are ignored here (consumed by the caller).
ModelConfig model_config_from(const KeyValues& kv, const std::vector<std::string>& extra_allowed = {});

std::string describe(const ModelConfig& cfg);

}  // namespace matchformer
