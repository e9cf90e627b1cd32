#include "matchformer/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "matchformer/errors.hpp"

namespace matchformer {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

constexpr std::array<int, kStages> kFullChannels{128, 192, 256, 512};
constexpr std::array<int, kStages> kSeaHeads{1, 2, 4, 8};
constexpr std::array<int, kStages> kSeaReduction{4, 2, 2, 1};

}  // namespace

std::string to_string(Variant v) { return v == Variant::Lite ? "lite" : "large"; }

std::string to_string(AttentionKind a) {
  switch (a) {
    case AttentionKind::Full: return "full";
    case AttentionKind::Linear: return "la";
    case AttentionKind::SpatialReduction: return "sea";
  }
  return "?";
}

std::string to_string(PatchEmbedKind p) { return p == PatchEmbedKind::Positional ? "pospe" : "stdpe"; }

Variant parse_variant(const std::string& s) {
  const auto v = lower(s);
  if (v == "lite") return Variant::Lite;
  if (v == "large") return Variant::Large;
  throw ConfigError("unknown variant '" + s + "' (expected lite|large)");
}

AttentionKind parse_attention(const std::string& s) {
  const auto v = lower(s);
  if (v == "la" || v == "linear") return AttentionKind::Linear;
  if (v == "sea") return AttentionKind::SpatialReduction;
  if (v == "full") return AttentionKind::Full;
  throw ConfigError("unknown attention '" + s + "' (expected la|sea|full)");
}

PatchEmbedKind parse_patch_embed(const std::string& s) {
  const auto v = lower(s);
  if (v == "pospe") return PatchEmbedKind::Positional;
  if (v == "stdpe") return PatchEmbedKind::Standard;
  throw ConfigError("unknown patch_embed '" + s + "' (expected pospe|stdpe)");
}

int ModelConfig::stage_scale(int stage) const {
  int s = 1;
  for (int i = 0; i <= stage; ++i) s *= stages[i].stride;
  return s;
}

int ModelConfig::fine_stage() const {
  for (int i = 0; i < kStages; ++i)
    if (stage_scale(i) == fine_scale()) return i;
  throw ConfigError("no encoder stage runs at 1/8 resolution");
}

void ModelConfig::validate() const {
  if (in_channels <= 0) throw ConfigError("in_channels must be positive");
  for (int i = 0; i < kStages; ++i) {
    const auto& s = stages[i];
    const std::string tag = "stage" + std::to_string(i + 1) + ": ";
    if (s.channels <= 0 || s.layers <= 0 || s.heads <= 0 || s.ffn_ratio <= 0 || s.stride <= 0)
      throw ConfigError(tag + "extents must be positive");
    if (s.kernel % 2 == 0) throw ConfigError(tag + "patch-embedding kernel must be odd");
    if (static_cast<int>(s.cross_flags.size()) != s.layers)
      throw ConfigError(tag + "cross_flags has " + std::to_string(s.cross_flags.size()) + " entries for " +
                        std::to_string(s.layers) + " layers");
    if (s.channels % s.heads != 0)
      throw ConfigError(tag + "channels " + std::to_string(s.channels) + " not divisible by heads " +
                        std::to_string(s.heads));
    if (s.reduction < 1) throw ConfigError(tag + "reduction ratio must be >= 1");
    if (patch_embed == PatchEmbedKind::Standard && s.channels % 4 != 0)
      throw ConfigError(tag + "standard patch embedding needs channels divisible by 4");
  }
  if (fusion_channels <= 0 || coarse_channels <= 0 || fine_channels <= 0)
    throw ConfigError("output widths must be positive");
  fine_stage();
}

void ModelConfig::check_input(std::int64_t h, std::int64_t w) const {
  if (h <= 0 || w <= 0 || h % 32 != 0 || w % 32 != 0)
    throw ShapeError("input extents " + std::to_string(h) + "x" + std::to_string(w) +
                     " must be positive multiples of 32");
  std::int64_t ch = h, cw = w;
  for (int i = 0; i < kStages; ++i) {
    const auto& s = stages[i];
    if (ch % s.stride != 0 || cw % s.stride != 0)
      throw ShapeError("stage" + std::to_string(i + 1) + " input " + std::to_string(ch) + "x" + std::to_string(cw) +
                       " not divisible by stride " + std::to_string(s.stride));
    ch /= s.stride;
    cw /= s.stride;
    if (s.attention == AttentionKind::SpatialReduction && (ch % s.reduction != 0 || cw % s.reduction != 0))
      throw ShapeError("stage" + std::to_string(i + 1) + " map " + std::to_string(ch) + "x" + std::to_string(cw) +
                       " not divisible by reduction " + std::to_string(s.reduction));
  }
}

Schedule default_schedule(Variant) {
  return {std::vector<bool>{false, false, true}, std::vector<bool>{false, false, true},
          std::vector<bool>{false, true, true}, std::vector<bool>{false, true, true}};
}

Schedule uniform_schedule(bool cross, int layers) {
  Schedule s;
  for (auto& st : s) st.assign(static_cast<std::size_t>(layers), cross);
  return s;
}

std::vector<bool> parse_flags(const std::string& s) {
  std::vector<bool> flags;
  for (char c : s) {
    if (c == 'S' || c == 's')
      flags.push_back(false);
    else if (c == 'C' || c == 'c')
      flags.push_back(true);
    else if (!std::isspace(static_cast<unsigned char>(c)) && c != ',')
      throw ConfigError("cross flags must be S/C letters, got '" + s + "'");
  }
  if (flags.empty()) throw ConfigError("empty cross flag string");
  return flags;
}

std::string format_flags(const std::vector<bool>& flags) {
  std::string s;
  for (bool f : flags) s += f ? 'C' : 'S';
  return s;
}

ModelConfig make_config(Variant variant, AttentionKind attention) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.attention = attention;
  const Schedule sched = default_schedule(variant);
  for (int i = 0; i < kStages; ++i) {
    auto& s = cfg.stages[i];
    s.channels = kFullChannels[i];
    if (i == 0) {
      s.kernel = 7;
      s.padding = 3;
      s.stride = variant == Variant::Lite ? 4 : 2;
    } else {
      s.kernel = 3;
      s.padding = 1;
      s.stride = 2;
    }
    s.layers = 3;
    s.cross_flags = sched[i];
    s.attention = attention;
    s.ffn_ratio = 4;
    if (attention == AttentionKind::SpatialReduction) {
      s.heads = kSeaHeads[i];
      s.reduction = kSeaReduction[i];
    } else {
      s.heads = 8;
      s.reduction = 1;
    }
  }
  cfg.fusion_channels = 128;
  cfg.coarse_channels = 128;
  cfg.fine_channels = cfg.stages[cfg.fine_stage()].channels;
  return cfg;
}

void apply_channels(ModelConfig& cfg, const std::array<int, kStages>& channels) {
  for (int i = 0; i < kStages; ++i) cfg.stages[i].channels = channels[i];
  cfg.fusion_channels = channels[0];
  cfg.coarse_channels = channels[0];
  cfg.fine_channels = channels[cfg.fine_stage()];
}

ModelConfig make_toy_config(Variant variant, AttentionKind attention, std::array<int, kStages> channels) {
  ModelConfig cfg = make_config(variant, attention);
  apply_channels(cfg, channels);
  return cfg;
}

void apply_schedule(ModelConfig& cfg, const Schedule& schedule) {
  for (int i = 0; i < kStages; ++i) {
    cfg.stages[i].cross_flags = schedule[i];
    cfg.stages[i].layers = static_cast<int>(schedule[i].size());
  }
}

KeyValues parse_key_values(const std::string& text, const std::string& source) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line;
  std::int64_t offset = 0;
  while (std::getline(is, line)) {
    const std::int64_t line_start = offset;
    offset += static_cast<std::int64_t>(line.size()) + 1;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ParseError(source, line_start, "expected 'key = value'");
    const std::string key = lower(trim(body.substr(0, eq)));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty()) throw ParseError(source, line_start, "empty key");
    if (kv.count(key)) throw ParseError(source, line_start, "duplicate key '" + key + "'");
    kv[key] = value;
  }
  return kv;
}

KeyValues load_key_values(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path, "cannot open config file");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_key_values(ss.str(), path);
}

namespace {

std::array<int, kStages> parse_channels(const std::string& v) {
  std::istringstream is(v);
  std::array<int, kStages> ch{};
  for (int i = 0; i < kStages; ++i)
    if (!(is >> ch[i]) || ch[i] <= 0) throw ConfigError("channels needs four positive integers, got '" + v + "'");
  std::string rest;
  if (is >> rest) throw ConfigError("channels needs exactly four integers, got '" + v + "'");
  return ch;
}

bool parse_bool(const std::string& v) {
  const auto s = lower(v);
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

}  // namespace

ModelConfig model_config_from(const KeyValues& kv, const std::vector<std::string>& extra_allowed) {
  static const std::vector<std::string> known{"variant",  "attention", "patch_embed", "toy", "channels",
                                              "cross_flags.stage1", "cross_flags.stage2",
                                              "cross_flags.stage3", "cross_flags.stage4"};
  for (const auto& [k, v] : kv) {
    if (std::find(known.begin(), known.end(), k) == known.end() &&
        std::find(extra_allowed.begin(), extra_allowed.end(), k) == extra_allowed.end())
      throw ConfigError("unknown config key '" + k + "'");
  }
  auto get = [&](const std::string& k, const std::string& dflt) {
    auto it = kv.find(k);
    return it == kv.end() ? dflt : it->second;
  };
  const Variant variant = parse_variant(get("variant", "lite"));
  const AttentionKind attention = parse_attention(get("attention", "sea"));
  const bool toy = parse_bool(get("toy", "false"));
  ModelConfig cfg = toy ? make_toy_config(variant, attention) : make_config(variant, attention);
  if (kv.count("channels")) apply_channels(cfg, parse_channels(kv.at("channels")));
  cfg.patch_embed = parse_patch_embed(get("patch_embed", "pospe"));
  for (int i = 0; i < kStages; ++i) {
    const std::string key = "cross_flags.stage" + std::to_string(i + 1);
    if (kv.count(key)) {
      cfg.stages[i].cross_flags = parse_flags(kv.at(key));
      cfg.stages[i].layers = static_cast<int>(cfg.stages[i].cross_flags.size());
    }
  }
  cfg.validate();
  return cfg;
}

std::string describe(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "variant=" << to_string(cfg.variant) << " attention=" << to_string(cfg.attention)
     << " patch_embed=" << to_string(cfg.patch_embed) << " channels=";
  for (int i = 0; i < kStages; ++i) os << (i ? "," : "") << cfg.stages[i].channels;
  os << " schedule=";
  for (int i = 0; i < kStages; ++i) os << (i ? "/" : "") << format_flags(cfg.stages[i].cross_flags);
  return os.str();
}

}  // namespace matchformer
