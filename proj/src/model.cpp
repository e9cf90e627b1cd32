#include "matchformer/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "matchformer/errors.hpp"

namespace matchformer {

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Initializer init(seed);
  encoder_ = Encoder::create(params_, cfg_, init);
  decoder_ = Decoder::create(params_, cfg_, init);
}

Tensor standardize_images(const Tensor& images) {
  if (images.ndim() != 4) throw ShapeError("standardize_images: expected [B,C,H,W]");
  const auto n = static_cast<std::size_t>(images.dim(0));
  const std::size_t per = images.numel() / n;
  const auto src = images.data();
  std::vector<double> out(src.begin(), src.end());
  for (std::size_t b = 0; b < n; ++b) {
    double* x = out.data() + b * per;
    double mean = 0;
    for (std::size_t k = 0; k < per; ++k) mean += x[k];
    mean /= static_cast<double>(per);
    double var = 0;
    for (std::size_t k = 0; k < per; ++k) var += (x[k] - mean) * (x[k] - mean);
    const double sd = std::max(std::sqrt(var / static_cast<double>(per)), 1e-3);
    for (std::size_t k = 0; k < per; ++k) x[k] = (x[k] - mean) / sd;
  }
  return Tensor::from(images.shape(), std::move(out));
}

FusionOutput Model::forward_joint(const Tensor& images) const {
  return decoder_(encoder_.forward_joint(standardize_images(images), true));
}

std::pair<FusionOutput, FusionOutput> split_output(const FusionOutput& joint) {
  const auto n = joint.coarse.dim(0);
  return {FusionOutput{slice(joint.coarse, 0, 0, n / 2), slice(joint.fine, 0, 0, n / 2)},
          FusionOutput{slice(joint.coarse, 0, n / 2, n), slice(joint.fine, 0, n / 2, n)}};
}

std::pair<FusionOutput, FusionOutput> Model::forward_pair(const Tensor& img_a, const Tensor& img_b) const {
  if (img_a.shape() != img_b.shape())
    throw ShapeError("forward_pair: image shapes differ, " + shape_str(img_a.shape()) + " vs " +
                     shape_str(img_b.shape()));
  return split_output(forward_joint(concat({img_a, img_b}, 0)));
}

KeyValues config_key_values(const ModelConfig& cfg) {
  KeyValues kv;
  kv["variant"] = to_string(cfg.variant);
  kv["attention"] = to_string(cfg.attention);
  kv["patch_embed"] = to_string(cfg.patch_embed);
  std::ostringstream ch;
  for (int i = 0; i < kStages; ++i) ch << (i ? " " : "") << cfg.stages[i].channels;
  kv["channels"] = ch.str();
  for (int i = 0; i < kStages; ++i)
    kv["cross_flags.stage" + std::to_string(i + 1)] = format_flags(cfg.stages[i].cross_flags);
  return kv;
}

namespace {

constexpr const char* kMagic = "# matchformer-checkpoint v1";

struct Entry {
  std::string name;
  Tensor value;
};

std::vector<Entry> read_entries(std::istream& is, const std::string& path, KeyValues& kv) {
  std::string line;
  if (!std::getline(is, line) || line != kMagic) throw ParseError(path, 0, "missing checkpoint header");
  std::vector<Entry> entries;
  std::string cfg_text;
  while (true) {
    const auto pos = static_cast<std::int64_t>(is.tellg());
    if (!std::getline(is, line)) break;
    if (line.empty()) continue;
    if (line.rfind("# config ", 0) == 0) {
      cfg_text += line.substr(9) + "\n";
      continue;
    }
    if (line.rfind("name ", 0) != 0) throw ParseError(path, pos, "expected 'name <parameter>'");
    Entry e;
    e.name = line.substr(5);
    e.value = read_snapshot(is, path);
    entries.push_back(std::move(e));
  }
  kv = parse_key_values(cfg_text, path);
  return entries;
}

void copy_into(Model& model, const std::vector<Entry>& entries, const std::string& path) {
  const auto& items = model.params().items();
  if (items.size() != entries.size())
    throw ConfigError(path + ": checkpoint holds " + std::to_string(entries.size()) + " tensors, model expects " +
                      std::to_string(items.size()));
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& [name, param] = items[i];
    if (entries[i].name != name)
      throw ConfigError(path + ": tensor " + std::to_string(i) + " is '" + entries[i].name + "', expected '" + name +
                        "'");
    if (entries[i].value.shape() != param.shape())
      throw ConfigError(path + ": " + name + " has shape " + shape_str(entries[i].value.shape()) + ", expected " +
                        shape_str(param.shape()));
    Tensor dst = param;
    auto d = dst.mutable_data();
    const auto s = entries[i].value.data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  os << kMagic << '\n';
  for (const auto& [k, v] : config_key_values(model.config())) os << "# config " << k << " = " << v << '\n';
  for (const auto& [name, t] : model.params().items()) {
    os << "name " << name << '\n';
    write_snapshot(os, t);
  }
  if (!os) throw IoError(path, "write failed");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path, "cannot open for reading");
  KeyValues kv;
  auto entries = read_entries(is, path, kv);
  Model model(model_config_from(kv), 0);
  copy_into(model, entries, path);
  return model;
}

void load_weights(const std::string& path, Model& model) {
  std::ifstream is(path);
  if (!is) throw IoError(path, "cannot open for reading");
  KeyValues kv;
  copy_into(model, read_entries(is, path, kv), path);
}

}  // namespace matchformer
