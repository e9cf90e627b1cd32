#pragma once

#include <cstdint>
#include <string>

#include "matchformer/config.hpp"
#include "matchformer/decoder.hpp"
#include "matchformer/encoder.hpp"
#include "matchformer/nn.hpp"

namespace matchformer {

/// Per-image zero mean, unit variance (variance floored), without gradient.
Tensor standardize_images(const Tensor& images);

/// Encoder plus decoder with one shared parameter store. Input images are
/// standardized per image before the encoder.
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  /// Both streams at once; the outputs are batch-stacked [2B, ...].
  FusionOutput forward_joint(const Tensor& images) const;
  /// Images [B, 1, H, W] each; returns (A outputs, B outputs).
  std::pair<FusionOutput, FusionOutput> forward_pair(const Tensor& img_a, const Tensor& img_b) const;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const Encoder& encoder() const { return encoder_; }
  const Decoder& decoder() const { return decoder_; }

 private:
  ModelConfig cfg_;
  ParamStore params_;
  Encoder encoder_;
  Decoder decoder_;
};

std::pair<FusionOutput, FusionOutput> split_output(const FusionOutput& joint);

/// Config keys that rebuild `cfg` through `model_config_from`.
KeyValues config_key_values(const ModelConfig& cfg);

// Checkpoint: "# matchformer-checkpoint v1", "# config <key> = <value>" lines,
// then per parameter a "name <canonical name>" line and a tensor snapshot.
void save_checkpoint(const std::string& path, const Model& model);
/// Reads the stored config and builds a model with the stored weights.
Model load_checkpoint(const std::string& path);
/// Copies weights into an existing model; names and shapes must match exactly.
void load_weights(const std::string& path, Model& model);

}  // namespace matchformer
