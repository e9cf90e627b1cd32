#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "matchformer/data.hpp"
#include "matchformer/matcher.hpp"
#include "matchformer/model.hpp"

namespace matchformer {

/// -mean over labeled A-cells of log(max(P[i, label[i]], 1e-12)). Labels of
/// -1 are skipped; throws ConfigError when nothing is labeled.
Tensor coarse_loss(const Tensor& p, const std::vector<std::int64_t>& labels);

/// Mean squared Euclidean distance between predicted [M, 2] offsets and the
/// targets, in fine-grid units.
Tensor fine_loss(const Tensor& offsets, const std::vector<Point2>& targets);

struct AdamOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

/// One bias-corrected Adam update of every tensor from its accumulated
/// gradient (tensors without a gradient count as zero-gradient).
void adam_step(const std::vector<Tensor>& params, AdamState& state, const AdamOptions& opt);

struct TrainConfig {
  int steps = 2000;
  int batch = 1;
  AdamOptions adam;
  double lambda_coarse = 1.0;
  double lambda_fine = 0.25;
  /// Fine loss joins once the mean coarse precision of the last
  /// `gate_window` steps exceeds this; negative keeps it on from step 0.
  double fine_gate = 0.3;
  int gate_window = 10;
  std::uint64_t seed = 0;
  std::int64_t height = 64;
  std::int64_t width = 64;
  HomographyBounds bounds;
  double noise_sigma = 0.0;
  MatchOptions match;
  int heldout_pairs = 16;
  std::uint64_t heldout_seed = 1000000;
};

struct StepMetrics {
  int step = 0;
  double loss_coarse = 0;
  double loss_fine = 0;  // 0 while the fine gate is closed
  double precision = 0;
  bool fine_active = false;
};

struct CoarsePrecision {
  std::int64_t correct = 0;
  std::int64_t total = 0;
  double value() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// A coarse match (i, j) is correct when cell j's center lies within one
/// cell, per axis, of H applied to cell i's center.
CoarsePrecision coarse_precision(const std::vector<CoarseMatch>& matches, const Homography& h, std::int64_t coarse_wa,
                                 std::int64_t coarse_wb, int scale);

struct TrainResult {
  std::vector<StepMetrics> log;
  CoarsePrecision heldout;
};

/// Per-pair losses for one forward pass; exposed for tests.
struct PairLoss {
  Tensor coarse;       // scalar
  Tensor fine;         // scalar, undefined when no pair is supervised
  Tensor p;            // dual-softmax matrix
  std::vector<std::int64_t> labels;
};

PairLoss pair_losses(const FusionOutput& a, const FusionOutput& b, const Homography& h, const ModelConfig& cfg,
                     std::int64_t height, std::int64_t width, const MatchOptions& opt, bool with_fine);

using StepCallback = std::function<void(const StepMetrics&)>;

TrainResult train_toy(Model& model, const TrainConfig& cfg, const StepCallback& on_step = {});

/// Precision of predicted coarse matches on freshly generated pairs.
CoarsePrecision heldout_precision(const Model& model, const TrainConfig& cfg);

/// Seed of the pair drawn for (step, item); always >= 2^32, above any
/// held-out seed.
std::uint64_t sample_seed(std::uint64_t seed, std::int64_t step, int item);

// "step,loss_coarse,loss_fine,precision".
void write_metrics_csv(std::ostream& os, const std::vector<StepMetrics>& log);
void save_metrics_csv(const std::string& path, const std::vector<StepMetrics>& log);

}  // namespace matchformer
