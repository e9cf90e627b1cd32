#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "matchformer/config.hpp"
#include "matchformer/data.hpp"
#include "matchformer/matcher.hpp"

namespace matchformer {

struct Correspondence {
  Point2 a;
  Point2 b;
};

std::vector<Correspondence> to_correspondences(const MatchSet& m);

/// Hartley-normalized DLT, H[2][2] = 1. Needs at least four correspondences
/// in general position; throws DegenerateError otherwise.
Homography dlt_homography(const std::vector<Correspondence>& c);

struct RansacOptions {
  double threshold = 2.0;  // forward reprojection distance, pixels
  int iterations = 2000;
  std::uint64_t seed = 0;
  /// Inliers required beyond the four sample points (which fit exactly).
  int min_support = 4;
};

struct RansacResult {
  Homography h;
  std::vector<std::size_t> inliers;  // indices into the input, ascending
  int best_trial = -1;
};

/// Best-consensus four-point hypothesis, then one DLT refit on its inliers.
/// Trial t draws its sample from a generator seeded by (seed, t); the highest
/// count wins and ties go to the lowest trial. Throws DegenerateError when no
/// hypothesis reaches `min_support`.
RansacResult ransac_homography(const std::vector<Correspondence>& c, const RansacOptions& opt = {});

/// Mean distance between the four corners (0,0), (W-1,0), (0,H-1), (W-1,H-1)
/// mapped by the two homographies.
double corner_error(const Homography& est, const Homography& gt, std::int64_t width, std::int64_t height);

struct MmaCurve {
  std::vector<double> thresholds;  // 1 .. 10 px
  std::vector<double> accuracy;
  bool empty = false;  // no matches: all-zero curve
};

/// Fraction of matches with |H_gt(a) - b| <= t for each t.
MmaCurve mma(const MatchSet& m, const Homography& gt, int max_threshold = 10);

struct EvalReport {
  int pairs = 0;
  int failures = 0;  // RANSAC found no consensus
  double acc1 = 0, acc3 = 0, acc5 = 0;
  std::vector<double> thresholds;
  std::vector<double> mma;          // all matches, averaged over pairs
  std::vector<double> mma_inliers;  // RANSAC inliers only
  std::int64_t matches = 0;
  std::int64_t inliers = 0;
  double mean_corner_error = 0;  // over pairs with an estimate
};

/// Accumulates per-pair results into a report.
class EvalAccumulator {
 public:
  explicit EvalAccumulator(int max_threshold = 10);
  /// Matches of one pair with its ground truth and image extents.
  void add(const MatchSet& m, const Homography& gt, std::int64_t width, std::int64_t height,
           const RansacOptions& ransac = {});
  EvalReport report() const;

 private:
  int max_threshold_;
  EvalReport sum_;
  std::vector<double> errors_;
};

void write_report_csv(std::ostream& os, const EvalReport& r);
void print_report(std::ostream& os, const EvalReport& r);

/// Evaluates a model on manifest pairs of the given size.
EvalReport evaluate_model(const Model& model, const std::vector<ManifestEntry>& entries, std::int64_t height,
                          std::int64_t width, const MatchOptions& opt = {}, const RansacOptions& ransac = {});

// ---------------------------------------------------------------- FLOPs

/// One multiply-add counts as two FLOPs. Convolutions, linear layers and the
/// attention matrix products are counted; normalization, activations,
/// softmax, upsampling and residual additions are not.
struct FlopsItem {
  std::string scope;  // e.g. "encoder.stage2.block1"
  std::string kind;   // "conv", "linear", "attention", "matcher"
  double flops = 0;
};

struct FlopsBreakdown {
  std::vector<FlopsItem> items;
  double total() const;
  double total(const std::string& kind) const;
  double gflops() const { return total() / 1e9; }
};

/// Both image streams. With `include_matcher`, adds the coarse score matrix
/// and one fine window per coarse cell of image A.
FlopsBreakdown flops_count(const ModelConfig& cfg, std::int64_t height, std::int64_t width, bool include_matcher,
                           int window = 5);

/// Matrix-product cost of one attention core on N query and N key tokens of
/// width C (after projection), for the given kind, heads and reduction.
double attention_core_flops(AttentionKind kind, std::int64_t n, int channels, int heads, int reduction = 1);

double conv_flops(int kernel, int cin, int cout, int groups, std::int64_t hout, std::int64_t wout);
double linear_flops(std::int64_t tokens, int cin, int cout);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace matchformer
