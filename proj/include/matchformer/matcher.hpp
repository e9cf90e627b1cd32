#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "matchformer/model.hpp"
#include "matchformer/tensor.hpp"

namespace matchformer {

// Pixel convention: integer coordinates are pixel centers. Cell c of a grid
// at scale r covers pixels [c*r, c*r + r) and has center c*r + (r - 1) / 2.

/// Pixel center of flat cell `index` in a grid `grid_w` cells wide.
Point2 cell_center(std::int64_t index, std::int64_t grid_w, int scale);
/// Continuous grid coordinate of a pixel position on a grid at `scale`.
Point2 pixel_to_grid(Point2 p, int scale);
Point2 grid_to_pixel(Point2 g, int scale);

struct ScoreMatrix {
  Tensor s;  // [N_a, N_b]
  double tau = 0.1;
  std::int64_t ha = 0, wa = 0, hb = 0, wb = 0;
};

/// S_ij = <a_i, b_j> / tau over flattened [1, C, h, w] (or [C, h, w]) maps.
ScoreMatrix coarse_scores(const Tensor& coarse_a, const Tensor& coarse_b, double tau, bool normalize = true);

/// Row softmax times column softmax, elementwise.
Tensor dual_softmax(const Tensor& s);

struct CoarseMatch {
  std::int64_t i = 0;
  std::int64_t j = 0;
  double conf = 0.0;
};

struct CoarseMatchResult {
  Tensor p;
  double theta = 0.2;
  std::vector<CoarseMatch> matches;  // ascending i
};

/// Mutual argmax above `theta`; argmax ties go to the lowest index.
CoarseMatchResult select_coarse(const Tensor& p, double theta);

struct FineSpec {
  int window = 5;
  int coarse_scale = 4;
  int fine_scale = 8;
  std::int64_t coarse_wa = 0;  // coarse grid widths, for unflattening cell indices
  std::int64_t coarse_wb = 0;
  /// <= 0: raw inner products. > 0: unit-normalized vectors divided by this.
  double temperature = 0.0;
};

struct FineExpectation {
  Tensor offsets;                // [M, 2] expected (dx, dy) in fine-grid units
  std::vector<Point2> center_a;  // back-located fine-grid centers
  std::vector<Point2> center_b;
};

/// Windowed soft-argmax around each pair's back-located B center. Each window
/// cell is a bilinear read at center + (u, v), u, v in [-(w-1)/2, (w-1)/2];
/// cells outside the map are excluded and the softmax renormalizes over the
/// rest. Differentiable with respect to both fine maps ([C, h, w] each).
FineExpectation fine_expectation(const Tensor& fine_a, const Tensor& fine_b,
                                 const std::vector<std::pair<std::int64_t, std::int64_t>>& pairs,
                                 const FineSpec& spec);

struct Match {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double conf = 0;
};
using MatchSet = std::vector<Match>;

/// A keeps its coarse cell center; B is the refined subpixel position,
/// clamped into the `image_h` x `image_w` image.
MatchSet fine_refine(const CoarseMatchResult& coarse, const Tensor& fine_a, const Tensor& fine_b, const FineSpec& spec,
                     std::int64_t image_h, std::int64_t image_w);

struct MatchOptions {
  double tau = 0.1;
  double theta = 0.2;
  int window = 5;
  bool normalize = true;
  double fine_temperature = 0.01;
};

struct PairMatches {
  ScoreMatrix scores;
  CoarseMatchResult coarse;
  MatchSet matches;
};

/// Full pipeline on [1, 1, H, W] images. Runs without recording gradients.
PairMatches match_pair_detailed(const Tensor& img_a, const Tensor& img_b, const Model& model,
                                const MatchOptions& opt = {});
MatchSet match_pair(const Tensor& img_a, const Tensor& img_b, const Model& model, const MatchOptions& opt = {});

// "# matchformer-matches v1" then "x1 y1 x2 y2 conf" rows, 6 decimals.
void write_matches(std::ostream& os, const MatchSet& m);
void save_matches(const std::string& path, const MatchSet& m);
MatchSet read_matches(std::istream& is, const std::string& source = "<stream>");
MatchSet load_matches(const std::string& path);

}  // namespace matchformer
