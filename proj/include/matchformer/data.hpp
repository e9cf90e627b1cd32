#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "matchformer/matcher.hpp"
#include "matchformer/tensor.hpp"

namespace matchformer {

/// Grayscale image, row-major, values in [0, 1].
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::int64_t h, std::int64_t w, double fill = 0.0)
      : height(h), width(w), data(static_cast<std::size_t>(h * w), fill) {}
  double& at(std::int64_t y, std::int64_t x) { return data[static_cast<std::size_t>(y * width + x)]; }
  double at(std::int64_t y, std::int64_t x) const { return data[static_cast<std::size_t>(y * width + x)]; }
};

/// [1, 1, H, W] view for the network.
Tensor to_tensor(const Image& img);
/// Stacks images of equal size into [N, 1, H, W].
Tensor to_batch(const std::vector<const Image*>& imgs);
double image_stddev(const Image& img);

/// 3x3 projective map of pixel coordinates, row-major, m[8] = 1 when nonzero.
struct Homography {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return {}; }
  static Homography translation(double tx, double ty);
  Point2 apply(Point2 p) const;
  double det() const;
  Homography inverse() const;
  /// Scales so m[8] = 1 (left unchanged when m[8] is 0).
  Homography normalized() const;
};

/// this-then-other: (b * a)(p) = b(a(p)).
Homography compose(const Homography& a, const Homography& b);

/// Band-limited noise plus random high-contrast shapes, deterministic per seed.
Image gen_pattern(std::uint64_t seed, std::int64_t h, std::int64_t w);

struct HomographyBounds {
  double max_rotation = 0.25;     // radians
  double max_scale = 0.1;         // per-axis scale in [1 - s, 1 + s]
  double max_perspective = 0.1;   // projective row terms scaled by 1 / extent
  double max_translation = 4.0;   // pixels
};

/// Rotation, anisotropic scale and perspective about the image center, then a
/// translation. Draws where less than half of the image stays visible are
/// redrawn a bounded number of times.
Homography random_homography(std::uint64_t seed, const HomographyBounds& bounds, std::int64_t h, std::int64_t w);

struct WarpResult {
  Image image;
  std::vector<std::uint8_t> valid;  // 1 where the source point is inside A
};

/// Inverse-mapping bilinear warp: out(p) = img(H^-1 p); outside pixels are 0.
WarpResult warp(const Image& img, const Homography& h);

/// A-cell -> B-cell assignment (-1 where unlabeled). Each A-cell center is
/// mapped through H; mappings off the image are unlabeled, and when several
/// A-cells land in one B-cell only the one closest to its center keeps it.
std::vector<std::int64_t> gt_coarse_labels(const Homography& h, std::int64_t height, std::int64_t width, int scale);

struct PairSample {
  std::uint64_t seed = 0;
  Image a;
  Image b;
  Homography h;  // A -> B pixel coordinates
  std::vector<std::uint8_t> valid;
};

/// Pattern from `seed`, warped by `h`, with optional Gaussian noise on B.
PairSample make_pair(std::uint64_t seed, const Homography& h, std::int64_t height, std::int64_t width,
                     double noise_sigma = 0.0);
/// As above with the homography drawn from the same seed.
PairSample make_pair(std::uint64_t seed, const HomographyBounds& bounds, std::int64_t height, std::int64_t width,
                     double noise_sigma = 0.0);

// Binary PGM (P5) / PPM (P6) with maxval 255.
Image read_pgm(const std::string& path);
Image decode_pgm(const std::string& bytes, const std::string& source);
void write_pgm(const std::string& path, const Image& img);
std::uint8_t quantize(double v);

struct RgbImage {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> data;  // r, g, b per pixel
};

void write_ppm(const std::string& path, const RgbImage& img);
/// Side-by-side A | B with one line per match, green at confidence 1 fading
/// to red at 0.
RgbImage render_overlay(const Image& a, const Image& b, const MatchSet& matches);

struct ManifestEntry {
  std::uint64_t seed = 0;
  Homography h;
};

// One line per sample: seed, tab, then h00 .. h22 tab-separated.
void write_manifest(std::ostream& os, const std::vector<ManifestEntry>& entries);
void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(std::istream& is, const std::string& source = "<stream>");
std::vector<ManifestEntry> load_manifest(const std::string& path);

}  // namespace matchformer
