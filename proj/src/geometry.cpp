#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <random>

#include "matchformer/errors.hpp"
#include "matchformer/evalkit.hpp"
#include "matchformer/parallel.hpp"

namespace matchformer {

std::vector<Correspondence> to_correspondences(const MatchSet& m) {
  std::vector<Correspondence> out;
  out.reserve(m.size());
  for (const auto& x : m) out.push_back({{x.x1, x.y1}, {x.x2, x.y2}});
  return out;
}

namespace {

// Similarity taking the points to zero centroid and mean distance sqrt(2).
Eigen::Matrix3d normalizer(const std::vector<Point2>& pts) {
  double cx = 0, cy = 0;
  for (const auto& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double d = 0;
  for (const auto& p : pts) d += std::hypot(p.x - cx, p.y - cy);
  d /= static_cast<double>(pts.size());
  if (d < 1e-12) throw DegenerateError("dlt: all points coincide");
  const double s = std::sqrt(2.0) / d;
  Eigen::Matrix3d t;
  t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return t;
}

bool has_collinear_triple(const std::vector<Point2>& p, const Eigen::Matrix3d& t) {
  std::vector<Eigen::Vector2d> q;
  for (const auto& x : p) q.push_back((t * Eigen::Vector3d(x.x, x.y, 1)).head<2>());
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = i + 1; j < q.size(); ++j)
      for (std::size_t k = j + 1; k < q.size(); ++k) {
        const Eigen::Vector2d u = q[j] - q[i], v = q[k] - q[i];
        if (std::fabs(u.x() * v.y() - u.y() * v.x()) < 1e-9) return true;
      }
  return false;
}

}  // namespace

Homography dlt_homography(const std::vector<Correspondence>& c) {
  if (c.size() < 4) throw DegenerateError("dlt: need at least 4 correspondences, got " + std::to_string(c.size()));
  std::vector<Point2> pa, pb;
  for (const auto& x : c) {
    pa.push_back(x.a);
    pb.push_back(x.b);
  }
  const Eigen::Matrix3d ta = normalizer(pa), tb = normalizer(pb);
  if (c.size() == 4 && (has_collinear_triple(pa, ta) || has_collinear_triple(pb, tb)))
    throw DegenerateError("dlt: three of the four points are collinear");
  const auto n = static_cast<Eigen::Index>(c.size());
  Eigen::MatrixXd a(2 * n, 9);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d p = ta * Eigen::Vector3d(pa[i].x, pa[i].y, 1);
    const Eigen::Vector3d q = tb * Eigen::Vector3d(pb[i].x, pb[i].y, 1);
    const double x = p.x(), y = p.y(), u = q.x(), v = q.y();
    a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // A well-posed system has a one-dimensional null space: the second smallest
  // singular value must stay clear of zero.
  if (sv.size() >= 8 && sv(7) < 1e-10 * sv(0)) throw DegenerateError("dlt: rank-deficient configuration");
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  const Eigen::Matrix3d full = tb.inverse() * hn * ta;
  if (std::fabs(full(2, 2)) < 1e-14) throw DegenerateError("dlt: solution maps the origin to infinity");
  Homography out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.m[i * 3 + j] = full(i, j) / full(2, 2);
  return out;
}

namespace {

std::uint64_t trial_seed(std::uint64_t seed, std::uint64_t trial) {
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + trial + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double reprojection(const Homography& h, const Correspondence& c) {
  const Point2 q = h.apply(c.a);
  const double d = std::hypot(q.x - c.b.x, q.y - c.b.y);
  return std::isfinite(d) ? d : std::numeric_limits<double>::infinity();
}

}  // namespace

RansacResult ransac_homography(const std::vector<Correspondence>& c, const RansacOptions& opt) {
  if (c.size() < 4) throw DegenerateError("ransac: need at least 4 correspondences, got " + std::to_string(c.size()));
  if (opt.iterations <= 0 || !(opt.threshold > 0)) throw ConfigError("ransac: iterations and threshold must be positive");
  const std::size_t n = c.size();
  std::vector<int> counts(static_cast<std::size_t>(opt.iterations), -1);
  std::vector<Homography> hyps(static_cast<std::size_t>(opt.iterations));
  parallel_for(static_cast<std::size_t>(opt.iterations), 16, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t t = lo; t < hi; ++t) {
      std::mt19937_64 rng(trial_seed(opt.seed, t));
      std::array<std::size_t, 4> idx{};
      for (int k = 0; k < 4; ++k) {
        bool dup = true;
        while (dup) {
          idx[k] = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
          dup = std::find(idx.begin(), idx.begin() + k, idx[k]) != idx.begin() + k;
        }
      }
      std::vector<Correspondence> sample;
      for (auto i : idx) sample.push_back(c[i]);
      try {
        hyps[t] = dlt_homography(sample);
      } catch (const DegenerateError&) {
        continue;
      }
      int count = 0;
      for (const auto& x : c)
        if (reprojection(hyps[t], x) <= opt.threshold) ++count;
      counts[t] = count;
    }
  });
  int best = -1;
  for (int t = 0; t < opt.iterations; ++t)
    if (counts[t] >= 0 && (best < 0 || counts[t] > counts[best])) best = t;
  if (best < 0 || counts[best] < 4 + opt.min_support)
    throw DegenerateError("ransac: no hypothesis reached " + std::to_string(4 + opt.min_support) + " inliers");
  RansacResult out;
  out.best_trial = best;
  out.h = hyps[best];
  for (std::size_t i = 0; i < n; ++i)
    if (reprojection(hyps[best], c[i]) <= opt.threshold) out.inliers.push_back(i);
  std::vector<Correspondence> support;
  for (auto i : out.inliers) support.push_back(c[i]);
  try {
    out.h = dlt_homography(support);
  } catch (const DegenerateError&) {
    // keep the minimal-sample hypothesis
  }
  return out;
}

double corner_error(const Homography& est, const Homography& gt, std::int64_t width, std::int64_t height) {
  const double w = static_cast<double>(width - 1), h = static_cast<double>(height - 1);
  const Point2 corners[4] = {{0, 0}, {w, 0}, {0, h}, {w, h}};
  double sum = 0;
  for (const auto& p : corners) {
    const Point2 a = est.apply(p), b = gt.apply(p);
    sum += std::hypot(a.x - b.x, a.y - b.y);
  }
  return sum / 4.0;
}

MmaCurve mma(const MatchSet& m, const Homography& gt, int max_threshold) {
  MmaCurve out;
  for (int t = 1; t <= max_threshold; ++t) out.thresholds.push_back(t);
  out.accuracy.assign(out.thresholds.size(), 0.0);
  if (m.empty()) {
    out.empty = true;
    return out;
  }
  for (const auto& x : m) {
    const Point2 q = gt.apply({x.x1, x.y1});
    const double d = std::hypot(q.x - x.x2, q.y - x.y2);
    for (std::size_t k = 0; k < out.thresholds.size(); ++k)
      if (d <= out.thresholds[k]) out.accuracy[k] += 1.0;
  }
  for (auto& a : out.accuracy) a /= static_cast<double>(m.size());
  return out;
}

}  // namespace matchformer
