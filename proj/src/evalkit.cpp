#include "matchformer/evalkit.hpp"

#include <cstdio>
#include <ostream>

#include "matchformer/errors.hpp"

namespace matchformer {

EvalAccumulator::EvalAccumulator(int max_threshold) : max_threshold_(max_threshold) {
  for (int t = 1; t <= max_threshold; ++t) sum_.thresholds.push_back(t);
  sum_.mma.assign(sum_.thresholds.size(), 0.0);
  sum_.mma_inliers.assign(sum_.thresholds.size(), 0.0);
}

void EvalAccumulator::add(const MatchSet& m, const Homography& gt, std::int64_t width, std::int64_t height,
                          const RansacOptions& ransac) {
  ++sum_.pairs;
  sum_.matches += static_cast<std::int64_t>(m.size());
  const MmaCurve all = mma(m, gt, max_threshold_);
  for (std::size_t k = 0; k < all.accuracy.size(); ++k) sum_.mma[k] += all.accuracy[k];
  double err = -1;
  try {
    const RansacResult r = ransac_homography(to_correspondences(m), ransac);
    err = corner_error(r.h, gt, width, height);
    MatchSet kept;
    for (auto i : r.inliers) kept.push_back(m[i]);
    sum_.inliers += static_cast<std::int64_t>(kept.size());
    const MmaCurve in = mma(kept, gt, max_threshold_);
    for (std::size_t k = 0; k < in.accuracy.size(); ++k) sum_.mma_inliers[k] += in.accuracy[k];
  } catch (const DegenerateError&) {
    ++sum_.failures;
  }
  if (err >= 0) {
    errors_.push_back(err);
    if (err <= 1) sum_.acc1 += 1;
    if (err <= 3) sum_.acc3 += 1;
    if (err <= 5) sum_.acc5 += 1;
  }
}

EvalReport EvalAccumulator::report() const {
  EvalReport r = sum_;
  if (r.pairs == 0) return r;
  const double n = r.pairs;
  r.acc1 /= n;
  r.acc3 /= n;
  r.acc5 /= n;
  for (auto& v : r.mma) v /= n;
  for (auto& v : r.mma_inliers) v /= n;
  double s = 0;
  for (double e : errors_) s += e;
  r.mean_corner_error = errors_.empty() ? 0.0 : s / static_cast<double>(errors_.size());
  return r;
}

void write_report_csv(std::ostream& os, const EvalReport& r) {
  os << "metric,value\n";
  char buf[64];
  auto row = [&](const std::string& k, double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    os << k << ',' << buf << '\n';
  };
  row("pairs", r.pairs);
  row("failures", r.failures);
  row("acc@1px", r.acc1);
  row("acc@3px", r.acc3);
  row("acc@5px", r.acc5);
  row("mean_corner_error", r.mean_corner_error);
  row("matches", static_cast<double>(r.matches));
  row("inliers", static_cast<double>(r.inliers));
  for (std::size_t k = 0; k < r.thresholds.size(); ++k)
    row("mma@" + std::to_string(static_cast<int>(r.thresholds[k])) + "px", r.mma[k]);
  for (std::size_t k = 0; k < r.thresholds.size(); ++k)
    row("mma_inliers@" + std::to_string(static_cast<int>(r.thresholds[k])) + "px", r.mma_inliers[k]);
}

void print_report(std::ostream& os, const EvalReport& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "pairs %d (ransac failures %d), matches %lld, inliers %lld\n", r.pairs, r.failures,
                static_cast<long long>(r.matches), static_cast<long long>(r.inliers));
  os << buf;
  std::snprintf(buf, sizeof buf, "corner accuracy   @1px %.3f   @3px %.3f   @5px %.3f   (mean error %.3f px)\n",
                r.acc1, r.acc3, r.acc5, r.mean_corner_error);
  os << buf;
  os << "threshold px  ";
  for (double t : r.thresholds) {
    std::snprintf(buf, sizeof buf, "%6.0f", t);
    os << buf;
  }
  os << "\nmma           ";
  for (double v : r.mma) {
    std::snprintf(buf, sizeof buf, "%6.3f", v);
    os << buf;
  }
  os << "\nmma inliers   ";
  for (double v : r.mma_inliers) {
    std::snprintf(buf, sizeof buf, "%6.3f", v);
    os << buf;
  }
  os << '\n';
}

EvalReport evaluate_model(const Model& model, const std::vector<ManifestEntry>& entries, std::int64_t height,
                          std::int64_t width, const MatchOptions& opt, const RansacOptions& ransac) {
  EvalAccumulator acc;
  for (const auto& e : entries) {
    const PairSample s = make_pair(e.seed, e.h, height, width);
    const MatchSet m = match_pair(to_tensor(s.a), to_tensor(s.b), model, opt);
    acc.add(m, e.h, width, height, ransac);
  }
  return acc.report();
}

}  // namespace matchformer
