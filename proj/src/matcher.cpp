#include "matchformer/matcher.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "matchformer/errors.hpp"

namespace matchformer {

Point2 cell_center(std::int64_t index, std::int64_t grid_w, int scale) {
  const double half = (scale - 1) / 2.0;
  return {static_cast<double>(index % grid_w) * scale + half, static_cast<double>(index / grid_w) * scale + half};
}

Point2 pixel_to_grid(Point2 p, int scale) {
  const double half = (scale - 1) / 2.0;
  return {(p.x - half) / scale, (p.y - half) / scale};
}

Point2 grid_to_pixel(Point2 g, int scale) {
  const double half = (scale - 1) / 2.0;
  return {g.x * scale + half, g.y * scale + half};
}

namespace {

Tensor as_sequence(const Tensor& map, const char* what) {
  Tensor m = map;
  if (m.ndim() == 3) m = reshape(m, {1, m.dim(0), m.dim(1), m.dim(2)});
  if (m.ndim() != 4 || m.dim(0) != 1) throw ShapeError(std::string(what) + ": expected a single [C,h,w] map");
  const auto n = m.dim(2) * m.dim(3);
  return reshape(map_to_seq(m), {n, m.dim(1)});
}

Tensor as_map3(const Tensor& map, const char* what) {
  if (map.ndim() == 3) return map;
  if (map.ndim() == 4 && map.dim(0) == 1) return reshape(map, {map.dim(1), map.dim(2), map.dim(3)});
  throw ShapeError(std::string(what) + ": expected a single [C,h,w] map, got " + shape_str(map.shape()));
}

}  // namespace

ScoreMatrix coarse_scores(const Tensor& coarse_a, const Tensor& coarse_b, double tau, bool normalize) {
  if (!(tau > 0.0)) throw ConfigError("coarse_scores: temperature must be positive");
  Tensor a = as_sequence(coarse_a, "coarse_scores");
  Tensor b = as_sequence(coarse_b, "coarse_scores");
  if (a.dim(1) != b.dim(1)) throw ShapeError("coarse_scores: descriptor widths differ");
  if (normalize) {
    a = l2_normalize(a);
    b = l2_normalize(b);
  }
  ScoreMatrix out;
  out.s = mul(matmul(a, transpose(b)), 1.0 / tau);
  out.tau = tau;
  out.ha = coarse_a.dim(-2);
  out.wa = coarse_a.dim(-1);
  out.hb = coarse_b.dim(-2);
  out.wb = coarse_b.dim(-1);
  return out;
}

Tensor dual_softmax(const Tensor& s) {
  if (s.ndim() != 2) throw ShapeError("dual_softmax: expected a 2-D score matrix");
  return mul(softmax(s, 1), softmax(s, 0));
}

CoarseMatchResult select_coarse(const Tensor& p, double theta) {
  if (p.ndim() != 2) throw ShapeError("select_coarse: expected a 2-D probability matrix");
  if (!(theta >= 0.0 && theta < 1.0)) throw ConfigError("select_coarse: threshold must lie in [0, 1)");
  const auto n = p.dim(0), m = p.dim(1);
  const auto d = p.data();
  std::vector<std::int64_t> row_best(static_cast<std::size_t>(n), 0), col_best(static_cast<std::size_t>(m), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    const double* r = d.data() + i * m;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < m; ++j)
      if (r[j] > r[best]) best = j;
    row_best[i] = best;
  }
  for (std::int64_t j = 0; j < m; ++j) {
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < n; ++i)
      if (d[i * m + j] > d[best * m + j]) best = i;
    col_best[j] = best;
  }
  CoarseMatchResult out;
  out.p = p;
  out.theta = theta;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto j = row_best[i];
    const double v = d[i * m + j];
    if (col_best[j] == i && v > theta) out.matches.push_back({i, j, v});
  }
  return out;
}

FineExpectation fine_expectation(const Tensor& fine_a, const Tensor& fine_b,
                                 const std::vector<std::pair<std::int64_t, std::int64_t>>& pairs,
                                 const FineSpec& spec) {
  if (spec.window < 1 || spec.window % 2 == 0) throw ConfigError("fine window must be a positive odd size");
  if (spec.coarse_wa <= 0 || spec.coarse_wb <= 0) throw ConfigError("fine_expectation: coarse grid widths unset");
  Tensor fa = as_map3(fine_a, "fine_expectation");
  Tensor fb = as_map3(fine_b, "fine_expectation");
  if (fa.dim(0) != fb.dim(0)) throw ShapeError("fine_expectation: fine widths differ");
  FineExpectation out;
  const auto count = static_cast<std::int64_t>(pairs.size());
  if (count == 0) return out;

  const int half = spec.window / 2;
  const std::int64_t cells = static_cast<std::int64_t>(spec.window) * spec.window;
  const double hb = static_cast<double>(fb.dim(1)), wb = static_cast<double>(fb.dim(2));
  std::vector<Point2> window_pts;
  window_pts.reserve(static_cast<std::size_t>(count * cells));
  std::vector<double> mask(static_cast<std::size_t>(count * cells), 0.0);
  for (std::int64_t m = 0; m < count; ++m) {
    const auto [i, j] = pairs[m];
    const Point2 ga = pixel_to_grid(cell_center(i, spec.coarse_wa, spec.coarse_scale), spec.fine_scale);
    const Point2 gb = pixel_to_grid(cell_center(j, spec.coarse_wb, spec.coarse_scale), spec.fine_scale);
    out.center_a.push_back(ga);
    out.center_b.push_back(gb);
    std::int64_t k = 0;
    for (int v = -half; v <= half; ++v)
      for (int u = -half; u <= half; ++u, ++k) {
        const Point2 q{gb.x + u, gb.y + v};
        window_pts.push_back(q);
        const bool inside = q.x >= -0.5 && q.x <= wb - 0.5 && q.y >= -0.5 && q.y <= hb - 0.5;
        if (!inside) mask[static_cast<std::size_t>(m * cells + k)] = -1e9;
      }
  }
  const auto c = fa.dim(0);
  Tensor centers = sample_bilinear(fa, out.center_a);   // [M, C]
  Tensor window = sample_bilinear(fb, window_pts);      // [M * w^2, C]
  if (spec.temperature > 0.0) {
    centers = l2_normalize(centers);
    window = l2_normalize(window);
  }
  Tensor logits = matmul(reshape(centers, {count, 1, c}), transpose(reshape(window, {count, cells, c})));
  if (spec.temperature > 0.0) logits = mul(logits, 1.0 / spec.temperature);
  logits = add(logits, Tensor::from({count, 1, cells}, std::move(mask)));
  Tensor prob = softmax(logits, -1);

  std::vector<double> grid(static_cast<std::size_t>(cells * 2));
  std::int64_t k = 0;
  for (int v = -half; v <= half; ++v)
    for (int u = -half; u <= half; ++u, ++k) {
      grid[static_cast<std::size_t>(2 * k)] = u;
      grid[static_cast<std::size_t>(2 * k + 1)] = v;
    }
  out.offsets = reshape(matmul(prob, Tensor::from({cells, 2}, std::move(grid))), {count, 2});
  return out;
}

MatchSet fine_refine(const CoarseMatchResult& coarse, const Tensor& fine_a, const Tensor& fine_b, const FineSpec& spec,
                     std::int64_t image_h, std::int64_t image_w) {
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  for (const auto& m : coarse.matches) pairs.emplace_back(m.i, m.j);
  FineExpectation fe = fine_expectation(fine_a, fine_b, pairs, spec);
  MatchSet out;
  const double max_x = static_cast<double>(image_w - 1), max_y = static_cast<double>(image_h - 1);
  for (std::size_t m = 0; m < pairs.size(); ++m) {
    const Point2 pa = cell_center(pairs[m].first, spec.coarse_wa, spec.coarse_scale);
    const double dx = fe.offsets.at(2 * m), dy = fe.offsets.at(2 * m + 1);
    const Point2 pb = grid_to_pixel({fe.center_b[m].x + dx, fe.center_b[m].y + dy}, spec.fine_scale);
    out.push_back({pa.x, pa.y, std::clamp(pb.x, 0.0, max_x), std::clamp(pb.y, 0.0, max_y), coarse.matches[m].conf});
  }
  return out;
}

PairMatches match_pair_detailed(const Tensor& img_a, const Tensor& img_b, const Model& model, const MatchOptions& opt) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  auto [a, b] = model.forward_pair(img_a, img_b);
  PairMatches out;
  out.scores = coarse_scores(a.coarse, b.coarse, opt.tau, opt.normalize);
  out.coarse = select_coarse(dual_softmax(out.scores.s), opt.theta);
  FineSpec spec;
  spec.window = opt.window;
  spec.coarse_scale = cfg.coarse_scale();
  spec.fine_scale = cfg.fine_scale();
  spec.coarse_wa = out.scores.wa;
  spec.coarse_wb = out.scores.wb;
  spec.temperature = opt.fine_temperature;
  out.matches = fine_refine(out.coarse, a.fine, b.fine, spec, img_a.dim(-2), img_a.dim(-1));
  return out;
}

MatchSet match_pair(const Tensor& img_a, const Tensor& img_b, const Model& model, const MatchOptions& opt) {
  return match_pair_detailed(img_a, img_b, model, opt).matches;
}

void write_matches(std::ostream& os, const MatchSet& m) {
  os << "# matchformer-matches v1\n";
  char buf[160];
  for (const auto& x : m) {
    std::snprintf(buf, sizeof buf, "%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", x.x1, x.y1, x.x2, x.y2, x.conf);
    os << buf;
  }
}

void save_matches(const std::string& path, const MatchSet& m) {
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  write_matches(os, m);
  if (!os) throw IoError(path, "write failed");
}

MatchSet read_matches(std::istream& is, const std::string& source) {
  std::string line;
  if (!std::getline(is, line) || line != "# matchformer-matches v1")
    throw ParseError(source, 0, "missing '# matchformer-matches v1' header");
  MatchSet out;
  while (true) {
    const auto pos = static_cast<std::int64_t>(is.tellg());
    if (!std::getline(is, line)) break;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Match m;
    std::string extra;
    if (!(ls >> m.x1 >> m.y1 >> m.x2 >> m.y2 >> m.conf) || (ls >> extra))
      throw ParseError(source, pos, "expected five numbers 'x1 y1 x2 y2 conf'");
    out.push_back(m);
  }
  return out;
}

MatchSet load_matches(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path, "cannot open for reading");
  return read_matches(is, path);
}

}  // namespace matchformer
