#include "matchformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>

#include "matchformer/errors.hpp"

namespace matchformer {

Tensor to_tensor(const Image& img) { return Tensor::from({1, 1, img.height, img.width}, img.data); }

Tensor to_batch(const std::vector<const Image*>& imgs) {
  if (imgs.empty()) throw ShapeError("to_batch: no images");
  const auto h = imgs[0]->height, w = imgs[0]->width;
  std::vector<double> v;
  v.reserve(imgs.size() * static_cast<std::size_t>(h * w));
  for (const Image* im : imgs) {
    if (im->height != h || im->width != w) throw ShapeError("to_batch: image sizes differ");
    v.insert(v.end(), im->data.begin(), im->data.end());
  }
  return Tensor::from({static_cast<std::int64_t>(imgs.size()), 1, h, w}, std::move(v));
}

double image_stddev(const Image& img) {
  if (img.data.empty()) return 0.0;
  double mean = 0.0;
  for (double v : img.data) mean += v;
  mean /= static_cast<double>(img.data.size());
  double var = 0.0;
  for (double v : img.data) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(img.data.size()));
}

// ---------------------------------------------------------------- homography

Homography Homography::translation(double tx, double ty) {
  Homography h;
  h.m = {1, 0, tx, 0, 1, ty, 0, 0, 1};
  return h;
}

Point2 Homography::apply(Point2 p) const {
  const double x = m[0] * p.x + m[1] * p.y + m[2];
  const double y = m[3] * p.x + m[4] * p.y + m[5];
  const double z = m[6] * p.x + m[7] * p.y + m[8];
  return {x / z, y / z};
}

double Homography::det() const {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Homography Homography::inverse() const {
  const double d = det();
  if (std::fabs(d) < 1e-12) throw DegenerateError("homography is singular");
  Homography r;
  r.m = {(m[4] * m[8] - m[5] * m[7]) / d, (m[2] * m[7] - m[1] * m[8]) / d, (m[1] * m[5] - m[2] * m[4]) / d,
         (m[5] * m[6] - m[3] * m[8]) / d, (m[0] * m[8] - m[2] * m[6]) / d, (m[2] * m[3] - m[0] * m[5]) / d,
         (m[3] * m[7] - m[4] * m[6]) / d, (m[1] * m[6] - m[0] * m[7]) / d, (m[0] * m[4] - m[1] * m[3]) / d};
  return r.normalized();
}

Homography Homography::normalized() const {
  if (m[8] == 0.0) return *this;
  Homography r;
  for (int i = 0; i < 9; ++i) r.m[i] = m[i] / m[8];
  return r;
}

Homography compose(const Homography& a, const Homography& b) {
  Homography r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += b.m[i * 3 + k] * a.m[k * 3 + j];
      r.m[i * 3 + j] = s;
    }
  return r.normalized();
}

// ---------------------------------------------------------------- patterns

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

void add_value_noise(Image& img, std::mt19937_64& rng, double period, double amplitude) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto gw = static_cast<std::int64_t>(std::ceil(static_cast<double>(img.width) / period)) + 2;
  const auto gh = static_cast<std::int64_t>(std::ceil(static_cast<double>(img.height) / period)) + 2;
  std::vector<double> grid(static_cast<std::size_t>(gw * gh));
  for (auto& g : grid) g = u(rng);
  const double ox = u(rng) * 0.5 + 0.5, oy = u(rng) * 0.5 + 0.5;
  for (std::int64_t y = 0; y < img.height; ++y) {
    const double fy = y / period + oy;
    const auto y0 = static_cast<std::int64_t>(fy);
    const double ty = smooth(fy - static_cast<double>(y0));
    for (std::int64_t x = 0; x < img.width; ++x) {
      const double fx = x / period + ox;
      const auto x0 = static_cast<std::int64_t>(fx);
      const double tx = smooth(fx - static_cast<double>(x0));
      auto g = [&](std::int64_t yy, std::int64_t xx) { return grid[static_cast<std::size_t>(yy * gw + xx)]; };
      const double top = g(y0, x0) * (1 - tx) + g(y0, x0 + 1) * tx;
      const double bot = g(y0 + 1, x0) * (1 - tx) + g(y0 + 1, x0 + 1) * tx;
      img.at(y, x) += amplitude * (top * (1 - ty) + bot * ty);
    }
  }
}

void add_shapes(Image& img, std::mt19937_64& rng, int count) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double w = static_cast<double>(img.width), h = static_cast<double>(img.height);
  const double extent = std::min(w, h);
  for (int s = 0; s < count; ++s) {
    const int kind = static_cast<int>(u(rng) * 3.0);
    const double cx = u(rng) * w, cy = u(rng) * h;
    const double r = extent * (0.04 + 0.14 * u(rng));
    const double value = u(rng) < 0.5 ? 0.15 * u(rng) - 1.2 : 1.2 + 0.15 * u(rng);
    const double angle = u(rng) * std::numbers::pi;
    const double aspect = 0.4 + 0.6 * u(rng);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::int64_t y = 0; y < img.height; ++y)
      for (std::int64_t x = 0; x < img.width; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double rx = ca * dx + sa * dy, ry = -sa * dx + ca * dy;
        bool inside = false;
        if (kind == 0) {
          inside = std::fabs(rx) <= r && std::fabs(ry) <= r * aspect;
        } else if (kind == 1) {
          inside = rx * rx + (ry / aspect) * (ry / aspect) <= r * r;
        } else {
          const double d = std::sqrt(rx * rx + ry * ry);
          inside = d <= r && d >= r * 0.55;
        }
        if (inside) img.at(y, x) = 0.45 * img.at(y, x) + 0.55 * value;
      }
  }
}

void normalize_range(Image& img) {
  const auto [lo, hi] = std::minmax_element(img.data.begin(), img.data.end());
  const double a = *lo, span = *hi - *lo;
  for (auto& v : img.data) v = span > 0 ? (v - a) / span : 0.5;
}

}  // namespace

Image gen_pattern(std::uint64_t seed, std::int64_t h, std::int64_t w) {
  if (h <= 0 || w <= 0 || h % 32 != 0 || w % 32 != 0)
    throw ShapeError("gen_pattern: extents must be positive multiples of 32");
  for (std::uint64_t attempt = 0;; ++attempt) {
    std::mt19937_64 rng(mix_seed(seed, attempt));
    Image img(h, w, 0.0);
    add_value_noise(img, rng, 24.0, 0.8);
    add_value_noise(img, rng, 10.0, 0.6);
    add_value_noise(img, rng, 4.0, 0.5);
    add_value_noise(img, rng, 2.5, 0.3);
    std::uniform_int_distribution<int> n_shapes(6, 12);
    add_shapes(img, rng, n_shapes(rng));
    normalize_range(img);
    if (image_stddev(img) > 0.05 || attempt >= 64) return img;
  }
}

namespace {

double visible_fraction(const Homography& hm, std::int64_t h, std::int64_t w) {
  std::int64_t inside = 0, total = 0;
  for (std::int64_t y = 0; y < h; y += 2)
    for (std::int64_t x = 0; x < w; x += 2) {
      const Point2 q = hm.apply({static_cast<double>(x), static_cast<double>(y)});
      ++total;
      if (q.x >= 0 && q.x <= static_cast<double>(w - 1) && q.y >= 0 && q.y <= static_cast<double>(h - 1)) ++inside;
    }
  return static_cast<double>(inside) / static_cast<double>(total);
}

Homography draw_homography(std::mt19937_64& rng, const HomographyBounds& b, std::int64_t h, std::int64_t w) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double angle = b.max_rotation * u(rng);
  const double sx = 1.0 + b.max_scale * u(rng), sy = 1.0 + b.max_scale * u(rng);
  const double px = b.max_perspective * u(rng) / static_cast<double>(w);
  const double py = b.max_perspective * u(rng) / static_cast<double>(h);
  const double tx = b.max_translation * u(rng), ty = b.max_translation * u(rng);
  const double cx = static_cast<double>(w - 1) / 2.0, cy = static_cast<double>(h - 1) / 2.0;
  const double c = std::cos(angle), s = std::sin(angle);
  Homography core;
  core.m = {c * sx, -s * sy, 0, s * sx, c * sy, 0, 0, 0, 1};
  Homography persp;
  persp.m = {1, 0, 0, 0, 1, 0, px, py, 1};
  Homography hm = compose(Homography::translation(-cx, -cy), persp);
  hm = compose(hm, core);
  return compose(hm, Homography::translation(cx + tx, cy + ty));
}

}  // namespace

Homography random_homography(std::uint64_t seed, const HomographyBounds& bounds, std::int64_t h, std::int64_t w) {
  constexpr int kRetries = 32;
  for (int attempt = 0; attempt < kRetries; ++attempt) {
    std::mt19937_64 rng(mix_seed(seed, 1000 + static_cast<std::uint64_t>(attempt)));
    const Homography hm = draw_homography(rng, bounds, h, w);
    if (std::fabs(hm.det()) > 1e-3 && visible_fraction(hm, h, w) >= 0.5) return hm;
  }
  throw ConfigError("random_homography: bounds too large, no draw keeps half of the image visible");
}

WarpResult warp(const Image& img, const Homography& hm) {
  const Homography inv = hm.inverse();
  WarpResult out;
  out.image = Image(img.height, img.width, 0.0);
  out.valid.assign(img.data.size(), 0);
  const double max_x = static_cast<double>(img.width - 1), max_y = static_cast<double>(img.height - 1);
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x) {
      const Point2 s = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      if (!(s.x >= 0 && s.x <= max_x && s.y >= 0 && s.y <= max_y)) continue;
      const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(s.x), img.width - 2 < 0 ? 0 : img.width - 2);
      const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(s.y), img.height - 2 < 0 ? 0 : img.height - 2);
      const auto x1 = std::min<std::int64_t>(x0 + 1, img.width - 1), y1 = std::min<std::int64_t>(y0 + 1, img.height - 1);
      const double tx = s.x - static_cast<double>(x0), ty = s.y - static_cast<double>(y0);
      const double top = img.at(y0, x0) * (1 - tx) + img.at(y0, x1) * tx;
      const double bot = img.at(y1, x0) * (1 - tx) + img.at(y1, x1) * tx;
      out.image.at(y, x) = top * (1 - ty) + bot * ty;
      out.valid[static_cast<std::size_t>(y * img.width + x)] = 1;
    }
  return out;
}

std::vector<std::int64_t> gt_coarse_labels(const Homography& hm, std::int64_t height, std::int64_t width, int scale) {
  if (height % scale != 0 || width % scale != 0) throw ShapeError("gt_coarse_labels: extents not divisible by scale");
  const auto hc = height / scale, wc = width / scale;
  const auto n = hc * wc;
  std::vector<std::int64_t> label(static_cast<std::size_t>(n), -1);
  std::vector<std::int64_t> owner(static_cast<std::size_t>(n), -1);
  std::vector<double> owner_dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  for (std::int64_t i = 0; i < n; ++i) {
    const Point2 pb = hm.apply(cell_center(i, wc, scale));
    if (!std::isfinite(pb.x) || !std::isfinite(pb.y)) continue;
    const double gx = std::floor((pb.x + 0.5) / scale), gy = std::floor((pb.y + 0.5) / scale);
    if (gx < 0 || gy < 0 || gx >= static_cast<double>(wc) || gy >= static_cast<double>(hc)) continue;
    const auto j = static_cast<std::int64_t>(gy) * wc + static_cast<std::int64_t>(gx);
    const Point2 cj = cell_center(j, wc, scale);
    const double d = std::hypot(pb.x - cj.x, pb.y - cj.y);
    if (d < owner_dist[j]) {
      owner_dist[j] = d;
      owner[j] = i;
    }
  }
  for (std::int64_t j = 0; j < n; ++j)
    if (owner[j] >= 0) label[owner[j]] = j;
  return label;
}

PairSample make_pair(std::uint64_t seed, const Homography& h, std::int64_t height, std::int64_t width,
                     double noise_sigma) {
  PairSample s;
  s.seed = seed;
  s.h = h;
  s.a = gen_pattern(seed, height, width);
  WarpResult wr = warp(s.a, h);
  s.b = std::move(wr.image);
  s.valid = std::move(wr.valid);
  if (noise_sigma > 0) {
    std::mt19937_64 rng(mix_seed(seed, 77));
    std::normal_distribution<double> n(0.0, noise_sigma);
    for (std::size_t k = 0; k < s.b.data.size(); ++k)
      if (s.valid[k]) s.b.data[k] = std::clamp(s.b.data[k] + n(rng), 0.0, 1.0);
  }
  return s;
}

PairSample make_pair(std::uint64_t seed, const HomographyBounds& bounds, std::int64_t height, std::int64_t width,
                     double noise_sigma) {
  return make_pair(seed, random_homography(seed, bounds, height, width), height, width, noise_sigma);
}

// ---------------------------------------------------------------- image IO

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path, "cannot open for reading");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& header, const std::vector<std::uint8_t>& payload) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path, "cannot open for writing");
  os << header;
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!os) throw IoError(path, "write failed");
}

}  // namespace

Image decode_pgm(const std::string& bytes, const std::string& source) {
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw ParseError(source, 0, "expected 'P5' magic");
  pos = 2;
  auto next_int = [&](const char* what) -> std::int64_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    std::int64_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1 << 24)) throw ParseError(source, static_cast<std::int64_t>(start), std::string(what) + " too large");
      ++pos;
    }
    if (pos == start) throw ParseError(source, static_cast<std::int64_t>(start), std::string("expected ") + what);
    return v;
  };
  const auto w = next_int("width");
  const auto h = next_int("height");
  const auto maxval = next_int("maxval");
  if (w <= 0 || h <= 0) throw ParseError(source, static_cast<std::int64_t>(pos), "non-positive image extent");
  if (maxval != 255) throw ParseError(source, static_cast<std::int64_t>(pos), "only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw ParseError(source, static_cast<std::int64_t>(pos), "expected whitespace before pixel data");
  ++pos;
  const auto need = static_cast<std::size_t>(w * h);
  if (bytes.size() - pos < need)
    throw ParseError(source, static_cast<std::int64_t>(bytes.size()),
                     "truncated payload: " + std::to_string(bytes.size() - pos) + " of " + std::to_string(need) +
                         " bytes");
  Image img(h, w);
  for (std::size_t k = 0; k < need; ++k)
    img.data[k] = static_cast<double>(static_cast<unsigned char>(bytes[pos + k])) / 255.0;
  return img;
}

Image read_pgm(const std::string& path) { return decode_pgm(read_file(path), path); }

std::uint8_t quantize(double v) {
  const double q = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(q);
}

void write_pgm(const std::string& path, const Image& img) {
  std::vector<std::uint8_t> px(img.data.size());
  for (std::size_t k = 0; k < px.size(); ++k) px[k] = quantize(img.data[k]);
  write_file(path, "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n", px);
}

void write_ppm(const std::string& path, const RgbImage& img) {
  if (img.data.size() != static_cast<std::size_t>(img.height * img.width * 3))
    throw ShapeError("write_ppm: buffer does not match extents");
  write_file(path, "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n", img.data);
}

RgbImage render_overlay(const Image& a, const Image& b, const MatchSet& matches) {
  RgbImage out;
  out.height = std::max(a.height, b.height);
  out.width = a.width + b.width;
  out.data.assign(static_cast<std::size_t>(out.height * out.width * 3), 0);
  auto put = [&](std::int64_t y, std::int64_t x, std::uint8_t r, std::uint8_t g, std::uint8_t bl) {
    if (y < 0 || x < 0 || y >= out.height || x >= out.width) return;
    auto* p = &out.data[static_cast<std::size_t>((y * out.width + x) * 3)];
    p[0] = r;
    p[1] = g;
    p[2] = bl;
  };
  for (std::int64_t y = 0; y < a.height; ++y)
    for (std::int64_t x = 0; x < a.width; ++x) {
      const auto v = quantize(a.at(y, x));
      put(y, x, v, v, v);
    }
  for (std::int64_t y = 0; y < b.height; ++y)
    for (std::int64_t x = 0; x < b.width; ++x) {
      const auto v = quantize(b.at(y, x));
      put(y, a.width + x, v, v, v);
    }
  for (const auto& m : matches) {
    const double c = std::clamp(m.conf, 0.0, 1.0);
    const auto r = quantize(1.0 - c), g = quantize(c);
    const double x0 = m.x1, y0 = m.y1, x1 = m.x2 + static_cast<double>(a.width), y1 = m.y2;
    const int steps = static_cast<int>(std::ceil(std::max(std::fabs(x1 - x0), std::fabs(y1 - y0)))) + 1;
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      put(static_cast<std::int64_t>(std::lround(y0 + t * (y1 - y0))),
          static_cast<std::int64_t>(std::lround(x0 + t * (x1 - x0))), r, g, 0);
    }
  }
  return out;
}

// ---------------------------------------------------------------- manifest

void write_manifest(std::ostream& os, const std::vector<ManifestEntry>& entries) {
  char buf[32];
  for (const auto& e : entries) {
    os << e.seed;
    for (double v : e.h.m) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << '\t' << buf;
    }
    os << '\n';
  }
}

void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  write_manifest(os, entries);
  if (!os) throw IoError(path, "write failed");
}

std::vector<ManifestEntry> read_manifest(std::istream& is, const std::string& source) {
  std::vector<ManifestEntry> out;
  std::string line;
  while (true) {
    const auto pos = static_cast<std::int64_t>(is.tellg());
    if (!std::getline(is, line)) break;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.seed)) throw ParseError(source, pos, "expected a seed");
    for (auto& v : e.h.m)
      if (!(ls >> v)) throw ParseError(source, pos, "expected nine homography entries after the seed");
    std::string extra;
    if (ls >> extra) throw ParseError(source, pos, "trailing fields");
    if (std::fabs(e.h.det()) < 1e-9) throw ParseError(source, pos, "singular homography");
    out.push_back(e);
  }
  return out;
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path, "cannot open for reading");
  return read_manifest(is, path);
}

}  // namespace matchformer
