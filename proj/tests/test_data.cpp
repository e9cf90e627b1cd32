#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "matchformer/data.hpp"
#include "matchformer/errors.hpp"

using namespace matchformer;

namespace {

double stddev(const Image& img) {
  double m = 0, v = 0;
  for (double x : img.data) m += x;
  m /= static_cast<double>(img.data.size());
  for (double x : img.data) v += (x - m) * (x - m);
  return std::sqrt(v / static_cast<double>(img.data.size()));
}

std::string tmp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() / ("matchformer_test_" + stem)).string();
}

Homography product(const Homography& a, const Homography& b) {
  Homography out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a.m[r * 3 + k] * b.m[k * 3 + c];
      out.m[r * 3 + c] = s;
    }
  return out;
}

}  // namespace

TEST_CASE("pattern generator") {
  Image a = gen_pattern(7, 64, 96);
  Image b = gen_pattern(7, 64, 96);
  CHECK(a.height == 64);
  CHECK(a.width == 96);
  CHECK(a.data == b.data);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Image img = gen_pattern(seed, 64, 64);
    CHECK(stddev(img) > 0.05);
    CHECK(image_stddev(img) == doctest::Approx(stddev(img)));
    for (double v : img.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    Image other = gen_pattern(seed + 1, 64, 64);
    double d = 0;
    for (std::size_t k = 0; k < img.data.size(); ++k) d = std::max(d, std::fabs(img.data[k] - other.data[k]));
    CHECK(d > 0.1);
  }
}

TEST_CASE("homography algebra") {
  Homography t = Homography::translation(3, -2);
  Point2 p = t.apply({1, 1});
  CHECK(p.x == 4);
  CHECK(p.y == -1);
  HomographyBounds zero{0, 0, 0, 0};
  Homography id = random_homography(5, zero, 64, 64);
  for (int k = 0; k < 9; ++k) CHECK(id.m[k] == Homography::identity().m[k]);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Homography h = random_homography(seed, HomographyBounds{}, 64, 64);
    CHECK(std::fabs(h.det()) > 1e-3);
    CHECK(h.m[8] == 1.0);
    if (seed < 50) {
      Homography e = product(h, h.inverse());
      for (int k = 0; k < 9; ++k) CHECK(std::fabs(e.m[k] / e.m[8] - id.m[k]) < 1e-10);
      Homography c = compose(h, h.inverse());
      Point2 q = c.apply({13.0, 40.0});
      CHECK(std::fabs(q.x - 13.0) < 1e-10);
      CHECK(std::fabs(q.y - 40.0) < 1e-10);
    }
  }
  Homography sing;
  sing.m = {1, 2, 3, 2, 4, 6, 0, 0, 1};
  CHECK_THROWS_AS(sing.inverse(), DegenerateError);
  Homography a = Homography::translation(1, 0), b = Homography::translation(0, 5);
  a.m[0] = 2;
  Point2 ab = compose(a, b).apply({1, 1});
  CHECK(ab.x == 3);
  CHECK(ab.y == 6);
}

TEST_CASE("warp") {
  Image img = gen_pattern(3, 32, 32);
  WarpResult same = warp(img, Homography::identity());
  CHECK(same.image.data == img.data);
  for (auto v : same.valid) CHECK(v == 1);

  WarpResult shift = warp(img, Homography::translation(3, 0));
  for (std::int64_t y = 0; y < 32; ++y)
    for (std::int64_t x = 0; x < 32; ++x) {
      if (x < 3) {
        CHECK(shift.valid[y * 32 + x] == 0);
        CHECK(shift.image.at(y, x) == 0.0);
      } else {
        CHECK(shift.valid[y * 32 + x] == 1);
        CHECK(shift.image.at(y, x) == doctest::Approx(img.at(y, x - 3)).epsilon(1e-12));
      }
    }

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Image src = gen_pattern(seed, 64, 64);
    Homography h = random_homography(seed, HomographyBounds{}, 64, 64);
    WarpResult there = warp(src, h);
    WarpResult back = warp(there.image, h.inverse());
    double total = 0;
    std::int64_t count = 0;
    for (std::int64_t y = 0; y < 64; ++y)
      for (std::int64_t x = 0; x < 64; ++x) {
        if (!back.valid[y * 64 + x]) continue;
        // The doubly-valid mask excludes pixels whose bilinear support in the
        // intermediate image touches an invalid pixel.
        Point2 q = h.apply({static_cast<double>(x), static_cast<double>(y)});
        const auto x0 = static_cast<std::int64_t>(std::floor(q.x)), y0 = static_cast<std::int64_t>(std::floor(q.y));
        bool ok = x0 >= 0 && y0 >= 0 && x0 + 1 < 64 && y0 + 1 < 64;
        for (int dy = 0; ok && dy < 2; ++dy)
          for (int dx = 0; ok && dx < 2; ++dx) ok = there.valid[(y0 + dy) * 64 + x0 + dx] != 0;
        if (!ok) continue;
        total += std::fabs(back.image.at(y, x) - src.at(y, x));
        ++count;
      }
    CHECK(count > 64 * 64 / 2);
    // Hard shape edges do not survive two bilinear resamplings pixel-exactly;
    // the per-pixel bound is checked on smooth content below.
    CHECK(total / static_cast<double>(count) < 0.05);
  }
}

TEST_CASE("warp round trip on smooth content") {
  Image src(64, 64);
  for (std::int64_t y = 0; y < 64; ++y)
    for (std::int64_t x = 0; x < 64; ++x) src.at(y, x) = 0.5 + 0.4 * std::sin(0.21 * x) * std::cos(0.17 * y);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Homography h = random_homography(seed, HomographyBounds{}, 64, 64);
    WarpResult there = warp(src, h);
    WarpResult back = warp(there.image, h.inverse());
    double worst = 0;
    for (std::int64_t y = 2; y < 62; ++y)
      for (std::int64_t x = 2; x < 62; ++x) {
        Point2 q = h.apply({static_cast<double>(x), static_cast<double>(y)});
        if (q.x < 1 || q.y < 1 || q.x > 62 || q.y > 62) continue;
        worst = std::max(worst, std::fabs(back.image.at(y, x) - src.at(y, x)));
      }
    CHECK(worst < 0.05);
  }
}

TEST_CASE("ground-truth coarse labels") {
  auto id = gt_coarse_labels(Homography::identity(), 64, 64, 4);
  for (std::int64_t i = 0; i < 256; ++i) CHECK(id[i] == i);
  auto sh = gt_coarse_labels(Homography::translation(4, 0), 64, 64, 4);
  for (std::int64_t i = 0; i < 256; ++i) CHECK(sh[i] == (i % 16 == 15 ? -1 : i + 1));

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Homography h = random_homography(seed + 77, HomographyBounds{}, 64, 64);
    auto labels = gt_coarse_labels(h, 64, 64, 4);
    std::vector<std::int64_t> cell(256, -1);
    std::vector<double> dist(256, 0.0);
    for (std::int64_t i = 0; i < 256; ++i) {
      const double cx = (i % 16) * 4 + 1.5, cy = (i / 16) * 4 + 1.5;
      const auto& m = h.m;
      const double w = m[6] * cx + m[7] * cy + m[8];
      const double bx = (m[0] * cx + m[1] * cy + m[2]) / w, by = (m[3] * cx + m[4] * cy + m[5]) / w;
      const auto gx = static_cast<std::int64_t>(std::floor((bx + 0.5) / 4)), gy = static_cast<std::int64_t>(std::floor((by + 0.5) / 4));
      if (gx >= 0 && gy >= 0 && gx < 16 && gy < 16) {
        cell[i] = gy * 16 + gx;
        dist[i] = std::hypot(bx - (gx * 4 + 1.5), by - (gy * 4 + 1.5));
      }
    }
    for (std::int64_t i = 0; i < 256; ++i) {
      if (labels[i] >= 0) {
        CHECK(labels[i] == cell[i]);
        for (std::int64_t k = 0; k < 256; ++k)
          if (k != i && cell[k] == cell[i]) CHECK((dist[i] < dist[k] || (dist[i] == dist[k] && i < k)));
      } else if (cell[i] >= 0) {
        bool beaten = false;
        for (std::int64_t k = 0; k < 256; ++k)
          if (k != i && labels[k] == cell[i]) beaten = true;
        CHECK(beaten);
      }
    }
  }
  CHECK_THROWS_AS(gt_coarse_labels(Homography::identity(), 62, 64, 4), ShapeError);
}

TEST_CASE("pairs") {
  Homography h = random_homography(9, HomographyBounds{}, 64, 64);
  PairSample s = make_pair(9, h, 64, 64);
  WarpResult w = warp(s.a, h);
  CHECK(s.b.data == w.image.data);
  PairSample t = make_pair(9, HomographyBounds{}, 64, 64);
  for (int k = 0; k < 9; ++k) CHECK(t.h.m[k] == h.m[k]);
  PairSample n1 = make_pair(9, h, 64, 64, 0.05), n2 = make_pair(9, h, 64, 64, 0.05);
  CHECK(n1.b.data == n2.b.data);
  CHECK(n1.b.data != s.b.data);
  for (std::size_t k = 0; k < n1.b.data.size(); ++k)
    if (!n1.valid[k]) CHECK(n1.b.data[k] == 0.0);
}

TEST_CASE("pgm and ppm io") {
  const std::string bytes = std::string("P5\n# comment\n2 2\n255\n") + std::string("\x00\xff\x80\x40", 4);
  Image img = decode_pgm(bytes, "inline");
  CHECK(img.data[0] == 0.0);
  CHECK(img.data[1] == 1.0);
  CHECK(img.data[2] == 128.0 / 255.0);
  CHECK(img.data[3] == 64.0 / 255.0);
  try {
    decode_pgm("P6\n2 2\n255\n....", "wrong.pgm");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 0);
    CHECK(std::string(e.what()).find("wrong.pgm") != std::string::npos);
  }
  CHECK_THROWS_AS(decode_pgm("P5\n2 2\n255\n\x01\x02", "short"), ParseError);
  CHECK_THROWS_AS(decode_pgm("P5\n2 2\n65535\n", "deep"), ParseError);
  CHECK_THROWS_AS(decode_pgm("P5\nx 2\n255\n", "bad"), ParseError);
  CHECK_THROWS_AS(read_pgm("/nonexistent/a.pgm"), IoError);

  CHECK(quantize(0.0) == 0);
  CHECK(quantize(1.0) == 255);
  CHECK(quantize(0.5) == 128);   // 127.5 rounds up
  CHECK(quantize(-1.0) == 0);
  CHECK(quantize(2.0) == 255);

  Image g = gen_pattern(4, 32, 64);
  const std::string path = tmp_path("rt.pgm");
  write_pgm(path, g);
  Image r = read_pgm(path);
  CHECK(r.height == 32);
  CHECK(r.width == 64);
  for (std::size_t k = 0; k < g.data.size(); ++k) CHECK(r.data[k] == quantize(g.data[k]) / 255.0);
  write_pgm(path, r);
  CHECK(read_pgm(path).data == r.data);
  std::remove(path.c_str());

  RgbImage ov = render_overlay(g, g, {{1, 1, 5, 5, 1.0}, {10, 3, 20, 30, 0.0}});
  CHECK(ov.width == 128);
  CHECK(ov.height == 32);
  CHECK(ov.data.size() == 128 * 32 * 3);
  const std::string ppm = tmp_path("ov.ppm");
  write_ppm(ppm, ov);
  std::ifstream is(ppm, std::ios::binary);
  std::string magic;
  is >> magic;
  CHECK(magic == "P6");
  CHECK(std::filesystem::file_size(ppm) == std::string("P6\n128 32\n255\n").size() + 128 * 32 * 3);
  std::remove(ppm.c_str());
}

TEST_CASE("manifest") {
  std::vector<ManifestEntry> entries;
  for (std::uint64_t s = 0; s < 3; ++s) entries.push_back({1000000 + s, random_homography(s, HomographyBounds{}, 64, 64)});
  std::stringstream ss;
  write_manifest(ss, entries);
  std::string first;
  std::getline(ss, first);
  CHECK(std::count(first.begin(), first.end(), '\t') == 9);
  ss.seekg(0);
  auto back = read_manifest(ss);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].seed == entries[i].seed);
    for (int k = 0; k < 9; ++k) CHECK(back[i].h.m[k] == entries[i].h.m[k]);
  }
  std::stringstream bad("12\t1\t0\t0\n");
  CHECK_THROWS_AS(read_manifest(bad), ParseError);
  CHECK_THROWS_AS(load_manifest("/nonexistent/manifest.tsv"), IoError);
}
