#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <stdexcept>

#include "matchformer/errors.hpp"
#include "matchformer/evalkit.hpp"
#include "matchformer/trainer.hpp"

namespace py = pybind11;
using namespace matchformer;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Image image_from(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D grayscale array");
  Image img(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  return img;
}

Array array_from(const Image& img) {
  Array out({img.height, img.width});
  std::copy(img.data.begin(), img.data.end(), out.mutable_data());
  return out;
}

Array matches_array(const MatchSet& m) {
  Array out({static_cast<py::ssize_t>(m.size()), py::ssize_t{5}});
  double* p = out.mutable_data();
  for (const auto& x : m) {
    *p++ = x.x1;
    *p++ = x.y1;
    *p++ = x.x2;
    *p++ = x.y2;
    *p++ = x.conf;
  }
  return out;
}

MatchSet matches_from(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) < 4) throw ShapeError("expected an [M, 4] or [M, 5] match array");
  MatchSet m;
  auto r = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    m.push_back({r(i, 0), r(i, 1), r(i, 2), r(i, 3), a.shape(1) > 4 ? r(i, 4) : 1.0});
  return m;
}

Homography homography_from(const Array& a) {
  if (a.size() != 9) throw ShapeError("expected a 3x3 homography");
  Homography h;
  std::copy(a.data(), a.data() + 9, h.m.begin());
  return h;
}

Array homography_array(const Homography& h) {
  Array out({3, 3});
  std::copy(h.m.begin(), h.m.end(), out.mutable_data());
  return out;
}

ModelConfig config_for(const std::string& variant, const std::string& attention, bool toy) {
  const Variant v = parse_variant(variant);
  const AttentionKind a = parse_attention(attention);
  return toy ? make_toy_config(v, a) : make_config(v, a);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Desk-scale MatchFormer core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<DegenerateError>(m, "DegenerateError", PyExc_ArithmeticError);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def_property_readonly("coarse_scale", &ModelConfig::coarse_scale)
      .def_property_readonly("fine_scale", &ModelConfig::fine_scale)
      .def_readonly("coarse_channels", &ModelConfig::coarse_channels)
      .def_readonly("fine_channels", &ModelConfig::fine_channels)
      .def("key_values", [](const ModelConfig& c) { return config_key_values(c); })
      .def("__repr__", [](const ModelConfig& c) { return describe(c); });

  m.def("make_config", &config_for, py::arg("variant") = "lite", py::arg("attention") = "sea",
        py::arg("toy") = false);
  m.def("config_from_text", [](const std::string& text) { return model_config_from(parse_key_values(text, "<text>")); },
        "Model config from `key = value` text");

  m.def(
      "pyramid_shapes",
      [](const ModelConfig& c, std::int64_t h, std::int64_t w) {
        std::vector<Shape> out;
        for (const auto& s : pyramid_shapes(c, 1, h, w)) out.push_back(s);
        return out;
      },
      py::arg("config"), py::arg("height"), py::arg("width"));

  py::class_<Model, std::shared_ptr<Model>>(m, "Model")
      .def(py::init<const ModelConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_count", [](const Model& x) { return x.params().scalar_count(); })
      .def("save", [](const Model& x, const std::string& path) { save_checkpoint(path, x); })
      .def_static("load", [](const std::string& path) { return std::make_shared<Model>(load_checkpoint(path)); });

  m.def(
      "match",
      [](const Model& model, const Array& a, const Array& b, double tau, double theta, int window) {
        MatchOptions o;
        o.tau = tau;
        o.theta = theta;
        o.window = window;
        MatchSet out;
        {
          const Image ia = image_from(a), ib = image_from(b);
          py::gil_scoped_release release;
          out = match_pair(to_tensor(ia), to_tensor(ib), model, o);
        }
        return matches_array(out);
      },
      py::arg("model"), py::arg("image_a"), py::arg("image_b"), py::arg("tau") = 0.1, py::arg("theta") = 0.2,
      py::arg("window") = 5, "Matches as an [M, 5] array of x1, y1, x2, y2, confidence");

  m.def(
      "train",
      [](Model& model, int steps, double lr, std::uint64_t seed, int heldout_pairs) {
        TrainConfig tc;
        tc.steps = steps;
        tc.adam.lr = lr;
        tc.seed = seed;
        tc.heldout_pairs = heldout_pairs;
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train_toy(model, tc);
        }
        py::list log;
        for (const auto& s : r.log)
          log.append(py::dict(py::arg("step") = s.step, py::arg("loss_coarse") = s.loss_coarse,
                              py::arg("loss_fine") = s.loss_fine, py::arg("precision") = s.precision));
        return py::make_tuple(log, r.heldout.value());
      },
      py::arg("model"), py::arg("steps"), py::arg("lr") = 3e-4, py::arg("seed") = 0, py::arg("heldout_pairs") = 16,
      "Toy training on synthetic 64x64 pairs; returns (per-step log, held-out precision)");

  m.def(
      "make_pair",
      [](std::uint64_t seed, std::int64_t h, std::int64_t w) {
        const PairSample p = make_pair(seed, HomographyBounds{}, h, w);
        return py::make_tuple(array_from(p.a), array_from(p.b), homography_array(p.h));
      },
      py::arg("seed"), py::arg("height") = 64, py::arg("width") = 64);

  m.def(
      "ransac",
      [](const Array& matches, double threshold, int iterations, std::uint64_t seed) {
        RansacOptions o;
        o.threshold = threshold;
        o.iterations = iterations;
        o.seed = seed;
        const RansacResult r = ransac_homography(to_correspondences(matches_from(matches)), o);
        return py::make_tuple(homography_array(r.h), r.inliers);
      },
      py::arg("matches"), py::arg("threshold") = 2.0, py::arg("iterations") = 2000, py::arg("seed") = 0);
  m.def(
      "corner_error",
      [](const Array& est, const Array& gt, std::int64_t w, std::int64_t h) {
        return corner_error(homography_from(est), homography_from(gt), w, h);
      },
      py::arg("estimate"), py::arg("truth"), py::arg("width"), py::arg("height"));
  m.def(
      "mma",
      [](const Array& matches, const Array& gt) { return mma(matches_from(matches), homography_from(gt)).accuracy; },
      py::arg("matches"), py::arg("truth"), "Matching accuracy at 1..10 px");

  m.def(
      "flops",
      [](const ModelConfig& c, std::int64_t h, std::int64_t w, bool include_matcher) {
        const FlopsBreakdown f = flops_count(c, h, w, include_matcher);
        py::dict by_kind;
        for (const char* k : {"conv", "linear", "attention", "matcher"}) by_kind[k] = f.total(k);
        return py::make_tuple(f.total(), by_kind);
      },
      py::arg("config"), py::arg("height") = 480, py::arg("width") = 640, py::arg("include_matcher") = false);
}
