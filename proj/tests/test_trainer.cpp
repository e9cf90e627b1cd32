#include <cmath>
#include <sstream>

#include "doctest.h"
#include "matchformer/errors.hpp"
#include "matchformer/gradcheck.hpp"
#include "matchformer/trainer.hpp"
#include "test_util.hpp"

using namespace matchformer;
using testutil::bit_equal;
using testutil::randn;

namespace {

TrainConfig quick(int steps) {
  TrainConfig c;
  c.steps = steps;
  c.heldout_pairs = 1;
  return c;
}

}  // namespace

TEST_CASE("coarse loss") {
  Tensor ones = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) ones.mutable_data()[i * 3 + (i + 1) % 3] = 1.0;
  CHECK(coarse_loss(ones, {1, 2, 0}).item() == 0.0);
  Tensor e = Tensor::full({3, 3}, std::exp(-1.0));
  CHECK(coarse_loss(e, {0, -1, 2}).item() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(coarse_loss(Tensor::zeros({2, 2}), {0, 1}).item() == doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(coarse_loss(e, {-1, -1, -1}), ConfigError);
  CHECK_THROWS_AS(coarse_loss(e, {0, 1}), ShapeError);

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor s = randn({6, 7}, seed, 2.0);
    FdOptions opt;
    opt.tol = 1e-3;
    FdReport r = fd_check([&] { return coarse_loss(dual_softmax(s), {3, -1, 0, 6, 2, 2}); }, {s}, opt);
    CHECK(r.passed);
  }
}

TEST_CASE("fine loss") {
  Tensor off = Tensor::from({2, 2}, {0.5, -1.0, 2.0, 0.25});
  CHECK(fine_loss(off, {{0.5, -1.0}, {2.0, 0.25}}).item() == 0.0);
  CHECK(fine_loss(off, {{-0.5, -1.0}, {1.0, 0.25}}).item() == 1.0);
  CHECK_THROWS_AS(fine_loss(off, {{0, 0}}), ShapeError);

  // Gradient reaches both fine maps through the windowed expectation.
  Tensor fa = randn({8, 8, 8}, 1, 1.0, true), fb = randn({8, 8, 8}, 2, 1.0, true);
  FineSpec spec{5, 4, 8, 16, 16, 0.01};
  FineExpectation fe = fine_expectation(fa, fb, {{17, 34}, {100, 90}, {255, 240}}, spec);
  fine_loss(fe.offsets, {{0.3, -0.2}, {1.0, 1.0}, {-1.5, 0.0}}).backward();
  double na = 0, nb = 0;
  for (double g : fa.grad()) na += g * g;
  for (double g : fb.grad()) nb += g * g;
  CHECK(na > 0.0);
  CHECK(nb > 0.0);
}

TEST_CASE("adam") {
  Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  AdamState st;
  x.zero_grad();
  adam_step({x}, st, AdamOptions{});
  CHECK(x.at(0) == 1.0);
  CHECK(x.at(1) == -2.0);

  Tensor y = Tensor::from({1}, {0.7}, true);
  AdamState sy;
  sum(y).backward();
  adam_step({y}, sy, AdamOptions{0.1, 0.9, 0.999, 1e-8});
  CHECK(y.at(0) == doctest::Approx(0.6).epsilon(1e-7));

  Tensor z = Tensor::from({1}, {1.0}, true);
  AdamState sz;
  int steps = 0;
  for (; steps < 500 && std::fabs(z.at(0)) >= 1e-3; ++steps) {
    z.zero_grad();
    sum(mul(z, z)).backward();
    adam_step({z}, sz, AdamOptions{0.05, 0.9, 0.999, 1e-8});
  }
  CHECK(std::fabs(z.at(0)) < 1e-3);
  CHECK(steps <= 500);

  AdamState bad;
  CHECK_THROWS_AS(adam_step({z}, bad, AdamOptions{0.0}), ConfigError);
  adam_step({z}, bad, AdamOptions{});
  CHECK_THROWS_AS(adam_step({z, y}, bad, AdamOptions{}), ShapeError);
}

TEST_CASE("coarse precision") {
  // Identity homography at scale 4 on a 4-wide grid.
  std::vector<CoarseMatch> m{{0, 0, 1}, {5, 6, 1}, {5, 7, 1}, {0, 10, 1}};
  CoarsePrecision p = coarse_precision(m, Homography::identity(), 4, 4, 4);
  CHECK(p.total == 4);
  CHECK(p.correct == 2);
  CHECK(p.value() == 0.5);
  CHECK(CoarsePrecision{}.value() == 0.0);
}

TEST_CASE("training plumbing") {
  ModelConfig cfg = make_toy_config(Variant::Lite, AttentionKind::SpatialReduction);
  SUBCASE("zero steps leave the initialization") {
    Model init(cfg, 0), trained(cfg, 0);
    TrainResult r = train_toy(trained, quick(0));
    CHECK(r.log.empty());
    for (std::size_t k = 0; k < init.params().items().size(); ++k)
      CHECK(bit_equal(init.params().items()[k].second, trained.params().items()[k].second));
  }
  SUBCASE("bit-reproducible") {
    Model a(cfg, 0), b(cfg, 0);
    TrainResult ra = train_toy(a, quick(3)), rb = train_toy(b, quick(3));
    for (int k = 0; k < 3; ++k) CHECK(ra.log[k].loss_coarse == rb.log[k].loss_coarse);
    for (std::size_t k = 0; k < a.params().items().size(); ++k)
      CHECK(bit_equal(a.params().items()[k].second, b.params().items()[k].second));
    CHECK(ra.heldout.correct == rb.heldout.correct);
  }
  SUBCASE("every parameter receives gradient within ten steps") {
    Model m(cfg, 0);
    TrainConfig tc = quick(10);
    tc.fine_gate = -1;
    std::vector<double> seen(m.params().items().size(), 0.0);
    const auto params = m.params().tensors();
    // The callback fires after the update; gradients of that step are still
    // attached to the parameters.
    train_toy(m, tc, [&](const StepMetrics& s) {
      CHECK(s.fine_active);
      for (std::size_t k = 0; k < params.size(); ++k)
        if (params[k].has_grad())
          for (double g : params[k].grad()) seen[k] += std::fabs(g);
    });
    for (std::size_t k = 0; k < seen.size(); ++k) {
      INFO(m.params().items()[k].first);
      CHECK(seen[k] > 0.0);
    }
  }
  SUBCASE("invalid settings") {
    Model m(cfg, 0);
    TrainConfig tc = quick(1);
    tc.lambda_coarse = 0;
    tc.lambda_fine = 0;
    CHECK_THROWS_AS(train_toy(m, tc), ConfigError);
    tc = quick(1);
    tc.adam.lr = -1;
    CHECK_THROWS_AS(train_toy(m, tc), ConfigError);
    tc = quick(1);
    tc.height = 48;
    CHECK_THROWS_AS(train_toy(m, tc), ShapeError);
  }
  SUBCASE("non-finite values abort with the step index") {
    Model m(cfg, 0);
    m.params().find("decoder.coarse_head.weight").mutable_data()[0] = NAN;
    try {
      train_toy(m, quick(2));
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
  }
}

TEST_CASE("sample seeds") {
  CHECK(sample_seed(0, 5, 0) == sample_seed(0, 5, 0));
  CHECK(sample_seed(0, 5, 0) != sample_seed(0, 6, 0));
  CHECK(sample_seed(0, 5, 0) != sample_seed(1, 5, 0));
  for (int s = 0; s < 5000; ++s) CHECK(sample_seed(0, s, s % 3) >= (1ULL << 32));
}

TEST_CASE("metrics csv") {
  std::vector<StepMetrics> log{{0, 7.5, 0.0, 0.0, false}, {1, 6.25, 0.125, 0.5, true}};
  std::stringstream ss;
  write_metrics_csv(ss, log);
  CHECK(ss.str() == "step,loss_coarse,loss_fine,precision\n0,7.5,0,0.000000\n1,6.25,0.125,0.500000\n");
}
