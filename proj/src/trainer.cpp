#include "matchformer/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <ostream>

#include "matchformer/errors.hpp"

namespace matchformer {

Tensor coarse_loss(const Tensor& p, const std::vector<std::int64_t>& labels) {
  if (p.ndim() != 2 || static_cast<std::int64_t>(labels.size()) != p.dim(0))
    throw ShapeError("coarse_loss: labels do not match the probability matrix");
  std::vector<std::int64_t> flat;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= 0) {
      if (labels[i] >= p.dim(1)) throw ShapeError("coarse_loss: label out of range");
      flat.push_back(static_cast<std::int64_t>(i) * p.dim(1) + labels[i]);
    }
  if (flat.empty()) throw ConfigError("coarse_loss: no labeled cells, skip this sample");
  return neg(mean(log(take(p, flat), 1e-12)));
}

Tensor fine_loss(const Tensor& offsets, const std::vector<Point2>& targets) {
  if (offsets.ndim() != 2 || offsets.dim(1) != 2 || static_cast<std::size_t>(offsets.dim(0)) != targets.size())
    throw ShapeError("fine_loss: offsets must be [M, 2] with one target per row");
  std::vector<double> t;
  t.reserve(targets.size() * 2);
  for (const auto& p : targets) {
    t.push_back(p.x);
    t.push_back(p.y);
  }
  Tensor d = sub(offsets, Tensor::from(offsets.shape(), std::move(t)));
  return mul(sum(mul(d, d)), 1.0 / static_cast<double>(targets.size()));
}

void adam_step(const std::vector<Tensor>& params, AdamState& state, const AdamOptions& opt) {
  if (!(opt.lr > 0)) throw ConfigError("adam: learning rate must be positive");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam: state does not match the parameter list");
  ++state.t;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.numel()) throw ShapeError("adam: state shape mismatch");
    if (!p.has_grad()) {
      // Zero gradient: moments decay, and the update uses them as usual.
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] *= opt.beta1;
        v[i] *= opt.beta2;
      }
    } else {
      const auto g = p.grad();
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = opt.beta1 * m[i] + (1 - opt.beta1) * g[i];
        v[i] = opt.beta2 * v[i] + (1 - opt.beta2) * g[i] * g[i];
      }
    }
    auto d = p.mutable_data();
    for (std::size_t i = 0; i < m.size(); ++i) d[i] -= opt.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt.eps);
  }
}

CoarsePrecision coarse_precision(const std::vector<CoarseMatch>& matches, const Homography& h, std::int64_t coarse_wa,
                                 std::int64_t coarse_wb, int scale) {
  CoarsePrecision out;
  for (const auto& m : matches) {
    const Point2 gt = h.apply(cell_center(m.i, coarse_wa, scale));
    const Point2 pb = cell_center(m.j, coarse_wb, scale);
    ++out.total;
    if (std::fabs(gt.x - pb.x) <= scale && std::fabs(gt.y - pb.y) <= scale) ++out.correct;
  }
  return out;
}

std::uint64_t sample_seed(std::uint64_t seed, std::int64_t step, int item) {
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(step) * 1315423911ULL +
                    static_cast<std::uint64_t>(item) + 0xD1B54A32D192ED03ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  // Kept above 2^32 so training pairs never reuse a held-out seed.
  return ((z ^ (z >> 31)) & 0xFFFFFFFFFFFFULL) + (1ULL << 32);
}

PairLoss pair_losses(const FusionOutput& a, const FusionOutput& b, const Homography& h, const ModelConfig& cfg,
                     std::int64_t height, std::int64_t width, const MatchOptions& opt, bool with_fine) {
  PairLoss out;
  const int rc = cfg.coarse_scale();
  ScoreMatrix s = coarse_scores(a.coarse, b.coarse, opt.tau, opt.normalize);
  out.p = dual_softmax(s.s);
  out.labels = gt_coarse_labels(h, height, width, rc);
  out.coarse = coarse_loss(out.p, out.labels);
  if (!with_fine) return out;

  FineSpec spec;
  spec.window = opt.window;
  spec.coarse_scale = rc;
  spec.fine_scale = cfg.fine_scale();
  spec.coarse_wa = s.wa;
  spec.coarse_wb = s.wb;
  spec.temperature = opt.fine_temperature;
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  std::vector<Point2> targets;
  const double half = opt.window / 2;
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    const auto j = out.labels[i];
    if (j < 0) continue;
    const Point2 gt = pixel_to_grid(h.apply(cell_center(static_cast<std::int64_t>(i), s.wa, rc)), spec.fine_scale);
    const Point2 cb = pixel_to_grid(cell_center(j, s.wb, rc), spec.fine_scale);
    const Point2 t{gt.x - cb.x, gt.y - cb.y};
    if (std::fabs(t.x) > half || std::fabs(t.y) > half) continue;
    pairs.emplace_back(static_cast<std::int64_t>(i), j);
    targets.push_back(t);
  }
  if (pairs.empty()) return out;
  FineExpectation fe = fine_expectation(a.fine, b.fine, pairs, spec);
  out.fine = fine_loss(fe.offsets, targets);
  return out;
}

CoarsePrecision heldout_precision(const Model& model, const TrainConfig& cfg) {
  NoGradGuard no_grad;
  CoarsePrecision total;
  const int rc = model.config().coarse_scale();
  for (int k = 0; k < cfg.heldout_pairs; ++k) {
    const PairSample s = make_pair(cfg.heldout_seed + static_cast<std::uint64_t>(k), cfg.bounds, cfg.height,
                                   cfg.width, cfg.noise_sigma);
    const PairMatches pm = match_pair_detailed(to_tensor(s.a), to_tensor(s.b), model, cfg.match);
    const CoarsePrecision p = coarse_precision(pm.coarse.matches, s.h, pm.scores.wa, pm.scores.wb, rc);
    total.correct += p.correct;
    total.total += p.total;
  }
  return total;
}

TrainResult train_toy(Model& model, const TrainConfig& cfg, const StepCallback& on_step) {
  if (cfg.steps < 0 || cfg.batch <= 0) throw ConfigError("train: steps must be >= 0 and batch > 0");
  if (cfg.lambda_coarse < 0 || cfg.lambda_fine < 0 || (cfg.lambda_coarse == 0 && cfg.lambda_fine == 0))
    throw ConfigError("train: loss weights must be non-negative and not both zero");
  model.config().check_input(cfg.height, cfg.width);
  const auto params = model.params().tensors();
  const ModelConfig& mc = model.config();
  const int rc = mc.coarse_scale();
  AdamState adam;
  TrainResult result;
  std::deque<double> recent;

  for (int step = 0; step < cfg.steps; ++step) {
    double running = 0;
    for (double v : recent) running += v;
    running = recent.empty() ? 0.0 : running / static_cast<double>(recent.size());
    const bool fine_active = cfg.lambda_fine > 0 && (cfg.fine_gate < 0 || running > cfg.fine_gate);

    std::vector<PairSample> samples;
    for (int b = 0; b < cfg.batch; ++b)
      samples.push_back(make_pair(sample_seed(cfg.seed, step, b), cfg.bounds, cfg.height, cfg.width, cfg.noise_sigma));
    std::vector<const Image*> imgs;
    for (const auto& s : samples) imgs.push_back(&s.a);
    for (const auto& s : samples) imgs.push_back(&s.b);

    model.params().zero_grad();
    FusionOutput joint;
    try {
      joint = model.forward_joint(to_batch(imgs));
    } catch (const NumericalError& e) {
      throw NumericalError("train: step " + std::to_string(step) + ": " + e.what());
    }
    Tensor total;
    StepMetrics m;
    m.step = step;
    m.fine_active = fine_active;
    CoarsePrecision prec;
    int used = 0, fine_used = 0;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto n = static_cast<std::int64_t>(cfg.batch);
      FusionOutput fa{slice(joint.coarse, 0, b, b + 1), slice(joint.fine, 0, b, b + 1)};
      FusionOutput fb{slice(joint.coarse, 0, n + b, n + b + 1), slice(joint.fine, 0, n + b, n + b + 1)};
      PairLoss pl;
      try {
        pl = pair_losses(fa, fb, samples[b].h, mc, cfg.height, cfg.width, cfg.match, fine_active);
      } catch (const ConfigError&) {
        continue;  // nothing labeled in this pair
      } catch (const NumericalError& e) {
        throw NumericalError("train: step " + std::to_string(step) + ": " + e.what());
      }
      Tensor loss = mul(pl.coarse, cfg.lambda_coarse);
      m.loss_coarse += pl.coarse.item();
      if (pl.fine.defined()) {
        loss = add(loss, mul(pl.fine, cfg.lambda_fine));
        m.loss_fine += pl.fine.item();
        ++fine_used;
      }
      total = total.defined() ? add(total, loss) : loss;
      ++used;
      const auto sel = select_coarse(pl.p.detach(), cfg.match.theta);
      const auto p = coarse_precision(sel.matches, samples[b].h, joint.coarse.dim(3), joint.coarse.dim(3), rc);
      prec.correct += p.correct;
      prec.total += p.total;
    }
    if (used > 0) {
      m.loss_coarse /= used;
      if (fine_used > 0) m.loss_fine /= fine_used;
      total = mul(total, 1.0 / used);
      if (!std::isfinite(total.item()))
        throw NumericalError("train: non-finite loss at step " + std::to_string(step));
      total.backward();
      adam_step(params, adam, cfg.adam);
    }
    m.precision = prec.value();
    recent.push_back(m.precision);
    if (static_cast<int>(recent.size()) > cfg.gate_window) recent.pop_front();
    result.log.push_back(m);
    if (on_step) on_step(m);
  }
  result.heldout = heldout_precision(model, cfg);
  return result;
}

void write_metrics_csv(std::ostream& os, const std::vector<StepMetrics>& log) {
  os << "step,loss_coarse,loss_fine,precision\n";
  char buf[128];
  for (const auto& m : log) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.6f\n", m.step, m.loss_coarse, m.loss_fine, m.precision);
    os << buf;
  }
}

void save_metrics_csv(const std::string& path, const std::vector<StepMetrics>& log) {
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  write_metrics_csv(os, log);
  if (!os) throw IoError(path, "write failed");
}

}  // namespace matchformer
