#include "matchformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "matchformer/errors.hpp"

namespace matchformer {

FdReport fd_check(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt,
                  const FdOptions& options) {
  if (!(options.h >= 1e-6 && options.h <= 1e-4))
    throw ConfigError("fd_check: step h must lie in [1e-6, 1e-4], got " + std::to_string(options.h));
  std::vector<Tensor> targets = wrt;
  std::vector<bool> prev_flags;
  for (auto& t : targets) {
    prev_flags.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = f();
  if (loss.numel() != 1) throw ShapeError("fd_check: function must be scalar-valued, got " + shape_str(loss.shape()));
  loss.backward();

  std::vector<std::vector<double>> analytic;
  for (auto& t : targets) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.numel(), 0.0);
  }

  FdReport rep;
  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    auto& t = targets[ti];
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords > 0 && coords.size() > options.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    auto data = t.mutable_data();
    for (std::size_t idx : coords) {
      const double orig = data[idx];
      data[idx] = orig + options.h;
      const double fp = f().item();
      data[idx] = orig - options.h;
      const double fm = f().item();
      data[idx] = orig;
      const double numeric = (fp - fm) / (2.0 * options.h);
      const double a = analytic[ti][idx];
      const double abs_err = std::fabs(a - numeric);
      const double rel = abs_err / std::max({std::fabs(a), std::fabs(numeric), options.floor});
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst = std::to_string(ti) + "[" + std::to_string(idx) + "]";
      }
      ++rep.checked;
    }
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    targets[i].zero_grad();
    targets[i].set_requires_grad(prev_flags[i]);
  }
  rep.passed = rep.max_rel_error < options.tol;
  return rep;
}

FdReport fd_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h, double tol) {
  FdOptions opt;
  opt.h = h;
  opt.tol = tol;
  return fd_check([&] { return f(x); }, {x}, opt);
}

}  // namespace matchformer
