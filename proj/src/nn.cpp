#include "matchformer/nn.hpp"

#include <cmath>

#include "matchformer/errors.hpp"

namespace matchformer {

Tensor ParamStore::add(std::string name, Tensor t) {
  for (const auto& [n, _] : items_)
    if (n == name) throw ConfigError("duplicate parameter name " + name);
  t.set_requires_grad(true);
  items_.emplace_back(std::move(name), t);
  return t;
}

Tensor ParamStore::find(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return t;
  throw ConfigError("no parameter named " + name);
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& [_, t] : items_) out.push_back(t);
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

Tensor Initializer::trunc_normal(Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) {
    double z;
    do {
      z = dist(rng_);
    } while (std::fabs(z) > 2.0);
    x = z * stddev;
  }
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor Initializer::normal(Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng_);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

Linear Linear::create(ParamStore& ps, const std::string& name, int in, int out, Initializer& init, bool with_bias) {
  Linear l;
  l.weight = ps.add(name + ".weight", init.trunc_normal({in, out}, 0.02));
  if (with_bias) l.bias = ps.add(name + ".bias", Tensor::zeros({out}));
  return l;
}

Tensor Conv::operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding, groups); }

Conv Conv::create(ParamStore& ps, const std::string& name, int in, int out, int kernel, int stride, int padding,
                  int groups, Initializer& init) {
  Conv c;
  const double fan_out = static_cast<double>(kernel * kernel * out) / groups;
  c.weight = ps.add(name + ".weight", init.normal({out, in / groups, kernel, kernel}, std::sqrt(2.0 / fan_out)));
  c.bias = ps.add(name + ".bias", Tensor::zeros({out}));
  c.stride = stride;
  c.padding = padding;
  c.groups = groups;
  return c;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gain, offset, 1e-6); }

LayerNorm LayerNorm::create(ParamStore& ps, const std::string& name, int channels) {
  LayerNorm n;
  n.gain = ps.add(name + ".gain", Tensor::full({channels}, 1.0));
  n.offset = ps.add(name + ".offset", Tensor::zeros({channels}));
  return n;
}

}  // namespace matchformer
