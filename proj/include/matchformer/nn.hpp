#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "matchformer/tensor.hpp"

namespace matchformer {

/// Ordered, named parameter list. Names follow `stage.block.op.param`
/// (e.g. `encoder.stage2.block3.attn.q.weight`); order is construction order
/// and is the checkpoint order.
class ParamStore {
 public:
  Tensor add(std::string name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  Tensor find(const std::string& name) const;
  std::vector<Tensor> tensors() const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

/// Deterministic initializers.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  /// Normal(0, std) resampled outside +-2 std.
  Tensor trunc_normal(Shape shape, double stddev);
  Tensor normal(Shape shape, double stddev);
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

/// y = x W + b, with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;  // may be undefined
  Tensor operator()(const Tensor& x) const;
  static Linear create(ParamStore& ps, const std::string& name, int in, int out, Initializer& init,
                       bool with_bias = true);
};

struct Conv {
  Tensor weight;  // [out, in / groups, k, k]
  Tensor bias;
  int stride = 1;
  int padding = 0;
  int groups = 1;
  Tensor operator()(const Tensor& x) const;
  /// Normal(0, sqrt(2 / fan_out)) weights, zero bias.
  static Conv create(ParamStore& ps, const std::string& name, int in, int out, int kernel, int stride,
                     int padding, int groups, Initializer& init);
};

struct LayerNorm {
  Tensor gain;
  Tensor offset;
  Tensor operator()(const Tensor& x) const;
  static LayerNorm create(ParamStore& ps, const std::string& name, int channels);
};

}  // namespace matchformer
