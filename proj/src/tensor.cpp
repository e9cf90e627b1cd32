#include "matchformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "gemm.hpp"
#include "matchformer/errors.hpp"
#include "matchformer/parallel.hpp"

namespace matchformer {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

namespace {

thread_local bool t_grad_enabled = true;
bool g_gradient_fault = false;

void validate_shape(const Shape& shape) {
  for (auto d : shape)
    if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
}

ImplPtr new_impl(Shape shape, std::vector<double> data) {
  validate_shape(shape);
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericalError(std::string(op) + ": produced a non-finite value");
}

using BackwardFn = std::function<void(const TensorImpl&)>;

// Wraps a forward result and records its backward rule when any input needs
// gradients.
Tensor make_op(const char* name, Shape shape, std::vector<double> data,
               std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  check_finite(data, name);
  auto impl = new_impl(std::move(shape), std::move(data));
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      auto node = std::make_shared<GradNode>();
      node->name = name;
      for (const Tensor* t : inputs)
        if (t->requires_grad()) node->inputs.push_back(t->impl_ptr());
      node->backward = std::move(fn);
      impl->requires_grad = true;
      impl->node = std::move(node);
    }
  }
  return Tensor(std::move(impl));
}

Tensor make_op_vec(const char* name, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, BackwardFn fn) {
  check_finite(data, name);
  auto impl = new_impl(std::move(shape), std::move(data));
  if (t_grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      auto node = std::make_shared<GradNode>();
      node->name = name;
      for (const auto& t : inputs)
        if (t.requires_grad()) node->inputs.push_back(t.impl_ptr());
      node->backward = std::move(fn);
      impl->requires_grad = true;
      impl->node = std::move(node);
    }
  }
  return Tensor(std::move(impl));
}

int norm_axis(int axis, int ndim) {
  const int a = axis < 0 ? axis + ndim : axis;
  if (a < 0 || a >= ndim)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(ndim));
  return a;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

namespace testing {
void set_gradient_fault(bool on) { g_gradient_fault = on; }
bool gradient_fault() { return g_gradient_fault; }
}  // namespace testing

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  validate_shape(shape);
  auto impl = new_impl(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  const auto n = shape_numel(shape);
  auto impl = new_impl(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  auto impl = new_impl(std::move(shape), std::move(values));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return impl_->shape;
}

std::int64_t Tensor::dim(int axis) const { return shape()[norm_axis(axis, ndim())]; }

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  require_defined(*this, "set_requires_grad");
  impl_->requires_grad = on;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return Tensor(new_impl(impl_->shape, impl_->data));
}

Tensor Tensor::clone() const {
  auto t = detach();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.requires_grad()) return tape;
  std::unordered_set<TensorImpl*> visited;
  // Iterative post-order DFS; emits each node after all of its inputs.
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root.impl(), 0);
  visited.insert(root.impl());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* gn = node->node.get();
    if (gn && next < gn->inputs.size()) {
      TensorImpl* child = gn->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    tape.order.push_back(node);
    stack.pop_back();
  }
  return tape;
}

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (numel() != 1)
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  if (!requires_grad()) throw Error("backward(): loss does not depend on any requires-grad tensor");
  Tape tape = Tape::record(*this);
  impl_->grad_buffer()[0] += 1.0;
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->node || t->grad.empty()) continue;
    t->node->backward(*t);
    // Interior gradients are not retained once propagated.
    if (t != impl_.get()) std::vector<double>().swap(t->grad);
  }
}

// ---------------------------------------------------------------- elementwise

namespace {

enum class Binary { Add, Sub, Mul, Div };

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const auto na = shape_numel(a), nb = shape_numel(b);
  auto is_suffix = [](const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (a == b) return a;
  if (nb == 1 && na >= 1) return a;
  if (na == 1) return b;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
}

Tensor binary(Binary kind, const Tensor& a, const Tensor& b) {
  static const char* names[] = {"add", "sub", "mul", "div"};
  const char* name = names[static_cast<int>(kind)];
  require_defined(a, name);
  require_defined(b, name);
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::size_t n = static_cast<std::size_t>(shape_numel(out_shape));
  const std::size_t na = a.numel(), nb = b.numel();
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(n);
  switch (kind) {
    case Binary::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[i % na] + bd[i % nb];
      break;
    case Binary::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[i % na] - bd[i % nb];
      break;
    case Binary::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[i % na] * bd[i % nb];
      break;
    case Binary::Div:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[i % na] / bd[i % nb];
      break;
  }
  auto pa = a.impl_ptr();
  auto pb = b.impl_ptr();
  return make_op(name, std::move(out_shape), std::move(out), {&a, &b},
                 [kind, pa, pb](const TensorImpl& o) {
                   const std::size_t n = o.data.size();
                   const std::size_t na = pa->data.size(), nb = pb->data.size();
                   const auto& g = o.grad;
                   if (pa->requires_grad) {
                     auto& ga = pa->grad_buffer();
                     switch (kind) {
                       case Binary::Add:
                       case Binary::Sub:
                         for (std::size_t i = 0; i < n; ++i) ga[i % na] += g[i];
                         break;
                       case Binary::Mul:
                         for (std::size_t i = 0; i < n; ++i) ga[i % na] += g[i] * pb->data[i % nb];
                         break;
                       case Binary::Div:
                         for (std::size_t i = 0; i < n; ++i) ga[i % na] += g[i] / pb->data[i % nb];
                         break;
                     }
                   }
                   if (pb->requires_grad) {
                     auto& gb = pb->grad_buffer();
                     switch (kind) {
                       case Binary::Add:
                         for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i];
                         break;
                       case Binary::Sub:
                         for (std::size_t i = 0; i < n; ++i) gb[i % nb] -= g[i];
                         break;
                       case Binary::Mul:
                         for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * pa->data[i % na];
                         break;
                       case Binary::Div:
                         for (std::size_t i = 0; i < n; ++i) {
                           const double bv = pb->data[i % nb];
                           gb[i % nb] -= g[i] * o.data[i] / bv;
                         }
                         break;
                     }
                   }
                 });
}

template <typename F, typename D>
Tensor unary(const char* name, const Tensor& a, F f, D dfdx) {
  require_defined(a, name);
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
  auto pa = a.impl_ptr();
  return make_op(name, a.shape(), std::move(out), {&a}, [pa, dfdx](const TensorImpl& o) {
    auto& ga = pa->grad_buffer();
    for (std::size_t i = 0; i < o.data.size(); ++i) ga[i] += o.grad[i] * dfdx(pa->data[i], o.data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(Binary::Div, a, b); }
Tensor add(const Tensor& a, double b) { return binary(Binary::Add, a, Tensor::scalar(b)); }
Tensor mul(const Tensor& a, double b) { return binary(Binary::Mul, a, Tensor::scalar(b)); }

Tensor neg(const Tensor& a) {
  return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y) * (g_gradient_fault ? 1.5 : 1.0); });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))); },
      [](double x, double) {
        const double u = kC * (x + kA * x * x * x);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * kA * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a, double floor) {
  return unary(
      "log", a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double x : a.data()) s += x;
  auto pa = a.impl_ptr();
  return make_op("sum", {1}, {s}, {&a}, [pa](const TensorImpl& o) {
    auto& ga = pa->grad_buffer();
    for (auto& g : ga) g += o.grad[0];
  });
}

Tensor mean(const Tensor& a) { return mul(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const auto m = static_cast<std::size_t>(a.dim(-2));
  const auto k = static_cast<std::size_t>(a.dim(-1));
  const auto n = static_cast<std::size_t>(b.dim(-1));
  if (static_cast<std::size_t>(b.dim(-2)) != k)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  const bool shared_b = b.ndim() == 2;
  if (!shared_b) {
    if (a.ndim() != b.ndim() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      throw ShapeError("matmul: batch extents differ, " + shape_str(a.shape()) + " @ " +
                       shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(static_cast<std::int64_t>(m));
  out_shape.push_back(static_cast<std::int64_t>(n));
  std::vector<double> out(batch * m * n);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  if (shared_b) {
    detail::gemm(batch * m, n, k, ad, bd, out.data(), false);
  } else {
    for (std::size_t s = 0; s < batch; ++s)
      detail::gemm(m, n, k, ad + s * m * k, bd + s * k * n, out.data() + s * m * n, false);
  }
  auto pa = a.impl_ptr();
  auto pb = b.impl_ptr();
  return make_op("matmul", std::move(out_shape), std::move(out), {&a, &b},
                 [pa, pb, m, n, k, batch, shared_b](const TensorImpl& o) {
                   const double* g = o.grad.data();
                   if (pa->requires_grad) {
                     // dA = dC B^T
                     auto& ga = pa->grad_buffer();
                     std::vector<double> bt(k * n);
                     if (shared_b) {
                       detail::transpose_copy(k, n, pb->data.data(), bt.data());
                       detail::gemm(batch * m, k, n, g, bt.data(), ga.data(), true);
                     } else {
                       for (std::size_t s = 0; s < batch; ++s) {
                         detail::transpose_copy(k, n, pb->data.data() + s * k * n, bt.data());
                         detail::gemm(m, k, n, g + s * m * n, bt.data(), ga.data() + s * m * k, true);
                       }
                     }
                   }
                   if (pb->requires_grad) {
                     // dB = A^T dC
                     auto& gb = pb->grad_buffer();
                     if (shared_b) {
                       std::vector<double> at(batch * m * k);
                       detail::transpose_copy(batch * m, k, pa->data.data(), at.data());
                       detail::gemm(k, n, batch * m, at.data(), g, gb.data(), true);
                     } else {
                       std::vector<double> at(m * k);
                       for (std::size_t s = 0; s < batch; ++s) {
                         detail::transpose_copy(m, k, pa->data.data() + s * m * k, at.data());
                         detail::gemm(k, n, m, at.data(), g + s * m * n, gb.data() + s * k * n, true);
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------- softmax

namespace {

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[i]);
  s.n = static_cast<std::size_t>(shape[axis]);
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= static_cast<std::size_t>(shape[i]);
  return s;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  require_defined(x, "softmax");
  const int ax = norm_axis(axis, x.ndim());
  const AxisSplit s = split_axis(x.shape(), ax);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = xd[base];
      for (std::size_t j = 1; j < s.n; ++j) mx = std::max(mx, xd[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double e = std::exp(xd[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= z;
    }
  auto px = x.impl_ptr();
  return make_op("softmax", x.shape(), std::move(out), {&x}, [px, s](const TensorImpl& o) {
    auto& gx = px->grad_buffer();
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = a * s.n * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t idx = base + j * s.inner;
          dot += o.grad[idx] * o.data[idx];
        }
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t idx = base + j * s.inner;
          gx[idx] += o.data[idx] * (o.grad[idx] - dot);
        }
      }
  });
}

// ---------------------------------------------------------------- conv2d

namespace {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, k, hout, wout, groups, cin_g, cout_g;
  int stride, pad;
};

// col[(c*k + ky)*k + kx, oy*wout + ox] for the channels [c0, c0 + cin_g).
void im2col(const ConvGeom& g, const double* x, std::size_t c0, double* col) {
  const std::size_t hw = g.hout * g.wout;
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    const double* xc = x + (c0 + c) * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const std::int64_t iy = static_cast<std::int64_t>(oy) * g.stride - g.pad + static_cast<std::int64_t>(ky);
          double* dst = row + oy * g.wout;
          if (iy < 0 || iy >= static_cast<std::int64_t>(g.h)) {
            std::fill(dst, dst + g.wout, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const std::int64_t ix = static_cast<std::int64_t>(ox) * g.stride - g.pad + static_cast<std::int64_t>(kx);
            dst[ox] = (ix < 0 || ix >= static_cast<std::int64_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
  }
}

void col2im(const ConvGeom& g, const double* col, std::size_t c0, double* dx) {
  const std::size_t hw = g.hout * g.wout;
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    double* xc = dx + (c0 + c) * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const std::int64_t iy = static_cast<std::int64_t>(oy) * g.stride - g.pad + static_cast<std::int64_t>(ky);
          if (iy < 0 || iy >= static_cast<std::int64_t>(g.h)) continue;
          double* dst = xc + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const std::int64_t ix = static_cast<std::int64_t>(ox) * g.stride - g.pad + static_cast<std::int64_t>(kx);
            if (ix >= 0 && ix < static_cast<std::int64_t>(g.w)) dst[ix] += row[oy * g.wout + ox];
          }
        }
      }
  }
}

void depthwise_forward(const ConvGeom& g, const double* x, const double* w, double* y) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.cin; ++c) {
      const double* xc = x + (b * g.cin + c) * g.h * g.w;
      const double* wc = w + c * g.k * g.k;
      double* yc = y + (b * g.cout + c) * g.hout * g.wout;
      for (std::size_t oy = 0; oy < g.hout; ++oy)
        for (std::size_t ox = 0; ox < g.wout; ++ox) {
          double s = 0.0;
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            const std::int64_t iy = static_cast<std::int64_t>(oy) * g.stride - g.pad + static_cast<std::int64_t>(ky);
            if (iy < 0 || iy >= static_cast<std::int64_t>(g.h)) continue;
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const std::int64_t ix = static_cast<std::int64_t>(ox) * g.stride - g.pad + static_cast<std::int64_t>(kx);
              if (ix < 0 || ix >= static_cast<std::int64_t>(g.w)) continue;
              s += xc[iy * g.w + ix] * wc[ky * g.k + kx];
            }
          }
          yc[oy * g.wout + ox] = s;
        }
    }
}

void depthwise_backward(const ConvGeom& g, const double* x, const double* w, const double* gy,
                        double* gx, double* gw) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.cin; ++c) {
      const double* xc = x + (b * g.cin + c) * g.h * g.w;
      const double* wc = w + c * g.k * g.k;
      const double* gyc = gy + (b * g.cout + c) * g.hout * g.wout;
      double* gxc = gx ? gx + (b * g.cin + c) * g.h * g.w : nullptr;
      double* gwc = gw ? gw + c * g.k * g.k : nullptr;
      for (std::size_t oy = 0; oy < g.hout; ++oy)
        for (std::size_t ox = 0; ox < g.wout; ++ox) {
          const double go = gyc[oy * g.wout + ox];
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            const std::int64_t iy = static_cast<std::int64_t>(oy) * g.stride - g.pad + static_cast<std::int64_t>(ky);
            if (iy < 0 || iy >= static_cast<std::int64_t>(g.h)) continue;
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const std::int64_t ix = static_cast<std::int64_t>(ox) * g.stride - g.pad + static_cast<std::int64_t>(kx);
              if (ix < 0 || ix >= static_cast<std::int64_t>(g.w)) continue;
              if (gxc) gxc[iy * g.w + ix] += go * wc[ky * g.k + kx];
              if (gwc) gwc[ky * g.k + kx] += go * xc[iy * g.w + ix];
            }
          }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
              int groups) {
  require_defined(x, "conv2d");
  require_defined(w, "conv2d");
  if (x.ndim() != 4 || w.ndim() != 4)
    throw ShapeError("conv2d: expected x[B,C,H,W] and w[Co,Ci/g,k,k], got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  if (stride <= 0 || padding < 0 || groups <= 0) throw ShapeError("conv2d: invalid stride/padding/groups");
  ConvGeom g{};
  g.batch = static_cast<std::size_t>(x.dim(0));
  g.cin = static_cast<std::size_t>(x.dim(1));
  g.h = static_cast<std::size_t>(x.dim(2));
  g.w = static_cast<std::size_t>(x.dim(3));
  g.cout = static_cast<std::size_t>(w.dim(0));
  g.k = static_cast<std::size_t>(w.dim(2));
  g.groups = static_cast<std::size_t>(groups);
  g.stride = stride;
  g.pad = padding;
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: kernel must be square");
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0)
    throw ShapeError("conv2d: channels (" + std::to_string(g.cin) + " in, " + std::to_string(g.cout) +
                     " out) not divisible by groups " + std::to_string(groups));
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (static_cast<std::size_t>(w.dim(1)) != g.cin_g)
    throw ShapeError("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels per group, input has " +
                     std::to_string(g.cin_g));
  const std::int64_t ho = (static_cast<std::int64_t>(g.h) + 2 * padding - static_cast<std::int64_t>(g.k)) / stride + 1;
  const std::int64_t wo = (static_cast<std::int64_t>(g.w) + 2 * padding - static_cast<std::int64_t>(g.k)) / stride + 1;
  if (static_cast<std::int64_t>(g.h) + 2 * padding < static_cast<std::int64_t>(g.k) ||
      static_cast<std::int64_t>(g.w) + 2 * padding < static_cast<std::int64_t>(g.k) || ho <= 0 || wo <= 0)
    throw ShapeError("conv2d: non-positive output extent for input " + shape_str(x.shape()));
  g.hout = static_cast<std::size_t>(ho);
  g.wout = static_cast<std::size_t>(wo);
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != g.cout) throw ShapeError("conv2d: bias length must equal C_out");

  const std::size_t hw = g.hout * g.wout;
  const std::size_t kk = g.cin_g * g.k * g.k;
  const bool depthwise = g.cin_g == 1 && g.cout_g == 1;
  const bool pointwise = g.k == 1 && stride == 1 && padding == 0 && g.groups == 1;
  std::vector<double> out(g.batch * g.cout * hw, 0.0);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  if (depthwise) {
    depthwise_forward(g, xd, wd, out.data());
  } else {
    std::vector<double> col(pointwise ? 0 : kk * hw);
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t gi = 0; gi < g.groups; ++gi) {
        const double* src;
        if (pointwise) {
          src = xd + b * g.cin * hw;
        } else {
          im2col(g, xd + b * g.cin * g.h * g.w, gi * g.cin_g, col.data());
          src = col.data();
        }
        detail::gemm(g.cout_g, hw, kk, wd + gi * g.cout_g * kk, src,
                     out.data() + (b * g.cout + gi * g.cout_g) * hw, false);
      }
  }
  if (has_bias) {
    const auto bd = bias.data();
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t c = 0; c < g.cout; ++c) {
        double* row = out.data() + (b * g.cout + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) row[i] += bd[c];
      }
  }
  Shape out_shape{static_cast<std::int64_t>(g.batch), static_cast<std::int64_t>(g.cout), ho, wo};
  auto px = x.impl_ptr();
  auto pw = w.impl_ptr();
  ImplPtr pbias = has_bias ? bias.impl_ptr() : nullptr;
  Tensor dummy;
  const Tensor& bref = has_bias ? bias : dummy;
  return make_op("conv2d", std::move(out_shape), std::move(out), {&x, &w, &bref},
                 [px, pw, pbias, g, hw, kk, depthwise, pointwise](const TensorImpl& o) {
                   const double* gy = o.grad.data();
                   double* gx = px->requires_grad ? px->grad_buffer().data() : nullptr;
                   double* gw = pw->requires_grad ? pw->grad_buffer().data() : nullptr;
                   if (pbias && pbias->requires_grad) {
                     auto& gb = pbias->grad_buffer();
                     for (std::size_t b = 0; b < g.batch; ++b)
                       for (std::size_t c = 0; c < g.cout; ++c) {
                         const double* row = gy + (b * g.cout + c) * hw;
                         double s = 0.0;
                         for (std::size_t i = 0; i < hw; ++i) s += row[i];
                         gb[c] += s;
                       }
                   }
                   if (depthwise) {
                     depthwise_backward(g, px->data.data(), pw->data.data(), gy, gx, gw);
                     return;
                   }
                   std::vector<double> col(pointwise ? 0 : kk * hw);
                   std::vector<double> colt(kk * hw);
                   std::vector<double> wt(kk * g.cout_g);
                   std::vector<double> dcol(kk * hw);
                   for (std::size_t b = 0; b < g.batch; ++b)
                     for (std::size_t gi = 0; gi < g.groups; ++gi) {
                       const double* gyg = gy + (b * g.cout + gi * g.cout_g) * hw;
                       if (gw) {
                         const double* src;
                         if (pointwise) {
                           src = px->data.data() + b * g.cin * hw;
                         } else {
                           im2col(g, px->data.data() + b * g.cin * g.h * g.w, gi * g.cin_g, col.data());
                           src = col.data();
                         }
                         detail::transpose_copy(kk, hw, src, colt.data());
                         detail::gemm(g.cout_g, kk, hw, gyg, colt.data(), gw + gi * g.cout_g * kk, true);
                       }
                       if (gx) {
                         detail::transpose_copy(g.cout_g, kk, pw->data.data() + gi * g.cout_g * kk, wt.data());
                         if (pointwise) {
                           detail::gemm(kk, hw, g.cout_g, wt.data(), gyg, gx + b * g.cin * hw, true);
                         } else {
                           detail::gemm(kk, hw, g.cout_g, wt.data(), gyg, dcol.data(), false);
                           col2im(g, dcol.data(), gi * g.cin_g, gx + b * g.cin * g.h * g.w);
                         }
                       }
                     }
                 });
}

// ---------------------------------------------------------------- layer norm

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps) {
  require_defined(x, "layer_norm");
  if (eps <= 0) throw ShapeError("layer_norm: eps must be positive");
  const std::size_t c = static_cast<std::size_t>(x.dim(-1));
  if (gain.numel() != c || offset.numel() != c)
    throw ShapeError("layer_norm: gain/offset must have " + std::to_string(c) + " entries");
  const std::size_t rows = x.numel() / c;
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto od = offset.data();
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gd[j] + od[j];
    }
  }
  auto px = x.impl_ptr();
  auto pg = gain.impl_ptr();
  auto po = offset.impl_ptr();
  return make_op("layer_norm", x.shape(), std::move(out), {&x, &gain, &offset},
                 [px, pg, po, xhat, inv_std, rows, c](const TensorImpl& o) {
                   const auto& gy = o.grad;
                   if (pg->requires_grad) {
                     auto& gg = pg->grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < c; ++j) gg[j] += gy[r * c + j] * (*xhat)[r * c + j];
                   }
                   if (po->requires_grad) {
                     auto& go = po->grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < c; ++j) go[j] += gy[r * c + j];
                   }
                   if (px->requires_grad) {
                     auto& gx = px->grad_buffer();
                     const double inv_c = 1.0 / static_cast<double>(c);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double m1 = 0.0, m2 = 0.0;
                       for (std::size_t j = 0; j < c; ++j) {
                         const double dh = gy[r * c + j] * pg->data[j];
                         m1 += dh;
                         m2 += dh * (*xhat)[r * c + j];
                       }
                       m1 *= inv_c;
                       m2 *= inv_c;
                       for (std::size_t j = 0; j < c; ++j) {
                         const double dh = gy[r * c + j] * pg->data[j];
                         gx[r * c + j] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * c + j] * m2);
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------- structural

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(x.numel()))
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  auto px = x.impl_ptr();
  return make_op("reshape", std::move(shape), std::move(out), {&x}, [px](const TensorImpl& o) {
    auto& gx = px->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  require_defined(x, "permute");
  const int nd = x.ndim();
  if (static_cast<int>(perm.size()) != nd) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(nd, false);
  for (int p : perm) {
    if (p < 0 || p >= nd || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  const Shape& in = x.shape();
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = in[perm[i]];
  std::vector<std::size_t> in_stride(nd, 1);
  for (int i = nd - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * static_cast<std::size_t>(in[i + 1]);
  // Strides of the input, reordered to walk the output in row-major order.
  std::vector<std::size_t> src_stride(nd);
  for (int i = 0; i < nd; ++i) src_stride[i] = in_stride[perm[i]];
  const std::size_t n = x.numel();
  auto index_map = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<std::int64_t> idx(nd, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
      (*index_map)[o] = src;
      for (int d = nd - 1; d >= 0; --d) {
        ++idx[d];
        src += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        src -= src_stride[d] * static_cast<std::size_t>(out_shape[d]);
        idx[d] = 0;
      }
    }
  }
  const auto xd = x.data();
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = xd[(*index_map)[o]];
  auto px = x.impl_ptr();
  return make_op("permute", std::move(out_shape), std::move(out), {&x}, [px, index_map](const TensorImpl& o) {
    auto& gx = px->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[(*index_map)[i]] += o.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  const int nd = x.ndim();
  if (nd < 2) throw ShapeError("transpose: rank must be >= 2");
  std::vector<int> perm(nd);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[nd - 1], perm[nd - 2]);
  return permute(x, perm);
}

Tensor slice(const Tensor& x, int axis, std::int64_t begin, std::int64_t end) {
  require_defined(x, "slice");
  const int ax = norm_axis(axis, x.ndim());
  const std::int64_t len = x.shape()[ax];
  if (begin < 0 || end > len || begin >= end)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for extent " + std::to_string(len));
  const AxisSplit s = split_axis(x.shape(), ax);
  const std::size_t m = static_cast<std::size_t>(end - begin);
  Shape out_shape = x.shape();
  out_shape[ax] = static_cast<std::int64_t>(m);
  const auto xd = x.data();
  std::vector<double> out(s.outer * m * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xd.data() + (o * s.n + static_cast<std::size_t>(begin)) * s.inner, m * s.inner,
                out.data() + o * m * s.inner);
  auto px = x.impl_ptr();
  const auto b0 = static_cast<std::size_t>(begin);
  return make_op("slice", std::move(out_shape), std::move(out), {&x}, [px, s, m, b0](const TensorImpl& o) {
    auto& gx = px->grad_buffer();
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t i = 0; i < m * s.inner; ++i) gx[(a * s.n + b0) * s.inner + i] += o.grad[a * m * s.inner + i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const int ax = norm_axis(axis, parts[0].ndim());
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != parts[0].ndim()) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < p.ndim(); ++d)
      if (d != ax && p.shape()[d] != out_shape[d])
        throw ShapeError("concat: extent mismatch " + shape_str(p.shape()) + " vs " + shape_str(out_shape));
    total += p.shape()[ax];
  }
  out_shape[ax] = total;
  const AxisSplit so = split_axis(out_shape, ax);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t len = static_cast<std::size_t>(p.shape()[ax]);
    const auto pd = p.data();
    for (std::size_t o = 0; o < so.outer; ++o)
      std::copy_n(pd.data() + o * len * so.inner, len * so.inner, out.data() + (o * so.n + off) * so.inner);
    offsets.push_back(off);
    off += len;
  }
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl_ptr());
  return make_op_vec("concat", std::move(out_shape), std::move(out), parts,
                     [impls, offsets, so, ax](const TensorImpl& o) {
                       for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                         auto& p = impls[pi];
                         if (!p->requires_grad) continue;
                         auto& gp = p->grad_buffer();
                         const std::size_t len = static_cast<std::size_t>(p->shape[ax]);
                         for (std::size_t a = 0; a < so.outer; ++a)
                           for (std::size_t i = 0; i < len * so.inner; ++i)
                             gp[a * len * so.inner + i] += o.grad[(a * so.n + offsets[pi]) * so.inner + i];
                       }
                     });
}

namespace {

struct LerpTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<LerpTap> upsample_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear2x(const Tensor& x) {
  require_defined(x, "upsample_bilinear2x");
  if (x.ndim() != 4) throw ShapeError("upsample_bilinear2x: expected [B,C,H,W]");
  const std::size_t planes = static_cast<std::size_t>(x.dim(0) * x.dim(1));
  const std::size_t h = static_cast<std::size_t>(x.dim(2)), w = static_cast<std::size_t>(x.dim(3));
  const std::size_t ho = 2 * h, wo = 2 * w;
  auto ty = std::make_shared<std::vector<LerpTap>>(upsample_taps(h, ho));
  auto tx = std::make_shared<std::vector<LerpTap>>(upsample_taps(w, wo));
  const auto xd = x.data();
  std::vector<double> out(planes * ho * wo);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xd.data() + p * h * w;
    double* dst = out.data() + p * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const auto& a = (*ty)[oy];
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto& b = (*tx)[ox];
        const double top = src[a.i0 * w + b.i0] * (1 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
        const double bot = src[a.i1 * w + b.i0] * (1 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
        dst[oy * wo + ox] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  Shape out_shape{x.dim(0), x.dim(1), static_cast<std::int64_t>(ho), static_cast<std::int64_t>(wo)};
  auto px = x.impl_ptr();
  return make_op("upsample_bilinear2x", std::move(out_shape), std::move(out), {&x},
                 [px, ty, tx, planes, h, w, ho, wo](const TensorImpl& o) {
                   auto& gx = px->grad_buffer();
                   for (std::size_t p = 0; p < planes; ++p) {
                     const double* g = o.grad.data() + p * ho * wo;
                     double* dst = gx.data() + p * h * w;
                     for (std::size_t oy = 0; oy < ho; ++oy) {
                       const auto& a = (*ty)[oy];
                       for (std::size_t ox = 0; ox < wo; ++ox) {
                         const auto& b = (*tx)[ox];
                         const double gv = g[oy * wo + ox];
                         dst[a.i0 * w + b.i0] += gv * (1 - a.w1) * (1 - b.w1);
                         dst[a.i0 * w + b.i1] += gv * (1 - a.w1) * b.w1;
                         dst[a.i1 * w + b.i0] += gv * a.w1 * (1 - b.w1);
                         dst[a.i1 * w + b.i1] += gv * a.w1 * b.w1;
                       }
                     }
                   }
                 });
}

Tensor pad_replicate(const Tensor& x, int pad) {
  require_defined(x, "pad_replicate");
  if (x.ndim() != 4) throw ShapeError("pad_replicate: expected [B,C,H,W]");
  if (pad < 0) throw ShapeError("pad_replicate: negative pad");
  const std::size_t planes = static_cast<std::size_t>(x.dim(0) * x.dim(1));
  const std::int64_t h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = h + 2 * pad, wo = w + 2 * pad;
  auto src_index = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(ho * wo));
  for (std::int64_t y = 0; y < ho; ++y)
    for (std::int64_t xx = 0; xx < wo; ++xx) {
      const std::int64_t sy = std::clamp<std::int64_t>(y - pad, 0, h - 1);
      const std::int64_t sx = std::clamp<std::int64_t>(xx - pad, 0, w - 1);
      (*src_index)[static_cast<std::size_t>(y * wo + xx)] = static_cast<std::size_t>(sy * w + sx);
    }
  const auto xd = x.data();
  const std::size_t in_plane = static_cast<std::size_t>(h * w), out_plane = static_cast<std::size_t>(ho * wo);
  std::vector<double> out(planes * out_plane);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < out_plane; ++i) out[p * out_plane + i] = xd[p * in_plane + (*src_index)[i]];
  auto px = x.impl_ptr();
  return make_op("pad_replicate", {x.dim(0), x.dim(1), ho, wo}, std::move(out), {&x},
                 [px, src_index, planes, in_plane, out_plane](const TensorImpl& o) {
                   auto& gx = px->grad_buffer();
                   for (std::size_t p = 0; p < planes; ++p)
                     for (std::size_t i = 0; i < out_plane; ++i)
                       gx[p * in_plane + (*src_index)[i]] += o.grad[p * out_plane + i];
                 });
}

Tensor l2_normalize(const Tensor& x) {
  require_defined(x, "l2_normalize");
  const std::size_t c = static_cast<std::size_t>(x.dim(-1));
  const std::size_t rows = x.numel() / c;
  const auto xd = x.data();
  auto norms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += xd[r * c + j] * xd[r * c + j];
    const double nrm = std::sqrt(s);
    (*norms)[r] = nrm;
    if (nrm > 0)
      for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xd[r * c + j] / nrm;
  }
  auto px = x.impl_ptr();
  return make_op("l2_normalize", x.shape(), std::move(out), {&x}, [px, norms, rows, c](const TensorImpl& o) {
    auto& gx = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double nrm = (*norms)[r];
      if (nrm == 0) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += o.grad[r * c + j] * o.data[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += (o.grad[r * c + j] - o.data[r * c + j] * dot) / nrm;
    }
  });
}

Tensor take(const Tensor& x, const std::vector<std::int64_t>& indices) {
  require_defined(x, "take");
  if (indices.empty()) throw ShapeError("take: empty index list");
  const auto xd = x.data();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= xd.size())
      throw ShapeError("take: index " + std::to_string(indices[i]) + " out of range");
    out[i] = xd[static_cast<std::size_t>(indices[i])];
  }
  auto px = x.impl_ptr();
  return make_op("take", {static_cast<std::int64_t>(indices.size())}, std::move(out), {&x},
                 [px, indices](const TensorImpl& o) {
                   auto& gx = px->grad_buffer();
                   for (std::size_t i = 0; i < indices.size(); ++i) gx[static_cast<std::size_t>(indices[i])] += o.grad[i];
                 });
}

Tensor sample_bilinear(const Tensor& map, const std::vector<Point2>& points) {
  require_defined(map, "sample_bilinear");
  if (map.ndim() != 3) throw ShapeError("sample_bilinear: expected [C,H,W]");
  if (points.empty()) throw ShapeError("sample_bilinear: no points");
  const std::size_t c = static_cast<std::size_t>(map.dim(0));
  const std::size_t h = static_cast<std::size_t>(map.dim(1)), w = static_cast<std::size_t>(map.dim(2));
  struct Tap {
    std::size_t idx[4];
    double wt[4];
  };
  auto taps = std::make_shared<std::vector<Tap>>(points.size());
  for (std::size_t p = 0; p < points.size(); ++p) {
    const double y = std::clamp(points[p].y, 0.0, static_cast<double>(h - 1));
    const double x = std::clamp(points[p].x, 0.0, static_cast<double>(w - 1));
    const auto y0 = std::min(static_cast<std::size_t>(std::floor(y)), h - 1);
    const auto x0 = std::min(static_cast<std::size_t>(std::floor(x)), w - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
    (*taps)[p] = {{y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1},
                  {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx}};
  }
  const auto md = map.data();
  const std::size_t plane = h * w;
  std::vector<double> out(points.size() * c);
  for (std::size_t p = 0; p < points.size(); ++p) {
    const Tap& t = (*taps)[p];
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* m = md.data() + ch * plane;
      out[p * c + ch] = m[t.idx[0]] * t.wt[0] + m[t.idx[1]] * t.wt[1] + m[t.idx[2]] * t.wt[2] + m[t.idx[3]] * t.wt[3];
    }
  }
  auto pm = map.impl_ptr();
  return make_op("sample_bilinear", {static_cast<std::int64_t>(points.size()), static_cast<std::int64_t>(c)},
                 std::move(out), {&map}, [pm, taps, c, plane](const TensorImpl& o) {
                   auto& gm = pm->grad_buffer();
                   for (std::size_t p = 0; p < taps->size(); ++p) {
                     const Tap& t = (*taps)[p];
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const double g = o.grad[p * c + ch];
                       double* m = gm.data() + ch * plane;
                       for (int q = 0; q < 4; ++q) m[t.idx[q]] += g * t.wt[q];
                     }
                   }
                 });
}

Tensor map_to_seq(const Tensor& x) {
  if (x.ndim() != 4) throw ShapeError("map_to_seq: expected [B,C,H,W], got " + shape_str(x.shape()));
  return transpose(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}));
}

Tensor seq_to_map(const Tensor& x, std::int64_t h, std::int64_t w) {
  if (x.ndim() != 3 || x.dim(1) != h * w)
    throw ShapeError("seq_to_map: sequence " + shape_str(x.shape()) + " does not hold a " + std::to_string(h) +
                     "x" + std::to_string(w) + " map");
  return reshape(transpose(x), {x.dim(0), x.dim(2), h, w});
}

// ---------------------------------------------------------------- snapshots

void write_snapshot(std::ostream& os, const Tensor& t) {
  os << "shape:";
  for (auto d : t.shape()) os << ' ' << d;
  os << '\n';
  char buf[40];
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", d[i]);
    os << buf << ((i + 1) % 8 == 0 || i + 1 == d.size() ? '\n' : ' ');
  }
}

Tensor read_snapshot(std::istream& is, const std::string& source) {
  std::string line;
  const auto start = static_cast<std::int64_t>(is.tellg());
  if (!std::getline(is, line)) throw ParseError(source, start < 0 ? 0 : start, "missing shape header");
  if (line.rfind("shape:", 0) != 0) throw ParseError(source, start < 0 ? 0 : start, "expected 'shape:' header");
  std::istringstream hs(line.substr(6));
  Shape shape;
  std::int64_t dim;
  while (hs >> dim) shape.push_back(dim);
  if (shape.empty()) throw ParseError(source, start < 0 ? 0 : start, "empty shape");
  for (auto e : shape)
    if (e <= 0) throw ParseError(source, start < 0 ? 0 : start, "non-positive extent");
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::string tok;
    if (!(is >> tok)) {
      const auto pos = static_cast<std::int64_t>(is.tellg());
      throw ParseError(source, pos < 0 ? 0 : pos, "truncated values: expected " + std::to_string(n));
    }
    try {
      std::size_t used = 0;
      values[i] = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      const auto pos = static_cast<std::int64_t>(is.tellg());
      throw ParseError(source, pos < 0 ? 0 : pos, "bad number '" + tok + "'");
    }
  }
  // Consume the remainder of the last value line.
  std::getline(is, line);
  return Tensor::from(std::move(shape), std::move(values));
}

void save_snapshot(const std::string& path, const Tensor& t) {
  std::ofstream os(path);
  if (!os) throw IoError(path, "cannot open for writing");
  write_snapshot(os, t);
  if (!os) throw IoError(path, "write failed");
}

Tensor load_snapshot(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path, "cannot open for reading");
  return read_snapshot(is, path);
}

}  // namespace matchformer
