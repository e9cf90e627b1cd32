#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace matchformer {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

/// One recorded differentiable operation. `backward` reads the output's data
/// and gradient and accumulates into the gradients of `inputs`.
struct GradNode {
  const char* name = "";
  std::vector<ImplPtr> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::shared_ptr<GradNode> node;

  /// Gradient storage, zero-initialized on first access.
  std::vector<double>& grad_buffer();
};

/// Dense row-major float64 array with optional reverse-mode gradient.
///
/// A Tensor is a cheap handle: copies share storage and graph position, the
/// same way framework tensors behave. Use `clone()` for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(ImplPtr impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;  // negative axes count from the back
  int ndim() const { return static_cast<int>(shape().size()); }
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double at(std::size_t flat) const { return data()[flat]; }
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Backpropagates from this scalar into every requires-grad leaf.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  TensorImpl* impl() const noexcept { return impl_.get(); }
  const ImplPtr& impl_ptr() const noexcept { return impl_; }

 private:
  ImplPtr impl_;
};

/// Reverse-accumulation order for a scalar root: every tensor reachable
/// through requires-grad links, parents before children.
struct Tape {
  std::vector<TensorImpl*> order;

  static Tape record(const Tensor& root);
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace testing {
/// Scales the sigmoid backward rule by 1.5 while enabled (negative control for
/// gradient checks).
void set_gradient_fault(bool on);
bool gradient_fault();
}  // namespace testing

// Elementwise. Second operands broadcast when they are scalars or when their
// shape is a trailing suffix of the first's (or vice versa).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor neg(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor exp(const Tensor& a);
/// log(max(a, floor)); gradient is zero where the floor is active.
Tensor log(const Tensor& a, double floor = 0.0);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator*(double b, const Tensor& a) { return mul(a, b); }

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// a[..., M, K] @ b[..., K, N]. A 2-D `b` is shared across all leading batch
/// slices of `a`.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, int axis);

/// Cross-correlation with zero padding. w: [C_out, C_in / groups, k, k].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
              int groups = 1);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps = 1e-6);

// Structural.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor transpose(const Tensor& x);  // swaps the last two axes
Tensor slice(const Tensor& x, int axis, std::int64_t begin, std::int64_t end);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Bilinear x2 upsampling of [B, C, H, W], half-pixel (align-corners=false).
Tensor upsample_bilinear2x(const Tensor& x);
/// Edge-replicating spatial padding of [B, C, H, W].
Tensor pad_replicate(const Tensor& x, int pad);
/// Unit-norm rows along the last axis; all-zero rows stay zero.
Tensor l2_normalize(const Tensor& x);
/// Flat gather: out[m] = x.data[indices[m]].
Tensor take(const Tensor& x, const std::vector<std::int64_t>& indices);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Bilinear reads of a [C, H, W] map at (x, y) grid positions, clamped to the
/// map. Returns [P, C]. Differentiable with respect to the map.
Tensor sample_bilinear(const Tensor& map, const std::vector<Point2>& points);

/// [B, C, H, W] -> [B, H*W, C]
Tensor map_to_seq(const Tensor& x);
/// [B, H*W, C] -> [B, C, H, W]
Tensor seq_to_map(const Tensor& x, std::int64_t h, std::int64_t w);

// Snapshot text format: "shape: d1 d2 ..." then whitespace-separated values.
void write_snapshot(std::ostream& os, const Tensor& t);
Tensor read_snapshot(std::istream& is, const std::string& source = "<stream>");
void save_snapshot(const std::string& path, const Tensor& t);
Tensor load_snapshot(const std::string& path);

}  // namespace matchformer
