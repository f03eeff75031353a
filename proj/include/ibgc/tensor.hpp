#pragma once

// Dense f64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap shared handle. Operations on tensors that require
// gradients are recorded onto the Tape that owns those tensors; everything
// else runs eagerly without bookkeeping.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ibgc {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches the node
  bool requires_grad = false;
  Tape* tape = nullptr;

  std::span<double> grad_buffer();  // allocates zeros on first use
};

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);
  explicit Tensor(Shape shape, double fill = 0.0);

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Direct write access. Writing into a tensor that is already recorded on
  /// a tape invalidates the recorded backward pass.
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tape* tape() const { return node_->tape; }
  /// Accumulated gradient; all zeros when nothing reached this tensor.
  std::vector<double> grad() const;
  bool has_grad() const { return !node_->grad.empty(); }

  /// Deep copy without tape participation.
  Tensor detach() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Ordered record of primitive applications. Reverse pass visits records in
/// exact reverse creation order.
class Tape {
 public:
  /// Receives the output node (with its gradient filled in).
  using BackwardFn = std::function<void(const TensorNode& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  /// Marks an existing tensor as a gradient leaf owned by this tape. Its
  /// gradient buffer is reset. Detached again when the tape is destroyed.
  void watch(Tensor& t);
  /// Fresh leaf holding a copy of `t`'s values.
  Tensor variable(const Tensor& t);

  /// Used by primitives: registers `out` as produced from `inputs`.
  void record(Tensor& out, BackwardFn fn);

  /// Seeds d(out)/d(out) = 1 for a one-element output and runs the reverse pass.
  void backward(const Tensor& out);
  /// Reverse pass with an explicit output gradient of out's shape.
  void backward(const Tensor& out, std::span<const double> seed);

  /// Clears the gradient buffers of every leaf and recorded node.
  void zero_grad();

  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<TensorNode> out;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  std::vector<std::shared_ptr<TensorNode>> leaves_;
};

enum class Unary { exp, log, tanh, softplus, relu, square, negate, scale };
enum class Reduce { sum, mean, logsumexp, logsoftmax, max };

// Primitive operations. Each records a backward rule when any input
// requires gradients; all inputs that require gradients must share a tape.

Tensor apply_unary(const Tensor& x, Unary fn, double constant = 1.0);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
/// max(x, floor) elementwise; gradient passes where x > floor.
Tensor clamp_min(const Tensor& x, double floor);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

/// x[n,c,...] * scale[c] + bias[c]. Either of scale/bias may be empty (no-op).
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
/// Cross-correlation, zero padding. Kernel extents must be 1, 3 or 7.
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding);

/// Reduces along `axis`. logsoftmax keeps the shape; the others drop the axis
/// (a rank-1 input reduces to shape {1}).
Tensor reduce(const Tensor& x, Reduce kind, std::size_t axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Picks `indices` along `axis` (repeats allowed; backward scatter-adds).
Tensor gather(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& indices);

/// out[n,m] = ||z[n,:] - mu[m,:]||^2
Tensor pairwise_sq_dist(const Tensor& z, const Tensor& mu);

using SliceMap = std::function<void(std::span<const double>, std::span<double>)>;

/// Fixed linear map applied to every sample (leading axis) of x. `adjoint`
/// must be the transpose of `forward`; it serves as the backward rule. Used by
/// the volume-preserving reshuffles and transforms.
Tensor linear_map(const Tensor& x, Shape out_shape, SliceMap forward, SliceMap adjoint);

}  // namespace ibgc
