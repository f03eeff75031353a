#include "ibgc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "ibgc/error.hpp"

namespace ibgc {

namespace {

using NodePtr = std::shared_ptr<TensorNode>;

Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->requires_grad()) continue;
    if (tape != nullptr && tape != t->tape()) throw usage_error("operands are recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw numeric_error(std::string("non-finite value produced by ") + op);
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw usage_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Views a shape as (outer, extent, inner) around `axis`.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw usage_error("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

double softplus_scalar(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<double> TensorNode::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : node_(std::make_shared<TensorNode>()) { node_->shape = {0}; }

Tensor::Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<TensorNode>()) {
  if (shape_size(shape) != data.size()) {
    throw usage_error("tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<TensorNode>()) {
  node_->data.assign(shape_size(shape), fill);
  node_->shape = std::move(shape);
}

double Tensor::item() const {
  if (size() != 1) throw usage_error("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data); }

// ---------------------------------------------------------------------------
// Tape

Tape::~Tape() {
  for (auto& leaf : leaves_) {
    if (leaf->tape == this) {
      leaf->tape = nullptr;
      leaf->requires_grad = false;
    }
  }
  for (auto& e : entries_) {
    e.out->tape = nullptr;
    e.out->requires_grad = false;
  }
}

void Tape::watch(Tensor& t) {
  auto& node = t.node();
  if (node->tape != nullptr && node->tape != this) throw usage_error("tensor already watched by another tape");
  node->requires_grad = true;
  node->tape = this;
  node->grad.clear();
  leaves_.push_back(node);
}

Tensor Tape::variable(const Tensor& t) {
  Tensor leaf = t.detach();
  watch(leaf);
  return leaf;
}

void Tape::record(Tensor& out, BackwardFn fn) {
  out.node()->requires_grad = true;
  out.node()->tape = this;
  entries_.push_back({out.node(), std::move(fn)});
}

void Tape::backward(const Tensor& out) {
  if (out.size() != 1) throw usage_error("backward() without seed needs a one-element output");
  const double one = 1.0;
  backward(out, std::span<const double>(&one, 1));
}

void Tape::backward(const Tensor& out, std::span<const double> seed) {
  if (out.tape() != this || !out.requires_grad()) throw usage_error("backward: output is not recorded on this tape");
  if (seed.size() != out.size()) throw usage_error("backward: seed size mismatch");
  auto g = out.node()->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->grad.empty()) continue;
    it->fn(*it->out);
  }
}

void Tape::zero_grad() {
  for (auto& leaf : leaves_) leaf->grad.clear();
  for (auto& e : entries_) e.out->grad.clear();
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor apply_unary(const Tensor& x, Unary fn, double c) {
  Tensor out(x.shape());
  auto xs = x.data();
  auto ys = out.mutable_data();
  switch (fn) {
    case Unary::exp:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = std::exp(xs[i]);
      break;
    case Unary::log:
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!(xs[i] > 0.0)) throw numeric_error("log of non-positive value " + std::to_string(xs[i]));
        ys[i] = std::log(xs[i]);
      }
      break;
    case Unary::tanh:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = std::tanh(xs[i]);
      break;
    case Unary::softplus:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = softplus_scalar(xs[i]);
      break;
    case Unary::relu:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] > 0.0 ? xs[i] : 0.0;
      break;
    case Unary::square:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] * xs[i];
      break;
    case Unary::negate:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = -xs[i];
      break;
    case Unary::scale:
      for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = c * xs[i];
      break;
  }
  check_finite(out, "unary op");
  if (Tape* tape = common_tape({&x})) {
    NodePtr in = x.node();
    tape->record(out, [in, fn, c](const TensorNode& o) {
      auto gi = in->grad_buffer();
      const auto& go = o.grad;
      const auto& xv = in->data;
      const auto& yv = o.data;
      switch (fn) {
        case Unary::exp:
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * yv[i];
          break;
        case Unary::log:
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] / xv[i];
          break;
        case Unary::tanh:
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * (1.0 - yv[i] * yv[i]);
          break;
        case Unary::softplus:
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * sigmoid_scalar(xv[i]);
          break;
        case Unary::relu:
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += xv[i] > 0.0 ? go[i] : 0.0;
          break;
        case Unary::square:
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += 2.0 * xv[i] * go[i];
          break;
        case Unary::negate:
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] -= go[i];
          break;
        case Unary::scale:
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += c * go[i];
          break;
      }
    });
  }
  return out;
}

Tensor exp(const Tensor& x) { return apply_unary(x, Unary::exp); }
Tensor log(const Tensor& x) { return apply_unary(x, Unary::log); }
Tensor tanh(const Tensor& x) { return apply_unary(x, Unary::tanh); }
Tensor softplus(const Tensor& x) { return apply_unary(x, Unary::softplus); }
Tensor relu(const Tensor& x) { return apply_unary(x, Unary::relu); }
Tensor square(const Tensor& x) { return apply_unary(x, Unary::square); }
Tensor neg(const Tensor& x) { return apply_unary(x, Unary::negate); }
Tensor scale(const Tensor& x, double c) { return apply_unary(x, Unary::scale, c); }

Tensor add_scalar(const Tensor& x, double c) {
  Tensor out(x.shape());
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] + c;
  if (Tape* tape = common_tape({&x})) {
    NodePtr in = x.node();
    tape->record(out, [in](const TensorNode& o) {
      auto gi = in->grad_buffer();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += o.grad[i];
    });
  }
  return out;
}

Tensor clamp_min(const Tensor& x, double floor) {
  Tensor out(x.shape());
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] > floor ? xs[i] : floor;
  if (Tape* tape = common_tape({&x})) {
    NodePtr in = x.node();
    tape->record(out, [in, floor](const TensorNode& o) {
      auto gi = in->grad_buffer();
      for (std::size_t i = 0; i < gi.size(); ++i) {
        if (in->data[i] > floor) gi[i] += o.grad[i];
      }
    });
  }
  return out;
}

namespace {

enum class Binary { add, sub, mul, div };

Tensor apply_binary(const Tensor& a, const Tensor& b, Binary op, const char* name) {
  require_same_shape(a, b, name);
  Tensor out(a.shape());
  auto as = a.data();
  auto bs = b.data();
  auto ys = out.mutable_data();
  switch (op) {
    case Binary::add:
      for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] + bs[i];
      break;
    case Binary::sub:
      for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] - bs[i];
      break;
    case Binary::mul:
      for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] * bs[i];
      break;
    case Binary::div:
      for (std::size_t i = 0; i < ys.size(); ++i) {
        if (bs[i] == 0.0) throw numeric_error("division by zero");
        ys[i] = as[i] / bs[i];
      }
      break;
  }
  if (op == Binary::div || op == Binary::mul) check_finite(out, name);
  if (Tape* tape = common_tape({&a, &b})) {
    NodePtr na = a.node();
    NodePtr nb = b.node();
    tape->record(out, [na, nb, op](const TensorNode& o) {
      const auto& g = o.grad;
      if (na->requires_grad) {
        auto ga = na->grad_buffer();
        switch (op) {
          case Binary::add:
          case Binary::sub:
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            break;
          case Binary::mul:
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * nb->data[i];
            break;
          case Binary::div:
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / nb->data[i];
            break;
        }
      }
      if (nb->requires_grad) {
        auto gb = nb->grad_buffer();
        switch (op) {
          case Binary::add:
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            break;
          case Binary::sub:
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            break;
          case Binary::mul:
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * na->data[i];
            break;
          case Binary::div:
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * o.data[i] / nb->data[i];
            break;
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return apply_binary(a, b, Binary::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return apply_binary(a, b, Binary::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return apply_binary(a, b, Binary::mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return apply_binary(a, b, Binary::div, "div"); }

Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& bias) {
  if (x.rank() < 2) throw usage_error("channel_affine needs a [N,C,...] input");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.size() / (n * c);
  const bool has_scale = scale.size() > 0, has_bias = bias.size() > 0;
  if ((has_scale && scale.size() != c) || (has_bias && bias.size() != c)) {
    throw usage_error("channel_affine: parameter length does not match channel count " + std::to_string(c));
  }
  Tensor out(x.shape());
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double s = has_scale ? scale[ch] : 1.0;
      const double t = has_bias ? bias[ch] : 0.0;
      const std::size_t off = (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) ys[off + i] = xs[off + i] * s + t;
    }
  }
  if (Tape* tape = common_tape({&x, &scale, &bias})) {
    NodePtr nx = x.node(), ns = scale.node(), nb = bias.node();
    tape->record(out, [nx, ns, nb, n, c, inner, has_scale, has_bias](const TensorNode& o) {
      const auto& g = o.grad;
      if (nx->requires_grad) {
        auto gx = nx->grad_buffer();
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double s = has_scale ? ns->data[ch] : 1.0;
            const std::size_t off = (b * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) gx[off + i] += g[off + i] * s;
          }
        }
      }
      if (has_scale && ns->requires_grad) {
        auto gs = ns->grad_buffer();
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * inner;
            double acc = 0.0;
            for (std::size_t i = 0; i < inner; ++i) acc += g[off + i] * nx->data[off + i];
            gs[ch] += acc;
          }
        }
      }
      if (has_bias && nb->requires_grad) {
        auto gb = nb->grad_buffer();
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * inner;
            double acc = 0.0;
            for (std::size_t i = 0; i < inner; ++i) acc += g[off + i];
            gb[ch] += acc;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw usage_error("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  auto as = a.data();
  auto bs = b.data();
  auto ys = out.mutable_data();
  // ascending-k accumulation for every output entry
  for (std::size_t i = 0; i < m; ++i) {
    double* row = ys.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = as[i * k + p];
      const double* brow = bs.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  if (Tape* tape = common_tape({&a, &b})) {
    NodePtr na = a.node(), nb = b.node();
    tape->record(out, [na, nb, m, k, n](const TensorNode& o) {
      const auto& g = o.grad;
      if (na->requires_grad) {
        auto ga = na->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * nb->data[p * n + j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (nb->requires_grad) {
        auto gb = nb->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double av = na->data[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
          }
        }
      }
    });
  }
  return out;
}

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, oh, ow;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return n * oh * ow; }
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// col[(c*kh + ky)*kw + kx, (b*oh + oy)*ow + ox] = x[b, c, oy*s + ky - pad, ox*s + kx - pad] (0 outside).
void im2col(const ConvGeom& g, const double* x, double* col) {
  const std::size_t cols = g.cols(), plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t b = 0; b < g.n; ++b) {
          const double* xp = x + (b * g.c + c) * g.h * g.w;
          double* dst = row + b * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              const bool inside = iy >= 0 && iy < static_cast<long>(g.h) && ix >= 0 && ix < static_cast<long>(g.w);
              dst[oy * g.ow + ox] = inside ? xp[iy * static_cast<long>(g.w) + ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds into gx.
void col2im(const ConvGeom& g, const double* col, double* gx) {
  const std::size_t cols = g.cols(), plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t b = 0; b < g.n; ++b) {
          double* xp = gx + (b * g.c + c) * g.h * g.w;
          const double* src = row + b * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              xp[iy * static_cast<long>(g.w) + ix] += src[oy * g.ow + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || kernel.rank() != 4) throw usage_error("conv2d expects [N,C,H,W] input and [O,C,kh,kw] kernel");
  if (x.dim(1) != kernel.dim(1)) {
    throw usage_error("conv2d: channel mismatch " + shape_str(x.shape()) + " vs kernel " + shape_str(kernel.shape()));
  }
  const std::size_t kh = kernel.dim(2), kw = kernel.dim(3);
  auto supported = [](std::size_t k) { return k == 1 || k == 3 || k == 7; };
  if (!supported(kh) || !supported(kw)) throw usage_error("conv2d: unsupported kernel size " + shape_str(kernel.shape()));
  if (stride == 0) throw usage_error("conv2d: stride must be positive");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kh, kw, stride, padding, 0, 0};
  if (g.h + 2 * padding < kh || g.w + 2 * padding < kw) throw usage_error("conv2d: kernel larger than padded input");
  g.oh = (g.h + 2 * padding - kh) / stride + 1;
  g.ow = (g.w + 2 * padding - kw) / stride + 1;

  const std::size_t rows = g.rows(), cols = g.cols(), plane = g.oh * g.ow;
  auto col = std::make_shared<std::vector<double>>(rows * cols);
  im2col(g, x.data().data(), col->data());
  RowMat y = ConstMapMat(kernel.data().data(), g.o, rows) * ConstMapMat(col->data(), rows, cols);

  Tensor out({g.n, g.o, g.oh, g.ow});
  double* ys = out.mutable_data().data();
  for (std::size_t b = 0; b < g.n; ++b) {
    for (std::size_t oc = 0; oc < g.o; ++oc) {
      std::copy_n(y.data() + oc * cols + b * plane, plane, ys + (b * g.o + oc) * plane);
    }
  }
  if (Tape* tape = common_tape({&x, &kernel})) {
    NodePtr nx = x.node(), nk = kernel.node();
    tape->record(out, [nx, nk, g, col](const TensorNode& o) {
      const std::size_t rows = g.rows(), cols = g.cols(), plane = g.oh * g.ow;
      RowMat gy(g.o, cols);
      for (std::size_t b = 0; b < g.n; ++b) {
        for (std::size_t oc = 0; oc < g.o; ++oc) {
          std::copy_n(o.grad.data() + (b * g.o + oc) * plane, plane, gy.data() + oc * cols + b * plane);
        }
      }
      if (nk->requires_grad) {
        MapMat gk(nk->grad_buffer().data(), g.o, rows);
        gk.noalias() += gy * ConstMapMat(col->data(), rows, cols).transpose();
      }
      if (nx->requires_grad) {
        const RowMat gcol = ConstMapMat(nk->data.data(), g.o, rows).transpose() * gy;
        col2im(g, gcol.data(), nx->grad_buffer().data());
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor reduce(const Tensor& x, Reduce kind, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis);
  if (v.extent == 0) throw usage_error("reduce over an empty axis");
  Shape out_shape = x.shape();
  if (kind == Reduce::logsoftmax) {
    // keep shape
  } else if (out_shape.size() == 1) {
    out_shape = {1};
  } else {
    out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  }
  Tensor out(out_shape);
  auto xs = x.data();
  auto ys = out.mutable_data();
  std::vector<std::size_t> argmax;
  if (kind == Reduce::max) argmax.resize(v.outer * v.inner);

  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      auto at = [&](std::size_t k) { return xs[(o * v.extent + k) * v.inner + in]; };
      const std::size_t r = o * v.inner + in;
      switch (kind) {
        case Reduce::sum:
        case Reduce::mean: {
          double acc = 0.0;
          for (std::size_t k = 0; k < v.extent; ++k) acc += at(k);
          ys[r] = kind == Reduce::mean ? acc / static_cast<double>(v.extent) : acc;
          break;
        }
        case Reduce::max: {
          std::size_t best = 0;
          for (std::size_t k = 1; k < v.extent; ++k) {
            if (at(k) > at(best)) best = k;
          }
          argmax[r] = best;
          ys[r] = at(best);
          break;
        }
        case Reduce::logsumexp:
        case Reduce::logsoftmax: {
          double m = at(0);
          for (std::size_t k = 1; k < v.extent; ++k) m = std::max(m, at(k));
          double acc = 0.0;
          for (std::size_t k = 0; k < v.extent; ++k) acc += std::exp(at(k) - m);
          const double lse = m + std::log(acc);
          if (kind == Reduce::logsumexp) {
            ys[r] = lse;
          } else {
            for (std::size_t k = 0; k < v.extent; ++k) ys[(o * v.extent + k) * v.inner + in] = at(k) - lse;
          }
          break;
        }
      }
    }
  }
  check_finite(out, "reduce");
  if (Tape* tape = common_tape({&x})) {
    NodePtr nx = x.node();
    tape->record(out, [nx, kind, v, argmax = std::move(argmax)](const TensorNode& o) {
      auto gx = nx->grad_buffer();
      const auto& g = o.grad;
      const auto& xs = nx->data;
      for (std::size_t oo = 0; oo < v.outer; ++oo) {
        for (std::size_t in = 0; in < v.inner; ++in) {
          const std::size_t r = oo * v.inner + in;
          auto idx = [&](std::size_t k) { return (oo * v.extent + k) * v.inner + in; };
          switch (kind) {
            case Reduce::sum:
              for (std::size_t k = 0; k < v.extent; ++k) gx[idx(k)] += g[r];
              break;
            case Reduce::mean:
              for (std::size_t k = 0; k < v.extent; ++k) gx[idx(k)] += g[r] / static_cast<double>(v.extent);
              break;
            case Reduce::max:
              gx[idx(argmax[r])] += g[r];
              break;
            case Reduce::logsumexp:
              for (std::size_t k = 0; k < v.extent; ++k) gx[idx(k)] += g[r] * std::exp(xs[idx(k)] - o.data[r]);
              break;
            case Reduce::logsoftmax: {
              double gsum = 0.0;
              for (std::size_t k = 0; k < v.extent; ++k) gsum += g[idx(k)];
              for (std::size_t k = 0; k < v.extent; ++k) gx[idx(k)] += g[idx(k)] - std::exp(o.data[idx(k)]) * gsum;
              break;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) { return reduce(reshape(x, {x.size()}), Reduce::sum, 0); }
Tensor mean_all(const Tensor& x) { return reduce(reshape(x, {x.size()}), Reduce::mean, 0); }

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw usage_error("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (Tape* tape = common_tape({&x})) {
    NodePtr nx = x.node();
    tape->record(out, [nx](const TensorNode& o) {
      auto gx = nx->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
    });
  }
  return out;
}

Tensor gather(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& indices) {
  const AxisView v = axis_view(x.shape(), axis);
  for (std::size_t i : indices) {
    if (i >= v.extent) throw usage_error("gather: index " + std::to_string(i) + " out of range");
  }
  Shape out_shape = x.shape();
  out_shape[axis] = indices.size();
  Tensor out(out_shape);
  auto xs = x.data();
  auto ys = out.mutable_data();
  const std::size_t k_out = indices.size();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < k_out; ++k) {
      const double* src = xs.data() + (o * v.extent + indices[k]) * v.inner;
      std::copy(src, src + v.inner, ys.data() + (o * k_out + k) * v.inner);
    }
  }
  if (Tape* tape = common_tape({&x})) {
    NodePtr nx = x.node();
    tape->record(out, [nx, v, indices, k_out](const TensorNode& o) {
      auto gx = nx->grad_buffer();
      for (std::size_t oo = 0; oo < v.outer; ++oo) {
        for (std::size_t k = 0; k < k_out; ++k) {
          const double* src = o.grad.data() + (oo * k_out + k) * v.inner;
          double* dst = gx.data() + (oo * v.extent + indices[k]) * v.inner;
          for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) throw usage_error("slice: bad range");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather(x, axis, idx);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw usage_error("concat of nothing");
  Shape out_shape = parts.front().shape();
  if (axis >= out_shape.size()) throw usage_error("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw usage_error("concat: rank mismatch");
    total += s[axis];
    s[axis] = out_shape[axis];
    if (s != out_shape) throw usage_error("concat: shape mismatch off the concat axis");
  }
  out_shape[axis] = total;
  Tensor out(out_shape);
  const AxisView vo = axis_view(out_shape, axis);
  auto ys = out.mutable_data();
  std::size_t offset = 0;
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    const AxisView vp = axis_view(p.shape(), axis);
    auto ps = p.data();
    for (std::size_t o = 0; o < vp.outer; ++o) {
      const double* src = ps.data() + o * vp.extent * vp.inner;
      std::copy(src, src + vp.extent * vp.inner, ys.data() + (o * vo.extent + offset) * vo.inner);
    }
    offset += vp.extent;
    if (p.requires_grad()) {
      if (tape != nullptr && tape != p.tape()) throw usage_error("operands are recorded on different tapes");
      tape = p.tape();
    }
  }
  if (tape != nullptr) {
    std::vector<NodePtr> nodes;
    std::vector<std::size_t> extents;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      extents.push_back(p.shape()[axis]);
    }
    tape->record(out, [nodes, extents, vo](const TensorNode& o) {
      std::size_t offset = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        const std::size_t ext = extents[pi];
        if (nodes[pi]->requires_grad) {
          auto gp = nodes[pi]->grad_buffer();
          for (std::size_t oo = 0; oo < vo.outer; ++oo) {
            const double* src = o.grad.data() + (oo * vo.extent + offset) * vo.inner;
            double* dst = gp.data() + oo * ext * vo.inner;
            for (std::size_t i = 0; i < ext * vo.inner; ++i) dst[i] += src[i];
          }
        }
        offset += ext;
      }
    });
  }
  return out;
}

Tensor pairwise_sq_dist(const Tensor& z, const Tensor& mu) {
  if (z.rank() != 2 || mu.rank() != 2 || z.dim(1) != mu.dim(1)) {
    throw usage_error("pairwise_sq_dist: shapes " + shape_str(z.shape()) + " and " + shape_str(mu.shape()));
  }
  const std::size_t n = z.dim(0), m = mu.dim(0), d = z.dim(1);
  Tensor out({n, m});
  auto zs = z.data();
  auto ms = mu.data();
  auto ys = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = zs[i * d + k] - ms[j * d + k];
        acc += diff * diff;
      }
      ys[i * m + j] = acc;
    }
  }
  if (Tape* tape = common_tape({&z, &mu})) {
    NodePtr nz = z.node(), nm = mu.node();
    tape->record(out, [nz, nm, n, m, d](const TensorNode& o) {
      const bool gzq = nz->requires_grad, gmq = nm->requires_grad;
      std::span<double> gz, gm;
      if (gzq) gz = nz->grad_buffer();
      if (gmq) gm = nm->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          const double g2 = 2.0 * o.grad[i * m + j];
          for (std::size_t k = 0; k < d; ++k) {
            const double diff = nz->data[i * d + k] - nm->data[j * d + k];
            if (gzq) gz[i * d + k] += g2 * diff;
            if (gmq) gm[j * d + k] -= g2 * diff;
          }
        }
      }
    });
  }
  return out;
}

Tensor linear_map(const Tensor& x, Shape out_shape, SliceMap forward, SliceMap adjoint) {
  if (x.rank() == 0 || out_shape.empty() || out_shape[0] != x.dim(0)) throw usage_error("linear_map: batch mismatch");
  const std::size_t n = x.dim(0);
  const std::size_t in_per = x.size() / std::max<std::size_t>(n, 1);
  Tensor out(std::move(out_shape));
  const std::size_t out_per = out.size() / std::max<std::size_t>(n, 1);
  auto xs = x.data();
  auto ys = out.mutable_data();
  for (std::size_t b = 0; b < n; ++b) forward(xs.subspan(b * in_per, in_per), ys.subspan(b * out_per, out_per));
  if (Tape* tape = common_tape({&x})) {
    NodePtr nx = x.node();
    tape->record(out, [nx, n, in_per, out_per, adjoint = std::move(adjoint)](const TensorNode& o) {
      auto gx = nx->grad_buffer();
      std::vector<double> tmp(in_per);
      std::span<const double> go(o.grad);
      for (std::size_t b = 0; b < n; ++b) {
        std::fill(tmp.begin(), tmp.end(), 0.0);
        adjoint(go.subspan(b * out_per, out_per), tmp);
        for (std::size_t i = 0; i < in_per; ++i) gx[b * in_per + i] += tmp[i];
      }
    });
  }
  return out;
}

}  // namespace ibgc
