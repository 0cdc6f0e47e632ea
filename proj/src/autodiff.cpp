#include "udic/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "udic/logistic.hpp"

namespace udic::ad {

std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kConvTranspose2d: return "conv_transpose2d";
    case OpKind::kLeakyRelu: return "leaky_relu";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kMse: return "mse";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kClamp: return "clamp";
    case OpKind::kScaleChannels: return "scale_channels";
    case OpKind::kStraightThrough: return "straight_through";
    case OpKind::kLogisticMixtureBits: return "logistic_mixture_bits";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_error(OpKind op, const Shape& a, const Shape& b, const char* what = "shape mismatch") {
  throw ShapeError(std::string(op_name(op)) + ": " + what + " " + to_string(a) + " vs " + to_string(b));
}

template <class T>
using Node = TapeNode<T>;
template <class T>
using NodePtr = std::shared_ptr<TapeNode<T>>;

template <class T>
Tensor<T> make_result(OpKind op, Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  for (const Tensor<T>* in : inputs) {
    if (in && in->defined() && in->requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Tensor<T>* in : inputs) node->inputs.push_back(in && in->defined() ? in->node() : nullptr);
    node->backward = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <class T>
bool wants_grad(const NodePtr<T>& n) {
  return n && n->requires_grad;
}

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// Unfold a [C, H, W] image into [C*K*K, Ho*Wo] patch columns for a kernel K
// with the given stride and zero padding.
template <class T>
void im2col(const T* img, int channels, int height, int width, int kernel, int stride, int pad, int out_h,
            int out_w, T* cols) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        T* row = cols + static_cast<std::int64_t>((c * kernel + ky) * kernel + kx) * plane;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::int64_t>(c) * height + iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < width) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image.
template <class T>
void col2im(const T* cols, int channels, int height, int width, int kernel, int stride, int pad, int out_h,
            int out_w, T* img) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const T* row = cols + static_cast<std::int64_t>((c * kernel + ky) * kernel + kx) * plane;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          const T* src = row + oy * out_w;
          T* dst = img + (static_cast<std::int64_t>(c) * height + iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <class T>
Tensor<T> unary(OpKind op, const Tensor<T>& x, auto forward, auto derivative) {
  std::vector<T> out(x.data().size());
  std::transform(x.data().begin(), x.data().end(), out.begin(), forward);
  return make_result<T>(op, x.shape(), std::move(out), {&x}, [derivative](Node<T>& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * derivative(in->value[i], self.value[i]);
  });
}

void check_4d(OpKind op, const Shape& s, const Shape& other) {
  if (s.size() != 4) shape_error(op, s, other, "expected a 4-D tensor");
}

}  // namespace

// ---------------------------------------------------------------- Tensor

template <class T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> data) {
  if (ad::numel(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("leaf: data length " + std::to_string(data.size()) + " does not match shape " + to_string(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> data) {
  Tensor t = constant(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  t.node_->grad_buffer();
  return t;
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  std::vector<T> data(static_cast<std::size_t>(ad::numel(shape)), T(0));
  return requires_grad ? parameter(std::move(shape), std::move(data)) : constant(std::move(shape), std::move(data));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value) {
  return constant({}, {value});
}

template <class T>
std::span<T> Tensor<T>::mutable_data() {
  if (node_->op != OpKind::kLeaf) throw std::logic_error("mutable_data: only leaves are writable");
  return node_->value;
}

template <class T>
std::span<const T> Tensor<T>::grad() const {
  node_->grad_buffer();
  return node_->grad;
}

template <class T>
T Tensor<T>::item() const {
  if (node_->value.size() != 1) throw ShapeError("item: tensor of shape " + to_string(node_->shape) + " is not a scalar");
  return node_->value[0];
}

template <class T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return constant(node_->shape, node_->value);
}

// ---------------------------------------------------------------- backward

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (Node<T>* n : order) {
    if (n->op != OpKind::kLeaf) n->grad.assign(n->value.size(), T(0));
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->op == OpKind::kLeaf || !n->backward) continue;
    n->backward(*n);
  }
}

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error(OpKind::kAdd, a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  return make_result<T>(OpKind::kAdd, a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!wants_grad(in)) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error(OpKind::kSub, a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  return make_result<T>(OpKind::kSub, a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    if (wants_grad(self.inputs[0])) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self.inputs[1])) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error(OpKind::kMul, a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  return make_result<T>(OpKind::kMul, a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    auto& lhs = self.inputs[0];
    auto& rhs = self.inputs[1];
    if (wants_grad(lhs)) {
      auto& g = lhs->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * rhs->value[i];
    }
    if (wants_grad(rhs)) {
      auto& g = rhs->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * lhs->value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  return unary<T>(
      OpKind::kScale, a, [f](T v) { return v * f; }, [f](T, T) { return f; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, double offset) {
  const T o = static_cast<T>(offset);
  return unary<T>(
      OpKind::kAddScalar, a, [o](T v) { return v + o; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------- linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
    shape_error(OpKind::kMatMul, a.shape(), b.shape());
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * n));
  MatMap<T>(out.data(), m, n).noalias() = ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  return make_result<T>(OpKind::kMatMul, {m, n}, std::move(out), {&a, &b}, [m, k, n](Node<T>& self) {
    auto& lhs = self.inputs[0];
    auto& rhs = self.inputs[1];
    ConstMatMap<T> dout(self.grad.data(), m, n);
    if (wants_grad(lhs))
      MatMap<T>(lhs->grad_buffer().data(), m, k).noalias() += dout * ConstMatMap<T>(rhs->value.data(), k, n).transpose();
    if (wants_grad(rhs))
      MatMap<T>(rhs->grad_buffer().data(), k, n).noalias() += ConstMatMap<T>(lhs->value.data(), m, k).transpose() * dout;
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.shape().size() != 2) shape_error(OpKind::kTranspose, a.shape(), {}, "expected a 2-D tensor");
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<T> out(static_cast<std::size_t>(r * c));
  MatMap<T>(out.data(), c, r) = ConstMatMap<T>(a.data().data(), r, c).transpose();
  return make_result<T>(OpKind::kTranspose, {c, r}, std::move(out), {&a}, [r, c](Node<T>& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    MatMap<T>(in->grad_buffer().data(), r, c) += ConstMatMap<T>(self.grad.data(), c, r).transpose();
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_error(OpKind::kReshape, a.shape(), shape);
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(OpKind::kReshape, std::move(shape), std::move(out), {&a}, [](Node<T>& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- convolutions

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvOptions opt) {
  constexpr OpKind kOp = OpKind::kConv2d;
  check_4d(kOp, x.shape(), weight.shape());
  check_4d(kOp, weight.shape(), x.shape());
  const int n = static_cast<int>(x.dim(0)), cin = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2)), w = static_cast<int>(x.dim(3));
  const int cout = static_cast<int>(weight.dim(0)), k = static_cast<int>(weight.dim(2));
  if (weight.dim(1) != cin || weight.dim(3) != k) shape_error(kOp, x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{cout}) shape_error(kOp, weight.shape(), bias.shape(), "bad bias");
  if (opt.stride < 1 || opt.padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const int oh = (h + 2 * opt.padding - k) / opt.stride + 1;
  const int ow = (w + 2 * opt.padding - k) / opt.stride + 1;
  if (h + 2 * opt.padding < k || w + 2 * opt.padding < k) shape_error(kOp, x.shape(), weight.shape(), "input smaller than kernel");

  const std::int64_t patch = static_cast<std::int64_t>(cin) * k * k;
  const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
  std::vector<T> out(static_cast<std::size_t>(n) * cout * plane);
  std::vector<T> cols(static_cast<std::size_t>(patch * plane));
  ConstMatMap<T> wmat(weight.data().data(), cout, patch);
  for (int b = 0; b < n; ++b) {
    im2col(x.data().data() + static_cast<std::int64_t>(b) * cin * h * w, cin, h, w, k, opt.stride, opt.padding, oh, ow,
           cols.data());
    MatMap<T> o(out.data() + static_cast<std::int64_t>(b) * cout * plane, cout, plane);
    o.noalias() = wmat * ConstMatMap<T>(cols.data(), patch, plane);
    if (bias.defined()) {
      for (int c = 0; c < cout; ++c) o.row(c).array() += bias.data()[c];
    }
  }
  return make_result<T>(
      kOp, {n, cout, oh, ow}, std::move(out), {&x, &weight, &bias},
      [=](Node<T>& self) {
        auto& xin = self.inputs[0];
        auto& win = self.inputs[1];
        auto& bin = self.inputs[2];
        std::vector<T> cols(static_cast<std::size_t>(patch * plane));
        for (int b = 0; b < n; ++b) {
          ConstMatMap<T> dout(self.grad.data() + static_cast<std::int64_t>(b) * cout * plane, cout, plane);
          if (wants_grad(bin)) {
            auto& g = bin->grad_buffer();
            for (int c = 0; c < cout; ++c) g[c] += dout.row(c).sum();
          }
          if (wants_grad(win)) {
            im2col(xin->value.data() + static_cast<std::int64_t>(b) * cin * h * w, cin, h, w, k, opt.stride,
                   opt.padding, oh, ow, cols.data());
            MatMap<T>(win->grad_buffer().data(), cout, patch).noalias() +=
                dout * ConstMatMap<T>(cols.data(), patch, plane).transpose();
          }
          if (wants_grad(xin)) {
            MatMap<T>(cols.data(), patch, plane).noalias() =
                ConstMatMap<T>(win->value.data(), cout, patch).transpose() * dout;
            col2im(cols.data(), cin, h, w, k, opt.stride, opt.padding, oh, ow,
                   xin->grad_buffer().data() + static_cast<std::int64_t>(b) * cin * h * w);
          }
        }
      });
}

template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvOptions opt) {
  constexpr OpKind kOp = OpKind::kConvTranspose2d;
  check_4d(kOp, x.shape(), weight.shape());
  check_4d(kOp, weight.shape(), x.shape());
  const int n = static_cast<int>(x.dim(0)), cin = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2)), w = static_cast<int>(x.dim(3));
  const int cout = static_cast<int>(weight.dim(1)), k = static_cast<int>(weight.dim(2));
  if (weight.dim(0) != cin || weight.dim(3) != k) shape_error(kOp, x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{cout}) shape_error(kOp, weight.shape(), bias.shape(), "bad bias");
  if (opt.stride < 1 || opt.padding < 0 || opt.output_padding < 0 || opt.output_padding >= opt.stride)
    throw ShapeError("conv_transpose2d: invalid stride/padding/output_padding");
  const int oh = (h - 1) * opt.stride - 2 * opt.padding + k + opt.output_padding;
  const int ow = (w - 1) * opt.stride - 2 * opt.padding + k + opt.output_padding;
  if (oh <= 0 || ow <= 0) shape_error(kOp, x.shape(), weight.shape(), "empty output");

  const std::int64_t patch = static_cast<std::int64_t>(cout) * k * k;
  const std::int64_t in_plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t out_plane = static_cast<std::int64_t>(oh) * ow;
  std::vector<T> out(static_cast<std::size_t>(n) * cout * out_plane, T(0));
  std::vector<T> cols(static_cast<std::size_t>(patch * in_plane));
  ConstMatMap<T> wmat(weight.data().data(), cin, patch);
  for (int b = 0; b < n; ++b) {
    MatMap<T>(cols.data(), patch, in_plane).noalias() =
        wmat.transpose() * ConstMatMap<T>(x.data().data() + static_cast<std::int64_t>(b) * cin * in_plane, cin, in_plane);
    T* o = out.data() + static_cast<std::int64_t>(b) * cout * out_plane;
    col2im(cols.data(), cout, oh, ow, k, opt.stride, opt.padding, h, w, o);
    if (bias.defined()) {
      for (int c = 0; c < cout; ++c) {
        T* row = o + c * out_plane;
        const T bc = bias.data()[c];
        for (std::int64_t i = 0; i < out_plane; ++i) row[i] += bc;
      }
    }
  }
  return make_result<T>(
      kOp, {n, cout, oh, ow}, std::move(out), {&x, &weight, &bias},
      [=](Node<T>& self) {
        auto& xin = self.inputs[0];
        auto& win = self.inputs[1];
        auto& bin = self.inputs[2];
        std::vector<T> cols(static_cast<std::size_t>(patch * in_plane));
        for (int b = 0; b < n; ++b) {
          const T* dout = self.grad.data() + static_cast<std::int64_t>(b) * cout * out_plane;
          if (wants_grad(bin)) {
            auto& g = bin->grad_buffer();
            for (int c = 0; c < cout; ++c) {
              double acc = 0;
              for (std::int64_t i = 0; i < out_plane; ++i) acc += dout[c * out_plane + i];
              g[c] += static_cast<T>(acc);
            }
          }
          if (!wants_grad(win) && !wants_grad(xin)) continue;
          im2col(dout, cout, oh, ow, k, opt.stride, opt.padding, h, w, cols.data());
          ConstMatMap<T> dcols(cols.data(), patch, in_plane);
          if (wants_grad(win)) {
            MatMap<T>(win->grad_buffer().data(), cin, patch).noalias() +=
                ConstMatMap<T>(xin->value.data() + static_cast<std::int64_t>(b) * cin * in_plane, cin, in_plane) *
                dcols.transpose();
          }
          if (wants_grad(xin)) {
            MatMap<T>(xin->grad_buffer().data() + static_cast<std::int64_t>(b) * cin * in_plane, cin, in_plane)
                .noalias() += ConstMatMap<T>(win->value.data(), cin, patch) * dcols;
          }
        }
      });
}

// ---------------------------------------------------------------- pointwise

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, double negative_slope) {
  const T s = static_cast<T>(negative_slope);
  return unary<T>(
      OpKind::kLeakyRelu, x, [s](T v) { return v >= T(0) ? v : v * s; },
      [s](T in, T) { return in >= T(0) ? T(1) : s; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>(
      OpKind::kLog, x, [](T v) { return std::log(v); }, [](T in, T) { return T(1) / in; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>(
      OpKind::kExp, x, [](T v) { return std::exp(v); }, [](T, T out) { return out; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      OpKind::kSigmoid, x, [](T v) { return static_cast<T>(logistic::sigmoid(v)); },
      [](T, T out) { return out * (T(1) - out); });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary<T>(
      OpKind::kSoftplus, x, [](T v) { return static_cast<T>(logistic::softplus(v)); },
      [](T in, T) { return static_cast<T>(logistic::sigmoid(in)); });
}

template <class T>
Tensor<T> clamp(const Tensor<T>& x, double lo, double hi) {
  const T l = static_cast<T>(lo), h = static_cast<T>(hi);
  return unary<T>(
      OpKind::kClamp, x, [l, h](T v) { return std::clamp(v, l, h); },
      [l, h](T in, T) { return (in >= l && in <= h) ? T(1) : T(0); });
}

template <class T>
Tensor<T> straight_through(const Tensor<T>& x, std::vector<T> forward_values) {
  if (static_cast<std::int64_t>(forward_values.size()) != x.numel())
    shape_error(OpKind::kStraightThrough, x.shape(), {static_cast<std::int64_t>(forward_values.size())});
  return make_result<T>(OpKind::kStraightThrough, x.shape(), std::move(forward_values), {&x}, [](Node<T>& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  constexpr OpKind kOp = OpKind::kScaleChannels;
  check_4d(kOp, x.shape(), s.shape());
  if (s.shape() != Shape{x.dim(1)}) shape_error(kOp, x.shape(), s.shape());
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T* row = out.data() + (b * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) row[i] *= s.data()[ch];
    }
  return make_result<T>(kOp, x.shape(), std::move(out), {&x, &s}, [n, c, plane](Node<T>& self) {
    auto& xin = self.inputs[0];
    auto& sin = self.inputs[1];
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const std::int64_t off = (b * c + ch) * plane;
        if (wants_grad(xin)) {
          auto& g = xin->grad_buffer();
          for (std::int64_t i = 0; i < plane; ++i) g[off + i] += self.grad[off + i] * sin->value[ch];
        }
        if (wants_grad(sin)) {
          double acc = 0;
          for (std::int64_t i = 0; i < plane; ++i) acc += double(self.grad[off + i]) * xin->value[off + i];
          sin->grad_buffer()[ch] += static_cast<T>(acc);
        }
      }
  });
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  return make_result<T>(OpKind::kSum, {}, {static_cast<T>(acc)}, {&x}, [](Node<T>& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    for (auto& g : in->grad_buffer()) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  double acc = 0;
  for (T v : x.data()) acc += v;
  const double count = static_cast<double>(x.numel());
  return make_result<T>(OpKind::kMean, {}, {static_cast<T>(acc / count)}, {&x}, [count](Node<T>& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    const T g0 = static_cast<T>(self.grad[0] / count);
    for (auto& g : in->grad_buffer()) g += g0;
  });
}

template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error(OpKind::kMse, a.shape(), b.shape());
  if (a.numel() == 0) throw ShapeError("mse: empty tensor");
  double acc = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double d = double(a.data()[i]) - double(b.data()[i]);
    acc += d * d;
  }
  const double count = static_cast<double>(a.numel());
  return make_result<T>(OpKind::kMse, {}, {static_cast<T>(acc / count)}, {&a, &b}, [count](Node<T>& self) {
    auto& lhs = self.inputs[0];
    auto& rhs = self.inputs[1];
    const double f = 2.0 * double(self.grad[0]) / count;
    const std::size_t len = self.inputs[0] ? self.inputs[0]->value.size() : self.inputs[1]->value.size();
    for (std::size_t i = 0; i < len; ++i) {
      const double d = double(lhs->value[i]) - double(rhs->value[i]);
      if (wants_grad(lhs)) lhs->grad_buffer()[i] += static_cast<T>(f * d);
      if (wants_grad(rhs)) rhs->grad_buffer()[i] -= static_cast<T>(f * d);
    }
  });
}

// ---------------------------------------------------------------- entropy model

template <class T>
Tensor<T> logistic_mixture_bits(const Tensor<T>& y, const Tensor<T>& logits, const Tensor<T>& locs,
                                const Tensor<T>& raw_scales, double min_scale) {
  constexpr OpKind kOp = OpKind::kLogisticMixtureBits;
  check_4d(kOp, y.shape(), logits.shape());
  const std::int64_t n = y.dim(0), c = y.dim(1), plane = y.dim(2) * y.dim(3);
  if (logits.shape().size() != 2 || logits.dim(0) != c) shape_error(kOp, y.shape(), logits.shape());
  const std::int64_t kc = logits.dim(1);
  if (locs.shape() != logits.shape()) shape_error(kOp, logits.shape(), locs.shape());
  if (raw_scales.shape() != logits.shape()) shape_error(kOp, logits.shape(), raw_scales.shape());

  // Per-channel mixture parameters in double, shared with the backward closure.
  struct Table {
    std::int64_t kc;
    std::vector<double> log_w, mu, sc;
    // log P(bin) for one element; fills per-component log masses.
    double log_mass(double v, std::int64_t ch, double* comp) const {
      double mx = -1e300;
      for (std::int64_t j = 0; j < kc; ++j) {
        const std::int64_t i = ch * kc + j;
        const double up = (v + 0.5 - mu[i]) / sc[i];
        const double lo = (v - 0.5 - mu[i]) / sc[i];
        comp[j] = log_w[i] + logistic::log_sigmoid_diff(up, lo);
        mx = std::max(mx, comp[j]);
      }
      double z = 0;
      for (std::int64_t j = 0; j < kc; ++j) z += std::exp(comp[j] - mx);
      return mx + std::log(z);
    }
  };
  auto table = std::make_shared<Table>();
  table->kc = kc;
  table->log_w.resize(c * kc);
  table->mu.resize(c * kc);
  table->sc.resize(c * kc);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mx = -1e300;
    for (std::int64_t j = 0; j < kc; ++j) mx = std::max(mx, double(logits.data()[ch * kc + j]));
    double z = 0;
    for (std::int64_t j = 0; j < kc; ++j) z += std::exp(double(logits.data()[ch * kc + j]) - mx);
    for (std::int64_t j = 0; j < kc; ++j) {
      const std::int64_t i = ch * kc + j;
      table->log_w[i] = double(logits.data()[i]) - mx - std::log(z);
      table->mu[i] = locs.data()[i];
      table->sc[i] = logistic::softplus(raw_scales.data()[i]) + min_scale;
    }
  }

  std::vector<T> out(y.data().size());
  std::vector<double> comp(kc);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t p = 0; p < plane; ++p) {
        const std::int64_t e = (b * c + ch) * plane + p;
        out[e] = static_cast<T>(-table->log_mass(y.data()[e], ch, comp.data()) / logistic::kLn2);
      }

  return make_result<T>(
      kOp, y.shape(), std::move(out), {&y, &logits, &locs, &raw_scales},
      [n, c, plane, kc, table](Node<T>& self) {
        auto& yin = self.inputs[0];
        auto& lin = self.inputs[1];
        auto& min = self.inputs[2];
        auto& sin = self.inputs[3];
        const auto& mu = table->mu;
        const auto& sc = table->sc;
        const auto& log_w = table->log_w;
        std::vector<double> dlogit(c * kc, 0.0), dmu(c * kc, 0.0), dsc(c * kc, 0.0);
        std::vector<double> comp(kc);
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t p = 0; p < plane; ++p) {
              const std::int64_t e = (b * c + ch) * plane + p;
              const double v = yin->value[e];
              const double total = table->log_mass(v, ch, comp.data());
              // d bits / d log_mass_total
              const double g = -double(self.grad[e]) / logistic::kLn2;
              double dy = 0;
              for (std::int64_t j = 0; j < kc; ++j) {
                const std::int64_t i = ch * kc + j;
                const double r = std::exp(comp[j] - total);  // responsibility
                const double up = (v + 0.5 - mu[i]) / sc[i];
                const double lo = (v - 0.5 - mu[i]) / sc[i];
                const double s_up = logistic::sigmoid(-up);  // d log sigma(up) / d up
                const double s_lo = logistic::sigmoid(lo);   // -d log sigma(-lo) / d lo
                const double width = 1.0 / sc[i];
                // d log(component bin mass) with respect to the component inputs
                const double d_v = (s_up - s_lo) / sc[i];
                const double d_s = (-s_up * up + s_lo * lo) / sc[i] - (1.0 / std::expm1(width)) / (sc[i] * sc[i]);
                dy += r * d_v;
                dmu[i] += g * r * -d_v;
                dsc[i] += g * r * d_s;
                dlogit[i] += g * (r - std::exp(log_w[i]));
              }
              if (wants_grad(yin)) yin->grad_buffer()[e] += static_cast<T>(g * dy);
            }
        if (wants_grad(lin)) {
          auto& gl = lin->grad_buffer();
          for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += static_cast<T>(dlogit[i]);
        }
        if (wants_grad(min)) {
          auto& gm = min->grad_buffer();
          for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += static_cast<T>(dmu[i]);
        }
        if (wants_grad(sin)) {
          auto& gs = sin->grad_buffer();
          for (std::size_t i = 0; i < gs.size(); ++i)
            gs[i] += static_cast<T>(dsc[i] * logistic::sigmoid(sin->value[i]));
        }
      });
}

// ---------------------------------------------------------------- instantiation

#define UDIC_INSTANTIATE(T)                                                                                          \
  template class Tensor<T>;                                                                                          \
  template void backward<T>(const Tensor<T>&);                                                                       \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> scale<T>(const Tensor<T>&, double);                                                             \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, double);                                                        \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                                 \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                            \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvOptions);                   \
  template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvOptions);         \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, double);                                                        \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                                       \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                                      \
  template Tensor<T> mse<T>(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> log<T>(const Tensor<T>&);                                                                       \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                                       \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                                   \
  template Tensor<T> softplus<T>(const Tensor<T>&);                                                                  \
  template Tensor<T> clamp<T>(const Tensor<T>&, double, double);                                                     \
  template Tensor<T> scale_channels<T>(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> straight_through<T>(const Tensor<T>&, std::vector<T>);                                          \
  template Tensor<T> logistic_mixture_bits<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                              double);

UDIC_INSTANTIATE(float)
UDIC_INSTANTIATE(double)

#undef UDIC_INSTANTIATE

}  // namespace udic::ad
