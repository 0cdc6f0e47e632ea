// Minimal reverse-mode differentiation over dense row-major tensors.
//
// A Tensor is a handle to a TapeNode. Every op returns a new node that keeps
// references to its inputs and a backward closure; calling backward() on a
// scalar walks the resulting DAG in reverse topological order. Tapes are not
// thread-safe: build and differentiate a graph on one thread.
//
// The op set is closed. Anything the codec needs beyond it is composed.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace udic::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when an op receives incompatible operands. The message names the op
/// and the offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kMatMul,
  kTranspose,
  kReshape,
  kConv2d,
  kConvTranspose2d,
  kLeakyRelu,
  kSum,
  kMean,
  kMse,
  kLog,
  kExp,
  kSigmoid,
  kSoftplus,
  kClamp,
  kScaleChannels,
  kStraightThrough,
  kLogisticMixtureBits,
};

const char* op_name(OpKind op);

template <class T>
struct TapeNode {
  OpKind op = OpKind::kLeaf;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TapeNode>> inputs;
  std::function<void(TapeNode&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using Node = TapeNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<T> data);
  static Tensor parameter(Shape shape, std::vector<T> data);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
  std::span<const T> data() const { return node_->value; }
  /// Writable view of a leaf's storage (optimizers update parameters here).
  std::span<T> mutable_data();
  /// Gradient accumulated by backward(); all zeros if nothing reached it.
  std::span<const T> grad() const;
  T item() const;
  bool requires_grad() const { return node_->requires_grad; }
  OpKind op() const { return node_->op; }
  void zero_grad();
  /// Same values, cut from the tape.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <class T>
void backward(const Tensor<T>& loss);

// Elementwise ops require equal shapes.
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, double factor);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, double offset);

/// [m, k] x [k, n] -> [m, n].
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> transpose(const Tensor<T>& a);
template <class T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

struct ConvOptions {
  int stride = 1;
  int padding = 0;
  int output_padding = 0;  // transposed convolution only
};

/// x: [N, Cin, H, W], weight: [Cout, Cin, K, K], bias: [Cout] or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvOptions opt);

/// x: [N, Cin, H, W], weight: [Cin, Cout, K, K], bias: [Cout] or undefined.
/// Output side is (H - 1) * stride - 2 * padding + K + output_padding.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvOptions opt);

template <class T> Tensor<T> leaky_relu(const Tensor<T>& x, double negative_slope = 0.01);
template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);
/// Mean of (a - b)^2 over all elements.
template <class T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> log(const Tensor<T>& x);
template <class T> Tensor<T> exp(const Tensor<T>& x);
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);
template <class T> Tensor<T> softplus(const Tensor<T>& x);
/// Gradient passes only where lo <= x <= hi.
template <class T> Tensor<T> clamp(const Tensor<T>& x, double lo, double hi);
/// x: [N, C, H, W] times per-channel factors s: [C].
template <class T> Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s);
/// Forward yields `forward_values`; backward is the identity onto x.
template <class T> Tensor<T> straight_through(const Tensor<T>& x, std::vector<T> forward_values);

/// Per-element information content -log2 P(bin) of y under a per-channel
/// mixture of logistics, where the bin is [y - 0.5, y + 0.5]. y: [N, C, H, W];
/// logits, locs, raw_scales: [C, K]. Component scale = softplus(raw) + min_scale.
template <class T>
Tensor<T> logistic_mixture_bits(const Tensor<T>& y, const Tensor<T>& logits, const Tensor<T>& locs,
                                const Tensor<T>& raw_scales, double min_scale);

}  // namespace udic::ad
