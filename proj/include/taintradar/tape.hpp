#ifndef TAINTRADAR_TAPE_HPP_
#define TAINTRADAR_TAPE_HPP_

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "taintradar/tensor.hpp"

namespace taintradar {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kConv2d,
  kDense,
  kRelu,
  kMaxPool2d,
  kFlatten,
  kReshape,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAffine,
  kSum,
  kMean,
  kSoftmax,
  kLogSoftmax,
  kLog,
  kSigmoid,
  kMatmul,
  kMaxAll,
  kDivByScalar,
  kSquare,
  kAbs,
  kSqrt,
  kPick,
  kLinearMap,
  kEmbed,
  kConcat,
};

const char* op_name(OpKind kind);

struct Conv2dParams {
  Index stride = 1;
  Index padding = 0;
};

struct PoolParams {
  Index kernel = 2;
  Index stride = 2;
};

/// Operator descriptor. Only the fields relevant to `kind` are meaningful.
template <typename S>
struct OpParams {
  Index stride = 1;
  Index padding = 0;
  Index kernel = 0;
  S a = S(1);  // scale / temperature / affine multiplier
  S b = S(0);  // affine offset, sqrt epsilon
  Shape shape;
  Index offset_h = 0;
  Index offset_w = 0;
  std::vector<Index> indices;
  std::shared_ptr<const Mat<S>> matrix;
};

template <typename S>
struct Node {
  OpKind kind = OpKind::kLeaf;
  std::vector<NodeId> inputs;
  OpParams<S> params;
  Tensor<S> value;
  std::vector<Index> argmax;  // maxpool routing, max_all position
};

/// Append-only record of a computation. Single writer; nodes only refer backwards.
template <typename S>
class Tape {
 public:
  NodeId leaf(Tensor<S> value);
  NodeId record(OpKind kind, std::vector<NodeId> inputs, OpParams<S> params = {});

  const Node<S>& node(NodeId id) const { return nodes_.at(id.index); }
  const Tensor<S>& value(NodeId id) const { return nodes_.at(id.index).value; }
  std::size_t size() const { return nodes_.size(); }
  NodeId last() const { return NodeId{nodes_.size() - 1}; }

  /// Recomputes every non-leaf node from its operands.
  std::vector<Tensor<S>> replay() const;

 private:
  std::vector<Node<S>> nodes_;
};

template <typename S>
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor<S>> grads) : grads_(std::move(grads)) {}
  const Tensor<S>& operator[](NodeId id) const { return grads_.at(id.index); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor<S>> grads_;
};

/// Reverse accumulation from a single-element node. Nodes at or below `floor`
/// are not expanded: `floor` itself still receives its gradient, everything
/// upstream of it stays zero. Node 0 is always a leaf, so the default expands
/// the whole tape.
template <typename S>
Gradients<S> backward(const Tape<S>& tape, NodeId root, NodeId floor = NodeId{0});

// Forward primitives. Each records one node and returns its id.
template <typename S>
NodeId conv2d(Tape<S>& t, NodeId x, NodeId weight, NodeId bias, Conv2dParams p = {});
template <typename S>
NodeId dense(Tape<S>& t, NodeId x, NodeId weight, NodeId bias);
template <typename S>
NodeId relu(Tape<S>& t, NodeId x);
template <typename S>
NodeId maxpool2d(Tape<S>& t, NodeId x, PoolParams p = {});
template <typename S>
NodeId flatten(Tape<S>& t, NodeId x);
template <typename S>
NodeId reshape(Tape<S>& t, NodeId x, Shape shape);
template <typename S>
NodeId add(Tape<S>& t, NodeId a, NodeId b);
template <typename S>
NodeId sub(Tape<S>& t, NodeId a, NodeId b);
template <typename S>
NodeId mul(Tape<S>& t, NodeId a, NodeId b);
template <typename S>
NodeId scale(Tape<S>& t, NodeId x, S factor);
template <typename S>
NodeId affine(Tape<S>& t, NodeId x, S factor, S offset);
template <typename S>
NodeId sum(Tape<S>& t, NodeId x);
template <typename S>
NodeId mean(Tape<S>& t, NodeId x);
/// Row-wise over the last dimension, logits divided by `temperature`.
template <typename S>
NodeId softmax(Tape<S>& t, NodeId x, S temperature = S(1));
template <typename S>
NodeId log_softmax(Tape<S>& t, NodeId x, S temperature = S(1));
template <typename S>
NodeId log(Tape<S>& t, NodeId x);
template <typename S>
NodeId sigmoid(Tape<S>& t, NodeId x);
/// 2-D product; rank-1 right operands are treated as column vectors.
template <typename S>
NodeId matmul(Tape<S>& t, NodeId a, NodeId b);
template <typename S>
NodeId max_all(Tape<S>& t, NodeId x);
template <typename S>
NodeId div_by_scalar(Tape<S>& t, NodeId x, NodeId denom);
template <typename S>
NodeId square(Tape<S>& t, NodeId x);
template <typename S>
NodeId abs(Tape<S>& t, NodeId x);
/// sqrt(x + eps).
template <typename S>
NodeId sqrt(Tape<S>& t, NodeId x, S eps = S(0));
/// Gathers flat elements into a rank-1 tensor.
template <typename S>
NodeId pick(Tape<S>& t, NodeId x, std::vector<Index> flat_indices);
/// y = M * vec(x), reshaped to `out_shape`.
template <typename S>
NodeId linear_map(Tape<S>& t, NodeId x, std::shared_ptr<const Mat<S>> m, Shape out_shape);
/// Places a C x h x w tensor into a zero C x H x W canvas at (top, left).
template <typename S>
NodeId embed(Tape<S>& t, NodeId x, Shape canvas, Index top, Index left);
/// Concatenates along the first dimension.
template <typename S>
NodeId concat(Tape<S>& t, const std::vector<NodeId>& parts);

/// Non-recording softmax over a rank-1 tensor.
template <typename S>
Tensor<S> softmax_with_temperature(const Tensor<S>& logits, S temperature);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
template <typename S>
Tensor<S> finite_difference_gradient(const std::function<S(const Tensor<S>&)>& f,
                                     const Tensor<S>& x, S h);

Index conv_output_size(Index in, Index kernel, Index stride, Index padding);

}  // namespace taintradar

#endif  // TAINTRADAR_TAPE_HPP_
