#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pcdn/common.hpp"

namespace pcdn::ag {

// Shapes are rank 0..2: {} is not used, {1} is a scalar, {n} a vector,
// {rows, cols} a matrix. Values are stored flat in row-major order.
using Shape = std::vector<Index>;

Index shape_size(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Immutable value node. A Tensor is either a constant (node() < 0) or
// tracked on a Tape. Copies share storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, Eigen::ArrayXd values);
  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor from_matrix(const Eigen::Ref<const MatrixRM>& m);

  const Shape& shape() const { return shape_; }
  Index size() const { return values_ ? values_->size() : 0; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index rows() const;
  Index cols() const;

  const Eigen::ArrayXd& values() const { return *values_; }
  double value() const;  // scalar only
  Eigen::Map<const MatrixRM> matrix() const;

  bool tracked() const { return node_ >= 0; }
  Index node() const { return node_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Tensor(Shape shape, std::shared_ptr<const Eigen::ArrayXd> values, Tape* tape, Index node)
      : shape_(std::move(shape)), values_(std::move(values)), tape_(tape), node_(node) {}

  Shape shape_;
  std::shared_ptr<const Eigen::ArrayXd> values_;
  Tape* tape_ = nullptr;
  Index node_ = -1;
};

enum class OpKind {
  kAdd,
  kSub,
  kMul,
  kMatmul,
  kConcatLastAxis,
  kRelu,
  kSigmoid,
  kExp,
  kSquare,
  kSqrt,
  kSum,
  kMean,
  kGatherRows,
  kSegmentMax,
  kBroadcast,
};

const char* op_kind_name(OpKind k);

// Extra (non-differentiable) arguments for primitives that need them.
struct OpAux {
  std::vector<Index> indices;  // gather-rows targets / segment-max segment map
  Index groups = 0;            // segment-max group count
  Shape target_shape;          // broadcast target
};

// One recorded primitive application. Inputs are stored as Tensor copies
// (cheap: shared storage) so the backward pass has every value it needs.
struct TapeRecord {
  OpKind kind;
  std::vector<Tensor> inputs;
  Tensor output;
  OpAux aux;
  std::vector<Index> argmax;  // segment-max only: winning row per (group, col)
};

// Gradients from one backward pass, indexed by node id. Untouched nodes
// hold zero arrays of the node's size.
using GradientMap = std::vector<Eigen::ArrayXd>;

// Records primitive applications for one forward pass. A Tape is confined
// to a single worker; tensors tracked on it must not mix with tensors from
// another tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // New tracked leaf node (inputs and parameters enter the graph here).
  Tensor leaf(Shape shape, Eigen::ArrayXd values);

  Index num_nodes() const { return static_cast<Index>(node_shapes_.size()); }
  const Shape& node_shape(Index node) const { return node_shapes_[static_cast<std::size_t>(node)]; }
  const std::vector<TapeRecord>& records() const { return records_; }

  GradientMap backward(const Tensor& root) const;

 private:
  friend Tensor detail_emit(OpKind kind, std::vector<Tensor> inputs, Shape out_shape,
                            Eigen::ArrayXd out_values, OpAux aux, std::vector<Index> argmax);

  Index new_node(const Shape& shape);

  std::vector<Shape> node_shapes_;
  std::vector<TapeRecord> records_;
};

// Primitives. Each checks input shapes, rejects non-finite results, and
// records on the inputs' tape when any input is tracked.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor concat_last_axis(const std::vector<Tensor>& parts);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor gather_rows(const Tensor& x, std::span<const Index> rows);
Tensor segment_max(const Tensor& x, std::span<const Index> segments, Index groups);
Tensor broadcast(const Tensor& x, const Shape& target);

// Uniform dispatch over the primitive set (used by generic tests and
// op-chain generators).
Tensor primitive_forward(OpKind kind, const std::vector<Tensor>& inputs, const OpAux& aux = {});

// Convenience wrappers built on the primitives above.
Tensor scale(const Tensor& x, double factor);          // mul by a constant
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);  // x*w + b (bias row broadcast)

GradientMap backward(const Tape& tape, const Tensor& root);

// Max over coordinates of |analytic - central difference| / max(1, |central|)
// for a scalar-valued function of one tensor. `f` is called with a fresh tape
// and a tracked leaf holding the evaluation point.
double finite_difference_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                               const Shape& shape, const Eigen::ArrayXd& x0, double h);

// Learnable array plus its accumulated gradient. Names are unique
// dot-separated paths within a model, e.g. "encoder.unit0.layer1.fc2.weight".
struct Parameter {
  std::string name;
  Shape shape;
  Eigen::ArrayXd value;
  Eigen::ArrayXd grad;

  Parameter() = default;
  Parameter(std::string n, Shape s, Eigen::ArrayXd v)
      : name(std::move(n)), shape(std::move(s)), value(std::move(v)) {
    grad = Eigen::ArrayXd::Zero(value.size());
  }
  void zero_grad() { grad.setZero(); }
};

}  // namespace pcdn::ag
