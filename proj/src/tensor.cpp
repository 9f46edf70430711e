#include "pcdn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace pcdn::ag {

Index shape_size(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kConcatLastAxis: return "concat-last-axis";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kExp: return "exp";
    case OpKind::kSquare: return "square";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kGatherRows: return "gather-rows";
    case OpKind::kSegmentMax: return "segment-max";
    case OpKind::kBroadcast: return "broadcast";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::constant(Shape shape, Eigen::ArrayXd values) {
  if (shape_size(shape) != values.size())
    throw DataError("Tensor::constant: shape " + shape_str(shape) + " does not match " +
                    std::to_string(values.size()) + " values");
  return Tensor(std::move(shape), std::make_shared<const Eigen::ArrayXd>(std::move(values)),
                nullptr, -1);
}

Tensor Tensor::scalar(double v) {
  Eigen::ArrayXd one(1);
  one << v;
  return constant({1}, std::move(one));
}

Tensor Tensor::zeros(Shape shape) {
  Eigen::ArrayXd z = Eigen::ArrayXd::Zero(shape_size(shape));
  return constant(std::move(shape), std::move(z));
}

Tensor Tensor::from_matrix(const Eigen::Ref<const MatrixRM>& m) {
  Eigen::ArrayXd flat(m.size());
  Eigen::Map<MatrixRM>(flat.data(), m.rows(), m.cols()) = m;
  return constant({m.rows(), m.cols()}, std::move(flat));
}

Index Tensor::rows() const {
  if (shape_.empty()) throw DataError("Tensor::rows on rank-0 tensor");
  return shape_[0];
}

Index Tensor::cols() const {
  if (rank() == 2) return shape_[1];
  if (rank() == 1) return 1;
  throw DataError("Tensor::cols on rank-0 tensor");
}

double Tensor::value() const {
  if (size() != 1) throw DataError("Tensor::value: tensor is not scalar, shape " + shape_str(shape_));
  return (*values_)(0);
}

Eigen::Map<const MatrixRM> Tensor::matrix() const {
  return Eigen::Map<const MatrixRM>(values_->data(), rows(), cols());
}

// ---------------------------------------------------------------------------
// Tape

Index Tape::new_node(const Shape& shape) {
  node_shapes_.push_back(shape);
  return static_cast<Index>(node_shapes_.size()) - 1;
}

Tensor Tape::leaf(Shape shape, Eigen::ArrayXd values) {
  if (shape_size(shape) != values.size())
    throw DataError("Tape::leaf: shape does not match value count");
  if (!values.allFinite()) throw NumericError("Tape::leaf: non-finite values");
  const Index node = new_node(shape);
  return Tensor(std::move(shape), std::make_shared<const Eigen::ArrayXd>(std::move(values)),
                this, node);
}

namespace {

// The tape the output lands on: the unique tape of the tracked inputs, or
// null when every input is a constant.
Tape* output_tape(const std::vector<Tensor>& inputs) {
  Tape* t = nullptr;
  for (const Tensor& in : inputs) {
    if (!in.tracked()) continue;
    if (t != nullptr && in.tape() != t)
      throw DataError("primitive: inputs tracked on different tapes");
    t = in.tape();
  }
  return t;
}

}  // namespace

struct EmitAccess {
  static Tensor emit(OpKind kind, std::vector<Tensor> inputs, Shape out_shape,
                     Eigen::ArrayXd out_values, OpAux aux, std::vector<Index> argmax) {
    if (!out_values.allFinite())
      throw NumericError(std::string("primitive ") + op_kind_name(kind) +
                         ": non-finite result");
    Tape* tape = output_tape(inputs);
    if (tape == nullptr) {
      return Tensor::constant(std::move(out_shape), std::move(out_values));
    }
    const Index node = tape->new_node(out_shape);
    Tensor out(std::move(out_shape), std::make_shared<const Eigen::ArrayXd>(std::move(out_values)),
               tape, node);
    tape->records_.push_back(TapeRecord{kind, std::move(inputs), out, std::move(aux),
                                        std::move(argmax)});
    return out;
  }
};

namespace {

Tensor emit(OpKind kind, std::vector<Tensor> inputs, Shape out_shape, Eigen::ArrayXd out_values,
            OpAux aux = {}, std::vector<Index> argmax = {}) {
  return EmitAccess::emit(kind, std::move(inputs), std::move(out_shape), std::move(out_values),
                          std::move(aux), std::move(argmax));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DataError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
}

void require_rank2(const char* op, const Tensor& x) {
  if (x.rank() != 2)
    throw DataError(std::string(op) + ": expected rank-2 tensor, got shape " +
                    shape_str(x.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Primitives

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return emit(OpKind::kAdd, {a, b}, a.shape(), a.values() + b.values());
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return emit(OpKind::kSub, {a, b}, a.shape(), a.values() - b.values());
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  return emit(OpKind::kMul, {a, b}, a.shape(), a.values() * b.values());
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  if (a.cols() != b.rows())
    throw DataError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                    shape_str(b.shape()));
  Eigen::ArrayXd out(a.rows() * b.cols());
  Eigen::Map<MatrixRM>(out.data(), a.rows(), b.cols()).noalias() = a.matrix() * b.matrix();
  return emit(OpKind::kMatmul, {a, b}, {a.rows(), b.cols()}, std::move(out));
}

Tensor concat_last_axis(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DataError("concat-last-axis: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Tensor& p : parts) {
    require_rank2("concat-last-axis", p);
    if (p.rows() != rows) throw DataError("concat-last-axis: row counts differ");
    cols += p.cols();
  }
  Eigen::ArrayXd out(rows * cols);
  Eigen::Map<MatrixRM> m(out.data(), rows, cols);
  Index at = 0;
  for (const Tensor& p : parts) {
    m.middleCols(at, p.cols()) = p.matrix();
    at += p.cols();
  }
  return emit(OpKind::kConcatLastAxis, parts, {rows, cols}, std::move(out));
}

Tensor relu(const Tensor& x) {
  return emit(OpKind::kRelu, {x}, x.shape(), x.values().max(0.0));
}

Tensor sigmoid(const Tensor& x) {
  // Split by sign so neither branch exponentiates a positive argument.
  Eigen::ArrayXd out(x.size());
  const Eigen::ArrayXd& v = x.values();
  for (Index i = 0; i < v.size(); ++i) {
    const double z = v(i);
    if (z >= 0.0) {
      out(i) = 1.0 / (1.0 + std::exp(-z));
    } else {
      const double e = std::exp(z);
      out(i) = e / (1.0 + e);
    }
  }
  return emit(OpKind::kSigmoid, {x}, x.shape(), std::move(out));
}

Tensor exp(const Tensor& x) {
  return emit(OpKind::kExp, {x}, x.shape(), x.values().exp());
}

Tensor square(const Tensor& x) {
  return emit(OpKind::kSquare, {x}, x.shape(), x.values().square());
}

Tensor sqrt(const Tensor& x) {
  if ((x.values() < 0.0).any()) throw NumericError("sqrt: negative input");
  return emit(OpKind::kSqrt, {x}, x.shape(), x.values().sqrt());
}

Tensor sum(const Tensor& x) {
  Eigen::ArrayXd out(1);
  out(0) = x.values().sum();
  return emit(OpKind::kSum, {x}, {1}, std::move(out));
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DataError("mean: empty tensor");
  Eigen::ArrayXd out(1);
  out(0) = x.values().mean();
  return emit(OpKind::kMean, {x}, {1}, std::move(out));
}

Tensor gather_rows(const Tensor& x, std::span<const Index> rows) {
  require_rank2("gather-rows", x);
  const Index n = x.rows();
  const Index c = x.cols();
  const Index r = static_cast<Index>(rows.size());
  Eigen::ArrayXd out(r * c);
  Eigen::Map<MatrixRM> m(out.data(), r, c);
  for (Index i = 0; i < r; ++i) {
    const Index src = rows[static_cast<std::size_t>(i)];
    if (src < 0 || src >= n)
      throw DataError("gather-rows: index " + std::to_string(src) + " out of bounds for " +
                      std::to_string(n) + " rows");
    m.row(i) = x.matrix().row(src);
  }
  OpAux aux;
  aux.indices.assign(rows.begin(), rows.end());
  return emit(OpKind::kGatherRows, {x}, {r, c}, std::move(out), std::move(aux));
}

Tensor segment_max(const Tensor& x, std::span<const Index> segments, Index groups) {
  require_rank2("segment-max", x);
  const Index rows = x.rows();
  const Index cols = x.cols();
  if (static_cast<Index>(segments.size()) != rows)
    throw DataError("segment-max: segment map length does not match row count");
  if (groups <= 0) throw DataError("segment-max: group count must be positive");

  Eigen::ArrayXd out = Eigen::ArrayXd::Constant(groups * cols,
                                                -std::numeric_limits<double>::infinity());
  Eigen::Map<MatrixRM> m(out.data(), groups, cols);
  std::vector<Index> argmax(static_cast<std::size_t>(groups * cols), -1);
  std::vector<char> seen(static_cast<std::size_t>(groups), 0);
  const auto xm = x.matrix();
  // Ascending row scan with strict '>' keeps the first occurrence on ties.
  for (Index r = 0; r < rows; ++r) {
    const Index g = segments[static_cast<std::size_t>(r)];
    if (g < 0 || g >= groups)
      throw DataError("segment-max: segment id " + std::to_string(g) + " out of range");
    seen[static_cast<std::size_t>(g)] = 1;
    for (Index c = 0; c < cols; ++c) {
      if (xm(r, c) > m(g, c)) {
        m(g, c) = xm(r, c);
        argmax[static_cast<std::size_t>(g * cols + c)] = r;
      }
    }
  }
  for (Index g = 0; g < groups; ++g) {
    if (!seen[static_cast<std::size_t>(g)])
      throw DataError("segment-max: empty segment " + std::to_string(g));
  }
  OpAux aux;
  aux.indices.assign(segments.begin(), segments.end());
  aux.groups = groups;
  return emit(OpKind::kSegmentMax, {x}, {groups, cols}, std::move(out), std::move(aux),
              std::move(argmax));
}

namespace {

enum class BroadcastPattern { kScalar, kRow, kCol };

BroadcastPattern broadcast_pattern(const Shape& from, const Shape& to) {
  if (shape_size(from) == 1) return BroadcastPattern::kScalar;
  if (from.size() == 2 && to.size() == 2) {
    if (from[0] == 1 && from[1] == to[1] && to[0] >= 1) return BroadcastPattern::kRow;
    if (from[1] == 1 && from[0] == to[0] && to[1] >= 1) return BroadcastPattern::kCol;
  }
  throw DataError("broadcast: unsupported " + shape_str(from) + " -> " + shape_str(to));
}

}  // namespace

Tensor broadcast(const Tensor& x, const Shape& target) {
  const BroadcastPattern p = broadcast_pattern(x.shape(), target);
  Eigen::ArrayXd out(shape_size(target));
  switch (p) {
    case BroadcastPattern::kScalar:
      out.setConstant(x.values()(0));
      break;
    case BroadcastPattern::kRow: {
      Eigen::Map<MatrixRM> m(out.data(), target[0], target[1]);
      m = x.matrix().row(0).replicate(target[0], 1);
      break;
    }
    case BroadcastPattern::kCol: {
      Eigen::Map<MatrixRM> m(out.data(), target[0], target[1]);
      m = x.matrix().col(0).replicate(1, target[1]);
      break;
    }
  }
  OpAux aux;
  aux.target_shape = target;
  return emit(OpKind::kBroadcast, {x}, target, std::move(out), std::move(aux));
}

Tensor primitive_forward(OpKind kind, const std::vector<Tensor>& inputs, const OpAux& aux) {
  const auto arity = [&](std::size_t n) {
    if (inputs.size() != n)
      throw DataError(std::string("primitive ") + op_kind_name(kind) + ": expected " +
                      std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
  };
  switch (kind) {
    case OpKind::kAdd: arity(2); return add(inputs[0], inputs[1]);
    case OpKind::kSub: arity(2); return sub(inputs[0], inputs[1]);
    case OpKind::kMul: arity(2); return mul(inputs[0], inputs[1]);
    case OpKind::kMatmul: arity(2); return matmul(inputs[0], inputs[1]);
    case OpKind::kConcatLastAxis: return concat_last_axis(inputs);
    case OpKind::kRelu: arity(1); return relu(inputs[0]);
    case OpKind::kSigmoid: arity(1); return sigmoid(inputs[0]);
    case OpKind::kExp: arity(1); return exp(inputs[0]);
    case OpKind::kSquare: arity(1); return square(inputs[0]);
    case OpKind::kSqrt: arity(1); return sqrt(inputs[0]);
    case OpKind::kSum: arity(1); return sum(inputs[0]);
    case OpKind::kMean: arity(1); return mean(inputs[0]);
    case OpKind::kGatherRows: arity(1); return gather_rows(inputs[0], aux.indices);
    case OpKind::kSegmentMax: arity(1); return segment_max(inputs[0], aux.indices, aux.groups);
    case OpKind::kBroadcast: arity(1); return broadcast(inputs[0], aux.target_shape);
  }
  throw DataError("primitive_forward: unknown op kind");
}

Tensor scale(const Tensor& x, double factor) {
  return mul(x, Tensor::constant(x.shape(), Eigen::ArrayXd::Constant(x.size(), factor)));
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return add(y, broadcast(b, y.shape()));
}

// ---------------------------------------------------------------------------
// Backward

namespace {

// Accumulates d(root)/d(record inputs) given d(root)/d(record output).
void accumulate_vjp(const TapeRecord& rec, const Eigen::ArrayXd& g, GradientMap& grads) {
  const auto add_into = [&grads](const Tensor& t, const Eigen::ArrayXd& delta) {
    if (t.tracked()) grads[static_cast<std::size_t>(t.node())] += delta;
  };
  const auto tracked = [](const Tensor& t) { return t.tracked(); };

  switch (rec.kind) {
    case OpKind::kAdd:
      add_into(rec.inputs[0], g);
      add_into(rec.inputs[1], g);
      break;
    case OpKind::kSub:
      add_into(rec.inputs[0], g);
      if (tracked(rec.inputs[1]))
        grads[static_cast<std::size_t>(rec.inputs[1].node())] -= g;
      break;
    case OpKind::kMul:
      add_into(rec.inputs[0], g * rec.inputs[1].values());
      add_into(rec.inputs[1], g * rec.inputs[0].values());
      break;
    case OpKind::kMatmul: {
      const Tensor& a = rec.inputs[0];
      const Tensor& b = rec.inputs[1];
      Eigen::Map<const MatrixRM> gm(g.data(), a.rows(), b.cols());
      if (tracked(a)) {
        Eigen::ArrayXd da(a.size());
        Eigen::Map<MatrixRM>(da.data(), a.rows(), a.cols()).noalias() =
            gm * b.matrix().transpose();
        grads[static_cast<std::size_t>(a.node())] += da;
      }
      if (tracked(b)) {
        Eigen::ArrayXd db(b.size());
        Eigen::Map<MatrixRM>(db.data(), b.rows(), b.cols()).noalias() =
            a.matrix().transpose() * gm;
        grads[static_cast<std::size_t>(b.node())] += db;
      }
      break;
    }
    case OpKind::kConcatLastAxis: {
      const Index rows = rec.output.rows();
      Eigen::Map<const MatrixRM> gm(g.data(), rows, rec.output.cols());
      Index at = 0;
      for (const Tensor& p : rec.inputs) {
        if (tracked(p)) {
          Eigen::ArrayXd dp(p.size());
          Eigen::Map<MatrixRM>(dp.data(), rows, p.cols()) = gm.middleCols(at, p.cols());
          grads[static_cast<std::size_t>(p.node())] += dp;
        }
        at += p.cols();
      }
      break;
    }
    case OpKind::kRelu:
      // Gradient at exactly 0 is defined as 0.
      add_into(rec.inputs[0], g * (rec.inputs[0].values() > 0.0).cast<double>());
      break;
    case OpKind::kSigmoid: {
      const Eigen::ArrayXd& y = rec.output.values();
      add_into(rec.inputs[0], g * y * (1.0 - y));
      break;
    }
    case OpKind::kExp:
      add_into(rec.inputs[0], g * rec.output.values());
      break;
    case OpKind::kSquare:
      add_into(rec.inputs[0], g * 2.0 * rec.inputs[0].values());
      break;
    case OpKind::kSqrt: {
      const Eigen::ArrayXd& y = rec.output.values();
      // Subgradient 0 at the origin keeps norms of zero vectors finite.
      Eigen::ArrayXd d = (y > 0.0).select(g / (2.0 * y), Eigen::ArrayXd::Zero(y.size()));
      add_into(rec.inputs[0], d);
      break;
    }
    case OpKind::kSum:
      if (tracked(rec.inputs[0]))
        grads[static_cast<std::size_t>(rec.inputs[0].node())] += g(0);
      break;
    case OpKind::kMean:
      if (tracked(rec.inputs[0]))
        grads[static_cast<std::size_t>(rec.inputs[0].node())] +=
            g(0) / static_cast<double>(rec.inputs[0].size());
      break;
    case OpKind::kGatherRows: {
      const Tensor& x = rec.inputs[0];
      if (!tracked(x)) break;
      Eigen::ArrayXd& gx = grads[static_cast<std::size_t>(x.node())];
      Eigen::Map<MatrixRM> gxm(gx.data(), x.rows(), x.cols());
      Eigen::Map<const MatrixRM> gm(g.data(), rec.output.rows(), x.cols());
      // Duplicated indices accumulate.
      for (Index r = 0; r < rec.output.rows(); ++r)
        gxm.row(rec.aux.indices[static_cast<std::size_t>(r)]) += gm.row(r);
      break;
    }
    case OpKind::kSegmentMax: {
      const Tensor& x = rec.inputs[0];
      if (!tracked(x)) break;
      Eigen::ArrayXd& gx = grads[static_cast<std::size_t>(x.node())];
      Eigen::Map<MatrixRM> gxm(gx.data(), x.rows(), x.cols());
      Eigen::Map<const MatrixRM> gm(g.data(), rec.aux.groups, x.cols());
      for (Index grp = 0; grp < rec.aux.groups; ++grp)
        for (Index c = 0; c < x.cols(); ++c)
          gxm(rec.argmax[static_cast<std::size_t>(grp * x.cols() + c)], c) += gm(grp, c);
      break;
    }
    case OpKind::kBroadcast: {
      const Tensor& x = rec.inputs[0];
      if (!tracked(x)) break;
      Eigen::ArrayXd& gx = grads[static_cast<std::size_t>(x.node())];
      switch (broadcast_pattern(x.shape(), rec.output.shape())) {
        case BroadcastPattern::kScalar:
          gx(0) += g.sum();
          break;
        case BroadcastPattern::kRow: {
          Eigen::Map<const MatrixRM> gm(g.data(), rec.output.rows(), rec.output.cols());
          Eigen::Map<MatrixRM>(gx.data(), 1, x.cols()) += gm.colwise().sum();
          break;
        }
        case BroadcastPattern::kCol: {
          Eigen::Map<const MatrixRM> gm(g.data(), rec.output.rows(), rec.output.cols());
          Eigen::Map<MatrixRM>(gx.data(), x.rows(), 1) += gm.rowwise().sum();
          break;
        }
      }
      break;
    }
  }
}

}  // namespace

GradientMap Tape::backward(const Tensor& root) const {
  if (!root.tracked() || root.tape() != this)
    throw DataError("backward: root is not tracked on this tape");
  if (root.size() != 1) throw DataError("backward: root must be scalar");

  GradientMap grads(static_cast<std::size_t>(num_nodes()));
  for (Index i = 0; i < num_nodes(); ++i)
    grads[static_cast<std::size_t>(i)] =
        Eigen::ArrayXd::Zero(shape_size(node_shapes_[static_cast<std::size_t>(i)]));
  grads[static_cast<std::size_t>(root.node())](0) = 1.0;

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    const Eigen::ArrayXd& g = grads[static_cast<std::size_t>(it->output.node())];
    accumulate_vjp(*it, g, grads);
  }
  return grads;
}

GradientMap backward(const Tape& tape, const Tensor& root) { return tape.backward(root); }

double finite_difference_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                               const Shape& shape, const Eigen::ArrayXd& x0, double h) {
  if (h <= 0.0) throw DataError("finite_difference_check: h must be positive");
  if (shape_size(shape) != x0.size())
    throw DataError("finite_difference_check: shape does not match point");

  Tape tape;
  Tensor x = tape.leaf(shape, x0);
  Tensor y = f(tape, x);
  if (y.size() != 1) throw DataError("finite_difference_check: f must return a scalar");
  GradientMap grads = tape.backward(y);
  const Eigen::ArrayXd analytic = grads[static_cast<std::size_t>(x.node())];

  const auto eval = [&](const Eigen::ArrayXd& at) {
    Tape t;
    Tensor xt = t.leaf(shape, at);
    return f(t, xt).value();
  };

  double worst = 0.0;
  for (Index i = 0; i < x0.size(); ++i) {
    Eigen::ArrayXd xp = x0;
    Eigen::ArrayXd xm = x0;
    xp(i) += h;
    xm(i) -= h;
    const double fd = (eval(xp) - eval(xm)) / (2.0 * h);
    const double err = std::abs(analytic(i) - fd) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace pcdn::ag
