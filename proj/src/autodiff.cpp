#include "famp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace famp::ad {

// ---------------------------------------------------------------------------
// Shape

Shape Shape::drop_last() const {
  switch (rank) {
    case 0:
    case 1:
      return scalar();
    case 2:
      return vector(dims[0]);
    default:
      return matrix(dims[0], dims[1]);
  }
}

Shape Shape::append(std::size_t n) const {
  switch (rank) {
    case 0:
      return vector(n);
    case 1:
      return matrix(dims[0], n);
    case 2:
      return tensor3(dims[0], dims[1], n);
    default:
      throw ShapeError("append: rank would exceed 3");
  }
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < rank; ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::PowScalar: return "pow_scalar";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Expand: return "expand";
    case Op::RowSum: return "row_sum";
    case Op::RowExpand: return "row_expand";
    case Op::IndexSelect: return "index_select";
    case Op::ScatterAdd: return "scatter_add";
    case Op::Slice: return "slice";
    case Op::Pad: return "pad";
    case Op::Reshape: return "reshape";
    case Op::Concat: return "concat";
    case Op::MatVec: return "matvec";
    case Op::MatVecT: return "matvec_t";
    case Op::Outer: return "outer";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::LogSumExp: return "logsumexp";
    case Op::Sigmoid: return "sigmoid";
    case Op::StopGradient: return "stop_gradient";
    case Op::DiscCumsum: return "discounted_cumsum";
    case Op::RevDiscCumsum: return "reverse_discounted_cumsum";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Var / Tape

Shape Var::shape() const { return tape_->node(id_).shape; }
bool Var::tracked() const { return tape_->node(id_).tracked; }
std::span<const double> Var::values() const { return tape_->values(id_); }

double Var::item() const {
  if (numel() != 1) throw ShapeError("item: node of shape " + shape().str() + " is not scalar");
  return values()[0];
}

Array Var::array() const {
  auto v = values();
  return {shape(), std::vector<double>(v.begin(), v.end())};
}

Tape::Tape(std::size_t reserve_nodes) {
  nodes_.reserve(reserve_nodes);
  values_.reserve(reserve_nodes * 4);
}

NodeId Tape::emplace(Op op, const Shape& shape, NodeId a, NodeId b, bool tracked) {
  if (nodes_.size() >= kNoNode) throw std::length_error("tape: node limit reached");
  Node n;
  n.shape = shape;
  n.offset = values_.size();
  n.a = a;
  n.b = b;
  n.aux_begin = static_cast<std::uint32_t>(aux_.size());
  n.op = op;
  n.tracked = tracked;
  values_.resize(values_.size() + shape.numel());
  nodes_.push_back(n);
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Tape::set_aux(NodeId id, std::span<const std::uint32_t> aux) {
  Node& n = nodes_[id];
  n.aux_begin = static_cast<std::uint32_t>(aux_.size());
  n.aux_count = static_cast<std::uint32_t>(aux.size());
  // `aux` may point into aux_ itself (backward of index_select)
  const std::uint32_t* base = aux_.data();
  if (!aux_.empty() && aux.data() >= base && aux.data() < base + aux_.size()) {
    const std::vector<std::uint32_t> copy(aux.begin(), aux.end());
    aux_.insert(aux_.end(), copy.begin(), copy.end());
  } else {
    aux_.insert(aux_.end(), aux.begin(), aux.end());
  }
}

void Tape::check_finite(NodeId id) {
  for (double v : values(id)) {
    if (!std::isfinite(v)) {
      const Op op = nodes_[id].op;
      truncate(id);
      throw DomainError(std::string(op_name(op)) + ": non-finite result");
    }
  }
}

void Tape::truncate(std::size_t n) {
  if (n >= nodes_.size()) return;
  values_.resize(nodes_[n].offset);
  aux_.resize(nodes_[n].aux_begin);
  nodes_.resize(n);
}

Var Tape::leaf(std::span<const double> values, Shape shape, bool tracked) {
  if (values.size() != shape.numel())
    throw ShapeError("leaf: " + std::to_string(values.size()) + " values for shape " + shape.str());
  for (double v : values)
    if (!std::isfinite(v)) throw DomainError("leaf: non-finite input");
  NodeId id = emplace(Op::Leaf, shape, kNoNode, kNoNode, tracked);
  std::copy(values.begin(), values.end(), values_.begin() + nodes_[id].offset);
  return {this, id};
}

Var Tape::scalar(double v, bool tracked) {
  return leaf(std::span<const double>(&v, 1), Shape::scalar(), tracked);
}

std::vector<NodeId> Tape::parents(NodeId id) const {
  const Node& n = nodes_[id];
  if (n.op == Op::Concat) {
    auto a = aux(id);
    return {a.begin(), a.end()};
  }
  std::vector<NodeId> out;
  if (n.a != kNoNode) out.push_back(n.a);
  if (n.b != kNoNode) out.push_back(n.b);
  return out;
}

// ---------------------------------------------------------------------------
// Primitive implementations

namespace {

Tape& tape_of(Var a, const char* op) {
  if (!a.valid()) throw ShapeError(std::string(op) + ": invalid node handle");
  return *a.tape();
}

Tape& tape_of(Var a, Var b, const char* op) {
  Tape& t = tape_of(a, op);
  if (b.tape() != &t) throw ShapeError(std::string(op) + ": operands live on different tapes");
  return t;
}

void require_same_shape(Var a, Var b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
}

void require_rank1(Var a, const char* op) {
  if (a.shape().rank != 1)
    throw ShapeError(std::string(op) + ": expected a vector, got " + a.shape().str());
}

template <class F>
Var binary(Op op, Var a, Var b, F f) {
  Tape& t = tape_of(a, b, op_name(op));
  require_same_shape(a, b, op_name(op));
  const NodeId id = t.emplace(op, a.shape(), a.id(), b.id(), a.tracked() || b.tracked());
  auto x = t.values(a.id());
  auto y = t.values(b.id());
  auto out = t.mutable_values(id);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  t.check_finite(id);
  return {&t, id};
}

template <class F>
Var unary(Op op, Var a, double scalar, F f, bool tracked) {
  Tape& t = tape_of(a, op_name(op));
  const NodeId id = t.emplace(op, a.shape(), a.id(), kNoNode, tracked);
  t.mutable_node(id).scalar = scalar;
  auto x = t.values(a.id());
  auto out = t.mutable_values(id);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  t.check_finite(id);
  return {&t, id};
}

template <class F>
Var unary(Op op, Var a, double scalar, F f) {
  return unary(op, a, scalar, f, a.tracked());
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Row-wise kernels along the trailing axis.
void softmax_rows(std::span<const double> x, std::size_t cols, std::span<double> out) {
  for (std::size_t r = 0; r * cols < x.size(); ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = out.data() + r * cols;
    const double m = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (yr[c] = std::exp(xr[c] - m));
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= z;
  }
}

void logsumexp_rows(std::span<const double> x, std::size_t cols, std::span<double> out) {
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* xr = x.data() + r * cols;
    const double m = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - m);
    out[r] = m + std::log(z);
  }
}

}  // namespace

Var add(Var a, Var b) {
  return binary(Op::Add, a, b, [](double x, double y) { return x + y; });
}
Var sub(Var a, Var b) {
  return binary(Op::Sub, a, b, [](double x, double y) { return x - y; });
}
Var mul(Var a, Var b) {
  return binary(Op::Mul, a, b, [](double x, double y) { return x * y; });
}
Var div(Var a, Var b) {
  tape_of(a, b, "div");
  for (double v : b.values())
    if (v == 0.0) throw DomainError("div: division by zero");
  return binary(Op::Div, a, b, [](double x, double y) { return x / y; });
}
Var neg(Var x) {
  return unary(Op::Neg, x, 0.0, [](double v) { return -v; });
}
Var exp(Var x) {
  return unary(Op::Exp, x, 0.0, [](double v) { return std::exp(v); });
}
Var log(Var x) {
  tape_of(x, "log");
  for (double v : x.values())
    if (!(v > 0.0)) throw DomainError("log: argument " + std::to_string(v) + " is not positive");
  return unary(Op::Log, x, 0.0, [](double v) { return std::log(v); });
}
Var pow_scalar(Var x, double p) {
  tape_of(x, "pow_scalar");
  const bool integral = std::floor(p) == p;
  for (double v : x.values()) {
    if (v < 0.0 && !integral) throw DomainError("pow_scalar: negative base with fractional exponent");
    if (v == 0.0 && p < 0.0) throw DomainError("pow_scalar: zero base with negative exponent");
  }
  return unary(Op::PowScalar, x, p, [p](double v) { return std::pow(v, p); });
}
Var scale(Var x, double c) {
  return unary(Op::Scale, x, c, [c](double v) { return c * v; });
}
Var add_scalar(Var x, double c) {
  return unary(Op::AddScalar, x, c, [c](double v) { return v + c; });
}
Var sigmoid(Var x) {
  return unary(Op::Sigmoid, x, 0.0, stable_sigmoid);
}
Var stop_gradient(Var x) {
  return unary(Op::StopGradient, x, 0.0, [](double v) { return v; }, false);
}
Var magic_box(Var x) { return exp(sub(x, stop_gradient(x))); }

Var sum(Var x) {
  Tape& t = tape_of(x, "sum");
  const NodeId id = t.emplace(Op::Sum, Shape::scalar(), x.id(), kNoNode, x.tracked());
  double s = 0.0;
  for (double v : t.values(x.id())) s += v;
  t.mutable_values(id)[0] = s;
  t.check_finite(id);
  return {&t, id};
}

Var mean(Var x) {
  Tape& t = tape_of(x, "mean");
  const std::size_t n = x.numel();
  if (n == 0) throw ShapeError("mean: empty input");
  const NodeId id = t.emplace(Op::Mean, Shape::scalar(), x.id(), kNoNode, x.tracked());
  double s = 0.0;
  for (double v : t.values(x.id())) s += v;
  t.mutable_values(id)[0] = s / static_cast<double>(n);
  return {&t, id};
}

Var expand(Var x, Shape shape) {
  Tape& t = tape_of(x, "expand");
  if (x.numel() != 1) throw ShapeError("expand: input " + x.shape().str() + " is not scalar");
  const NodeId id = t.emplace(Op::Expand, shape, x.id(), kNoNode, x.tracked());
  const double v = t.values(x.id())[0];
  auto out = t.mutable_values(id);
  std::fill(out.begin(), out.end(), v);
  return {&t, id};
}

Var row_sum(Var x) {
  Tape& t = tape_of(x, "row_sum");
  const Shape in = x.shape();
  const std::size_t cols = in.cols();
  const NodeId id = t.emplace(Op::RowSum, in.drop_last(), x.id(), kNoNode, x.tracked());
  auto xv = t.values(x.id());
  auto out = t.mutable_values(id);
  for (std::size_t r = 0; r < out.size(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += xv[r * cols + c];
    out[r] = s;
  }
  t.check_finite(id);
  return {&t, id};
}

Var row_expand(Var x, std::size_t cols) {
  Tape& t = tape_of(x, "row_expand");
  const NodeId id = t.emplace(Op::RowExpand, x.shape().append(cols), x.id(), kNoNode, x.tracked());
  t.mutable_node(id).extent = cols;
  auto xv = t.values(x.id());
  auto out = t.mutable_values(id);
  for (std::size_t r = 0; r < xv.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r];
  return {&t, id};
}

Var index_select(Var x, std::span<const std::uint32_t> indices, Shape shape) {
  Tape& t = tape_of(x, "index_select");
  if (shape.numel() != indices.size())
    throw ShapeError("index_select: " + std::to_string(indices.size()) + " indices for shape " +
                     shape.str());
  const std::size_t n = x.numel();
  for (auto i : indices)
    if (i >= n) throw ShapeError("index_select: index " + std::to_string(i) + " out of range");
  const NodeId id = t.emplace(Op::IndexSelect, shape, x.id(), kNoNode, x.tracked());
  t.set_aux(id, indices);
  auto idx = t.aux(id);  // `indices` may have pointed into the aux pool
  auto xv = t.values(x.id());
  auto out = t.mutable_values(id);
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = xv[idx[i]];
  return {&t, id};
}

Var index_select(Var x, std::span<const std::uint32_t> indices) {
  return index_select(x, indices, Shape::vector(indices.size()));
}

Var scatter_add(Var x, std::span<const std::uint32_t> indices, Shape shape) {
  Tape& t = tape_of(x, "scatter_add");
  if (x.numel() != indices.size())
    throw ShapeError("scatter_add: " + std::to_string(indices.size()) + " indices for " +
                     std::to_string(x.numel()) + " values");
  const std::size_t n = shape.numel();
  for (auto i : indices)
    if (i >= n) throw ShapeError("scatter_add: index " + std::to_string(i) + " out of range");
  const NodeId id = t.emplace(Op::ScatterAdd, shape, x.id(), kNoNode, x.tracked());
  t.set_aux(id, indices);
  auto idx = t.aux(id);
  auto xv = t.values(x.id());
  auto out = t.mutable_values(id);
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] += xv[i];
  return {&t, id};
}

Var slice(Var x, std::size_t offset, Shape shape) {
  Tape& t = tape_of(x, "slice");
  if (offset + shape.numel() > x.numel())
    throw ShapeError("slice: range [" + std::to_string(offset) + ", " +
                     std::to_string(offset + shape.numel()) + ") exceeds " + x.shape().str());
  const NodeId id = t.emplace(Op::Slice, shape, x.id(), kNoNode, x.tracked());
  t.mutable_node(id).extent = offset;
  auto xv = t.values(x.id());
  auto out = t.mutable_values(id);
  std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(offset), out.size(), out.begin());
  return {&t, id};
}

Var pad(Var x, std::size_t offset, Shape shape) {
  Tape& t = tape_of(x, "pad");
  if (offset + x.numel() > shape.numel())
    throw ShapeError("pad: input does not fit in " + shape.str());
  const NodeId id = t.emplace(Op::Pad, shape, x.id(), kNoNode, x.tracked());
  t.mutable_node(id).extent = offset;
  auto xv = t.values(x.id());
  auto out = t.mutable_values(id);
  std::fill(out.begin(), out.end(), 0.0);
  std::copy(xv.begin(), xv.end(), out.begin() + static_cast<std::ptrdiff_t>(offset));
  return {&t, id};
}

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of(x, "reshape");
  if (shape.numel() != x.numel())
    throw ShapeError("reshape: " + x.shape().str() + " to " + shape.str());
  const NodeId id = t.emplace(Op::Reshape, shape, x.id(), kNoNode, x.tracked());
  auto xv = t.values(x.id());
  std::copy(xv.begin(), xv.end(), t.mutable_values(id).begin());
  return {&t, id};
}

Var concat(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Tape& t = tape_of(xs[0], "concat");
  std::size_t total = 0;
  bool tracked = false;
  std::vector<std::uint32_t> ids;
  ids.reserve(xs.size());
  for (const Var& x : xs) {
    if (x.tape() != &t) throw ShapeError("concat: operands live on different tapes");
    total += x.numel();
    tracked = tracked || x.tracked();
    ids.push_back(x.id());
  }
  const NodeId id = t.emplace(Op::Concat, Shape::vector(total), kNoNode, kNoNode, tracked);
  t.set_aux(id, ids);
  std::size_t off = 0;
  for (auto p : ids) {
    auto v = t.values(p);
    auto out = t.mutable_values(id);
    std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  return {&t, id};
}

Var matvec(Var m, Var v) {
  Tape& t = tape_of(m, v, "matvec");
  require_rank1(v, "matvec");
  const Shape ms = m.shape();
  if (ms.rank != 2 || ms.dims[1] != v.numel())
    throw ShapeError("matvec: " + ms.str() + " x " + v.shape().str());
  const std::size_t r = ms.dims[0], c = ms.dims[1];
  const NodeId id = t.emplace(Op::MatVec, Shape::vector(r), m.id(), v.id(),
                              m.tracked() || v.tracked());
  auto mv = t.values(m.id());
  auto vv = t.values(v.id());
  auto out = t.mutable_values(id);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += mv[i * c + j] * vv[j];
    out[i] = s;
  }
  t.check_finite(id);
  return {&t, id};
}

Var matvec_t(Var m, Var u) {
  Tape& t = tape_of(m, u, "matvec_t");
  require_rank1(u, "matvec_t");
  const Shape ms = m.shape();
  if (ms.rank != 2 || ms.dims[0] != u.numel())
    throw ShapeError("matvec_t: " + ms.str() + "^T x " + u.shape().str());
  const std::size_t r = ms.dims[0], c = ms.dims[1];
  const NodeId id = t.emplace(Op::MatVecT, Shape::vector(c), m.id(), u.id(),
                              m.tracked() || u.tracked());
  auto mv = t.values(m.id());
  auto uv = t.values(u.id());
  auto out = t.mutable_values(id);
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += mv[i * c + j] * uv[i];
  t.check_finite(id);
  return {&t, id};
}

Var outer(Var u, Var v) {
  Tape& t = tape_of(u, v, "outer");
  require_rank1(u, "outer");
  require_rank1(v, "outer");
  const std::size_t r = u.numel(), c = v.numel();
  const NodeId id = t.emplace(Op::Outer, Shape::matrix(r, c), u.id(), v.id(),
                              u.tracked() || v.tracked());
  auto uv = t.values(u.id());
  auto vv = t.values(v.id());
  auto out = t.mutable_values(id);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = uv[i] * vv[j];
  t.check_finite(id);
  return {&t, id};
}

Var dot(Var a, Var b) { return sum(mul(a, b)); }

Var softmax(Var x) {
  Tape& t = tape_of(x, "softmax");
  const Shape s = x.shape();
  if (s.numel() == 0) throw ShapeError("softmax: empty input");
  const NodeId id = t.emplace(Op::Softmax, s, x.id(), kNoNode, x.tracked());
  softmax_rows(t.values(x.id()), s.cols(), t.mutable_values(id));
  return {&t, id};
}

Var log_softmax(Var x) {
  Tape& t = tape_of(x, "log_softmax");
  const Shape s = x.shape();
  if (s.numel() == 0) throw ShapeError("log_softmax: empty input");
  const std::size_t cols = s.cols();
  const NodeId id = t.emplace(Op::LogSoftmax, s, x.id(), kNoNode, x.tracked());
  auto xv = t.values(x.id());
  auto out = t.mutable_values(id);
  std::vector<double> lse(s.rows());
  logsumexp_rows(xv, cols, lse);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] - lse[i / cols];
  t.check_finite(id);
  return {&t, id};
}

Var logsumexp(Var x) {
  Tape& t = tape_of(x, "logsumexp");
  const Shape s = x.shape();
  if (s.numel() == 0) throw ShapeError("logsumexp: empty input");
  const NodeId id = t.emplace(Op::LogSumExp, s.drop_last(), x.id(), kNoNode, x.tracked());
  logsumexp_rows(t.values(x.id()), s.cols(), t.mutable_values(id));
  t.check_finite(id);
  return {&t, id};
}

Var discounted_cumsum(Var x, double decay) {
  Tape& t = tape_of(x, "discounted_cumsum");
  const NodeId id = t.emplace(Op::DiscCumsum, x.shape(), x.id(), kNoNode, x.tracked());
  t.mutable_node(id).scalar = decay;
  auto xv = t.values(x.id());
  auto out = t.mutable_values(id);
  const std::size_t cols = x.shape().cols();
  for (std::size_t r = 0; r < out.size(); r += cols) {
    double acc = 0.0;
    for (std::size_t i = r; i < r + cols; ++i) out[i] = acc = xv[i] + decay * acc;
  }
  t.check_finite(id);
  return {&t, id};
}

Var reverse_discounted_cumsum(Var x, double decay) {
  Tape& t = tape_of(x, "reverse_discounted_cumsum");
  const NodeId id = t.emplace(Op::RevDiscCumsum, x.shape(), x.id(), kNoNode, x.tracked());
  t.mutable_node(id).scalar = decay;
  auto xv = t.values(x.id());
  auto out = t.mutable_values(id);
  const std::size_t cols = x.shape().cols();
  for (std::size_t r = 0; r < out.size(); r += cols) {
    double acc = 0.0;
    for (std::size_t i = r + cols; i-- > r;) out[i] = acc = xv[i] + decay * acc;
  }
  t.check_finite(id);
  return {&t, id};
}

// ---------------------------------------------------------------------------
// Reverse sweep

namespace {

// Nodes that lie on some path wrt -> output.
class Relevance {
 public:
  Relevance(const Tape& t, NodeId out, std::span<const Var> wrt) {
    lo_ = kNoNode;
    for (const Var& w : wrt) lo_ = std::min(lo_, w.id());
    hi_ = out;
    if (lo_ == kNoNode || lo_ > hi_) {
      empty_ = true;
      return;
    }
    const std::size_t n = hi_ - lo_ + 1;
    std::vector<char> fwd(n, 0);
    for (const Var& w : wrt)
      if (w.id() <= hi_ && w.tracked()) fwd[w.id() - lo_] = 1;
    for (NodeId i = lo_; i <= hi_; ++i) {
      if (fwd[i - lo_] || !t.node(i).tracked) continue;
      for_each_parent(t, i, [&](NodeId p) {
        if (p >= lo_ && p != kNoNode && fwd[p - lo_]) fwd[i - lo_] = 1;
      });
    }
    rel_.assign(n, 0);
    if (!fwd[hi_ - lo_]) {
      empty_ = true;
      return;
    }
    rel_[hi_ - lo_] = 1;
    for (NodeId i = hi_ + 1; i-- > lo_;) {
      if (!rel_[i - lo_]) continue;
      for_each_parent(t, i, [&](NodeId p) {
        if (p != kNoNode && p >= lo_ && fwd[p - lo_]) rel_[p - lo_] = 1;
      });
    }
  }

  template <class F>
  static void for_each_parent(const Tape& t, NodeId id, F&& f) {
    const Node& n = t.node(id);
    if (n.op == Op::Concat) {
      for (auto p : t.aux(id)) f(p);
      return;
    }
    if (n.a != kNoNode) f(n.a);
    if (n.b != kNoNode) f(n.b);
  }

  bool empty() const { return empty_; }
  NodeId lo() const { return lo_; }
  NodeId hi() const { return hi_; }
  bool operator()(NodeId id) const {
    return !empty_ && id != kNoNode && id >= lo_ && id <= hi_ && rel_[id - lo_];
  }

 private:
  NodeId lo_ = 0, hi_ = 0;
  bool empty_ = false;
  std::vector<char> rel_;
};

// Shapes are taken by value throughout: node references die when the tape grows.
// Reshape only when the flat layout matches but the declared shape differs.
Var fit(Var g, Shape s) { return g.shape() == s ? g : reshape(g, s); }

// Broadcast a per-row quantity back to `like`.
Var rows_like(Var r, Shape like) { return fit(row_expand(r, like.cols()), like); }

// One rule per primitive, written with the same primitives so the result is
// differentiable when the context records on the main tape.
template <class Ctx>
void backprop(Ctx& c, const Tape& t, NodeId self, Var g) {
  const Node n = t.node(self);
  const bool wa = c.wants(n.a);
  const bool wb = c.wants(n.b);
  auto shape_of = [&](NodeId id) { return t.node(id).shape; };
  switch (n.op) {
    case Op::Leaf:
    case Op::StopGradient:
      break;
    case Op::Add:
      if (wa) c.acc(n.a, g);
      if (wb) c.acc(n.b, g);
      break;
    case Op::Sub:
      if (wa) c.acc(n.a, g);
      if (wb) c.acc(n.b, neg(g));
      break;
    case Op::Mul:
      if (wa) c.acc(n.a, mul(g, c.in(n.b)));
      if (wb) c.acc(n.b, mul(g, c.in(n.a)));
      break;
    case Op::Div:
      if (wa) c.acc(n.a, div(g, c.in(n.b)));
      if (wb) c.acc(n.b, neg(div(mul(g, c.in(self)), c.in(n.b))));
      break;
    case Op::Neg:
      if (wa) c.acc(n.a, neg(g));
      break;
    case Op::Exp:
      if (wa) c.acc(n.a, mul(g, c.in(self)));
      break;
    case Op::Log:
      if (wa) c.acc(n.a, div(g, c.in(n.a)));
      break;
    case Op::PowScalar:
      if (wa) c.acc(n.a, scale(mul(g, pow_scalar(c.in(n.a), n.scalar - 1.0)), n.scalar));
      break;
    case Op::Scale:
      if (wa) c.acc(n.a, scale(g, n.scalar));
      break;
    case Op::AddScalar:
      if (wa) c.acc(n.a, g);
      break;
    case Op::Sum:
      if (wa) c.acc(n.a, expand(g, shape_of(n.a)));
      break;
    case Op::Mean:
      if (wa) {
        const Shape s = shape_of(n.a);
        c.acc(n.a, expand(scale(g, 1.0 / static_cast<double>(s.numel())), s));
      }
      break;
    case Op::Expand:
      if (wa) c.acc(n.a, fit(sum(g), shape_of(n.a)));
      break;
    case Op::RowSum:
      if (wa) c.acc(n.a, rows_like(g, shape_of(n.a)));
      break;
    case Op::RowExpand:
      if (wa) c.acc(n.a, fit(row_sum(g), shape_of(n.a)));
      break;
    case Op::IndexSelect:
      if (wa) c.acc(n.a, scatter_add(g, t.aux(self), shape_of(n.a)));
      break;
    case Op::ScatterAdd:
      if (wa) c.acc(n.a, index_select(g, t.aux(self), shape_of(n.a)));
      break;
    case Op::Slice:
      if (wa) c.acc(n.a, pad(g, n.extent, shape_of(n.a)));
      break;
    case Op::Pad:
      if (wa) c.acc(n.a, slice(g, n.extent, shape_of(n.a)));
      break;
    case Op::Reshape:
      if (wa) c.acc(n.a, reshape(g, shape_of(n.a)));
      break;
    case Op::Concat: {
      // copy: the aux pool may grow while we emit slices
      const auto span = t.aux(self);
      const std::vector<NodeId> ps(span.begin(), span.end());
      std::size_t off = 0;
      for (NodeId p : ps) {
        const Shape s = shape_of(p);
        if (c.wants(p)) c.acc(p, slice(g, off, s));
        off += s.numel();
      }
      break;
    }
    case Op::MatVec:
      if (wa) c.acc(n.a, outer(g, c.in(n.b)));
      if (wb) c.acc(n.b, matvec_t(c.in(n.a), g));
      break;
    case Op::MatVecT:
      if (wa) c.acc(n.a, outer(c.in(n.b), g));
      if (wb) c.acc(n.b, matvec(c.in(n.a), g));
      break;
    case Op::Outer:
      if (wa) c.acc(n.a, matvec(g, c.in(n.b)));
      if (wb) c.acc(n.b, matvec_t(g, c.in(n.a)));
      break;
    case Op::Softmax:
      if (wa) {
        const Var y = c.in(self);
        c.acc(n.a, mul(y, sub(g, rows_like(row_sum(mul(g, y)), n.shape))));
      }
      break;
    case Op::LogSoftmax:
      if (wa) c.acc(n.a, sub(g, mul(exp(c.in(self)), rows_like(row_sum(g), n.shape))));
      break;
    case Op::LogSumExp:
      if (wa) {
        const Shape s = shape_of(n.a);
        const Var x = c.in(n.a);
        c.acc(n.a, mul(rows_like(g, s), exp(sub(x, rows_like(c.in(self), s)))));
      }
      break;
    case Op::Sigmoid:
      if (wa) c.acc(n.a, mul(g, mul(c.in(self), sigmoid(neg(c.in(n.a))))));
      break;
    case Op::DiscCumsum:
      if (wa) c.acc(n.a, reverse_discounted_cumsum(g, n.scalar));
      break;
    case Op::RevDiscCumsum:
      if (wa) c.acc(n.a, discounted_cumsum(g, n.scalar));
      break;
  }
}

// Records the gradient computation on the main tape.
class SymbolicCtx {
 public:
  SymbolicCtx(Tape& t, const Relevance& rel)
      : t_(t), rel_(rel), gid_(rel.empty() ? 0 : rel.hi() - rel.lo() + 1, kNoNode) {}

  bool wants(NodeId p) const { return rel_(p); }
  Var in(NodeId id) { return {&t_, id}; }
  void acc(NodeId p, Var g) {
    const Shape s = t_.node(p).shape;
    g = fit(g, s);
    NodeId& slot = gid_[p - rel_.lo()];
    slot = slot == kNoNode ? g.id() : add(Var(&t_, slot), g).id();
  }
  bool has(NodeId i) const { return gid_[i - rel_.lo()] != kNoNode; }
  Var grad_of(NodeId i) { return {&t_, gid_[i - rel_.lo()]}; }
  void seed(NodeId out) {
    const Shape s = t_.node(out).shape;
    gid_[out - rel_.lo()] = fit(t_.scalar(1.0), s).id();
  }
  void done_node() {}

 private:
  Tape& t_;
  const Relevance& rel_;
  std::vector<NodeId> gid_;
};

// Evaluates the same rules on a scratch tape that is reset after every node;
// gradients accumulate in a flat buffer aligned with the main value pool.
class NumericCtx {
 public:
  NumericCtx(const Tape& t, const Relevance& rel) : t_(t), rel_(rel), scratch_(64) {
    if (rel.empty()) return;
    base_ = t.node(rel.lo()).offset;
    const Node& last = t.node(rel.hi());
    buf_.assign(last.offset + last.shape.numel() - base_, 0.0);
    has_.assign(rel.hi() - rel.lo() + 1, 0);
  }

  bool wants(NodeId p) const { return rel_(p); }
  Var in(NodeId id) { return scratch_.leaf(t_.values(id), t_.node(id).shape, false); }
  void acc(NodeId p, Var g) {
    const Node& n = t_.node(p);
    auto src = g.values();
    if (src.size() != n.shape.numel()) throw ShapeError("grad: internal shape mismatch");
    double* dst = buf_.data() + (n.offset - base_);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    has_[p - rel_.lo()] = 1;
  }
  bool has(NodeId i) const { return has_[i - rel_.lo()] != 0; }
  Var grad_of(NodeId i) { return scratch_.leaf(values(i), t_.node(i).shape, false); }
  void seed(NodeId out) {
    buf_[t_.node(out).offset - base_] = 1.0;
    has_[out - rel_.lo()] = 1;
  }
  void done_node() { scratch_.truncate(0); }

  std::span<const double> values(NodeId i) const {
    const Node& n = t_.node(i);
    return {buf_.data() + (n.offset - base_), n.shape.numel()};
  }

 private:
  const Tape& t_;
  const Relevance& rel_;
  Tape scratch_;
  std::size_t base_ = 0;
  std::vector<double> buf_;
  std::vector<char> has_;
};

template <class Ctx>
void sweep(const Tape& t, const Relevance& rel, Ctx& c) {
  for (NodeId i = rel.hi() + 1; i-- > rel.lo();) {
    if (!rel(i) || !c.has(i)) continue;
    backprop(c, t, i, c.grad_of(i));
    c.done_node();
  }
}

void validate(Var output, std::span<const Var> wrt) {
  if (!output.valid()) throw ShapeError("grad: invalid output handle");
  if (output.numel() != 1)
    throw ShapeError("grad: output of shape " + output.shape().str() + " is not scalar");
  for (const Var& w : wrt) {
    if (w.tape() != output.tape() || w.id() >= output.tape()->size())
      throw ShapeError("grad: wrt node is not on the output's tape");
  }
}

}  // namespace

std::vector<Var> grad(Var output, std::span<const Var> wrt, bool create_graph) {
  validate(output, wrt);
  Tape& t = *output.tape();
  const Relevance rel(t, output.id(), wrt);
  std::vector<Var> result;
  result.reserve(wrt.size());
  auto zeros = [&](const Var& w) { return t.constant(Array::zeros(w.shape())); };

  if (create_graph) {
    SymbolicCtx c(t, rel);
    if (!rel.empty()) {
      c.seed(output.id());
      sweep(t, rel, c);
    }
    for (const Var& w : wrt)
      result.push_back(rel(w.id()) && c.has(w.id()) ? c.grad_of(w.id()) : zeros(w));
    return result;
  }
  for (Array& a : grad_values(output, wrt)) result.push_back(t.constant(a));
  return result;
}

std::vector<Array> grad_values(Var output, std::span<const Var> wrt) {
  validate(output, wrt);
  const Tape& t = *output.tape();
  const Relevance rel(t, output.id(), wrt);
  NumericCtx c(t, rel);
  if (!rel.empty()) {
    c.seed(output.id());
    sweep(t, rel, c);
  }
  std::vector<Array> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (rel(w.id()) && c.has(w.id())) {
      auto v = c.values(w.id());
      result.push_back({w.shape(), std::vector<double>(v.begin(), v.end())});
    } else {
      result.push_back(Array::zeros(w.shape()));
    }
  }
  return result;
}

}  // namespace famp::ad
