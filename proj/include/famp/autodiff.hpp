#pragma once

// Reverse-mode automatic differentiation over small dense float64 arrays.
//
// Every primitive appends one node to a Tape. Gradients are computed by a
// reverse sweep whose rules are themselves written with the same primitives,
// so with create_graph = true the gradient is ordinary tape nodes and can be
// differentiated again (Hessian-vector products, unrolled inner SGD, ...).

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace famp::ad {

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Up to rank 3, which is all the tabular policies need.
struct Shape {
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::uint8_t rank = 0;

  static Shape scalar() { return {}; }
  static Shape vector(std::size_t n) { return {{n, 0, 0}, 1}; }
  static Shape matrix(std::size_t r, std::size_t c) { return {{r, c, 0}, 2}; }
  static Shape tensor3(std::size_t a, std::size_t b, std::size_t c) {
    return {{a, b, c}, 3};
  }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank; ++i) n *= dims[i];
    return n;
  }
  // Size of the trailing axis; row-wise ops (softmax, logsumexp) act along it.
  std::size_t cols() const { return rank == 0 ? 1 : dims[rank - 1]; }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }
  // Shape with the trailing axis removed.
  Shape drop_last() const;
  Shape append(std::size_t n) const;

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank != b.rank) return false;
    for (std::size_t i = 0; i < a.rank; ++i)
      if (a.dims[i] != b.dims[i]) return false;
    return true;
  }
  std::string str() const;
};

struct Array {
  Shape shape;
  std::vector<double> data;

  static Array zeros(Shape s) { return {s, std::vector<double>(s.numel(), 0.0)}; }
  static Array scalar(double v) { return {Shape::scalar(), {v}}; }
  static Array vector(std::vector<double> v) {
    Shape s = Shape::vector(v.size());
    return {s, std::move(v)};
  }
};

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Exp,
  Log,
  PowScalar,
  Scale,
  AddScalar,
  Sum,
  Mean,
  Expand,
  RowSum,
  RowExpand,
  IndexSelect,
  ScatterAdd,
  Slice,
  Pad,
  Reshape,
  Concat,
  MatVec,
  MatVecT,
  Outer,
  Softmax,
  LogSoftmax,
  LogSumExp,
  Sigmoid,
  StopGradient,
  DiscCumsum,
  RevDiscCumsum,
};

const char* op_name(Op op);

using NodeId = std::uint32_t;
inline constexpr NodeId kNoNode = 0xFFFFFFFFu;

struct Node {
  Shape shape;
  std::size_t offset = 0;       // into the tape value pool
  NodeId a = kNoNode;           // first parent
  NodeId b = kNoNode;           // second parent
  std::uint32_t aux_begin = 0;  // into the aux pool: indices or extra parents
  std::uint32_t aux_count = 0;
  double scalar = 0.0;          // exponent, scale, decay, ...
  std::size_t extent = 0;       // slice offset / expand width
  Op op = Op::Leaf;
  bool tracked = false;
};

class Tape;

// Lightweight handle to a node. Copyable; valid while its Tape lives and has
// not been truncated below it.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  NodeId id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  Shape shape() const;
  std::size_t numel() const { return shape().numel(); }
  bool tracked() const;
  // The span is invalidated by any later append to the same tape.
  std::span<const double> values() const;
  double item() const;
  double at(std::size_t i) const { return values()[i]; }
  Array array() const;

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = kNoNode;
};

class Tape {
 public:
  Tape() = default;
  explicit Tape(std::size_t reserve_nodes);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(std::span<const double> values, Shape shape, bool tracked);
  Var leaf(const Array& a, bool tracked) { return leaf(a.data, a.shape, tracked); }
  Var constant(const Array& a) { return leaf(a, false); }
  Var scalar(double v, bool tracked = false);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_[id]; }
  std::span<const double> values(NodeId id) const {
    const Node& n = nodes_[id];
    return {values_.data() + n.offset, n.shape.numel()};
  }
  std::span<const std::uint32_t> aux(NodeId id) const {
    const Node& n = nodes_[id];
    return {aux_.data() + n.aux_begin, n.aux_count};
  }
  // All parents of a node, in input order.
  std::vector<NodeId> parents(NodeId id) const;

  // Drops every node with id >= n.
  void truncate(std::size_t n);

  // Primitive construction; used by the op implementations.
  NodeId emplace(Op op, const Shape& shape, NodeId a, NodeId b, bool tracked);
  std::span<double> mutable_values(NodeId id) {
    Node& n = nodes_[id];
    return {values_.data() + n.offset, n.shape.numel()};
  }
  void set_aux(NodeId id, std::span<const std::uint32_t> aux);
  Node& mutable_node(NodeId id) { return nodes_[id]; }
  // Raises DomainError (and drops the node) if it holds a non-finite value.
  void check_finite(NodeId id);

 private:
  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<std::uint32_t> aux_;
};

// -- elementwise, shapes must match exactly ---------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var x);
Var exp(Var x);
Var log(Var x);
Var pow_scalar(Var x, double p);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);
Var sigmoid(Var x);

// -- reductions and explicit broadcasts --------------------------------------
Var sum(Var x);
Var mean(Var x);
// Scalar to `shape`.
Var expand(Var scalar, Shape shape);
// Reduce / broadcast along the trailing axis.
Var row_sum(Var x);
Var row_expand(Var x, std::size_t cols);

// -- indexing ----------------------------------------------------------------
// out.flat[i] = x.flat[indices[i]]; out has `shape` (numel == indices.size()).
Var index_select(Var x, std::span<const std::uint32_t> indices, Shape shape);
Var index_select(Var x, std::span<const std::uint32_t> indices);
// out = zeros(shape); out.flat[indices[i]] += x.flat[i].
Var scatter_add(Var x, std::span<const std::uint32_t> indices, Shape shape);
// Contiguous flat range [offset, offset + shape.numel()).
Var slice(Var x, std::size_t offset, Shape shape);
// Zeros of `shape` with x written at flat offset.
Var pad(Var x, std::size_t offset, Shape shape);
Var reshape(Var x, Shape shape);
// Flat concatenation into a vector.
Var concat(std::span<const Var> xs);
inline Var concat(std::initializer_list<Var> xs) {
  return concat(std::span<const Var>(xs.begin(), xs.size()));
}

// -- linear algebra ----------------------------------------------------------
Var matvec(Var m, Var v);    // [r,c] x [c] -> [r]
Var matvec_t(Var m, Var u);  // [r,c]^T x [r] -> [c]
Var outer(Var u, Var v);     // [r] x [c] -> [r,c]
Var dot(Var a, Var b);

// -- row-wise normalizers (trailing axis, max-subtracted) --------------------
Var softmax(Var x);
Var log_softmax(Var x);
Var logsumexp(Var x);

// -- stochastic-graph helpers -------------------------------------------------
Var stop_gradient(Var x);
// exp(x - stop_gradient(x)): evaluates to exactly 1, differentiates like x.
Var magic_box(Var x);
// Along the trailing axis, restarting on every row:
// z_t = x_t + decay * z_{t-1}
Var discounted_cumsum(Var x, double decay);
// z_t = x_t + decay * z_{t+1}
Var reverse_discounted_cumsum(Var x, double decay);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var x) { return neg(x); }
inline Var operator*(double c, Var x) { return scale(x, c); }
inline Var operator*(Var x, double c) { return scale(x, c); }
inline Var operator+(Var x, double c) { return add_scalar(x, c); }
inline Var operator+(double c, Var x) { return add_scalar(x, c); }

// d output / d wrt for a scalar output. Nodes of `wrt` unreachable from
// output get exact zeros. With create_graph the results are tracked tape
// nodes that can be differentiated again; otherwise they are constants.
std::vector<Var> grad(Var output, std::span<const Var> wrt, bool create_graph);
inline std::vector<Var> grad(Var output, std::initializer_list<Var> wrt,
                             bool create_graph) {
  return grad(output, std::span<const Var>(wrt.begin(), wrt.size()), create_graph);
}

// First-order gradient values without growing the tape.
std::vector<Array> grad_values(Var output, std::span<const Var> wrt);
inline std::vector<Array> grad_values(Var output, std::initializer_list<Var> wrt) {
  return grad_values(output, std::span<const Var>(wrt.begin(), wrt.size()));
}

}  // namespace famp::ad
