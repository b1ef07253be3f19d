#pragma once

// Tape-based reverse-mode differentiation over dense matrices.
//
// A Graph records every operation as it is executed (define-by-run). Leaves
// are either named inputs resolved from a Bindings map, anonymous parameter
// leaves, or constants. Values are copied into the graph on creation, so a
// parameter store is never aliased by a graph.
//
// Shapes must match exactly. The only implicit broadcast is a 1x1 operand
// of mul(); row-vector broadcasts are spelled out as add_row().

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "pt/diff/tensor.hpp"

namespace pt::diff {

class UnboundLeafError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonScalarRootError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
class Graph;

template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <typename T>
using Bindings = std::map<std::string, Tensor<T>>;

/// Sparse feature row: (column index, value) pairs.
template <typename T>
using SparseRow = std::vector<std::pair<std::uint32_t, T>>;

template <typename T>
class Graph {
 public:
  explicit Graph(Bindings<T> bindings = {}) : bindings_(std::move(bindings)) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Named leaf resolved from the bindings; repeated calls return the same leaf.
  Var<T> input(const std::string& name, bool requires_grad = true);
  Var<T> leaf(Tensor<T> value, bool requires_grad = true);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }
  Var<T> scalar(T v) { return constant(Tensor<T>::scalar(v)); }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  /// Gradient accumulated by backward(); zeros if the node received none.
  Tensor<T> grad(Var<T> v) const;
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  /// Reverse sweep from a 1x1 root.
  void backward(Var<T> root);
  /// Reverse sweep with an explicit seed gradient (shape of root).
  void backward(Var<T> root, const Tensor<T>& seed);

  std::size_t node_count() const { return nodes_.size(); }
  bool has_input(const std::string& name) const { return named_.count(name) != 0; }
  Var<T> named(const std::string& name) const;

  // Piecewise ops record which branch each element took. Two evaluations at
  // nearby points are on the same smooth piece iff their signatures agree.
  std::uint64_t branch_signature() const { return branch_sig_; }
  bool at_kink() const { return exact_kink_; }
  void note_branch(bool taken) {
    branch_sig_ = (branch_sig_ ^ (taken ? 0x9e3779b97f4a7c15ULL : 0x7f4a7c159e3779b9ULL)) * 0x100000001b3ULL;
  }
  void note_kink() { exact_kink_ = true; }

  // Internal: node construction and gradient access for op implementations.
  using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;
  Var<T> make(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);
  Var<T> make(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn);
  Tensor<T>& grad_ref(std::uint32_t id);
  const Tensor<T>& grad_of(std::uint32_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  const Tensor<T>& value_of(std::uint32_t id) const { return nodes_[id].value; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Bindings<T> bindings_;
  std::map<std::string, std::uint32_t> named_;
  std::vector<Node> nodes_;
  std::uint64_t branch_sig_ = 0xcbf29ce484222325ULL;
  bool exact_kink_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph->value(*this);
}

// Op implementations live in a class template so that both precisions are
// explicitly instantiated in one place.
template <typename T>
struct Ops {
  using V = Var<T>;
  static V add(V a, V b);
  static V sub(V a, V b);
  static V mul(V a, V b);
  static V div(V a, V b);
  static V neg(V a);
  static V scale(V a, T c);
  static V add_scalar(V a, T c);
  static V add_row(V a, V row);
  static V matmul(V a, V b);
  static V matmul_nt(V a, V b);
  static V transpose(V a);
  static V exp(V a);
  static V log(V a);
  static V square(V a);
  static V relu(V a);
  static V maximum(V a, V b);
  static V minimum(V a, V b);
  static V clamp(V a, T lo, T hi);
  static V sum(V a);
  static V mean(V a);
  static V reduce_max(V a);
  static V cumsum(V a);
  static V logsumexp(V a);
  static V logsumexp_rows(V a);
  static V softmax_rows(V a, bool causal);
  static V log_softmax_rows(V a);
  static V cross_entropy_rows(V logits, std::span<const int> targets);
  static V slice_rows(V a, std::size_t begin, std::size_t end);
  static V slice_cols(V a, std::size_t begin, std::size_t end);
  static V concat_rows(std::span<const V> parts);
  static V concat_cols(std::span<const V> parts);
  static V index(V a, std::size_t r, std::size_t c);
  static V reshape(V a, std::size_t rows, std::size_t cols);
  static V gather_rows(V table, std::span<const int> ids);
  static V sparse_linear(V weight, std::span<const SparseRow<T>> rows);
  static V layer_norm_rows(V x, V gamma, V beta, T eps);
};

template <typename T> inline Var<T> add(Var<T> a, Var<T> b) { return Ops<T>::add(a, b); }
template <typename T> inline Var<T> sub(Var<T> a, Var<T> b) { return Ops<T>::sub(a, b); }
/// Elementwise product; either operand may be 1x1 (scalar-times-tensor).
template <typename T> inline Var<T> mul(Var<T> a, Var<T> b) { return Ops<T>::mul(a, b); }
template <typename T> inline Var<T> div(Var<T> a, Var<T> b) { return Ops<T>::div(a, b); }
template <typename T> inline Var<T> neg(Var<T> a) { return Ops<T>::neg(a); }
template <typename T> inline Var<T> scale(Var<T> a, T c) { return Ops<T>::scale(a, c); }
template <typename T> inline Var<T> add_scalar(Var<T> a, T c) { return Ops<T>::add_scalar(a, c); }
/// a[r,:] + row[0,:] for every r.
template <typename T> inline Var<T> add_row(Var<T> a, Var<T> row) { return Ops<T>::add_row(a, row); }
template <typename T> inline Var<T> matmul(Var<T> a, Var<T> b) { return Ops<T>::matmul(a, b); }
/// a * b^T
template <typename T> inline Var<T> matmul_nt(Var<T> a, Var<T> b) { return Ops<T>::matmul_nt(a, b); }
template <typename T> inline Var<T> transpose(Var<T> a) { return Ops<T>::transpose(a); }
template <typename T> inline Var<T> exp(Var<T> a) { return Ops<T>::exp(a); }
template <typename T> inline Var<T> log(Var<T> a) { return Ops<T>::log(a); }
template <typename T> inline Var<T> square(Var<T> a) { return Ops<T>::square(a); }
template <typename T> inline Var<T> relu(Var<T> a) { return Ops<T>::relu(a); }
/// max(0, x); identical to relu, named for loss code.
template <typename T> inline Var<T> hinge(Var<T> a) { return Ops<T>::relu(a); }
template <typename T> inline Var<T> maximum(Var<T> a, Var<T> b) { return Ops<T>::maximum(a, b); }
template <typename T> inline Var<T> minimum(Var<T> a, Var<T> b) { return Ops<T>::minimum(a, b); }
template <typename T> inline Var<T> clamp(Var<T> a, T lo, T hi) { return Ops<T>::clamp(a, lo, hi); }
template <typename T> inline Var<T> sum(Var<T> a) { return Ops<T>::sum(a); }
template <typename T> inline Var<T> mean(Var<T> a) { return Ops<T>::mean(a); }
template <typename T> inline Var<T> reduce_max(Var<T> a) { return Ops<T>::reduce_max(a); }
/// Inclusive prefix sum in storage order.
template <typename T> inline Var<T> cumsum(Var<T> a) { return Ops<T>::cumsum(a); }
template <typename T> inline Var<T> logsumexp(Var<T> a) { return Ops<T>::logsumexp(a); }
template <typename T> inline Var<T> logsumexp_rows(Var<T> a) { return Ops<T>::logsumexp_rows(a); }
template <typename T> inline Var<T> softmax_rows(Var<T> a, bool causal = false) { return Ops<T>::softmax_rows(a, causal); }
template <typename T> inline Var<T> log_softmax_rows(Var<T> a) { return Ops<T>::log_softmax_rows(a); }
/// Per-row negative log-likelihood of targets[r]; returns rows x 1.
template <typename T> inline Var<T> cross_entropy_rows(Var<T> logits, std::span<const int> targets) {
  return Ops<T>::cross_entropy_rows(logits, targets);
}
template <typename T> inline Var<T> slice_rows(Var<T> a, std::size_t b, std::size_t e) { return Ops<T>::slice_rows(a, b, e); }
template <typename T> inline Var<T> slice_cols(Var<T> a, std::size_t b, std::size_t e) { return Ops<T>::slice_cols(a, b, e); }
template <typename T> inline Var<T> concat_rows(std::type_identity_t<std::span<const Var<T>>> parts) { return Ops<T>::concat_rows(parts); }
template <typename T> inline Var<T> concat_cols(std::type_identity_t<std::span<const Var<T>>> parts) { return Ops<T>::concat_cols(parts); }
template <typename T> inline Var<T> index(Var<T> a, std::size_t r, std::size_t c) { return Ops<T>::index(a, r, c); }
template <typename T> inline Var<T> reshape(Var<T> a, std::size_t r, std::size_t c) { return Ops<T>::reshape(a, r, c); }
template <typename T> inline Var<T> gather_rows(Var<T> table, std::span<const int> ids) { return Ops<T>::gather_rows(table, ids); }
/// out[r,:] = sum_(i,v) in rows[r] of v * weight[i,:]
template <typename T> inline Var<T> sparse_linear(Var<T> weight, std::type_identity_t<std::span<const SparseRow<T>>> rows) {
  return Ops<T>::sparse_linear(weight, rows);
}
template <typename T> inline Var<T> layer_norm_rows(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  return Ops<T>::layer_norm_rows(x, gamma, beta, eps);
}

template <typename T> inline Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> inline Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> inline Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <typename T> inline Var<T> operator-(Var<T> a) { return neg(a); }

/// A differentiable expression: builds its graph from bound leaves.
template <typename T>
using Expr = std::function<Var<T>(Graph<T>&)>;

template <typename T>
Tensor<T> evaluate(const Expr<T>& e, const Bindings<T>& bindings);

/// d e / d leaf for each named leaf in `wrt`. The root must be 1x1.
template <typename T>
std::map<std::string, Tensor<T>> gradient(const Expr<T>& e, const Bindings<T>& bindings,
                                          const std::vector<std::string>& wrt);

}  // namespace pt::diff
