#include "pt/diff/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pt/kernels/kernels.hpp"

namespace pt::diff {

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

template <typename T>
Var<T> Graph<T>::input(const std::string& name, bool requires_grad) {
  if (auto it = named_.find(name); it != named_.end()) return Var<T>{this, it->second};
  auto b = bindings_.find(name);
  if (b == bindings_.end()) throw UnboundLeafError("unbound leaf '" + name + "'");
  Var<T> v = leaf(b->second, requires_grad);
  named_.emplace(name, v.id);
  return v;
}

template <typename T>
Var<T> Graph<T>::named(const std::string& name) const {
  auto it = named_.find(name);
  if (it == named_.end()) throw UnboundLeafError("leaf '" + name + "' not used by this graph");
  return Var<T>{const_cast<Graph*>(this), it->second};
}

template <typename T>
Var<T> Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::make(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
  bool rg = false;
  for (const auto& in : inputs) {
    if (in.graph != this) throw std::invalid_argument("operands belong to different graphs");
    rg = rg || nodes_[in.id].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = rg;
  if (rg) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::make(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  return make(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(fn));
}

template <typename T>
Tensor<T>& Graph<T>::grad_ref(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.rows(), n.value.cols());
  return n.grad;
}

template <typename T>
Tensor<T> Graph<T>::grad(Var<T> v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor<T>(n.value.rows(), n.value.cols());
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> root) {
  if (value(root).size() != 1) {
    throw NonScalarRootError("gradient requires a scalar root, got " +
                             shape_str(value(root).rows(), value(root).cols()));
  }
  backward(root, Tensor<T>::scalar(T(1)));
}

template <typename T>
void Graph<T>::backward(Var<T> root, const Tensor<T>& seed) {
  if (!seed.same_shape(value(root))) throw ShapeError("backward seed shape mismatch");
  Tensor<T>& g = grad_ref(root.id);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (std::int64_t id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward && !n.grad.empty()) n.backward(*this, static_cast<std::uint32_t>(id));
  }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(b.rows(), b.cols()));
  }
}

template <typename T>
void require_graph(Var<T> a, Var<T> b) {
  if (a.graph != b.graph) throw std::invalid_argument("operands belong to different graphs");
}

template <typename T>
T row_max(const T* x, std::size_t n) {
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

// log(sum(exp(x))) with the max shifted out.
template <typename T>
T stable_lse(const T* x, std::size_t n) {
  const T m = row_max(x, n);
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
  return m + std::log(s);
}

}  // namespace

template <typename T>
Var<T> Ops<T>::add(V a, V b) {
  require_graph(a, b);
  auto& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same(av, bv, "add");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.make(std::move(out), {a, b}, [a = a.id, b = b.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    for (auto id : {a, b}) {
      if (!gr.needs_grad(id)) continue;
      auto& gi = gr.grad_ref(id);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
  });
}

template <typename T>
Var<T> Ops<T>::sub(V a, V b) {
  require_graph(a, b);
  auto& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same(av, bv, "sub");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return g.make(std::move(out), {a, b}, [a = a.id, b = b.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    if (gr.needs_grad(a)) {
      auto& ga = gr.grad_ref(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    }
    if (gr.needs_grad(b)) {
      auto& gb = gr.grad_ref(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
    }
  });
}

template <typename T>
Var<T> Ops<T>::mul(V a, V b) {
  require_graph(a, b);
  auto& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool a_scalar = av.size() == 1 && bv.size() != 1;
  const bool b_scalar = bv.size() == 1 && av.size() != 1;
  if (a_scalar || b_scalar) {
    const V s = a_scalar ? a : b;
    const V t = a_scalar ? b : a;
    const T sv = s.value()[0];
    Tensor<T> out = t.value();
    for (auto& x : out.values()) x *= sv;
    return g.make(std::move(out), {s, t}, [s = s.id, t = t.id](Graph<T>& gr, std::uint32_t self) {
      const auto& go = gr.grad_of(self);
      const auto& tv = gr.value_of(t);
      const T sv = gr.value_of(s)[0];
      if (gr.needs_grad(s)) {
        T acc = 0;
        for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * tv[i];
        gr.grad_ref(s)[0] += acc;
      }
      if (gr.needs_grad(t)) {
        auto& gt = gr.grad_ref(t);
        for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += go[i] * sv;
      }
    });
  }
  require_same(av, bv, "mul");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.make(std::move(out), {a, b}, [a = a.id, b = b.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    if (gr.needs_grad(a)) {
      auto& ga = gr.grad_ref(a);
      const auto& bv = gr.value_of(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (gr.needs_grad(b)) {
      auto& gb = gr.grad_ref(b);
      const auto& av = gr.value_of(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

template <typename T>
Var<T> Ops<T>::div(V a, V b) {
  require_graph(a, b);
  auto& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same(av, bv, "div");
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  return g.make(std::move(out), {a, b}, [a = a.id, b = b.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    const auto& bv = gr.value_of(b);
    if (gr.needs_grad(a)) {
      auto& ga = gr.grad_ref(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] / bv[i];
    }
    if (gr.needs_grad(b)) {
      auto& gb = gr.grad_ref(b);
      const auto& av = gr.value_of(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <typename T>
Var<T> Ops<T>::neg(V a) {
  return scale(a, T(-1));
}

template <typename T>
Var<T> Ops<T>::scale(V a, T c) {
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x *= c;
  return a.graph->make(std::move(out), {a}, [a = a.id, c](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    auto& ga = gr.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * go[i];
  });
}

template <typename T>
Var<T> Ops<T>::add_scalar(V a, T c) {
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x += c;
  return a.graph->make(std::move(out), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    auto& ga = gr.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
  });
}

template <typename T>
Var<T> Ops<T>::add_row(V a, V row) {
  require_graph(a, row);
  const auto& av = a.value();
  const auto& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("add_row: row " + shape_str(rv.rows(), rv.cols()) + " vs " + shape_str(av.rows(), av.cols()));
  }
  Tensor<T> out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    T* o = out.row_ptr(r);
    for (std::size_t c = 0; c < out.cols(); ++c) o[c] += rv[c];
  }
  return a.graph->make(std::move(out), {a, row}, [a = a.id, row = row.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    if (gr.needs_grad(a)) {
      auto& ga = gr.grad_ref(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    }
    if (gr.needs_grad(row)) {
      auto& gr_ = gr.grad_ref(row);
      for (std::size_t r = 0; r < go.rows(); ++r) {
        const T* g = go.row_ptr(r);
        for (std::size_t c = 0; c < go.cols(); ++c) gr_[c] += g[c];
      }
    }
  });
}

template <typename T>
Var<T> Ops<T>::matmul(V a, V b) {
  require_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: " + shape_str(av.rows(), av.cols()) + " * " + shape_str(bv.rows(), bv.cols()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor<T> out(m, n);
  kernels::gemm_nn<T>(m, n, k, av.data(), bv.data(), out.data());
  return a.graph->make(std::move(out), {a, b}, [a = a.id, b = b.id, m, n, k](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    if (gr.needs_grad(a)) kernels::gemm_nt<T>(m, k, n, go.data(), gr.value_of(b).data(), gr.grad_ref(a).data());
    if (gr.needs_grad(b)) kernels::gemm_tn<T>(k, n, m, gr.value_of(a).data(), go.data(), gr.grad_ref(b).data());
  });
}

template <typename T>
Var<T> Ops<T>::matmul_nt(V a, V b) {
  require_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(av.rows(), av.cols()) + " * T(" + shape_str(bv.rows(), bv.cols()) + ")");
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor<T> out(m, n);
  kernels::gemm_nt<T>(m, n, k, av.data(), bv.data(), out.data());
  return a.graph->make(std::move(out), {a, b}, [a = a.id, b = b.id, m, n, k](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    if (gr.needs_grad(a)) kernels::gemm_nn<T>(m, k, n, go.data(), gr.value_of(b).data(), gr.grad_ref(a).data());
    if (gr.needs_grad(b)) kernels::gemm_tn<T>(n, k, m, go.data(), gr.value_of(a).data(), gr.grad_ref(b).data());
  });
}

template <typename T>
Var<T> Ops<T>::transpose(V a) {
  const auto& av = a.value();
  Tensor<T> out(av.cols(), av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out.at(c, r) = av.at(r, c);
  return a.graph->make(std::move(out), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    auto& ga = gr.grad_ref(a);
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c) ga.at(r, c) += go.at(c, r);
  });
}

template <typename T>
Var<T> Ops<T>::exp(V a) {
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x = std::exp(x);
  return a.graph->make(std::move(out), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    const auto& y = gr.value_of(self);
    auto& ga = gr.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * y[i];
  });
}

template <typename T>
Var<T> Ops<T>::log(V a) {
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x = std::log(x);
  return a.graph->make(std::move(out), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    const auto& x = gr.value_of(a);
    auto& ga = gr.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] / x[i];
  });
}

template <typename T>
Var<T> Ops<T>::square(V a) {
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x = x * x;
  return a.graph->make(std::move(out), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    const auto& x = gr.value_of(a);
    auto& ga = gr.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T(2) * x[i] * go[i];
  });
}

template <typename T>
Var<T> Ops<T>::relu(V a) {
  auto& g = *a.graph;
  Tensor<T> out = a.value();
  for (auto& x : out.values()) {
    if (x == T(0)) g.note_kink();
    g.note_branch(x > T(0));
    if (!(x > T(0))) x = T(0);
  }
  return g.make(std::move(out), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    const auto& x = gr.value_of(a);
    auto& ga = gr.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (x[i] > T(0)) ga[i] += go[i];
  });
}

template <typename T>
Var<T> Ops<T>::maximum(V a, V b) {
  require_graph(a, b);
  auto& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same(av, bv, "maximum");
  Tensor<T> out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (av[i] == bv[i]) g.note_kink();
    g.note_branch(av[i] >= bv[i]);
    out[i] = av[i] >= bv[i] ? av[i] : bv[i];
  }
  return g.make(std::move(out), {a, b}, [a = a.id, b = b.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    const auto& av = gr.value_of(a);
    const auto& bv = gr.value_of(b);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const bool take_a = av[i] >= bv[i];
      if (take_a && gr.needs_grad(a)) gr.grad_ref(a)[i] += go[i];
      if (!take_a && gr.needs_grad(b)) gr.grad_ref(b)[i] += go[i];
    }
  });
}

template <typename T>
Var<T> Ops<T>::minimum(V a, V b) {
  require_graph(a, b);
  auto& g = *a.graph;
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same(av, bv, "minimum");
  Tensor<T> out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (av[i] == bv[i]) g.note_kink();
    g.note_branch(av[i] <= bv[i]);
    out[i] = av[i] <= bv[i] ? av[i] : bv[i];
  }
  return g.make(std::move(out), {a, b}, [a = a.id, b = b.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    const auto& av = gr.value_of(a);
    const auto& bv = gr.value_of(b);
    for (std::size_t i = 0; i < go.size(); ++i) {
      const bool take_a = av[i] <= bv[i];
      if (take_a && gr.needs_grad(a)) gr.grad_ref(a)[i] += go[i];
      if (!take_a && gr.needs_grad(b)) gr.grad_ref(b)[i] += go[i];
    }
  });
}

template <typename T>
Var<T> Ops<T>::clamp(V a, T lo, T hi) {
  auto& g = *a.graph;
  Tensor<T> out = a.value();
  for (auto& x : out.values()) {
    if (x == lo || x == hi) g.note_kink();
    g.note_branch(x <= lo);
    g.note_branch(x >= hi);
    x = std::min(std::max(x, lo), hi);
  }
  return g.make(std::move(out), {a}, [a = a.id, lo, hi](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    const auto& x = gr.value_of(a);
    auto& ga = gr.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (x[i] > lo && x[i] < hi) ga[i] += go[i];
  });
}

template <typename T>
Var<T> Ops<T>::sum(V a) {
  const auto& av = a.value();
  T s = 0;
  for (T x : av.values()) s += x;
  return a.graph->make(Tensor<T>::scalar(s), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const T go = gr.grad_of(self)[0];
    auto& ga = gr.grad_ref(a);
    for (auto& x : ga.values()) x += go;
  });
}

template <typename T>
Var<T> Ops<T>::mean(V a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> Ops<T>::reduce_max(V a) {
  auto& g = *a.graph;
  const auto& av = a.value();
  if (av.empty()) throw ShapeError("reduce_max of empty tensor");
  std::size_t arg = 0;
  for (std::size_t i = 1; i < av.size(); ++i) {
    if (av[i] > av[arg]) arg = i;
  }
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (i != arg && av[i] == av[arg]) g.note_kink();
  }
  for (std::size_t bits = arg | (std::size_t{1} << 31); bits != 0; bits >>= 1) g.note_branch((bits & 1U) != 0);
  return g.make(Tensor<T>::scalar(av[arg]), {a}, [a = a.id, arg](Graph<T>& gr, std::uint32_t self) {
    gr.grad_ref(a)[arg] += gr.grad_of(self)[0];
  });
}

template <typename T>
Var<T> Ops<T>::cumsum(V a) {
  Tensor<T> out = a.value();
  for (std::size_t i = 1; i < out.size(); ++i) out[i] += out[i - 1];
  return a.graph->make(std::move(out), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    auto& ga = gr.grad_ref(a);
    T acc = 0;
    for (std::size_t i = go.size(); i-- > 0;) {
      acc += go[i];
      ga[i] += acc;
    }
  });
}

template <typename T>
Var<T> Ops<T>::logsumexp(V a) {
  const auto& av = a.value();
  if (av.empty()) throw ShapeError("logsumexp of empty tensor");
  const T y = stable_lse(av.data(), av.size());
  return a.graph->make(Tensor<T>::scalar(y), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const T go = gr.grad_of(self)[0];
    const T y = gr.value_of(self)[0];
    const auto& x = gr.value_of(a);
    auto& ga = gr.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go * std::exp(x[i] - y);
  });
}

template <typename T>
Var<T> Ops<T>::logsumexp_rows(V a) {
  const auto& av = a.value();
  Tensor<T> out(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) out[r] = stable_lse(av.row_ptr(r), av.cols());
  return a.graph->make(std::move(out), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    const auto& y = gr.value_of(self);
    const auto& x = gr.value_of(a);
    auto& ga = gr.grad_ref(a);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const T* xr = x.row_ptr(r);
      T* gr_ = ga.row_ptr(r);
      for (std::size_t c = 0; c < x.cols(); ++c) gr_[c] += go[r] * std::exp(xr[c] - y[r]);
    }
  });
}

template <typename T>
Var<T> Ops<T>::softmax_rows(V a, bool causal) {
  const auto& av = a.value();
  const std::size_t cols = av.cols();
  Tensor<T> out(av.rows(), cols);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    const std::size_t n = causal ? std::min(cols, r + 1) : cols;
    const T* x = av.row_ptr(r);
    T* y = out.row_ptr(r);
    const T m = row_max(x, n);
    T s = 0;
    for (std::size_t c = 0; c < n; ++c) {
      y[c] = std::exp(x[c] - m);
      s += y[c];
    }
    const T inv = T(1) / s;
    for (std::size_t c = 0; c < n; ++c) y[c] *= inv;
  }
  return a.graph->make(std::move(out), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    const auto& y = gr.value_of(self);
    auto& ga = gr.grad_ref(a);
    const std::size_t cols = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const T* yr = y.row_ptr(r);
      const T* gor = go.row_ptr(r);
      T dotp = 0;
      for (std::size_t c = 0; c < cols; ++c) dotp += yr[c] * gor[c];
      T* gar = ga.row_ptr(r);
      for (std::size_t c = 0; c < cols; ++c) gar[c] += yr[c] * (gor[c] - dotp);
    }
  });
}

template <typename T>
Var<T> Ops<T>::log_softmax_rows(V a) {
  const auto& av = a.value();
  Tensor<T> out = av;
  for (std::size_t r = 0; r < av.rows(); ++r) {
    const T lse = stable_lse(av.row_ptr(r), av.cols());
    T* y = out.row_ptr(r);
    for (std::size_t c = 0; c < av.cols(); ++c) y[c] -= lse;
  }
  return a.graph->make(std::move(out), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    const auto& y = gr.value_of(self);
    auto& ga = gr.grad_ref(a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const T* gor = go.row_ptr(r);
      const T* yr = y.row_ptr(r);
      T gs = 0;
      for (std::size_t c = 0; c < y.cols(); ++c) gs += gor[c];
      T* gar = ga.row_ptr(r);
      for (std::size_t c = 0; c < y.cols(); ++c) gar[c] += gor[c] - std::exp(yr[c]) * gs;
    }
  });
}

template <typename T>
Var<T> Ops<T>::cross_entropy_rows(V logits, std::span<const int> targets) {
  const auto& lv = logits.value();
  if (targets.size() != lv.rows()) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(lv.rows()) + " rows");
  }
  std::vector<int> tg(targets.begin(), targets.end());
  Tensor<T> out(lv.rows(), 1);
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (tg[r] < 0 || static_cast<std::size_t>(tg[r]) >= lv.cols()) {
      throw ShapeError("cross_entropy_rows: target " + std::to_string(tg[r]) + " out of range");
    }
    out[r] = stable_lse(lv.row_ptr(r), lv.cols()) - lv.at(r, static_cast<std::size_t>(tg[r]));
  }
  return logits.graph->make(std::move(out), {logits},
                            [a = logits.id, tg = std::move(tg)](Graph<T>& gr, std::uint32_t self) {
                              const auto& go = gr.grad_of(self);
                              const auto& x = gr.value_of(a);
                              auto& ga = gr.grad_ref(a);
                              for (std::size_t r = 0; r < x.rows(); ++r) {
                                const T* xr = x.row_ptr(r);
                                const T lse = stable_lse(xr, x.cols());
                                T* gar = ga.row_ptr(r);
                                for (std::size_t c = 0; c < x.cols(); ++c) gar[c] += go[r] * std::exp(xr[c] - lse);
                                gar[tg[r]] -= go[r];
                              }
                            });
}

template <typename T>
Var<T> Ops<T>::slice_rows(V a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  if (begin > end || end > av.rows()) throw ShapeError("slice_rows out of range");
  const std::size_t cols = av.cols();
  Tensor<T> out(end - begin, cols,
                std::vector<T>(av.values().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                               av.values().begin() + static_cast<std::ptrdiff_t>(end * cols)));
  return a.graph->make(std::move(out), {a}, [a = a.id, begin, cols](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    T* ga = gr.grad_ref(a).data() + begin * cols;
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

template <typename T>
Var<T> Ops<T>::slice_cols(V a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  if (begin > end || end > av.cols()) throw ShapeError("slice_cols out of range");
  const std::size_t w = end - begin;
  Tensor<T> out(av.rows(), w);
  for (std::size_t r = 0; r < av.rows(); ++r) std::copy_n(av.row_ptr(r) + begin, w, out.row_ptr(r));
  return a.graph->make(std::move(out), {a}, [a = a.id, begin, w](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    auto& ga = gr.grad_ref(a);
    for (std::size_t r = 0; r < go.rows(); ++r) {
      const T* g = go.row_ptr(r);
      T* d = ga.row_ptr(r) + begin;
      for (std::size_t c = 0; c < w; ++c) d[c] += g[c];
    }
  });
}

template <typename T>
Var<T> Ops<T>::concat_rows(std::span<const V> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != cols) throw ShapeError("concat_rows: column mismatch");
    if (p.graph != parts[0].graph) throw std::invalid_argument("operands belong to different graphs");
    rows += p.value().rows();
  }
  std::vector<T> data;
  data.reserve(rows * cols);
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) {
    data.insert(data.end(), p.value().values().begin(), p.value().values().end());
    ids.push_back(p.id);
  }
  return parts[0].graph->make(Tensor<T>(rows, cols, std::move(data)), parts,
                              [ids = std::move(ids)](Graph<T>& gr, std::uint32_t self) {
                                const auto& go = gr.grad_of(self);
                                std::size_t off = 0;
                                for (auto id : ids) {
                                  const std::size_t n = gr.value_of(id).size();
                                  if (gr.needs_grad(id)) {
                                    auto& gi = gr.grad_ref(id);
                                    for (std::size_t i = 0; i < n; ++i) gi[i] += go[off + i];
                                  }
                                  off += n;
                                }
                              });
}

template <typename T>
Var<T> Ops<T>::concat_cols(std::span<const V> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) throw ShapeError("concat_cols: row mismatch");
    if (p.graph != parts[0].graph) throw std::invalid_argument("operands belong to different graphs");
    cols += p.value().cols();
  }
  Tensor<T> out(rows, cols);
  std::vector<std::uint32_t> ids;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pv.row_ptr(r), pv.cols(), out.row_ptr(r) + off);
    off += pv.cols();
    ids.push_back(p.id);
  }
  return parts[0].graph->make(std::move(out), parts, [ids = std::move(ids)](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t w = gr.value_of(id).cols();
      if (gr.needs_grad(id)) {
        auto& gi = gr.grad_ref(id);
        for (std::size_t r = 0; r < go.rows(); ++r) {
          const T* g = go.row_ptr(r) + off;
          T* d = gi.row_ptr(r);
          for (std::size_t c = 0; c < w; ++c) d[c] += g[c];
        }
      }
      off += w;
    }
  });
}

template <typename T>
Var<T> Ops<T>::index(V a, std::size_t r, std::size_t c) {
  const auto& av = a.value();
  if (r >= av.rows() || c >= av.cols()) throw ShapeError("index out of range");
  const std::size_t flat = r * av.cols() + c;
  return a.graph->make(Tensor<T>::scalar(av[flat]), {a}, [a = a.id, flat](Graph<T>& gr, std::uint32_t self) {
    gr.grad_ref(a)[flat] += gr.grad_of(self)[0];
  });
}

template <typename T>
Var<T> Ops<T>::reshape(V a, std::size_t rows, std::size_t cols) {
  const auto& av = a.value();
  if (rows * cols != av.size()) throw ShapeError("reshape: element count mismatch");
  return a.graph->make(Tensor<T>(rows, cols, av.values()), {a}, [a = a.id](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    auto& ga = gr.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
  });
}

template <typename T>
Var<T> Ops<T>::gather_rows(V table, std::span<const int> ids) {
  const auto& tv = table.value();
  const std::size_t d = tv.cols();
  Tensor<T> out(ids.size(), d);
  std::vector<int> idv(ids.begin(), ids.end());
  for (std::size_t r = 0; r < idv.size(); ++r) {
    if (idv[r] < 0 || static_cast<std::size_t>(idv[r]) >= tv.rows()) throw ShapeError("gather_rows: id out of range");
    std::copy_n(tv.row_ptr(static_cast<std::size_t>(idv[r])), d, out.row_ptr(r));
  }
  return table.graph->make(std::move(out), {table}, [t = table.id, idv = std::move(idv)](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    auto& gt = gr.grad_ref(t);
    for (std::size_t r = 0; r < idv.size(); ++r) {
      kernels::axpy<T>(T(1), go.row_ptr(r), gt.row_ptr(static_cast<std::size_t>(idv[r])), go.cols());
    }
  });
}

template <typename T>
Var<T> Ops<T>::sparse_linear(V weight, std::span<const SparseRow<T>> rows) {
  const auto& wv = weight.value();
  const std::size_t d = wv.cols();
  Tensor<T> out(rows.size(), d);
  std::vector<SparseRow<T>> rv(rows.begin(), rows.end());
  for (std::size_t r = 0; r < rv.size(); ++r) {
    for (const auto& [i, v] : rv[r]) {
      if (i >= wv.rows()) throw ShapeError("sparse_linear: feature index out of range");
      kernels::axpy<T>(v, wv.row_ptr(i), out.row_ptr(r), d);
    }
  }
  return weight.graph->make(std::move(out), {weight}, [w = weight.id, rv = std::move(rv)](Graph<T>& gr, std::uint32_t self) {
    const auto& go = gr.grad_of(self);
    auto& gw = gr.grad_ref(w);
    for (std::size_t r = 0; r < rv.size(); ++r) {
      for (const auto& [i, v] : rv[r]) kernels::axpy<T>(v, go.row_ptr(r), gw.row_ptr(i), go.cols());
    }
  });
}

template <typename T>
Var<T> Ops<T>::layer_norm_rows(V x, V gamma, V beta, T eps) {
  require_graph(x, gamma);
  require_graph(x, beta);
  const auto& xv = x.value();
  const std::size_t n = xv.cols();
  if (gamma.value().rows() != 1 || gamma.value().cols() != n || !beta.value().same_shape(gamma.value())) {
    throw ShapeError("layer_norm_rows: gain/bias must be 1x" + std::to_string(n));
  }
  Tensor<T> out(xv.rows(), n);
  Tensor<T> xhat(xv.rows(), n);
  std::vector<T> inv_std(xv.rows());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const T* xr = xv.row_ptr(r);
    T mu = 0;
    for (std::size_t c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    T* hr = xhat.row_ptr(r);
    T* yr = out.row_ptr(r);
    for (std::size_t c = 0; c < n; ++c) {
      hr[c] = (xr[c] - mu) * is;
      yr[c] = gv[c] * hr[c] + bv[c];
    }
  }
  return x.graph->make(
      std::move(out), {x, gamma, beta},
      [x = x.id, g = gamma.id, b = beta.id, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& gr,
                                                                                                  std::uint32_t self) {
        const auto& go = gr.grad_of(self);
        const auto& gv = gr.value_of(g);
        const std::size_t n = go.cols();
        if (gr.needs_grad(b)) {
          auto& gb = gr.grad_ref(b);
          for (std::size_t r = 0; r < go.rows(); ++r)
            for (std::size_t c = 0; c < n; ++c) gb[c] += go.at(r, c);
        }
        if (gr.needs_grad(g)) {
          auto& gg = gr.grad_ref(g);
          for (std::size_t r = 0; r < go.rows(); ++r)
            for (std::size_t c = 0; c < n; ++c) gg[c] += go.at(r, c) * xhat.at(r, c);
        }
        if (gr.needs_grad(x)) {
          auto& gx = gr.grad_ref(x);
          std::vector<T> dh(n);
          for (std::size_t r = 0; r < go.rows(); ++r) {
            T m1 = 0, m2 = 0;
            for (std::size_t c = 0; c < n; ++c) {
              dh[c] = go.at(r, c) * gv[c];
              m1 += dh[c];
              m2 += dh[c] * xhat.at(r, c);
            }
            m1 /= static_cast<T>(n);
            m2 /= static_cast<T>(n);
            for (std::size_t c = 0; c < n; ++c) gx.at(r, c) += inv_std[r] * (dh[c] - m1 - xhat.at(r, c) * m2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// evaluate / gradient
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> evaluate(const Expr<T>& e, const Bindings<T>& bindings) {
  Graph<T> g(bindings);
  return g.value(e(g));
}

template <typename T>
std::map<std::string, Tensor<T>> gradient(const Expr<T>& e, const Bindings<T>& bindings,
                                          const std::vector<std::string>& wrt) {
  Graph<T> g(bindings);
  for (const auto& name : wrt) {
    if (bindings.count(name) == 0) throw UnboundLeafError("unbound leaf '" + name + "'");
  }
  Var<T> root = e(g);
  g.backward(root);
  std::map<std::string, Tensor<T>> out;
  for (const auto& name : wrt) {
    if (g.has_input(name)) {
      out[name] = g.grad(g.named(name));
    } else {
      const auto& b = bindings.at(name);
      out[name] = Tensor<T>(b.rows(), b.cols());
    }
  }
  return out;
}

template class Graph<float>;
template class Graph<double>;
template struct Ops<float>;
template struct Ops<double>;
template Tensor<float> evaluate<float>(const Expr<float>&, const Bindings<float>&);
template Tensor<double> evaluate<double>(const Expr<double>&, const Bindings<double>&);
template std::map<std::string, Tensor<float>> gradient<float>(const Expr<float>&, const Bindings<float>&,
                                                              const std::vector<std::string>&);
template std::map<std::string, Tensor<double>> gradient<double>(const Expr<double>&, const Bindings<double>&,
                                                                const std::vector<std::string>&);

}  // namespace pt::diff
