#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pt/diff/graph.hpp"

namespace pt::diff {

/// Named parameter tensors in insertion order. Master copies are double;
/// graphs receive a converted copy.
class ParamStore {
 public:
  void add(const std::string& name, Tensor<double> value);
  std::size_t size() const { return tensors_.size(); }
  std::size_t scalar_count() const;
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor<double>& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor<double>& operator[](std::size_t i) const { return tensors_[i]; }
  std::size_t index_of(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<double>& get(const std::string& name) const { return tensors_[index_of(name)]; }
  Tensor<double>& get(const std::string& name) { return tensors_[index_of(name)]; }
  bool all_finite() const;
  /// FNV-1a over names, shapes and raw values.
  std::uint64_t content_hash() const;

  bool operator==(const ParamStore& o) const { return names_ == o.names_ && tensors_ == o.tensors_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<double>> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Bindings holding a copy of every parameter under its own name.
Bindings<double> to_bindings(const ParamStore& store);

/// Parameter leaves of one graph, indexable like the store they came from.
/// With from_inputs, leaves are the graph's named inputs (for grad_check).
template <typename T>
class BoundParams {
 public:
  BoundParams(Graph<T>& g, const ParamStore& store, bool requires_grad, bool from_inputs = false);
  Var<T> operator[](const std::string& name) const { return vars_[store_->index_of(name)]; }
  Var<T> at(std::size_t i) const { return vars_[i]; }
  std::size_t size() const { return vars_.size(); }
  /// Gradients after backward(), converted back to double.
  std::vector<Tensor<double>> grads() const;
  Graph<T>& graph() const { return *graph_; }

 private:
  Graph<T>* graph_;
  const ParamStore* store_;
  std::vector<Var<T>> vars_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global-norm clip; <= 0 disables.
  double clip_norm = 1.0;
};

class Adam {
 public:
  Adam(const ParamStore& params, AdamConfig cfg);
  /// Applies one update; returns the pre-clip gradient norm.
  double step(ParamStore& params, const std::vector<Tensor<double>>& grads);
  std::int64_t steps() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor<double>> m_;
  std::vector<Tensor<double>> v_;
  std::int64_t t_ = 0;
};

void add_into(std::vector<Tensor<double>>& acc, const std::vector<Tensor<double>>& g);

}  // namespace pt::diff
