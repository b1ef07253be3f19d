#include "pt/diff/params.hpp"

#include <cmath>
#include <cstring>

namespace pt::diff {

void ParamStore::add(const std::string& name, Tensor<double> value) {
  if (index_.count(name) != 0) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_.emplace(name, names_.size());
  names_.push_back(name);
  tensors_.push_back(std::move(value));
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

bool ParamStore::all_finite() const {
  for (const auto& t : tensors_)
    for (double x : t.values())
      if (!std::isfinite(x)) return false;
  return true;
}

std::uint64_t ParamStore::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < names_.size(); ++i) {
    mix(names_[i].data(), names_[i].size());
    const std::uint64_t dims[2] = {tensors_[i].rows(), tensors_[i].cols()};
    mix(dims, sizeof dims);
    mix(tensors_[i].data(), tensors_[i].size() * sizeof(double));
  }
  return h;
}

template <typename T>
BoundParams<T>::BoundParams(Graph<T>& g, const ParamStore& store, bool requires_grad, bool from_inputs)
    : graph_(&g), store_(&store) {
  vars_.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (from_inputs) {
      vars_.push_back(g.input(store.name(i), requires_grad));
    } else if constexpr (std::is_same_v<T, double>) {
      vars_.push_back(g.leaf(store[i], requires_grad));
    } else {
      vars_.push_back(g.leaf(store[i].template cast<T>(), requires_grad));
    }
  }
}

Bindings<double> to_bindings(const ParamStore& store) {
  Bindings<double> b;
  for (std::size_t i = 0; i < store.size(); ++i) b.emplace(store.name(i), store[i]);
  return b;
}

template <typename T>
std::vector<Tensor<double>> BoundParams<T>::grads() const {
  std::vector<Tensor<double>> out;
  out.reserve(vars_.size());
  for (const auto& v : vars_) {
    if constexpr (std::is_same_v<T, double>) {
      out.push_back(graph_->grad(v));
    } else {
      out.push_back(graph_->grad(v).template cast<double>());
    }
  }
  return out;
}

template class BoundParams<float>;
template class BoundParams<double>;

Adam::Adam(const ParamStore& params, AdamConfig cfg) : cfg_(cfg) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_.emplace_back(params[i].rows(), params[i].cols());
    v_.emplace_back(params[i].rows(), params[i].cols());
  }
}

double Adam::step(ParamStore& params, const std::vector<Tensor<double>>& grads) {
  if (grads.size() != params.size()) throw std::invalid_argument("Adam::step: gradient count mismatch");
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g.values()) sq += x * x;
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      p[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
  }
  return norm;
}

void add_into(std::vector<Tensor<double>>& acc, const std::vector<Tensor<double>>& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i)
    for (std::size_t j = 0; j < acc[i].size(); ++j) acc[i][j] += g[i][j];
}

}  // namespace pt::diff
