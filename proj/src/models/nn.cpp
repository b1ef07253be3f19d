#include "pt/models/nn.hpp"

#include <array>

#include <cmath>

namespace pt::models {

using diff::Graph;

ModelConfig model_config_from(const RunConfig& cfg) {
  ModelConfig m;
  m.d = static_cast<int>(cfg.integer("model.d"));
  m.heads = static_cast<int>(cfg.integer("model.heads"));
  m.enc_blocks = static_cast<int>(cfg.integer("model.enc_blocks"));
  m.dec_blocks = static_cast<int>(cfg.integer("model.dec_blocks"));
  m.mlp = static_cast<int>(cfg.integer("model.mlp"));
  m.history = static_cast<int>(cfg.integer("obs.history"));
  m.patch = static_cast<int>(cfg.integer("obs.patch"));
  m.K = static_cast<int>(cfg.integer("data.K"));
  m.extra_decode = static_cast<int>(cfg.integer("model.extra_decode"));
  if (m.d % m.heads != 0) throw ConfigError("model.d must be divisible by model.heads");
  if (m.K < 1) throw ConfigError("data.K must be >= 1");
  return m;
}

int obs_feature_dim(const ModelConfig& cfg) {
  return cfg.patch * cfg.patch * world::kNumCellCodes + 2 * world::kLandmarkKinds + (world::kNumActions + 1) + 1;
}

template <typename T>
diff::SparseRow<T> obs_features(const world::Observation& o, const ModelConfig& cfg) {
  diff::SparseRow<T> row;
  const int p = cfg.patch;
  const auto cells = static_cast<std::uint32_t>(p * p);
  row.reserve(cells + 2 * world::kLandmarkKinds + 2);
  // Position-invariant landmark cues: presence anywhere in view, and
  // proximity of the nearest cell (1 at the agent, falling to 1/(mid+1) at the border).
  std::array<double, world::kLandmarkKinds> near{};
  const int mid = p / 2;
  for (std::uint32_t i = 0; i < o.patch.size() && i < cells; ++i) {
    row.emplace_back(i * world::kNumCellCodes + o.patch[i], T(1));
    if (o.patch[i] >= 2) {
      const int r = static_cast<int>(i) / p, c = static_cast<int>(i) % p;
      const double prox = 1.0 / (1.0 + std::max(std::abs(r - mid), std::abs(c - mid)));
      auto& n = near[static_cast<std::size_t>(o.patch[i] - 2)];
      n = std::max(n, prox);
    }
  }
  std::uint32_t base = cells * world::kNumCellCodes;
  for (std::uint32_t k = 0; k < static_cast<std::uint32_t>(world::kLandmarkKinds); ++k) {
    if (near[k] > 0.0) {
      row.emplace_back(base + 2 * k, T(1));
      row.emplace_back(base + 2 * k + 1, static_cast<T>(near[k]));
    }
  }
  base += 2 * world::kLandmarkKinds;
  row.emplace_back(base + static_cast<std::uint32_t>(o.prev_action), T(1));
  row.emplace_back(base + world::kNumActions + 1, static_cast<T>(o.step_scaled));
  return row;
}

template diff::SparseRow<float> obs_features<float>(const world::Observation&, const ModelConfig&);
template diff::SparseRow<double> obs_features<double>(const world::Observation&, const ModelConfig&);

void add_linear(ParamStore& s, const std::string& name, int in, int out, Rng& rng, double gain) {
  Tensor<double> w(static_cast<std::size_t>(in), static_cast<std::size_t>(out));
  const double sd = gain / std::sqrt(static_cast<double>(in));
  for (auto& x : w.values()) x = sd * rng.normal();
  s.add(name + ".W", std::move(w));
  s.add(name + ".b", Tensor<double>(1, static_cast<std::size_t>(out)));
}

void add_layer_norm(ParamStore& s, const std::string& name, int d) {
  s.add(name + ".g", Tensor<double>(1, static_cast<std::size_t>(d), 1.0));
  s.add(name + ".b", Tensor<double>(1, static_cast<std::size_t>(d)));
}

void add_embedding(ParamStore& s, const std::string& name, int rows, int d, Rng& rng) {
  Tensor<double> e(static_cast<std::size_t>(rows), static_cast<std::size_t>(d));
  for (auto& x : e.values()) x = 0.1 * rng.normal();
  s.add(name, std::move(e));
}

void add_attention(ParamStore& s, const std::string& name, int d, Rng& rng) {
  add_linear(s, name + ".q", d, d, rng);
  add_linear(s, name + ".kv", d, 2 * d, rng);
  add_linear(s, name + ".o", d, d, rng, 0.5);
}

void add_encoder_block(ParamStore& s, const std::string& name, const ModelConfig& cfg, Rng& rng) {
  add_layer_norm(s, name + ".ln1", cfg.d);
  add_attention(s, name + ".attn", cfg.d, rng);
  add_layer_norm(s, name + ".ln2", cfg.d);
  add_linear(s, name + ".fc1", cfg.d, cfg.mlp, rng, std::sqrt(2.0));
  add_linear(s, name + ".fc2", cfg.mlp, cfg.d, rng, 0.5);
}

void add_decoder_block(ParamStore& s, const std::string& name, const ModelConfig& cfg, Rng& rng) {
  add_layer_norm(s, name + ".ln1", cfg.d);
  add_attention(s, name + ".self", cfg.d, rng);
  add_layer_norm(s, name + ".ln2", cfg.d);
  add_attention(s, name + ".cross", cfg.d, rng);
  add_layer_norm(s, name + ".ln3", cfg.d);
  add_linear(s, name + ".fc1", cfg.d, cfg.mlp, rng, std::sqrt(2.0));
  add_linear(s, name + ".fc2", cfg.mlp, cfg.d, rng, 0.5);
}

template <typename T>
Var<T> Layers<T>::linear(const BoundParams<T>& P, const std::string& name, V x) {
  return diff::add_row(diff::matmul(x, P[name + ".W"]), P[name + ".b"]);
}

template <typename T>
Var<T> Layers<T>::layer_norm(const BoundParams<T>& P, const std::string& name, V x) {
  return diff::layer_norm_rows(x, P[name + ".g"], P[name + ".b"]);
}

template <typename T>
Var<T> Layers<T>::attention(const BoundParams<T>& P, const std::string& name, V xq, V xkv, int heads, bool causal) {
  const std::size_t d = xq.cols();
  const std::size_t dh = d / static_cast<std::size_t>(heads);
  const V q = linear(P, name + ".q", xq);
  const V kv = linear(P, name + ".kv", xkv);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<V> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
    const V qh = diff::slice_cols(q, h * dh, (h + 1) * dh);
    const V kh = diff::slice_cols(kv, h * dh, (h + 1) * dh);
    const V vh = diff::slice_cols(kv, d + h * dh, d + (h + 1) * dh);
    const V att = diff::softmax_rows(diff::scale(diff::matmul_nt(qh, kh), scale), causal);
    outs.push_back(diff::matmul(att, vh));
  }
  return linear(P, name + ".o", diff::concat_cols<T>(outs));
}

template <typename T>
Var<T> Layers<T>::encoder_block(const BoundParams<T>& P, const std::string& name, V x, int heads) {
  const V h = layer_norm(P, name + ".ln1", x);
  x = x + attention(P, name + ".attn", h, h, heads, false);
  const V h2 = layer_norm(P, name + ".ln2", x);
  return x + linear(P, name + ".fc2", diff::relu(linear(P, name + ".fc1", h2)));
}

template <typename T>
Var<T> Layers<T>::decoder_block(const BoundParams<T>& P, const std::string& name, V x, V memory, int heads) {
  const V h = layer_norm(P, name + ".ln1", x);
  x = x + attention(P, name + ".self", h, h, heads, true);
  x = x + attention(P, name + ".cross", layer_norm(P, name + ".ln2", x), memory, heads, false);
  const V h3 = layer_norm(P, name + ".ln3", x);
  return x + linear(P, name + ".fc2", diff::relu(linear(P, name + ".fc1", h3)));
}

template <typename T>
Var<T> Layers<T>::embed_observations(const BoundParams<T>& P, const std::string& name, const ModelConfig& cfg,
                                     const std::vector<world::Observation>& history, const world::Observation& current) {
  std::vector<diff::SparseRow<T>> rows;
  std::vector<int> slots;
  const std::size_t h = std::min(history.size(), static_cast<std::size_t>(cfg.history));
  for (std::size_t i = 0; i < h; ++i) {
    rows.push_back(obs_features<T>(history[i], cfg));
    slots.push_back(static_cast<int>(i));
  }
  rows.push_back(obs_features<T>(current, cfg));
  slots.push_back(cfg.history);
  const V x = diff::add_row(diff::sparse_linear<T>(P[name + ".W"], rows), P[name + ".b"]);
  return x + diff::gather_rows<T>(P[name + ".slot"], slots);
}

template struct Layers<float>;
template struct Layers<double>;

}  // namespace pt::models
