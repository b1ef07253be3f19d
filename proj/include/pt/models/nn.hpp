#pragma once

// Shared transformer pieces for the progress module and the policy.

#include <cstdint>
#include <string>
#include <vector>

#include "pt/diff/params.hpp"
#include "pt/util/config.hpp"
#include "pt/util/rng.hpp"
#include "pt/world/episode.hpp"

namespace pt::models {

using diff::BoundParams;
using diff::ParamStore;
using diff::Tensor;
using diff::Var;

// Progress-module output vocabulary: instruction tokens, then EOS and PAD.
// PAD doubles as the decoder start symbol and never counts toward |I|.
inline constexpr int kEos = world::kInstructionVocab;
inline constexpr int kPad = world::kInstructionVocab + 1;
inline constexpr int kPrmVocab = world::kInstructionVocab + 2;

struct ModelConfig {
  int d = 64;
  int heads = 4;
  int enc_blocks = 2;
  int dec_blocks = 1;
  int mlp = 128;
  int history = 8;
  int patch = 7;
  int K = 3;
  int extra_decode = 8;  ///< L_max = |I| + extra_decode
  int max_positions = 64;
};

ModelConfig model_config_from(const RunConfig& cfg);
int obs_feature_dim(const ModelConfig& cfg);

/// Sparse one-hot features of an observation (patch codes, previous action, step).
template <typename T>
diff::SparseRow<T> obs_features(const world::Observation& o, const ModelConfig& cfg);

// Parameter initialization.
void add_linear(ParamStore& s, const std::string& name, int in, int out, Rng& rng, double gain = 1.0);
void add_layer_norm(ParamStore& s, const std::string& name, int d);
void add_embedding(ParamStore& s, const std::string& name, int rows, int d, Rng& rng);
void add_attention(ParamStore& s, const std::string& name, int d, Rng& rng);
void add_encoder_block(ParamStore& s, const std::string& name, const ModelConfig& cfg, Rng& rng);
void add_decoder_block(ParamStore& s, const std::string& name, const ModelConfig& cfg, Rng& rng);

template <typename T>
struct Layers {
  using V = Var<T>;
  static V linear(const BoundParams<T>& P, const std::string& name, V x);
  static V layer_norm(const BoundParams<T>& P, const std::string& name, V x);
  /// Multi-head attention of queries xq over keys/values xkv.
  static V attention(const BoundParams<T>& P, const std::string& name, V xq, V xkv, int heads, bool causal);
  static V encoder_block(const BoundParams<T>& P, const std::string& name, V x, int heads);
  static V decoder_block(const BoundParams<T>& P, const std::string& name, V x, V memory, int heads);
  /// Observation tokens: history slots 0..h-1, then the current observation at slot cfg.history.
  static V embed_observations(const BoundParams<T>& P, const std::string& name, const ModelConfig& cfg,
                              const std::vector<world::Observation>& history, const world::Observation& current);
};

}  // namespace pt::models
