#include "pt/models/prm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pt::models {

using diff::Graph;

namespace {

// Decoder over explicit input ids; returns |inputs| x V logits.
template <typename T>
Var<T> decoder_logits(const BoundParams<T>& P, const ModelConfig& cfg, Var<T> memory, const std::vector<int>& inputs) {
  if (static_cast<int>(inputs.size()) > cfg.max_positions) throw ModelError("instruction longer than L_max");
  std::vector<int> pos(inputs.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  Var<T> x = diff::gather_rows<T>(P["prm.tok"], inputs) + diff::gather_rows<T>(P["prm.pos"], pos);
  for (int b = 0; b < cfg.dec_blocks; ++b) {
    x = Layers<T>::decoder_block(P, "prm.dec" + std::to_string(b), x, memory, cfg.heads);
  }
  return Layers<T>::linear(P, "prm.out", Layers<T>::layer_norm(P, "prm.dec_ln", x));
}

// Log-softmax over the emittable symbols; PAD is never produced.
std::vector<double> row_log_softmax(const float* logits, double temperature) {
  std::vector<double> out(kPrmVocab, -std::numeric_limits<double>::infinity());
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < kPad; ++i) mx = std::max(mx, static_cast<double>(logits[i]) / temperature);
  double z = 0.0;
  for (int i = 0; i < kPad; ++i) z += std::exp(static_cast<double>(logits[i]) / temperature - mx);
  const double lz = mx + std::log(z);
  for (int i = 0; i < kPad; ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(logits[i]) / temperature - lz;
  return out;
}

}  // namespace

ParamStore init_prm(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x9e3, 1));
  ParamStore s;
  add_linear(s, "prm.obs", obs_feature_dim(cfg), cfg.d, rng);
  add_embedding(s, "prm.obs.slot", cfg.history + 1, cfg.d, rng);
  for (int b = 0; b < cfg.enc_blocks; ++b) add_encoder_block(s, "prm.enc" + std::to_string(b), cfg, rng);
  add_layer_norm(s, "prm.enc_ln", cfg.d);
  add_embedding(s, "prm.tok", kPrmVocab, cfg.d, rng);
  add_embedding(s, "prm.pos", cfg.max_positions, cfg.d, rng);
  for (int b = 0; b < cfg.dec_blocks; ++b) add_decoder_block(s, "prm.dec" + std::to_string(b), cfg, rng);
  add_layer_norm(s, "prm.dec_ln", cfg.d);
  add_linear(s, "prm.out", cfg.d, kPrmVocab, rng, 0.5);
  add_linear(s, "prm.num", cfg.d, 1, rng, 0.5);
  return s;
}

int decode_limit(const ModelConfig& cfg, int instruction_len) {
  return std::min(instruction_len + cfg.extra_decode, cfg.max_positions - 1);
}

template <typename T>
Var<T> Prm<T>::encode(const BoundParams<T>& P, const ModelConfig& cfg, const std::vector<world::Observation>& history,
                      const world::Observation& current) {
  V x = Layers<T>::embed_observations(P, "prm.obs", cfg, history, current);
  for (int b = 0; b < cfg.enc_blocks; ++b) x = Layers<T>::encoder_block(P, "prm.enc" + std::to_string(b), x, cfg.heads);
  return Layers<T>::layer_norm(P, "prm.enc_ln", x);
}

template <typename T>
Var<T> Prm<T>::teacher_logits(const BoundParams<T>& P, const ModelConfig& cfg, V memory, const std::vector<int>& targets) {
  if (targets.empty()) throw ModelError("teacher forcing needs at least one target");
  std::vector<int> inputs{kPad};
  inputs.insert(inputs.end(), targets.begin(), targets.end() - 1);
  return decoder_logits(P, cfg, memory, inputs);
}

template <typename T>
Var<T> Prm<T>::numeric_progress(const BoundParams<T>& P, V memory) {
  const V last = diff::slice_rows(memory, memory.rows() - 1, memory.rows());
  const V z = Layers<T>::linear(P, "prm.num", last);
  Graph<T>& g = *memory.graph;
  return diff::div(g.scalar(T(1)), diff::add_scalar(diff::exp(diff::neg(z)), T(1)));
}

template <typename T>
Var<T> Prm<T>::sequence_logprob(const BoundParams<T>& P, const ModelConfig& cfg, V memory, const TokenSeq& seq) {
  std::vector<int> targets = seq.tokens;
  if (seq.ended_with_eos) targets.push_back(kEos);
  const V logits = teacher_logits(P, cfg, memory, targets);
  return diff::neg(diff::sum(diff::cross_entropy_rows<T>(logits, targets)));
}

template struct Prm<float>;
template struct Prm<double>;

Tensor<double> prm_forward_teacher(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s) {
  Graph<double> g;
  BoundParams<double> P(g, params, false);
  const auto mem = Prm<double>::encode(P, cfg, s.history, s.current);
  return Prm<double>::teacher_logits(P, cfg, mem, s.instruction).value();
}

TokenSeq prm_decode(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s, DecodeMode mode,
                    double temperature, std::uint64_t seed) {
  if (mode == DecodeMode::kSample && !(temperature > 0.0)) throw ModelError("sampling temperature must be > 0");
  const double temp = mode == DecodeMode::kSample ? temperature : 1.0;
  Graph<float> g;
  BoundParams<float> P(g, params, false);
  const auto mem = Prm<float>::encode(P, cfg, s.history, s.current);
  const int limit = decode_limit(cfg, static_cast<int>(s.instruction.size()));
  Rng rng(seed);
  TokenSeq out;
  std::vector<int> inputs{kPad};
  while (static_cast<int>(out.tokens.size()) < limit) {
    const auto logits = decoder_logits(P, cfg, mem, inputs);
    const auto& lv = logits.value();
    const auto lp = row_log_softmax(lv.row_ptr(lv.rows() - 1), temp);
    int pick = 0;
    if (mode == DecodeMode::kGreedy) {
      pick = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    } else {
      double u = rng.uniform();
      pick = kEos;
      for (int i = 0; i < kPad; ++i) {
        u -= std::exp(lp[static_cast<std::size_t>(i)]);
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
    }
    out.logprobs.push_back(lp[static_cast<std::size_t>(pick)]);
    out.total += lp[static_cast<std::size_t>(pick)];
    if (pick == kEos) {
      out.ended_with_eos = true;
      break;
    }
    out.tokens.push_back(pick);
    inputs.push_back(pick);
  }
  return out;
}

double prm_numeric(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s) {
  Graph<double> g;
  BoundParams<double> P(g, params, false);
  return Prm<double>::numeric_progress(P, Prm<double>::encode(P, cfg, s.history, s.current)).value().item();
}

}  // namespace pt::models
