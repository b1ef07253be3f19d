#include "pt/models/policy.hpp"

#include <algorithm>
#include <cmath>

namespace pt::models {

using diff::Graph;

namespace {

enum Segment : int { kSegObs, kSegInstr, kSegProgress, kSegQuery, kSegments };

}  // namespace

ParamStore init_policy(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x901, 2));
  ParamStore s;
  add_linear(s, "pol.obs", obs_feature_dim(cfg), cfg.d, rng);
  add_embedding(s, "pol.obs.slot", cfg.history + 1, cfg.d, rng);
  add_embedding(s, "pol.tok", kPrmVocab, cfg.d, rng);
  add_embedding(s, "pol.pos", cfg.max_positions, cfg.d, rng);
  add_embedding(s, "pol.seg", kSegments, cfg.d, rng);
  add_embedding(s, "pol.query", cfg.K, cfg.d, rng);
  add_embedding(s, "pol.numeric", 1, cfg.d, rng);
  for (int b = 0; b < cfg.enc_blocks; ++b) add_encoder_block(s, "pol.enc" + std::to_string(b), cfg, rng);
  add_layer_norm(s, "pol.ln", cfg.d);
  add_linear(s, "pol.head", cfg.d, world::kNumActions, rng, 0.5);
  return s;
}

template <typename T>
Var<T> Policy<T>::logits(const BoundParams<T>& P, const ModelConfig& cfg, const data::StepSample& s,
                         const ProgressInput& prog) {
  Graph<T>& g = P.graph();
  std::vector<V> parts;
  std::vector<int> segs;
  auto positions = [&](std::size_t n) {
    if (static_cast<int>(n) > cfg.max_positions) throw ModelError("segment longer than the position table");
    std::vector<int> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<int>(i);
    return p;
  };
  auto tokens = [&](const std::vector<int>& ids, int seg) {
    const V e = diff::gather_rows<T>(P["pol.tok"], ids) + diff::gather_rows<T>(P["pol.pos"], positions(ids.size()));
    parts.push_back(e);
    segs.insert(segs.end(), ids.size(), seg);
  };

  const V obs = Layers<T>::embed_observations(P, "pol.obs", cfg, s.history, s.current);
  parts.push_back(obs);
  segs.insert(segs.end(), obs.rows(), kSegObs);
  if (!s.instruction.empty()) tokens(s.instruction, kSegInstr);
  if (prog.numeric) {
    parts.push_back(diff::mul(g.scalar(static_cast<T>(prog.value)), P["pol.numeric"]));
    segs.push_back(kSegProgress);
  } else if (!prog.tokens.empty()) {
    tokens(prog.tokens, kSegProgress);
  }
  parts.push_back(P["pol.query"]);
  segs.insert(segs.end(), static_cast<std::size_t>(cfg.K), kSegQuery);

  V x = diff::concat_rows<T>(parts) + diff::gather_rows<T>(P["pol.seg"], segs);
  for (int b = 0; b < cfg.enc_blocks; ++b) x = Layers<T>::encoder_block(P, "pol.enc" + std::to_string(b), x, cfg.heads);
  const std::size_t n = x.rows();
  const V q = diff::slice_rows(x, n - static_cast<std::size_t>(cfg.K), n);
  return Layers<T>::linear(P, "pol.head", Layers<T>::layer_norm(P, "pol.ln", q));
}

template <typename T>
Var<T> Policy<T>::logprob(V logits, const std::vector<world::Action>& actions) {
  if (actions.size() != logits.rows()) throw ModelError("action count must equal K");
  std::vector<int> ids(actions.size());
  for (std::size_t i = 0; i < actions.size(); ++i) ids[i] = static_cast<int>(actions[i]);
  return diff::neg(diff::sum(diff::cross_entropy_rows<T>(logits, ids)));
}

template struct Policy<float>;
template struct Policy<double>;

Tensor<double> policy_forward(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s,
                              const ProgressInput& prog) {
  Graph<double> g;
  BoundParams<double> P(g, params, false);
  return diff::exp(diff::log_softmax_rows(Policy<double>::logits(P, cfg, s, prog))).value();
}

double logprob_of(const Tensor<double>& probs, const std::vector<world::Action>& actions) {
  if (actions.size() != probs.rows()) throw ModelError("action count must equal K");
  double lp = 0.0;
  for (std::size_t j = 0; j < actions.size(); ++j) lp += std::log(probs.at(j, static_cast<std::size_t>(actions[j])));
  return lp;
}

double policy_logprob(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s,
                      const ProgressInput& prog, const std::vector<world::Action>& actions) {
  Graph<double> g;
  BoundParams<double> P(g, params, false);
  return Policy<double>::logprob(Policy<double>::logits(P, cfg, s, prog), actions).value().item();
}

std::vector<world::Action> policy_greedy(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s,
                                         const ProgressInput& prog) {
  Graph<float> g;
  BoundParams<float> P(g, params, false);
  const auto& lv = Policy<float>::logits(P, cfg, s, prog).value();
  std::vector<world::Action> out;
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    const float* row = lv.row_ptr(r);
    out.push_back(static_cast<world::Action>(std::max_element(row, row + lv.cols()) - row));
  }
  return out;
}

}  // namespace pt::models
