#pragma once

// Progress-guided policy: one encoder over tagged segments
// [observations | instruction | progress | K queries], K categorical heads.

#include "pt/models/prm.hpp"

namespace pt::models {

/// Progress conditioning: decoded tokens, or a single scalar for the
/// numeric-regression variant.
struct ProgressInput {
  std::vector<int> tokens;
  bool numeric = false;
  double value = 0.0;

  static ProgressInput from_tokens(std::vector<int> t) { return {std::move(t), false, 0.0}; }
  static ProgressInput from_value(double v) { return {{}, true, v}; }
};

ParamStore init_policy(const ModelConfig& cfg, std::uint64_t seed);

template <typename T>
struct Policy {
  using V = Var<T>;
  /// K x |A| action logits.
  static V logits(const BoundParams<T>& P, const ModelConfig& cfg, const data::StepSample& s, const ProgressInput& prog);
  /// log pi(actions | inputs) under the factorized head.
  static V logprob(V logits, const std::vector<world::Action>& actions);
};

/// K rows of action probabilities, in double.
Tensor<double> policy_forward(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s,
                              const ProgressInput& prog);
double policy_logprob(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s,
                      const ProgressInput& prog, const std::vector<world::Action>& actions);
/// Argmax per head.
std::vector<world::Action> policy_greedy(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s,
                                         const ProgressInput& prog);

/// Sum of per-row log-probabilities of chosen actions from a probability table.
double logprob_of(const Tensor<double>& probs, const std::vector<world::Action>& actions);

}  // namespace pt::models
