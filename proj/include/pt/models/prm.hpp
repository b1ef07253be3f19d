#pragma once

// Progress reasoning module: encodes the observation history and decodes the
// completed instruction prefix token by token.

#include <optional>
#include <stdexcept>

#include "pt/data/dataset.hpp"
#include "pt/models/nn.hpp"

namespace pt::models {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decoded tokens with their log-probabilities under the decoding distribution.
struct TokenSeq {
  std::vector<int> tokens;  ///< excludes EOS
  std::vector<double> logprobs;  ///< one per emitted symbol, EOS included when emitted
  double total = 0.0;
  bool ended_with_eos = false;
  bool operator==(const TokenSeq&) const = default;
};

enum class DecodeMode { kGreedy, kSample };

ParamStore init_prm(const ModelConfig& cfg, std::uint64_t seed);

/// The decoder's position cap for an instruction of length n.
int decode_limit(const ModelConfig& cfg, int instruction_len);

template <typename T>
struct Prm {
  using V = Var<T>;
  /// Encoded history memory, (h+1) x d.
  static V encode(const BoundParams<T>& P, const ModelConfig& cfg, const std::vector<world::Observation>& history,
                  const world::Observation& current);
  /// Logits for each target position given the previous targets (teacher forcing), |targets| x V.
  static V teacher_logits(const BoundParams<T>& P, const ModelConfig& cfg, V memory, const std::vector<int>& targets);
  /// Scalar completion-ratio head in (0, 1) for the numeric-regression variant.
  static V numeric_progress(const BoundParams<T>& P, V memory);
  /// Sum of log-probabilities of a decoded sequence (EOS included when it was emitted).
  static V sequence_logprob(const BoundParams<T>& P, const ModelConfig& cfg, V memory, const TokenSeq& seq);
};

/// Teacher-forced logits over the instruction, |I| x V, in double.
Tensor<double> prm_forward_teacher(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s);

/// Greedy or temperature sampling up to EOS or L_max = |I| + extra_decode.
TokenSeq prm_decode(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s, DecodeMode mode,
                    double temperature = 1.0, std::uint64_t seed = 0);

/// Numeric progress estimate in (0, 1).
double prm_numeric(const ParamStore& params, const ModelConfig& cfg, const data::StepSample& s);

}  // namespace pt::models
