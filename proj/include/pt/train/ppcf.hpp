#pragma once

// Stage 3: action grammar, rewards, group-relative advantages, the joint
// clipped objective, and co-finetuning of the reasoning module and policy.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pt/models/policy.hpp"
#include "pt/train/sapp.hpp"

namespace pt::train {

// ---- action text grammar: K tokens separated by single spaces; STOP is absorbing.

enum class ParseErrorKind { kUnknownToken, kArity, kAfterStop };

struct ParseError {
  ParseErrorKind kind;
  int position;  ///< 1-based token index of the first offending token
  std::string message;
};

struct ParsedActions {
  std::vector<world::Action> tokens;  ///< all tokens if valid, otherwise the valid leading tokens
  std::optional<ParseError> error;
  bool ok() const { return !error.has_value(); }
};

ParsedActions parse_action_text(std::string_view text, int K);
std::string action_text(const std::vector<world::Action>& actions);

// ---- rewards

/// Length of the longest matching prefix; throws on a length mismatch.
int reward_action(const std::vector<world::Action>& pred, const std::vector<world::Action>& expert, bool coarse = false);
/// Action reward of possibly-invalid text: parseable leading tokens only, missing positions are mismatches.
int reward_action_text(std::string_view text, const std::vector<world::Action>& expert, bool coarse = false);
int reward_format(std::string_view text, int K);
double reward_length(std::size_t progress_len, std::size_t instr_len, double beta);

struct RewardBreakdown {
  int act = 0;
  int fmt = 0;
  double len = 0.0;
  double total = 0.0;
};
RewardBreakdown total_reward(int act, int fmt, double len);

// ---- group-relative policy optimization

/// (r - mean) / population std; all zeros when std < eps_std.
std::vector<double> group_advantages(const std::vector<double>& rewards, double eps_std);

inline constexpr double kLogRatioCap = 20.0;
double joint_ratio(double lp_policy_new, double lp_policy_old, double lp_prm_new, double lp_prm_old);
/// -mean_n min(rho A, clip(rho, 1-eps, 1+eps) A)
double grpo_loss(const std::vector<double>& rho, const std::vector<double>& adv, double eps);

template <typename T>
struct GrpoOps {
  using V = diff::Var<T>;
  /// log_ratio: N x 1 (policy plus reasoning log-ratio per rollout).
  static V surrogate(V log_ratio, const std::vector<double>& adv, double eps);
};

struct PpcfConfig {
  int N = 4;
  double eps = 0.28;
  double kl = 0.0;
  double beta = 0.1;
  double temperature = 1.0;
  double eps_std = 1e-6;
  int steps = 1000;
  double lr = 1e-4;
  int batch_states = 4;
  bool use_len_reward = true;
  bool use_fmt_reward = true;
  bool coarse_match = false;
  bool double_precision = false;
  double divergence_limit = 1e6;
  double tau = 1.0;  ///< for the logged expected prefix length
  CeMode ce_mode = CeMode::kSum;
};

PpcfConfig ppcf_config_from(const RunConfig& cfg);

struct Rollout {
  models::TokenSeq progress;
  std::vector<world::Action> actions;
  std::string text;
  RewardBreakdown reward;
  double lp_policy_old = 0.0;
  double lp_prm_old = 0.0;
  double advantage = 0.0;
};

struct RolloutGroup {
  const data::StepSample* state = nullptr;
  std::vector<Rollout> rollouts;
};

/// Samples N progress hypotheses and action sequences for one state, scores them
/// and records old log-probabilities and advantages.
RolloutGroup sample_group(const diff::ParamStore& prm, const diff::ParamStore& policy, const models::ModelConfig& cfg,
                          const PpcfConfig& pc, const data::StepSample& state, std::uint64_t seed);

struct PpcfGradients {
  double loss = 0.0;
  double clip_fraction = 0.0;
  std::vector<double> rho;
  std::vector<diff::Tensor<double>> prm;
  std::vector<diff::Tensor<double>> policy;
};

/// Batch-mean clipped loss of the groups under the current parameters, with gradients for both modules.
PpcfGradients ppcf_gradients(const diff::ParamStore& prm, const diff::ParamStore& policy, const models::ModelConfig& cfg,
                             const PpcfConfig& pc, const std::vector<RolloutGroup>& groups);

struct PpcfLogRecord {
  int step = 0;
  double reward = 0.0;
  double r_act = 0.0;
  double r_fmt = 0.0;
  double r_len = 0.0;
  double loss = 0.0;
  double clip_fraction = 0.0;
  double progress_len = 0.0;
  double khat = 0.0;
  std::vector<int> act_histogram;  ///< counts of r_act = 0..K
};

struct PpcfResult {
  diff::ParamStore prm;
  diff::ParamStore policy;
  std::vector<PpcfLogRecord> log;
};

PpcfResult train_ppcf(const data::Dataset& states, const diff::ParamStore& prm, const diff::ParamStore& policy,
                      const models::ModelConfig& cfg, const PpcfConfig& pc, std::uint64_t seed);

/// Trailing moving average of the per-step mean reward.
std::vector<double> moving_average(const std::vector<double>& v, std::size_t window);
std::string format_ppcf_log(const std::vector<PpcfLogRecord>& log, const std::string& config_hash);

}  // namespace pt::train
