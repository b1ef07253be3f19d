#pragma once

// Stage 2: decode progress with the frozen reasoning module and train the
// policy on K-step expert actions, with an optional DAgger round.

#include <map>
#include <optional>

#include "pt/models/policy.hpp"
#include "pt/train/sapp.hpp"

namespace pt::train {

/// Where the policy's progress segment comes from.
enum class ProgressSource {
  kPrm,     ///< decoded by the frozen reasoning module
  kNone,    ///< empty segment (no-progress baseline)
  kOracle,  ///< ground-truth aligned prefix (diagnostic probe only)
};
ProgressSource parse_progress_source(const std::string& s);

struct PolicyConfig {
  double lr = 1e-3;
  int epochs = 3;
  int batch = 32;
  bool dagger = true;
  int dagger_epochs = 1;
  double dagger_epsilon = 0.1;
  std::size_t dagger_samples = 5000;
  ProgressSource source = ProgressSource::kPrm;
  ProgressVariant variant = ProgressVariant::kSemantic;
  bool double_precision = false;
  double divergence_limit = 1e6;
};

PolicyConfig policy_config_from(const RunConfig& cfg);

/// Greedy decode of the frozen module; identical for identical states.
models::TokenSeq decode_progress_frozen(const diff::ParamStore& prm, const models::ModelConfig& cfg,
                                        const data::StepSample& s);

/// Progress input for one state according to the source and variant.
models::ProgressInput progress_for(const diff::ParamStore& prm, const models::ModelConfig& cfg, const PolicyConfig& pc,
                                   const data::StepSample& s);

/// Memoized progress inputs keyed by sample id.
class ProgressCache {
 public:
  ProgressCache(const diff::ParamStore& prm, const models::ModelConfig& cfg, const PolicyConfig& pc)
      : prm_(&prm), cfg_(cfg), pc_(pc) {}
  const models::ProgressInput& get(const data::StepSample& s);
  std::size_t size() const { return cache_.size(); }

 private:
  const diff::ParamStore* prm_;
  models::ModelConfig cfg_;
  PolicyConfig pc_;
  std::map<std::uint64_t, models::ProgressInput> cache_;
};

/// -sum_j log P(a*_{t+j}) under the factorized head.
double policy_ce_loss(const diff::ParamStore& policy, const models::ModelConfig& cfg, const data::StepSample& s,
                      const models::ProgressInput& prog);

/// Mean policy CE over a batch; fills parameter gradients when asked (double graph).
double policy_batch_loss(const diff::ParamStore& policy, const models::ModelConfig& cfg,
                         const std::vector<const data::StepSample*>& batch, ProgressCache& progress,
                         std::vector<diff::Tensor<double>>* grads = nullptr);

struct PolicyLogRecord {
  int step = 0;
  int epoch = 0;
  bool dagger = false;
  double loss = 0.0;
  std::vector<double> accuracy;  ///< per action position
  double grad_norm = 0.0;
};

struct PolicyEval {
  double loss = 0.0;
  std::vector<double> accuracy;  ///< per action position
  double mean_accuracy = 0.0;
};

PolicyEval evaluate_policy_ce(const diff::ParamStore& policy, const models::ModelConfig& cfg, const data::Dataset& ds,
                              ProgressCache& progress);

struct PolicyResult {
  diff::ParamStore policy;
  std::vector<PolicyLogRecord> log;
  data::Dataset aggregated;  ///< training set after DAgger aggregation
  int dagger_rollouts = 0;
  std::uint64_t prm_hash_before = 0;
  std::uint64_t prm_hash_after = 0;
  std::optional<PolicyEval> validation;
};

/// Trains on ds (whose samples index into `episodes`), optionally aggregating
/// one round of on-policy DAgger data collected on the same episodes.
PolicyResult train_policy(const data::Dataset& ds, const std::vector<world::Episode>& episodes,
                          const diff::ParamStore& prm, const models::ModelConfig& cfg, const PolicyConfig& pc,
                          std::uint64_t seed, const data::Dataset* validation = nullptr);

std::string format_policy_log(const std::vector<PolicyLogRecord>& log, const std::string& config_hash);

}  // namespace pt::train
