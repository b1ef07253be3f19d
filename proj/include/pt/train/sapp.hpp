#pragma once

// Stage 1: prefix cross-entropies, the soft prefix distribution, the prefix
// and monotonic-ordering losses, and the pretraining loop.

#include <string>
#include <utility>
#include <vector>

#include "pt/data/dataset.hpp"
#include "pt/models/prm.hpp"

namespace pt::train {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CeMode { kSum, kMean };
CeMode parse_ce_mode(const std::string& s);

/// Progress representation trained in stage 1.
enum class ProgressVariant { kSemantic, kNumeric, kReconstruct };
ProgressVariant parse_variant(const std::string& s);
std::string variant_name(ProgressVariant v);

struct PrefixCEs {
  std::vector<double> ce;  ///< ce[k-1] for k = 1..|I|
  CeMode mode = CeMode::kSum;
};

struct PrefixDistribution {
  std::vector<double> p;
  double tau = 1.0;
  double khat = 0.0;
};

PrefixCEs prefix_ce(const diff::Tensor<double>& logits, const std::vector<int>& instruction, CeMode mode);
PrefixDistribution prefix_distribution(const PrefixCEs& ces, double tau);
/// -tau * logsumexp(-ce / tau)
double loss_prefix(const PrefixCEs& ces, double tau);
/// Mean hinge max(0, khat[i] - khat[j]) over pairs (i, j) with t_i < t_j; 0 without pairs.
double loss_mono(const std::vector<double>& khat, const std::vector<std::pair<int, int>>& pairs);

template <typename T>
struct SappOps {
  using V = diff::Var<T>;
  /// |I| x 1 column of prefix cross-entropies.
  static V prefix_ces(V logits, const std::vector<int>& instruction, CeMode mode);
  static V loss_prefix(V ces, double tau);
  static V expected_prefix(V ces, double tau);
  static V loss_mono(const std::vector<V>& khat, const std::vector<std::pair<int, int>>& pairs);
};

struct SappConfig {
  double tau = 1.0;
  CeMode mode = CeMode::kSum;
  bool use_prefix = true;
  bool use_mono = true;
  ProgressVariant variant = ProgressVariant::kSemantic;
  int pair_cap = 10;
  double lr = 1e-3;
  /// Cosine decay from lr to lr_floor * lr over all stage-1 steps; constant otherwise.
  bool cosine = false;
  double lr_floor = 0.05;
  int epochs = 2;
  /// Leading epochs trained on the full-instruction likelihood before the SAPP losses.
  int warmup_epochs = 0;
  int batch_episodes = 8;
  int chunk = 4;
  bool double_precision = false;
  double divergence_limit = 1e6;
};

SappConfig sapp_config_from(const RunConfig& cfg);

/// One state of a minibatch: a sample and its in-batch episode group.
struct SappItem {
  const data::StepSample* sample;
  int group;
};

struct SappBatchLoss {
  double prefix = 0.0;
  double mono = 0.0;
  double total = 0.0;
  std::vector<double> khat;
  int pairs = 0;
};

/// Ordered in-group pairs (i, j) with t_i < t_j, at most cap per group.
std::vector<std::pair<int, int>> mono_pairs(const std::vector<SappItem>& items, int cap);

/// sapp_loss on a batch, optionally accumulating parameter gradients (double graph).
SappBatchLoss sapp_loss(const diff::ParamStore& prm, const models::ModelConfig& mcfg, const SappConfig& cfg,
                        const std::vector<SappItem>& items, std::vector<diff::Tensor<double>>* grads = nullptr);

/// Expected prefix length of a state under the stage-1 model.
double expected_prefix(const diff::ParamStore& prm, const models::ModelConfig& mcfg, const SappConfig& cfg,
                       const data::StepSample& s);

struct SappLogRecord {
  int step = 0;
  int epoch = 0;
  double prefix = 0.0;
  double mono = 0.0;
  double total = 0.0;
  double khat_mean = 0.0;
  double khat_min = 0.0;
  double khat_max = 0.0;
  double grad_norm = 0.0;
};

struct SappResult {
  diff::ParamStore prm;
  std::vector<SappLogRecord> log;
};

SappResult train_sapp(const data::Dataset& ds, const models::ModelConfig& mcfg, const SappConfig& cfg, std::uint64_t seed);

std::string format_sapp_log(const std::vector<SappLogRecord>& log, const std::string& config_hash);

}  // namespace pt::train
