#pragma once

// Closed-loop evaluation, navigation metrics, progress quality, ablation
// suites and report files.

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pt/train/policy_pretrain.hpp"
#include "pt/train/ppcf.hpp"
#include "pt/train/sapp.hpp"

namespace pt::eval {

inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

/// Poses visited during one episode, start included.
struct Trajectory {
  std::vector<world::Pose> poses;
  bool stopped = false;  ///< ended by STOP rather than the step cap
  int steps = 0;
};

struct EpisodeMetrics {
  double ne = 0.0;
  bool success = false;
  bool oracle_success = false;
  double spl = 0.0;
  double path_length = 0.0;
  double shortest = 0.0;
};

struct MetricsReport {
  int episodes = 0;
  double ne = 0.0;
  double sr = 0.0;
  double osr = 0.0;
  double spl = 0.0;
  double spearman = kUndefined;        ///< mean per-episode rank correlation of k-hat and k*
  int spearman_episodes = 0;           ///< episodes with a defined correlation
  double violation_rate = kUndefined;  ///< fraction of consecutive steps with k-hat decreasing
  std::vector<EpisodeMetrics> per_episode;
};

EpisodeMetrics episode_metrics(const Trajectory& tr, const world::Episode& ep, double radius);
MetricsReport compute_metrics(const std::vector<Trajectory>& trajectories, const std::vector<world::Episode>& episodes,
                              double radius);

struct EvalConfig {
  int execute_steps = 3;
  int max_steps = 120;
  int K = 3;
  int history = 8;
};

EvalConfig eval_config_from(const RunConfig& cfg);

/// Plans K actions for a state; only the leading execute_steps are carried out.
using Planner = std::function<std::vector<world::Action>(const data::StepSample& state)>;
/// A fresh planner per episode, so planners may keep per-episode state.
using PlannerFactory = std::function<Planner(const world::Episode& ep, std::size_t index)>;

Trajectory run_episode(const Planner& planner, const world::Episode& ep, const EvalConfig& cfg);
std::vector<Trajectory> run_episodes(const PlannerFactory& factory, const std::vector<world::Episode>& episodes,
                                     const EvalConfig& cfg);

/// Replays the oracle expert one action at a time.
PlannerFactory expert_planner();
/// Uniformly random actions, seeded per episode.
PlannerFactory random_planner(std::uint64_t seed, int K);
/// Greedy progress decoding followed by the policy's greedy K actions.
PlannerFactory policy_planner(const diff::ParamStore& policy, const diff::ParamStore& prm, const models::ModelConfig& mcfg,
                              const train::PolicyConfig& pc);

MetricsReport evaluate_policy(const diff::ParamStore& policy, const diff::ParamStore& prm, const models::ModelConfig& mcfg,
                              const train::PolicyConfig& pc, const std::vector<world::Episode>& episodes,
                              const EvalConfig& cfg, double radius);

// ---- progress quality

/// Spearman correlation with average ranks; kUndefined when either side is constant.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

struct TraceRecord {
  int episode = 0;
  int t = 0;
  double khat = 0.0;
  int kstar = 0;
  std::string decoded;  ///< greedy progress text when requested
};

struct ProgressQuality {
  double spearman = kUndefined;
  int defined_episodes = 0;
  int episodes = 0;
  double violation_rate = kUndefined;
  std::vector<TraceRecord> traces;
};

/// Scalar progress estimate in prefix-length units for any variant.
double progress_estimate(const diff::ParamStore& prm, const models::ModelConfig& mcfg, const train::SappConfig& sc,
                         const data::StepSample& s);

ProgressQuality progress_quality(const diff::ParamStore& prm, const models::ModelConfig& mcfg,
                                 const train::SappConfig& sc, const std::vector<world::Episode>& episodes,
                                 bool decode_text = false);

// ---- reports

std::string format_metrics_row(const std::string& name, const MetricsReport& r);
std::string metrics_table(const std::vector<std::pair<std::string, MetricsReport>>& rows, const std::string& config_hash);

struct MetricsRow {
  std::string name;
  int episodes = 0;
  double ne = 0.0, sr = 0.0, osr = 0.0, spl = 0.0, spearman = 0.0, violation_rate = 0.0;
};
/// Parses a table written by metrics_table; the config hash goes to *hash when given.
std::vector<MetricsRow> parse_metrics_table(const std::string& text, std::string* hash = nullptr);

std::string traces_csv(const std::vector<TraceRecord>& traces, const std::string& config_hash);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};
/// Self-contained SVG line chart.
std::string line_chart_svg(const std::string& title, const std::vector<Series>& series, const std::string& config_hash);

/// Writes a text file, creating parent directories; throws std::runtime_error on failure.
void write_text(const std::string& path, const std::string& text);

struct ReportBundle {
  std::vector<std::pair<std::string, MetricsReport>> rows;
  std::vector<TraceRecord> traces;
  std::vector<Series> reward_curves;
};

/// metrics.tsv, traces.csv, and progress.svg / reward.svg when there is data.
void emit_report(const ReportBundle& bundle, const std::string& dir, const std::string& config_hash);

// ---- pipeline

struct StageTimes {
  double data = 0.0, sapp = 0.0, policy = 0.0, ppcf = 0.0, eval = 0.0;
};

struct PipelineOptions {
  bool run_ppcf = true;
  bool evaluate = true;
  bool random_baseline = true;
  std::optional<diff::ParamStore> prm_init;     ///< skip stage 1 and use these weights
  std::optional<diff::ParamStore> policy_init;  ///< skip stage 2 and use these weights
  std::string out_dir;                          ///< write datasets, checkpoints and reports when set
};

struct PipelineResult {
  std::uint64_t config_hash = 0;
  data::Dataset dataset;
  diff::ParamStore prm;
  diff::ParamStore policy;
  std::vector<train::SappLogRecord> sapp_log;
  std::vector<train::PolicyLogRecord> policy_log;
  std::vector<train::PpcfLogRecord> ppcf_log;
  MetricsReport report;
  MetricsReport random_report;
  ProgressQuality progress;
  StageTimes seconds;
};

/// Data generation, the three training stages and held-out evaluation.
PipelineResult run_pipeline(const RunConfig& cfg, std::uint64_t seed, const PipelineOptions& opt = {});

struct AblationRow {
  std::string name;
  MetricsReport report;
  std::vector<double> reward_curve;  ///< stage 3 per-step mean reward, when stage 3 ran
};

/// Suites: sapp_losses, ppcf_rewards, exec_steps, progress_variant, plus the sapp_tau and ppcf_beta sweeps.
std::vector<AblationRow> ablate(const std::string& suite, const RunConfig& base, std::uint64_t seed);
std::vector<std::string> ablation_suites();

// ---- gradient suite

struct GradSuiteEntry {
  std::string name;
  int instances = 0;
  int kink_instances = 0;  ///< base point on a kink, nothing compared
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::size_t skipped = 0;  ///< probes straddling a kink
  bool passed = true;
};

/// Finite-difference checks of the prefix loss, the monotonic loss, the policy
/// cross-entropy and the clipped surrogate on random double-precision instances.
std::vector<GradSuiteEntry> run_grad_suite(std::uint64_t seed, int instances = 50, double tolerance = 1e-4);
std::string format_grad_suite(const std::vector<GradSuiteEntry>& entries, const std::string& config_hash);

}  // namespace pt::eval
