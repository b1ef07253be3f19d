#include <chrono>
#include <filesystem>

#include "pt/eval/eval.hpp"
#include "pt/models/checkpoint.hpp"

namespace pt::eval {

namespace {

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

std::string join(const std::string& dir, const std::string& name) { return (std::filesystem::path(dir) / name).string(); }

}  // namespace

PipelineResult run_pipeline(const RunConfig& cfg, std::uint64_t seed, const PipelineOptions& opt) {
  PipelineResult res;
  res.config_hash = cfg.hash();
  const std::string hash = cfg.hash_hex();
  const bool write = !opt.out_dir.empty();
  const auto mcfg = models::model_config_from(cfg);
  const auto sc = train::sapp_config_from(cfg);
  const auto pc = train::policy_config_from(cfg);
  const auto ec = eval_config_from(cfg);
  const double radius = cfg.num("episode.success_radius");
  if (write) std::filesystem::create_directories(opt.out_dir);
  Stopwatch clock;

  const auto episodes = data::training_episodes(cfg, seed, static_cast<std::size_t>(cfg.integer("data.samples")));
  res.dataset = data::build_sl_dataset(episodes, mcfg.K, mcfg.history, res.config_hash, seed);
  if (write) data::write_dataset(join(opt.out_dir, "dataset.txt"), res.dataset);
  res.seconds.data = clock.lap();

  if (opt.prm_init) {
    res.prm = *opt.prm_init;
  } else {
    auto s1 = train::train_sapp(res.dataset, mcfg, sc, derive_seed(seed, 1));
    res.prm = std::move(s1.prm);
    res.sapp_log = std::move(s1.log);
    if (write) write_text(join(opt.out_dir, "sapp_log.tsv"), train::format_sapp_log(res.sapp_log, hash));
  }
  if (write) models::save_checkpoint(join(opt.out_dir, "prm_stage1.ckpt"), res.prm, res.config_hash);
  res.seconds.sapp = clock.lap();

  if (opt.policy_init) {
    res.policy = *opt.policy_init;
  } else {
    auto s2 = train::train_policy(res.dataset, episodes, res.prm, mcfg, pc, derive_seed(seed, 2));
    res.policy = std::move(s2.policy);
    res.policy_log = std::move(s2.log);
    if (write) write_text(join(opt.out_dir, "policy_log.tsv"), train::format_policy_log(res.policy_log, hash));
  }
  if (write) models::save_checkpoint(join(opt.out_dir, "policy_stage2.ckpt"), res.policy, res.config_hash);
  res.seconds.policy = clock.lap();

  // Stage 3 works on decoded token sequences, so the numeric variant stops after stage 2.
  const auto ppcf_cfg = train::ppcf_config_from(cfg);
  if (opt.run_ppcf && ppcf_cfg.steps > 0 && sc.variant != train::ProgressVariant::kNumeric &&
      pc.source == train::ProgressSource::kPrm) {
    auto s3 = train::train_ppcf(res.dataset, res.prm, res.policy, mcfg, ppcf_cfg, derive_seed(seed, 3));
    res.prm = std::move(s3.prm);
    res.policy = std::move(s3.policy);
    res.ppcf_log = std::move(s3.log);
    if (write) write_text(join(opt.out_dir, "ppcf_log.tsv"), train::format_ppcf_log(res.ppcf_log, hash));
  }
  if (write) {
    models::save_checkpoint(join(opt.out_dir, "prm.ckpt"), res.prm, res.config_hash);
    models::save_checkpoint(join(opt.out_dir, "policy.ckpt"), res.policy, res.config_hash);
  }
  res.seconds.ppcf = clock.lap();

  if (opt.evaluate) {
    const auto held_out = data::eval_episodes(cfg, static_cast<int>(cfg.integer("eval.episodes")));
    res.report = evaluate_policy(res.policy, res.prm, mcfg, pc, held_out, ec, radius);
    res.progress = progress_quality(res.prm, mcfg, sc, held_out);
    res.report.spearman = res.progress.spearman;
    res.report.spearman_episodes = res.progress.defined_episodes;
    res.report.violation_rate = res.progress.violation_rate;
    std::vector<std::pair<std::string, MetricsReport>> rows{{"policy", res.report}};
    if (opt.random_baseline) {
      res.random_report = compute_metrics(run_episodes(random_planner(derive_seed(seed, 4), mcfg.K), held_out, ec), held_out, radius);
      rows.emplace_back("random", res.random_report);
    }
    if (write) {
      ReportBundle bundle;
      bundle.rows = rows;
      bundle.traces = res.progress.traces;
      if (!res.ppcf_log.empty()) {
        Series s{"mean reward (500-step moving average)", {}, {}};
        std::vector<double> r;
        for (const auto& rec : res.ppcf_log) r.push_back(rec.reward);
        s.y = train::moving_average(r, 500);
        for (std::size_t i = 0; i < s.y.size(); ++i) s.x.push_back(static_cast<double>(i));
        bundle.reward_curves.push_back(std::move(s));
      }
      emit_report(bundle, opt.out_dir, hash);
    }
  }
  res.seconds.eval = clock.lap();
  return res;
}

std::vector<std::string> ablation_suites() {
  return {"sapp_losses", "ppcf_rewards", "exec_steps", "progress_variant", "sapp_tau", "ppcf_beta"};
}

namespace {

RunConfig with(const RunConfig& base, const std::vector<std::string>& overrides) {
  RunConfig c = base;
  c.apply(overrides);
  return c;
}

AblationRow row_from(const std::string& name, const PipelineResult& r) {
  AblationRow row{name, r.report, {}};
  for (const auto& rec : r.ppcf_log) row.reward_curve.push_back(rec.reward);
  return row;
}

}  // namespace

std::vector<AblationRow> ablate(const std::string& suite, const RunConfig& base, std::uint64_t seed) {
  PipelineOptions quiet;
  quiet.random_baseline = false;
  std::vector<AblationRow> rows;

  if (suite == "sapp_losses") {
    PipelineOptions none = quiet;
    none.run_ppcf = false;
    none.prm_init = models::init_prm(models::model_config_from(base), derive_seed(seed, 1));
    rows.push_back(row_from("none", run_pipeline(with(base, {"sapp.use_prefix=0", "sapp.use_mono=0"}), seed, none)));
    PipelineOptions sft = quiet;
    sft.run_ppcf = false;
    rows.push_back(row_from("prefix", run_pipeline(with(base, {"sapp.use_mono=0"}), seed, sft)));
    rows.push_back(row_from("prefix+mono", run_pipeline(base, seed, sft)));
  } else if (suite == "ppcf_rewards") {
    PipelineOptions sft = quiet;
    sft.run_ppcf = false;
    const auto stage2 = run_pipeline(base, seed, sft);
    rows.push_back(row_from("sft", stage2));
    PipelineOptions rl = quiet;
    rl.prm_init = stage2.prm;
    rl.policy_init = stage2.policy;
    rows.push_back(row_from("AR+FR", run_pipeline(with(base, {"ppcf.use_len_reward=0"}), seed, rl)));
    rows.push_back(row_from("AR+FR+PLR", run_pipeline(base, seed, rl)));
  } else if (suite == "exec_steps") {
    PipelineOptions train_only = quiet;
    train_only.evaluate = false;
    const auto trained = run_pipeline(base, seed, train_only);
    const auto mcfg = models::model_config_from(base);
    const auto sc = train::sapp_config_from(base);
    const auto pc = train::policy_config_from(base);
    const auto held_out = data::eval_episodes(base, static_cast<int>(base.integer("eval.episodes")));
    const auto quality = progress_quality(trained.prm, mcfg, sc, held_out);
    for (int k = 1; k <= mcfg.K; ++k) {
      auto ec = eval_config_from(base);
      ec.execute_steps = k;
      AblationRow row{"execute_" + std::to_string(k),
                      evaluate_policy(trained.policy, trained.prm, mcfg, pc, held_out, ec, base.num("episode.success_radius")),
                      {}};
      row.report.spearman = quality.spearman;
      row.report.spearman_episodes = quality.defined_episodes;
      row.report.violation_rate = quality.violation_rate;
      rows.push_back(std::move(row));
    }
  } else if (suite == "progress_variant") {
    PipelineOptions sft = quiet;
    sft.run_ppcf = false;
    for (const char* v : {"numeric", "reconstruct", "semantic"}) {
      rows.push_back(row_from(v, run_pipeline(with(base, {std::string("sapp.variant=") + v}), seed, sft)));
    }
  } else if (suite == "sapp_tau") {
    PipelineOptions sft = quiet;
    sft.run_ppcf = false;
    for (const char* tau : {"0.3", "1", "3"}) {
      rows.push_back(row_from(std::string("tau=") + tau, run_pipeline(with(base, {std::string("sapp.tau=") + tau}), seed, sft)));
    }
  } else if (suite == "ppcf_beta") {
    PipelineOptions sft = quiet;
    sft.run_ppcf = false;
    const auto stage2 = run_pipeline(base, seed, sft);
    PipelineOptions rl = quiet;
    rl.prm_init = stage2.prm;
    rl.policy_init = stage2.policy;
    for (const char* beta : {"0.05", "0.1", "0.5"}) {
      rows.push_back(row_from(std::string("beta=") + beta, run_pipeline(with(base, {std::string("ppcf.beta=") + beta}), seed, rl)));
    }
  } else {
    throw ConfigError("unknown ablation suite '" + suite + "'");
  }
  return rows;
}

}  // namespace pt::eval
