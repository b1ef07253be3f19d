// progress_think: data generation, the three training stages, evaluation and
// diagnostics from the command line.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pt/eval/eval.hpp"
#include "pt/models/checkpoint.hpp"

namespace {

using namespace pt;
namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::uint64_t seed = 1;
  bool seed_given = false;
  std::string out = "out";
  std::vector<std::string> overrides;
};

struct Extra {
  std::string prm;
  std::string policy;
  std::string data;
  std::string suite = "all";
  int episodes = 5;
};

RunConfig load_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig() : RunConfig::from_file(c.config);
  cfg.apply(c.overrides);
  if (c.seed_given) cfg.set("seed", std::to_string(c.seed));
  return cfg;
}

std::string out_path(const Common& c, const std::string& name) {
  fs::create_directories(c.out);
  return (fs::path(c.out) / name).string();
}

diff::ParamStore load_params(const std::string& path, const RunConfig& cfg, const char* what) {
  if (path.empty()) throw ConfigError(std::string("--") + what + " is required");
  auto ck = models::load_checkpoint(path);
  if (ck.config_hash != cfg.hash()) {
    std::fprintf(stderr, "warning: %s checkpoint was written under config %s, running with %s\n", what,
                 hex64(ck.config_hash).c_str(), cfg.hash_hex().c_str());
  }
  return std::move(ck.params);
}

struct TrainingData {
  std::vector<world::Episode> episodes;
  data::Dataset dataset;
};

TrainingData training_data(const RunConfig& cfg, const Extra& x) {
  const std::uint64_t seed = cfg.u64("seed");
  TrainingData d;
  d.episodes = data::training_episodes(cfg, seed, static_cast<std::size_t>(cfg.integer("data.samples")));
  if (!x.data.empty()) {
    d.dataset = data::read_dataset(x.data, cfg.hash());
  } else {
    const auto mcfg = models::model_config_from(cfg);
    d.dataset = data::build_sl_dataset(d.episodes, mcfg.K, mcfg.history, cfg.hash(), seed);
  }
  return d;
}

int cmd_gen_world(const Common& c) {
  const auto cfg = load_config(c);
  const std::uint64_t seed = cfg.u64("seed");
  std::string text;
  const int n = static_cast<int>(cfg.integer("data.worlds"));
  for (int i = 0; i < n; ++i) text += world::serialize_world(world::generate_world(data::world_spec_from(cfg, data::train_world_seed(seed, i)))) + '\n';
  eval::write_text(out_path(c, "worlds.txt"), "# config " + cfg.hash_hex() + '\n' + text);
  std::printf("wrote %d worlds to %s\n", n, out_path(c, "worlds.txt").c_str());
  return 0;
}

int cmd_gen_data(const Common& c, const Extra& x) {
  const auto cfg = load_config(c);
  Extra fresh = x;
  fresh.data.clear();
  const auto d = training_data(cfg, fresh);
  std::string text = "# config " + cfg.hash_hex() + '\n';
  for (const auto& ep : d.episodes) text += world::serialize_episode(ep) + '\n';
  eval::write_text(out_path(c, "episodes.txt"), text);
  data::write_dataset(out_path(c, "dataset.txt"), d.dataset);
  std::printf("wrote %zu episodes and %zu samples to %s\n", d.episodes.size(), d.dataset.samples.size(), c.out.c_str());
  return 0;
}

int cmd_train_sapp(const Common& c, const Extra& x) {
  const auto cfg = load_config(c);
  const auto d = training_data(cfg, x);
  const auto res = train::train_sapp(d.dataset, models::model_config_from(cfg), train::sapp_config_from(cfg),
                                     derive_seed(cfg.u64("seed"), 1));
  models::save_checkpoint(out_path(c, "prm.ckpt"), res.prm, cfg.hash());
  eval::write_text(out_path(c, "sapp_log.tsv"), train::format_sapp_log(res.log, cfg.hash_hex()));
  std::printf("stage 1: %zu steps, final loss %.4f\n", res.log.size(), res.log.empty() ? 0.0 : res.log.back().total);
  return 0;
}

int cmd_train_policy(const Common& c, const Extra& x) {
  const auto cfg = load_config(c);
  const auto prm = load_params(x.prm, cfg, "prm");
  const auto d = training_data(cfg, x);
  const auto res = train::train_policy(d.dataset, d.episodes, prm, models::model_config_from(cfg),
                                       train::policy_config_from(cfg), derive_seed(cfg.u64("seed"), 2));
  models::save_checkpoint(out_path(c, "policy.ckpt"), res.policy, cfg.hash());
  eval::write_text(out_path(c, "policy_log.tsv"), train::format_policy_log(res.log, cfg.hash_hex()));
  std::printf("stage 2: %zu steps, final loss %.4f, %d DAgger rollouts\n", res.log.size(),
              res.log.empty() ? 0.0 : res.log.back().loss, res.dagger_rollouts);
  return 0;
}

int cmd_train_ppcf(const Common& c, const Extra& x) {
  const auto cfg = load_config(c);
  const auto prm = load_params(x.prm, cfg, "prm");
  const auto policy = load_params(x.policy, cfg, "policy");
  const auto d = training_data(cfg, x);
  const auto res = train::train_ppcf(d.dataset, prm, policy, models::model_config_from(cfg), train::ppcf_config_from(cfg),
                                     derive_seed(cfg.u64("seed"), 3));
  models::save_checkpoint(out_path(c, "prm.ckpt"), res.prm, cfg.hash());
  models::save_checkpoint(out_path(c, "policy.ckpt"), res.policy, cfg.hash());
  eval::write_text(out_path(c, "ppcf_log.tsv"), train::format_ppcf_log(res.log, cfg.hash_hex()));
  std::vector<double> rewards;
  for (const auto& r : res.log) rewards.push_back(r.reward);
  if (!rewards.empty()) {
    eval::Series s{"mean reward (500-step moving average)", {}, train::moving_average(rewards, 500)};
    for (std::size_t i = 0; i < s.y.size(); ++i) s.x.push_back(static_cast<double>(i));
    eval::write_text(out_path(c, "reward.svg"), eval::line_chart_svg("stage 3 mean group reward", {s}, cfg.hash_hex()));
  }
  std::printf("stage 3: %zu steps, final mean reward %.3f\n", res.log.size(), rewards.empty() ? 0.0 : rewards.back());
  return 0;
}

int cmd_eval(const Common& c, const Extra& x) {
  const auto cfg = load_config(c);
  const auto prm = load_params(x.prm, cfg, "prm");
  const auto policy = load_params(x.policy, cfg, "policy");
  const auto mcfg = models::model_config_from(cfg);
  const auto ec = eval::eval_config_from(cfg);
  const double radius = cfg.num("episode.success_radius");
  const auto held_out = data::eval_episodes(cfg, static_cast<int>(cfg.integer("eval.episodes")));
  auto report = eval::evaluate_policy(policy, prm, mcfg, train::policy_config_from(cfg), held_out, ec, radius);
  const auto quality = eval::progress_quality(prm, mcfg, train::sapp_config_from(cfg), held_out);
  report.spearman = quality.spearman;
  report.spearman_episodes = quality.defined_episodes;
  report.violation_rate = quality.violation_rate;
  const auto random = eval::compute_metrics(
      eval::run_episodes(eval::random_planner(derive_seed(cfg.u64("seed"), 4), mcfg.K), held_out, ec), held_out, radius);
  eval::ReportBundle bundle;
  bundle.rows = {{"policy", report}, {"random", random}};
  bundle.traces = quality.traces;
  eval::emit_report(bundle, c.out, cfg.hash_hex());
  std::fputs(eval::metrics_table(bundle.rows, cfg.hash_hex()).c_str(), stdout);
  return 0;
}

int cmd_ablate(const Common& c, const Extra& x) {
  const auto cfg = load_config(c);
  std::vector<std::string> suites = x.suite == "all" ? eval::ablation_suites() : std::vector<std::string>{x.suite};
  for (const auto& suite : suites) {
    const auto rows = eval::ablate(suite, cfg, cfg.u64("seed"));
    std::vector<std::pair<std::string, eval::MetricsReport>> table;
    std::vector<eval::Series> curves;
    for (const auto& r : rows) {
      table.emplace_back(r.name, r.report);
      if (r.reward_curve.empty()) continue;
      eval::Series s{r.name, {}, train::moving_average(r.reward_curve, 500)};
      for (std::size_t i = 0; i < s.y.size(); ++i) s.x.push_back(static_cast<double>(i));
      curves.push_back(std::move(s));
    }
    const auto text = eval::metrics_table(table, cfg.hash_hex());
    eval::write_text(out_path(c, "ablation_" + suite + ".tsv"), text);
    if (!curves.empty()) {
      eval::write_text(out_path(c, "ablation_" + suite + "_reward.svg"),
                       eval::line_chart_svg(suite + ": stage 3 mean group reward", curves, cfg.hash_hex()));
    }
    std::printf("== %s\n%s", suite.c_str(), text.c_str());
  }
  return 0;
}

int cmd_progress_trace(const Common& c, const Extra& x) {
  const auto cfg = load_config(c);
  const auto prm = load_params(x.prm, cfg, "prm");
  const auto held_out = data::eval_episodes(cfg, x.episodes);
  const auto q = eval::progress_quality(prm, models::model_config_from(cfg), train::sapp_config_from(cfg), held_out, true);
  eval::ReportBundle bundle;
  eval::MetricsReport summary;
  summary.episodes = q.episodes;
  summary.spearman = q.spearman;
  summary.spearman_episodes = q.defined_episodes;
  summary.violation_rate = q.violation_rate;
  bundle.rows = {{"progress", summary}};
  bundle.traces = q.traces;
  eval::emit_report(bundle, c.out, cfg.hash_hex());
  std::printf("spearman %.4f over %d episodes, violation rate %.4f\n", q.spearman, q.defined_episodes, q.violation_rate);
  return 0;
}

int cmd_grad_check(const Common& c) {
  const auto cfg = load_config(c);
  const auto entries = eval::run_grad_suite(cfg.u64("seed"));
  const auto text = eval::format_grad_suite(entries, cfg.hash_hex());
  eval::write_text(out_path(c, "grad_check.tsv"), text);
  std::fputs(text.c_str(), stdout);
  bool ok = true;
  for (const auto& e : entries) ok = ok && e.passed;
  return ok ? 0 : 1;
}

void print_error(const char* kind, const std::string& message) {
  nlohmann::json j;
  j["error"] = {{"kind", kind}, {"message", message}};
  std::cerr << j.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Progress-guided navigation: data, training stages, evaluation"};
  app.require_subcommand(1);
  Common common;
  Extra extra;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { common.seed = s, common.seed_given = true; }, "run seed");
    sub->add_option("--out", common.out, "output directory")->capture_default_str();
    sub->add_option("--set", common.overrides, "config override key=value (repeatable)");
  };

  struct Entry {
    const char* name;
    const char* help;
  };
  const Entry entries[] = {
      {"gen-world", "generate training worlds"},
      {"gen-data", "generate training episodes and the step dataset"},
      {"train-sapp", "stage 1: self-aligned progress pretraining"},
      {"train-policy", "stage 2: policy training with the frozen progress module"},
      {"train-ppcf", "stage 3: progress-policy co-finetuning"},
      {"eval", "closed-loop evaluation on held-out worlds"},
      {"ablate", "run an ablation suite"},
      {"progress-trace", "progress estimates and decoded text on held-out episodes"},
      {"grad-check", "finite-difference gradient suite"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& e : entries) {
    auto* sub = app.add_subcommand(e.name, e.help);
    add_common(sub);
    subs[e.name] = sub;
  }
  for (const char* n : {"train-sapp", "train-policy", "train-ppcf"}) {
    subs[n]->add_option("--data", extra.data, "dataset file from gen-data (must match the config)");
  }
  for (const char* n : {"train-policy", "train-ppcf", "eval", "progress-trace"}) {
    subs[n]->add_option("--prm", extra.prm, "progress module checkpoint");
  }
  for (const char* n : {"train-ppcf", "eval"}) subs[n]->add_option("--policy", extra.policy, "policy checkpoint");
  subs["ablate"]
      ->add_option("--suite", extra.suite, "sapp_losses, ppcf_rewards, exec_steps, progress_variant, sapp_tau, ppcf_beta or all")
      ->capture_default_str();
  subs["progress-trace"]->add_option("--episodes", extra.episodes, "held-out episodes to trace")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (subs["gen-world"]->parsed()) return cmd_gen_world(common);
    if (subs["gen-data"]->parsed()) return cmd_gen_data(common, extra);
    if (subs["train-sapp"]->parsed()) return cmd_train_sapp(common, extra);
    if (subs["train-policy"]->parsed()) return cmd_train_policy(common, extra);
    if (subs["train-ppcf"]->parsed()) return cmd_train_ppcf(common, extra);
    if (subs["eval"]->parsed()) return cmd_eval(common, extra);
    if (subs["ablate"]->parsed()) return cmd_ablate(common, extra);
    if (subs["progress-trace"]->parsed()) return cmd_progress_trace(common, extra);
    if (subs["grad-check"]->parsed()) return cmd_grad_check(common);
  } catch (const ConfigError& e) {
    print_error("config", e.what());
  } catch (const data::DatasetError& e) {
    print_error("dataset", e.what());
  } catch (const models::CheckpointError& e) {
    print_error("checkpoint", e.what());
  } catch (const train::TrainingError& e) {
    print_error("training", e.what());
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
  }
  return 1;
}
