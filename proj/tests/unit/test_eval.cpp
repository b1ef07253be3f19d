#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "pt/eval/eval.hpp"

using namespace pt;
using namespace pt::eval;
using world::Pose;

namespace {

world::Episode synthetic_episode(double gx, double gy, double shortest) {
  world::Episode ep;
  ep.waypoints.push_back({world::Landmark::kDoor, gx, gy});
  ep.shortest_path_m = shortest;
  return ep;
}

// Straightforward per-definition metrics.
struct Oracle {
  double ne = 0, sr = 0, osr = 0, spl = 0;
};

Oracle oracle_metrics(const std::vector<Trajectory>& trs, const std::vector<world::Episode>& eps, double radius) {
  Oracle o;
  for (std::size_t i = 0; i < trs.size(); ++i) {
    const auto& p = trs[i].poses;
    const double gx = eps[i].waypoints.back().x;
    const double gy = eps[i].waypoints.back().y;
    const double d = std::sqrt((p.back().x - gx) * (p.back().x - gx) + (p.back().y - gy) * (p.back().y - gy));
    double len = 0;
    double closest = 1e300;
    for (std::size_t k = 0; k < p.size(); ++k) {
      closest = std::min(closest, std::sqrt((p[k].x - gx) * (p[k].x - gx) + (p[k].y - gy) * (p[k].y - gy)));
      if (k > 0) len += std::sqrt((p[k].x - p[k - 1].x) * (p[k].x - p[k - 1].x) + (p[k].y - p[k - 1].y) * (p[k].y - p[k - 1].y));
    }
    const double s = d <= radius ? 1.0 : 0.0;
    o.ne += d;
    o.sr += s;
    o.osr += closest <= radius ? 1.0 : 0.0;
    o.spl += s * eps[i].shortest_path_m / std::max(len, eps[i].shortest_path_m);
  }
  const double n = static_cast<double>(trs.size());
  o.ne /= n;
  o.sr /= n;
  o.osr /= n;
  o.spl /= n;
  return o;
}

RunConfig tiny_config() {
  RunConfig rc;
  rc.apply({"data.worlds=2", "data.samples=300", "model.d=8", "model.heads=2", "model.mlp=8", "model.enc_blocks=1",
            "sapp.epochs=1", "sapp.warmup_epochs=0", "policy.epochs=1", "policy.dagger=0", "ppcf.steps=2",
            "ppcf.batch_states=1", "eval.episodes=3"});
  return rc;
}

bool balanced_xml(const std::string& s) {
  // Every element opened is closed in order; comments and declarations are skipped.
  std::vector<std::string> stack;
  for (std::size_t i = s.find('<'); i != std::string::npos; i = s.find('<', i + 1)) {
    const auto end = s.find('>', i);
    if (end == std::string::npos) return false;
    const std::string tag = s.substr(i + 1, end - i - 1);
    if (tag.empty()) return false;
    if (tag[0] == '?' || tag[0] == '!') continue;
    if (tag.back() == '/') continue;
    const std::string name = tag.substr(tag[0] == '/' ? 1 : 0, tag.find_first_of(" \n") - (tag[0] == '/' ? 1 : 0));
    if (tag[0] == '/') {
      if (stack.empty() || stack.back() != name) return false;
      stack.pop_back();
    } else {
      stack.push_back(name);
    }
  }
  return stack.empty();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("SPL definition examples") {
  const auto ep = synthetic_episode(2.0, 0.0, 2.0);
  Trajectory straight{{Pose{0, 0, 0}, Pose{1, 0, 0}, Pose{2, 0, 0}}, true, 2};
  CHECK(episode_metrics(straight, ep, 1.0).spl == 1.0);
  Trajectory detour{{Pose{0, 0, 0}, Pose{0, 1, 0}, Pose{2, 1, 0}, Pose{2, 0, 0}}, true, 3};
  CHECK(episode_metrics(detour, ep, 1.0).spl == doctest::Approx(0.5));
  Trajectory miss{{Pose{0, 0, 0}, Pose{1.8, 0, 0}, Pose{-3, 0, 0}}, true, 2};
  const auto m = episode_metrics(miss, ep, 1.0);
  CHECK(m.spl == 0.0);
  CHECK_FALSE(m.success);
  CHECK(m.oracle_success);
  CHECK(m.ne == doctest::Approx(5.0));
}

TEST_CASE("compute_metrics matches an independent oracle on random trajectories") {
  Rng rng(11);
  std::vector<Trajectory> trs;
  std::vector<world::Episode> eps;
  for (int i = 0; i < 100; ++i) {
    const double gx = rng.uniform(0, 8), gy = rng.uniform(0, 8);
    eps.push_back(synthetic_episode(gx, gy, rng.uniform(0.5, 6.0)));
    Trajectory tr;
    Pose p{rng.uniform(0, 8), rng.uniform(0, 8), 0};
    tr.poses.push_back(p);
    const int n = static_cast<int>(rng.below(30));
    for (int k = 0; k < n; ++k) {
      // Drift toward the goal half of the time so that successes occur.
      if (rng.bernoulli(0.5)) {
        p.x += 0.4 * (gx - p.x);
        p.y += 0.4 * (gy - p.y);
      } else {
        p.x += rng.uniform(-0.75, 0.75);
        p.y += rng.uniform(-0.75, 0.75);
      }
      tr.poses.push_back(p);
    }
    trs.push_back(tr);
  }
  const auto r = compute_metrics(trs, eps, 1.0);
  const auto o = oracle_metrics(trs, eps, 1.0);
  CHECK(std::abs(r.ne - o.ne) < 1e-12);
  CHECK(std::abs(r.sr - o.sr) < 1e-12);
  CHECK(std::abs(r.osr - o.osr) < 1e-12);
  CHECK(std::abs(r.spl - o.spl) < 1e-12);
  CHECK(r.sr > 0.0);
  CHECK(r.sr < 1.0);
  CHECK(r.spl <= r.sr);
  CHECK(r.sr <= r.osr);
  CHECK_THROWS(compute_metrics(trs, {}, 1.0));
}

TEST_CASE("closed loop: expert succeeds, random baseline rarely does") {
  RunConfig rc;
  const auto eps = data::eval_episodes(rc, 50);
  const auto ec = eval_config_from(rc);
  const auto expert = compute_metrics(run_episodes(expert_planner(), eps, ec), eps, 1.0);
  CHECK(expert.sr == 1.0);
  CHECK(expert.spl == 1.0);
  CHECK(expert.ne <= 1.0);

  const auto random = compute_metrics(run_episodes(random_planner(3, 3), eps, ec), eps, 1.0);
  CHECK(random.sr <= 0.05);
  CHECK(random.spl <= random.sr);
  CHECK(random.sr <= random.osr);

  // Executing fewer steps per plan changes how often the planner is consulted, not the expert route.
  EvalConfig one = ec;
  one.execute_steps = 1;
  const auto tr1 = run_episode(expert_planner()(eps[0], 0), eps[0], one);
  CHECK(tr1.stopped);
  CHECK(tr1.steps == eps[0].steps() - 1);

  rc.apply({"eval.execute_steps=4"});
  CHECK_THROWS_AS(eval_config_from(rc), ConfigError);
}

TEST_CASE("spearman with average ranks") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(std::isnan(spearman({2, 2, 2}, {1, 2, 3})));
  CHECK(std::isnan(spearman({1}, {1})));
  CHECK(spearman({1, 2, 2, 3}, {1, 2, 3, 4}) == doctest::Approx(0.9486832980505138).epsilon(1e-12));
}

TEST_CASE("progress quality on held-out episodes") {
  auto rc = tiny_config();
  const auto mcfg = models::model_config_from(rc);
  const auto prm = models::init_prm(mcfg, 2);
  const auto eps = data::eval_episodes(rc, 3);
  const auto sc = train::sapp_config_from(rc);
  const auto q = progress_quality(prm, mcfg, sc, eps, true);
  std::size_t steps = 0;
  for (const auto& e : eps) steps += static_cast<std::size_t>(e.steps());
  CHECK(q.traces.size() == steps);
  CHECK(q.episodes == 3);
  CHECK(q.violation_rate >= 0.0);
  CHECK(q.violation_rate <= 1.0);
  if (q.defined_episodes > 0) CHECK(std::abs(q.spearman) <= 1.0);
  for (const auto& t : q.traces) CHECK(t.kstar <= static_cast<int>(eps[static_cast<std::size_t>(t.episode)].instruction.size()));

  auto nc = sc;
  nc.variant = train::ProgressVariant::kNumeric;
  const auto ds = data::build_sl_dataset(eps, 3, 8, 0, 0);
  const auto& s = ds.samples[2];
  const double v = progress_estimate(prm, mcfg, nc, s);
  CHECK(v > 0.0);
  CHECK(v < static_cast<double>(s.instruction.size()));
}

TEST_CASE("reports: round trip, XML charts, byte-identical re-emission") {
  MetricsReport a;
  a.episodes = 7;
  a.ne = 1.0 / 3.0;
  a.sr = 0.2857142857142857;
  a.osr = 0.5;
  a.spl = 0.123456789012345;
  a.spearman = 0.61;
  a.violation_rate = 0.1;
  MetricsReport b;
  b.episodes = 2;
  const auto text = metrics_table({{"x", a}, {"y", b}}, "0123abcd");
  std::string hash;
  const auto rows = parse_metrics_table(text, &hash);
  CHECK(hash == "0123abcd");
  REQUIRE(rows.size() == 2u);
  CHECK(rows[0].name == "x");
  CHECK(rows[0].episodes == 7);
  CHECK(rows[0].ne == a.ne);
  CHECK(rows[0].sr == a.sr);
  CHECK(rows[0].spl == a.spl);
  CHECK(rows[0].spearman == a.spearman);
  CHECK(std::isnan(rows[1].spearman));
  CHECK_THROWS(parse_metrics_table("garbage\n"));

  const auto svg = line_chart_svg("a <b> & c", {{"one", {0, 1, 2}, {1, 3, 2}}, {"two", {0, 2}, {0, 0}}}, "h");
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(svg.find("<svg xmlns=\"http://www.w3.org/2000/svg\"") != std::string::npos);
  CHECK(svg.find("a &lt;b&gt; &amp; c") != std::string::npos);
  CHECK(balanced_xml(svg));
  CHECK(balanced_xml(line_chart_svg("empty", {}, "h")));

  const auto dir = (std::filesystem::temp_directory_path() / "pt_test_eval_report").string();
  std::filesystem::remove_all(dir);
  ReportBundle bundle;
  bundle.rows = {{"x", a}};
  bundle.traces = {{0, 0, 0.5, 0, "go to"}, {0, 1, 1.5, 2, ""}, {1, 0, 0.1, 0, ""}};
  bundle.reward_curves = {{"r", {0, 1}, {0.5, 0.7}}};
  emit_report(bundle, dir, "h");
  const auto first = slurp(dir + "/metrics.tsv") + slurp(dir + "/traces.csv") + slurp(dir + "/progress.svg") + slurp(dir + "/reward.svg");
  emit_report(bundle, dir, "h");
  const auto second = slurp(dir + "/metrics.tsv") + slurp(dir + "/traces.csv") + slurp(dir + "/progress.svg") + slurp(dir + "/reward.svg");
  CHECK(first == second);
  CHECK(slurp(dir + "/traces.csv").rfind("# config h\n", 0) == 0);
  std::filesystem::remove_all(dir);
  CHECK_THROWS(write_text("/proc/definitely/not/here.txt", "x"));
}

TEST_CASE("pipeline and ablations on a tiny configuration") {
  const auto rc = tiny_config();
  const auto dir = (std::filesystem::temp_directory_path() / "pt_test_eval_pipeline").string();
  std::filesystem::remove_all(dir);
  PipelineOptions opt;
  opt.out_dir = dir;
  const auto a = run_pipeline(rc, 5, opt);
  CHECK(a.report.episodes == 3);
  CHECK(a.random_report.episodes == 3);
  CHECK(a.ppcf_log.size() == 2u);
  CHECK(a.report.spl <= a.report.sr);
  for (const char* f : {"dataset.txt", "prm.ckpt", "policy.ckpt", "metrics.tsv", "traces.csv", "sapp_log.tsv", "ppcf_log.tsv"}) {
    CHECK(std::filesystem::exists(dir + "/" + f));
  }
  const auto metrics = slurp(dir + "/metrics.tsv");
  CHECK(metrics.find(rc.hash_hex()) != std::string::npos);
  const auto b = run_pipeline(rc, 5, opt);
  CHECK(b.prm == a.prm);
  CHECK(b.policy == a.policy);
  CHECK(slurp(dir + "/metrics.tsv") == metrics);
  std::filesystem::remove_all(dir);

  const auto variants = ablate("progress_variant", rc, 5);
  REQUIRE(variants.size() == 3u);
  CHECK(variants[0].name == "numeric");
  CHECK(variants[1].name == "reconstruct");
  CHECK(variants[2].name == "semantic");
  const auto losses = ablate("sapp_losses", rc, 5);
  REQUIRE(losses.size() == 3u);
  CHECK(losses[0].name == "none");
  CHECK(losses[2].name == "prefix+mono");
  const auto again = ablate("sapp_losses", rc, 5);
  CHECK(again[2].report.sr == losses[2].report.sr);
  CHECK(again[2].report.spearman_episodes == losses[2].report.spearman_episodes);
  CHECK_THROWS_AS(ablate("nope", rc, 5), ConfigError);

  const auto rewards = ablate("ppcf_rewards", rc, 5);
  REQUIRE(rewards.size() == 3u);
  CHECK(rewards[0].reward_curve.empty());
  CHECK(rewards[2].reward_curve.size() == 2u);
  const auto exec = ablate("exec_steps", rc, 5);
  REQUIRE(exec.size() == 3u);
  CHECK(exec[0].name == "execute_1");
  const auto betas = ablate("ppcf_beta", rc, 5);
  REQUIRE(betas.size() == 3u);
  CHECK(betas[1].name == "beta=0.1");
  // Same weights and seed as the AR+FR+PLR row, which runs the default beta.
  CHECK(betas[1].reward_curve == rewards[2].reward_curve);
  CHECK(ablate("sapp_tau", rc, 5).size() == 3u);
}
