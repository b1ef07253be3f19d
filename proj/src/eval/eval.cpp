#include "pt/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace pt::eval {

using world::Action;

EpisodeMetrics episode_metrics(const Trajectory& tr, const world::Episode& ep, double radius) {
  if (tr.poses.empty()) throw std::invalid_argument("trajectory without poses");
  EpisodeMetrics m;
  m.shortest = ep.shortest_path_m;
  const double gx = ep.goal_x();
  const double gy = ep.goal_y();
  for (std::size_t i = 0; i < tr.poses.size(); ++i) {
    const auto& p = tr.poses[i];
    if (std::hypot(p.x - gx, p.y - gy) <= radius) m.oracle_success = true;
    if (i) m.path_length += std::hypot(p.x - tr.poses[i - 1].x, p.y - tr.poses[i - 1].y);
  }
  m.ne = std::hypot(tr.poses.back().x - gx, tr.poses.back().y - gy);
  m.success = m.ne <= radius;
  if (m.success) m.spl = m.shortest / std::max(m.path_length, m.shortest);
  return m;
}

MetricsReport compute_metrics(const std::vector<Trajectory>& trajectories, const std::vector<world::Episode>& episodes,
                              double radius) {
  if (trajectories.size() != episodes.size()) throw std::invalid_argument("compute_metrics: size mismatch");
  MetricsReport r;
  r.episodes = static_cast<int>(episodes.size());
  if (episodes.empty()) return r;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto m = episode_metrics(trajectories[i], episodes[i], radius);
    r.ne += m.ne;
    r.sr += m.success ? 1.0 : 0.0;
    r.osr += m.oracle_success ? 1.0 : 0.0;
    r.spl += m.spl;
    r.per_episode.push_back(m);
  }
  const double n = static_cast<double>(episodes.size());
  r.ne /= n;
  r.sr /= n;
  r.osr /= n;
  r.spl /= n;
  return r;
}

EvalConfig eval_config_from(const RunConfig& cfg) {
  EvalConfig c;
  c.execute_steps = static_cast<int>(cfg.integer("eval.execute_steps"));
  c.max_steps = static_cast<int>(cfg.integer("eval.max_steps"));
  c.K = static_cast<int>(cfg.integer("data.K"));
  c.history = static_cast<int>(cfg.integer("obs.history"));
  if (c.execute_steps < 1 || c.execute_steps > c.K) throw ConfigError("eval.execute_steps must lie in [1, K]");
  if (c.max_steps < 1) throw ConfigError("eval.max_steps must be positive");
  return c;
}

Trajectory run_episode(const Planner& planner, const world::Episode& ep, const EvalConfig& cfg) {
  const world::World& w = *ep.world;
  Trajectory tr;
  world::Pose pose = ep.start;
  tr.poses.push_back(pose);
  std::optional<Action> prev;
  std::vector<world::Observation> seen;
  int t = 0;
  while (t < cfg.max_steps && !tr.stopped) {
    seen.push_back(world::observe(w, pose, prev, t, ep.spec.obs));
    data::StepSample s;
    s.id = static_cast<std::uint64_t>(t);
    s.t = t;
    s.episode_steps = ep.steps();
    s.pose = pose;
    for (int h : world::history_indices(t, cfg.history)) s.history.push_back(seen[static_cast<std::size_t>(h)]);
    s.current = seen.back();
    s.instruction = ep.instruction.tokens;
    const auto plan = planner(s);
    if (plan.empty()) throw std::runtime_error("planner returned no actions");
    const int n = std::min<int>(cfg.execute_steps, static_cast<int>(plan.size()));
    for (int j = 0; j < n; ++j) {
      const Action a = plan[static_cast<std::size_t>(j)];
      if (a == Action::kStop) {
        tr.stopped = true;
        break;
      }
      pose = world::step(w, pose, a).pose;
      tr.poses.push_back(pose);
      prev = a;
      ++t;
      if (t >= cfg.max_steps) break;
      // Observations for skipped planning steps still enter the history.
      if (j + 1 < n) seen.push_back(world::observe(w, pose, prev, t, ep.spec.obs));
    }
  }
  tr.steps = t;
  return tr;
}

std::vector<Trajectory> run_episodes(const PlannerFactory& factory, const std::vector<world::Episode>& episodes,
                                     const EvalConfig& cfg) {
  std::vector<Trajectory> out;
  out.reserve(episodes.size());
  for (std::size_t i = 0; i < episodes.size(); ++i) out.push_back(run_episode(factory(episodes[i], i), episodes[i], cfg));
  return out;
}

PlannerFactory expert_planner() {
  return [](const world::Episode& ep, std::size_t) -> Planner {
    auto tracker = std::make_shared<world::ExpertTracker>();
    const world::Episode* e = &ep;
    return [tracker, e](const data::StepSample& s) { return std::vector<Action>{world::expert_action(*e, s.pose, *tracker)}; };
  };
}

PlannerFactory random_planner(std::uint64_t seed, int K) {
  return [seed, K](const world::Episode&, std::size_t index) -> Planner {
    auto rng = std::make_shared<Rng>(derive_seed(seed, 0x4a9d, index));
    return [rng, K](const data::StepSample&) {
      std::vector<Action> a;
      for (int j = 0; j < K; ++j) a.push_back(static_cast<Action>(rng->below(world::kNumActions)));
      return a;
    };
  };
}

PlannerFactory policy_planner(const diff::ParamStore& policy, const diff::ParamStore& prm, const models::ModelConfig& mcfg,
                              const train::PolicyConfig& pc) {
  return [&policy, &prm, mcfg, pc](const world::Episode&, std::size_t) -> Planner {
    return [&policy, &prm, mcfg, pc](const data::StepSample& s) {
      return models::policy_greedy(policy, mcfg, s, train::progress_for(prm, mcfg, pc, s));
    };
  };
}

MetricsReport evaluate_policy(const diff::ParamStore& policy, const diff::ParamStore& prm, const models::ModelConfig& mcfg,
                              const train::PolicyConfig& pc, const std::vector<world::Episode>& episodes,
                              const EvalConfig& cfg, double radius) {
  return compute_metrics(run_episodes(policy_planner(policy, prm, mcfg, pc), episodes, cfg), episodes, radius);
}

// ---------------------------------------------------------------------------
// Progress quality

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: size mismatch");
  if (a.size() < 2) return kUndefined;
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double c = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    c += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return kUndefined;
  return c / std::sqrt(va * vb);
}

double progress_estimate(const diff::ParamStore& prm, const models::ModelConfig& mcfg, const train::SappConfig& sc,
                         const data::StepSample& s) {
  if (sc.variant == train::ProgressVariant::kNumeric) {
    return models::prm_numeric(prm, mcfg, s) * static_cast<double>(s.instruction.size());
  }
  return train::expected_prefix(prm, mcfg, sc, s);
}

ProgressQuality progress_quality(const diff::ParamStore& prm, const models::ModelConfig& mcfg,
                                 const train::SappConfig& sc, const std::vector<world::Episode>& episodes,
                                 bool decode_text) {
  const auto ds = data::build_sl_dataset(episodes, mcfg.K, mcfg.history, 0, 0);
  ProgressQuality q;
  q.episodes = static_cast<int>(episodes.size());
  std::vector<std::vector<double>> khat(episodes.size());
  std::vector<std::vector<double>> kstar(episodes.size());
  for (const auto& s : ds.samples) {
    TraceRecord r;
    r.episode = static_cast<int>(s.episode);
    r.t = s.t;
    r.khat = progress_estimate(prm, mcfg, sc, s);
    r.kstar = s.aligned_prefix;
    if (decode_text) r.decoded = world::tokens_to_string(models::prm_decode(prm, mcfg, s, models::DecodeMode::kGreedy).tokens);
    khat[s.episode].push_back(r.khat);
    kstar[s.episode].push_back(r.kstar);
    q.traces.push_back(std::move(r));
  }
  double sum = 0.0;
  long pairs = 0;
  long violations = 0;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const double rho = spearman(khat[e], kstar[e]);
    if (!std::isnan(rho)) {
      sum += rho;
      ++q.defined_episodes;
    }
    for (std::size_t t = 1; t < khat[e].size(); ++t) {
      ++pairs;
      if (khat[e][t] < khat[e][t - 1]) ++violations;
    }
  }
  if (q.defined_episodes > 0) q.spearman = sum / q.defined_episodes;
  if (pairs > 0) q.violation_rate = static_cast<double>(violations) / static_cast<double>(pairs);
  return q;
}

}  // namespace pt::eval
