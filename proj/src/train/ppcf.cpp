#include "pt/train/ppcf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace pt::train {

using diff::Graph;
using diff::Tensor;
using diff::Var;
using models::BoundParams;
using models::Policy;
using models::Prm;
using world::Action;

// ---------------------------------------------------------------------------
// Grammar

ParsedActions parse_action_text(std::string_view text, int K) {
  ParsedActions out;
  std::vector<std::string_view> parts;
  std::size_t begin = 0;
  while (true) {
    const auto sp = text.find(' ', begin);
    parts.push_back(text.substr(begin, sp == std::string_view::npos ? std::string_view::npos : sp - begin));
    if (sp == std::string_view::npos) break;
    begin = sp + 1;
  }
  auto fail = [&](ParseErrorKind kind, int pos, std::string msg) {
    out.error = ParseError{kind, pos, std::move(msg)};
    return out;
  };
  bool stopped = false;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const int pos = static_cast<int>(i) + 1;
    if (static_cast<int>(i) >= K) return fail(ParseErrorKind::kArity, pos, "more than " + std::to_string(K) + " tokens");
    const auto a = world::parse_action(parts[i]);
    if (!a) return fail(ParseErrorKind::kUnknownToken, pos, "unknown token '" + std::string(parts[i]) + "'");
    if (stopped && *a != Action::kStop) return fail(ParseErrorKind::kAfterStop, pos, "action after STOP");
    stopped = stopped || *a == Action::kStop;
    out.tokens.push_back(*a);
  }
  if (static_cast<int>(parts.size()) < K) {
    return fail(ParseErrorKind::kArity, static_cast<int>(parts.size()) + 1, "expected " + std::to_string(K) + " tokens");
  }
  return out;
}

std::string action_text(const std::vector<Action>& actions) {
  std::string out;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (i) out += ' ';
    out += world::action_name(actions[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rewards

namespace {

int action_class(Action a) {
  if (world::is_forward(a)) return 0;
  if (a == Action::kStop) return 3;
  return world::turn_degrees(a) > 0.0 ? 1 : 2;
}

bool same(Action a, Action b, bool coarse) { return coarse ? action_class(a) == action_class(b) : a == b; }

}  // namespace

int reward_action(const std::vector<Action>& pred, const std::vector<Action>& expert, bool coarse) {
  if (pred.size() != expert.size()) throw std::invalid_argument("reward_action: sequences differ in length");
  int r = 0;
  while (r < static_cast<int>(pred.size()) && same(pred[static_cast<std::size_t>(r)], expert[static_cast<std::size_t>(r)], coarse)) ++r;
  return r;
}

int reward_action_text(std::string_view text, const std::vector<Action>& expert, bool coarse) {
  const auto p = parse_action_text(text, static_cast<int>(expert.size()));
  int r = 0;
  const std::size_t n = std::min(p.tokens.size(), expert.size());
  while (static_cast<std::size_t>(r) < n && same(p.tokens[static_cast<std::size_t>(r)], expert[static_cast<std::size_t>(r)], coarse)) ++r;
  return r;
}

int reward_format(std::string_view text, int K) { return parse_action_text(text, K).ok() ? 1 : 0; }

double reward_length(std::size_t progress_len, std::size_t instr_len, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("reward_length: beta must be positive");
  if (progress_len <= instr_len) return 1.0;
  return -beta * static_cast<double>(progress_len - instr_len);
}

RewardBreakdown total_reward(int act, int fmt, double len) { return {act, fmt, len, static_cast<double>(act) + fmt + len}; }

// ---------------------------------------------------------------------------
// GRPO

std::vector<double> group_advantages(const std::vector<double>& rewards, double eps_std) {
  if (rewards.size() < 2) throw std::invalid_argument("group_advantages needs at least two rollouts");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> a(rewards.size(), 0.0);
  if (sd < eps_std) return a;
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = (rewards[i] - mean) / sd;
  return a;
}

double joint_ratio(double lp_policy_new, double lp_policy_old, double lp_prm_new, double lp_prm_old) {
  const double lr = (lp_policy_new - lp_policy_old) + (lp_prm_new - lp_prm_old);
  return std::exp(std::clamp(lr, -kLogRatioCap, kLogRatioCap));
}

double grpo_loss(const std::vector<double>& rho, const std::vector<double>& adv, double eps) {
  if (rho.size() != adv.size() || rho.empty()) throw std::invalid_argument("grpo_loss: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < rho.size(); ++i) {
    const double clipped = std::clamp(rho[i], 1.0 - eps, 1.0 + eps);
    s += std::min(rho[i] * adv[i], clipped * adv[i]);
  }
  return -s / static_cast<double>(rho.size());
}

template <typename T>
Var<T> GrpoOps<T>::surrogate(V log_ratio, const std::vector<double>& adv, double eps) {
  if (log_ratio.rows() != adv.size() || log_ratio.cols() != 1) throw std::invalid_argument("surrogate: shape mismatch");
  Graph<T>& g = *log_ratio.graph;
  // min(rho A, clip(rho) A) is A min(rho, 1+eps) for A >= 0 and A max(rho, 1-eps) for A < 0;
  // written this way the only kinks are at rho = 1 +/- eps.
  const std::size_t n = adv.size();
  std::vector<T> pos(n), neg(n);
  for (std::size_t i = 0; i < n; ++i) {
    pos[i] = static_cast<T>(std::max(adv[i], 0.0));
    neg[i] = static_cast<T>(std::min(adv[i], 0.0));
  }
  const V rho = diff::exp(diff::clamp(log_ratio, static_cast<T>(-kLogRatioCap), static_cast<T>(kLogRatioCap)));
  const V hi = g.constant(Tensor<T>::column(std::vector<T>(n, static_cast<T>(1.0 + eps))));
  const V lo = g.constant(Tensor<T>::column(std::vector<T>(n, static_cast<T>(1.0 - eps))));
  const V up = diff::mul(g.constant(Tensor<T>::column(std::move(pos))), diff::minimum(rho, hi));
  const V down = diff::mul(g.constant(Tensor<T>::column(std::move(neg))), diff::maximum(rho, lo));
  return diff::neg(diff::mean(diff::add(up, down)));
}

template struct GrpoOps<float>;
template struct GrpoOps<double>;

PpcfConfig ppcf_config_from(const RunConfig& cfg) {
  PpcfConfig c;
  c.N = static_cast<int>(cfg.integer("ppcf.N"));
  c.eps = cfg.num("ppcf.eps");
  c.kl = cfg.num("ppcf.kl");
  c.beta = cfg.num("ppcf.beta");
  c.temperature = cfg.num("ppcf.temperature");
  c.eps_std = cfg.num("ppcf.eps_std");
  c.steps = static_cast<int>(cfg.integer("ppcf.steps"));
  c.lr = cfg.num("ppcf.lr");
  c.batch_states = static_cast<int>(cfg.integer("ppcf.batch_states"));
  c.use_len_reward = cfg.flag("ppcf.use_len_reward");
  c.use_fmt_reward = cfg.flag("ppcf.use_fmt_reward");
  c.coarse_match = cfg.flag("ppcf.coarse_match");
  c.double_precision = cfg.str("precision") == "double";
  c.tau = cfg.num("sapp.tau");
  c.ce_mode = parse_ce_mode(cfg.str("sapp.ce_mode"));
  if (c.N < 2) throw ConfigError("ppcf.N must be at least 2");
  if (!(c.eps > 0.0 && c.eps < 1.0)) throw ConfigError("ppcf.eps must lie in (0, 1)");
  if (!(c.beta > 0.0)) throw ConfigError("ppcf.beta must be positive");
  if (c.kl != 0.0) throw ConfigError("ppcf.kl: only a zero KL coefficient is supported");
  if (!(c.temperature > 0.0)) throw ConfigError("ppcf.temperature must be positive");
  if (c.steps < 0 || c.batch_states < 1) throw ConfigError("invalid ppcf step settings");
  return c;
}

// ---------------------------------------------------------------------------
// Rollouts

namespace {

// Per-rollout log-probabilities of both modules, built in one graph.
template <typename T>
struct GroupLogprobs {
  std::vector<Var<T>> prm;
  std::vector<Var<T>> policy;
};

template <typename T>
GroupLogprobs<T> group_logprobs(const BoundParams<T>& Pf, const BoundParams<T>& Pp, const models::ModelConfig& cfg,
                                const RolloutGroup& g) {
  const auto& s = *g.state;
  GroupLogprobs<T> out;
  const Var<T> mem = Prm<T>::encode(Pf, cfg, s.history, s.current);
  for (const auto& r : g.rollouts) {
    out.prm.push_back(Prm<T>::sequence_logprob(Pf, cfg, mem, r.progress));
    out.policy.push_back(Policy<T>::logprob(Policy<T>::logits(Pp, cfg, s, models::ProgressInput::from_tokens(r.progress.tokens)), r.actions));
  }
  return out;
}

template <typename T>
RolloutGroup sample_group_t(const diff::ParamStore& prm, const diff::ParamStore& policy, const models::ModelConfig& cfg,
                            const PpcfConfig& pc, const data::StepSample& state, std::uint64_t seed) {
  RolloutGroup grp;
  grp.state = &state;
  Rng rng(derive_seed(seed, state.id, 0xac7));
  Graph<T> g;
  BoundParams<T> Pp(g, policy, false);
  for (int n = 0; n < pc.N; ++n) {
    Rollout r;
    r.progress = models::prm_decode(prm, cfg, state, models::DecodeMode::kSample, pc.temperature,
                                    derive_seed(seed, state.id, static_cast<std::uint64_t>(n)));
    const auto logits = Policy<T>::logits(Pp, cfg, state, models::ProgressInput::from_tokens(r.progress.tokens));
    const auto& lv = logits.value();
    for (std::size_t j = 0; j < lv.rows(); ++j) {
      const T* row = lv.row_ptr(j);
      std::vector<double> p(lv.cols());
      double m = -1e300;
      for (std::size_t c = 0; c < lv.cols(); ++c) m = std::max(m, static_cast<double>(row[c]) / pc.temperature);
      double z = 0.0;
      for (std::size_t c = 0; c < lv.cols(); ++c) z += p[c] = std::exp(static_cast<double>(row[c]) / pc.temperature - m);
      double u = rng.uniform() * z;
      std::size_t pick = lv.cols() - 1;
      for (std::size_t c = 0; c < lv.cols(); ++c) {
        u -= p[c];
        if (u < 0.0) {
          pick = c;
          break;
        }
      }
      r.actions.push_back(static_cast<Action>(pick));
    }
    r.text = action_text(r.actions);
    const int act = reward_action_text(r.text, state.expert, pc.coarse_match);
    const int fmt = pc.use_fmt_reward ? reward_format(r.text, cfg.K) : 0;
    const double len = pc.use_len_reward ? reward_length(r.progress.tokens.size(), state.instruction.size(), pc.beta) : 0.0;
    r.reward = total_reward(act, fmt, len);
    grp.rollouts.push_back(std::move(r));
  }

  // Old log-probabilities, computed exactly as the loss will recompute them.
  Graph<T> g2;
  BoundParams<T> Pf2(g2, prm, false);
  BoundParams<T> Pp2(g2, policy, false);
  const auto lps = group_logprobs(Pf2, Pp2, cfg, grp);
  std::vector<double> rewards;
  for (std::size_t n = 0; n < grp.rollouts.size(); ++n) {
    grp.rollouts[n].lp_prm_old = static_cast<double>(lps.prm[n].value().item());
    grp.rollouts[n].lp_policy_old = static_cast<double>(lps.policy[n].value().item());
    rewards.push_back(grp.rollouts[n].reward.total);
  }
  const auto adv = group_advantages(rewards, pc.eps_std);
  for (std::size_t n = 0; n < adv.size(); ++n) grp.rollouts[n].advantage = adv[n];
  return grp;
}

template <typename T>
PpcfGradients gradients_t(const diff::ParamStore& prm, const diff::ParamStore& policy, const models::ModelConfig& cfg,
                          const PpcfConfig& pc, const std::vector<RolloutGroup>& groups) {
  if (groups.empty()) throw std::invalid_argument("ppcf_gradients: no groups");
  Graph<T> g;
  BoundParams<T> Pf(g, prm, true);
  BoundParams<T> Pp(g, policy, true);
  std::vector<Var<T>> losses;
  PpcfGradients out;
  int clipped = 0;
  for (const auto& grp : groups) {
    const auto lps = group_logprobs(Pf, Pp, cfg, grp);
    std::vector<Var<T>> lr;
    std::vector<double> adv;
    for (std::size_t n = 0; n < grp.rollouts.size(); ++n) {
      const auto& r = grp.rollouts[n];
      const T old = static_cast<T>(r.lp_policy_old + r.lp_prm_old);
      lr.push_back(diff::add_scalar(diff::add(lps.policy[n], lps.prm[n]), -old));
      adv.push_back(r.advantage);
      const double rho = joint_ratio(static_cast<double>(lps.policy[n].value().item()), r.lp_policy_old,
                                     static_cast<double>(lps.prm[n].value().item()), r.lp_prm_old);
      out.rho.push_back(rho);
      if (rho < 1.0 - pc.eps || rho > 1.0 + pc.eps) ++clipped;
    }
    losses.push_back(GrpoOps<T>::surrogate(diff::concat_rows<T>(lr), adv, pc.eps));
  }
  const Var<T> loss = diff::mean(diff::concat_rows<T>(losses));
  out.loss = static_cast<double>(loss.value().item());
  out.clip_fraction = out.rho.empty() ? 0.0 : static_cast<double>(clipped) / static_cast<double>(out.rho.size());
  g.backward(loss);
  out.prm = Pf.grads();
  out.policy = Pp.grads();
  return out;
}

}  // namespace

RolloutGroup sample_group(const diff::ParamStore& prm, const diff::ParamStore& policy, const models::ModelConfig& cfg,
                          const PpcfConfig& pc, const data::StepSample& state, std::uint64_t seed) {
  return pc.double_precision ? sample_group_t<double>(prm, policy, cfg, pc, state, seed)
                             : sample_group_t<float>(prm, policy, cfg, pc, state, seed);
}

PpcfGradients ppcf_gradients(const diff::ParamStore& prm, const diff::ParamStore& policy, const models::ModelConfig& cfg,
                             const PpcfConfig& pc, const std::vector<RolloutGroup>& groups) {
  return pc.double_precision ? gradients_t<double>(prm, policy, cfg, pc, groups)
                             : gradients_t<float>(prm, policy, cfg, pc, groups);
}

namespace {

std::string rollout_dump(const std::vector<RolloutGroup>& groups) {
  std::string out;
  char buf[160];
  for (const auto& g : groups) {
    for (const auto& r : g.rollouts) {
      std::snprintf(buf, sizeof buf, "\n  state %llu: '%s' |I^|=%zu r=%.3f A=%.3f lp_pi=%.4g lp_F=%.4g",
                    static_cast<unsigned long long>(g.state->id), r.text.c_str(), r.progress.tokens.size(),
                    r.reward.total, r.advantage, r.lp_policy_old, r.lp_prm_old);
      out += buf;
    }
  }
  return out;
}

}  // namespace

PpcfResult train_ppcf(const data::Dataset& states, const diff::ParamStore& prm, const diff::ParamStore& policy,
                      const models::ModelConfig& cfg, const PpcfConfig& pc, std::uint64_t seed) {
  if (states.samples.empty()) throw TrainingError("stage 3 needs a non-empty state set");
  PpcfResult res{prm, policy, {}};
  diff::Adam opt_prm(res.prm, diff::AdamConfig{pc.lr});
  diff::Adam opt_pol(res.policy, diff::AdamConfig{pc.lr});
  Rng rng(derive_seed(seed, 0x99cf, 3));
  SappConfig kcfg;
  kcfg.tau = pc.tau;
  kcfg.mode = pc.ce_mode;
  for (int step = 0; step < pc.steps; ++step) {
    std::vector<RolloutGroup> groups;
    for (int b = 0; b < pc.batch_states; ++b) {
      const auto& s = states.samples[rng.below(states.samples.size())];
      groups.push_back(sample_group(res.prm, res.policy, cfg, pc, s, derive_seed(seed, static_cast<std::uint64_t>(step), b)));
    }
    const auto grads = ppcf_gradients(res.prm, res.policy, cfg, pc, groups);
    if (!std::isfinite(grads.loss) || std::abs(grads.loss) > pc.divergence_limit) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "stage 3 diverged at step %d: loss %.6g", step, grads.loss);
      throw TrainingError(buf + rollout_dump(groups));
    }

    PpcfLogRecord r;
    r.step = step;
    r.loss = grads.loss;
    r.clip_fraction = grads.clip_fraction;
    r.act_histogram.assign(static_cast<std::size_t>(cfg.K) + 1, 0);
    double n = 0.0;
    for (const auto& g : groups) {
      r.khat += expected_prefix(res.prm, cfg, kcfg, *g.state) / static_cast<double>(groups.size());
      for (const auto& ro : g.rollouts) {
        r.reward += ro.reward.total;
        r.r_act += ro.reward.act;
        r.r_fmt += ro.reward.fmt;
        r.r_len += ro.reward.len;
        r.progress_len += static_cast<double>(ro.progress.tokens.size());
        ++r.act_histogram[static_cast<std::size_t>(ro.reward.act)];
        n += 1.0;
      }
    }
    r.reward /= n;
    r.r_act /= n;
    r.r_fmt /= n;
    r.r_len /= n;
    r.progress_len /= n;

    opt_prm.step(res.prm, grads.prm);
    opt_pol.step(res.policy, grads.policy);
    if (!res.prm.all_finite() || !res.policy.all_finite()) {
      throw TrainingError("stage 3 produced non-finite parameters at step " + std::to_string(step) + rollout_dump(groups));
    }
    res.log.push_back(std::move(r));
  }
  return res;
}

std::vector<double> moving_average(const std::vector<double>& v, std::size_t window) {
  if (window == 0) throw std::invalid_argument("moving_average: zero window");
  std::vector<double> out;
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += v[i];
    if (i >= window) s -= v[i - window];
    out.push_back(s / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

std::string format_ppcf_log(const std::vector<PpcfLogRecord>& log, const std::string& config_hash) {
  std::string out = "# config " + config_hash + "\nstep\treward\tr_act\tr_fmt\tr_len\tloss\tclip_frac\tprogress_len\tkhat\tact_hist\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d\t%.4f\t%.4f\t%.4f\t%.4f\t%.6f\t%.4f\t%.3f\t%.3f\t", r.step, r.reward, r.r_act, r.r_fmt,
                  r.r_len, r.loss, r.clip_fraction, r.progress_len, r.khat);
    out += buf;
    for (std::size_t i = 0; i < r.act_histogram.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(r.act_histogram[i]);
    }
    out += '\n';
  }
  return out;
}

}  // namespace pt::train
