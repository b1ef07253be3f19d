#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "pt/diff/gradcheck.hpp"
#include "pt/train/ppcf.hpp"

using namespace pt;
using namespace pt::train;
using diff::Graph;
using diff::Tensor;
using world::Action;

namespace {

constexpr int kActions = 10;

models::ModelConfig tiny() {
  models::ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.mlp = 8;
  c.enc_blocks = 1;
  c.dec_blocks = 1;
  c.max_positions = 48;
  return c;
}

data::Dataset small_dataset() {
  RunConfig rc;
  rc.apply({"data.worlds=1"});
  const auto eps = data::training_episodes(rc, 1, 200);
  return data::build_sl_dataset(eps, 3, 4, 0, 1);
}

int oracle_prefix(const std::vector<Action>& p, const std::vector<Action>& e) {
  int count = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    bool all = true;
    for (std::size_t j = 0; j <= i; ++j) all = all && p[j] == e[j];
    count += all ? 1 : 0;
  }
  return count;
}

// Independent grammar check: split on every space, then validate token by token.
struct OracleResult {
  bool ok;
  int position;
};

OracleResult oracle_parse(const std::string& s, int K) {
  static const std::set<std::string> vocab{"F25", "F50", "F75", "L15", "L30", "L45", "R15", "R30", "R45", "STOP"};
  std::vector<std::string> toks(1);
  for (char c : s) {
    if (c == ' ') {
      toks.emplace_back();
    } else {
      toks.back() += c;
    }
  }
  bool stop = false;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const int pos = static_cast<int>(i) + 1;
    if (pos > K) return {false, pos};
    if (!vocab.count(toks[i])) return {false, pos};
    if (stop && toks[i] != "STOP") return {false, pos};
    stop = stop || toks[i] == "STOP";
  }
  if (static_cast<int>(toks.size()) != K) return {false, static_cast<int>(toks.size()) + 1};
  return {true, 0};
}

std::vector<Action> random_actions(Rng& rng, int K) {
  std::vector<Action> a;
  for (int i = 0; i < K; ++i) a.push_back(static_cast<Action>(rng.below(kActions)));
  return a;
}

std::vector<Action> random_valid(Rng& rng, int K) {
  auto a = random_actions(rng, K);
  bool stop = false;
  for (auto& x : a) {
    stop = stop || x == Action::kStop;
    if (stop) x = Action::kStop;
  }
  return a;
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("reward_action matches the loop oracle") {
  for (int p = 0; p < 16; ++p) {
    for (int e = 0; e < 16; ++e) {
      const std::vector<Action> pa{static_cast<Action>(p % 4), static_cast<Action>(p / 4)};
      const std::vector<Action> ea{static_cast<Action>(e % 4), static_cast<Action>(e / 4)};
      CHECK(reward_action(pa, ea) == oracle_prefix(pa, ea));
    }
  }
  Rng rng(17);
  for (int i = 0; i < 10000; ++i) {
    const auto p = random_actions(rng, 3);
    auto e = random_actions(rng, 3);
    if (i % 3 == 0) e = p;
    if (i % 3 == 1) e[0] = p[0];
    const int r = reward_action(p, e);
    REQUIRE(r == oracle_prefix(p, e));
    REQUIRE(r >= 0);
    REQUIRE(r <= 3);
  }
  const std::vector<Action> ex{Action::kF25, Action::kL15, Action::kStop};
  CHECK(reward_action(ex, ex) == 3);
  CHECK(reward_action({Action::kF50, Action::kL15, Action::kStop}, ex) == 0);
  CHECK(reward_action({Action::kF25, Action::kR15, Action::kStop}, ex) == 1);
  CHECK_THROWS_AS(reward_action({Action::kF25}, ex), std::invalid_argument);
  CHECK(reward_action({Action::kF50, Action::kL30, Action::kStop}, ex, true) == 3);
  CHECK(reward_action({Action::kF50, Action::kR30, Action::kStop}, ex, true) == 1);
}

TEST_CASE("action grammar: examples, error classes, round trip") {
  CHECK(parse_action_text("F50 R30 F25", 3).ok());
  CHECK(parse_action_text("F50 R30 F25", 3).tokens.size() == 3u);
  CHECK(parse_action_text("F50 STOP STOP", 3).ok());
  const auto after = parse_action_text("STOP F25 STOP", 3);
  REQUIRE_FALSE(after.ok());
  CHECK(after.error->kind == ParseErrorKind::kAfterStop);
  CHECK(after.error->position == 2);
  CHECK(after.tokens == std::vector<Action>{Action::kStop});

  const auto unknown = parse_action_text("F60 L15 STOP", 3);
  REQUIRE_FALSE(unknown.ok());
  CHECK(unknown.error->kind == ParseErrorKind::kUnknownToken);
  CHECK(unknown.error->position == 1);
  const auto shorter = parse_action_text("F25 L15", 3);
  REQUIRE_FALSE(shorter.ok());
  CHECK(shorter.error->kind == ParseErrorKind::kArity);
  CHECK(shorter.error->position == 3);
  CHECK(parse_action_text("F25 L15 F25 F25", 3).error->kind == ParseErrorKind::kArity);
  CHECK_FALSE(parse_action_text("F25  L15 F25", 3).ok());
  CHECK_FALSE(parse_action_text("F25 L15 F25 ", 3).ok());
  CHECK_FALSE(parse_action_text("", 3).ok());

  CHECK(reward_format("F25 L15 F25", 3) == 1);
  CHECK(reward_format("F60 L15 F25", 3) == 0);
  CHECK(reward_format("F25 L15", 3) == 0);

  // Every valid K=3 sequence: 9^3 without STOP, plus the STOP-padded ones.
  int valid = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::vector<Action> a{static_cast<Action>(i % 10), static_cast<Action>(i / 10 % 10), static_cast<Action>(i / 100)};
    const bool grammatical = !(a[0] == Action::kStop && a[1] != Action::kStop) && !(a[1] == Action::kStop && a[2] != Action::kStop);
    const auto p = parse_action_text(action_text(a), 3);
    REQUIRE(p.ok() == grammatical);
    if (grammatical) {
      REQUIRE(p.tokens == a);
      ++valid;
    }
  }
  CHECK(valid == 729 + 81 + 9 + 1);
}

TEST_CASE("grammar fuzz: single-character mutations agree with an independent oracle") {
  Rng rng(5);
  const std::string alphabet = "FLRSTOP0123456789 x";
  int accepted = 0;
  for (int i = 0; i < 10000; ++i) {
    std::string s = action_text(random_valid(rng, 3));
    const auto at = rng.below(s.size() + 1);
    switch (rng.below(3)) {
      case 0:
        if (at < s.size()) s.erase(at, 1);
        break;
      case 1:
        s.insert(at, 1, alphabet[rng.below(alphabet.size())]);
        break;
      default:
        if (at < s.size()) s[at] = alphabet[rng.below(alphabet.size())];
        break;
    }
    const auto p = parse_action_text(s, 3);
    const auto o = oracle_parse(s, 3);
    REQUIRE(p.ok() == o.ok);
    if (!o.ok) REQUIRE(p.error->position == o.position);
    accepted += p.ok() ? 1 : 0;
    const int r = reward_action_text(s, {Action::kF25, Action::kF25, Action::kF25});
    REQUIRE(r >= 0);
    REQUIRE(r <= static_cast<int>(p.tokens.size()));
  }
  CHECK(accepted > 0);
  CHECK(accepted < 10000);
}

TEST_CASE("rewards: length, text action reward, totals") {
  CHECK(reward_length(5, 5, 0.1) == 1.0);
  CHECK(reward_length(0, 5, 0.1) == 1.0);
  CHECK(reward_length(8, 5, 0.1) == doctest::Approx(-0.3));
  CHECK_THROWS(reward_length(1, 1, 0.0));

  const std::vector<Action> ex{Action::kF25, Action::kL15, Action::kF50};
  CHECK(reward_action_text("F25 L15 F50", ex) == 3);
  CHECK(reward_action_text("F25 L60 F50", ex) == 1);
  CHECK(reward_action_text("F25 L15", ex) == 2);
  CHECK(reward_action_text("F25 L15 F50 F50", ex) == 3);
  CHECK(reward_action_text("junk", ex) == 0);

  const auto t = total_reward(3, 1, 1.0);
  CHECK(t.total == 5.0);
  CHECK(total_reward(0, 1, reward_length(3, 4, 0.1)).total == 2.0);
  CHECK(total_reward(3, 1, reward_length(14, 4, 0.1)).total == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("group advantages") {
  const auto a = group_advantages({3, 1, 1, 1}, 1e-6);
  CHECK(a[0] == doctest::Approx(1.7321).epsilon(1e-4));
  for (int i = 1; i < 4; ++i) CHECK(a[static_cast<std::size_t>(i)] == doctest::Approx(-0.5774).epsilon(1e-4));
  CHECK(group_advantages({2, 2, 2, 2}, 1e-6) == std::vector<double>(4, 0.0));
  CHECK_THROWS(group_advantages({1.0}, 1e-6));

  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> r(4);
    for (auto& x : r) x = static_cast<double>(rng.below(5)) + rng.uniform(-1.0, 1.0);
    const auto A = group_advantages(r, 1e-6);
    const double mean = std::accumulate(A.begin(), A.end(), 0.0) / 4.0;
    double var = 0.0;
    for (double x : A) var += (x - mean) * (x - mean) / 4.0;
    REQUIRE(std::abs(mean) < 1e-9);
    REQUIRE(std::abs(std::sqrt(var) - 1.0) < 1e-6);
    auto shifted = r;
    auto scaled = r;
    for (auto& x : shifted) x += 7.5;
    for (auto& x : scaled) x *= 3.0;
    const auto As = group_advantages(shifted, 1e-6);
    const auto Ak = group_advantages(scaled, 1e-6);
    for (std::size_t n = 0; n < 4; ++n) {
      REQUIRE(std::abs(As[n] - A[n]) < 1e-9);
      REQUIRE((Ak[n] > 0) == (A[n] > 0));
    }
  }
}

TEST_CASE("joint ratio and clipped loss") {
  CHECK(joint_ratio(-3.2, -3.2, -7.1, -7.1) == 1.0);
  CHECK(joint_ratio(std::log(2.0), 0.0, std::log(0.5), 0.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(joint_ratio(50.0, 0.0, 0.0, 0.0) == std::exp(20.0));
  CHECK(joint_ratio(-60.0, 0.0, 0.0, 0.0) == std::exp(-20.0));

  CHECK(grpo_loss({1, 1, 1, 1}, group_advantages({3, 1, 1, 1}, 1e-6), 0.28) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(grpo_loss({2.0}, {1.0}, 0.28) == doctest::Approx(-1.28));
  CHECK(grpo_loss({0.5}, {-1.0}, 0.28) == doctest::Approx(0.72));

  // Differentiable surrogate agrees with the scalar loss and is flat in the clipped branch.
  const std::vector<double> adv{1.0, -1.0, 0.5, -0.3};
  const std::vector<double> lr{std::log(2.0), std::log(0.5), 0.1, -0.05};
  const diff::Expr<double> e = [&](Graph<double>& g) { return GrpoOps<double>::surrogate(g.input("lr"), adv, 0.28); };
  const diff::Bindings<double> b{{"lr", Tensor<double>::column(lr)}};
  std::vector<double> rho;
  for (double x : lr) rho.push_back(std::exp(x));
  CHECK(diff::evaluate(e, b).item() == doctest::Approx(grpo_loss(rho, adv, 0.28)).epsilon(1e-12));
  const auto grad = diff::gradient(e, b, {"lr"}).at("lr");
  CHECK(grad[0] == 0.0);
  CHECK(grad[1] == 0.0);
  CHECK(grad[2] == doctest::Approx(-0.25 * 0.5 * rho[2]).epsilon(1e-12));
  CHECK(grad[3] == doctest::Approx(0.25 * 0.3 * rho[3]).epsilon(1e-12));
  diff::GradCheckOptions opt;
  opt.seed = 2;
  const auto r = diff::grad_check(e, b, opt);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-5);

  // Numeric probe of d loss / d rho at rho = 2, A = +1.
  const double h = 1e-6;
  CHECK(std::abs(grpo_loss({2.0 + h}, {1.0}, 0.28) - grpo_loss({2.0 - h}, {1.0}, 0.28)) / (2 * h) == 0.0);
  CHECK((grpo_loss({1.1 + h}, {1.0}, 0.28) - grpo_loss({1.1 - h}, {1.0}, 0.28)) / (2 * h) == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("rollout groups: on-policy ratios, score-function direction, finite differences") {
  const auto ds = small_dataset();
  const auto cfg = tiny();
  const auto prm = models::init_prm(cfg, 4);
  const auto pol = models::init_policy(cfg, 5);

  for (bool dbl : {false, true}) {
    PpcfConfig pc;
    pc.double_precision = dbl;
    std::vector<RolloutGroup> groups;
    for (std::size_t i : {3u, 11u}) groups.push_back(sample_group(prm, pol, cfg, pc, ds.samples[i], 77));
    for (const auto& g : groups) {
      REQUIRE(g.rollouts.size() == 4u);
      for (const auto& r : g.rollouts) {
        CHECK(r.actions.size() == 3u);
        CHECK(r.reward.total == r.reward.act + r.reward.fmt + r.reward.len);
        CHECK(r.reward.len <= 1.0);
        CHECK(std::isfinite(r.lp_prm_old));
        CHECK(std::isfinite(r.lp_policy_old));
      }
    }
    const auto grads = ppcf_gradients(prm, pol, cfg, pc, groups);
    for (double rho : grads.rho) CHECK(rho == 1.0);
    CHECK(grads.clip_fraction == 0.0);
    CHECK(std::abs(grads.loss) < 1e-6);

    // -(1/B)(1/N) sum A grad(log pi + log F) in an independent double graph.
    Graph<double> g;
    models::BoundParams<double> Pf(g, prm, true);
    models::BoundParams<double> Pp(g, pol, true);
    std::vector<diff::Var<double>> terms;
    for (const auto& grp : groups) {
      const auto mem = models::Prm<double>::encode(Pf, cfg, grp.state->history, grp.state->current);
      for (const auto& r : grp.rollouts) {
        const auto lp = diff::add(models::Prm<double>::sequence_logprob(Pf, cfg, mem, r.progress),
                                  models::Policy<double>::logprob(
                                      models::Policy<double>::logits(Pp, cfg, *grp.state, models::ProgressInput::from_tokens(r.progress.tokens)),
                                      r.actions));
        terms.push_back(diff::scale(lp, -r.advantage));
      }
    }
    g.backward(diff::mean(diff::concat_rows<double>(terms)));
    const auto ref_f = Pf.grads();
    const auto ref_p = Pp.grads();
    double worst = 0.0;
    for (std::size_t i = 0; i < ref_f.size(); ++i) worst = std::max(worst, max_diff(grads.prm[i], ref_f[i]));
    for (std::size_t i = 0; i < ref_p.size(); ++i) worst = std::max(worst, max_diff(grads.policy[i], ref_p[i]));
    CHECK(worst < (dbl ? 1e-6 : 1e-4));  // float graphs round at about 1e-7 relative
  }

  // Off-policy: perturb both modules so ratios leave 1, then check finite differences.
  PpcfConfig pc;
  pc.double_precision = true;
  pc.eps = 0.05;
  std::vector<RolloutGroup> groups{sample_group(prm, pol, cfg, pc, ds.samples[6], 9)};
  auto prm2 = prm;
  auto pol2 = pol;
  Rng rng(1);
  for (std::size_t i = 0; i < prm2.size(); ++i)
    for (std::size_t j = 0; j < prm2[i].size(); ++j) prm2[i][j] += rng.uniform(-0.05, 0.05);
  for (std::size_t i = 0; i < pol2.size(); ++i)
    for (std::size_t j = 0; j < pol2[i].size(); ++j) pol2[i][j] += rng.uniform(-0.05, 0.05);
  const auto off = ppcf_gradients(prm2, pol2, cfg, pc, groups);
  bool moved = false;
  for (double rho : off.rho) moved = moved || std::abs(rho - 1.0) > 1e-3;
  CHECK(moved);

  const auto& grp = groups.front();
  const diff::Expr<double> loss = [&](Graph<double>& g) {
    models::BoundParams<double> Pf(g, prm2, true, true);
    models::BoundParams<double> Pp(g, pol2, true, true);
    const auto mem = models::Prm<double>::encode(Pf, cfg, grp.state->history, grp.state->current);
    std::vector<diff::Var<double>> lr;
    std::vector<double> adv;
    for (const auto& r : grp.rollouts) {
      const auto lp = diff::add(models::Prm<double>::sequence_logprob(Pf, cfg, mem, r.progress),
                                models::Policy<double>::logprob(
                                    models::Policy<double>::logits(Pp, cfg, *grp.state, models::ProgressInput::from_tokens(r.progress.tokens)),
                                    r.actions));
      lr.push_back(diff::add_scalar(lp, -(r.lp_policy_old + r.lp_prm_old)));
      adv.push_back(r.advantage);
    }
    return GrpoOps<double>::surrogate(diff::concat_rows<double>(lr), adv, pc.eps);
  };
  auto bindings = diff::to_bindings(prm2);
  bindings.merge(diff::to_bindings(pol2));
  CHECK(diff::evaluate(loss, bindings).item() == doctest::Approx(off.loss).epsilon(1e-12));
  diff::GradCheckOptions opt;
  opt.max_coords_per_leaf = 2;
  opt.seed = 13;
  const auto r = diff::grad_check(loss, bindings, opt);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("train_ppcf: deterministic, logs, guarded") {
  const auto ds = small_dataset();
  const auto cfg = tiny();
  const auto prm = models::init_prm(cfg, 4);
  const auto pol = models::init_policy(cfg, 5);
  PpcfConfig pc;
  pc.steps = 6;
  pc.batch_states = 2;
  pc.lr = 1e-3;
  const auto a = train_ppcf(ds, prm, pol, cfg, pc, 31);
  REQUIRE(a.log.size() == 6u);
  CHECK(a.prm.content_hash() != prm.content_hash());
  CHECK(a.policy.content_hash() != pol.content_hash());
  for (const auto& r : a.log) {
    CHECK(r.act_histogram.size() == 4u);
    CHECK(std::accumulate(r.act_histogram.begin(), r.act_histogram.end(), 0) == 8);
    CHECK(r.reward == doctest::Approx(r.r_act + r.r_fmt + r.r_len).epsilon(1e-12));
    CHECK(r.khat >= 0.0);
  }
  const auto b = train_ppcf(ds, prm, pol, cfg, pc, 31);
  CHECK(a.prm.content_hash() == b.prm.content_hash());
  CHECK(a.policy.content_hash() == b.policy.content_hash());
  const auto text = format_ppcf_log(a.log, "abc");
  CHECK(text.rfind("# config abc\n", 0) == 0);
  CHECK(text.find("clip_frac") != std::string::npos);

  CHECK(moving_average({1, 2, 3, 4}, 2) == std::vector<double>{1.0, 1.5, 2.5, 3.5});
  CHECK_THROWS(moving_average({1.0}, 0));

  auto broken = pol;
  broken.get("pol.head.b")[0] = std::nan("");
  try {
    train_ppcf(ds, prm, broken, cfg, pc, 31);
    FAIL("expected a training error");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("state ") != std::string::npos);
  }

  RunConfig rc;
  const auto d = ppcf_config_from(rc);
  CHECK(d.N == 4);
  CHECK(d.eps == 0.28);
  CHECK(d.kl == 0.0);
  CHECK(d.beta == 0.1);
  rc.apply({"ppcf.eps=1.5"});
  CHECK_THROWS_AS(ppcf_config_from(rc), ConfigError);
}
