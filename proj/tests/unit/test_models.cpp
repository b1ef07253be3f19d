#include <cmath>

#include "doctest.h"
#include "pt/diff/gradcheck.hpp"
#include "pt/models/checkpoint.hpp"
#include "pt/models/policy.hpp"

using namespace pt;
using namespace pt::models;
using diff::Graph;
using world::Action;

namespace {

struct Fixture {
  ModelConfig cfg;
  std::vector<world::Episode> eps;
  data::Dataset ds;

  Fixture() {
    RunConfig rc;
    rc.apply({"data.worlds=2"});
    cfg = model_config_from(rc);
    eps = data::training_episodes(rc, 1, 60);
    ds = data::build_sl_dataset(eps, cfg.K, cfg.history, 0, 1);
  }
  const data::StepSample& sample(std::size_t i) const { return ds.samples.at(i); }
};

ModelConfig tiny() {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.mlp = 8;
  c.enc_blocks = 1;
  c.dec_blocks = 1;
  c.max_positions = 48;
  return c;
}

}  // namespace

TEST_CASE("parameter counts stay under one million") {
  const ModelConfig cfg;
  CHECK(init_prm(cfg, 1).scalar_count() < 1'000'000u);
  CHECK(init_policy(cfg, 1).scalar_count() < 1'000'000u);
  CHECK(init_prm(cfg, 1).all_finite());
  CHECK(init_prm(cfg, 1) == init_prm(cfg, 1));
  CHECK_FALSE(init_prm(cfg, 1) == init_prm(cfg, 2));
}

TEST_CASE("prm teacher forcing: shape, finiteness, batch independence") {
  Fixture f;
  const auto prm = init_prm(f.cfg, 3);
  const auto& a = f.sample(5);
  const auto& b = f.sample(20);
  const auto la = prm_forward_teacher(prm, f.cfg, a);
  CHECK(la.rows() == a.instruction.size());
  CHECK(la.cols() == static_cast<std::size_t>(kPrmVocab));
  for (double v : la.values()) CHECK(std::isfinite(v));

  // Same sample, different position in a shared graph.
  auto run = [&](const data::StepSample& first, const data::StepSample& second) {
    Graph<double> g;
    BoundParams<double> P(g, prm, false);
    const auto m1 = Prm<double>::encode(P, f.cfg, first.history, first.current);
    const auto l1 = Prm<double>::teacher_logits(P, f.cfg, m1, first.instruction);
    const auto m2 = Prm<double>::encode(P, f.cfg, second.history, second.current);
    const auto l2 = Prm<double>::teacher_logits(P, f.cfg, m2, second.instruction);
    return std::pair{l1.value(), l2.value()};
  };
  const auto [ab_a, ab_b] = run(a, b);
  const auto [ba_b, ba_a] = run(b, a);
  CHECK(ab_a == ba_a);
  CHECK(ab_b == ba_b);
  CHECK(ab_a == la);

  data::StepSample tooLong = a;
  tooLong.instruction.assign(80, world::kGo);
  CHECK_THROWS_AS(prm_forward_teacher(prm, f.cfg, tooLong), ModelError);
}

TEST_CASE("prm decode: determinism, seeded sampling, empty decode") {
  Fixture f;
  auto prm = init_prm(f.cfg, 4);
  const auto& s = f.sample(7);
  const auto g1 = prm_decode(prm, f.cfg, s, DecodeMode::kGreedy);
  CHECK(g1 == prm_decode(prm, f.cfg, s, DecodeMode::kGreedy));
  CHECK(static_cast<int>(g1.tokens.size()) <= decode_limit(f.cfg, static_cast<int>(s.instruction.size())));
  const auto s1 = prm_decode(prm, f.cfg, s, DecodeMode::kSample, 1.0, 99);
  CHECK(s1 == prm_decode(prm, f.cfg, s, DecodeMode::kSample, 1.0, 99));
  double sum = 0.0;
  for (double lp : s1.logprobs) sum += lp;
  CHECK(sum == s1.total);
  for (int t : s1.tokens) CHECK(t < kEos);
  CHECK_THROWS_AS(prm_decode(prm, f.cfg, s, DecodeMode::kSample, 0.0, 1), ModelError);

  // Sampled log-probs agree with the teacher-forced sequence log-probability.
  Graph<double> g;
  BoundParams<double> P(g, prm, false);
  const auto mem = Prm<double>::encode(P, f.cfg, s.history, s.current);
  const double seq = Prm<double>::sequence_logprob(P, f.cfg, mem, s1).value().item();
  CHECK(seq <= s1.total + 1e-4);  // the decoder never emits PAD, so its distribution is renormalized

  prm.get("prm.out.b")[kEos] = 100.0;
  const auto e = prm_decode(prm, f.cfg, s, DecodeMode::kGreedy);
  CHECK(e.tokens.empty());
  CHECK(e.ended_with_eos);
}

TEST_CASE("policy: normalized rows, K heads, progress sensitivity") {
  Fixture f;
  const auto pol = init_policy(f.cfg, 5);
  const auto& s = f.sample(9);
  const auto p = policy_forward(pol, f.cfg, s, ProgressInput::from_tokens({world::kGo, world::kTo}));
  CHECK(p.rows() == 3u);
  CHECK(p.cols() == static_cast<std::size_t>(world::kNumActions));
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) sum += p.at(r, c);
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
  const auto q = policy_forward(pol, f.cfg, s, ProgressInput::from_tokens({}));
  const auto r = policy_forward(pol, f.cfg, s, ProgressInput::from_tokens({world::kTurn, world::kLeft, world::kAnd}));
  CHECK_FALSE(p == q);
  CHECK_FALSE(p == r);
  CHECK_FALSE(policy_forward(pol, f.cfg, s, ProgressInput::from_value(0.2)) ==
              policy_forward(pol, f.cfg, s, ProgressInput::from_value(0.8)));
}

TEST_CASE("policy_logprob: uniform, certain, factorized, greedy is maximal") {
  Fixture f;
  auto pol = init_policy(f.cfg, 6);
  const auto& s = f.sample(3);
  const auto prog = ProgressInput::from_tokens({world::kGo});
  const std::vector<Action> acts{Action::kF25, Action::kL30, Action::kStop};

  const auto probs = policy_forward(pol, f.cfg, s, prog);
  CHECK(policy_logprob(pol, f.cfg, s, prog, acts) == doctest::Approx(logprob_of(probs, acts)).epsilon(1e-12));
  double per_step = 0.0;
  for (std::size_t j = 0; j < acts.size(); ++j) per_step += std::log(probs.at(j, static_cast<std::size_t>(acts[j])));
  CHECK(logprob_of(probs, acts) == per_step);

  const auto greedy = policy_greedy(pol, f.cfg, s, prog);
  const double best = policy_logprob(pol, f.cfg, s, prog, greedy);
  for (std::size_t j = 0; j < greedy.size(); ++j) {
    for (int a = 0; a < world::kNumActions; ++a) {
      auto other = greedy;
      other[j] = static_cast<Action>(a);
      CHECK(policy_logprob(pol, f.cfg, s, prog, other) <= best + 1e-6);
    }
  }

  pol.get("pol.head.W").fill(0.0);
  pol.get("pol.head.b").fill(0.0);
  CHECK(policy_logprob(pol, f.cfg, s, prog, acts) == doctest::Approx(-3.0 * std::log(10.0)).epsilon(1e-12));
  pol.get("pol.head.b")[static_cast<std::size_t>(Action::kF50)] = 1000.0;
  CHECK(policy_logprob(pol, f.cfg, s, prog, {Action::kF50, Action::kF50, Action::kF50}) == 0.0);
}

TEST_CASE("gradients of both networks pass finite differences") {
  Fixture f;
  const ModelConfig cfg = tiny();
  const auto& s = f.sample(11);
  diff::GradCheckOptions opt;
  opt.max_coords_per_leaf = 3;
  opt.seed = 17;

  const auto prm = init_prm(cfg, 7);
  const diff::Expr<double> prm_loss = [&](Graph<double>& g) {
    BoundParams<double> P(g, prm, true, true);
    const auto mem = Prm<double>::encode(P, cfg, s.history, s.current);
    return diff::sum(diff::cross_entropy_rows<double>(Prm<double>::teacher_logits(P, cfg, mem, s.instruction), s.instruction));
  };
  const auto r1 = diff::grad_check(prm_loss, diff::to_bindings(prm), opt);
  CHECK(r1.passed);
  CHECK(r1.max_rel_error < 1e-4);
  std::size_t compared = 0;
  for (const auto& l : r1.leaves) compared += l.checked;
  CHECK(compared > 100u);

  const auto pol = init_policy(cfg, 8);
  const auto prog = ProgressInput::from_tokens({world::kGo, world::kTo, world::kThe});
  const diff::Expr<double> pol_loss = [&](Graph<double>& g) {
    BoundParams<double> P(g, pol, true, true);
    return diff::neg(Policy<double>::logprob(Policy<double>::logits(P, cfg, s, prog), s.expert));
  };
  const auto r2 = diff::grad_check(pol_loss, diff::to_bindings(pol), opt);
  CHECK(r2.passed);
  CHECK(r2.max_rel_error < 1e-4);
}

TEST_CASE("checkpoints round trip byte-exactly") {
  const ModelConfig cfg;
  const auto prm = init_prm(cfg, 9);
  const std::string bytes = checkpoint_bytes(prm, 0xabcdef);
  const auto ck = checkpoint_from_bytes(bytes);
  CHECK(ck.config_hash == 0xabcdefu);
  CHECK(ck.params == prm);
  CHECK(checkpoint_bytes(ck.params, ck.config_hash) == bytes);
  CHECK_THROWS_AS(checkpoint_from_bytes(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(checkpoint_from_bytes("NOPE"), CheckpointError);
  std::string v2 = bytes;
  v2[4] = 2;
  CHECK_THROWS_AS(checkpoint_from_bytes(v2), CheckpointError);
}
