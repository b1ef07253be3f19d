#include <cmath>

#include "doctest.h"
#include "pt/train/policy_pretrain.hpp"

using namespace pt;
using namespace pt::train;
using models::ProgressInput;
using world::Action;

namespace {

models::ModelConfig tiny() {
  models::ModelConfig c;
  c.d = 16;
  c.heads = 2;
  c.mlp = 16;
  c.enc_blocks = 1;
  c.dec_blocks = 1;
  c.max_positions = 48;
  return c;
}

struct Fixture {
  models::ModelConfig cfg = tiny();
  std::vector<world::Episode> eps;
  data::Dataset ds;
  diff::ParamStore prm;

  explicit Fixture(int worlds = 2, std::size_t steps = 300) {
    RunConfig rc;
    rc.apply({"data.worlds=" + std::to_string(worlds)});
    eps = data::training_episodes(rc, 1, steps);
    ds = data::build_sl_dataset(eps, cfg.K, cfg.history, 0, 1);
    prm = models::init_prm(cfg, 3);
  }
};

}  // namespace

TEST_CASE("frozen progress decoding is deterministic and may be empty") {
  Fixture f;
  const auto& s = f.ds.samples[4];
  CHECK(decode_progress_frozen(f.prm, f.cfg, s) == decode_progress_frozen(f.prm, f.cfg, s));

  PolicyConfig pc;
  ProgressCache cache(f.prm, f.cfg, pc);
  const auto& a = cache.get(s);
  CHECK(a.tokens == decode_progress_frozen(f.prm, f.cfg, s).tokens);
  CHECK(&cache.get(s) == &a);
  CHECK(cache.size() == 1u);

  auto silent = f.prm;
  silent.get("prm.out.b")[models::kEos] = 100.0;
  const auto empty = decode_progress_frozen(silent, f.cfg, s);
  CHECK(empty.tokens.empty());
  const auto pol = models::init_policy(f.cfg, 1);
  const double l = policy_ce_loss(pol, f.cfg, s, ProgressInput::from_tokens(empty.tokens));
  CHECK(std::isfinite(l));
  CHECK(l > 0.0);
}

TEST_CASE("progress sources: none, oracle prefix, numeric") {
  Fixture f;
  const auto& s = f.ds.samples[7];
  PolicyConfig pc;
  pc.source = ProgressSource::kNone;
  CHECK(progress_for(f.prm, f.cfg, pc, s).tokens.empty());
  pc.source = ProgressSource::kOracle;
  const auto o = progress_for(f.prm, f.cfg, pc, s);
  REQUIRE(o.tokens.size() == static_cast<std::size_t>(s.aligned_prefix));
  CHECK(std::equal(o.tokens.begin(), o.tokens.end(), s.instruction.begin()));
  pc.variant = ProgressVariant::kNumeric;
  CHECK(progress_for(f.prm, f.cfg, pc, s).value == doctest::Approx(static_cast<double>(s.t) / s.episode_steps));
  pc.source = ProgressSource::kPrm;
  const auto n = progress_for(f.prm, f.cfg, pc, s);
  CHECK(n.numeric);
  CHECK(n.value > 0.0);
  CHECK(n.value < 1.0);
  CHECK_THROWS_AS(parse_progress_source("psychic"), ConfigError);
}

TEST_CASE("policy CE: uniform, certain, batch mean decomposition") {
  Fixture f;
  auto pol = models::init_policy(f.cfg, 2);
  const auto prog = ProgressInput::from_tokens({world::kGo, world::kTo});
  const auto& s = f.ds.samples[3];
  pol.get("pol.head.W").fill(0.0);
  pol.get("pol.head.b").fill(0.0);
  CHECK(policy_ce_loss(pol, f.cfg, s, prog) == doctest::Approx(3.0 * std::log(10.0)).epsilon(1e-12));
  CHECK(policy_ce_loss(pol, f.cfg, s, prog) == doctest::Approx(6.9078).epsilon(1e-4));

  data::StepSample fixed = s;
  fixed.expert = {Action::kL15, Action::kL15, Action::kL15};
  pol.get("pol.head.b")[static_cast<std::size_t>(Action::kL15)] = 1000.0;
  CHECK(policy_ce_loss(pol, f.cfg, fixed, prog) == 0.0);

  const auto fresh = models::init_policy(f.cfg, 5);
  PolicyConfig pc;
  ProgressCache cache(f.prm, f.cfg, pc);
  std::vector<const data::StepSample*> batch;
  double mean = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    batch.push_back(&f.ds.samples[i * 3]);
    mean += policy_ce_loss(fresh, f.cfg, f.ds.samples[i * 3], cache.get(f.ds.samples[i * 3])) / 6.0;
  }
  std::vector<diff::Tensor<double>> grads;
  CHECK(std::abs(policy_batch_loss(fresh, f.cfg, batch, cache, &grads) - mean) < 1e-10);
  CHECK(grads.size() == fresh.size());
}

TEST_CASE("train_policy: frozen module, determinism, accuracy above chance, DAgger aggregation") {
  Fixture f(4, 1500);
  RunConfig vc;
  vc.apply({"data.worlds=2"});
  const auto val_eps = data::eval_episodes(vc, 6);
  const auto val = data::build_sl_dataset(val_eps, f.cfg.K, f.cfg.history, 0, 2);

  PolicyConfig pc;
  pc.epochs = 3;
  pc.lr = 3e-3;
  pc.dagger_samples = 300;
  const auto prm_hash = f.prm.content_hash();
  const auto a = train_policy(f.ds, f.eps, f.prm, f.cfg, pc, 9, &val);
  CHECK(a.prm_hash_before == prm_hash);
  CHECK(a.prm_hash_after == prm_hash);
  CHECK(f.prm.content_hash() == prm_hash);
  CHECK(a.aggregated.samples.size() > f.ds.samples.size());
  CHECK(a.aggregated.samples.size() <= f.ds.samples.size() + 300);
  CHECK(a.dagger_rollouts > 0);
  bool saw_dagger = false;
  for (const auto& r : a.log) saw_dagger |= r.dagger;
  CHECK(saw_dagger);
  REQUIRE(a.validation.has_value());
  for (double acc : a.validation->accuracy) CHECK(acc > 0.1);

  const auto b = train_policy(f.ds, f.eps, f.prm, f.cfg, pc, 9, &val);
  CHECK(b.policy.content_hash() == a.policy.content_hash());

  const std::string log = format_policy_log(a.log, "h");
  CHECK(log.find("acc2") != std::string::npos);

  pc.divergence_limit = 1e-6;
  CHECK_THROWS_AS(train_policy(f.ds, f.eps, f.prm, f.cfg, pc, 9), TrainingError);
}
