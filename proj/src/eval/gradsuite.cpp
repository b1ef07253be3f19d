#include <algorithm>
#include <cstdio>

#include "pt/diff/gradcheck.hpp"
#include "pt/eval/eval.hpp"

namespace pt::eval {

using diff::Graph;
using diff::Tensor;
using diff::Var;

namespace {

void absorb(GradSuiteEntry& e, const diff::GradCheckReport& r) {
  ++e.instances;
  if (r.non_differentiable) ++e.kink_instances;
  e.max_rel_error = std::max(e.max_rel_error, r.max_rel_error);
  for (const auto& l : r.leaves) {
    e.coords += l.checked;
    e.skipped += l.skipped;
  }
  e.passed = e.passed && r.passed;
}

models::ModelConfig small_model() {
  models::ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.mlp = 8;
  c.enc_blocks = 1;
  c.dec_blocks = 1;
  c.max_positions = 48;
  return c;
}

}  // namespace

std::vector<GradSuiteEntry> run_grad_suite(std::uint64_t seed, int instances, double tolerance) {
  Rng rng(derive_seed(seed, 0x6c, 1));
  diff::GradCheckOptions opt;
  opt.tolerance = tolerance;

  GradSuiteEntry prefix{"prefix_loss"};
  for (int i = 0; i < instances; ++i) {
    const int n = rng.range(2, 12);
    std::vector<int> instr;
    for (int j = 0; j < n; ++j) instr.push_back(rng.range(0, world::kInstructionVocab - 1));
    Tensor<double> logits(static_cast<std::size_t>(n), models::kPrmVocab);
    for (std::size_t j = 0; j < logits.size(); ++j) logits[j] = rng.normal() * 2.0;
    const double tau = rng.uniform(0.2, 3.0);
    const auto mode = i % 2 ? train::CeMode::kMean : train::CeMode::kSum;
    const diff::Expr<double> e = [&](Graph<double>& g) {
      return train::SappOps<double>::loss_prefix(train::SappOps<double>::prefix_ces(g.input("logits"), instr, mode), tau);
    };
    opt.seed = derive_seed(seed, 1, static_cast<std::uint64_t>(i));
    absorb(prefix, diff::grad_check(e, {{"logits", logits}}, opt));
  }

  GradSuiteEntry mono{"mono_loss"};
  for (int i = 0; i < instances; ++i) {
    const int n = rng.range(2, 8);
    std::vector<double> k;
    for (int j = 0; j < n; ++j) k.push_back(rng.uniform(0.0, 12.0));
    std::vector<std::pair<int, int>> pairs;
    for (int a = 0; a < n; ++a)
      for (int b = a + 1; b < n; ++b) pairs.emplace_back(a, b);
    const diff::Expr<double> e = [&](Graph<double>& g) {
      const auto kv = g.input("k");
      std::vector<Var<double>> ks;
      for (int j = 0; j < n; ++j) ks.push_back(diff::index(kv, static_cast<std::size_t>(j), 0));
      return train::SappOps<double>::loss_mono(ks, pairs);
    };
    opt.seed = derive_seed(seed, 2, static_cast<std::uint64_t>(i));
    absorb(mono, diff::grad_check(e, {{"k", Tensor<double>::column(k)}}, opt));
  }

  GradSuiteEntry ce{"policy_ce"};
  {
    RunConfig rc;
    rc.apply({"data.worlds=1"});
    const auto cfg = small_model();
    const auto eps = data::training_episodes(rc, derive_seed(seed, 3), 120);
    const auto ds = data::build_sl_dataset(eps, cfg.K, cfg.history, 0, 0);
    diff::GradCheckOptions popt = opt;
    popt.max_coords_per_leaf = 1;
    for (int i = 0; i < instances; ++i) {
      const auto policy = models::init_policy(cfg, derive_seed(seed, 4, static_cast<std::uint64_t>(i)));
      const auto& s = ds.samples[rng.below(ds.samples.size())];
      std::vector<int> prog(s.instruction.begin(), s.instruction.begin() + static_cast<std::ptrdiff_t>(rng.below(s.instruction.size() + 1)));
      const auto input = models::ProgressInput::from_tokens(prog);
      const diff::Expr<double> e = [&](Graph<double>& g) {
        models::BoundParams<double> P(g, policy, true, true);
        return diff::neg(models::Policy<double>::logprob(models::Policy<double>::logits(P, cfg, s, input), s.expert));
      };
      popt.seed = derive_seed(seed, 5, static_cast<std::uint64_t>(i));
      absorb(ce, diff::grad_check(e, diff::to_bindings(policy), popt));
    }
  }

  GradSuiteEntry surrogate{"clipped_surrogate"};
  for (int i = 0; i < instances; ++i) {
    const int n = rng.range(2, 8);
    std::vector<double> lr;
    std::vector<double> rewards;
    for (int j = 0; j < n; ++j) {
      lr.push_back(rng.uniform(-0.6, 0.6));
      rewards.push_back(static_cast<double>(rng.below(6)));
    }
    const auto adv = train::group_advantages(rewards, 1e-6);
    const double eps = i % 2 ? 0.28 : rng.uniform(0.05, 0.5);
    const diff::Expr<double> e = [&](Graph<double>& g) { return train::GrpoOps<double>::surrogate(g.input("lr"), adv, eps); };
    opt.seed = derive_seed(seed, 6, static_cast<std::uint64_t>(i));
    absorb(surrogate, diff::grad_check(e, {{"lr", Tensor<double>::column(lr)}}, opt));
  }
  return {prefix, mono, ce, surrogate};
}

std::string format_grad_suite(const std::vector<GradSuiteEntry>& entries, const std::string& config_hash) {
  std::string out = "# config " + config_hash + "\nname\tinstances\tat_kink\tcoords\tskipped\tmax_rel_error\tpassed\n";
  char buf[160];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%s\t%d\t%d\t%zu\t%zu\t%.3e\t%d\n", e.name.c_str(), e.instances, e.kink_instances, e.coords, e.skipped,
                  e.max_rel_error, e.passed ? 1 : 0);
    out += buf;
  }
  return out;
}

}  // namespace pt::eval
