#include "pt/train/policy_pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace pt::train {

using diff::Graph;
using diff::Tensor;
using diff::Var;
using models::BoundParams;
using models::Policy;
using models::ProgressInput;

ProgressSource parse_progress_source(const std::string& s) {
  if (s == "prm") return ProgressSource::kPrm;
  if (s == "none") return ProgressSource::kNone;
  if (s == "oracle") return ProgressSource::kOracle;
  throw ConfigError("policy.progress must be prm, none or oracle, got '" + s + "'");
}

PolicyConfig policy_config_from(const RunConfig& cfg) {
  PolicyConfig c;
  c.lr = cfg.num("policy.lr");
  c.epochs = static_cast<int>(cfg.integer("policy.epochs"));
  c.batch = static_cast<int>(cfg.integer("policy.batch"));
  c.dagger = cfg.flag("policy.dagger");
  c.dagger_epochs = static_cast<int>(cfg.integer("policy.dagger_epochs"));
  c.dagger_epsilon = cfg.num("data.dagger_epsilon");
  c.dagger_samples = static_cast<std::size_t>(cfg.integer("data.dagger_samples"));
  c.source = parse_progress_source(cfg.str("policy.progress"));
  c.variant = parse_variant(cfg.str("sapp.variant"));
  c.double_precision = cfg.str("precision") == "double";
  if (cfg.str("policy.decode") != "greedy") throw ConfigError("policy.decode supports only greedy");
  if (c.epochs < 1 || c.batch < 1 || c.dagger_epochs < 0) throw ConfigError("invalid policy training settings");
  return c;
}

models::TokenSeq decode_progress_frozen(const diff::ParamStore& prm, const models::ModelConfig& cfg,
                                        const data::StepSample& s) {
  return models::prm_decode(prm, cfg, s, models::DecodeMode::kGreedy);
}

ProgressInput progress_for(const diff::ParamStore& prm, const models::ModelConfig& cfg, const PolicyConfig& pc,
                           const data::StepSample& s) {
  const bool numeric = pc.variant == ProgressVariant::kNumeric;
  switch (pc.source) {
    case ProgressSource::kNone:
      return ProgressInput::from_tokens({});
    case ProgressSource::kOracle:
      if (numeric) return ProgressInput::from_value(static_cast<double>(s.t) / std::max(1, s.episode_steps));
      return ProgressInput::from_tokens(
          std::vector<int>(s.instruction.begin(), s.instruction.begin() + std::min<std::size_t>(s.instruction.size(), static_cast<std::size_t>(s.aligned_prefix))));
    case ProgressSource::kPrm:
      break;
  }
  if (numeric) return ProgressInput::from_value(models::prm_numeric(prm, cfg, s));
  return ProgressInput::from_tokens(decode_progress_frozen(prm, cfg, s).tokens);
}

const ProgressInput& ProgressCache::get(const data::StepSample& s) {
  auto it = cache_.find(s.id);
  if (it == cache_.end()) it = cache_.emplace(s.id, progress_for(*prm_, cfg_, pc_, s)).first;
  return it->second;
}

double policy_ce_loss(const diff::ParamStore& policy, const models::ModelConfig& cfg, const data::StepSample& s,
                      const ProgressInput& prog) {
  return -models::policy_logprob(policy, cfg, s, prog, s.expert);
}

namespace {

struct BatchOut {
  double loss = 0.0;
  std::vector<double> correct;  ///< per position, summed over the batch
};

template <typename T>
BatchOut run_batch(const diff::ParamStore& policy, const models::ModelConfig& cfg,
                   const std::vector<const data::StepSample*>& batch, ProgressCache& progress,
                   std::vector<Tensor<double>>* grads) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  Graph<T> g;
  BoundParams<T> P(g, policy, grads != nullptr);
  std::vector<Var<T>> terms;
  BatchOut out;
  out.correct.assign(static_cast<std::size_t>(cfg.K), 0.0);
  for (const auto* s : batch) {
    const Var<T> logits = Policy<T>::logits(P, cfg, *s, progress.get(*s));
    terms.push_back(diff::neg(Policy<T>::logprob(logits, s->expert)));
    const auto& lv = logits.value();
    for (std::size_t r = 0; r < lv.rows(); ++r) {
      const T* row = lv.row_ptr(r);
      const auto best = std::max_element(row, row + lv.cols()) - row;
      if (best == static_cast<std::ptrdiff_t>(s->expert[r])) out.correct[r] += 1.0;
    }
  }
  const Var<T> loss = diff::mean(diff::concat_rows<T>(terms));
  out.loss = static_cast<double>(loss.value().item());
  if (grads) {
    g.backward(loss);
    *grads = P.grads();
  }
  return out;
}

BatchOut dispatch(bool dbl, const diff::ParamStore& policy, const models::ModelConfig& cfg,
                  const std::vector<const data::StepSample*>& batch, ProgressCache& progress,
                  std::vector<Tensor<double>>* grads) {
  return dbl ? run_batch<double>(policy, cfg, batch, progress, grads) : run_batch<float>(policy, cfg, batch, progress, grads);
}

}  // namespace

double policy_batch_loss(const diff::ParamStore& policy, const models::ModelConfig& cfg,
                         const std::vector<const data::StepSample*>& batch, ProgressCache& progress,
                         std::vector<Tensor<double>>* grads) {
  return run_batch<double>(policy, cfg, batch, progress, grads).loss;
}

PolicyEval evaluate_policy_ce(const diff::ParamStore& policy, const models::ModelConfig& cfg, const data::Dataset& ds,
                              ProgressCache& progress) {
  PolicyEval ev;
  ev.accuracy.assign(static_cast<std::size_t>(cfg.K), 0.0);
  if (ds.samples.empty()) return ev;
  constexpr std::size_t kChunk = 64;
  for (std::size_t i = 0; i < ds.samples.size(); i += kChunk) {
    std::vector<const data::StepSample*> batch;
    for (std::size_t j = i; j < std::min(ds.samples.size(), i + kChunk); ++j) batch.push_back(&ds.samples[j]);
    const auto b = run_batch<float>(policy, cfg, batch, progress, nullptr);
    ev.loss += b.loss * static_cast<double>(batch.size());
    for (std::size_t r = 0; r < ev.accuracy.size(); ++r) ev.accuracy[r] += b.correct[r];
  }
  const double n = static_cast<double>(ds.samples.size());
  ev.loss /= n;
  for (auto& a : ev.accuracy) {
    a /= n;
    ev.mean_accuracy += a / static_cast<double>(ev.accuracy.size());
  }
  return ev;
}

namespace {

void train_epochs(PolicyResult& res, diff::Adam& opt, const data::Dataset& ds, const models::ModelConfig& cfg,
                  const PolicyConfig& pc, ProgressCache& progress, Rng& rng, int epochs, bool dagger_phase,
                  int& step, int& epoch) {
  std::vector<const data::StepSample*> order;
  for (const auto& s : ds.samples) order.push_back(&s);
  for (int e = 0; e < epochs; ++e, ++epoch) {
    rng.shuffle(order);
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(pc.batch)) {
      const std::vector<const data::StepSample*> batch(
          order.begin() + static_cast<std::ptrdiff_t>(i),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + static_cast<std::size_t>(pc.batch))));
      std::vector<Tensor<double>> grads;
      const auto b = dispatch(pc.double_precision, res.policy, cfg, batch, progress, &grads);
      if (!std::isfinite(b.loss) || b.loss > pc.divergence_limit) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "stage 2 diverged at step %d (epoch %d): loss %.6g", step, epoch, b.loss);
        throw TrainingError(buf);
      }
      PolicyLogRecord r;
      r.step = step++;
      r.epoch = epoch;
      r.dagger = dagger_phase;
      r.loss = b.loss;
      for (double c : b.correct) r.accuracy.push_back(c / static_cast<double>(batch.size()));
      r.grad_norm = opt.step(res.policy, grads);
      res.log.push_back(std::move(r));
    }
  }
}

}  // namespace

PolicyResult train_policy(const data::Dataset& ds, const std::vector<world::Episode>& episodes,
                          const diff::ParamStore& prm, const models::ModelConfig& cfg, const PolicyConfig& pc,
                          std::uint64_t seed, const data::Dataset* validation) {
  if (ds.samples.empty()) throw TrainingError("stage 2 needs a non-empty dataset");
  PolicyResult res;
  res.prm_hash_before = prm.content_hash();
  res.policy = models::init_policy(cfg, seed);
  res.aggregated = ds;
  diff::Adam opt(res.policy, diff::AdamConfig{pc.lr});
  Rng rng(derive_seed(seed, 0x9011, 2));
  ProgressCache progress(prm, cfg, pc);
  int step = 0;
  int epoch = 0;
  train_epochs(res, opt, ds, cfg, pc, progress, rng, pc.epochs, false, step, epoch);

  if (pc.dagger && pc.dagger_epochs > 0 && pc.dagger_samples > 0 && !episodes.empty()) {
    const diff::ParamStore& pol = res.policy;
    ProgressCache& pcache = progress;
    const data::Actor actor = [&](const data::StepSample& s) {
      return models::policy_greedy(pol, cfg, s, pcache.get(s));
    };
    data::DaggerOptions opt_d;
    opt_d.K = cfg.K;
    opt_d.history = cfg.history;
    opt_d.epsilon = pc.dagger_epsilon;
    opt_d.max_samples = pc.dagger_samples;
    opt_d.seed = derive_seed(seed, 0xda66, 3);
    opt_d.config_hash = ds.config_hash;
    opt_d.max_steps = episodes.front().spec.max_steps;
    std::uint64_t next_id = 0;
    for (const auto& s : ds.samples) next_id = std::max(next_id, s.id + 1);
    opt_d.first_id = next_id;
    auto collected = data::dagger_collect(actor, episodes, opt_d);
    res.dagger_rollouts = collected.rollouts;
    data::aggregate(res.aggregated, collected.data);
    train_epochs(res, opt, res.aggregated, cfg, pc, progress, rng, pc.dagger_epochs, true, step, epoch);
  }

  if (!res.policy.all_finite()) throw TrainingError("stage 2 produced non-finite parameters");
  res.prm_hash_after = prm.content_hash();
  if (validation) {
    ProgressCache val_progress(prm, cfg, pc);  // validation ids are not disjoint from training ids
    res.validation = evaluate_policy_ce(res.policy, cfg, *validation, val_progress);
  }
  return res;
}

std::string format_policy_log(const std::vector<PolicyLogRecord>& log, const std::string& config_hash) {
  std::string out = "# config " + config_hash + "\nstep\tepoch\tdagger\tloss\tgrad_norm";
  const std::size_t K = log.empty() ? 0 : log.front().accuracy.size();
  for (std::size_t j = 0; j < K; ++j) out += "\tacc" + std::to_string(j);
  out += '\n';
  char buf[64];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d\t%d\t%d\t%.6f\t%.4f", r.step, r.epoch, r.dagger ? 1 : 0, r.loss, r.grad_norm);
    out += buf;
    for (double a : r.accuracy) {
      std::snprintf(buf, sizeof buf, "\t%.4f", a);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace pt::train
