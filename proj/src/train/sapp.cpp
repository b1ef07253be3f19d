#include "pt/train/sapp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

namespace pt::train {

using diff::Graph;
using diff::Tensor;
using diff::Var;
using models::BoundParams;
using models::Prm;

CeMode parse_ce_mode(const std::string& s) {
  if (s == "sum") return CeMode::kSum;
  if (s == "mean") return CeMode::kMean;
  throw ConfigError("sapp.ce_mode must be sum or mean, got '" + s + "'");
}

ProgressVariant parse_variant(const std::string& s) {
  if (s == "semantic") return ProgressVariant::kSemantic;
  if (s == "numeric") return ProgressVariant::kNumeric;
  if (s == "reconstruct") return ProgressVariant::kReconstruct;
  throw ConfigError("sapp.variant must be semantic, numeric or reconstruct, got '" + s + "'");
}

std::string variant_name(ProgressVariant v) {
  switch (v) {
    case ProgressVariant::kSemantic: return "semantic";
    case ProgressVariant::kNumeric: return "numeric";
    case ProgressVariant::kReconstruct: return "reconstruct";
  }
  return "?";
}

PrefixCEs prefix_ce(const Tensor<double>& logits, const std::vector<int>& instruction, CeMode mode) {
  if (logits.rows() != instruction.size()) throw std::invalid_argument("prefix_ce: one logit row per instruction token");
  PrefixCEs out;
  out.mode = mode;
  double acc = 0.0;
  for (std::size_t k = 0; k < instruction.size(); ++k) {
    const double* row = logits.row_ptr(k);
    const double m = *std::max_element(row, row + logits.cols());
    double z = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) z += std::exp(row[c] - m);
    acc += m + std::log(z) - row[static_cast<std::size_t>(instruction[k])];
    out.ce.push_back(mode == CeMode::kSum ? acc : acc / static_cast<double>(k + 1));
  }
  return out;
}

namespace {

// logsumexp(-ce / tau)
double neg_lse(const std::vector<double>& ce, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (ce.empty()) throw std::invalid_argument("empty prefix set");
  const double lo = *std::min_element(ce.begin(), ce.end());
  double z = 0.0;
  for (double c : ce) z += std::exp(-(c - lo) / tau);
  return -lo / tau + std::log(z);
}

}  // namespace

PrefixDistribution prefix_distribution(const PrefixCEs& ces, double tau) {
  const double lse = neg_lse(ces.ce, tau);
  PrefixDistribution d;
  d.tau = tau;
  for (std::size_t k = 0; k < ces.ce.size(); ++k) {
    d.p.push_back(std::exp(-ces.ce[k] / tau - lse));
    d.khat += static_cast<double>(k + 1) * d.p.back();
  }
  return d;
}

double loss_prefix(const PrefixCEs& ces, double tau) { return -tau * neg_lse(ces.ce, tau); }

double loss_mono(const std::vector<double>& khat, const std::vector<std::pair<int, int>>& pairs) {
  if (pairs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [i, j] : pairs) s += std::max(0.0, khat.at(static_cast<std::size_t>(i)) - khat.at(static_cast<std::size_t>(j)));
  return s / static_cast<double>(pairs.size());
}

template <typename T>
Var<T> SappOps<T>::prefix_ces(V logits, const std::vector<int>& instruction, CeMode mode) {
  V ce = diff::cumsum(diff::cross_entropy_rows<T>(logits, instruction));
  if (mode == CeMode::kMean) {
    std::vector<T> inv(instruction.size());
    for (std::size_t k = 0; k < inv.size(); ++k) inv[k] = T(1) / static_cast<T>(k + 1);
    ce = diff::mul(ce, logits.graph->constant(Tensor<T>::column(std::move(inv))));
  }
  return ce;
}

template <typename T>
Var<T> SappOps<T>::loss_prefix(V ces, double tau) {
  return diff::scale(diff::logsumexp(diff::scale(ces, static_cast<T>(-1.0 / tau))), static_cast<T>(-tau));
}

template <typename T>
Var<T> SappOps<T>::expected_prefix(V ces, double tau) {
  const std::size_t n = ces.rows() * ces.cols();
  const V p = diff::softmax_rows(diff::reshape(diff::scale(ces, static_cast<T>(-1.0 / tau)), 1, n));
  std::vector<T> ks(n);
  for (std::size_t k = 0; k < n; ++k) ks[k] = static_cast<T>(k + 1);
  return diff::sum(diff::mul(p, ces.graph->constant(Tensor<T>::row(std::move(ks)))));
}

template <typename T>
Var<T> SappOps<T>::loss_mono(const std::vector<V>& khat, const std::vector<std::pair<int, int>>& pairs) {
  if (khat.empty()) throw std::invalid_argument("loss_mono needs at least one expectation");
  Graph<T>& g = *khat.front().graph;
  if (pairs.empty()) return g.scalar(T(0));
  std::vector<V> terms;
  for (const auto& [i, j] : pairs) terms.push_back(diff::hinge(diff::sub(khat.at(static_cast<std::size_t>(i)), khat.at(static_cast<std::size_t>(j)))));
  return diff::mean(diff::concat_rows<T>(terms));
}

template struct SappOps<float>;
template struct SappOps<double>;

SappConfig sapp_config_from(const RunConfig& cfg) {
  SappConfig c;
  c.tau = cfg.num("sapp.tau");
  if (!(c.tau > 0.0)) throw ConfigError("sapp.tau must be positive");
  c.mode = parse_ce_mode(cfg.str("sapp.ce_mode"));
  c.use_prefix = cfg.flag("sapp.use_prefix");
  c.use_mono = cfg.flag("sapp.use_mono");
  c.variant = parse_variant(cfg.str("sapp.variant"));
  c.pair_cap = static_cast<int>(cfg.integer("sapp.pair_cap"));
  c.lr = cfg.num("sapp.lr");
  const auto& schedule = cfg.str("sapp.lr_schedule");
  if (schedule != "constant" && schedule != "cosine") throw ConfigError("sapp.lr_schedule must be constant or cosine, got '" + schedule + "'");
  c.cosine = schedule == "cosine";
  c.epochs = static_cast<int>(cfg.integer("sapp.epochs"));
  c.warmup_epochs = static_cast<int>(cfg.integer("sapp.warmup_epochs"));
  c.batch_episodes = static_cast<int>(cfg.integer("sapp.batch_episodes"));
  c.chunk = static_cast<int>(cfg.integer("sapp.chunk"));
  c.double_precision = cfg.str("precision") == "double";
  if (c.epochs < 1 || c.warmup_epochs < 0 || c.batch_episodes < 1 || c.chunk < 1 || c.pair_cap < 0) throw ConfigError("invalid sapp batch settings");
  return c;
}

std::vector<std::pair<int, int>> mono_pairs(const std::vector<SappItem>& items, int cap) {
  std::map<int, std::vector<int>> groups;
  for (std::size_t i = 0; i < items.size(); ++i) groups[items[i].group].push_back(static_cast<int>(i));
  std::vector<std::pair<int, int>> out;
  for (auto& [gid, idx] : groups) {
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return items[a].sample->t < items[b].sample->t; });
    int taken = 0;
    for (std::size_t a = 0; a < idx.size() && taken < cap; ++a) {
      for (std::size_t b = a + 1; b < idx.size() && taken < cap; ++b) {
        if (items[idx[a]].sample->t < items[idx[b]].sample->t) {
          out.emplace_back(idx[a], idx[b]);
          ++taken;
        }
      }
    }
  }
  return out;
}

namespace {

template <typename T>
struct BatchGraph {
  Var<T> loss;
  SappBatchLoss stats;
};

template <typename T>
BatchGraph<T> build_batch(const BoundParams<T>& P, const models::ModelConfig& mcfg, const SappConfig& cfg,
                          const std::vector<SappItem>& items) {
  Graph<T>& g = P.graph();
  if (items.empty()) throw std::invalid_argument("empty batch");
  std::vector<Var<T>> prefix_terms;
  std::vector<Var<T>> khat;
  for (const auto& it : items) {
    const auto& s = *it.sample;
    const Var<T> mem = Prm<T>::encode(P, mcfg, s.history, s.current);
    if (cfg.variant == ProgressVariant::kNumeric) {
      const T target = static_cast<T>(s.t) / static_cast<T>(std::max(1, s.episode_steps));
      const Var<T> v = Prm<T>::numeric_progress(P, mem);
      prefix_terms.push_back(diff::square(diff::add_scalar(v, -target)));
      khat.push_back(diff::scale(v, static_cast<T>(s.instruction.size())));
      continue;
    }
    const Var<T> ces = SappOps<T>::prefix_ces(Prm<T>::teacher_logits(P, mcfg, mem, s.instruction), s.instruction, cfg.mode);
    if (cfg.variant == ProgressVariant::kReconstruct) {
      prefix_terms.push_back(diff::index(ces, ces.rows() - 1, 0));
    } else {
      prefix_terms.push_back(SappOps<T>::loss_prefix(ces, cfg.tau));
    }
    khat.push_back(SappOps<T>::expected_prefix(ces, cfg.tau));
  }

  BatchGraph<T> out;
  const Var<T> prefix = diff::mean(diff::concat_rows<T>(prefix_terms));
  const auto pairs = mono_pairs(items, cfg.pair_cap);
  const bool mono_active = cfg.use_mono && cfg.variant == ProgressVariant::kSemantic;
  const Var<T> mono = SappOps<T>::loss_mono(khat, pairs);
  out.stats.prefix = static_cast<double>(prefix.value().item());
  out.stats.mono = static_cast<double>(mono.value().item());
  out.stats.pairs = static_cast<int>(pairs.size());
  for (const auto& k : khat) out.stats.khat.push_back(static_cast<double>(k.value().item()));

  const bool prefix_active = cfg.use_prefix || cfg.variant != ProgressVariant::kSemantic;
  if (prefix_active && mono_active) {
    out.loss = diff::add(prefix, mono);
  } else if (prefix_active) {
    out.loss = prefix;
  } else if (mono_active) {
    out.loss = mono;
  } else {
    out.loss = g.scalar(T(0));
  }
  out.stats.total = static_cast<double>(out.loss.value().item());
  return out;
}

template <typename T>
SappBatchLoss step_grads(const diff::ParamStore& prm, const models::ModelConfig& mcfg, const SappConfig& cfg,
                         const std::vector<SappItem>& items, std::vector<Tensor<double>>* grads) {
  Graph<T> g;
  BoundParams<T> P(g, prm, grads != nullptr);
  auto b = build_batch(P, mcfg, cfg, items);
  if (grads) {
    if (g.requires_grad(b.loss)) {
      g.backward(b.loss);
      *grads = P.grads();
    } else {
      grads->clear();
      for (std::size_t i = 0; i < prm.size(); ++i) grads->emplace_back(prm[i].rows(), prm[i].cols());
    }
  }
  return b.stats;
}

}  // namespace

SappBatchLoss sapp_loss(const diff::ParamStore& prm, const models::ModelConfig& mcfg, const SappConfig& cfg,
                        const std::vector<SappItem>& items, std::vector<Tensor<double>>* grads) {
  return step_grads<double>(prm, mcfg, cfg, items, grads);
}

double expected_prefix(const diff::ParamStore& prm, const models::ModelConfig& mcfg, const SappConfig& cfg,
                       const data::StepSample& s) {
  Graph<float> g;
  BoundParams<float> P(g, prm, false);
  const auto mem = Prm<float>::encode(P, mcfg, s.history, s.current);
  if (cfg.variant == ProgressVariant::kNumeric) {
    return static_cast<double>(Prm<float>::numeric_progress(P, mem).value().item()) * static_cast<double>(s.instruction.size());
  }
  const auto ces = SappOps<float>::prefix_ces(Prm<float>::teacher_logits(P, mcfg, mem, s.instruction), s.instruction, cfg.mode);
  return static_cast<double>(SappOps<float>::expected_prefix(ces, cfg.tau).value().item());
}

namespace {

// Chunks of up to `chunk` steps from one episode, then batches of whole chunks.
std::vector<std::vector<SappItem>> epoch_batches(const data::Dataset& ds, const SappConfig& cfg, Rng& rng) {
  std::map<std::uint32_t, std::vector<const data::StepSample*>> by_episode;
  for (const auto& s : ds.samples) by_episode[s.episode].push_back(&s);
  std::vector<std::vector<const data::StepSample*>> chunks;
  for (auto& [ep, samples] : by_episode) {
    rng.shuffle(samples);
    for (std::size_t i = 0; i < samples.size(); i += static_cast<std::size_t>(cfg.chunk)) {
      const std::size_t end = std::min(samples.size(), i + static_cast<std::size_t>(cfg.chunk));
      chunks.emplace_back(samples.begin() + static_cast<std::ptrdiff_t>(i), samples.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  rng.shuffle(chunks);
  std::vector<std::vector<SappItem>> batches;
  for (std::size_t i = 0; i < chunks.size(); i += static_cast<std::size_t>(cfg.batch_episodes)) {
    std::vector<SappItem> batch;
    const std::size_t end = std::min(chunks.size(), i + static_cast<std::size_t>(cfg.batch_episodes));
    for (std::size_t c = i; c < end; ++c) {
      for (const auto* s : chunks[c]) batch.push_back({s, static_cast<int>(c - i)});
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace

SappResult train_sapp(const data::Dataset& ds, const models::ModelConfig& mcfg, const SappConfig& cfg, std::uint64_t seed) {
  if (ds.samples.empty()) throw TrainingError("stage 1 needs a non-empty dataset");
  SappResult res;
  res.prm = models::init_prm(mcfg, seed);
  diff::Adam opt(res.prm, diff::AdamConfig{cfg.lr});
  Rng rng(derive_seed(seed, 0x5a77, 1));
  int step = 0;
  const bool warm = cfg.variant == ProgressVariant::kSemantic && cfg.warmup_epochs > 0;
  SappConfig warm_cfg = cfg;
  warm_cfg.variant = ProgressVariant::kReconstruct;
  const int total_epochs = cfg.epochs + (warm ? cfg.warmup_epochs : 0);
  std::size_t chunks = 0;
  {
    std::map<std::uint32_t, std::size_t> per_episode;
    for (const auto& s : ds.samples) ++per_episode[s.episode];
    for (const auto& [ep, n] : per_episode) chunks += (n + static_cast<std::size_t>(cfg.chunk) - 1) / static_cast<std::size_t>(cfg.chunk);
  }
  const double total_steps = static_cast<double>(total_epochs) *
                             static_cast<double>((chunks + static_cast<std::size_t>(cfg.batch_episodes) - 1) / static_cast<std::size_t>(cfg.batch_episodes));
  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    const SappConfig& ec = warm && epoch < cfg.warmup_epochs ? warm_cfg : cfg;
    for (const auto& batch : epoch_batches(ds, ec, rng)) {
      if (cfg.cosine) {
        const double progress = std::min(1.0, static_cast<double>(step) / total_steps);
        opt.set_lr(cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + std::cos(M_PI * progress))));
      }
      std::vector<Tensor<double>> grads;
      const SappBatchLoss l = ec.double_precision ? step_grads<double>(res.prm, mcfg, ec, batch, &grads)
                                                  : step_grads<float>(res.prm, mcfg, ec, batch, &grads);
      if (!std::isfinite(l.total) || std::abs(l.total) > cfg.divergence_limit) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "stage 1 diverged at step %d (epoch %d): loss %.6g, prefix %.6g, mono %.6g", step,
                      epoch, l.total, l.prefix, l.mono);
        throw TrainingError(buf);
      }
      SappLogRecord r;
      r.step = step++;
      r.epoch = epoch;
      r.prefix = l.prefix;
      r.mono = l.mono;
      r.total = l.total;
      r.khat_min = *std::min_element(l.khat.begin(), l.khat.end());
      r.khat_max = *std::max_element(l.khat.begin(), l.khat.end());
      for (double k : l.khat) r.khat_mean += k / static_cast<double>(l.khat.size());
      r.grad_norm = opt.step(res.prm, grads);
      res.log.push_back(r);
    }
  }
  if (!res.prm.all_finite()) throw TrainingError("stage 1 produced non-finite parameters");
  return res;
}

std::string format_sapp_log(const std::vector<SappLogRecord>& log, const std::string& config_hash) {
  std::string out = "# config " + config_hash + "\nstep\tepoch\tL_prefix\tL_mono\tL_total\tkhat_mean\tkhat_min\tkhat_max\tgrad_norm\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d\t%d\t%.6f\t%.6f\t%.6f\t%.4f\t%.4f\t%.4f\t%.4f\n", r.step, r.epoch, r.prefix, r.mono,
                  r.total, r.khat_mean, r.khat_min, r.khat_max, r.grad_norm);
    out += buf;
  }
  return out;
}

}  // namespace pt::train
