#include "pt/data/dataset.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "pt/util/rng.hpp"

namespace pt::data {

using world::Action;
using world::Observation;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  if (s.empty()) return out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = s.find(sep, pos);
    out.push_back(s.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

template <typename Int>
Int parse_int(std::string_view s) {
  Int v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw DatasetError("bad integer field: " + std::string(s));
  return v;
}

double parse_num(std::string_view s) {
  const std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (end == tmp.c_str() || *end != '\0') throw DatasetError("bad number field: " + tmp);
  return v;
}

// Patch cells as letters 'a' + code, then ":prev:step".
void put_obs(std::string& out, const Observation& o) {
  for (auto c : o.patch) out += static_cast<char>('a' + c);
  out += ':' + std::to_string(o.prev_action) + ':' + num(o.step_scaled);
}

Observation get_obs(std::string_view s) {
  const auto p = split(s, ':');
  if (p.size() != 3) throw DatasetError("bad observation field");
  Observation o;
  for (char c : p[0]) {
    const int code = c - 'a';
    if (code < 0 || code >= world::kNumCellCodes) throw DatasetError("bad patch code");
    o.patch.push_back(static_cast<std::uint8_t>(code));
  }
  o.prev_action = parse_int<int>(p[1]);
  o.step_scaled = parse_num(p[2]);
  return o;
}

std::string sample_line(const StepSample& s) {
  std::string out = std::to_string(s.id) + '\t' + std::to_string(s.episode) + '\t' + std::to_string(s.t) + '\t' +
                    std::to_string(s.episode_steps) + '\t' + std::to_string(s.aligned_prefix) + '\t' +
                    (s.dagger ? "1" : "0") + '\t' + num(s.pose.x) + ',' + num(s.pose.y) + ',' + num(s.pose.heading) +
                    '\t' + std::to_string(s.leg) + '\t';
  for (std::size_t i = 0; i < s.instruction.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(s.instruction[i]);
  }
  out += '\t';
  for (std::size_t i = 0; i < s.expert.size(); ++i) {
    if (i) out += ',';
    out += world::action_name(s.expert[i]);
  }
  out += '\t';
  put_obs(out, s.current);
  out += '\t';
  for (std::size_t i = 0; i < s.history.size(); ++i) {
    if (i) out += ';';
    put_obs(out, s.history[i]);
  }
  return out;
}

StepSample parse_sample(std::string_view line) {
  const auto f = split(line, '\t');
  if (f.size() != 12) throw DatasetError("truncated or malformed record");
  StepSample s;
  s.id = parse_int<std::uint64_t>(f[0]);
  s.episode = parse_int<std::uint32_t>(f[1]);
  s.t = parse_int<int>(f[2]);
  s.episode_steps = parse_int<int>(f[3]);
  s.aligned_prefix = parse_int<int>(f[4]);
  s.dagger = parse_int<int>(f[5]) != 0;
  const auto p = split(f[6], ',');
  if (p.size() != 3) throw DatasetError("bad pose field");
  s.pose = {parse_num(p[0]), parse_num(p[1]), parse_num(p[2])};
  s.leg = parse_int<int>(f[7]);
  for (auto tok : split(f[8], ',')) s.instruction.push_back(parse_int<int>(tok));
  for (auto a : split(f[9], ',')) {
    const auto act = world::parse_action(a);
    if (!act) throw DatasetError("unknown action " + std::string(a));
    s.expert.push_back(*act);
  }
  s.current = get_obs(f[10]);
  for (auto o : split(f[11], ';')) s.history.push_back(get_obs(o));
  return s;
}

}  // namespace

Dataset build_sl_dataset(const std::vector<world::Episode>& episodes, int K, int history, std::uint64_t config_hash,
                         std::uint64_t seed) {
  if (K < 1) throw DatasetError("K must be >= 1");
  Dataset d;
  d.config_hash = config_hash;
  d.seed = seed;
  d.K = K;
  std::uint64_t id = 0;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    const int T = ep.steps();
    if (T == 0) throw DatasetError("episode " + std::to_string(e) + " has zero steps");
    for (int t = 0; t < T; ++t) {
      StepSample s;
      s.id = id++;
      s.episode = static_cast<std::uint32_t>(e);
      s.t = t;
      s.episode_steps = T;
      s.aligned_prefix = ep.aligned_prefix(t);
      s.pose = ep.poses[t];
      s.leg = std::min(ep.clause_at(t), static_cast<int>(ep.waypoints.size()) - 1);
      for (int h : world::history_indices(t, history)) s.history.push_back(ep.observations[h]);
      s.current = ep.observations[t];
      s.instruction = ep.instruction.tokens;
      for (int j = 0; j < K; ++j) s.expert.push_back(t + j < T ? ep.actions[t + j] : Action::kStop);
      d.samples.push_back(std::move(s));
    }
  }
  return d;
}

std::string dataset_to_string(const Dataset& d) {
  std::string out = "PTDS " + std::to_string(kDatasetVersion) + ' ' + hex64(d.config_hash) + ' ' +
                    std::to_string(d.seed) + ' ' + std::to_string(d.K) + ' ' + std::to_string(d.samples.size()) + '\n';
  for (const auto& s : d.samples) out += sample_line(s) + '\n';
  return out;
}

Dataset dataset_from_string(const std::string& text, std::optional<std::uint64_t> expected_hash) {
  std::istringstream in(text);
  std::string header;
  if (!std::getline(in, header) || header.rfind("PTDS ", 0) != 0) throw DatasetError("no header");
  const auto h = split(header, ' ');
  if (h.size() != 6) throw DatasetError("no header");
  if (parse_int<int>(h[1]) != kDatasetVersion) throw DatasetError("unsupported dataset version " + std::string(h[1]));
  Dataset d;
  std::uint64_t hash = 0;
  const auto r = std::from_chars(h[2].data(), h[2].data() + h[2].size(), hash, 16);
  if (r.ec != std::errc{} || r.ptr != h[2].data() + h[2].size()) throw DatasetError("bad config hash in header");
  d.config_hash = hash;
  if (expected_hash && *expected_hash != hash) {
    throw DatasetError("config hash mismatch: file " + hex64(hash) + ", expected " + hex64(*expected_hash));
  }
  d.seed = parse_int<std::uint64_t>(h[3]);
  d.K = parse_int<int>(h[4]);
  const auto count = parse_int<std::size_t>(h[5]);
  d.samples.reserve(count);
  std::string line;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line) || in.eof()) {
      throw DatasetError("truncated file: expected " + std::to_string(count) + " records, got " + std::to_string(i));
    }
    d.samples.push_back(parse_sample(line));
    if (static_cast<int>(d.samples.back().expert.size()) != d.K) throw DatasetError("record has wrong K");
  }
  if (std::getline(in, line) && !line.empty()) throw DatasetError("trailing data after records");
  return d;
}

void write_dataset(const std::string& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write dataset: " + path);
  const std::string s = dataset_to_string(d);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!out) throw DatasetError("write failed: " + path);
}

Dataset read_dataset(const std::string& path, std::optional<std::uint64_t> expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return dataset_from_string(ss.str(), expected_hash);
}

void aggregate(Dataset& base, const Dataset& extra) {
  if (base.K != extra.K) throw DatasetError("cannot aggregate datasets with different K");
  std::set<std::uint64_t> ids;
  for (const auto& s : base.samples) ids.insert(s.id);
  for (const auto& s : extra.samples)
    if (!ids.insert(s.id).second) throw DatasetError("duplicate record id " + std::to_string(s.id));
  base.samples.insert(base.samples.end(), extra.samples.begin(), extra.samples.end());
}

std::vector<Action> expert_labels(const world::Episode& ep, const world::Pose& pose, world::ExpertTracker tracker, int K) {
  std::vector<Action> out;
  world::Pose p = pose;
  for (int j = 0; j < K; ++j) {
    if (!out.empty() && out.back() == Action::kStop) {
      out.push_back(Action::kStop);
      continue;
    }
    const Action a = world::expert_action(ep, p, tracker);
    out.push_back(a);
    p = world::step(*ep.world, p, a).pose;
  }
  return out;
}

DaggerResult dagger_collect(const Actor& actor, const std::vector<world::Episode>& episodes, const DaggerOptions& opt) {
  DaggerResult res;
  res.data.K = opt.K;
  res.data.seed = opt.seed;
  res.data.config_hash = opt.config_hash;
  std::uint64_t id = opt.first_id;
  for (std::size_t e = 0; e < episodes.size() && res.data.samples.size() < opt.max_samples; ++e) {
    const auto& ep = episodes[e];
    const world::World& w = *ep.world;
    Rng rng(derive_seed(opt.seed, 0xda66e5, e));
    world::Pose pose = ep.start;
    world::ExpertTracker tracker;
    std::optional<Action> prev;
    std::vector<Observation> seen;
    bool stopped = false;
    ++res.rollouts;
    for (int t = 0; t < opt.max_steps && res.data.samples.size() < opt.max_samples; ++t) {
      seen.push_back(world::observe(w, pose, prev, t, ep.spec.obs));
      StepSample s;
      s.id = id++;
      s.episode = static_cast<std::uint32_t>(e);
      s.t = t;
      s.episode_steps = ep.steps();
      s.dagger = true;
      s.pose = pose;
      for (int h : world::history_indices(t, opt.history)) s.history.push_back(seen[static_cast<std::size_t>(h)]);
      s.current = seen.back();
      s.instruction = ep.instruction.tokens;
      const Action label = world::expert_action(ep, pose, tracker);
      s.leg = tracker.leg;
      s.expert = expert_labels(ep, pose, tracker, opt.K);
      s.expert[0] = label;
      s.aligned_prefix = label == Action::kStop ? ep.instruction.size()
                                                : ep.instruction.clauses[static_cast<std::size_t>(tracker.leg)].tok_end;
      Action chosen;
      if (rng.bernoulli(opt.epsilon)) {
        chosen = static_cast<Action>(rng.below(world::kNumActions));
      } else {
        const auto pred = actor(s);
        if (pred.empty()) throw DatasetError("actor returned no actions");
        chosen = pred.front();
      }
      res.data.samples.push_back(std::move(s));
      if (chosen == Action::kStop) {
        stopped = true;
        break;
      }
      pose = world::step(w, pose, chosen).pose;
      prev = chosen;
    }
    if (!stopped && res.data.samples.size() < opt.max_samples) ++res.truncated;
  }
  return res;
}

world::WorldSpec world_spec_from(const RunConfig& cfg, std::uint64_t world_seed) {
  world::WorldSpec s;
  s.seed = world_seed;
  s.extent = cfg.num("world.extent");
  s.cell = cfg.num("world.cell");
  s.room_size = cfg.num("world.room_size");
  s.door_cells = static_cast<int>(cfg.integer("world.door_cells"));
  s.extra_door_prob = cfg.num("world.extra_door_prob");
  s.landmark_count = static_cast<int>(cfg.integer("world.landmarks"));
  s.max_retries = static_cast<int>(cfg.integer("world.max_retries"));
  return s;
}

world::EpisodeSpec episode_spec_from(const RunConfig& cfg) {
  world::EpisodeSpec s;
  s.min_legs = static_cast<int>(cfg.integer("episode.min_legs"));
  s.max_legs = static_cast<int>(cfg.integer("episode.max_legs"));
  s.success_radius = cfg.num("episode.success_radius");
  s.leg_radius = cfg.num("episode.leg_radius");
  s.min_leg_m = cfg.num("episode.min_leg_m");
  s.min_goal_m = cfg.num("episode.min_goal_m");
  s.max_steps = static_cast<int>(cfg.integer("episode.max_steps"));
  s.obs.patch = static_cast<int>(cfg.integer("obs.patch"));
  s.obs.patch_cell = cfg.num("obs.patch_cell");
  s.obs.max_steps = static_cast<int>(cfg.integer("eval.max_steps"));
  return s;
}

std::uint64_t train_world_seed(std::uint64_t seed, int i) {
  return derive_seed(seed, 0x77, static_cast<std::uint64_t>(i)) & ~(1ULL << 63);
}

std::uint64_t eval_world_seed(std::uint64_t base, int i) {
  return derive_seed(base, 0xe7, static_cast<std::uint64_t>(i)) | (1ULL << 63);
}

std::vector<world::Episode> training_episodes(const RunConfig& cfg, std::uint64_t seed, std::size_t min_steps) {
  const int nworlds = static_cast<int>(cfg.integer("data.worlds"));
  if (nworlds < 1) throw DatasetError("data.worlds must be >= 1");
  std::vector<std::shared_ptr<const world::World>> worlds;
  for (int i = 0; i < nworlds; ++i) {
    worlds.push_back(std::make_shared<const world::World>(world::generate_world(world_spec_from(cfg, train_world_seed(seed, i)))));
  }
  const auto spec = episode_spec_from(cfg);
  std::vector<world::Episode> eps;
  std::size_t steps = 0;
  for (std::uint64_t k = 0; steps < min_steps; ++k) {
    const auto& w = worlds[k % worlds.size()];
    eps.push_back(world::generate_episode(w, derive_seed(seed, 0xe9, k), spec));
    steps += static_cast<std::size_t>(eps.back().steps());
  }
  return eps;
}

std::vector<world::Episode> eval_episodes(const RunConfig& cfg, int count) {
  const auto spec = episode_spec_from(cfg);
  const std::uint64_t base = cfg.u64("eval.seed_base");
  std::vector<world::Episode> eps;
  for (int i = 0; i < count; ++i) {
    auto w = std::make_shared<const world::World>(world::generate_world(world_spec_from(cfg, eval_world_seed(base, i))));
    eps.push_back(world::generate_episode(w, derive_seed(base, 0xe8, static_cast<std::uint64_t>(i)), spec));
  }
  return eps;
}

}  // namespace pt::data
