#include "pt/util/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace pt {

namespace {

struct Default {
  const char* key;
  const char* value;
};

// Desk-scale defaults. Evaluation worlds come from a disjoint seed range.
constexpr Default kDefaults[] = {
    {"seed", "1"},
    {"precision", "float"},
    // world
    {"world.extent", "8"},
    {"world.cell", "0.25"},
    {"world.room_size", "4"},
    {"world.door_cells", "4"},
    {"world.extra_door_prob", "0.3"},
    {"world.landmarks", "8"},
    {"world.max_retries", "32"},
    // episodes and observations
    {"episode.min_legs", "1"},
    {"episode.max_legs", "2"},
    {"episode.success_radius", "1.0"},
    {"episode.leg_radius", "0.5"},
    {"episode.min_leg_m", "1.5"},
    {"episode.min_goal_m", "2.0"},
    {"episode.max_steps", "120"},
    {"obs.patch", "7"},
    {"obs.patch_cell", "0.5"},
    {"obs.history", "8"},
    // datagen
    {"data.worlds", "1000"},
    {"data.samples", "80000"},
    {"data.K", "3"},
    {"data.dagger_samples", "5000"},
    {"data.dagger_epsilon", "0.1"},
    {"data.dagger_greedy", "1"},
    // models
    {"model.d", "64"},
    {"model.heads", "4"},
    {"model.enc_blocks", "2"},
    {"model.dec_blocks", "1"},
    {"model.mlp", "128"},
    {"model.extra_decode", "8"},
    // stage 1
    {"sapp.tau", "1.0"},
    {"sapp.ce_mode", "sum"},
    {"sapp.use_prefix", "1"},
    {"sapp.use_mono", "1"},
    {"sapp.pair_cap", "10"},
    {"sapp.lr", "0.001"},
    {"sapp.lr_schedule", "constant"},
    {"sapp.epochs", "4"},
    {"sapp.warmup_epochs", "4"},
    {"sapp.batch_episodes", "8"},
    {"sapp.chunk", "4"},
    {"sapp.variant", "semantic"},
    // stage 2
    {"policy.lr", "0.001"},
    {"policy.epochs", "3"},
    {"policy.batch", "32"},
    {"policy.dagger", "1"},
    {"policy.dagger_epochs", "1"},
    {"policy.decode", "greedy"},
    {"policy.progress", "prm"},
    // stage 3
    {"ppcf.N", "4"},
    {"ppcf.eps", "0.28"},
    {"ppcf.kl", "0.0"},
    {"ppcf.beta", "0.1"},
    {"ppcf.temperature", "1.0"},
    {"ppcf.eps_std", "1e-6"},
    {"ppcf.steps", "1000"},
    {"ppcf.lr", "0.0001"},
    {"ppcf.batch_states", "4"},
    {"ppcf.use_len_reward", "1"},
    {"ppcf.use_fmt_reward", "1"},
    {"ppcf.coarse_match", "0"},
    // evaluation
    {"eval.execute_steps", "3"},
    {"eval.max_steps", "120"},
    {"eval.episodes", "100"},
    {"eval.seed_base", "1000000"},
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::uint64_t fnv1a(std::string_view data, std::uint64_t h) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

RunConfig::RunConfig() {
  for (const auto& d : kDefaults) values_[d.key] = d.value;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str());
}

RunConfig RunConfig::from_string(std::string_view text) {
  RunConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    c.set(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
  }
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  if (value.empty()) throw ConfigError("empty value for key: " + key);
  it->second = value;
}

void RunConfig::apply(const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + o);
    set(trim(std::string_view(o).substr(0, eq)), trim(std::string_view(o).substr(eq + 1)));
  }
}

const std::string& RunConfig::str(std::string_view key) const {
  auto it = values_.find(std::string(key));
  if (it == values_.end()) throw ConfigError("unknown config key: " + std::string(key));
  return it->second;
}

double RunConfig::num(std::string_view key) const {
  const std::string& s = str(key);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || !std::isfinite(v)) {
    throw ConfigError("key " + std::string(key) + " expects a number, got '" + s + "'");
  }
  return v;
}

long long RunConfig::integer(std::string_view key) const {
  const std::string& s = str(key);
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
    throw ConfigError("key " + std::string(key) + " expects an integer, got '" + s + "'");
  }
  return v;
}

std::uint64_t RunConfig::u64(std::string_view key) const {
  const std::string& s = str(key);
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
    throw ConfigError("key " + std::string(key) + " expects an unsigned integer, got '" + s + "'");
  }
  return v;
}

bool RunConfig::flag(std::string_view key) const {
  const std::string& s = str(key);
  if (s == "1" || s == "true") return true;
  if (s == "0" || s == "false") return false;
  throw ConfigError("key " + std::string(key) + " expects 0/1, got '" + s + "'");
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + '=' + v + '\n';
  return out;
}

}  // namespace pt
