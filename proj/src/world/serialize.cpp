#include <charconv>
#include <cstdio>
#include <map>

#include "pt/world/episode.hpp"

namespace pt::world {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(std::string_view s) {
  const std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (end == tmp.c_str() || *end != '\0') throw EpisodeError("bad number: " + tmp);
  return v;
}

long long to_int(std::string_view s) {
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw EpisodeError("bad integer: " + std::string(s));
  return v;
}

std::uint64_t to_u64(std::string_view s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw EpisodeError("bad integer: " + std::string(s));
  return v;
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

std::map<std::string, std::string_view, std::less<>> fields_of(std::string_view line, std::string_view tag) {
  while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.remove_suffix(1);
  const auto parts = split(line, '\t');
  if (parts.empty() || parts[0] != tag) throw EpisodeError("expected record tag " + std::string(tag));
  std::map<std::string, std::string_view, std::less<>> m;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq == std::string_view::npos) throw EpisodeError("malformed field: " + std::string(parts[i]));
    m.emplace(std::string(parts[i].substr(0, eq)), parts[i].substr(eq + 1));
  }
  return m;
}

std::string_view need(const std::map<std::string, std::string_view, std::less<>>& m, std::string_view key) {
  const auto it = m.find(key);
  if (it == m.end()) throw EpisodeError("missing field: " + std::string(key));
  return it->second;
}

std::string world_fields(const World& w) {
  const WorldSpec& s = w.spec();
  std::string out = "world_seed=" + std::to_string(s.seed) + "\textent=" + num(s.extent) + "\tcell=" + num(s.cell) +
                    "\troom_size=" + num(s.room_size) + "\tdoor_cells=" + std::to_string(s.door_cells) +
                    "\textra_door_prob=" + num(s.extra_door_prob) + "\tlandmark_count=" + std::to_string(s.landmark_count) +
                    "\tmax_retries=" + std::to_string(s.max_retries) + "\tn=" + std::to_string(w.size()) + "\tgrid=";
  const auto& g = w.grid();
  for (std::size_t i = 0; i < g.size();) {
    std::size_t j = i;
    while (j < g.size() && g[j] == g[i]) ++j;
    if (i) out += ',';
    out += std::to_string(g[i]) + 'x' + std::to_string(j - i);
    i = j;
  }
  out += "\tlandmarks=";
  for (std::size_t i = 0; i < w.landmarks().size(); ++i) {
    const auto& l = w.landmarks()[i];
    if (i) out += ',';
    out += std::string(landmark_name(l.kind)) + ':' + std::to_string(l.cx) + ':' + std::to_string(l.cy);
  }
  return out;
}

std::optional<Landmark> parse_landmark(std::string_view s) {
  for (int k = 0; k < kLandmarkKinds; ++k)
    if (landmark_name(static_cast<Landmark>(k)) == s) return static_cast<Landmark>(k);
  return std::nullopt;
}

World world_from(const std::map<std::string, std::string_view, std::less<>>& m) {
  WorldSpec s;
  s.seed = to_u64(need(m, "world_seed"));
  s.extent = to_double(need(m, "extent"));
  s.cell = to_double(need(m, "cell"));
  s.room_size = to_double(need(m, "room_size"));
  s.door_cells = static_cast<int>(to_int(need(m, "door_cells")));
  s.extra_door_prob = to_double(need(m, "extra_door_prob"));
  s.landmark_count = static_cast<int>(to_int(need(m, "landmark_count")));
  s.max_retries = static_cast<int>(to_int(need(m, "max_retries")));
  const int n = static_cast<int>(to_int(need(m, "n")));
  if (n <= 0) throw EpisodeError("bad grid size");
  std::vector<std::uint8_t> grid;
  for (auto run : split(need(m, "grid"), ',')) {
    const auto x = run.find('x');
    if (x == std::string_view::npos) throw EpisodeError("bad grid run");
    const auto code = to_int(run.substr(0, x));
    const auto count = to_int(run.substr(x + 1));
    if (code < 0 || code >= kNumCellCodes || count <= 0) throw EpisodeError("bad grid run");
    grid.insert(grid.end(), static_cast<std::size_t>(count), static_cast<std::uint8_t>(code));
  }
  if (grid.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(n)) throw EpisodeError("grid length mismatch");
  std::vector<LandmarkSite> lms;
  for (auto item : split(need(m, "landmarks"), ',')) {
    const auto p = split(item, ':');
    if (p.size() != 3) throw EpisodeError("bad landmark");
    const auto kind = parse_landmark(p[0]);
    if (!kind) throw EpisodeError("unknown landmark " + std::string(p[0]));
    lms.push_back({*kind, static_cast<int>(to_int(p[1])), static_cast<int>(to_int(p[2]))});
  }
  return World(s, n, std::move(grid), std::move(lms));
}

}  // namespace

std::string serialize_world(const World& w) { return "WORLD\t" + world_fields(w); }

World deserialize_world(std::string_view line) { return world_from(fields_of(line, "WORLD")); }

std::string serialize_episode(const Episode& ep) {
  const EpisodeSpec& s = ep.spec;
  std::string out = "EPISODE\tseed=" + std::to_string(ep.seed) + '\t' + world_fields(*ep.world);
  out += "\tmin_legs=" + std::to_string(s.min_legs) + "\tmax_legs=" + std::to_string(s.max_legs) +
         "\tsuccess_radius=" + num(s.success_radius) + "\tleg_radius=" + num(s.leg_radius) +
         "\tmin_leg_m=" + num(s.min_leg_m) + "\tmin_goal_m=" + num(s.min_goal_m) + "\tmax_steps=" + std::to_string(s.max_steps) +
         "\tepisode_retries=" + std::to_string(s.max_retries) + "\tpatch=" + std::to_string(s.obs.patch) +
         "\tpatch_cell=" + num(s.obs.patch_cell) + "\tobs_max_steps=" + std::to_string(s.obs.max_steps);
  out += "\tstart=" + num(ep.start.x) + ',' + num(ep.start.y) + ',' + num(ep.start.heading);
  out += "\twaypoints=";
  for (std::size_t i = 0; i < ep.waypoints.size(); ++i) {
    const auto& w = ep.waypoints[i];
    if (i) out += ',';
    out += std::string(landmark_name(w.landmark)) + ':' + num(w.x) + ':' + num(w.y);
  }
  out += "\ttokens=" + tokens_to_string(ep.instruction.tokens);
  out += "\tclauses=";
  for (std::size_t i = 0; i < ep.instruction.clauses.size(); ++i) {
    const auto& c = ep.instruction.clauses[i];
    if (i) out += ',';
    out += std::to_string(c.tok_begin) + ':' + std::to_string(c.tok_end) + ':' + std::to_string(c.step_begin) + ':' +
           std::to_string(c.step_end);
  }
  out += "\tactions=";
  for (std::size_t i = 0; i < ep.actions.size(); ++i) {
    if (i) out += ',';
    out += action_name(ep.actions[i]);
  }
  out += "\tshortest=" + num(ep.shortest_path_m);
  return out;
}

Episode deserialize_episode(std::string_view line) {
  const auto m = fields_of(line, "EPISODE");
  Episode ep;
  ep.seed = to_u64(need(m, "seed"));
  ep.world = std::make_shared<const World>(world_from(m));
  EpisodeSpec& s = ep.spec;
  s.min_legs = static_cast<int>(to_int(need(m, "min_legs")));
  s.max_legs = static_cast<int>(to_int(need(m, "max_legs")));
  s.success_radius = to_double(need(m, "success_radius"));
  s.leg_radius = to_double(need(m, "leg_radius"));
  s.min_leg_m = to_double(need(m, "min_leg_m"));
  s.min_goal_m = to_double(need(m, "min_goal_m"));
  s.max_steps = static_cast<int>(to_int(need(m, "max_steps")));
  s.max_retries = static_cast<int>(to_int(need(m, "episode_retries")));
  s.obs.patch = static_cast<int>(to_int(need(m, "patch")));
  s.obs.patch_cell = to_double(need(m, "patch_cell"));
  s.obs.max_steps = static_cast<int>(to_int(need(m, "obs_max_steps")));
  const auto st = split(need(m, "start"), ',');
  if (st.size() != 3) throw EpisodeError("bad start pose");
  ep.start = {to_double(st[0]), to_double(st[1]), to_double(st[2])};
  for (auto item : split(need(m, "waypoints"), ',')) {
    const auto p = split(item, ':');
    if (p.size() != 3) throw EpisodeError("bad waypoint");
    const auto kind = parse_landmark(p[0]);
    if (!kind) throw EpisodeError("unknown landmark " + std::string(p[0]));
    ep.waypoints.push_back({*kind, to_double(p[1]), to_double(p[2])});
  }
  if (ep.waypoints.empty()) throw EpisodeError("episode has no waypoints");
  for (auto t : split(need(m, "tokens"), ' ')) {
    const auto tok = parse_token(t);
    if (!tok) throw EpisodeError("unknown token " + std::string(t));
    ep.instruction.tokens.push_back(*tok);
  }
  for (auto item : split(need(m, "clauses"), ',')) {
    const auto p = split(item, ':');
    if (p.size() != 4) throw EpisodeError("bad clause span");
    ep.instruction.clauses.push_back({static_cast<int>(to_int(p[0])), static_cast<int>(to_int(p[1])),
                                      static_cast<int>(to_int(p[2])), static_cast<int>(to_int(p[3]))});
  }
  for (auto a : split(need(m, "actions"), ',')) {
    const auto act = parse_action(a);
    if (!act) throw EpisodeError("unknown action " + std::string(a));
    ep.actions.push_back(*act);
  }
  if (ep.actions.empty() || ep.instruction.clauses.empty()) throw EpisodeError("empty episode");
  ep.shortest_path_m = to_double(need(m, "shortest"));
  ep.fields = build_expert_fields(*ep.world, ep.waypoints);
  replay(ep);
  return ep;
}

}  // namespace pt::world
