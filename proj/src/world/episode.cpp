#include "pt/world/episode.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <queue>

#include "pt/util/rng.hpp"

namespace pt::world {

namespace {

constexpr std::array<std::string_view, kFirstLandmarkToken> kWordNames{"GO",     "TO",  "THE",     "TURN", "LEFT",
                                                                         "RIGHT", "AROUND", "AND", "STOP_AT", ";"};
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kWallPenalty = 0.75;
constexpr int kLookahead = 4;

double angle_diff(double target, double heading) {
  double d = std::fmod(target - heading, 360.0);
  if (d <= -180.0) d += 360.0;
  if (d > 180.0) d -= 360.0;
  return d;
}

bool clear_around(const World& w, int cx, int cy) {
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx)
      if (!w.free(cx + dx, cy + dy)) return false;
  return true;
}

// Moves between 8-neighbors; diagonals may not cut a corner.
bool can_move(const World& w, int x, int y, int dx, int dy) {
  if (!w.free(x + dx, y + dy)) return false;
  if (dx != 0 && dy != 0) return w.free(x + dx, y) && w.free(x, y + dy);
  return true;
}

std::vector<double> distance_field(const World& w, int gx, int gy) {
  const int n = w.size();
  std::vector<double> dist(static_cast<std::size_t>(n * n), kInf);
  if (!w.free(gx, gy)) return dist;
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[gy * n + gx] = 0.0;
  pq.push({0.0, gy * n + gx});
  while (!pq.empty()) {
    const auto [d, id] = pq.top();
    pq.pop();
    if (d > dist[id]) continue;
    const int x = id % n, y = id / n;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        if ((dx == 0 && dy == 0) || !can_move(w, x, y, dx, dy)) continue;
        const int nx = x + dx, ny = y + dy;
        // Moving from (nx,ny) into (x,y); penalize cells that hug a wall.
        const double cost = ((dx != 0 && dy != 0) ? std::sqrt(2.0) : 1.0) + (clear_around(w, nx, ny) ? 0.0 : kWallPenalty);
        const int nid = ny * n + nx;
        if (d + cost < dist[nid]) {
          dist[nid] = d + cost;
          pq.push({dist[nid], nid});
        }
      }
    }
  }
  return dist;
}

struct Target {
  double x, y;
};

Target lookahead_target(const World& w, const std::vector<double>& field, const Pose& pose, const Waypoint& wp) {
  const int n = w.size();
  if (std::hypot(wp.x - pose.x, wp.y - pose.y) <= 1.5 && w.segment_free(pose.x, pose.y, wp.x, wp.y)) {
    return {wp.x, wp.y};
  }
  int x = w.cell_x(pose.x), y = w.cell_y(pose.y);
  std::vector<std::pair<int, int>> path;
  for (int i = 0; i < kLookahead; ++i) {
    double best = field[y * n + x];
    int bx = -1, by = -1;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if ((dx == 0 && dy == 0) || !can_move(w, x, y, dx, dy)) continue;
        const double f = field[(y + dy) * n + (x + dx)];
        if (f < best) {
          best = f;
          bx = x + dx;
          by = y + dy;
        }
      }
    if (bx < 0) break;
    x = bx;
    y = by;
    path.emplace_back(x, y);
  }
  if (path.empty()) return {wp.x, wp.y};
  for (auto it = path.rbegin(); it != path.rend(); ++it) {
    const double tx = w.center(it->first), ty = w.center(it->second);
    if (w.segment_free(pose.x, pose.y, tx, ty)) return {tx, ty};
  }
  return {w.center(path.front().first), w.center(path.front().second)};
}

Action turn_action(double err) {
  const double mag = std::clamp(std::round(std::abs(err) / 15.0) * 15.0, 15.0, 45.0);
  const int idx = static_cast<int>(mag / 15.0) - 1;
  return static_cast<Action>((err > 0 ? static_cast<int>(Action::kL15) : static_cast<int>(Action::kR15)) + idx);
}

Action greedy_step(const World& w, const std::vector<double>& field, const Pose& pose, const Waypoint& wp) {
  const Target t = lookahead_target(w, field, pose, wp);
  const double d = std::hypot(t.x - pose.x, t.y - pose.y);
  const double bearing = std::atan2(t.y - pose.y, t.x - pose.x) * 180.0 / 3.14159265358979323846;
  const double err = angle_diff(bearing, pose.heading);
  if (std::abs(err) > 7.5) return turn_action(err);
  for (Action a : {Action::kF75, Action::kF50, Action::kF25}) {
    const double s = forward_distance(a);
    if (s > d + 0.125) continue;
    if (!step(w, pose, a).collided) return a;
  }
  if (!step(w, pose, Action::kF25).collided) return Action::kF25;
  return err >= 0 ? Action::kL15 : Action::kR15;
}

int sign_turns(const std::vector<Action>& actions, int begin, int end) {
  double net = 0.0;
  for (int i = begin; i < end && is_turn(actions[i]); ++i) net += turn_degrees(actions[i]);
  return static_cast<int>(net);
}

}  // namespace

std::string_view token_name(int tok) {
  if (tok >= 0 && tok < kFirstLandmarkToken) return kWordNames[static_cast<std::size_t>(tok)];
  if (tok >= kFirstLandmarkToken && tok < kInstructionVocab) return landmark_name(static_cast<Landmark>(tok - kFirstLandmarkToken));
  return "?";
}

std::optional<int> parse_token(std::string_view s) {
  for (int i = 0; i < kInstructionVocab; ++i)
    if (token_name(i) == s) return i;
  return std::nullopt;
}

std::string tokens_to_string(const std::vector<int>& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += token_name(toks[i]);
  }
  return out;
}

int Episode::clause_at(int t) const {
  const auto& cl = instruction.clauses;
  for (std::size_t c = 0; c < cl.size(); ++c)
    if (t >= cl[c].step_begin && t < cl[c].step_end) return static_cast<int>(c);
  return t < 0 ? 0 : static_cast<int>(cl.size()) - 1;
}

int Episode::aligned_prefix(int t) const { return instruction.clauses[static_cast<std::size_t>(clause_at(t))].tok_end; }

std::shared_ptr<const ExpertFields> build_expert_fields(const World& w, const std::vector<Waypoint>& wps) {
  auto f = std::make_shared<ExpertFields>();
  f->n = w.size();
  for (const auto& wp : wps) f->dist.push_back(distance_field(w, w.cell_x(wp.x), w.cell_y(wp.y)));
  return f;
}

Action expert_action(const Episode& ep, const Pose& pose, ExpertTracker& tracker) {
  const World& w = *ep.world;
  const int last = static_cast<int>(ep.waypoints.size()) - 1;
  tracker.leg = std::clamp(tracker.leg, 0, last);
  while (tracker.leg < last) {
    const auto& wp = ep.waypoints[static_cast<std::size_t>(tracker.leg)];
    if (std::hypot(wp.x - pose.x, wp.y - pose.y) > ep.spec.leg_radius) break;
    ++tracker.leg;
  }
  if (tracker.leg == last && std::hypot(ep.goal_x() - pose.x, ep.goal_y() - pose.y) <= ep.spec.success_radius) {
    return Action::kStop;
  }
  if (!ep.fields) throw EpisodeError("episode has no expert fields");
  const auto& field = ep.fields->dist[static_cast<std::size_t>(tracker.leg)];
  const int cx = w.cell_x(pose.x), cy = w.cell_y(pose.y);
  if (!w.in_bounds(cx, cy) || !std::isfinite(field[cy * w.size() + cx])) {
    throw EpisodeError("waypoint unreachable from pose");
  }
  return greedy_step(w, field, pose, ep.waypoints[static_cast<std::size_t>(tracker.leg)]);
}

Action expert_action(const Episode& ep, const Pose& pose, int step_index) {
  const int legs = static_cast<int>(ep.waypoints.size());
  ExpertTracker tr{std::min(ep.clause_at(std::clamp(step_index, 0, ep.steps() - 1)), legs - 1)};
  return expert_action(ep, pose, tr);
}

std::vector<int> history_indices(int t, int H) {
  std::vector<int> out;
  if (t <= 0 || H <= 0) return out;
  if (t <= H) {
    for (int i = 0; i < t; ++i) out.push_back(i);
    return out;
  }
  if (H == 1) return {t - 1};
  for (int i = 0; i < H; ++i) out.push_back(static_cast<int>(std::lround(static_cast<double>(i) * (t - 1) / (H - 1))));
  return out;
}

void replay(Episode& ep) {
  const World& w = *ep.world;
  ep.poses.clear();
  ep.observations.clear();
  Pose p = ep.start;
  for (int t = 0; t < ep.steps(); ++t) {
    ep.poses.push_back(p);
    const std::optional<Action> prev = t > 0 ? std::optional<Action>(ep.actions[t - 1]) : std::nullopt;
    ep.observations.push_back(observe(w, p, prev, t, ep.spec.obs));
    p = step(w, p, ep.actions[t]).pose;
  }
}

Episode generate_episode(std::shared_ptr<const World> world, std::uint64_t seed, const EpisodeSpec& spec) {
  if (!world) throw EpisodeError("null world");
  const World& w = *world;
  if (!is_connected(w)) throw EpisodeError("world is not connected");
  const int avail = static_cast<int>(w.landmarks().size());
  if (spec.min_legs < 1 || spec.max_legs < spec.min_legs || spec.max_legs > 4) {
    throw EpisodeError("leg count must satisfy 1 <= min_legs <= max_legs <= 4");
  }
  if (avail < spec.min_legs) throw EpisodeError("world has too few landmarks");

  for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
    Rng rng(derive_seed(seed, 0xe915, static_cast<std::uint64_t>(attempt)));
    const int legs = rng.range(spec.min_legs, std::min(spec.max_legs, avail));

    // Start: a free cell with a free neighborhood.
    std::optional<Pose> start;
    for (int tries = 0; tries < 400 && !start; ++tries) {
      const int cx = rng.range(1, w.size() - 2), cy = rng.range(1, w.size() - 2);
      if (clear_around(w, cx, cy)) start = Pose{w.center(cx), w.center(cy), 15.0 * rng.range(0, 23)};
    }
    if (!start) continue;

    std::vector<LandmarkSite> sites = w.landmarks();
    rng.shuffle(sites);
    std::vector<Waypoint> wps;
    double px = start->x, py = start->y;
    std::vector<char> used(sites.size(), 0);
    for (int k = 0; k < legs; ++k) {
      bool found = false;
      for (std::size_t i = 0; i < sites.size() && !found; ++i) {
        if (used[i]) continue;
        const int dirs[4][2] = {{0, 1}, {1, 0}, {0, -1}, {-1, 0}};
        for (const auto& d : dirs) {
          const int ax = sites[i].cx + d[0], ay = sites[i].cy + d[1];
          const int bx = sites[i].cx + 2 * d[0], by = sites[i].cy + 2 * d[1];
          if (!w.free(ax, ay) || !w.free(bx, by)) continue;
          const double wx = w.center(bx), wy = w.center(by);
          if (std::hypot(wx - px, wy - py) < spec.min_leg_m) break;
          wps.push_back({sites[i].kind, wx, wy});
          used[i] = 1;
          px = wx;
          py = wy;
          found = true;
          break;
        }
      }
      if (!found) break;
    }
    if (static_cast<int>(wps.size()) != legs) continue;
    if (std::hypot(wps.back().x - start->x, wps.back().y - start->y) < spec.min_goal_m) continue;

    Episode ep;
    ep.world = world;
    ep.spec = spec;
    ep.seed = seed;
    ep.start = *start;
    ep.waypoints = wps;
    ep.fields = build_expert_fields(w, wps);

    // Expert rollout.
    std::vector<int> leg_at;
    Pose p = ep.start;
    ExpertTracker tr;
    bool ok = false;
    try {
      for (int t = 0; t < spec.max_steps; ++t) {
        const Action a = expert_action(ep, p, tr);
        ep.actions.push_back(a);
        leg_at.push_back(tr.leg);
        if (a == Action::kStop) {
          ok = true;
          break;
        }
        p = step(w, p, a).pose;
      }
    } catch (const EpisodeError&) {
      ok = false;
    }
    if (!ok) continue;

    // One movement clause per leg plus the stop clause.
    const int T = ep.steps();
    Instruction ins;
    bool spans_ok = true;
    for (int k = 0; k < legs; ++k) {
      int sb = -1, se = -1;
      for (int t = 0; t < T - 1; ++t) {
        if (leg_at[t] == k) {
          if (sb < 0) sb = t;
          se = t + 1;
        }
      }
      if (sb < 0 || (k == 0 && sb != 0) || (k > 0 && sb != ins.clauses.back().step_end)) {
        spans_ok = false;
        break;
      }
      ClauseSpan c;
      c.tok_begin = ins.size();
      c.step_begin = sb;
      c.step_end = se;
      const int net = sign_turns(ep.actions, sb, se);
      if (std::abs(net) >= 135) {
        ins.tokens.insert(ins.tokens.end(), {kTurn, kAround, kAnd});
      } else if (std::abs(net) >= 45) {
        ins.tokens.insert(ins.tokens.end(), {kTurn, net > 0 ? kLeft : kRight, kAnd});
      }
      ins.tokens.insert(ins.tokens.end(), {kGo, kTo, kThe, landmark_token(wps[k].landmark), kSep});
      c.tok_end = ins.size();
      ins.clauses.push_back(c);
    }
    if (!spans_ok || ins.clauses.back().step_end != T - 1) continue;
    ClauseSpan stop;
    stop.tok_begin = ins.size();
    ins.tokens.insert(ins.tokens.end(), {kStopAt, kThe, landmark_token(wps.back().landmark)});
    stop.tok_end = ins.size();
    stop.step_begin = T - 1;
    stop.step_end = T;
    ins.clauses.push_back(stop);
    ep.instruction = std::move(ins);

    replay(ep);
    // Summed the same way metrics measure a trajectory, so replaying the route scores SPL = 1 exactly.
    double len = 0.0;
    for (std::size_t i = 1; i < ep.poses.size(); ++i) len += std::hypot(ep.poses[i].x - ep.poses[i - 1].x, ep.poses[i].y - ep.poses[i - 1].y);
    ep.shortest_path_m = len;

    // The stop clause covers the final approach: from the first step after the
    // final leg starts at which the goal landmark is in view.
    auto& last_leg = ep.instruction.clauses[static_cast<std::size_t>(legs - 1)];
    auto& stop_span = ep.instruction.clauses.back();
    const std::uint8_t goal = landmark_code(wps.back().landmark);
    for (int t = last_leg.step_begin + 1; t < T - 1; ++t) {
      const auto& patch = ep.observations[static_cast<std::size_t>(t)].patch;
      if (std::find(patch.begin(), patch.end(), goal) != patch.end()) {
        last_leg.step_end = t;
        stop_span.step_begin = t;
        break;
      }
    }
    return ep;
  }
  throw EpisodeError("no route found for episode seed " + std::to_string(seed));
}

}  // namespace pt::world
