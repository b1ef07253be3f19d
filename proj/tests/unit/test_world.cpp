#include <algorithm>
#include <cmath>
#include <queue>

#include "doctest.h"
#include "pt/util/rng.hpp"
#include "pt/world/episode.hpp"

using namespace pt::world;

namespace {

World open_world(int n, bool border) {
  WorldSpec s;
  s.extent = n * s.cell;
  std::vector<std::uint8_t> g(static_cast<std::size_t>(n * n), kFree);
  if (border) {
    for (int i = 0; i < n; ++i) g[i] = g[(n - 1) * n + i] = g[i * n] = g[i * n + n - 1] = kWall;
  }
  return World(s, n, g, {});
}

// Independent BFS over free cells, 4-connected.
bool bfs_connected(const World& w) {
  const int n = w.size();
  int total = 0, first = -1;
  for (int i = 0; i < n * n; ++i)
    if (w.grid()[i] == kFree) {
      ++total;
      if (first < 0) first = i;
    }
  std::vector<char> seen(static_cast<std::size_t>(n * n), 0);
  std::queue<int> q;
  q.push(first);
  seen[first] = 1;
  int count = 0;
  while (!q.empty()) {
    const int c = q.front();
    q.pop();
    ++count;
    const int x = c % n, y = c / n;
    for (auto [dx, dy] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
      if (w.free(x + dx, y + dy) && !seen[(y + dy) * n + x + dx]) {
        seen[(y + dy) * n + x + dx] = 1;
        q.push((y + dy) * n + x + dx);
      }
    }
  }
  return count == total;
}

std::shared_ptr<const World> make_world(std::uint64_t seed, double extent = 12.0) {
  WorldSpec s;
  s.seed = seed;
  s.extent = extent;
  return std::make_shared<const World>(generate_world(s));
}

}  // namespace

TEST_CASE("generate_world is deterministic and connected") {
  WorldSpec s;
  s.seed = 1;
  const World a = generate_world(s);
  const World b = generate_world(s);
  CHECK(a == b);
  CHECK(bfs_connected(a));
  CHECK(is_connected(a));
  for (std::uint64_t seed = 2; seed < 30; ++seed) {
    s.seed = seed;
    const World w = generate_world(s);
    CHECK(bfs_connected(w));
    CHECK(w.landmarks().size() == 8u);
    for (const auto& l : w.landmarks()) {
      CHECK(w.code(l.cx, l.cy) == landmark_code(l.kind));
      const bool adj = w.free(l.cx + 1, l.cy) || w.free(l.cx - 1, l.cy) || w.free(l.cx, l.cy + 1) || w.free(l.cx, l.cy - 1);
      CHECK(adj);
    }
  }
  s.seed = 2;
  CHECK_FALSE(generate_world(s) == a);
}

TEST_CASE("generate_world rejects tiny extents") {
  WorldSpec s;
  s.extent = 4.0;
  CHECK_THROWS_WITH_AS(generate_world(s), "extent too small", WorldGenError);
}

TEST_CASE("step: translation, rotation, collision, stop") {
  const World open = open_world(40, false);
  auto r = step(open, {0, 0, 0}, Action::kF50);
  CHECK(r.pose == Pose{0.5, 0.0, 0.0});
  CHECK_FALSE(r.collided);
  CHECK(step(open, {1, 1, 90}, Action::kL30).pose.heading == 120.0);
  CHECK(step(open, {1, 1, 0}, Action::kR15).pose.heading == 345.0);
  auto s = step(open, {1, 1, 30}, Action::kStop);
  CHECK(s.terminal);
  CHECK(s.pose == Pose{1, 1, 30});

  // Wall column starting 0.3 m ahead.
  WorldSpec ws;
  std::vector<std::uint8_t> g(20 * 20, kFree);
  for (int y = 0; y < 20; ++y) g[y * 20 + 5] = kWall;
  const World walled(ws, 20, g, {});
  const Pose p{0.95, 1.375, 0.0};
  auto c = step(walled, p, Action::kF75);
  CHECK(c.collided);
  CHECK(c.pose == p);
  CHECK_FALSE(step(walled, p, Action::kF25).collided);
}

TEST_CASE("action names round trip") {
  for (int i = 0; i < kNumActions; ++i) {
    const auto a = static_cast<Action>(i);
    CHECK(parse_action(action_name(a)) == a);
  }
  CHECK_FALSE(parse_action("F100").has_value());
}

TEST_CASE("observe: landmark ahead renders at center-front") {
  WorldSpec ws;
  std::vector<std::uint8_t> g(20 * 20, kFree);
  g[5 * 20 + 7] = landmark_code(Landmark::kDoor);
  const World w(ws, 20, g, {{Landmark::kDoor, 7, 5}});
  ObsConfig cfg;
  const auto o = observe(w, {w.center(5), w.center(5), 0.0}, std::nullopt, 0, cfg);
  const int mid = cfg.patch / 2;
  CHECK(o.patch[(mid - 1) * cfg.patch + mid] == landmark_code(Landmark::kDoor));
  CHECK(o.prev_action == kNoAction);
  CHECK(o.patch.size() == 49u);
}

TEST_CASE("observe: quarter turn rotates the patch") {
  const auto w = make_world(3);
  ObsConfig cfg;
  const int p = cfg.patch, mid = p / 2;
  pt::Rng rng(7);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int cx = rng.range(1, w->size() - 2), cy = rng.range(1, w->size() - 2);
    if (!w->free(cx, cy)) continue;
    for (double h : {0.0, 90.0, 180.0, 270.0}) {
      const auto a = observe(*w, {w->center(cx), w->center(cy), h}, std::nullopt, 3, cfg);
      const auto b = observe(*w, {w->center(cx), w->center(cy), normalize_heading(h + 90.0)}, std::nullopt, 3, cfg);
      for (int r = 0; r < p; ++r)
        for (int c = 0; c < p; ++c) REQUIRE(b.patch[r * p + c] == a.patch[(2 * mid - c) * p + r]);
    }
    ++checked;
    const Pose q{w->center(cx), w->center(cy), 45.0};
    CHECK(observe(*w, q, Action::kL15, 4, cfg) == observe(*w, q, Action::kL15, 4, cfg));
  }
  CHECK(checked > 50);
}

TEST_CASE("collision safety under random actions") {
  const auto w = make_world(4);
  pt::Rng rng(11);
  for (int run = 0; run < 20; ++run) {
    Pose p;
    do {
      p = {rng.uniform(0, 12), rng.uniform(0, 12), 15.0 * rng.range(0, 23)};
    } while (!w->free_point(p.x, p.y));
    for (int t = 0; t < 300; ++t) {
      p = step(*w, p, static_cast<Action>(rng.below(9))).pose;
      REQUIRE(w->free_point(p.x, p.y));
    }
  }
}

TEST_CASE("history indices") {
  CHECK(history_indices(0, 8).empty());
  CHECK(history_indices(3, 8) == std::vector<int>{0, 1, 2});
  CHECK(history_indices(8, 8) == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
  const auto h = history_indices(30, 8);
  CHECK(h.size() == 8u);
  CHECK(h.front() == 0);
  CHECK(h.back() == 29);
  for (std::size_t i = 1; i < h.size(); ++i) CHECK(h[i] > h[i - 1]);
}

TEST_CASE("episodes: structure, alignment and expert success") {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    const auto w = make_world(seed % 5 + 1);
    const Episode ep = generate_episode(w, seed);
    const int T = ep.steps();
    CAPTURE(seed);
    REQUIRE(T >= 2);
    CHECK(ep.actions.back() == Action::kStop);
    CHECK(static_cast<int>(ep.observations.size()) == T);
    const auto& cl = ep.instruction.clauses;
    CHECK(cl.size() >= 2u);
    CHECK(cl.size() <= 5u);
    CHECK(cl.size() == ep.waypoints.size() + 1);
    // Clauses tile both the tokens and [0, T).
    CHECK(cl.front().tok_begin == 0);
    CHECK(cl.front().step_begin == 0);
    CHECK(cl.back().tok_end == ep.instruction.size());
    CHECK(cl.back().step_end == T);
    for (std::size_t c = 1; c < cl.size(); ++c) {
      CHECK(cl[c].tok_begin == cl[c - 1].tok_end);
      CHECK(cl[c].step_begin == cl[c - 1].step_end);
      CHECK(cl[c].step_end > cl[c].step_begin);
    }
    int prev = 0;
    for (int t = 0; t < T; ++t) {
      const int k = ep.aligned_prefix(t);
      CHECK(k >= prev);
      CHECK(k == cl[static_cast<std::size_t>(ep.clause_at(t))].tok_end);
      prev = k;
    }
    // Simulate the stored actions.
    Pose p = ep.start;
    for (int t = 0; t < T; ++t) {
      REQUIRE(p == ep.poses[t]);
      const std::optional<Action> pa = t ? std::optional<Action>(ep.actions[t - 1]) : std::nullopt;
      CHECK(observe(*w, p, pa, t, ep.spec.obs) == ep.observations[t]);
      const auto r = step(*w, p, ep.actions[t]);
      CHECK_FALSE(r.collided);
      p = r.pose;
    }
    CHECK(std::hypot(p.x - ep.goal_x(), p.y - ep.goal_y()) <= ep.spec.success_radius);
    CHECK(ep.shortest_path_m > 0.0);
  }
}

TEST_CASE("two-leg route gives two movement clauses and a stop clause") {
  EpisodeSpec spec;
  spec.min_legs = spec.max_legs = 2;
  const Episode ep = generate_episode(make_world(2), 9, spec);
  REQUIRE(ep.instruction.clauses.size() == 3u);
  const auto& stop = ep.instruction.clauses.back();
  CHECK(ep.instruction.tokens[stop.tok_begin] == kStopAt);
  for (int c = 0; c < 2; ++c) CHECK(ep.instruction.tokens[ep.instruction.clauses[c].tok_end - 1] == kSep);
}

TEST_CASE("goal distance floor and the stop clause span") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    EpisodeSpec spec;
    const Episode ep = generate_episode(make_world(seed), seed * 7, spec);
    CHECK(std::hypot(ep.goal_x() - ep.start.x, ep.goal_y() - ep.start.y) >= spec.min_goal_m);
    double len = 0.0;
    for (int t = 1; t < ep.steps(); ++t) len += std::hypot(ep.poses[t].x - ep.poses[t - 1].x, ep.poses[t].y - ep.poses[t - 1].y);
    CHECK(ep.shortest_path_m == len);

    // The stop clause starts at the first final-leg step with the goal in view, or at the STOP step.
    const auto& cl = ep.instruction.clauses;
    const auto& last = cl[cl.size() - 2];
    const auto& stop = cl.back();
    CHECK(stop.step_end == ep.steps());
    CHECK(last.step_end == stop.step_begin);
    const auto goal = landmark_code(ep.waypoints.back().landmark);
    auto in_view = [&](int t) {
      const auto& patch = ep.observations[static_cast<std::size_t>(t)].patch;
      return std::find(patch.begin(), patch.end(), goal) != patch.end();
    };
    for (int t = last.step_begin + 1; t < stop.step_begin; ++t) CHECK_FALSE(in_view(t));
    if (stop.step_begin < ep.steps() - 1) CHECK(in_view(stop.step_begin));
  }
  EpisodeSpec far;
  far.min_goal_m = 1e6;
  CHECK_THROWS_AS(generate_episode(make_world(1), 3, far), EpisodeError);
}

TEST_CASE("expert: replay consistency, terminal rule, reversed heading") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Episode ep = generate_episode(make_world(seed), seed * 13);
    for (int t = 0; t < ep.steps(); ++t) {
      CHECK(expert_action(ep, ep.poses[t], t) == ep.actions[t]);
      if (is_forward(ep.actions[t])) {
        Pose back = ep.poses[t];
        back.heading = normalize_heading(back.heading + 180.0);
        const Action a = expert_action(ep, back, t);
        CHECK(is_turn(a));
      }
    }
    ExpertTracker tr{static_cast<int>(ep.waypoints.size()) - 1};
    const Pose near{ep.goal_x() + 0.3, ep.goal_y(), 0.0};
    if (ep.world->free_point(near.x, near.y)) CHECK(expert_action(ep, near, tr) == Action::kStop);
  }
}

TEST_CASE("serialization: deterministic and round trips") {
  const auto w = make_world(6);
  const Episode a = generate_episode(w, 42);
  const Episode b = generate_episode(make_world(6), 42);
  CHECK(serialize_episode(a) == serialize_episode(b));
  const Episode c = deserialize_episode(serialize_episode(a));
  CHECK(serialize_episode(c) == serialize_episode(a));
  CHECK(c.observations == a.observations);
  CHECK(c.poses == a.poses);
  CHECK(*c.world == *w);
  CHECK(deserialize_world(serialize_world(*w)) == *w);
  CHECK_THROWS_AS(deserialize_episode("WORLD\tn=3"), EpisodeError);
  CHECK_THROWS_AS(deserialize_world("WORLD\tworld_seed=1"), EpisodeError);
}
