#include "pt/world/world.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <queue>

#include "pt/util/rng.hpp"

namespace pt::world {

namespace {

constexpr std::array<std::string_view, kLandmarkKinds> kLandmarkNames{
    "DOOR", "TABLE", "CORRIDOR", "STAIRS", "PLANT", "WINDOW", "SOFA", "LAMP", "SHELF", "BED", "SINK", "PAINTING"};

constexpr std::array<std::string_view, kNumActions> kActionNames{"F25", "F50", "F75", "L15", "L30",
                                                                  "L45", "R15", "R30", "R45", "STOP"};

// cos/sin of a heading in degrees, exact on the axes.
std::pair<double, double> unit(double deg) {
  const double h = normalize_heading(deg);
  if (h == 0.0) return {1.0, 0.0};
  if (h == 90.0) return {0.0, 1.0};
  if (h == 180.0) return {-1.0, 0.0};
  if (h == 270.0) return {0.0, -1.0};
  const double r = h * 3.14159265358979323846 / 180.0;
  return {std::cos(r), std::sin(r)};
}

struct Layout {
  int n = 0;
  std::vector<std::uint8_t> grid;
  std::vector<char> doorway;  // cells opened in an interior wall

  std::uint8_t& at(int x, int y) { return grid[y * n + x]; }
};

bool flood_connected(int n, const std::vector<std::uint8_t>& grid) {
  int total = 0;
  int start = -1;
  for (int i = 0; i < n * n; ++i) {
    if (grid[i] == kFree) {
      ++total;
      if (start < 0) start = i;
    }
  }
  if (total == 0) return false;
  std::vector<char> seen(grid.size(), 0);
  std::queue<int> q;
  q.push(start);
  seen[start] = 1;
  int reached = 0;
  while (!q.empty()) {
    const int c = q.front();
    q.pop();
    ++reached;
    const int x = c % n, y = c / n;
    const int nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (const auto& d : nb) {
      const int nx = x + d[0], ny = y + d[1];
      if (nx < 0 || ny < 0 || nx >= n || ny >= n) continue;
      const int id = ny * n + nx;
      if (!seen[id] && grid[id] == kFree) {
        seen[id] = 1;
        q.push(id);
      }
    }
  }
  return reached == total;
}

Layout build_rooms(const WorldSpec& spec, Rng& rng) {
  Layout L;
  L.n = static_cast<int>(std::lround(spec.extent / spec.cell));
  const int n = L.n;
  L.grid.assign(static_cast<std::size_t>(n * n), kFree);
  L.doorway.assign(static_cast<std::size_t>(n * n), 0);
  for (int i = 0; i < n; ++i) {
    L.at(i, 0) = L.at(i, n - 1) = L.at(0, i) = L.at(n - 1, i) = kWall;
  }
  const int rooms = std::max(1, static_cast<int>(std::lround(spec.extent / spec.room_size)));
  std::vector<int> b(rooms + 1);
  for (int k = 0; k <= rooms; ++k) b[k] = std::min(n - 1, static_cast<int>(std::lround(double(k) * (n - 1) / rooms)));
  for (int k = 1; k < rooms; ++k) {
    for (int i = 0; i < n; ++i) {
      L.at(b[k], i) = kWall;
      L.at(i, b[k]) = kWall;
    }
  }

  // Spanning tree over rooms (randomized DFS) plus a few extra doors.
  struct Edge {
    int a, b;
    bool vertical_wall;  // true: rooms side by side in x
  };
  std::vector<Edge> edges;
  auto rid = [rooms](int i, int j) { return j * rooms + i; };
  for (int j = 0; j < rooms; ++j)
    for (int i = 0; i < rooms; ++i) {
      if (i + 1 < rooms) edges.push_back({rid(i, j), rid(i + 1, j), true});
      if (j + 1 < rooms) edges.push_back({rid(i, j), rid(i, j + 1), false});
    }
  rng.shuffle(edges);
  std::vector<int> parent(static_cast<std::size_t>(rooms * rooms));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&parent](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  auto open_door = [&](const Edge& e) {
    const int ai = e.a % rooms, aj = e.a / rooms;
    if (e.vertical_wall) {
      const int x = b[ai + 1];
      const int lo = b[aj] + 2, hi = b[aj + 1] - 2 - spec.door_cells;
      const int y0 = hi >= lo ? rng.range(lo, hi) : b[aj] + 1;
      for (int y = y0; y < std::min(y0 + spec.door_cells, b[aj + 1]); ++y) {
        L.at(x, y) = kFree;
        L.doorway[y * n + x] = 1;
      }
    } else {
      const int y = b[aj + 1];
      const int lo = b[ai] + 2, hi = b[ai + 1] - 2 - spec.door_cells;
      const int x0 = hi >= lo ? rng.range(lo, hi) : b[ai] + 1;
      for (int x = x0; x < std::min(x0 + spec.door_cells, b[ai + 1]); ++x) {
        L.at(x, y) = kFree;
        L.doorway[y * n + x] = 1;
      }
    }
  };
  for (const auto& e : edges) {
    const int ra = find(e.a), rb = find(e.b);
    if (ra != rb) {
      parent[ra] = rb;
      open_door(e);
    } else if (rng.bernoulli(spec.extra_door_prob)) {
      open_door(e);
    }
  }
  return L;
}

bool near_doorway(const Layout& L, int x, int y, int radius) {
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const int nx = x + dx, ny = y + dy;
      if (nx >= 0 && ny >= 0 && nx < L.n && ny < L.n && L.doorway[ny * L.n + nx]) return true;
    }
  return false;
}

}  // namespace

std::string_view landmark_name(Landmark l) { return kLandmarkNames[static_cast<std::size_t>(l)]; }

World::World(WorldSpec spec, int n, std::vector<std::uint8_t> grid, std::vector<LandmarkSite> landmarks)
    : spec_(spec), n_(n), grid_(std::move(grid)), landmarks_(std::move(landmarks)) {
  if (grid_.size() != static_cast<std::size_t>(n_) * static_cast<std::size_t>(n_)) {
    throw WorldGenError("grid size does not match n*n");
  }
}

int World::cell_x(double x) const { return static_cast<int>(std::floor(x / spec_.cell)); }
int World::cell_y(double y) const { return static_cast<int>(std::floor(y / spec_.cell)); }

bool World::segment_free(double x0, double y0, double x1, double y1) const {
  const double len = std::hypot(x1 - x0, y1 - y0);
  const int samples = static_cast<int>(std::ceil(len / (spec_.cell / 8.0))) + 1;
  for (int i = 0; i <= samples; ++i) {
    const double t = static_cast<double>(i) / samples;
    if (!free_point(x0 + t * (x1 - x0), y0 + t * (y1 - y0))) return false;
  }
  return true;
}

std::optional<LandmarkSite> World::find_landmark(Landmark kind) const {
  for (const auto& l : landmarks_)
    if (l.kind == kind) return l;
  return std::nullopt;
}

bool is_connected(const World& w) { return flood_connected(w.size(), w.grid()); }

World generate_world(const WorldSpec& spec) {
  if (spec.extent < 6.0) throw WorldGenError("extent too small");
  if (spec.cell <= 0.0) throw WorldGenError("cell size must be positive");
  if (spec.landmark_count < 0 || spec.landmark_count > kLandmarkKinds) {
    throw WorldGenError("landmark_count must be in [0, " + std::to_string(kLandmarkKinds) + "]");
  }
  for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
    Rng rng(derive_seed(spec.seed, 0x570111d, static_cast<std::uint64_t>(attempt)));
    Layout L = build_rooms(spec, rng);
    const int n = L.n;
    if (!flood_connected(n, L.grid)) continue;

    std::vector<std::pair<int, int>> candidates;
    for (int y = 1; y < n - 1; ++y)
      for (int x = 1; x < n - 1; ++x) {
        if (L.at(x, y) != kFree || near_doorway(L, x, y, 3)) continue;
        const bool by_wall = L.at(x + 1, y) == kWall || L.at(x - 1, y) == kWall || L.at(x, y + 1) == kWall ||
                             L.at(x, y - 1) == kWall;
        if (by_wall) candidates.emplace_back(x, y);
      }

    std::vector<int> kinds(kLandmarkKinds);
    std::iota(kinds.begin(), kinds.end(), 0);
    rng.shuffle(kinds);
    std::vector<LandmarkSite> placed;
    const double min_sep_cells = 1.5 / spec.cell;
    bool ok = true;
    for (int k = 0; k < spec.landmark_count && ok; ++k) {
      const auto kind = static_cast<Landmark>(kinds[k]);
      bool done = false;
      for (int tries = 0; tries < 400 && !done && !candidates.empty(); ++tries) {
        const auto [x, y] = candidates[rng.below(candidates.size())];
        if (L.at(x, y) != kFree) continue;
        bool spaced = true;
        for (const auto& p : placed) spaced = spaced && std::hypot(p.cx - x, p.cy - y) >= min_sep_cells;
        if (!spaced) continue;
        // Needs two free cells in a row in front of it for an approach point.
        bool approach = false;
        const int dirs[4][2] = {{0, 1}, {1, 0}, {0, -1}, {-1, 0}};
        for (const auto& d : dirs) {
          const int ax = x + d[0], ay = y + d[1], bx = x + 2 * d[0], by = y + 2 * d[1];
          if (ax > 0 && ay > 0 && bx > 0 && by > 0 && ax < n - 1 && ay < n - 1 && bx < n - 1 && by < n - 1 &&
              L.at(ax, ay) == kFree && L.at(bx, by) == kFree) {
            approach = true;
          }
        }
        if (!approach) continue;
        L.at(x, y) = landmark_code(kind);
        if (!flood_connected(n, L.grid)) {
          L.at(x, y) = kFree;
          continue;
        }
        placed.push_back({kind, x, y});
        done = true;
      }
      ok = done;
    }
    if (!ok) continue;
    WorldSpec s = spec;
    return World(s, n, std::move(L.grid), std::move(placed));
  }
  throw WorldGenError("layout generation failed for seed " + std::to_string(spec.seed));
}

// ---------------------------------------------------------------------------

std::string_view action_name(Action a) { return kActionNames[static_cast<std::size_t>(a)]; }

std::optional<Action> parse_action(std::string_view s) {
  for (int i = 0; i < kNumActions; ++i)
    if (kActionNames[static_cast<std::size_t>(i)] == s) return static_cast<Action>(i);
  return std::nullopt;
}

double forward_distance(Action a) {
  switch (a) {
    case Action::kF25: return 0.25;
    case Action::kF50: return 0.50;
    case Action::kF75: return 0.75;
    default: return 0.0;
  }
}

double turn_degrees(Action a) {
  switch (a) {
    case Action::kL15: return 15.0;
    case Action::kL30: return 30.0;
    case Action::kL45: return 45.0;
    case Action::kR15: return -15.0;
    case Action::kR30: return -30.0;
    case Action::kR45: return -45.0;
    default: return 0.0;
  }
}

double normalize_heading(double deg) {
  double h = std::fmod(deg, 360.0);
  if (h < 0.0) h += 360.0;
  if (h >= 360.0) h -= 360.0;
  return h;
}

StepResult step(const World& w, const Pose& pose, Action a) {
  StepResult r{pose, false, false};
  if (a == Action::kStop) {
    r.terminal = true;
    return r;
  }
  if (is_turn(a)) {
    r.pose.heading = normalize_heading(pose.heading + turn_degrees(a));
    return r;
  }
  const double d = forward_distance(a);
  const auto [c, s] = unit(pose.heading);
  const double nx = pose.x + d * c;
  const double ny = pose.y + d * s;
  if (w.segment_free(pose.x, pose.y, nx, ny)) {
    r.pose.x = nx;
    r.pose.y = ny;
  } else {
    r.collided = true;
  }
  return r;
}

Observation observe(const World& w, const Pose& pose, std::optional<Action> prev, int step_index, const ObsConfig& cfg) {
  Observation o;
  const int p = cfg.patch;
  const int mid = p / 2;
  const double s = cfg.patch_cell;
  const auto [hx, hy] = unit(pose.heading);
  const double rx = hy, ry = -hx;  // right-hand direction
  o.patch.resize(static_cast<std::size_t>(p * p));
  for (int r = 0; r < p; ++r) {
    for (int c = 0; c < p; ++c) {
      const double f = (mid - r) * s;
      const double q = (c - mid) * s;
      std::uint8_t best = kFree;
      for (int a = -1; a <= 1; ++a) {
        for (int b = -1; b <= 1; ++b) {
          const double ff = f + a * s / 3.0;
          const double qq = q + b * s / 3.0;
          const double x = pose.x + ff * hx + qq * rx;
          const double y = pose.y + ff * hy + qq * ry;
          best = std::max(best, w.code(w.cell_x(x), w.cell_y(y)));
        }
      }
      o.patch[static_cast<std::size_t>(r * p + c)] = best;
    }
  }
  o.prev_action = prev ? static_cast<int>(*prev) : kNoAction;
  o.step_scaled = std::min(1.0, static_cast<double>(step_index) / std::max(1, cfg.max_steps));
  return o;
}

int observation_feature_dim(const ObsConfig& cfg) {
  return cfg.patch * cfg.patch * kNumCellCodes + 2 * kLandmarkKinds + (kNumActions + 1) + 1;
}

}  // namespace pt::world
