#pragma once

// Procedural 2D indoor layouts on an occupancy grid, the discrete action set
// and the egocentric observation renderer.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pt::world {

class WorldGenError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kLandmarkKinds = 12;
enum class Landmark : std::uint8_t {
  kDoor,
  kTable,
  kCorridor,
  kStairs,
  kPlant,
  kWindow,
  kSofa,
  kLamp,
  kShelf,
  kBed,
  kSink,
  kPainting,
};

std::string_view landmark_name(Landmark l);

// Grid cell codes: 0 free, 1 wall, 2 + landmark index for landmark cells.
inline constexpr std::uint8_t kFree = 0;
inline constexpr std::uint8_t kWall = 1;
inline constexpr int kNumCellCodes = 2 + kLandmarkKinds;
inline constexpr std::uint8_t landmark_code(Landmark l) { return static_cast<std::uint8_t>(2 + static_cast<int>(l)); }

struct WorldSpec {
  std::uint64_t seed = 1;
  double extent = 12.0;  ///< meters per side
  double cell = 0.25;    ///< grid resolution, meters
  double room_size = 4.0;
  int door_cells = 4;
  double extra_door_prob = 0.3;
  int landmark_count = 8;
  int max_retries = 32;
};

struct LandmarkSite {
  Landmark kind;
  int cx;
  int cy;
  bool operator==(const LandmarkSite&) const = default;
};

class World {
 public:
  World() = default;
  /// Wraps an explicit grid (row-major, y rows of x cells).
  World(WorldSpec spec, int n, std::vector<std::uint8_t> grid, std::vector<LandmarkSite> landmarks);

  const WorldSpec& spec() const { return spec_; }
  int size() const { return n_; }
  double cell() const { return spec_.cell; }
  const std::vector<std::uint8_t>& grid() const { return grid_; }
  const std::vector<LandmarkSite>& landmarks() const { return landmarks_; }

  bool in_bounds(int cx, int cy) const { return cx >= 0 && cy >= 0 && cx < n_ && cy < n_; }
  /// Out-of-bounds cells read as wall.
  std::uint8_t code(int cx, int cy) const { return in_bounds(cx, cy) ? grid_[cy * n_ + cx] : kWall; }
  bool free(int cx, int cy) const { return code(cx, cy) == kFree; }
  int cell_x(double x) const;
  int cell_y(double y) const;
  bool free_point(double x, double y) const { return free(cell_x(x), cell_y(y)); }
  /// Samples the segment at sub-cell spacing; true if every sample is free.
  bool segment_free(double x0, double y0, double x1, double y1) const;
  double center(int c) const { return (c + 0.5) * spec_.cell; }
  std::optional<LandmarkSite> find_landmark(Landmark kind) const;

  bool operator==(const World& o) const { return n_ == o.n_ && grid_ == o.grid_ && landmarks_ == o.landmarks_; }

 private:
  WorldSpec spec_;
  int n_ = 0;
  std::vector<std::uint8_t> grid_;
  std::vector<LandmarkSite> landmarks_;
};

/// Deterministic per seed. Throws WorldGenError on bad spec or retry exhaustion.
World generate_world(const WorldSpec& spec);

/// Flood fill over free cells.
bool is_connected(const World& w);

// ---------------------------------------------------------------------------
// Actions and poses
// ---------------------------------------------------------------------------

inline constexpr int kNumActions = 10;
enum class Action : std::uint8_t { kF25, kF50, kF75, kL15, kL30, kL45, kR15, kR30, kR45, kStop };

std::string_view action_name(Action a);
std::optional<Action> parse_action(std::string_view s);
/// Forward distance in meters (0 for turns and STOP).
double forward_distance(Action a);
/// Signed rotation in degrees, counter-clockwise positive (left).
double turn_degrees(Action a);
inline bool is_forward(Action a) { return forward_distance(a) > 0.0; }
inline bool is_turn(Action a) { return turn_degrees(a) != 0.0; }

/// Heading in degrees, counter-clockwise from +x, kept in [0, 360).
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  bool operator==(const Pose&) const = default;
};

double normalize_heading(double deg);

struct StepResult {
  Pose pose;
  bool collided = false;
  bool terminal = false;
};

StepResult step(const World& w, const Pose& pose, Action a);

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

struct ObsConfig {
  int patch = 7;            ///< cells per side, agent at the center cell
  double patch_cell = 0.5;  ///< meters per patch cell
  int max_steps = 120;      ///< step index is scaled by this
};

inline constexpr int kNoAction = kNumActions;  ///< prev-action slot at t = 0

struct Observation {
  /// Row 0 is farthest ahead; column 0 is leftmost.
  std::vector<std::uint8_t> patch;
  int prev_action = kNoAction;
  double step_scaled = 0.0;
  bool operator==(const Observation&) const = default;
};

Observation observe(const World& w, const Pose& pose, std::optional<Action> prev, int step_index, const ObsConfig& cfg);

/// Flattened sparse feature count: cells * codes + 2 per landmark kind + (actions + 1) + 1.
int observation_feature_dim(const ObsConfig& cfg);

}  // namespace pt::world
