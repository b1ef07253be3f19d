#pragma once

// Instruction vocabulary, route episodes and the oracle expert.

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pt/world/world.hpp"

namespace pt::world {

class EpisodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Instruction tokens: ten function words, then one token per landmark kind.
enum Word : int { kGo, kTo, kThe, kTurn, kLeft, kRight, kAround, kAnd, kStopAt, kSep, kFirstLandmarkToken };
inline constexpr int kInstructionVocab = kFirstLandmarkToken + kLandmarkKinds;

inline int landmark_token(Landmark l) { return kFirstLandmarkToken + static_cast<int>(l); }
std::string_view token_name(int tok);
std::optional<int> parse_token(std::string_view s);
std::string tokens_to_string(const std::vector<int>& toks);

/// Token span [tok_begin, tok_end) and the trajectory steps [step_begin, step_end) it covers.
struct ClauseSpan {
  int tok_begin = 0;
  int tok_end = 0;
  int step_begin = 0;
  int step_end = 0;
  bool operator==(const ClauseSpan&) const = default;
};

struct Instruction {
  std::vector<int> tokens;
  std::vector<ClauseSpan> clauses;
  int size() const { return static_cast<int>(tokens.size()); }
  bool operator==(const Instruction&) const = default;
};

struct EpisodeSpec {
  int min_legs = 1;  ///< movement clauses; plus one stop clause
  int max_legs = 4;
  double success_radius = 1.0;
  double leg_radius = 0.5;   ///< waypoint counts as reached within this
  double min_leg_m = 1.5;    ///< minimum straight-line leg length
  double min_goal_m = 2.0;   ///< minimum straight-line start-to-goal distance
  int max_steps = 120;
  int max_retries = 64;
  ObsConfig obs;
};

struct Waypoint {
  Landmark landmark;
  double x;
  double y;
  bool operator==(const Waypoint&) const = default;
};

/// Per-waypoint grid distance fields used by the expert.
struct ExpertFields {
  int n = 0;
  std::vector<std::vector<double>> dist;  // one n*n field per waypoint
};

struct Episode {
  std::shared_ptr<const World> world;
  EpisodeSpec spec;
  std::uint64_t seed = 0;
  Pose start;
  std::vector<Waypoint> waypoints;  ///< last one is the goal
  Instruction instruction;
  std::vector<Action> actions;  ///< expert actions, ends with STOP
  std::vector<Pose> poses;      ///< pose before each action
  std::vector<Observation> observations;
  double shortest_path_m = 0.0;
  std::shared_ptr<const ExpertFields> fields;

  int steps() const { return static_cast<int>(actions.size()); }
  double goal_x() const { return waypoints.back().x; }
  double goal_y() const { return waypoints.back().y; }
  /// Index of the clause whose step span contains t.
  int clause_at(int t) const;
  /// Aligned instruction-prefix length k*_t.
  int aligned_prefix(int t) const;
};

/// Leg progress carried along a rollout.
struct ExpertTracker {
  int leg = 0;
};

/// Builds the distance fields for an episode's waypoints.
std::shared_ptr<const ExpertFields> build_expert_fields(const World& w, const std::vector<Waypoint>& wps);

/// Greedy action toward the tracker's current waypoint; advances the tracker
/// when a waypoint is reached and returns STOP within the success radius on the
/// final leg. Throws EpisodeError if the waypoint is unreachable from the pose.
Action expert_action(const Episode& ep, const Pose& pose, ExpertTracker& tracker);

/// Stateless convenience: leg taken from the recorded route at step_index.
Action expert_action(const Episode& ep, const Pose& pose, int step_index);

/// Route over 1..4 landmark legs with clause-aligned instruction and expert rollout.
Episode generate_episode(std::shared_ptr<const World> world, std::uint64_t seed, const EpisodeSpec& spec = {});

/// Indices into o_0..o_{t-1}: all of them if t <= H, else H evenly strided.
std::vector<int> history_indices(int t, int H);

/// Replays the expert actions and recomputes poses and observations.
void replay(Episode& ep);

// Line-delimited text records; see docs/formats.md.
std::string serialize_world(const World& w);
World deserialize_world(std::string_view line);
std::string serialize_episode(const Episode& ep);
Episode deserialize_episode(std::string_view line);

}  // namespace pt::world
