#pragma once

// Step-level supervised samples, dataset files and DAgger collection.

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pt/util/config.hpp"
#include "pt/world/episode.hpp"

namespace pt::data {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kDatasetVersion = 1;

struct StepSample {
  std::uint64_t id = 0;
  std::uint32_t episode = 0;  ///< index into the episode list the sample came from
  int t = 0;
  int episode_steps = 0;  ///< T of the source episode
  int aligned_prefix = 0;  ///< k*_t, evaluation only
  bool dagger = false;
  world::Pose pose;
  int leg = 0;  ///< expert leg at this state
  std::vector<world::Observation> history;
  world::Observation current;
  std::vector<int> instruction;
  std::vector<world::Action> expert;  ///< a*_{t:t+K-1}
  bool operator==(const StepSample&) const = default;
};

struct Dataset {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  int K = 3;
  std::vector<StepSample> samples;
  bool operator==(const Dataset&) const = default;
};

/// One sample per step of each episode, in episode order.
Dataset build_sl_dataset(const std::vector<world::Episode>& episodes, int K, int history, std::uint64_t config_hash,
                         std::uint64_t seed);

void write_dataset(const std::string& path, const Dataset& d);
/// Throws DatasetError on a missing header, version mismatch, truncation, or
/// (when expected_hash is given) a config hash mismatch.
Dataset read_dataset(const std::string& path, std::optional<std::uint64_t> expected_hash = std::nullopt);
std::string dataset_to_string(const Dataset& d);
Dataset dataset_from_string(const std::string& text, std::optional<std::uint64_t> expected_hash = std::nullopt);

/// Appends extra's samples; throws on duplicate record ids.
void aggregate(Dataset& base, const Dataset& extra);

/// Maps a state to K predicted actions (only the first is executed during collection).
using Actor = std::function<std::vector<world::Action>(const StepSample& state)>;

struct DaggerOptions {
  int K = 3;
  int history = 8;
  double epsilon = 0.1;  ///< probability of a uniformly random executed action
  int max_steps = 120;
  std::size_t max_samples = 5000;
  std::uint64_t first_id = 0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

struct DaggerResult {
  Dataset data;
  int rollouts = 0;
  int truncated = 0;  ///< rollouts cut at max_steps
};

/// Rolls out the actor on each episode (start pose and instruction) and labels
/// every visited state with expert actions.
DaggerResult dagger_collect(const Actor& actor, const std::vector<world::Episode>& episodes, const DaggerOptions& opt);

/// Expert labels for the next K steps from a state, padded with STOP.
std::vector<world::Action> expert_labels(const world::Episode& ep, const world::Pose& pose, world::ExpertTracker tracker,
                                         int K);

// Run-config plumbing.
world::WorldSpec world_spec_from(const RunConfig& cfg, std::uint64_t world_seed);
world::EpisodeSpec episode_spec_from(const RunConfig& cfg);
/// Training world seeds have the top bit clear, evaluation world seeds set.
std::uint64_t train_world_seed(std::uint64_t seed, int i);
std::uint64_t eval_world_seed(std::uint64_t base, int i);
/// Episodes over cfg's training worlds until their step count reaches `min_steps`.
std::vector<world::Episode> training_episodes(const RunConfig& cfg, std::uint64_t seed, std::size_t min_steps);
/// Held-out episodes on evaluation worlds.
std::vector<world::Episode> eval_episodes(const RunConfig& cfg, int count);

}  // namespace pt::data
