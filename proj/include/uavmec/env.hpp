#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "uavmec/config.hpp"
#include "uavmec/geom.hpp"
#include "uavmec/rng.hpp"
#include "uavmec/world.hpp"

namespace uavmec {

// One UAV's decision for a slot. Displacement is a raw 3D step request (the
// environment applies the speed and region limits); the per-device vectors
// must already satisfy the action-space constraints.
struct LocalAction {
  Vec3 displacement;
  std::vector<double> preference;     // D entries in [0,1]
  std::vector<double> cpu_alloc;      // D entries, cycles/s, sum <= capacity
  std::vector<double> offload_ratio;  // D entries in [0,1]
};

// Inter-UAV cooperation payload: where I am and whom I want to serve.
struct AgentMessage {
  Vec3 uav_position;
  std::vector<double> preference;
};

using FeatureVector = std::vector<double>;

struct GlobalState {
  int slot_index = 0;
  std::vector<DeviceState> devices;
  std::vector<UavPose> uavs;
  // Previous applied (post-mask) decisions, row per UAV, column per device.
  std::vector<std::vector<double>> prev_cpu_alloc;
  std::vector<std::vector<double>> prev_offload_ratio;
  // Previous preferences, kept as the message payload memory.
  std::vector<std::vector<double>> prev_preference;
};

// Pinned scenario for reproducible studies; any field may be left empty.
struct Fixture {
  std::vector<Vec2> device_positions;
  std::vector<double> task_bits;
  std::vector<Vec3> uav_positions;

  static Fixture from_json(const json& j) {
    detail::check_keys(j, {"device_positions", "task_bits", "uav_positions"}, "fixture");
    Fixture f;
    if (j.contains("device_positions"))
      for (const auto& p : j.at("device_positions")) {
        if (!p.is_array() || p.size() != 2)
          throw ConfigError("fixture.device_positions entries must be [x, y]");
        f.device_positions.push_back({p[0].get<double>(), p[1].get<double>()});
      }
    if (j.contains("task_bits"))
      f.task_bits = j.at("task_bits").get<std::vector<double>>();
    if (j.contains("uav_positions"))
      for (const auto& p : j.at("uav_positions")) {
        if (!p.is_array() || p.size() != 3)
          throw ConfigError("fixture.uav_positions entries must be [x, y, z]");
        f.uav_positions.push_back(
            {p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
      }
    return f;
  }

  static Fixture load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open fixture file: " + path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("fixture parse error in " + path + ": " + e.what());
    }
    return from_json(j);
  }

  json to_json() const {
    json j = json::object();
    if (!device_positions.empty()) {
      json arr = json::array();
      for (const auto& p : device_positions) arr.push_back({p.x, p.y});
      j["device_positions"] = arr;
    }
    if (!task_bits.empty()) j["task_bits"] = task_bits;
    if (!uav_positions.empty()) {
      json arr = json::array();
      for (const auto& p : uav_positions) arr.push_back({p.x, p.y, p.z});
      j["uav_positions"] = arr;
    }
    return j;
  }
};

// Each device goes to the UAV with the highest preference for it; ties break
// toward the lowest UAV index. The result is always a disjoint matching.
inline std::vector<int> resolve_association(
    const std::vector<std::vector<double>>& preference) {
  if (preference.empty()) throw std::invalid_argument("resolve_association: no rows");
  const int num_uavs = static_cast<int>(preference.size());
  const int num_devices = static_cast<int>(preference.front().size());
  std::vector<int> assignment(num_devices, 0);
  for (int d = 0; d < num_devices; ++d) {
    double best = -std::numeric_limits<double>::infinity();
    for (int u = 0; u < num_uavs; ++u) {
      if (preference[u][d] > best) {
        best = preference[u][d];
        assignment[d] = u;
      }
    }
  }
  return assignment;
}

inline int message_dim(int num_devices) { return 3 + num_devices; }

inline int local_state_dim(int num_uavs, int num_devices) {
  return 3 + num_devices + num_devices + 2 * num_devices + num_devices + 1 +
         (num_uavs - 1) * message_dim(num_devices);
}

// Feature layout, every entry in [0,1] (positions and shares) by config bounds:
//   [0..2]               own position
//   [3..3+D)             own previous cpu allocation / capacity
//   [..+D)               own previous offload ratios
//   [..+2D)              device positions
//   [..+D)               remaining bits / current-frame task bits
//   [..+1)               slot index within frame / slots_per_frame
//   [..+(U-1)*(3+D))     messages of the other UAVs, ascending index
inline FeatureVector encode_local_state(const GlobalState& state, int uav_index,
                                        std::span<const AgentMessage> messages,
                                        const WorldConfig& cfg,
                                        bool zero_messages = false) {
  const int num_devices = cfg.num_devices;
  const int num_uavs = cfg.num_uavs;
  const double alt_span = std::max(cfg.altitude_max - cfg.altitude_min, 1e-12);
  FeatureVector f;
  f.reserve(local_state_dim(num_uavs, num_devices));

  auto push_pose = [&](const Vec3& p) {
    f.push_back(p.x / cfg.region_side);
    f.push_back(p.y / cfg.region_side);
    f.push_back((p.z - cfg.altitude_min) / alt_span);
  };

  push_pose(state.uavs[uav_index].position);
  for (int d = 0; d < num_devices; ++d)
    f.push_back(state.prev_cpu_alloc[uav_index][d] / cfg.cpu_capacity_max);
  for (int d = 0; d < num_devices; ++d)
    f.push_back(state.prev_offload_ratio[uav_index][d]);
  for (int d = 0; d < num_devices; ++d) {
    f.push_back(state.devices[d].position.x / cfg.region_side);
    f.push_back(state.devices[d].position.y / cfg.region_side);
  }
  for (int d = 0; d < num_devices; ++d) {
    const double initial = state.devices[d].initial_bits;
    f.push_back(initial > 0.0 ? state.devices[d].remaining_bits / initial : 0.0);
  }
  f.push_back(static_cast<double>(state.slot_index % cfg.slots_per_frame) /
              cfg.slots_per_frame);

  if (static_cast<int>(messages.size()) != num_uavs)
    throw std::invalid_argument("encode_local_state: need one message per UAV");
  for (int v = 0; v < num_uavs; ++v) {
    if (v == uav_index) continue;
    if (zero_messages) {
      for (int i = 0; i < message_dim(num_devices); ++i) f.push_back(0.0);
    } else {
      push_pose(messages[v].uav_position);
      for (int d = 0; d < num_devices; ++d) f.push_back(messages[v].preference[d]);
    }
  }
  return f;
}

struct StepResult {
  std::vector<FeatureVector> next_local_states;  // one per UAV
  std::vector<double> rewards;                   // one per UAV, joules-scaled
  std::vector<SlotOutcome> outcomes;             // one per device
  std::vector<int> association;                  // device -> serving UAV
  std::vector<double> serving_gain;              // device -> linear channel gain
  std::vector<double> device_energy;             // tx + local per device, J
  double min_separation = 0.0;
  double completion_fraction = 0.0;  // of the current frame's task bits
  bool collision = false;            // separation violated this slot
  bool done = false;
};

// Episodic multi-agent environment: a sequential state machine over the pure
// world-model functions. One instance per training/evaluation run.
class Environment {
 public:
  Environment(WorldConfig world, RewardConfig reward, int frames_per_episode,
              bool zero_messages = false)
      : world_(std::move(world)),
        reward_(reward),
        frames_(frames_per_episode),
        zero_messages_(zero_messages) {
    world_.validate();
    if (frames_ < 1) throw ConfigError("frames_per_episode must be >= 1");
  }

  const WorldConfig& world() const { return world_; }
  int frames() const { return frames_; }
  int total_slots() const { return frames_ * world_.slots_per_frame; }
  bool zero_messages() const { return zero_messages_; }

  std::vector<FeatureVector> reset(RngStream& rng, const Fixture* fixture = nullptr) {
    const int num_devices = world_.num_devices;
    const int num_uavs = world_.num_uavs;
    if (fixture) {
      if (!fixture->device_positions.empty() &&
          static_cast<int>(fixture->device_positions.size()) != num_devices)
        throw ConfigError("fixture dimension mismatch: device_positions");
      if (!fixture->task_bits.empty() &&
          static_cast<int>(fixture->task_bits.size()) != num_devices)
        throw ConfigError("fixture dimension mismatch: task_bits");
      if (!fixture->uav_positions.empty() &&
          static_cast<int>(fixture->uav_positions.size()) != num_uavs)
        throw ConfigError("fixture dimension mismatch: uav_positions");
    }

    state_ = GlobalState{};
    state_.devices.resize(num_devices);
    for (int d = 0; d < num_devices; ++d) {
      DeviceState& dev = state_.devices[d];
      if (fixture && !fixture->device_positions.empty()) {
        dev.position = fixture->device_positions[d];
      } else {
        dev.position = {rng.uniform(0.0, world_.region_side),
                        rng.uniform(0.0, world_.region_side)};
      }
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      dev.mean_velocity = {world_.mobility.mean_speed * std::cos(angle),
                           world_.mobility.mean_speed * std::sin(angle)};
      dev.velocity = dev.mean_velocity;
    }
    std::vector<double> tasks;
    if (fixture && !fixture->task_bits.empty())
      tasks = fixture->task_bits;
    else
      tasks = sample_tasks(rng, world_);
    for (int d = 0; d < num_devices; ++d) {
      state_.devices[d].initial_bits = tasks[d];
      state_.devices[d].remaining_bits = tasks[d];
    }

    state_.uavs.resize(num_uavs);
    const double mid_alt = 0.5 * (world_.altitude_min + world_.altitude_max);
    for (int u = 0; u < num_uavs; ++u) {
      if (fixture && !fixture->uav_positions.empty())
        state_.uavs[u].position = fixture->uav_positions[u];
      else
        state_.uavs[u].position = {world_.region_side * (u + 1) / (num_uavs + 1),
                                   world_.region_side * 0.5, mid_alt};
    }

    state_.prev_cpu_alloc.assign(num_uavs, std::vector<double>(num_devices, 0.0));
    state_.prev_offload_ratio.assign(num_uavs, std::vector<double>(num_devices, 0.0));
    state_.prev_preference.assign(num_uavs, std::vector<double>(num_devices, 0.0));
    state_.slot_index = 0;
    return local_states();
  }

  std::vector<AgentMessage> messages() const {
    std::vector<AgentMessage> msgs(state_.uavs.size());
    for (std::size_t u = 0; u < state_.uavs.size(); ++u) {
      msgs[u].uav_position = state_.uavs[u].position;
      msgs[u].preference = state_.prev_preference[u];
    }
    return msgs;
  }

  FeatureVector local_state(int uav_index) const {
    const auto msgs = messages();
    return encode_local_state(state_, uav_index, msgs, world_, zero_messages_);
  }

  std::vector<FeatureVector> local_states() const {
    std::vector<FeatureVector> out;
    out.reserve(state_.uavs.size());
    for (std::size_t u = 0; u < state_.uavs.size(); ++u)
      out.push_back(local_state(static_cast<int>(u)));
    return out;
  }

  StepResult step(const std::vector<LocalAction>& actions, RngStream& rng) {
    const int num_uavs = world_.num_uavs;
    const int num_devices = world_.num_devices;
    validate_actions(actions);

    for (int u = 0; u < num_uavs; ++u)
      state_.uavs[u] = apply_uav_displacement(state_.uavs[u], actions[u].displacement,
                                              world_);

    std::vector<std::vector<double>> stacked(num_uavs);
    for (int u = 0; u < num_uavs; ++u) stacked[u] = actions[u].preference;
    const std::vector<int> assoc = resolve_association(stacked);

    StepResult res;
    res.association = assoc;
    res.outcomes.resize(num_devices);
    res.serving_gain.resize(num_devices);
    res.device_energy.resize(num_devices);
    for (int d = 0; d < num_devices; ++d) {
      const int u = assoc[d];
      const double gain = channel_gain(state_.uavs[u], state_.devices[d].position, world_);
      const double rate = uplink_rate(gain, world_);
      const double ratio = std::clamp(actions[u].offload_ratio[d], 0.0, 1.0);
      const SlotOutcome outcome = slot_execute(state_.devices[d].remaining_bits, ratio,
                                               actions[u].cpu_alloc[d], rate, world_);
      state_.devices[d].remaining_bits -= outcome.bits_offloaded + outcome.bits_local;
      if (state_.devices[d].remaining_bits < 0.0) state_.devices[d].remaining_bits = 0.0;
      res.outcomes[d] = outcome;
      res.serving_gain[d] = gain;
      res.device_energy[d] = outcome.energy_tx + outcome.energy_local;
    }

    for (int d = 0; d < num_devices; ++d)
      state_.devices[d] = step_device_mobility(state_.devices[d], rng, world_);

    const int frame = state_.slot_index / world_.slots_per_frame;
    const bool frame_end =
        (state_.slot_index % world_.slots_per_frame) == world_.slots_per_frame - 1;
    const bool final_frame = frame == frames_ - 1;

    res.min_separation = num_uavs >= 2
                             ? min_uav_separation(state_.uavs)
                             : std::numeric_limits<double>::infinity();
    res.collision = res.min_separation < world_.uav_min_separation;

    res.rewards.assign(num_uavs, 0.0);
    for (int u = 0; u < num_uavs; ++u) {
      double energy = 0.0;
      double unfinished = 0.0;
      for (int d = 0; d < num_devices; ++d) {
        if (assoc[d] != u) continue;
        energy += res.device_energy[d];
        if (state_.devices[d].initial_bits > 0.0)
          unfinished += state_.devices[d].remaining_bits / state_.devices[d].initial_bits;
      }
      double collision_pen = 0.0;
      if (num_uavs >= 2) {
        double nearest = std::numeric_limits<double>::infinity();
        for (int v = 0; v < num_uavs; ++v) {
          if (v == u) continue;
          nearest = std::min(nearest, distance(state_.uavs[u].position,
                                               state_.uavs[v].position));
        }
        collision_pen =
            reward_.lambda_collision * std::max(0.0, world_.uav_min_separation - nearest);
      }
      const double unfinished_pen =
          frame_end ? reward_.lambda_unfinished * unfinished : 0.0;
      res.rewards[u] = -energy - collision_pen - unfinished_pen;
    }

    double total_initial = 0.0;
    double total_remaining = 0.0;
    for (const auto& dev : state_.devices) {
      total_initial += dev.initial_bits;
      total_remaining += dev.remaining_bits;
    }
    res.completion_fraction =
        total_initial > 0.0 ? 1.0 - total_remaining / total_initial : 1.0;

    for (int u = 0; u < num_uavs; ++u) {
      for (int d = 0; d < num_devices; ++d) {
        const bool serving = assoc[d] == u;
        state_.prev_cpu_alloc[u][d] = serving ? actions[u].cpu_alloc[d] : 0.0;
        state_.prev_offload_ratio[u][d] = serving ? actions[u].offload_ratio[d] : 0.0;
      }
      state_.prev_preference[u] = actions[u].preference;
    }

    const bool all_done = total_remaining <= 0.0;
    if (frame_end && !final_frame) {
      const std::vector<double> tasks = sample_tasks(rng, world_);
      for (int d = 0; d < num_devices; ++d) {
        state_.devices[d].initial_bits = tasks[d];
        state_.devices[d].remaining_bits = tasks[d];
      }
    }

    state_.slot_index += 1;
    res.done = state_.slot_index >= total_slots() || (final_frame && all_done);
    res.next_local_states = local_states();
    return res;
  }

  // Reference policy of the separated baseline: learning controls only the
  // displacement; association, CPU split, and offloading come from greedy
  // rules evaluated against the would-be next poses.
  std::vector<LocalAction> separated_heuristic(const std::vector<Vec3>& displacements) const {
    const int num_uavs = world_.num_uavs;
    const int num_devices = world_.num_devices;
    if (static_cast<int>(displacements.size()) != num_uavs)
      throw std::invalid_argument("separated_heuristic: one displacement per UAV");

    std::vector<UavPose> next_poses(num_uavs);
    for (int u = 0; u < num_uavs; ++u)
      next_poses[u] = apply_uav_displacement(state_.uavs[u], displacements[u], world_);

    std::vector<int> assoc(num_devices, 0);
    std::vector<double> best_gain(num_devices, 0.0);
    for (int d = 0; d < num_devices; ++d) {
      double best = -1.0;
      for (int u = 0; u < num_uavs; ++u) {
        const double g = channel_gain(next_poses[u], state_.devices[d].position, world_);
        if (g > best) {
          best = g;
          assoc[d] = u;
        }
      }
      best_gain[d] = best;
    }

    std::vector<int> load(num_uavs, 0);
    for (int d = 0; d < num_devices; ++d) load[assoc[d]] += 1;

    std::vector<LocalAction> actions(num_uavs);
    for (int u = 0; u < num_uavs; ++u) {
      actions[u].displacement = displacements[u];
      actions[u].preference.assign(num_devices, 0.0);
      actions[u].cpu_alloc.assign(num_devices, 0.0);
      actions[u].offload_ratio.assign(num_devices, 0.0);
    }
    for (int d = 0; d < num_devices; ++d) {
      const int u = assoc[d];
      actions[u].preference[d] = 1.0;
      const double f_vm = world_.cpu_capacity_max / load[u];
      actions[u].cpu_alloc[d] = f_vm;
      const double rate = uplink_rate(best_gain[d], world_);
      double cap = 0.0;
      if (rate > 0.0 && f_vm > 0.0)
        cap = world_.slot_duration() / (1.0 / rate + world_.cycles_per_bit / f_vm);
      const double remaining = state_.devices[d].remaining_bits;
      actions[u].offload_ratio[d] = remaining > 0.0 ? std::min(1.0, cap / remaining) : 0.0;
    }
    return actions;
  }

  // Centralized-information surface; decentralized trainers must not touch it.
  // The access counter backs the information-flow audit in the tests.
  const GlobalState& global_state() const {
    ++global_accesses_;
    return state_;
  }
  long global_accesses() const { return global_accesses_; }
  void reset_audit() { global_accesses_ = 0; }

 private:
  void validate_actions(const std::vector<LocalAction>& actions) const {
    if (static_cast<int>(actions.size()) != world_.num_uavs)
      throw std::invalid_argument("step: unprojected action (need one per UAV)");
    const double cap_tol = world_.cpu_capacity_max * 1e-6;
    for (const auto& a : actions) {
      if (static_cast<int>(a.preference.size()) != world_.num_devices ||
          static_cast<int>(a.cpu_alloc.size()) != world_.num_devices ||
          static_cast<int>(a.offload_ratio.size()) != world_.num_devices)
        throw std::invalid_argument("step: unprojected action (bad vector size)");
      double cpu_sum = 0.0;
      for (int d = 0; d < world_.num_devices; ++d) {
        if (!(a.preference[d] >= -1e-12 && a.preference[d] <= 1.0 + 1e-12) ||
            !(a.offload_ratio[d] >= -1e-12 && a.offload_ratio[d] <= 1.0 + 1e-12) ||
            !(a.cpu_alloc[d] >= 0.0) || !std::isfinite(a.cpu_alloc[d]))
          throw std::invalid_argument("step: unprojected action (range violation)");
        cpu_sum += a.cpu_alloc[d];
      }
      if (cpu_sum > world_.cpu_capacity_max + cap_tol)
        throw std::invalid_argument("step: unprojected action (capacity violated)");
    }
  }

  WorldConfig world_;
  RewardConfig reward_;
  int frames_;
  bool zero_messages_;
  GlobalState state_;
  mutable long global_accesses_ = 0;
};

}  // namespace uavmec
