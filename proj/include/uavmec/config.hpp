#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace uavmec {

using json = nlohmann::json;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& context) {
  if (!j.is_object()) throw ConfigError(context + ": expected an object");
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key()))
      throw ConfigError(context + ": unknown key \"" + item.key() + "\"");
  }
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback,
         const std::string& context) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(context + ": bad value for key \"" + key + "\"");
  }
}

template <typename T>
T require(const json& j, const std::string& key, const std::string& context) {
  if (!j.contains(key)) throw ConfigError(context + ": missing key \"" + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(context + ": bad value for key \"" + key + "\"");
  }
}

}  // namespace detail

// Air-to-ground channel: probabilistic line-of-sight sigmoid plus excess loss.
struct ChannelConfig {
  double a = 9.61;           // LoS sigmoid shape (urban)
  double b = 0.16;           // LoS sigmoid slope
  double eta_los_db = 1.0;   // excess loss under LoS
  double eta_nlos_db = 20.0; // excess loss under NLoS

  static ChannelConfig from_json(const json& j, const std::string& ctx) {
    detail::check_keys(j, {"a", "b", "eta_los_db", "eta_nlos_db"}, ctx);
    ChannelConfig c;
    c.a = detail::get_or(j, "a", c.a, ctx);
    c.b = detail::get_or(j, "b", c.b, ctx);
    c.eta_los_db = detail::get_or(j, "eta_los_db", c.eta_los_db, ctx);
    c.eta_nlos_db = detail::get_or(j, "eta_nlos_db", c.eta_nlos_db, ctx);
    return c;
  }
  json to_json() const {
    return {{"a", a}, {"b", b}, {"eta_los_db", eta_los_db}, {"eta_nlos_db", eta_nlos_db}};
  }
};

// First-order Gauss-Markov mobility for ground devices.
struct MobilityConfig {
  double alpha = 0.8;        // velocity memory in [0,1]
  double mean_speed = 1.5;   // m/s, magnitude of the per-device mean velocity
  double speed_sigma = 0.5;  // m/s, per-axis noise scale

  static MobilityConfig from_json(const json& j, const std::string& ctx) {
    detail::check_keys(j, {"alpha", "mean_speed", "speed_sigma"}, ctx);
    MobilityConfig m;
    m.alpha = detail::get_or(j, "alpha", m.alpha, ctx);
    m.mean_speed = detail::get_or(j, "mean_speed", m.mean_speed, ctx);
    m.speed_sigma = detail::get_or(j, "speed_sigma", m.speed_sigma, ctx);
    return m;
  }
  json to_json() const {
    return {{"alpha", alpha}, {"mean_speed", mean_speed}, {"speed_sigma", speed_sigma}};
  }
};

struct WorldConfig {
  double region_side = 100.0;  // m, square ground region
  double altitude_min = 50.0;  // m
  double altitude_max = 150.0; // m
  int num_uavs = 2;
  int num_devices = 6;
  double frame_duration = 2.0; // s
  int slots_per_frame = 10;
  double uav_speed_max = 50.0;       // m/s
  double uav_min_separation = 5.0;   // m, collision threshold
  double cpu_capacity_max = 50e9;    // cycles/s per UAV
  double cycles_per_bit = 1550.7;
  double device_local_freq = 1e9;    // cycles/s
  double task_bits_min = 1.2e6;
  double task_bits_max = 12e6;
  double bandwidth_total = 40e6;     // Hz, split evenly across devices
  double carrier_freq = 2e9;         // Hz
  double noise_density = 3.9810717055349565e-21;  // W/Hz (-174 dBm/Hz)
  double tx_power_device = 0.1;  // W
  double tx_power_uav = 10.0;    // W (downlink is free; kept for completeness)
  ChannelConfig channel;
  MobilityConfig mobility;
  double kappa = 1e-28;  // J*s^2/cycles^3, local-compute energy constant

  double slot_duration() const { return frame_duration / slots_per_frame; }
  double bandwidth_per_device() const { return bandwidth_total / num_devices; }
  double max_step_distance() const { return uav_speed_max * slot_duration(); }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0))
        throw ConfigError(std::string("world.") + name + " must be strictly positive");
    };
    positive(region_side, "region_side");
    positive(altitude_min, "altitude_min");
    positive(altitude_max, "altitude_max");
    positive(frame_duration, "frame_duration");
    positive(uav_speed_max, "uav_speed_max");
    positive(uav_min_separation, "uav_min_separation");
    positive(cpu_capacity_max, "cpu_capacity_max");
    positive(cycles_per_bit, "cycles_per_bit");
    positive(device_local_freq, "device_local_freq");
    positive(task_bits_min, "task_bits_min");
    positive(bandwidth_total, "bandwidth_total");
    positive(carrier_freq, "carrier_freq");
    positive(noise_density, "noise_density");
    positive(tx_power_device, "tx_power_device");
    positive(kappa, "kappa");
    if (num_uavs < 1) throw ConfigError("world.num_uavs must be >= 1");
    if (num_devices < 1) throw ConfigError("world.num_devices must be >= 1");
    if (slots_per_frame < 1) throw ConfigError("world.slots_per_frame must be >= 1");
    if (task_bits_min > task_bits_max)
      throw ConfigError("world.task_bits_min must be <= task_bits_max");
    if (altitude_min > altitude_max)
      throw ConfigError("world.altitude_min must be <= altitude_max");
    if (mobility.alpha < 0.0 || mobility.alpha > 1.0)
      throw ConfigError("world.mobility.alpha must lie in [0,1]");
  }

  static WorldConfig from_json(const json& j) {
    const std::string ctx = "world";
    detail::check_keys(
        j,
        {"region_side", "altitude_min", "altitude_max", "num_uavs", "num_devices",
         "frame_duration", "slots_per_frame", "uav_speed_max", "uav_min_separation",
         "cpu_capacity_max", "cycles_per_bit", "device_local_freq", "task_bits_min",
         "task_bits_max", "bandwidth_total", "carrier_freq", "noise_density",
         "tx_power_device", "tx_power_uav", "channel", "mobility", "kappa"},
        ctx);
    WorldConfig w;
    w.region_side = detail::get_or(j, "region_side", w.region_side, ctx);
    w.altitude_min = detail::get_or(j, "altitude_min", w.altitude_min, ctx);
    w.altitude_max = detail::get_or(j, "altitude_max", w.altitude_max, ctx);
    w.num_uavs = detail::get_or(j, "num_uavs", w.num_uavs, ctx);
    w.num_devices = detail::get_or(j, "num_devices", w.num_devices, ctx);
    w.frame_duration = detail::get_or(j, "frame_duration", w.frame_duration, ctx);
    w.slots_per_frame = detail::get_or(j, "slots_per_frame", w.slots_per_frame, ctx);
    w.uav_speed_max = detail::get_or(j, "uav_speed_max", w.uav_speed_max, ctx);
    w.uav_min_separation =
        detail::get_or(j, "uav_min_separation", w.uav_min_separation, ctx);
    w.cpu_capacity_max = detail::get_or(j, "cpu_capacity_max", w.cpu_capacity_max, ctx);
    w.cycles_per_bit = detail::get_or(j, "cycles_per_bit", w.cycles_per_bit, ctx);
    w.device_local_freq =
        detail::get_or(j, "device_local_freq", w.device_local_freq, ctx);
    w.task_bits_min = detail::get_or(j, "task_bits_min", w.task_bits_min, ctx);
    w.task_bits_max = detail::get_or(j, "task_bits_max", w.task_bits_max, ctx);
    w.bandwidth_total = detail::get_or(j, "bandwidth_total", w.bandwidth_total, ctx);
    w.carrier_freq = detail::get_or(j, "carrier_freq", w.carrier_freq, ctx);
    w.noise_density = detail::get_or(j, "noise_density", w.noise_density, ctx);
    w.tx_power_device = detail::get_or(j, "tx_power_device", w.tx_power_device, ctx);
    w.tx_power_uav = detail::get_or(j, "tx_power_uav", w.tx_power_uav, ctx);
    if (j.contains("channel"))
      w.channel = ChannelConfig::from_json(j.at("channel"), "world.channel");
    if (j.contains("mobility"))
      w.mobility = MobilityConfig::from_json(j.at("mobility"), "world.mobility");
    w.kappa = detail::get_or(j, "kappa", w.kappa, ctx);
    w.validate();
    return w;
  }

  json to_json() const {
    return {{"region_side", region_side},
            {"altitude_min", altitude_min},
            {"altitude_max", altitude_max},
            {"num_uavs", num_uavs},
            {"num_devices", num_devices},
            {"frame_duration", frame_duration},
            {"slots_per_frame", slots_per_frame},
            {"uav_speed_max", uav_speed_max},
            {"uav_min_separation", uav_min_separation},
            {"cpu_capacity_max", cpu_capacity_max},
            {"cycles_per_bit", cycles_per_bit},
            {"device_local_freq", device_local_freq},
            {"task_bits_min", task_bits_min},
            {"task_bits_max", task_bits_max},
            {"bandwidth_total", bandwidth_total},
            {"carrier_freq", carrier_freq},
            {"noise_density", noise_density},
            {"tx_power_device", tx_power_device},
            {"tx_power_uav", tx_power_uav},
            {"channel", channel.to_json()},
            {"mobility", mobility.to_json()},
            {"kappa", kappa}};
  }
};

// Local rewards: negative device energy minus these penalties.
struct RewardConfig {
  double lambda_collision = 1.0;    // J per meter of separation violation
  double lambda_unfinished = 10.0;  // J per normalized unfinished task, at frame end

  static RewardConfig from_json(const json& j) {
    detail::check_keys(j, {"lambda_collision", "lambda_unfinished"}, "reward");
    RewardConfig r;
    r.lambda_collision = detail::get_or(j, "lambda_collision", r.lambda_collision, "reward");
    r.lambda_unfinished =
        detail::get_or(j, "lambda_unfinished", r.lambda_unfinished, "reward");
    return r;
  }
  json to_json() const {
    return {{"lambda_collision", lambda_collision}, {"lambda_unfinished", lambda_unfinished}};
  }
};

struct AgentHyperparams {
  double gamma = 0.95;
  double tau = 0.005;
  double actor_lr = 1e-4;
  double critic_lr = 1e-3;
  int batch_size = 128;
  int buffer_capacity = 50000;
  double noise_sigma_start = 0.2;
  double noise_sigma_end = 0.01;
  int noise_decay_episodes = 0;  // 0 = resolve to 80% of train_episodes
  int warmup_steps = 1000;       // uniform random raw actions before updates

  void validate() const {
    if (gamma < 0.0 || gamma > 1.0) throw ConfigError("agent.gamma must lie in [0,1]");
    if (tau <= 0.0 || tau > 1.0) throw ConfigError("agent.tau must lie in (0,1]");
    if (batch_size < 1) throw ConfigError("agent.batch_size must be >= 1");
    if (buffer_capacity < 1) throw ConfigError("agent.buffer_capacity must be >= 1");
    if (actor_lr <= 0.0 || critic_lr <= 0.0)
      throw ConfigError("agent.actor_lr and agent.critic_lr must be positive");
    if (warmup_steps < 0) throw ConfigError("agent.warmup_steps must be >= 0");
    if (noise_decay_episodes < 0)
      throw ConfigError("agent.noise_decay_episodes must be >= 0");
  }

  double sigma_for_episode(int episode_index) const {
    if (noise_decay_episodes <= 0) return noise_sigma_end;
    const double t =
        std::min(1.0, static_cast<double>(episode_index) / noise_decay_episodes);
    return noise_sigma_start + (noise_sigma_end - noise_sigma_start) * t;
  }

  static AgentHyperparams from_json(const json& j) {
    const std::string ctx = "agent";
    detail::check_keys(j,
                       {"gamma", "tau", "actor_lr", "critic_lr", "batch_size",
                        "buffer_capacity", "noise_sigma_start", "noise_sigma_end",
                        "noise_decay_episodes", "warmup_steps"},
                       ctx);
    AgentHyperparams a;
    a.gamma = detail::get_or(j, "gamma", a.gamma, ctx);
    a.tau = detail::get_or(j, "tau", a.tau, ctx);
    a.actor_lr = detail::get_or(j, "actor_lr", a.actor_lr, ctx);
    a.critic_lr = detail::get_or(j, "critic_lr", a.critic_lr, ctx);
    a.batch_size = detail::get_or(j, "batch_size", a.batch_size, ctx);
    a.buffer_capacity = detail::get_or(j, "buffer_capacity", a.buffer_capacity, ctx);
    a.noise_sigma_start = detail::get_or(j, "noise_sigma_start", a.noise_sigma_start, ctx);
    a.noise_sigma_end = detail::get_or(j, "noise_sigma_end", a.noise_sigma_end, ctx);
    a.noise_decay_episodes =
        detail::get_or(j, "noise_decay_episodes", a.noise_decay_episodes, ctx);
    a.warmup_steps = detail::get_or(j, "warmup_steps", a.warmup_steps, ctx);
    a.validate();
    return a;
  }

  json to_json() const {
    return {{"gamma", gamma},
            {"tau", tau},
            {"actor_lr", actor_lr},
            {"critic_lr", critic_lr},
            {"batch_size", batch_size},
            {"buffer_capacity", buffer_capacity},
            {"noise_sigma_start", noise_sigma_start},
            {"noise_sigma_end", noise_sigma_end},
            {"noise_decay_episodes", noise_decay_episodes},
            {"warmup_steps", warmup_steps}};
  }
};

enum class OffloadWiring { shared_trunk, cpu_conditioned };

inline std::string to_string(OffloadWiring w) {
  return w == OffloadWiring::shared_trunk ? "shared_trunk" : "cpu_conditioned";
}

inline OffloadWiring offload_wiring_from_string(const std::string& s) {
  if (s == "shared_trunk") return OffloadWiring::shared_trunk;
  if (s == "cpu_conditioned") return OffloadWiring::cpu_conditioned;
  throw ConfigError("nets.offload_wiring: unknown value \"" + s + "\"");
}

struct NetConfig {
  std::vector<int> trunk = {128, 128, 128};
  std::vector<int> branch = {64, 32};
  std::vector<int> critic = {512, 256, 128, 64};
  OffloadWiring offload_wiring = OffloadWiring::shared_trunk;

  void validate() const {
    auto check = [](const std::vector<int>& widths, const char* name) {
      if (widths.empty())
        throw ConfigError(std::string("nets.") + name + " must not be empty");
      for (int w : widths)
        if (w < 1) throw ConfigError(std::string("nets.") + name + " widths must be >= 1");
    };
    check(trunk, "trunk");
    check(branch, "branch");
    check(critic, "critic");
  }

  static NetConfig from_json(const json& j) {
    detail::check_keys(j, {"trunk", "branch", "critic", "offload_wiring"}, "nets");
    NetConfig n;
    n.trunk = detail::get_or(j, "trunk", n.trunk, "nets");
    n.branch = detail::get_or(j, "branch", n.branch, "nets");
    n.critic = detail::get_or(j, "critic", n.critic, "nets");
    if (j.contains("offload_wiring"))
      n.offload_wiring = offload_wiring_from_string(
          detail::require<std::string>(j, "offload_wiring", "nets"));
    n.validate();
    return n;
  }

  json to_json() const {
    return {{"trunk", trunk},
            {"branch", branch},
            {"critic", critic},
            {"offload_wiring", to_string(offload_wiring)}};
  }
};

struct ExperimentConfig {
  WorldConfig world;
  RewardConfig reward;
  AgentHyperparams agent;
  NetConfig nets;
  int train_episodes = 3000;
  int eval_every = 50;     // evaluation cadence in episodes
  int eval_episodes = 10;  // deterministic evaluation seeds per evaluation
  int eval_frames = 4;     // consecutive frames per evaluation episode
  std::vector<std::string> schemes = {"dtde",      "ctde",        "ctce",
                                      "dtde_no_msg", "naive_actor", "separated"};
  std::string fixture_path;  // optional pinned scenario

  void validate() const {
    world.validate();
    agent.validate();
    nets.validate();
    if (train_episodes < 0) throw ConfigError("train_episodes must be >= 0");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
    if (eval_frames < 1) throw ConfigError("eval_frames must be >= 1");
  }

  // Hyperparams with defaults resolved against this experiment.
  AgentHyperparams resolved_agent() const {
    AgentHyperparams a = agent;
    if (a.noise_decay_episodes == 0)
      a.noise_decay_episodes = static_cast<int>(std::lround(0.8 * train_episodes));
    return a;
  }

  static ExperimentConfig from_json(const json& j) {
    detail::check_keys(j,
                       {"world", "reward", "agent", "nets", "train_episodes",
                        "eval_every", "eval_episodes", "eval_frames", "schemes",
                        "fixture"},
                       "config");
    ExperimentConfig c;
    if (j.contains("world")) c.world = WorldConfig::from_json(j.at("world"));
    if (j.contains("reward")) c.reward = RewardConfig::from_json(j.at("reward"));
    if (j.contains("agent")) c.agent = AgentHyperparams::from_json(j.at("agent"));
    if (j.contains("nets")) c.nets = NetConfig::from_json(j.at("nets"));
    c.train_episodes = detail::get_or(j, "train_episodes", c.train_episodes, "config");
    c.eval_every = detail::get_or(j, "eval_every", c.eval_every, "config");
    c.eval_episodes = detail::get_or(j, "eval_episodes", c.eval_episodes, "config");
    c.eval_frames = detail::get_or(j, "eval_frames", c.eval_frames, "config");
    c.schemes = detail::get_or(j, "schemes", c.schemes, "config");
    c.fixture_path = detail::get_or<std::string>(j, "fixture", "", "config");
    c.validate();
    return c;
  }

  static ExperimentConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return from_json(j);
  }

  json to_json() const {
    json j = {{"world", world.to_json()},
              {"reward", reward.to_json()},
              {"agent", agent.to_json()},
              {"nets", nets.to_json()},
              {"train_episodes", train_episodes},
              {"eval_every", eval_every},
              {"eval_episodes", eval_episodes},
              {"eval_frames", eval_frames},
              {"schemes", schemes}};
    if (!fixture_path.empty()) j["fixture"] = fixture_path;
    return j;
  }
};

}  // namespace uavmec
