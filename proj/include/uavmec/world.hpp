#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "uavmec/config.hpp"
#include "uavmec/geom.hpp"
#include "uavmec/rng.hpp"

namespace uavmec {

inline constexpr double kSpeedOfLight = 3e8;  // m/s

struct DeviceState {
  Vec2 position;       // ground plane, m
  Vec2 velocity;       // m/s
  Vec2 mean_velocity;  // Gauss-Markov attractor, fixed per device
  double remaining_bits = 0.0;
  double initial_bits = 0.0;  // task volume of the current frame
};

struct UavPose {
  Vec3 position;
};

struct SlotOutcome {
  double bits_offloaded = 0.0;
  double bits_local = 0.0;
  double t_uplink = 0.0;          // s
  double t_remote_compute = 0.0;  // s
  double t_local_compute = 0.0;   // s
  double energy_tx = 0.0;         // J, device transmit energy
  double energy_local = 0.0;      // J, device local-compute energy
};

// One task volume per device, uniform over [task_bits_min, task_bits_max].
inline std::vector<double> sample_tasks(RngStream& rng, const WorldConfig& cfg) {
  std::vector<double> bits(cfg.num_devices);
  for (double& b : bits) b = rng.uniform(cfg.task_bits_min, cfg.task_bits_max);
  return bits;
}

namespace detail {

// Specular reflection into [0, limit]; flips the velocity component when folded.
inline void reflect_axis(double& pos, double& vel, double limit) {
  while (pos < 0.0 || pos > limit) {
    if (pos < 0.0) {
      pos = -pos;
      vel = -vel;
    } else {
      pos = 2.0 * limit - pos;
      vel = -vel;
    }
  }
}

}  // namespace detail

// First-order Gauss-Markov velocity update, then boundary-reflected advance.
inline DeviceState step_device_mobility(const DeviceState& device, RngStream& rng,
                                        const WorldConfig& cfg) {
  const double alpha = cfg.mobility.alpha;
  const double sigma = cfg.mobility.speed_sigma;
  const double noise_scale = std::sqrt(std::max(0.0, 1.0 - alpha * alpha)) * sigma;
  DeviceState next = device;
  next.velocity.x = alpha * device.velocity.x + (1.0 - alpha) * device.mean_velocity.x +
                    noise_scale * rng.normal();
  next.velocity.y = alpha * device.velocity.y + (1.0 - alpha) * device.mean_velocity.y +
                    noise_scale * rng.normal();
  next.position = device.position + next.velocity * cfg.slot_duration();
  detail::reflect_axis(next.position.x, next.velocity.x, cfg.region_side);
  detail::reflect_axis(next.position.y, next.velocity.y, cfg.region_side);
  return next;
}

// Clamps the step to the per-slot travel budget (rescaled, direction kept),
// then clamps the resulting position into the region and altitude band.
inline UavPose apply_uav_displacement(const UavPose& pose, const Vec3& raw_displacement,
                                      const WorldConfig& cfg) {
  Vec3 step = raw_displacement;
  const double limit = cfg.max_step_distance();
  const double n = step.norm();
  if (n > limit && n > 0.0) step = step * (limit / n);
  UavPose next;
  next.position = pose.position + step;
  next.position.x = std::clamp(next.position.x, 0.0, cfg.region_side);
  next.position.y = std::clamp(next.position.y, 0.0, cfg.region_side);
  next.position.z = std::clamp(next.position.z, cfg.altitude_min, cfg.altitude_max);
  return next;
}

// P(LoS) as a sigmoid of the elevation angle in degrees.
inline double line_of_sight_probability(double elevation_deg, const WorldConfig& cfg) {
  const double a = cfg.channel.a;
  const double b = cfg.channel.b;
  return 1.0 / (1.0 + a * std::exp(-b * (elevation_deg - a)));
}

// Expected (LoS-probability-weighted) path loss; linear power gain.
inline double channel_gain(const UavPose& uav, const Vec2& device_pos,
                           const WorldConfig& cfg) {
  const double dx = uav.position.x - device_pos.x;
  const double dy = uav.position.y - device_pos.y;
  const double horizontal = std::sqrt(dx * dx + dy * dy);
  const double altitude = uav.position.z;
  const double dist = std::sqrt(horizontal * horizontal + altitude * altitude);
  if (dist <= 0.0) throw std::domain_error("channel_gain: coincident positions");
  const double elevation_deg =
      std::atan2(altitude, horizontal) * 180.0 / std::numbers::pi;
  const double p_los = line_of_sight_probability(elevation_deg, cfg);
  const double fspl_db =
      20.0 * std::log10(4.0 * std::numbers::pi * cfg.carrier_freq * dist / kSpeedOfLight);
  const double pl_db = fspl_db + p_los * cfg.channel.eta_los_db +
                       (1.0 - p_los) * cfg.channel.eta_nlos_db;
  return std::pow(10.0, -pl_db / 10.0);
}

// Shannon rate on the device's dedicated FDMA slice.
inline double uplink_rate(double gain, const WorldConfig& cfg) {
  const double band = cfg.bandwidth_per_device();
  const double snr = cfg.tx_power_device * gain / (cfg.noise_density * band);
  return band * std::log2(1.0 + snr);
}

// Upload-then-compute budget for one slot. The offloaded bits are capped so
// that uplink plus VM compute always fit within the slot.
inline SlotOutcome slot_execute(double remaining_bits, double offload_ratio, double f_vm,
                                double rate, const WorldConfig& cfg) {
  const bool bad = !std::isfinite(remaining_bits) || remaining_bits < 0.0 ||
                   !std::isfinite(offload_ratio) || offload_ratio < 0.0 ||
                   offload_ratio > 1.0 || !std::isfinite(f_vm) || f_vm < 0.0 ||
                   !std::isfinite(rate) || rate < 0.0;
  if (bad) throw std::domain_error("slot_execute: invalid slot inputs");

  const double slot = cfg.slot_duration();
  SlotOutcome out;

  double offload_cap = 0.0;
  if (rate > 0.0 && f_vm > 0.0)
    offload_cap = slot / (1.0 / rate + cfg.cycles_per_bit / f_vm);
  out.bits_offloaded = std::min(offload_ratio * remaining_bits, offload_cap);

  const double local_cap = cfg.device_local_freq * slot / cfg.cycles_per_bit;
  out.bits_local = std::min((1.0 - offload_ratio) * remaining_bits, local_cap);

  if (out.bits_offloaded > 0.0) {
    out.t_uplink = out.bits_offloaded / rate;
    out.t_remote_compute = out.bits_offloaded * cfg.cycles_per_bit / f_vm;
  }
  if (out.bits_local > 0.0)
    out.t_local_compute = out.bits_local * cfg.cycles_per_bit / cfg.device_local_freq;

  out.energy_tx = cfg.tx_power_device * out.t_uplink;
  out.energy_local = cfg.kappa * cfg.device_local_freq * cfg.device_local_freq *
                     cfg.cycles_per_bit * out.bits_local;
  return out;
}

inline double min_uav_separation(std::span<const UavPose> poses) {
  if (poses.size() < 2)
    throw std::invalid_argument("min_uav_separation: need at least 2 poses");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < poses.size(); ++i)
    for (std::size_t k = i + 1; k < poses.size(); ++k)
      best = std::min(best, distance(poses[i].position, poses[k].position));
  return best;
}

}  // namespace uavmec
