#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uavmec/agent.hpp"
#include "uavmec/config.hpp"
#include "uavmec/env.hpp"

namespace uavmec {

enum class SchemeId { dtde, ctde, ctce, dtde_no_msg, naive_actor, separated };

inline const std::vector<SchemeId>& all_schemes() {
  static const std::vector<SchemeId> v = {SchemeId::dtde,        SchemeId::ctde,
                                          SchemeId::ctce,        SchemeId::dtde_no_msg,
                                          SchemeId::naive_actor, SchemeId::separated};
  return v;
}

inline std::string to_string(SchemeId s) {
  switch (s) {
    case SchemeId::dtde: return "dtde";
    case SchemeId::ctde: return "ctde";
    case SchemeId::ctce: return "ctce";
    case SchemeId::dtde_no_msg: return "dtde_no_msg";
    case SchemeId::naive_actor: return "naive_actor";
    case SchemeId::separated: return "separated";
  }
  return "dtde";
}

inline SchemeId scheme_from_string(const std::string& s) {
  for (SchemeId id : all_schemes())
    if (to_string(id) == s) return id;
  throw ConfigError("unknown scheme: \"" + s + "\"");
}

inline bool scheme_zero_messages(SchemeId s) { return s == SchemeId::dtde_no_msg; }

struct EvalSummary {
  double energy_mean = 0.0;  // J per device per episode
  double energy_std = 0.0;
  double completion_mean = 0.0;
  double collisions_mean = 0.0;
};

struct EpisodeRecord {
  int episode = 0;  // 1-based
  double train_energy = 0.0;  // J per device, exploration episode
  double train_completion = 0.0;
  int train_collisions = 0;
  double critic_loss = std::numeric_limits<double>::quiet_NaN();
  double actor_objective = std::numeric_limits<double>::quiet_NaN();
  double wallclock_s = 0.0;  // cumulative; persisted separately from metrics
  std::optional<EvalSummary> eval;
};

struct TrainReport {
  std::vector<EpisodeRecord> rows;
};

struct ActBundle {
  std::vector<std::vector<double>> raws;  // one per agent (ctce: single joint raw)
  std::vector<LocalAction> actions;       // always one per UAV
};

// A trained (or training) policy bundle with its learning state. Execution is
// decentralized for every scheme; the schemes differ in what their updates see.
class Squad {
 public:
  virtual ~Squad() = default;
  virtual SchemeId scheme() const = 0;
  virtual ActBundle act(const Environment& env,
                        const std::vector<FeatureVector>& states, double sigma) = 0;
  virtual ActBundle act_warmup(const Environment& env,
                               const std::vector<FeatureVector>& states) = 0;
  virtual void observe(const std::vector<FeatureVector>& states,
                       const std::vector<std::vector<double>>& raws,
                       const std::vector<double>& rewards,
                       const std::vector<FeatureVector>& next_states, bool done) = 0;
  virtual bool ready() const = 0;
  virtual std::pair<double, double> update() = 0;  // (critic loss, actor objective)
  virtual json checkpoint_agents() const = 0;      // array, one entry per stored net bundle
  virtual void restore_agents(const json& agents) = 0;
};

namespace detail {

inline std::vector<double> concat(const std::vector<FeatureVector>& parts) {
  std::vector<double> out;
  std::size_t total = 0;
  for (const auto& p : parts) total += p.size();
  out.reserve(total);
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Decentralized family: dtde, dtde_no_msg, naive_actor, separated.
// One actor-critic pair and one private buffer per UAV; an agent's update
// only ever receives transitions from its own buffer.
// ---------------------------------------------------------------------------
class DecentralizedSquad : public Squad {
 public:
  DecentralizedSquad(SchemeId scheme, const ExperimentConfig& cfg, std::uint64_t seed)
      : scheme_(scheme) {
    const AgentHyperparams hyper = cfg.resolved_agent();
    const int sdim = local_state_dim(cfg.world.num_uavs, cfg.world.num_devices);
    ActorLayout layout;
    layout.mode = scheme == SchemeId::naive_actor ? ActorMode::naive
                  : scheme == SchemeId::separated ? ActorMode::displacement_only
                                                  : ActorMode::full;
    layout.wiring = cfg.nets.offload_wiring;
    layout.state_dim = sdim;
    layout.num_devices = cfg.world.num_devices;
    layout.trunk_widths = cfg.nets.trunk;
    layout.branch_widths = cfg.nets.branch;
    agents_.reserve(cfg.world.num_uavs);
    for (int u = 0; u < cfg.world.num_uavs; ++u)
      agents_.emplace_back(layout, cfg.nets.critic, hyper, cfg.world, seed, u);
  }

  SchemeId scheme() const override { return scheme_; }
  std::vector<DdpgAgent>& agents() { return agents_; }

  ActBundle act(const Environment& env, const std::vector<FeatureVector>& states,
                double sigma) override {
    return bundle(env, states, [&](int u) { return agents_[u].act(states[u], sigma); });
  }

  ActBundle act_warmup(const Environment& env,
                       const std::vector<FeatureVector>& states) override {
    return bundle(env, states, [&](int u) {
      (void)states;
      return agents_[u].act_warmup();
    });
  }

  void observe(const std::vector<FeatureVector>& states,
               const std::vector<std::vector<double>>& raws,
               const std::vector<double>& rewards,
               const std::vector<FeatureVector>& next_states, bool done) override {
    for (std::size_t u = 0; u < agents_.size(); ++u)
      agents_[u].store({states[u], raws[u], rewards[u], next_states[u], done});
  }

  bool ready() const override {
    for (const auto& a : agents_)
      if (!a.can_update()) return false;
    return true;
  }

  std::pair<double, double> update() override {
    double closs = 0.0;
    double aobj = 0.0;
    for (auto& agent : agents_) {
      const auto batch = agent.sample_batch();
      closs += agent.critic_update(batch);
      aobj += agent.actor_update(batch);
    }
    const double n = static_cast<double>(agents_.size());
    return {closs / n, aobj / n};
  }

  json checkpoint_agents() const override {
    json arr = json::array();
    for (const auto& a : agents_) arr.push_back(a.to_json());
    return arr;
  }

  void restore_agents(const json& agents) override {
    if (agents.size() != agents_.size())
      throw ConfigError("checkpoint: agent count mismatch");
    for (std::size_t u = 0; u < agents_.size(); ++u) agents_[u].load_nets(agents[u]);
  }

 private:
  template <typename ActFn>
  ActBundle bundle(const Environment& env, const std::vector<FeatureVector>& states,
                   ActFn&& act_fn) {
    ActBundle out;
    out.raws.resize(agents_.size());
    out.actions.resize(agents_.size());
    if (scheme_ == SchemeId::separated) {
      std::vector<Vec3> displacements(agents_.size());
      for (std::size_t u = 0; u < agents_.size(); ++u) {
        ActResult r = act_fn(static_cast<int>(u));
        displacements[u] = r.action.displacement;
        out.raws[u] = std::move(r.raw);
      }
      out.actions = env.separated_heuristic(displacements);
    } else {
      for (std::size_t u = 0; u < agents_.size(); ++u) {
        ActResult r = act_fn(static_cast<int>(u));
        out.raws[u] = std::move(r.raw);
        out.actions[u] = std::move(r.action);
      }
    }
    return out;
  }

  SchemeId scheme_;
  std::vector<DdpgAgent> agents_;
};

// ---------------------------------------------------------------------------
// CTDE: actors identical to the decentralized ones; per-agent critics observe
// the concatenation of all local states and all (projected) actions, trained
// from one shared buffer of joint transitions.
// ---------------------------------------------------------------------------
struct JointTransition {
  std::vector<FeatureVector> states;
  std::vector<std::vector<double>> raws;
  std::vector<double> rewards;
  std::vector<FeatureVector> next_states;
  bool done = false;
};

class CtdeSquad : public Squad {
 public:
  CtdeSquad(const ExperimentConfig& cfg, std::uint64_t seed)
      : hyper_(cfg.resolved_agent()),
        world_(cfg.world),
        buffer_(hyper_.buffer_capacity),
        sample_rng_(RngStream::derive(seed, "joint-sample")) {
    const int num_uavs = cfg.world.num_uavs;
    const int sdim = local_state_dim(num_uavs, cfg.world.num_devices);
    ActorLayout layout;
    layout.mode = ActorMode::full;
    layout.wiring = cfg.nets.offload_wiring;
    layout.state_dim = sdim;
    layout.num_devices = cfg.world.num_devices;
    layout.trunk_widths = cfg.nets.trunk;
    layout.branch_widths = cfg.nets.branch;
    const int global_dim = num_uavs * (sdim + layout.feature_dim());
    for (int u = 0; u < num_uavs; ++u) {
      RngStream init = RngStream::derive(seed, "agent-init", u);
      actors_.emplace_back(layout, init);
      critics_.emplace_back(mlp_spec(global_dim, cfg.nets.critic, 1), init);
      noise_rngs_.push_back(RngStream::derive(seed, "agent-noise", u));
    }
    for (int u = 0; u < num_uavs; ++u) {
      actor_targets_.push_back(actors_[u]);
      critic_targets_.push_back(critics_[u]);
      actor_adams_.emplace_back(actors_[u], hyper_.actor_lr);
      critic_adams_.emplace_back(critics_[u], hyper_.critic_lr);
      actor_grads_.push_back(actors_[u].make_gradients());
      critic_grads_.push_back(critics_[u].make_gradients());
    }
  }

  SchemeId scheme() const override { return SchemeId::ctde; }

  ActBundle act(const Environment&, const std::vector<FeatureVector>& states,
                double sigma) override {
    ActBundle out;
    const ProjectionContext ctx = actors_[0].projection();
    for (std::size_t u = 0; u < actors_.size(); ++u) {
      auto raw = actors_[u].act_raw(states[u], sigma, &noise_rngs_[u]);
      ProjCache pc = project_raw(raw, ctx);
      out.actions.push_back(to_local_action(pc, ctx, world_));
      out.raws.push_back(std::move(raw));
    }
    return out;
  }

  ActBundle act_warmup(const Environment&,
                       const std::vector<FeatureVector>&) override {
    ActBundle out;
    const ProjectionContext ctx = actors_[0].projection();
    for (std::size_t u = 0; u < actors_.size(); ++u) {
      std::vector<double> raw(actors_[u].layout().raw_dim());
      for (double& v : raw) v = noise_rngs_[u].uniform(-kWarmupRawRange, kWarmupRawRange);
      ProjCache pc = project_raw(raw, ctx);
      out.actions.push_back(to_local_action(pc, ctx, world_));
      out.raws.push_back(std::move(raw));
    }
    return out;
  }

  void observe(const std::vector<FeatureVector>& states,
               const std::vector<std::vector<double>>& raws,
               const std::vector<double>& rewards,
               const std::vector<FeatureVector>& next_states, bool done) override {
    buffer_.store({states, raws, rewards, next_states, done});
  }

  bool ready() const override { return buffer_.size() >= hyper_.batch_size; }

  std::pair<double, double> update() override {
    const auto batch = buffer_.sample(hyper_.batch_size, sample_rng_);
    const int n = static_cast<int>(batch.size());
    const int num_uavs = static_cast<int>(actors_.size());
    const ProjectionContext ctx = actors_[0].projection();
    const int sdim = actors_[0].layout().state_dim;
    const int adim = actors_[0].layout().feature_dim();

    // Joint next input through the target actors.
    Matrix next_in(n, num_uavs * (sdim + adim));
    std::vector<Matrix> next_states_u(num_uavs);
    for (int u = 0; u < num_uavs; ++u) {
      Matrix xs(n, sdim);
      for (int r = 0; r < n; ++r)
        std::copy(batch[r]->next_states[u].begin(), batch[r]->next_states[u].end(),
                  xs.row(r));
      const auto fwd = actor_targets_[u].forward_project(xs);
      for (int r = 0; r < n; ++r) {
        std::copy(xs.row(r), xs.row(r) + sdim, next_in.row(r) + u * sdim);
        std::copy(fwd.features.row(r), fwd.features.row(r) + adim,
                  next_in.row(r) + num_uavs * sdim + u * adim);
      }
      next_states_u[u] = std::move(xs);
    }

    // Joint current input from the stored raw actions.
    Matrix cur_in(n, num_uavs * (sdim + adim));
    std::vector<Matrix> states_u(num_uavs);
    for (int u = 0; u < num_uavs; ++u) {
      Matrix xs(n, sdim);
      for (int r = 0; r < n; ++r) {
        std::copy(batch[r]->states[u].begin(), batch[r]->states[u].end(), xs.row(r));
        const ProjCache pc = project_raw(batch[r]->raws[u], ctx);
        std::copy(xs.row(r), xs.row(r) + sdim, cur_in.row(r) + u * sdim);
        std::copy(pc.features.begin(), pc.features.end(),
                  cur_in.row(r) + num_uavs * sdim + u * adim);
      }
      states_u[u] = std::move(xs);
    }

    double closs_total = 0.0;
    double aobj_total = 0.0;
    for (int u = 0; u < num_uavs; ++u) {
      // critic step against this agent's local reward
      ForwardCache tcache;
      const Matrix& qn = critic_targets_[u].forward(next_in, tcache);
      ForwardCache ccache;
      const Matrix& q = critics_[u].forward(cur_in, ccache);
      Matrix dq(n, 1);
      double loss = 0.0;
      for (int r = 0; r < n; ++r) {
        const double y = batch[r]->rewards[u] +
                         (batch[r]->done ? 0.0 : hyper_.gamma * qn.at(r, 0));
        const double err = q.at(r, 0) - y;
        loss += err * err;
        dq.at(r, 0) = 2.0 * err / n;
      }
      loss /= n;
      if (!std::isfinite(loss)) throw DivergenceError("ctde critic loss diverged");
      critic_grads_[u].zero();
      critics_[u].backward(ccache, dq, &critic_grads_[u], nullptr);
      adam_step(critics_[u], critic_grads_[u], critic_adams_[u]);
      closs_total += loss;

      // actor step: replace this agent's feature slice by its own actor output
      const auto fwd = actors_[u].forward_project(states_u[u]);
      Matrix actor_in = cur_in;
      for (int r = 0; r < n; ++r)
        std::copy(fwd.features.row(r), fwd.features.row(r) + adim,
                  actor_in.row(r) + num_uavs * sdim + u * adim);
      ForwardCache acache;
      const Matrix& qa = critics_[u].forward(actor_in, acache);
      double obj = 0.0;
      for (int r = 0; r < n; ++r) obj += qa.at(r, 0);
      obj /= n;
      if (!std::isfinite(obj)) throw DivergenceError("ctde actor objective diverged");
      Matrix dqa(n, 1);
      for (int r = 0; r < n; ++r) dqa.at(r, 0) = -1.0 / n;
      Matrix dinput;
      critics_[u].backward(acache, dqa, nullptr, &dinput);
      Matrix dfeat(n, adim);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < adim; ++c)
          dfeat.at(r, c) = dinput.at(r, num_uavs * sdim + u * adim + c);
      actor_grads_[u].zero();
      actors_[u].backward(fwd, dfeat, actor_grads_[u]);
      actor_adam_step(actors_[u], actor_grads_[u], actor_adams_[u]);
      actor_soft_update(actor_targets_[u], actors_[u], hyper_.tau);
      soft_update(critic_targets_[u], critics_[u], hyper_.tau);
      aobj_total += obj;
    }
    return {closs_total / num_uavs, aobj_total / num_uavs};
  }

  json checkpoint_agents() const override {
    json arr = json::array();
    for (std::size_t u = 0; u < actors_.size(); ++u)
      arr.push_back({{"actor", actors_[u].to_json()},
                     {"critic", mlp_to_json(critics_[u])},
                     {"actor_target", actor_targets_[u].to_json()},
                     {"critic_target", mlp_to_json(critic_targets_[u])}});
    return arr;
  }

  void restore_agents(const json& agents) override {
    if (agents.size() != actors_.size())
      throw ConfigError("checkpoint: agent count mismatch");
    for (std::size_t u = 0; u < actors_.size(); ++u) {
      actors_[u] = MultiBranchActor::from_json(agents[u].at("actor"));
      critics_[u] = mlp_from_json(agents[u].at("critic"));
      actor_targets_[u] = MultiBranchActor::from_json(agents[u].at("actor_target"));
      critic_targets_[u] = mlp_from_json(agents[u].at("critic_target"));
    }
  }

 private:
  AgentHyperparams hyper_;
  WorldConfig world_;
  std::vector<MultiBranchActor> actors_;
  std::vector<MultiBranchActor> actor_targets_;
  std::vector<Mlp> critics_;
  std::vector<Mlp> critic_targets_;
  std::vector<ActorAdam> actor_adams_;
  std::vector<AdamState> critic_adams_;
  std::vector<ActorGrads> actor_grads_;
  std::vector<GradientSet> critic_grads_;
  ReplayBuffer<JointTransition> buffer_;
  std::vector<RngStream> noise_rngs_;
  RngStream sample_rng_;
};

// ---------------------------------------------------------------------------
// CTCE: one actor over the concatenated local states emitting the joint raw
// action through parallel branch sets; one critic over global state+action;
// the reward is the sum of the local rewards.
// ---------------------------------------------------------------------------
class CtceSquad : public Squad {
 public:
  CtceSquad(const ExperimentConfig& cfg, std::uint64_t seed)
      : hyper_(cfg.resolved_agent()),
        world_(cfg.world),
        buffer_(hyper_.buffer_capacity),
        noise_rng_(RngStream::derive(seed, "agent-noise", 0)),
        sample_rng_(RngStream::derive(seed, "joint-sample")) {
    const int num_uavs = cfg.world.num_uavs;
    const int sdim = local_state_dim(num_uavs, cfg.world.num_devices);
    ActorLayout layout;
    layout.mode = ActorMode::full;
    layout.wiring = cfg.nets.offload_wiring;
    layout.state_dim = num_uavs * sdim;
    layout.num_devices = cfg.world.num_devices;
    layout.branch_sets = num_uavs;
    layout.trunk_widths = cfg.nets.trunk;
    layout.branch_widths = cfg.nets.branch;
    RngStream init = RngStream::derive(seed, "agent-init", 0);
    actor_ = MultiBranchActor(layout, init);
    critic_ = Mlp(mlp_spec(layout.state_dim + layout.feature_dim(), cfg.nets.critic, 1),
                  init);
    actor_target_ = actor_;
    critic_target_ = critic_;
    actor_adam_.emplace(actor_, hyper_.actor_lr);
    critic_adam_.emplace(critic_, hyper_.critic_lr);
    actor_grads_ = actor_.make_gradients();
    critic_grads_ = critic_.make_gradients();
  }

  SchemeId scheme() const override { return SchemeId::ctce; }

  ActBundle act(const Environment&, const std::vector<FeatureVector>& states,
                double sigma) override {
    const auto joint = detail::concat(states);
    auto raw = actor_.act_raw(joint, sigma, &noise_rng_);
    return split_joint(std::move(raw));
  }

  ActBundle act_warmup(const Environment&,
                       const std::vector<FeatureVector>&) override {
    std::vector<double> raw(actor_.layout().raw_dim());
    for (double& v : raw) v = noise_rng_.uniform(-kWarmupRawRange, kWarmupRawRange);
    return split_joint(std::move(raw));
  }

  void observe(const std::vector<FeatureVector>& states,
               const std::vector<std::vector<double>>& raws,
               const std::vector<double>& rewards,
               const std::vector<FeatureVector>& next_states, bool done) override {
    buffer_.store({states, raws, rewards, next_states, done});
  }

  bool ready() const override { return buffer_.size() >= hyper_.batch_size; }

  std::pair<double, double> update() override {
    const auto batch = buffer_.sample(hyper_.batch_size, sample_rng_);
    const int n = static_cast<int>(batch.size());
    const ProjectionContext ctx = actor_.projection();
    const int sdim = actor_.layout().state_dim;
    const int adim = actor_.layout().feature_dim();
    const int per_set = actor_.layout().raw_dim_per_set();

    Matrix next_states(n, sdim);
    for (int r = 0; r < n; ++r) {
      const auto joint = detail::concat(batch[r]->next_states);
      std::copy(joint.begin(), joint.end(), next_states.row(r));
    }
    const auto tfwd = actor_target_.forward_project(next_states);
    ForwardCache tcache;
    const Matrix& qn =
        critic_target_.forward(DdpgAgent::concat_cols(next_states, tfwd.features), tcache);

    Matrix states(n, sdim);
    Matrix feats(n, adim);
    for (int r = 0; r < n; ++r) {
      const auto joint = detail::concat(batch[r]->states);
      std::copy(joint.begin(), joint.end(), states.row(r));
      const auto& raw = batch[r]->raws[0];
      for (int s = 0; s < actor_.layout().branch_sets; ++s) {
        const ProjCache pc =
            project_raw({raw.data() + s * per_set, (std::size_t)per_set}, ctx);
        std::copy(pc.features.begin(), pc.features.end(), feats.row(r) + s * per_set);
      }
    }
    ForwardCache ccache;
    const Matrix& q = critic_.forward(DdpgAgent::concat_cols(states, feats), ccache);
    Matrix dq(n, 1);
    double loss = 0.0;
    for (int r = 0; r < n; ++r) {
      const double rsum =
          std::accumulate(batch[r]->rewards.begin(), batch[r]->rewards.end(), 0.0);
      const double y = rsum + (batch[r]->done ? 0.0 : hyper_.gamma * qn.at(r, 0));
      const double err = q.at(r, 0) - y;
      loss += err * err;
      dq.at(r, 0) = 2.0 * err / n;
    }
    loss /= n;
    if (!std::isfinite(loss)) throw DivergenceError("ctce critic loss diverged");
    critic_grads_.zero();
    critic_.backward(ccache, dq, &critic_grads_, nullptr);
    adam_step(critic_, critic_grads_, *critic_adam_);

    const auto fwd = actor_.forward_project(states);
    ForwardCache acache;
    const Matrix& qa = critic_.forward(DdpgAgent::concat_cols(states, fwd.features), acache);
    double obj = 0.0;
    for (int r = 0; r < n; ++r) obj += qa.at(r, 0);
    obj /= n;
    if (!std::isfinite(obj)) throw DivergenceError("ctce actor objective diverged");
    Matrix dqa(n, 1);
    for (int r = 0; r < n; ++r) dqa.at(r, 0) = -1.0 / n;
    Matrix dinput;
    critic_.backward(acache, dqa, nullptr, &dinput);
    Matrix dfeat(n, adim);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < adim; ++c) dfeat.at(r, c) = dinput.at(r, sdim + c);
    actor_grads_.zero();
    actor_.backward(fwd, dfeat, actor_grads_);
    actor_adam_step(actor_, actor_grads_, *actor_adam_);
    actor_soft_update(actor_target_, actor_, hyper_.tau);
    soft_update(critic_target_, critic_, hyper_.tau);
    return {loss, obj};
  }

  json checkpoint_agents() const override {
    return json::array({{{"actor", actor_.to_json()},
                         {"critic", mlp_to_json(critic_)},
                         {"actor_target", actor_target_.to_json()},
                         {"critic_target", mlp_to_json(critic_target_)}}});
  }

  void restore_agents(const json& agents) override {
    if (agents.size() != 1) throw ConfigError("checkpoint: agent count mismatch");
    actor_ = MultiBranchActor::from_json(agents[0].at("actor"));
    critic_ = mlp_from_json(agents[0].at("critic"));
    actor_target_ = MultiBranchActor::from_json(agents[0].at("actor_target"));
    critic_target_ = mlp_from_json(agents[0].at("critic_target"));
  }

 private:
  ActBundle split_joint(std::vector<double> raw) {
    const ProjectionContext ctx = actor_.projection();
    const int per_set = actor_.layout().raw_dim_per_set();
    ActBundle out;
    for (int s = 0; s < actor_.layout().branch_sets; ++s) {
      const ProjCache pc =
          project_raw({raw.data() + s * per_set, (std::size_t)per_set}, ctx);
      out.actions.push_back(to_local_action(pc, ctx, world_));
    }
    out.raws.push_back(std::move(raw));
    return out;
  }

  AgentHyperparams hyper_;
  WorldConfig world_;
  MultiBranchActor actor_;
  MultiBranchActor actor_target_;
  Mlp critic_;
  Mlp critic_target_;
  std::optional<ActorAdam> actor_adam_;
  std::optional<AdamState> critic_adam_;
  ActorGrads actor_grads_;
  GradientSet critic_grads_;
  ReplayBuffer<JointTransition> buffer_;
  RngStream noise_rng_;
  RngStream sample_rng_;
};

inline std::unique_ptr<Squad> make_squad(SchemeId scheme, const ExperimentConfig& cfg,
                                         std::uint64_t seed) {
  switch (scheme) {
    case SchemeId::ctde: return std::make_unique<CtdeSquad>(cfg, seed);
    case SchemeId::ctce: return std::make_unique<CtceSquad>(cfg, seed);
    default: return std::make_unique<DecentralizedSquad>(scheme, cfg, seed);
  }
}

// ---------------------------------------------------------------------------
// Evaluation protocol: noise-free episodes over consecutive frames, on a
// fixed list of evaluation seeds shared by every scheme.
// ---------------------------------------------------------------------------

struct EvalEpisode {
  double energy = 0.0;  // J per device
  double completion = 0.0;
  int collisions = 0;
};

inline EvalEpisode run_eval_episode(Squad& squad, const ExperimentConfig& cfg,
                                    std::uint64_t eval_seed, const Fixture* fixture) {
  Environment env(cfg.world, cfg.reward, cfg.eval_frames,
                  scheme_zero_messages(squad.scheme()));
  RngStream rng = RngStream::derive(eval_seed, "eval-env");
  auto states = env.reset(rng, fixture);
  EvalEpisode ep;
  double completion_sum = 0.0;
  int frame_ends = 0;
  bool done = false;
  int slot = 0;
  while (!done) {
    ActBundle acts = squad.act(env, states, 0.0);
    StepResult res = env.step(acts.actions, rng);
    for (double e : res.device_energy) ep.energy += e;
    ep.collisions += res.collision ? 1 : 0;
    const bool frame_end = (slot % cfg.world.slots_per_frame) ==
                           cfg.world.slots_per_frame - 1;
    if (frame_end || res.done) {
      completion_sum += res.completion_fraction;
      ++frame_ends;
    }
    done = res.done;
    states = res.next_local_states;
    ++slot;
  }
  ep.energy /= cfg.world.num_devices;
  ep.completion = frame_ends > 0 ? completion_sum / frame_ends : 1.0;
  return ep;
}

inline EvalSummary evaluate(Squad& squad, const ExperimentConfig& cfg,
                            const Fixture* fixture = nullptr) {
  EvalSummary s;
  std::vector<double> energies;
  for (int k = 0; k < cfg.eval_episodes; ++k) {
    const EvalEpisode ep =
        run_eval_episode(squad, cfg, static_cast<std::uint64_t>(k + 1), fixture);
    energies.push_back(ep.energy);
    s.energy_mean += ep.energy;
    s.completion_mean += ep.completion;
    s.collisions_mean += ep.collisions;
  }
  const double n = static_cast<double>(cfg.eval_episodes);
  s.energy_mean /= n;
  s.completion_mean /= n;
  s.collisions_mean /= n;
  double var = 0.0;
  for (double e : energies) var += (e - s.energy_mean) * (e - s.energy_mean);
  s.energy_std = std::sqrt(var / n);
  return s;
}

// Per-slot traces of one evaluation episode, for the behavior study plots.
struct BehaviorTrace {
  std::vector<std::vector<double>> serving_gain;       // [slot][device]
  std::vector<std::vector<double>> cumulative_offload; // fraction of task bits
  std::vector<std::vector<double>> remaining_fraction; // [slot][device]
  std::vector<double> completion_time;                 // s (frame duration if unfinished)
  double energy = 0.0;                                 // J per device
};

inline BehaviorTrace run_traced_episode(Squad& squad, const ExperimentConfig& cfg,
                                        std::uint64_t eval_seed, const Fixture* fixture) {
  Environment env(cfg.world, cfg.reward, cfg.eval_frames,
                  scheme_zero_messages(squad.scheme()));
  RngStream rng = RngStream::derive(eval_seed, "eval-env");
  auto states = env.reset(rng, fixture);
  const int num_devices = cfg.world.num_devices;
  BehaviorTrace trace;
  std::vector<double> offloaded(num_devices, 0.0);
  std::vector<double> initial(num_devices, 0.0);
  trace.completion_time.assign(num_devices, cfg.world.frame_duration * cfg.eval_frames);
  std::vector<bool> completed(num_devices, false);
  {
    const auto& gs = env.global_state();
    for (int d = 0; d < num_devices; ++d) initial[d] = gs.devices[d].initial_bits;
  }
  bool done = false;
  int slot = 0;
  while (!done) {
    ActBundle acts = squad.act(env, states, 0.0);
    StepResult res = env.step(acts.actions, rng);
    std::vector<double> gains(num_devices), cum(num_devices), rem(num_devices);
    const auto& gs = env.global_state();
    for (int d = 0; d < num_devices; ++d) {
      offloaded[d] += res.outcomes[d].bits_offloaded;
      gains[d] = res.serving_gain[d];
      cum[d] = initial[d] > 0.0 ? offloaded[d] / initial[d] : 0.0;
      rem[d] = initial[d] > 0.0 ? gs.devices[d].remaining_bits / initial[d] : 0.0;
      if (!completed[d] && gs.devices[d].remaining_bits <= 0.0) {
        completed[d] = true;
        trace.completion_time[d] = (slot + 1) * cfg.world.slot_duration();
      }
      trace.energy += res.device_energy[d];
    }
    trace.serving_gain.push_back(std::move(gains));
    trace.cumulative_offload.push_back(std::move(cum));
    trace.remaining_fraction.push_back(std::move(rem));
    done = res.done;
    states = res.next_local_states;
    ++slot;
  }
  trace.energy /= num_devices;
  return trace;
}

// ---------------------------------------------------------------------------
// Training loop shared by every scheme.
// ---------------------------------------------------------------------------

struct TrainOutcome {
  std::unique_ptr<Squad> squad;
  TrainReport report;
};

using EpisodeCallback = std::function<void(const EpisodeRecord&)>;

inline TrainOutcome train_scheme(SchemeId scheme, const ExperimentConfig& cfg,
                                 std::uint64_t seed,
                                 const EpisodeCallback& on_episode = nullptr) {
  cfg.validate();
  const AgentHyperparams hyper = cfg.resolved_agent();
  auto squad = make_squad(scheme, cfg, seed);

  Fixture fixture;
  const Fixture* fixture_ptr = nullptr;
  if (!cfg.fixture_path.empty()) {
    fixture = Fixture::load(cfg.fixture_path);
    fixture_ptr = &fixture;
  }

  Environment env(cfg.world, cfg.reward, 1, scheme_zero_messages(scheme));
  TrainReport report;
  long global_step = 0;
  const auto t0 = std::chrono::steady_clock::now();

  for (int ep = 0; ep < cfg.train_episodes; ++ep) {
    RngStream env_rng = RngStream::derive(seed, "env", static_cast<std::uint64_t>(ep));
    auto states = env.reset(env_rng, fixture_ptr);
    const double sigma = hyper.sigma_for_episode(ep);

    EpisodeRecord row;
    row.episode = ep + 1;
    double closs_sum = 0.0;
    double aobj_sum = 0.0;
    int updates = 0;
    bool done = false;
    while (!done) {
      ActBundle acts = global_step < hyper.warmup_steps
                           ? squad->act_warmup(env, states)
                           : squad->act(env, states, sigma);
      StepResult res = env.step(acts.actions, env_rng);
      for (double e : res.device_energy) row.train_energy += e;
      row.train_collisions += res.collision ? 1 : 0;
      squad->observe(states, acts.raws, res.rewards, res.next_local_states, res.done);
      if (global_step >= hyper.warmup_steps && squad->ready()) {
        try {
          const auto [closs, aobj] = squad->update();
          closs_sum += closs;
          aobj_sum += aobj;
          ++updates;
        } catch (const DivergenceError& e) {
          throw DivergenceError(to_string(scheme) + " episode " +
                                std::to_string(ep + 1) + ": " + e.what());
        }
      }
      ++global_step;
      done = res.done;
      row.train_completion = res.completion_fraction;
      states = res.next_local_states;
    }
    row.train_energy /= cfg.world.num_devices;
    if (updates > 0) {
      row.critic_loss = closs_sum / updates;
      row.actor_objective = aobj_sum / updates;
    }
    if ((ep + 1) % cfg.eval_every == 0 || ep + 1 == cfg.train_episodes)
      row.eval = evaluate(*squad, cfg, fixture_ptr);
    row.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.rows.push_back(row);
    if (on_episode) on_episode(report.rows.back());
  }
  return {std::move(squad), std::move(report)};
}

// ---------------------------------------------------------------------------
// Checkpoints: weight documents for every net pair plus hyperparameters and
// the noise-schedule position.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointSchemaVersion = 1;

inline void save_checkpoint(const Squad& squad, const ExperimentConfig& cfg,
                            std::uint64_t seed, int episodes_trained,
                            const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const json agents = squad.checkpoint_agents();
  json meta = {{"schema_version", kCheckpointSchemaVersion},
               {"scheme", to_string(squad.scheme())},
               {"seed", seed},
               {"episodes_trained", episodes_trained},
               {"noise_sigma", cfg.resolved_agent().sigma_for_episode(episodes_trained)},
               {"hyperparams", cfg.resolved_agent().to_json()},
               {"num_agent_files", agents.size()}};
  {
    std::ofstream out(dir / "checkpoint.json");
    out << meta.dump(2) << "\n";
  }
  for (std::size_t i = 0; i < agents.size(); ++i) {
    std::ofstream out(dir / ("agent_" + std::to_string(i) + ".json"));
    out << agents[i].dump() << "\n";
  }
}

inline std::unique_ptr<Squad> load_checkpoint(const std::filesystem::path& dir,
                                              const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  std::ifstream meta_in(dir / "checkpoint.json");
  if (!meta_in) throw ConfigError("cannot open checkpoint: " + (dir / "checkpoint.json").string());
  json meta;
  try {
    meta_in >> meta;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint parse error: ") + e.what());
  }
  if (meta.at("schema_version").get<int>() != kCheckpointSchemaVersion)
    throw ConfigError("checkpoint: unsupported schema_version");
  const SchemeId scheme = scheme_from_string(meta.at("scheme").get<std::string>());
  const std::uint64_t seed = meta.at("seed").get<std::uint64_t>();
  auto squad = make_squad(scheme, cfg, seed);
  json agents = json::array();
  const std::size_t n = meta.at("num_agent_files").get<std::size_t>();
  for (std::size_t i = 0; i < n; ++i) {
    std::ifstream in(dir / ("agent_" + std::to_string(i) + ".json"));
    if (!in)
      throw ConfigError("checkpoint: missing agent file agent_" + std::to_string(i) + ".json");
    json doc;
    try {
      in >> doc;
    } catch (const json::exception& e) {
      throw ConfigError(std::string("checkpoint parse error: ") + e.what());
    }
    agents.push_back(std::move(doc));
  }
  squad->restore_agents(agents);
  return squad;
}

}  // namespace uavmec
