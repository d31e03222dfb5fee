#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "uavmec/actor.hpp"
#include "uavmec/config.hpp"
#include "uavmec/env.hpp"
#include "uavmec/mlp.hpp"
#include "uavmec/rng.hpp"

namespace uavmec {

// Raw (pre-projection) exploration range used during warmup.
inline constexpr double kWarmupRawRange = 3.0;

struct Transition {
  std::vector<double> state;
  std::vector<double> raw_action;
  double reward = 0.0;
  std::vector<double> next_state;
  bool done = false;
};

// Fixed-capacity ring with uniform without-replacement sampling (Floyd).
template <typename T>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw std::invalid_argument("ReplayBuffer: capacity must be >= 1");
    items_.reserve(capacity);
  }

  void store(T item) {
    if (static_cast<int>(items_.size()) < capacity_) {
      items_.push_back(std::move(item));
    } else {
      items_[cursor_] = std::move(item);
    }
    cursor_ = (cursor_ + 1) % capacity_;
  }

  int size() const { return static_cast<int>(items_.size()); }
  int capacity() const { return capacity_; }
  const T& at(int i) const { return items_[i]; }

  std::vector<const T*> sample(int batch, RngStream& rng) const {
    const int n = size();
    if (batch > n)
      throw std::invalid_argument("ReplayBuffer::sample: insufficient buffer");
    std::vector<const T*> out;
    out.reserve(batch);
    std::unordered_set<int> chosen;
    chosen.reserve(batch * 2);
    for (int t = n - batch; t < n; ++t) {
      const int j = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(t) + 1));
      const int pick = chosen.count(j) ? t : j;
      chosen.insert(pick);
      out.push_back(&items_[pick]);
    }
    return out;
  }

 private:
  int capacity_;
  int cursor_ = 0;
  std::vector<T> items_;
};

inline Matrix stack_rows(const std::vector<const Transition*>& batch,
                         std::vector<double> Transition::* field) {
  const int rows = static_cast<int>(batch.size());
  const int cols = static_cast<int>((batch.front()->*field).size());
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const auto& v = batch[r]->*field;
    std::copy(v.begin(), v.end(), m.row(r));
  }
  return m;
}

struct ActResult {
  std::vector<double> raw;
  LocalAction action;
  std::vector<double> features;
};

// One UAV's learning stack: multi-branch actor + critic + targets + local
// replay. The same machinery also serves the naive-actor and
// displacement-only baselines through the actor mode.
class DdpgAgent {
 public:
  DdpgAgent(const ActorLayout& layout, const std::vector<int>& critic_widths,
            const AgentHyperparams& hyper, const WorldConfig& world,
            std::uint64_t master_seed, int agent_index)
      : world_(world),
        hyper_(hyper),
        buffer_(hyper.buffer_capacity),
        init_rng_(RngStream::derive(master_seed, "agent-init", agent_index)),
        noise_rng_(RngStream::derive(master_seed, "agent-noise", agent_index)),
        sample_rng_(RngStream::derive(master_seed, "agent-sample", agent_index)) {
    actor_ = MultiBranchActor(layout, init_rng_);
    critic_ = Mlp(mlp_spec(layout.state_dim + layout.feature_dim(), critic_widths, 1),
                  init_rng_);
    actor_target_ = actor_;
    critic_target_ = critic_;
    actor_adam_.emplace(actor_, hyper.actor_lr);
    critic_adam_.emplace(critic_, hyper.critic_lr);
    actor_grads_ = actor_.make_gradients();
    critic_grads_ = critic_.make_gradients();
  }

  const MultiBranchActor& actor() const { return actor_; }
  const MultiBranchActor& actor_target() const { return actor_target_; }
  const Mlp& critic() const { return critic_; }
  const Mlp& critic_target() const { return critic_target_; }
  const AgentHyperparams& hyper() const { return hyper_; }
  ReplayBuffer<Transition>& buffer() { return buffer_; }
  const ReplayBuffer<Transition>& buffer() const { return buffer_; }

  ActResult act(std::span<const double> state, double sigma) {
    const auto raw = actor_.act_raw(state, sigma, &noise_rng_);
    return project(raw);
  }

  ActResult act_warmup() {
    std::vector<double> raw(actor_.layout().raw_dim());
    for (double& v : raw) v = noise_rng_.uniform(-kWarmupRawRange, kWarmupRawRange);
    return project(raw);
  }

  ActResult project(std::vector<double> raw) const {
    const ProjectionContext ctx = actor_.projection();
    ProjCache pc = project_raw(raw, ctx);
    ActResult r;
    r.action = to_local_action(pc, ctx, world_);
    r.features = std::move(pc.features);
    r.raw = std::move(raw);
    return r;
  }

  void store(Transition t) { buffer_.store(std::move(t)); }
  bool can_update() const { return buffer_.size() >= hyper_.batch_size; }

  std::vector<const Transition*> sample_batch() {
    return buffer_.sample(hyper_.batch_size, sample_rng_);
  }

  // TD(0) targets y = r + gamma * (1 - done) * Q_target(s', project(actor_target(s'))).
  std::vector<double> compute_td_targets(const std::vector<const Transition*>& batch) const {
    const Matrix next_states = stack_rows(batch, &Transition::next_state);
    const auto fwd = actor_target_.forward_project(next_states);
    const Matrix input = concat_cols(next_states, fwd.features);
    ForwardCache cache;
    const Matrix& q = critic_target_.forward(input, cache);
    std::vector<double> y(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double bootstrap = batch[i]->done ? 0.0 : hyper_.gamma * q.at(static_cast<int>(i), 0);
      y[i] = batch[i]->reward + bootstrap;
    }
    return y;
  }

  double critic_update(const std::vector<const Transition*>& batch) {
    const auto y = compute_td_targets(batch);
    const Matrix states = stack_rows(batch, &Transition::state);
    const Matrix feats = features_of_batch(batch);
    const Matrix input = concat_cols(states, feats);
    ForwardCache cache;
    const Matrix& q = critic_.forward(input, cache);

    const int n = static_cast<int>(batch.size());
    Matrix dq(n, 1);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
      const double err = q.at(i, 0) - y[i];
      loss += err * err;
      dq.at(i, 0) = 2.0 * err / n;
    }
    loss /= n;
    if (!std::isfinite(loss)) throw DivergenceError("critic loss diverged");

    critic_grads_.zero();
    critic_.backward(cache, dq, &critic_grads_, nullptr);
    adam_step(critic_, critic_grads_, *critic_adam_);
    return loss;
  }

  // Deterministic policy gradient through the critic and the projection,
  // followed by the soft target updates.
  double actor_update(const std::vector<const Transition*>& batch) {
    const Matrix states = stack_rows(batch, &Transition::state);
    const auto fwd = actor_.forward_project(states);
    const Matrix input = concat_cols(states, fwd.features);
    ForwardCache cache;
    const Matrix& q = critic_.forward(input, cache);

    const int n = static_cast<int>(batch.size());
    double objective = 0.0;
    for (int i = 0; i < n; ++i) objective += q.at(i, 0);
    objective /= n;
    if (!std::isfinite(objective)) throw DivergenceError("actor objective diverged");

    Matrix dq(n, 1);
    for (int i = 0; i < n; ++i) dq.at(i, 0) = -1.0 / n;  // ascend Q
    Matrix dinput;
    critic_.backward(cache, dq, nullptr, &dinput);

    const int sdim = states.cols;
    Matrix dfeat(n, fwd.features.cols);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < dfeat.cols; ++c) dfeat.at(r, c) = dinput.at(r, sdim + c);

    actor_grads_.zero();
    actor_.backward(fwd, dfeat, actor_grads_);
    actor_adam_step(actor_, actor_grads_, *actor_adam_);

    actor_soft_update(actor_target_, actor_, hyper_.tau);
    soft_update(critic_target_, critic_, hyper_.tau);
    return objective;
  }

  Matrix features_of_batch(const std::vector<const Transition*>& batch) const {
    const ProjectionContext ctx = actor_.projection();
    Matrix feats(static_cast<int>(batch.size()), actor_.layout().feature_dim());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& raw = batch[i]->raw_action;
      const int per_set = actor_.layout().raw_dim_per_set();
      for (int s = 0; s < actor_.layout().branch_sets; ++s) {
        const ProjCache pc =
            project_raw({raw.data() + s * per_set, (std::size_t)per_set}, ctx);
        std::copy(pc.features.begin(), pc.features.end(),
                  feats.row(static_cast<int>(i)) + s * per_set);
      }
    }
    return feats;
  }

  static Matrix concat_cols(const Matrix& a, const Matrix& b) {
    Matrix m(a.rows, a.cols + b.cols);
    for (int r = 0; r < a.rows; ++r) {
      std::copy(a.row(r), a.row(r) + a.cols, m.row(r));
      std::copy(b.row(r), b.row(r) + b.cols, m.row(r) + a.cols);
    }
    return m;
  }

  json to_json() const {
    return {{"actor", actor_.to_json()},
            {"critic", mlp_to_json(critic_)},
            {"actor_target", actor_target_.to_json()},
            {"critic_target", mlp_to_json(critic_target_)}};
  }

  void load_nets(const json& j) {
    actor_ = MultiBranchActor::from_json(j.at("actor"));
    critic_ = mlp_from_json(j.at("critic"));
    actor_target_ = MultiBranchActor::from_json(j.at("actor_target"));
    critic_target_ = mlp_from_json(j.at("critic_target"));
    actor_adam_.emplace(actor_, hyper_.actor_lr);
    critic_adam_.emplace(critic_, hyper_.critic_lr);
    actor_grads_ = actor_.make_gradients();
    critic_grads_ = critic_.make_gradients();
  }

 private:
  WorldConfig world_;
  AgentHyperparams hyper_;
  MultiBranchActor actor_;
  MultiBranchActor actor_target_;
  Mlp critic_;
  Mlp critic_target_;
  std::optional<ActorAdam> actor_adam_;
  std::optional<AdamState> critic_adam_;
  ActorGrads actor_grads_;
  GradientSet critic_grads_;
  ReplayBuffer<Transition> buffer_;
  RngStream init_rng_;
  RngStream noise_rng_;
  RngStream sample_rng_;
};

}  // namespace uavmec
