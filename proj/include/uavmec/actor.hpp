#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "uavmec/config.hpp"
#include "uavmec/env.hpp"
#include "uavmec/mlp.hpp"

namespace uavmec {

// full:              shared trunk + four branches with the nested projection
// naive:             shared trunk + one wide head, generically squashed
// displacement_only: shared trunk + the displacement branch alone
enum class ActorMode { full, naive, displacement_only };

inline std::string to_string(ActorMode m) {
  switch (m) {
    case ActorMode::full: return "full";
    case ActorMode::naive: return "naive";
    case ActorMode::displacement_only: return "displacement_only";
  }
  return "full";
}

inline ActorMode actor_mode_from_string(const std::string& s) {
  if (s == "full") return ActorMode::full;
  if (s == "naive") return ActorMode::naive;
  if (s == "displacement_only") return ActorMode::displacement_only;
  throw std::invalid_argument("unknown actor mode: " + s);
}

struct ActorLayout {
  ActorMode mode = ActorMode::full;
  OffloadWiring wiring = OffloadWiring::shared_trunk;
  int state_dim = 0;
  int num_devices = 0;
  int branch_sets = 1;  // joint (centralized) actors carry one set per UAV
  std::vector<int> trunk_widths = {128, 128, 128};
  std::vector<int> branch_widths = {64, 32};

  int raw_dim_per_set() const {
    return mode == ActorMode::displacement_only ? 3 : 3 + 3 * num_devices;
  }
  int raw_dim() const { return raw_dim_per_set() * branch_sets; }
  int feature_dim_per_set() const { return raw_dim_per_set(); }
  int feature_dim() const { return raw_dim(); }
  int branches_per_set() const { return mode == ActorMode::full ? 4 : 1; }
};

// ---------------------------------------------------------------------------
// Feasibility projection: raw head logits -> normalized action features.
//
// Feature layout per branch set (same order as the raw logits):
//   [0..3)     displacement direction, norm <= 1   (from tanh + norm clamp)
//   [3..3+D)   association preference in (0,1)     (sigmoid)
//   [..+D)     cpu share on the simplex            (softmax, preference-masked)
//   [..+D)     offload ratio in (0,1)              (sigmoid * preference)
// The physical action scales these by the speed budget / CPU capacity.
// ---------------------------------------------------------------------------

struct ProjectionContext {
  int num_devices = 0;
  ActorMode mode = ActorMode::full;
  double mask_eps = 1e-6;

  int dim() const {
    return mode == ActorMode::displacement_only ? 3 : 3 + 3 * num_devices;
  }
};

namespace detail {

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

struct ProjCache {
  std::vector<double> features;

  // intermediates, per mode
  double t[3] = {0, 0, 0};  // tanh of displacement logits
  double t_norm = 0.0;
  bool clamped = false;
  std::vector<double> pref;       // sigmoid(h2)
  std::vector<double> cpu_share;  // simplex
  std::vector<double> sig3;       // naive mode only: sigmoid(h3)
  double sig3_sum = 0.0;
  std::vector<double> sig4;       // sigmoid(h4)
};

inline void project_displacement(std::span<const double> h1, ProjCache& pc) {
  double n2 = 0.0;
  for (int i = 0; i < 3; ++i) {
    pc.t[i] = std::tanh(h1[i]);
    n2 += pc.t[i] * pc.t[i];
  }
  pc.t_norm = std::sqrt(n2);
  pc.clamped = pc.t_norm > 1.0;
  const double scale = pc.clamped ? 1.0 / pc.t_norm : 1.0;
  for (int i = 0; i < 3; ++i) pc.features.push_back(pc.t[i] * scale);
}

// Softmax over masked logits z = h3 + log(pref + eps), numerically stabilized.
inline void masked_softmax(std::span<const double> h3, std::span<const double> pref,
                           double eps, std::vector<double>& out) {
  const int n = static_cast<int>(h3.size());
  out.resize(n);
  double zmax = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    out[i] = h3[i] + std::log(pref[i] + eps);
    zmax = std::max(zmax, out[i]);
  }
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(out[i] - zmax);
    sum += out[i];
  }
  for (int i = 0; i < n; ++i) out[i] /= sum;
}

inline ProjCache project_raw(std::span<const double> raw, const ProjectionContext& ctx) {
  const int d = ctx.num_devices;
  ProjCache pc;
  pc.features.reserve(ctx.dim());
  project_displacement(raw.subspan(0, 3), pc);
  if (ctx.mode == ActorMode::displacement_only) return pc;

  pc.pref.resize(d);
  for (int i = 0; i < d; ++i) pc.pref[i] = detail::stable_sigmoid(raw[3 + i]);

  if (ctx.mode == ActorMode::full) {
    masked_softmax(raw.subspan(3 + d, d), pc.pref, ctx.mask_eps, pc.cpu_share);
  } else {  // naive: renormalized sigmoids, no preference mask
    pc.sig3.resize(d);
    pc.sig3_sum = 0.0;
    for (int i = 0; i < d; ++i) {
      pc.sig3[i] = detail::stable_sigmoid(raw[3 + d + i]);
      pc.sig3_sum += pc.sig3[i];
    }
    pc.cpu_share.resize(d);
    for (int i = 0; i < d; ++i) pc.cpu_share[i] = pc.sig3[i] / pc.sig3_sum;
  }

  pc.sig4.resize(d);
  for (int i = 0; i < d; ++i) pc.sig4[i] = detail::stable_sigmoid(raw[3 + 2 * d + i]);

  for (int i = 0; i < d; ++i) pc.features.push_back(pc.pref[i]);
  for (int i = 0; i < d; ++i) pc.features.push_back(pc.cpu_share[i]);
  for (int i = 0; i < d; ++i)
    pc.features.push_back(ctx.mode == ActorMode::full ? pc.sig4[i] * pc.pref[i]
                                                      : pc.sig4[i]);
  return pc;
}

// --- backward pieces (exact gradients through the projection) ---

inline void backward_displacement(const ProjCache& pc, std::span<const double> dfeat_d,
                                  std::span<double> dh1) {
  double dt[3];
  if (!pc.clamped) {
    for (int i = 0; i < 3; ++i) dt[i] = dfeat_d[i];
  } else {
    const double n = pc.t_norm;
    double dot = 0.0;
    for (int i = 0; i < 3; ++i) dot += dfeat_d[i] * pc.t[i];
    for (int i = 0; i < 3; ++i) dt[i] = dfeat_d[i] / n - dot * pc.t[i] / (n * n * n);
  }
  for (int i = 0; i < 3; ++i) dh1[i] = dt[i] * (1.0 - pc.t[i] * pc.t[i]);
}

// Offload head's gradient; also starts the preference accumulation. Returns
// dh4 and adds the sigmoid(h4)-weighted part into dpref (full mode couples
// the offload ratio to the preference).
inline void backward_offload(const ProjCache& pc, const ProjectionContext& ctx,
                             std::span<const double> dfeat_o, std::span<double> dh4,
                             std::span<double> dpref_acc) {
  const int d = ctx.num_devices;
  for (int i = 0; i < d; ++i) {
    const double s4 = pc.sig4[i];
    if (ctx.mode == ActorMode::full) {
      dh4[i] = dfeat_o[i] * pc.pref[i] * s4 * (1.0 - s4);
      dpref_acc[i] += dfeat_o[i] * s4;
    } else {
      dh4[i] = dfeat_o[i] * s4 * (1.0 - s4);
    }
  }
}

// CPU-share gradient; dshare is the total upstream gradient on the share
// vector (features plus any wiring contribution). Adds the mask path into
// dpref and writes dh3.
inline void backward_cpu(const ProjCache& pc, const ProjectionContext& ctx,
                         std::span<const double> dshare, std::span<double> dh3,
                         std::span<double> dpref_acc) {
  const int d = ctx.num_devices;
  if (ctx.mode == ActorMode::full) {
    double inner = 0.0;
    for (int i = 0; i < d; ++i) inner += dshare[i] * pc.cpu_share[i];
    for (int i = 0; i < d; ++i) {
      const double dz = pc.cpu_share[i] * (dshare[i] - inner);
      dh3[i] = dz;
      dpref_acc[i] += dz / (pc.pref[i] + ctx.mask_eps);
    }
  } else {
    double inner = 0.0;
    for (int i = 0; i < d; ++i) inner += dshare[i] * pc.cpu_share[i];
    for (int i = 0; i < d; ++i) {
      const double dsig = (dshare[i] - inner) / pc.sig3_sum;
      dh3[i] = dsig * pc.sig3[i] * (1.0 - pc.sig3[i]);
    }
  }
}

inline void backward_preference(const ProjCache& pc, std::span<const double> dpref_total,
                                std::span<double> dh2) {
  for (std::size_t i = 0; i < pc.pref.size(); ++i)
    dh2[i] = dpref_total[i] * pc.pref[i] * (1.0 - pc.pref[i]);
}

// One-shot projection backward (valid when no wiring feeds the cpu share back
// into another head): d(features)^T -> d(raw logits).
inline std::vector<double> project_backward(const ProjCache& pc,
                                            std::span<const double> dfeat,
                                            const ProjectionContext& ctx) {
  const int d = ctx.num_devices;
  std::vector<double> draw(ctx.dim(), 0.0);
  backward_displacement(pc, dfeat.subspan(0, 3), {draw.data(), 3});
  if (ctx.mode == ActorMode::displacement_only) return draw;

  std::vector<double> dpref(dfeat.begin() + 3, dfeat.begin() + 3 + d);
  backward_offload(pc, ctx, dfeat.subspan(3 + 2 * d, d), {draw.data() + 3 + 2 * d, (std::size_t)d},
                   dpref);
  backward_cpu(pc, ctx, dfeat.subspan(3 + d, d), {draw.data() + 3 + d, (std::size_t)d}, dpref);
  backward_preference(pc, dpref, {draw.data() + 3, (std::size_t)d});
  return draw;
}

// Physical action from projected features.
inline LocalAction to_local_action(const ProjCache& pc, const ProjectionContext& ctx,
                                   const WorldConfig& cfg) {
  const int d = ctx.num_devices;
  LocalAction a;
  const double step = cfg.max_step_distance();
  a.displacement = {pc.features[0] * step, pc.features[1] * step, pc.features[2] * step};
  if (ctx.mode == ActorMode::displacement_only) {
    a.preference.assign(cfg.num_devices, 0.0);
    a.cpu_alloc.assign(cfg.num_devices, 0.0);
    a.offload_ratio.assign(cfg.num_devices, 0.0);
    return a;
  }
  a.preference.assign(pc.features.begin() + 3, pc.features.begin() + 3 + d);
  a.cpu_alloc.resize(d);
  for (int i = 0; i < d; ++i) a.cpu_alloc[i] = pc.features[3 + d + i] * cfg.cpu_capacity_max;
  a.offload_ratio.assign(pc.features.begin() + 3 + 2 * d, pc.features.begin() + 3 + 3 * d);
  return a;
}

// ---------------------------------------------------------------------------
// The actor network: shared trunk plus per-set branches.
// ---------------------------------------------------------------------------

struct ActorGrads {
  GradientSet trunk;
  std::vector<GradientSet> branches;

  void zero() {
    trunk.zero();
    for (auto& b : branches) b.zero();
  }
};

class MultiBranchActor {
 public:
  MultiBranchActor() = default;

  MultiBranchActor(const ActorLayout& layout, RngStream& rng) : layout_(layout) {
    if (layout.state_dim < 1) throw std::invalid_argument("actor: bad state dim");
    if (layout.mode != ActorMode::displacement_only && layout.num_devices < 1)
      throw std::invalid_argument("actor: bad device count");
    const auto trunk_spec =
        make_trunk_spec(layout.state_dim, layout.trunk_widths);
    trunk_ = Mlp(trunk_spec, rng);
    const int trunk_out = layout.trunk_widths.back();
    for (int s = 0; s < layout.branch_sets; ++s) {
      for (int b = 0; b < layout.branches_per_set(); ++b) {
        const int head = head_dim(b);
        const int in = branch_input_dim(b, trunk_out);
        branches_.emplace_back(mlp_spec(in, layout.branch_widths, head), rng);
      }
    }
  }

  const ActorLayout& layout() const { return layout_; }
  const Mlp& trunk() const { return trunk_; }
  Mlp& trunk() { return trunk_; }
  const std::vector<Mlp>& branches() const { return branches_; }
  std::vector<Mlp>& branches() { return branches_; }

  ProjectionContext projection() const {
    return {layout_.num_devices, layout_.mode, mask_eps_};
  }

  // Raw head logits for one state; Gaussian noise (sigma > 0) perturbs every
  // head pre-squash, applied before dependent branches consume the values so
  // the explored action is always the feasible image of the stored raw.
  std::vector<double> act_raw(std::span<const double> state, double sigma,
                              RngStream* rng) const {
    const auto trunk_out = trunk_.forward_one(state);
    std::vector<double> raw(layout_.raw_dim());
    auto noise = [&](double v) {
      return sigma > 0.0 && rng ? v + sigma * rng->normal() : v;
    };
    const int per_set = layout_.raw_dim_per_set();
    const int d = layout_.num_devices;
    for (int s = 0; s < layout_.branch_sets; ++s) {
      double* out = raw.data() + s * per_set;
      if (layout_.mode != ActorMode::full) {
        const auto h = branch(s, 0).forward_one(trunk_out);
        for (int i = 0; i < per_set; ++i) out[i] = noise(h[i]);
        continue;
      }
      const auto h1 = branch(s, 0).forward_one(trunk_out);
      const auto h2 = branch(s, 1).forward_one(trunk_out);
      const auto h3 = branch(s, 2).forward_one(trunk_out);
      for (int i = 0; i < 3; ++i) out[i] = noise(h1[i]);
      for (int i = 0; i < d; ++i) out[3 + i] = noise(h2[i]);
      for (int i = 0; i < d; ++i) out[3 + d + i] = noise(h3[i]);
      std::vector<double> b4in = trunk_out;
      if (layout_.wiring == OffloadWiring::cpu_conditioned) {
        std::vector<double> pref(d), share;
        for (int i = 0; i < d; ++i) pref[i] = detail::stable_sigmoid(out[3 + i]);
        masked_softmax({out + 3 + d, (std::size_t)d}, pref, mask_eps_, share);
        b4in.insert(b4in.end(), share.begin(), share.end());
      }
      const auto h4 = branch(s, 3).forward_one(b4in);
      for (int i = 0; i < d; ++i) out[3 + 2 * d + i] = noise(h4[i]);
    }
    for (double v : raw)
      if (!std::isfinite(v)) throw DivergenceError("actor output diverged");
    return raw;
  }

  struct Forward {
    Matrix raw;       // B x raw_dim
    Matrix features;  // B x feature_dim
    ForwardCache trunk_cache;
    std::vector<ForwardCache> branch_caches;  // indexed like branches_
    std::vector<ProjCache> proj;              // B x branch_sets, sample-major
  };

  // Noise-free batched forward through trunk, branches, and projection.
  Forward forward_project(const Matrix& states) const {
    Forward f;
    f.branch_caches.resize(branches_.size());
    const Matrix& trunk_out = trunk_.forward(states, f.trunk_cache);
    const int batch = states.rows;
    const int per_set = layout_.raw_dim_per_set();
    const int d = layout_.num_devices;
    f.raw = Matrix(batch, layout_.raw_dim());
    f.features = Matrix(batch, layout_.feature_dim());
    f.proj.resize(static_cast<std::size_t>(batch) * layout_.branch_sets);
    const ProjectionContext ctx = projection();

    for (int s = 0; s < layout_.branch_sets; ++s) {
      if (layout_.mode != ActorMode::full) {
        const Matrix& h = branch(s, 0).forward(trunk_out, cache(f, s, 0));
        for (int r = 0; r < batch; ++r)
          for (int c = 0; c < per_set; ++c) f.raw.at(r, s * per_set + c) = h.at(r, c);
      } else {
        const Matrix& h1 = branch(s, 0).forward(trunk_out, cache(f, s, 0));
        const Matrix& h2 = branch(s, 1).forward(trunk_out, cache(f, s, 1));
        const Matrix& h3 = branch(s, 2).forward(trunk_out, cache(f, s, 2));
        for (int r = 0; r < batch; ++r) {
          for (int i = 0; i < 3; ++i) f.raw.at(r, s * per_set + i) = h1.at(r, i);
          for (int i = 0; i < d; ++i) f.raw.at(r, s * per_set + 3 + i) = h2.at(r, i);
          for (int i = 0; i < d; ++i) f.raw.at(r, s * per_set + 3 + d + i) = h3.at(r, i);
        }
        // the offload branch may be conditioned on the projected cpu share
        Matrix b4in;
        if (layout_.wiring == OffloadWiring::cpu_conditioned) {
          b4in = Matrix(batch, trunk_out.cols + d);
          for (int r = 0; r < batch; ++r) {
            std::vector<double> pref(d), share;
            for (int i = 0; i < d; ++i)
              pref[i] = detail::stable_sigmoid(h2.at(r, i));
            masked_softmax({h3.row(r), (std::size_t)d}, pref, mask_eps_, share);
            std::copy(trunk_out.row(r), trunk_out.row(r) + trunk_out.cols, b4in.row(r));
            std::copy(share.begin(), share.end(), b4in.row(r) + trunk_out.cols);
          }
        } else {
          b4in = trunk_out;
        }
        const Matrix& h4 = branch(s, 3).forward(b4in, cache(f, s, 3));
        for (int r = 0; r < batch; ++r)
          for (int i = 0; i < d; ++i) f.raw.at(r, s * per_set + 3 + 2 * d + i) = h4.at(r, i);
      }
      for (int r = 0; r < batch; ++r) {
        ProjCache pc = project_raw({f.raw.row(r) + s * per_set, (std::size_t)per_set}, ctx);
        for (int c = 0; c < per_set; ++c)
          f.features.at(r, s * per_set + c) = pc.features[c];
        f.proj[static_cast<std::size_t>(r) * layout_.branch_sets + s] = std::move(pc);
      }
    }
    for (double v : f.raw.data)
      if (!std::isfinite(v)) throw DivergenceError("actor output diverged");
    return f;
  }

  // Exact gradients of the projected features w.r.t. every parameter,
  // accumulated into `grads`. dfeatures is dL/d(features), batch-shaped.
  void backward(const Forward& f, const Matrix& dfeatures, ActorGrads& grads) const {
    const int batch = f.raw.rows;
    const int per_set = layout_.raw_dim_per_set();
    const int d = layout_.num_devices;
    const ProjectionContext ctx = projection();
    const int trunk_cols = layout_.trunk_widths.back();
    Matrix dtrunk(batch, trunk_cols);

    for (int s = 0; s < layout_.branch_sets; ++s) {
      if (layout_.mode != ActorMode::full) {
        Matrix dhead(batch, per_set);
        for (int r = 0; r < batch; ++r) {
          const ProjCache& pc = f.proj[static_cast<std::size_t>(r) * layout_.branch_sets + s];
          const auto draw = project_backward(
              pc, {dfeatures.row(r) + s * per_set, (std::size_t)per_set}, ctx);
          std::copy(draw.begin(), draw.end(), dhead.row(r));
        }
        Matrix dx;
        branch(s, 0).backward(cache_const(f, s, 0), dhead, &grads.branches[bindex(s, 0)], &dx);
        accumulate(dtrunk, dx, 0);
        continue;
      }

      // offload head first: with cpu conditioning its input gradient feeds the
      // cpu-share path, which must run before the softmax backward.
      Matrix dh4(batch, d);
      std::vector<std::vector<double>> dpref(batch, std::vector<double>(d, 0.0));
      for (int r = 0; r < batch; ++r) {
        const ProjCache& pc = f.proj[static_cast<std::size_t>(r) * layout_.branch_sets + s];
        backward_offload(pc, ctx, {dfeatures.row(r) + s * per_set + 3 + 2 * d, (std::size_t)d},
                         {dh4.row(r), (std::size_t)d}, dpref[r]);
      }
      Matrix db4in;
      branch(s, 3).backward(cache_const(f, s, 3), dh4, &grads.branches[bindex(s, 3)], &db4in);
      accumulate(dtrunk, db4in, 0);

      Matrix dh1(batch, 3), dh2(batch, d), dh3(batch, d);
      for (int r = 0; r < batch; ++r) {
        const ProjCache& pc = f.proj[static_cast<std::size_t>(r) * layout_.branch_sets + s];
        std::vector<double> dshare(dfeatures.row(r) + s * per_set + 3 + d,
                                   dfeatures.row(r) + s * per_set + 3 + 2 * d);
        if (layout_.wiring == OffloadWiring::cpu_conditioned)
          for (int i = 0; i < d; ++i) dshare[i] += db4in.at(r, trunk_cols + i);
        backward_cpu(pc, ctx, dshare, {dh3.row(r), (std::size_t)d}, dpref[r]);
        for (int i = 0; i < d; ++i)
          dpref[r][i] += dfeatures.at(r, s * per_set + 3 + i);
        backward_preference(pc, dpref[r], {dh2.row(r), (std::size_t)d});
        backward_displacement(pc, {dfeatures.row(r) + s * per_set, 3}, {dh1.row(r), 3});
      }
      Matrix dx;
      branch(s, 2).backward(cache_const(f, s, 2), dh3, &grads.branches[bindex(s, 2)], &dx);
      accumulate(dtrunk, dx, 0);
      branch(s, 1).backward(cache_const(f, s, 1), dh2, &grads.branches[bindex(s, 1)], &dx);
      accumulate(dtrunk, dx, 0);
      branch(s, 0).backward(cache_const(f, s, 0), dh1, &grads.branches[bindex(s, 0)], &dx);
      accumulate(dtrunk, dx, 0);
    }
    trunk_.backward(f.trunk_cache, dtrunk, &grads.trunk, nullptr);
  }

  ActorGrads make_gradients() const {
    ActorGrads g;
    g.trunk = trunk_.make_gradients();
    g.branches.reserve(branches_.size());
    for (const auto& b : branches_) g.branches.push_back(b.make_gradients());
    return g;
  }

  json to_json() const {
    json jb = json::array();
    for (const auto& b : branches_) jb.push_back(mlp_to_json(b));
    return {{"mode", to_string(layout_.mode)},
            {"offload_wiring", to_string(layout_.wiring)},
            {"state_dim", layout_.state_dim},
            {"num_devices", layout_.num_devices},
            {"branch_sets", layout_.branch_sets},
            {"trunk_widths", layout_.trunk_widths},
            {"branch_widths", layout_.branch_widths},
            {"trunk", mlp_to_json(trunk_)},
            {"branches", jb}};
  }

  static MultiBranchActor from_json(const json& j) {
    MultiBranchActor a;
    a.layout_.mode = actor_mode_from_string(j.at("mode").get<std::string>());
    a.layout_.wiring =
        offload_wiring_from_string(j.at("offload_wiring").get<std::string>());
    a.layout_.state_dim = j.at("state_dim").get<int>();
    a.layout_.num_devices = j.at("num_devices").get<int>();
    a.layout_.branch_sets = j.at("branch_sets").get<int>();
    a.layout_.trunk_widths = j.at("trunk_widths").get<std::vector<int>>();
    a.layout_.branch_widths = j.at("branch_widths").get<std::vector<int>>();
    a.trunk_ = mlp_from_json(j.at("trunk"));
    for (const auto& jb : j.at("branches")) a.branches_.push_back(mlp_from_json(jb));
    const std::size_t expected =
        static_cast<std::size_t>(a.layout_.branch_sets) * a.layout_.branches_per_set();
    if (a.branches_.size() != expected)
      throw std::invalid_argument("actor document: branch count mismatch");
    return a;
  }

 private:
  static std::vector<LayerSpec> make_trunk_spec(int input, const std::vector<int>& widths) {
    std::vector<LayerSpec> spec;
    int prev = input;
    for (int w : widths) {
      spec.push_back({prev, w, Activation::relu});
      prev = w;
    }
    return spec;
  }

  int head_dim(int branch_in_set) const {
    if (layout_.mode == ActorMode::displacement_only) return 3;
    if (layout_.mode == ActorMode::naive) return 3 + 3 * layout_.num_devices;
    return branch_in_set == 0 ? 3 : layout_.num_devices;
  }

  int branch_input_dim(int branch_in_set, int trunk_out) const {
    if (layout_.mode == ActorMode::full && branch_in_set == 3 &&
        layout_.wiring == OffloadWiring::cpu_conditioned)
      return trunk_out + layout_.num_devices;
    return trunk_out;
  }

  int bindex(int set, int branch_in_set) const {
    return set * layout_.branches_per_set() + branch_in_set;
  }
  const Mlp& branch(int set, int b) const { return branches_[bindex(set, b)]; }
  ForwardCache& cache(Forward& f, int set, int b) const {
    return f.branch_caches[bindex(set, b)];
  }
  const ForwardCache& cache_const(const Forward& f, int set, int b) const {
    return f.branch_caches[bindex(set, b)];
  }

  static void accumulate(Matrix& into, const Matrix& from, int col_offset) {
    for (int r = 0; r < into.rows; ++r)
      for (int c = 0; c < into.cols; ++c) into.at(r, c) += from.at(r, c + col_offset);
  }

  ActorLayout layout_;
  Mlp trunk_;
  std::vector<Mlp> branches_;
  double mask_eps_ = 1e-6;
};

// Adam over every actor subnet.
struct ActorAdam {
  AdamState trunk;
  std::vector<AdamState> branches;

  ActorAdam(const MultiBranchActor& actor, double lr) : trunk(actor.trunk(), lr) {
    branches.reserve(actor.branches().size());
    for (const auto& b : actor.branches()) branches.emplace_back(b, lr);
  }
};

inline void actor_adam_step(MultiBranchActor& actor, const ActorGrads& grads,
                            ActorAdam& adam) {
  adam_step(actor.trunk(), grads.trunk, adam.trunk);
  for (std::size_t i = 0; i < actor.branches().size(); ++i)
    adam_step(actor.branches()[i], grads.branches[i], adam.branches[i]);
}

inline void actor_soft_update(MultiBranchActor& target, const MultiBranchActor& online,
                              double tau) {
  soft_update(target.trunk(), online.trunk(), tau);
  for (std::size_t i = 0; i < target.branches().size(); ++i)
    soft_update(target.branches()[i], online.branches()[i], tau);
}

}  // namespace uavmec
