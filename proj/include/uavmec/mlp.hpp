#pragma once

#include <cblas.h>

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "uavmec/rng.hpp"

namespace uavmec {

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major matrix of doubles.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const {
    return data.data() + static_cast<std::size_t>(r) * cols;
  }
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

// C = alpha * op(A) * op(B) + beta * C
inline void gemm(bool trans_a, bool trans_b, double alpha, const Matrix& a,
                 const Matrix& b, double beta, Matrix& c) {
  const int m = trans_a ? a.cols : a.rows;
  const int k = trans_a ? a.rows : a.cols;
  const int n = trans_b ? b.rows : b.cols;
  const int kb = trans_b ? b.cols : b.rows;
  if (k != kb || c.rows != m || c.cols != n)
    throw std::invalid_argument("gemm: dimension mismatch");
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a.data.data(),
              a.cols, b.data.data(), b.cols, beta, c.data.data(), c.cols);
}

enum class Activation { relu, tanh, sigmoid, linear };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::linear: return "linear";
  }
  return "linear";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "linear") return Activation::linear;
  throw std::invalid_argument("unknown activation: " + s);
}

inline void apply_activation(Activation act, std::span<double> v) {
  switch (act) {
    case Activation::relu:
      for (double& x : v) x = x > 0.0 ? x : 0.0;
      break;
    case Activation::tanh:
      for (double& x : v) x = std::tanh(x);
      break;
    case Activation::sigmoid:
      for (double& x : v) x = 1.0 / (1.0 + std::exp(-x));
      break;
    case Activation::linear:
      break;
  }
}

// Derivative expressed through the activation's output value.
inline double activation_grad_from_output(Activation act, double y) {
  switch (act) {
    case Activation::relu: return y > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - y * y;
    case Activation::sigmoid: return y * (1.0 - y);
    case Activation::linear: return 1.0;
  }
  return 1.0;
}

struct LayerSpec {
  int in = 0;
  int out = 0;
  Activation act = Activation::linear;
};

struct Layer {
  Matrix w;               // out x in
  std::vector<double> b;  // out
  Activation act = Activation::linear;
};

struct LayerGrads {
  Matrix dw;
  std::vector<double> db;
};

struct GradientSet {
  std::vector<LayerGrads> layers;

  void zero() {
    for (auto& l : layers) {
      l.dw.zero();
      std::fill(l.db.begin(), l.db.end(), 0.0);
    }
  }
};

// Activations per layer for one batched forward; acts[0] is the input.
struct ForwardCache {
  std::vector<Matrix> acts;
};

class Mlp {
 public:
  Mlp() = default;

  // He-uniform for relu layers, Xavier-uniform otherwise; biases zero.
  Mlp(std::span<const LayerSpec> spec, RngStream& rng) {
    if (spec.empty()) throw std::invalid_argument("Mlp: empty layer spec");
    layers_.reserve(spec.size());
    for (const auto& s : spec) {
      if (s.in < 1 || s.out < 1) throw std::invalid_argument("Mlp: layer dims must be >= 1");
      Layer l;
      l.w = Matrix(s.out, s.in);
      l.b.assign(s.out, 0.0);
      l.act = s.act;
      const double limit = s.act == Activation::relu
                               ? std::sqrt(6.0 / s.in)
                               : std::sqrt(6.0 / (s.in + s.out));
      for (double& x : l.w.data) x = rng.uniform(-limit, limit);
      layers_.push_back(std::move(l));
    }
  }

  int input_dim() const { return layers_.front().w.cols; }
  int output_dim() const { return layers_.back().w.rows; }
  std::size_t layer_count() const { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return layers_[i]; }
  Layer& layer(std::size_t i) { return layers_[i]; }

  GradientSet make_gradients() const {
    GradientSet g;
    g.layers.reserve(layers_.size());
    for (const auto& l : layers_) {
      LayerGrads lg;
      lg.dw = Matrix(l.w.rows, l.w.cols);
      lg.db.assign(l.b.size(), 0.0);
      g.layers.push_back(std::move(lg));
    }
    return g;
  }

  // Batched forward; the cache holds every post-activation, input included.
  const Matrix& forward(const Matrix& input, ForwardCache& cache) const {
    if (input.cols != input_dim())
      throw std::invalid_argument("Mlp::forward: input dimension mismatch");
    cache.acts.assign(1, input);
    cache.acts.reserve(layers_.size() + 1);
    for (const auto& l : layers_) {
      Matrix y(input.rows, l.w.rows);
      gemm(false, true, 1.0, cache.acts.back(), l.w, 0.0, y);
      for (int r = 0; r < y.rows; ++r)
        for (int c = 0; c < y.cols; ++c) y.at(r, c) += l.b[c];
      apply_activation(l.act, {y.data.data(), y.data.size()});
      cache.acts.push_back(std::move(y));
    }
    return cache.acts.back();
  }

  std::vector<double> forward_one(std::span<const double> input) const {
    Matrix x(1, static_cast<int>(input.size()));
    std::copy(input.begin(), input.end(), x.data.begin());
    ForwardCache cache;
    const Matrix& y = forward(x, cache);
    return y.data;
  }

  // Exact reverse-mode gradients. output_grad is dL/d(output), batch-shaped.
  // When grads is null only the input gradient is produced (and vice versa).
  void backward(const ForwardCache& cache, const Matrix& output_grad,
                GradientSet* grads, Matrix* input_grad) const {
    if (cache.acts.size() != layers_.size() + 1)
      throw std::invalid_argument("Mlp::backward: stale cache");
    if (output_grad.rows != cache.acts.back().rows ||
        output_grad.cols != cache.acts.back().cols)
      throw std::invalid_argument("Mlp::backward: output grad shape mismatch");

    Matrix delta = output_grad;
    for (int li = static_cast<int>(layers_.size()) - 1; li >= 0; --li) {
      const Layer& l = layers_[li];
      const Matrix& y = cache.acts[li + 1];
      const Matrix& x = cache.acts[li];
      for (std::size_t i = 0; i < delta.data.size(); ++i)
        delta.data[i] *= activation_grad_from_output(l.act, y.data[i]);
      if (grads) {
        LayerGrads& lg = grads->layers[li];
        gemm(true, false, 1.0, delta, x, 1.0, lg.dw);  // dW += delta^T x
        for (int r = 0; r < delta.rows; ++r)
          for (int c = 0; c < delta.cols; ++c) lg.db[c] += delta.at(r, c);
      }
      if (li > 0 || input_grad) {
        Matrix dx(delta.rows, l.w.cols);
        gemm(false, false, 1.0, delta, l.w, 0.0, dx);  // dX = delta W
        delta = std::move(dx);
      }
    }
    if (input_grad) *input_grad = std::move(delta);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.w.data.size() + l.b.size();
    return n;
  }

  template <typename Fn>
  void for_each_parameter(Fn&& fn) {
    for (auto& l : layers_) {
      for (double& x : l.w.data) fn(x);
      for (double& x : l.b) fn(x);
    }
  }

 private:
  std::vector<Layer> layers_;
};

// Convenience spec builder: hidden widths with one activation, linear head.
inline std::vector<LayerSpec> mlp_spec(int input_dim, std::span<const int> hidden,
                                       int output_dim,
                                       Activation hidden_act = Activation::relu,
                                       Activation output_act = Activation::linear) {
  std::vector<LayerSpec> spec;
  int prev = input_dim;
  for (int h : hidden) {
    spec.push_back({prev, h, hidden_act});
    prev = h;
  }
  spec.push_back({prev, output_dim, output_act});
  return spec;
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<LayerGrads> m;  // first moments, parameter-shaped
  std::vector<LayerGrads> v;  // second moments

  explicit AdamState(const Mlp& net, double learning_rate) : lr(learning_rate) {
    GradientSet g = net.make_gradients();
    m = g.layers;
    v = g.layers;
  }
};

// Bias-corrected Adam, in place. Throws on non-finite gradients.
inline void adam_step(Mlp& net, const GradientSet& grads, AdamState& state) {
  if (grads.layers.size() != net.layer_count() || state.m.size() != net.layer_count())
    throw std::invalid_argument("adam_step: shape mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  auto update = [&](double& theta, double g, double& m, double& v) {
    if (!std::isfinite(g)) throw DivergenceError("adam_step: diverged (non-finite gradient)");
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g * g;
    theta -= state.lr * (m / bc1) / (std::sqrt(v / bc2) + state.eps);
  };
  for (std::size_t li = 0; li < net.layer_count(); ++li) {
    Layer& l = net.layer(li);
    const LayerGrads& g = grads.layers[li];
    LayerGrads& m = state.m[li];
    LayerGrads& v = state.v[li];
    for (std::size_t i = 0; i < l.w.data.size(); ++i)
      update(l.w.data[i], g.dw.data[i], m.dw.data[i], v.dw.data[i]);
    for (std::size_t i = 0; i < l.b.size(); ++i)
      update(l.b[i], g.db[i], m.db[i], v.db[i]);
  }
}

// target <- (1 - tau) * target + tau * online
inline void soft_update(Mlp& target, const Mlp& online, double tau) {
  if (target.layer_count() != online.layer_count())
    throw std::invalid_argument("soft_update: architecture mismatch");
  for (std::size_t li = 0; li < target.layer_count(); ++li) {
    Layer& t = target.layer(li);
    const Layer& o = online.layer(li);
    if (t.w.rows != o.w.rows || t.w.cols != o.w.cols)
      throw std::invalid_argument("soft_update: architecture mismatch");
    for (std::size_t i = 0; i < t.w.data.size(); ++i)
      t.w.data[i] = (1.0 - tau) * t.w.data[i] + tau * o.w.data[i];
    for (std::size_t i = 0; i < t.b.size(); ++i)
      t.b[i] = (1.0 - tau) * t.b[i] + tau * o.b[i];
  }
}

inline constexpr int kWeightSchemaVersion = 1;

inline nlohmann::json mlp_to_json(const Mlp& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t li = 0; li < net.layer_count(); ++li) {
    const Layer& l = net.layer(li);
    layers.push_back({{"in", l.w.cols},
                      {"out", l.w.rows},
                      {"activation", to_string(l.act)},
                      {"w", l.w.data},
                      {"b", l.b}});
  }
  return {{"schema_version", kWeightSchemaVersion}, {"layers", layers}};
}

inline Mlp mlp_from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("schema_version") || !doc.contains("layers"))
    throw std::invalid_argument("weight document: malformed");
  if (doc.at("schema_version").get<int>() != kWeightSchemaVersion)
    throw std::invalid_argument("weight document: unsupported schema_version");

  std::vector<LayerSpec> spec;
  std::vector<std::pair<std::vector<double>, std::vector<double>>> params;
  int prev_out = -1;
  for (const auto& jl : doc.at("layers")) {
    LayerSpec s;
    s.in = jl.at("in").get<int>();
    s.out = jl.at("out").get<int>();
    s.act = activation_from_string(jl.at("activation").get<std::string>());
    auto w = jl.at("w").get<std::vector<double>>();
    auto b = jl.at("b").get<std::vector<double>>();
    if (static_cast<int>(w.size()) != s.in * s.out ||
        static_cast<int>(b.size()) != s.out)
      throw std::invalid_argument("weight document: shape mismatch");
    if (prev_out >= 0 && s.in != prev_out)
      throw std::invalid_argument("weight document: layer dimensions do not chain");
    prev_out = s.out;
    spec.push_back(s);
    params.emplace_back(std::move(w), std::move(b));
  }
  if (spec.empty()) throw std::invalid_argument("weight document: no layers");

  RngStream dummy(0);
  Mlp net(spec, dummy);
  for (std::size_t li = 0; li < spec.size(); ++li) {
    net.layer(li).w.data = std::move(params[li].first);
    net.layer(li).b = std::move(params[li].second);
  }
  return net;
}

}  // namespace uavmec
