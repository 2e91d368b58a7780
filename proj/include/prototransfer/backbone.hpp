#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "prototransfer/checkpoint.hpp"
#include "prototransfer/errors.hpp"
#include "prototransfer/ops.hpp"
#include "prototransfer/rng.hpp"
#include "prototransfer/tape.hpp"
#include "prototransfer/tensor.hpp"

namespace prototransfer {

/// Input image geometry of a network: channels x size x size.
struct Geometry {
  std::size_t channels = 1;
  std::size_t size = 28;

  friend bool operator==(const Geometry&, const Geometry&) = default;
};

/// Spatial side length after the four 2x2 poolings.
inline std::size_t conv4_final_side(std::size_t size) {
  for (int i = 0; i < 4; ++i) size /= 2;
  return size;
}

template <class T>
struct ConvBlock {
  Parameter<T> weight;  // [64, C, 3, 3]
  Parameter<T> bias;    // [64]
  Parameter<T> gamma;   // [64]
  Parameter<T> beta;    // [64]
  BatchNormStats<T> stats;
};

/// Four {conv3x3(64) -> batchnorm -> relu -> maxpool2x2} blocks, flattened.
template <class T>
class Conv4 {
 public:
  static constexpr std::size_t kFilters = 64;
  static constexpr std::size_t kBlocks = 4;
  static constexpr std::size_t kMinInputSize = 16;

  Conv4() = default;

  /// Kaiming-uniform conv weights (bound sqrt(6 / fan_in)), conv biases
  /// uniform in +-1/sqrt(fan_in), gamma 1, beta 0. Deterministic in `seed`.
  Conv4(Geometry geometry, std::uint64_t seed) : geometry_(geometry) {
    if (geometry.channels != 1 && geometry.channels != 3) {
      throw GeometryError("Conv4: input channels must be 1 or 3, got " +
                          std::to_string(geometry.channels));
    }
    if (geometry.size < kMinInputSize) {
      throw GeometryError("Conv4: input size " + std::to_string(geometry.size) +
                          " below minimum " + std::to_string(kMinInputSize));
    }
    Rng rng = make_stream(seed, Stream::Init);
    std::size_t in = geometry.channels;
    for (std::size_t b = 0; b < kBlocks; ++b) {
      const std::string p = "conv4.block" + std::to_string(b);
      const double fan_in = static_cast<double>(in * 9);
      const double wb = std::sqrt(6.0 / fan_in);
      const double bb = 1.0 / std::sqrt(fan_in);
      BasicTensor<T> w(Shape{kFilters, in, 3, 3});
      for (auto& v : w.data()) v = static_cast<T>(uniform(rng, -wb, wb));
      BasicTensor<T> bias(Shape{kFilters});
      for (auto& v : bias.data()) v = static_cast<T>(uniform(rng, -bb, bb));
      ConvBlock<T> blk{Parameter<T>(p + ".conv.weight", std::move(w)),
                       Parameter<T>(p + ".conv.bias", std::move(bias)),
                       Parameter<T>(p + ".bn.weight", BasicTensor<T>(Shape{kFilters}, T{1})),
                       Parameter<T>(p + ".bn.bias", BasicTensor<T>(Shape{kFilters}, T{0})),
                       BatchNormStats<T>(kFilters)};
      blocks_[b] = std::move(blk);
      in = kFilters;
    }
  }

  const Geometry& geometry() const noexcept { return geometry_; }
  std::size_t embedding_dim() const {
    const std::size_t s = conv4_final_side(geometry_.size);
    return kFilters * s * s;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& b : blocks_) {
      out.insert(out.end(), {&b.weight, &b.bias, &b.gamma, &b.beta});
    }
    return out;
  }

  std::vector<const Parameter<T>*> parameters() const {
    std::vector<const Parameter<T>*> out;
    for (const auto& b : blocks_) {
      out.insert(out.end(), {&b.weight, &b.bias, &b.gamma, &b.beta});
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->value.numel();
    return n;
  }

  const ConvBlock<T>& block(std::size_t i) const { return blocks_.at(i); }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  void check_input(const Shape& s) const {
    if (s.size() != 4) throw ShapeError("Conv4: images must be [B,C,H,W], got " + shape_string(s));
    if (s[1] != geometry_.channels) {
      throw ShapeError("Conv4: images axis 1 (channels) is " + std::to_string(s[1]) +
                       ", network expects " + std::to_string(geometry_.channels));
    }
    if (s[2] != geometry_.size || s[3] != geometry_.size) {
      throw ShapeError("Conv4: images spatial axes are " + std::to_string(s[2]) + "x" +
                       std::to_string(s[3]) + ", network expects " +
                       std::to_string(geometry_.size));
    }
  }

  /// Records the embedding of `images` on their tape with parameters as
  /// gradient-tracking leaves. Train mode uses batch statistics and updates
  /// the running statistics unless `bn.update_running_stats` is false.
  Var<T> forward(Var<T> images, Mode mode, BatchNormOptions bn = {}) {
    check_input(images.shape());
    Tape<T>& tape = *images.tape;
    Var<T> h = images;
    for (auto& b : blocks_) {
      h = ops::conv2d(h, tape.param(b.weight), tape.param(b.bias));
      h = ops::batchnorm2d(h, tape.param(b.gamma), tape.param(b.beta), b.stats, mode, bn);
      h = ops::relu(h);
      h = ops::maxpool2x2(h);
    }
    return ops::flatten(h);
  }

  /// Records an embedding with parameters held constant (no parameter
  /// gradients, running statistics untouched).
  Var<T> forward_frozen(Var<T> images, Mode mode = Mode::Eval) const {
    check_input(images.shape());
    Tape<T>& tape = *images.tape;
    BatchNormOptions bn;
    bn.update_running_stats = false;
    Var<T> h = images;
    for (const auto& b : blocks_) {
      BatchNormStats<T> stats = b.stats;
      h = ops::conv2d(h, tape.constant(b.weight.value), tape.constant(b.bias.value));
      h = ops::batchnorm2d(h, tape.constant(b.gamma.value), tape.constant(b.beta.value),
                           stats, mode, bn);
      h = ops::relu(h);
      h = ops::maxpool2x2(h);
    }
    return ops::flatten(h);
  }

  /// Eval-mode embedding [B, D] without gradient bookkeeping.
  BasicTensor<T> embed(const BasicTensor<T>& images) const {
    Tape<T> tape;
    return forward_frozen(tape.constant(images)).value();
  }

  template <class U>
  Conv4<U> cast() const {
    Conv4<U> out;
    out.geometry_ = geometry_;
    for (std::size_t i = 0; i < kBlocks; ++i) {
      const auto& b = blocks_[i];
      out.blocks_[i] = ConvBlock<U>{b.weight.template cast<U>(), b.bias.template cast<U>(),
                                    b.gamma.template cast<U>(), b.beta.template cast<U>(),
                                    b.stats.template cast<U>()};
    }
    return out;
  }

  /// Parameters and running statistics under stable names, plus geometry.
  TensorList state() const {
    TensorList out;
    out.push_back({"conv4.geometry",
                   Tensor::from({2}, {static_cast<float>(geometry_.channels),
                                      static_cast<float>(geometry_.size)})});
    for (std::size_t i = 0; i < kBlocks; ++i) {
      const auto& b = blocks_[i];
      const std::string p = "conv4.block" + std::to_string(i);
      for (const auto* prm : {&b.weight, &b.bias, &b.gamma, &b.beta}) {
        out.push_back({prm->name, prm->value.template cast<float>()});
      }
      out.push_back({p + ".bn.running_mean", b.stats.running_mean.template cast<float>()});
      out.push_back({p + ".bn.running_var", b.stats.running_var.template cast<float>()});
    }
    return out;
  }

  static Conv4 from_state(const TensorList& list) {
    const Tensor& g = require_tensor(list, "conv4.geometry");
    if (g.numel() != 2) throw LoadError("conv4.geometry must hold 2 values");
    Conv4 net(Geometry{static_cast<std::size_t>(g[0]), static_cast<std::size_t>(g[1])}, 0);
    for (std::size_t i = 0; i < kBlocks; ++i) {
      auto& b = net.blocks_[i];
      const std::string p = "conv4.block" + std::to_string(i);
      auto assign = [&](BasicTensor<T>& dst, const std::string& name) {
        const Tensor& src = require_tensor(list, name);
        if (src.shape() != dst.shape()) {
          throw LoadError("tensor '" + name + "' has shape " + shape_string(src.shape()) +
                          ", expected " + shape_string(dst.shape()));
        }
        dst = src.template cast<T>();
      };
      for (auto* prm : {&b.weight, &b.bias, &b.gamma, &b.beta}) assign(prm->value, prm->name);
      assign(b.stats.running_mean, p + ".bn.running_mean");
      assign(b.stats.running_var, p + ".bn.running_var");
    }
    return net;
  }

 private:
  template <class>
  friend class Conv4;

  Geometry geometry_;
  std::array<ConvBlock<T>, kBlocks> blocks_;
};

/// Images [B, C, H, W] must match the network; otherwise ShapeError.
template <class T>
BasicTensor<T> embed(const Conv4<T>& net, const BasicTensor<T>& images) {
  return net.embed(images);
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay_factor = 0.5;
  std::uint64_t decay_period = 25000;  // 0 disables decay

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::vector<BasicTensor<T>> m;
  std::vector<BasicTensor<T>> v;
  std::uint64_t t = 0;  // completed steps

  AdamState() = default;
  explicit AdamState(AdamConfig c) : config(c) {}

  /// alpha * factor^floor(t / period) for the next step.
  double learning_rate() const {
    if (config.decay_period == 0) return config.learning_rate;
    return config.learning_rate *
           std::pow(config.decay_factor, static_cast<double>(t / config.decay_period));
  }
};

/// Bias-corrected Adam update of every parameter from its grad buffer.
template <class T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* p = params[i];
    if (p->grad.numel() != p->value.numel() || p->grad.shape() != p->value.shape()) {
      throw ContractError("adam_step: parameter '" + p->name + "' has no gradient");
    }
    if (state.m[i].shape() != p->value.shape()) {
      throw ContractError("adam_step: moment shape mismatch for '" + p->name + "'");
    }
  }
  const AdamConfig& c = state.config;
  const double lr = state.learning_rate();
  const double step = static_cast<double>(state.t + 1);
  const double bc1 = 1.0 - std::pow(c.beta1, step);
  const double bc2 = 1.0 - std::pow(c.beta2, step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p.value.numel(); ++k) {
      const double g = p.grad[k];
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * g;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = lr * (mk / bc1) / (std::sqrt(vk / bc2) + c.eps);
      p.value[k] = static_cast<T>(p.value[k] - update);
    }
  }
  ++state.t;
}

template <class T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state) {
  adam_step(std::span<Parameter<T>* const>(params.data(), params.size()), state);
}

/// Optimizer moments under `adam.m.<param>`, `adam.v.<param>` and `adam.t`.
template <class T>
TensorList adam_state_tensors(const std::vector<const Parameter<T>*>& params,
                              const AdamState<T>& state) {
  TensorList out;
  if (!state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.push_back({"adam.m." + params[i]->name, state.m[i].template cast<float>()});
      out.push_back({"adam.v." + params[i]->name, state.v[i].template cast<float>()});
    }
  }
  out.push_back({"adam.t", Tensor::scalar(static_cast<float>(state.t))});
  return out;
}

template <class T>
AdamState<T> adam_state_from(const TensorList& list, const std::vector<const Parameter<T>*>& params,
                             AdamConfig config) {
  AdamState<T> st(config);
  st.t = static_cast<std::uint64_t>(require_tensor(list, "adam.t").item());
  if (find_tensor(list, "adam.m." + params.front()->name) == nullptr) return st;
  for (const auto* p : params) {
    st.m.push_back(require_tensor(list, "adam.m." + p->name).template cast<T>());
    st.v.push_back(require_tensor(list, "adam.v." + p->name).template cast<T>());
  }
  return st;
}

}  // namespace prototransfer
