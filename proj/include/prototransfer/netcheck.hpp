#pragma once

// Finite-difference check of the pre-training loss gradient through the whole
// backbone, in double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "prototransfer/backbone.hpp"
#include "prototransfer/gradcheck.hpp"
#include "prototransfer/protoclr.hpp"
#include "prototransfer/rng.hpp"

namespace prototransfer {

struct NetGradcheckConfig {
  std::size_t images = 4;        // N
  std::size_t queries = 2;       // Q
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t full_check_limit = 1024;  // tensors up to this size are checked entry by entry
  std::size_t sampled_entries = 64;     // entries drawn from larger tensors
  double step = 1e-6;
  double tolerance = 1e-3;
  double floor = 1e-6;
  std::uint64_t seed = 0;
};

struct TensorGradcheck {
  std::string name;
  std::size_t numel = 0;
  std::size_t checked = 0;
  double max_error = 0;          // worst single-entry relative error
  double max_abs_error = 0;      // worst single-entry |analytic - numeric|
  double max_abs_grad = 0;       // largest analytic entry magnitude
  double directional_error = 0;  // relative error of a random unit directional derivative
};

struct NetGradcheckResult {
  std::vector<TensorGradcheck> tensors;
  double max_error = 0;
  double max_abs_error = 0;
  std::size_t evaluations = 0;
  bool passed = false;
};

/// Optional hook applied to the analytic gradients before comparison.
using GradientHook = std::function<void(std::vector<Parameter<double>*>&)>;

inline NetGradcheckResult gradcheck_protoclr(const NetGradcheckConfig& cfg, const GradientHook& hook = {}) {
  Conv4<double> net(Geometry{cfg.channels, cfg.image_size}, cfg.seed);
  const std::size_t n = cfg.images, q = cfg.queries, S = cfg.image_size, C = cfg.channels;
  Rng rng = make_stream(cfg.seed, Stream::Init, {0x9c4ec});
  // Queries blend their prototype with an independent random image so the
  // loss stays away from saturation.
  BasicTensor<double> images(Shape{n * (1 + q), C, S, S});
  const std::size_t per = C * S * S;
  for (std::size_t i = 0; i < n * per; ++i) images[i] = uniform(rng, 0, 1);
  for (std::size_t k = 0; k < n * q; ++k) {
    const std::size_t src = k / q;
    for (std::size_t j = 0; j < per; ++j) {
      images[(n + k) * per + j] = 0.5 * images[src * per + j] + 0.5 * uniform(rng, 0, 1);
    }
  }
  BatchNormOptions bn;
  bn.update_running_stats = false;
  NetGradcheckResult result;
  auto loss = [&](bool backward) {
    Tape<double> tape;
    Var<double> z = net.forward(tape.constant(images), Mode::Train, bn);
    auto l = protoclr_loss(ops::slice_rows(z, 0, n), ops::slice_rows(z, n, n * q));
    if (backward) {
      net.zero_grad();
      tape.backward(l.loss);
    }
    ++result.evaluations;
    return l.loss.value().item();
  };

  loss(true);
  std::vector<Parameter<double>*> params = net.parameters();
  if (hook) hook(params);
  std::vector<BasicTensor<double>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);

  const double h = cfg.step;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Parameter<double>& p = *params[t];
    TensorGradcheck tc;
    tc.name = p.name;
    tc.numel = p.value.numel();
    std::vector<std::size_t> entries;
    if (tc.numel <= cfg.full_check_limit) {
      entries.resize(tc.numel);
      for (std::size_t i = 0; i < tc.numel; ++i) entries[i] = i;
    } else {
      Rng pick = make_stream(cfg.seed, Stream::Init, {0x9c4ed, t});
      entries = sample_distinct(tc.numel, std::min(cfg.sampled_entries, tc.numel), pick);
    }
    for (std::size_t i : entries) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double fp = loss(false);
      p.value[i] = orig - h;
      const double fm = loss(false);
      p.value[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      tc.max_error = std::max(tc.max_error, relative_error(analytic[t][i], numeric, cfg.floor));
      tc.max_abs_error = std::max(tc.max_abs_error, std::abs(analytic[t][i] - numeric));
    }
    tc.checked = entries.size();
    for (std::size_t i = 0; i < tc.numel; ++i) tc.max_abs_grad = std::max(tc.max_abs_grad, std::abs(analytic[t][i]));

    // Random unit direction with +-1/sqrt(n) entries over the whole tensor.
    Rng dir_rng = make_stream(cfg.seed, Stream::Init, {0x9c4ee, t});
    BasicTensor<double> v(p.value.shape());
    const double unit = 1.0 / std::sqrt(static_cast<double>(tc.numel));
    double along = 0;
    for (std::size_t i = 0; i < tc.numel; ++i) {
      v[i] = bernoulli(dir_rng, 0.5) ? unit : -unit;
      along += v[i] * analytic[t][i];
    }
    const BasicTensor<double> orig = p.value;
    for (std::size_t i = 0; i < tc.numel; ++i) p.value[i] = orig[i] + h * v[i];
    const double fp = loss(false);
    for (std::size_t i = 0; i < tc.numel; ++i) p.value[i] = orig[i] - h * v[i];
    const double fm = loss(false);
    p.value = orig;
    tc.directional_error = relative_error(along, (fp - fm) / (2 * h), cfg.floor);

    result.max_error = std::max({result.max_error, tc.max_error, tc.directional_error});
    result.max_abs_error = std::max(result.max_abs_error, tc.max_abs_error);
    result.tensors.push_back(tc);
  }
  result.passed = result.max_error <= cfg.tolerance;
  return result;
}

}  // namespace prototransfer
