#pragma once

// Episode adaptation: prototypes, prototype-initialized linear heads and their
// fine-tuning, plus the supervised baselines.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "prototransfer/backbone.hpp"
#include "prototransfer/checkpoint.hpp"
#include "prototransfer/data.hpp"
#include "prototransfer/errors.hpp"
#include "prototransfer/ops.hpp"
#include "prototransfer/rng.hpp"
#include "prototransfer/tape.hpp"

namespace prototransfer {

/// Class centroids; row n belongs to episode-local class n.
struct PrototypeSet {
  Tensor centroids;                 // [N, D]
  std::vector<std::size_t> class_ids;

  std::size_t size() const { return centroids.dim(0); }
  std::size_t dim() const { return centroids.dim(1); }
};

inline PrototypeSet compute_prototypes(const Tensor& embeddings,
                                       const std::vector<std::size_t>& labels,
                                       std::size_t n_classes = 0) {
  if (embeddings.rank() != 2) {
    throw ShapeError("compute_prototypes: embeddings must be [M, D], got " +
                     shape_string(embeddings.shape()));
  }
  const std::size_t M = embeddings.dim(0), D = embeddings.dim(1);
  if (labels.size() != M) {
    throw ShapeError("compute_prototypes: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(M) + " embeddings");
  }
  if (n_classes == 0 && M > 0) n_classes = *std::max_element(labels.begin(), labels.end()) + 1;
  if (n_classes == 0) throw ContractError("compute_prototypes: no samples");
  std::vector<double> sum(n_classes * D, 0.0);
  std::vector<std::size_t> count(n_classes, 0);
  for (std::size_t i = 0; i < M; ++i) {
    if (labels[i] >= n_classes) throw ContractError("compute_prototypes: label out of range");
    ++count[labels[i]];
    for (std::size_t d = 0; d < D; ++d) sum[labels[i] * D + d] += embeddings[i * D + d];
  }
  PrototypeSet out;
  out.centroids = Tensor(Shape{n_classes, D});
  for (std::size_t n = 0; n < n_classes; ++n) {
    if (count[n] == 0) {
      throw ContractError("compute_prototypes: class " + std::to_string(n) + " has no samples");
    }
    for (std::size_t d = 0; d < D; ++d) {
      out.centroids[n * D + d] = static_cast<float>(sum[n * D + d] / static_cast<double>(count[n]));
    }
  }
  out.class_ids.resize(n_classes);
  std::iota(out.class_ids.begin(), out.class_ids.end(), 0);
  return out;
}

struct LinearHead {
  Parameter<float> weight;  // [N, D]
  Parameter<float> bias;    // [N]

  std::size_t classes() const { return weight.value.dim(0); }
  std::size_t dim() const { return weight.value.dim(1); }
  std::vector<Parameter<float>*> parameters() { return {&weight, &bias}; }
  std::vector<const Parameter<float>*> parameters() const { return {&weight, &bias}; }
  void zero_grad() {
    weight.zero_grad();
    bias.zero_grad();
  }
};

/// W_n = 2 c_n, b_n = -||c_n||^2.
inline LinearHead init_head(const PrototypeSet& protos) {
  const std::size_t N = protos.size(), D = protos.dim();
  Tensor w(Shape{N, D}), b(Shape{N});
  for (std::size_t n = 0; n < N; ++n) {
    double sq = 0;
    for (std::size_t d = 0; d < D; ++d) {
      const float c = protos.centroids[n * D + d];
      w[n * D + d] = 2.0f * c;
      sq += static_cast<double>(c) * c;
    }
    b[n] = static_cast<float>(-sq);
  }
  return {Parameter<float>("head.weight", std::move(w)), Parameter<float>("head.bias", std::move(b))};
}

/// Fresh head with weights and biases uniform in +-1/sqrt(D).
inline LinearHead random_head(std::size_t n_classes, std::size_t dim, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  Tensor w(Shape{n_classes, dim}), b(Shape{n_classes});
  for (auto& v : w.data()) v = static_cast<float>(uniform(rng, -bound, bound));
  for (auto& v : b.data()) v = static_cast<float>(uniform(rng, -bound, bound));
  return {Parameter<float>("head.weight", std::move(w)), Parameter<float>("head.bias", std::move(b))};
}

inline TensorList head_state(const LinearHead& head) {
  return {{head.weight.name, head.weight.value}, {head.bias.name, head.bias.value}};
}

inline LinearHead head_from_state(const TensorList& list) {
  const Tensor& w = require_tensor(list, "head.weight");
  const Tensor& b = require_tensor(list, "head.bias");
  if (w.rank() != 2 || b.rank() != 1 || b.dim(0) != w.dim(0)) {
    throw LoadError("head tensors have inconsistent shapes " + shape_string(w.shape()) + " / " +
                    shape_string(b.shape()));
  }
  return {Parameter<float>("head.weight", w), Parameter<float>("head.bias", b)};
}

/// Labels and per-class softmax scores [M, N].
struct Prediction {
  std::vector<std::size_t> labels;
  Tensor scores;
};

namespace detail {

/// Row-wise argmax (ties to the lowest index) and softmax of double scores.
inline Prediction predict_from_scores(const std::vector<double>& s, std::size_t M, std::size_t N) {
  Prediction p;
  p.labels.resize(M);
  p.scores = Tensor(Shape{M, N});
  for (std::size_t i = 0; i < M; ++i) {
    const double* row = s.data() + i * N;
    std::size_t best = 0;
    for (std::size_t n = 1; n < N; ++n) {
      if (row[n] > row[best]) best = n;
    }
    p.labels[i] = best;
    double z = 0;
    for (std::size_t n = 0; n < N; ++n) z += std::exp(row[n] - row[best]);
    for (std::size_t n = 0; n < N; ++n) {
      p.scores[i * N + n] = static_cast<float>(std::exp(row[n] - row[best]) / z);
    }
  }
  return p;
}

inline void check_embeddings(const Tensor& emb, std::size_t D, const char* op) {
  if (emb.rank() != 2 || emb.dim(1) != D) {
    throw ShapeError(std::string(op) + ": embeddings must be [M, " + std::to_string(D) + "], got " +
                     shape_string(emb.shape()));
  }
}

}  // namespace detail

/// Nearest prototype under squared Euclidean distance; scores are a softmax
/// over negated squared distances.
inline Prediction classify_embeddings(const PrototypeSet& protos, const Tensor& queries) {
  const std::size_t N = protos.size(), D = protos.dim();
  detail::check_embeddings(queries, D, "classify_prototypes");
  const std::size_t M = queries.dim(0);
  std::vector<double> s(M * N);
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t n = 0; n < N; ++n) {
      double d2 = 0;
      for (std::size_t d = 0; d < D; ++d) {
        const double diff = static_cast<double>(queries[i * D + d]) - protos.centroids[n * D + d];
        d2 += diff * diff;
      }
      s[i * N + n] = -d2;
    }
  }
  return detail::predict_from_scores(s, M, N);
}

inline Prediction classify_prototypes(const Conv4<float>& net, const PrototypeSet& protos,
                                      const Tensor& query_images) {
  return classify_embeddings(protos, net.embed(query_images));
}

/// Head logits W z + b accumulated in double; argmax with ties to the lowest index.
inline Prediction classify_head(const LinearHead& head, const Tensor& embeddings) {
  const std::size_t N = head.classes(), D = head.dim();
  detail::check_embeddings(embeddings, D, "classify_head");
  const std::size_t M = embeddings.dim(0);
  std::vector<double> s(M * N);
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t n = 0; n < N; ++n) {
      double acc = head.bias.value[n];
      for (std::size_t d = 0; d < D; ++d) {
        acc += static_cast<double>(head.weight.value[n * D + d]) * embeddings[i * D + d];
      }
      s[i * N + n] = acc;
    }
  }
  return detail::predict_from_scores(s, M, N);
}

enum class FineTuneScope { HeadOnly, FullModel };

inline std::string scope_name(FineTuneScope s) {
  return s == FineTuneScope::HeadOnly ? "head-only" : "full-model";
}

inline FineTuneScope parse_scope(const std::string& s) {
  if (s == "head-only") return FineTuneScope::HeadOnly;
  if (s == "full-model") return FineTuneScope::FullModel;
  throw ConfigError("unknown fine-tune scope '" + s + "' (valid: head-only, full-model)");
}

struct FineTuneConfig {
  std::size_t epochs = 15;
  std::size_t batch_size = 5;
  double learning_rate = 1e-3;
  FineTuneScope scope = FineTuneScope::HeadOnly;

  friend bool operator==(const FineTuneConfig&, const FineTuneConfig&) = default;
};

/// Support-set batches for one epoch after shuffling with `rng`.
/// With `merge_singleton`, a trailing batch of one sample joins the previous batch.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_size,
                                                           Rng& rng, bool merge_singleton) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < count; s += batch_size) {
    out.emplace_back(order.begin() + static_cast<long>(s),
                     order.begin() + static_cast<long>(std::min(count, s + batch_size)));
  }
  if (merge_singleton && out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

namespace detail {

inline AdamConfig finetune_adam(const FineTuneConfig& cfg) {
  AdamConfig a;
  a.learning_rate = cfg.learning_rate;
  a.decay_period = 0;
  return a;
}

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t D = x.numel() / x.dim(0);
  Shape s = x.shape();
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(x.raw() + rows[r] * D, x.raw() + (rows[r] + 1) * D, out.raw() + r * D);
  }
  return out;
}

template <class V>
std::vector<V> pick(const std::vector<V>& v, const std::vector<std::size_t>& idx) {
  std::vector<V> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

}  // namespace detail

/// Trains `head` on fixed support embeddings with softmax cross-entropy.
/// Returns the mean support loss of each epoch.
inline std::vector<double> finetune_head(LinearHead& head, const Tensor& support_emb,
                                         const std::vector<std::size_t>& labels,
                                         const FineTuneConfig& cfg, Rng& rng) {
  detail::check_embeddings(support_emb, head.dim(), "finetune_head");
  if (labels.size() != support_emb.dim(0)) throw ShapeError("finetune_head: label count mismatch");
  if (cfg.batch_size == 0) throw ContractError("finetune_head: batch size must be positive");
  AdamState<float> adam(detail::finetune_adam(cfg));
  std::vector<double> epoch_loss;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double total = 0;
    for (const auto& b : epoch_batches(labels.size(), cfg.batch_size, rng, false)) {
      Tape<float> tape;
      Var<float> x = tape.constant(detail::gather_rows(support_emb, b));
      auto ce = ops::cross_entropy(ops::linear(x, tape.param(head.weight), tape.param(head.bias)),
                                   detail::pick(labels, b));
      head.zero_grad();
      tape.backward(ce.loss);
      adam_step(head.parameters(), adam);
      total += ce.loss.value().item() * static_cast<double>(b.size());
    }
    epoch_loss.push_back(total / static_cast<double>(labels.size()));
  }
  return epoch_loss;
}

/// Result of adapting to one episode. `net` is set only when the backbone was
/// fine-tuned.
struct AdaptedModel {
  LinearHead head;
  std::optional<Conv4<float>> net;
  std::vector<double> epoch_loss;
};

/// Trains head and backbone jointly on support images; batchnorm runs in
/// training mode and updates its running statistics.
inline std::vector<double> finetune_full(Conv4<float>& net, LinearHead& head, const Tensor& support_images,
                                         const std::vector<std::size_t>& labels,
                                         const FineTuneConfig& cfg, Rng& rng) {
  if (cfg.batch_size == 0) throw ContractError("finetune_full: batch size must be positive");
  AdamState<float> adam(detail::finetune_adam(cfg));
  std::vector<Parameter<float>*> params = net.parameters();
  params.push_back(&head.weight);
  params.push_back(&head.bias);
  std::vector<double> epoch_loss;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double total = 0;
    for (const auto& b : epoch_batches(labels.size(), cfg.batch_size, rng, true)) {
      Tape<float> tape;
      Var<float> z = net.forward(tape.constant(detail::gather_rows(support_images, b)), Mode::Train);
      auto ce = ops::cross_entropy(ops::linear(z, tape.param(head.weight), tape.param(head.bias)),
                                   detail::pick(labels, b));
      for (auto* p : params) p->zero_grad();
      tape.backward(ce.loss);
      adam_step(params, adam);
      total += ce.loss.value().item() * static_cast<double>(b.size());
    }
    epoch_loss.push_back(total / static_cast<double>(labels.size()));
  }
  return epoch_loss;
}

/// ProtoTune: head initialized from support prototypes, then fine-tuned on
/// the support set. `support_emb`, when given, must be the eval-mode support
/// embeddings of `net` and skips recomputing them for head-only tuning.
inline AdaptedModel proto_tune(const Conv4<float>& net, const Tensor& support_images,
                               const std::vector<std::size_t>& labels, std::size_t n_ways,
                               const FineTuneConfig& cfg, Rng& rng,
                               const Tensor* support_emb = nullptr) {
  if (labels.empty()) throw ContractError("proto_tune: empty support set");
  AdaptedModel out;
  if (cfg.scope == FineTuneScope::HeadOnly) {
    const Tensor emb = support_emb ? *support_emb : net.embed(support_images);
    out.head = init_head(compute_prototypes(emb, labels, n_ways));
    out.epoch_loss = finetune_head(out.head, emb, labels, cfg, rng);
  } else {
    out.net = net;
    out.head = init_head(compute_prototypes(net.embed(support_images), labels, n_ways));
    out.epoch_loss = finetune_full(*out.net, out.head, support_images, labels, cfg, rng);
  }
  return out;
}

/// Linear probe: a randomly initialized head trained on frozen support embeddings.
inline AdaptedModel linear_probe(const Tensor& support_emb, const std::vector<std::size_t>& labels,
                                 std::size_t n_ways, const FineTuneConfig& cfg, Rng& rng) {
  if (labels.empty()) throw ContractError("linear_probe: empty support set");
  AdaptedModel out;
  out.head = random_head(n_ways, support_emb.dim(1), rng);
  out.epoch_loss = finetune_head(out.head, support_emb, labels, cfg, rng);
  return out;
}

/// Predictions of an adapted model for query images (or their cached
/// embeddings under the unadapted backbone).
inline Prediction predict(const AdaptedModel& m, const Conv4<float>& base, const Tensor& query_images,
                          const Tensor* query_emb = nullptr) {
  if (m.net) return classify_head(m.head, m.net->embed(query_images));
  return classify_head(m.head, query_emb ? *query_emb : base.embed(query_images));
}

// ---- supervised baselines --------------------------------------------------

struct ProtoNetConfig {
  std::size_t ways = 20;
  std::size_t shots = 5;
  std::size_t queries = 15;
  std::uint64_t iterations = 0;
  AdamConfig adam{};
  std::uint64_t seed = 0;
};

/// Episodic training: queries are classified against the support prototypes
/// of each sampled episode. Returns the per-iteration loss.
inline std::vector<double> train_protonet_supervised(const Dataset& ds, Conv4<float>& net,
                                                     const ProtoNetConfig& cfg) {
  if (cfg.iterations > 0 && !ds.labeled()) throw ContractError("protonet: dataset has no labels");
  if (cfg.queries == 0) throw ContractError("protonet: need at least one query per class");
  AdamState<float> adam(cfg.adam);
  std::vector<double> losses;
  for (std::uint64_t it = 0; it < cfg.iterations; ++it) {
    Rng rng = make_stream(cfg.seed, Stream::Supervised, {0x9e7, it});
    const Episode ep = sample_episode(ds, cfg.ways, cfg.shots, cfg.queries, rng);
    std::vector<std::size_t> ids = ep.support_ids;
    ids.insert(ids.end(), ep.query_ids.begin(), ep.query_ids.end());
    Tape<float> tape;
    Var<float> z = net.forward(tape.constant(gather_images(ds, ids)), Mode::Train);
    const std::size_t ns = ep.support_ids.size();
    Var<float> protos = ops::class_means(ops::slice_rows(z, 0, ns), ep.support_labels, ep.n_ways);
    Var<float> d = ops::pairwise_sq_dist(ops::slice_rows(z, ns, ep.query_ids.size()), protos);
    auto ce = ops::cross_entropy(ops::scale(d, -1.0f), ep.query_labels);
    const double l = ce.loss.value().item();
    if (!std::isfinite(l)) {
      throw NumericError("protonet: non-finite loss at iteration " + std::to_string(it));
    }
    net.zero_grad();
    tape.backward(ce.loss);
    adam_step(net.parameters(), adam);
    losses.push_back(l);
  }
  return losses;
}

struct PreLinearConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  std::uint64_t max_steps = 0;  // 0: no cap beyond `epochs`
  AdamConfig adam{};
  std::uint64_t seed = 0;
};

struct PreLinearResult {
  LinearHead classifier;
  std::vector<double> losses;  // per step
};

/// Standard softmax classification over all base classes with a linear layer
/// on top of the backbone. The returned classifier is discarded for few-shot
/// adaptation.
inline PreLinearResult train_pre_linear(const Dataset& ds, Conv4<float>& net, const PreLinearConfig& cfg) {
  if (!ds.labeled()) throw ContractError("pre_linear: dataset has no labels");
  if (ds.num_classes() < 2) {
    throw ContractError("pre_linear: need at least 2 base classes, got " +
                        std::to_string(ds.num_classes()));
  }
  if (cfg.batch_size < 2) throw ContractError("pre_linear: batch size must be at least 2");
  PreLinearResult out;
  Rng init = make_stream(cfg.seed, Stream::Supervised, {0x11, 0});
  out.classifier = random_head(ds.num_classes(), net.embedding_dim(), init);
  std::vector<Parameter<float>*> params = net.parameters();
  params.push_back(&out.classifier.weight);
  params.push_back(&out.classifier.bias);
  AdamState<float> adam(cfg.adam);
  std::uint64_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    Rng rng = make_stream(cfg.seed, Stream::Supervised, {0x11, e + 1});
    for (const auto& b : epoch_batches(ds.size(), cfg.batch_size, rng, true)) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) return out;
      Tape<float> tape;
      Var<float> z = net.forward(tape.constant(gather_images(ds, b)), Mode::Train);
      auto ce = ops::cross_entropy(
          ops::linear(z, tape.param(out.classifier.weight), tape.param(out.classifier.bias)),
          detail::pick(ds.labels, b));
      const double l = ce.loss.value().item();
      if (!std::isfinite(l)) throw NumericError("pre_linear: non-finite loss at step " + std::to_string(step));
      for (auto* p : params) p->zero_grad();
      tape.backward(ce.loss);
      adam_step(params, adam);
      out.losses.push_back(l);
      ++step;
    }
  }
  return out;
}

}  // namespace prototransfer
