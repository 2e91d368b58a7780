#pragma once

// Self-supervised prototypical pre-training. Every image of a batch is its
// own class: the original is a 1-shot prototype and its Q augmented views are
// queries classified against all N prototypes by a softmax over negated
// squared Euclidean distances.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "prototransfer/augment.hpp"
#include "prototransfer/backbone.hpp"
#include "prototransfer/checkpoint.hpp"
#include "prototransfer/data.hpp"
#include "prototransfer/errors.hpp"
#include "prototransfer/ops.hpp"
#include "prototransfer/tape.hpp"

namespace prototransfer {

template <class T>
struct ProtoClrLoss {
  Var<T> loss;        // scalar: mean over all (i, q)
  Var<T> per_query;   // [N * Q], entry i * Q + q holds l(i, q)
};

/// Loss from a query-to-prototype squared distance matrix [N*Q, N] whose row
/// i*Q + q belongs to prototype i.
template <class T>
ProtoClrLoss<T> protoclr_loss_from_sq_dist(Var<T> sq_dist, std::size_t n, std::size_t q) {
  if (n < 2) throw ContractError("protoclr_loss: need N >= 2 prototypes, got " + std::to_string(n));
  if (q < 1) throw ContractError("protoclr_loss: need Q >= 1");
  if (sq_dist.shape().size() != 2 || sq_dist.shape()[0] != n * q || sq_dist.shape()[1] != n) {
    throw ShapeError("protoclr_loss: distance matrix must be [N*Q, N], got " +
                     shape_string(sq_dist.shape()));
  }
  std::vector<std::size_t> targets(n * q);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < q; ++j) targets[i * q + j] = i;
  }
  auto ce = ops::cross_entropy(ops::scale(sq_dist, T{-1}), std::move(targets));
  return {ce.loss, ce.per_row};
}

/// `prototypes` is [N, D]; `queries` is [N, Q, D] or [N*Q, D] with the views
/// of prototype i in rows i*Q .. i*Q + Q - 1.
template <class T>
ProtoClrLoss<T> protoclr_loss(Var<T> prototypes, Var<T> queries) {
  if (prototypes.shape().size() != 2) {
    throw ShapeError("protoclr_loss: prototypes must be [N, D], got " + shape_string(prototypes.shape()));
  }
  const std::size_t n = prototypes.shape()[0];
  if (n < 2) throw ContractError("protoclr_loss: need N >= 2 prototypes, got " + std::to_string(n));
  Var<T> q2 = queries;
  if (queries.shape().size() == 3) {
    if (queries.shape()[0] != n) {
      throw ShapeError("protoclr_loss: queries axis 0 is " + std::to_string(queries.shape()[0]) +
                       ", expected N = " + std::to_string(n));
    }
    q2 = ops::reshape(queries, Shape{n * queries.shape()[1], queries.shape()[2]});
  }
  if (q2.shape().size() != 2 || q2.shape()[0] % n != 0 || q2.shape()[0] == 0) {
    throw ShapeError("protoclr_loss: queries must be [N*Q, D], got " + shape_string(q2.shape()));
  }
  return protoclr_loss_from_sq_dist(ops::pairwise_sq_dist(q2, prototypes), n, q2.shape()[0] / n);
}

/// Index of the nearest prototype per query; ties go to the lowest index.
template <class T>
std::vector<std::size_t> nearest_prototype(const BasicTensor<T>& prototypes,
                                           const BasicTensor<T>& queries) {
  const std::size_t n = prototypes.dim(0), d = prototypes.dim(1);
  if (queries.rank() != 2 || queries.dim(1) != d) {
    throw ShapeError("nearest_prototype: query axis 1 must be " + std::to_string(d));
  }
  std::vector<std::size_t> out(queries.dim(0));
  for (std::size_t r = 0; r < queries.dim(0); ++r) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = static_cast<double>(queries[r * d + k]) - prototypes[i * d + k];
        s += diff * diff;
      }
      if (s < best) {
        best = s;
        out[r] = i;
      }
    }
  }
  return out;
}

/// Fraction of queries (rows i*Q+q of [N*Q, D]) whose nearest prototype is i.
template <class T>
double training_accuracy(const BasicTensor<T>& prototypes, const BasicTensor<T>& queries) {
  const std::size_t n = prototypes.dim(0);
  const std::size_t rows = queries.numel() / prototypes.dim(1);
  const BasicTensor<T> q2 = queries.reshaped(Shape{rows, prototypes.dim(1)});
  if (rows == 0 || rows % n != 0) throw ShapeError("training_accuracy: queries must be [N*Q, D]");
  const std::size_t q = rows / n;
  const auto pred = nearest_prototype(prototypes, q2);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < rows; ++r) hits += pred[r] == r / q;
  return static_cast<double>(hits) / static_cast<double>(rows);
}

struct ProtoClrConfig {
  std::size_t batch_size = 50;  // N
  std::size_t queries = 3;      // Q
  AdamConfig adam{};            // lr 1e-3, halved every 25,000 steps
  std::uint64_t patience = 20000;
  std::uint64_t max_iterations = 1000000;
  std::size_t accuracy_window = 100;
  std::uint64_t seed = 0;
  AugmentationPipeline pipeline = omniglot_pipeline();
  bool epoch_shuffle = false;
  std::size_t threads = 1;
  std::uint64_t checkpoint_interval = 0;  // 0: no periodic checkpoints
  std::filesystem::path checkpoint_dir;   // empty: no files written
};

struct TrainLogRow {
  std::uint64_t iteration = 0;
  double loss = 0;
  double accuracy = 0;
  double learning_rate = 0;

  friend bool operator==(const TrainLogRow&, const TrainLogRow&) = default;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  double wall_seconds = 0;
  std::uint64_t best_iteration = 0;
  double best_accuracy = -1;  // smoothed
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path best_checkpoint;
  bool stopped_early = false;

  void write_csv(std::ostream& os) const {
    os << "iter,loss,acc,lr\n";
    char buf[128];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g,%.9g\n",
                    static_cast<unsigned long long>(r.iteration), r.loss, r.accuracy,
                    r.learning_rate);
      os << buf;
    }
  }
};

struct ProtoClrResult {
  TrainLog log;
  AdamState<float> optimizer;
  /// Network state at the best smoothed training accuracy.
  std::optional<TensorList> best_state;
};

/// Network state followed by optimizer state.
inline TensorList training_state(const Conv4<float>& net, const AdamState<float>& adam) {
  TensorList out = net.state();
  const TensorList a = adam_state_tensors(net.parameters(), adam);
  out.insert(out.end(), a.begin(), a.end());
  return out;
}

/// One optimization step on a sampled batch; returns (loss, accuracy).
inline std::pair<double, double> protoclr_step(Conv4<float>& net, AdamState<float>& adam,
                                               const PretrainBatch& batch) {
  std::vector<const Image*> all;
  all.reserve(batch.prototypes.size() + batch.queries.size());
  for (const auto& im : batch.prototypes) all.push_back(&im);
  for (const auto& im : batch.queries) all.push_back(&im);
  Tape<float> tape;
  // Prototypes and queries share one batchnorm batch.
  Var<float> emb = net.forward(tape.constant(stack_images(all)), Mode::Train);
  Var<float> protos = ops::slice_rows(emb, 0, batch.n);
  Var<float> queries = ops::slice_rows(emb, batch.n, batch.n * batch.q);
  auto loss = protoclr_loss(protos, queries);
  const double l = loss.loss.value().item();
  if (!std::isfinite(l)) {
    throw NumericError("protoclr: non-finite loss at optimizer step " + std::to_string(adam.t) +
                       " (lr " + std::to_string(adam.learning_rate()) + ")");
  }
  const double acc = training_accuracy(protos.value(), queries.value());
  net.zero_grad();
  tape.backward(loss.loss);
  for (const auto* p : net.parameters()) {
    if (!p->grad.all_finite()) {
      throw NumericError("protoclr: non-finite gradient in '" + p->name + "' at optimizer step " +
                         std::to_string(adam.t));
    }
  }
  adam_step(net.parameters(), adam);
  return {l, acc};
}

/// Runs pre-training until `max_iterations` or until the smoothed batch
/// accuracy has not improved for `patience` iterations. `net` holds the
/// final-iteration parameters on return. Labels of `ds` are never read.
inline ProtoClrResult train_protoclr(const Dataset& ds, Conv4<float>& net, const ProtoClrConfig& cfg,
                                     std::optional<AdamState<float>> resume = std::nullopt,
                                     const std::function<void(const TrainLogRow&)>& on_step = {}) {
  if (cfg.batch_size < 2) throw ContractError("protoclr: batch size N must be >= 2");
  if (cfg.queries < 1) throw ContractError("protoclr: queries Q must be >= 1");
  if (cfg.patience < 1) throw ContractError("protoclr: patience must be >= 1");
  if (cfg.accuracy_window < 1) throw ContractError("protoclr: accuracy window must be >= 1");
  if (cfg.max_iterations > 0 && ds.size() < cfg.batch_size) {
    throw ContractError("protoclr: dataset has " + std::to_string(ds.size()) +
                        " samples, batch size is " + std::to_string(cfg.batch_size));
  }
  if (net.geometry().channels != cfg.pipeline.channels ||
      net.geometry().size != cfg.pipeline.out_size) {
    throw ContractError("protoclr: augmentation pipeline '" + cfg.pipeline.name +
                        "' output does not match the network input geometry");
  }
  const auto start = std::chrono::steady_clock::now();
  ProtoClrResult result;
  result.optimizer = resume ? *resume : AdamState<float>(cfg.adam);
  AdamState<float>& adam = result.optimizer;
  TrainLog& log = result.log;

  std::deque<double> window;
  double window_sum = 0;
  std::uint64_t since_best = 0;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::uint64_t epoch = 0;

  for (std::uint64_t it = 0; it < cfg.max_iterations; ++it) {
    PretrainBatch batch;
    if (cfg.epoch_shuffle) {
      if (order.empty() || cursor + cfg.batch_size > order.size()) {
        Rng rng = make_stream(cfg.seed, Stream::Batch, {0xe90c, epoch++});
        order = sample_distinct(ds.size(), ds.size(), rng);
        cursor = 0;
      }
      std::vector<std::size_t> ids(order.begin() + static_cast<long>(cursor),
                                   order.begin() + static_cast<long>(cursor + cfg.batch_size));
      cursor += cfg.batch_size;
      batch = sample_pretrain_batch(ds, cfg.batch_size, cfg.queries, cfg.pipeline, cfg.seed, it,
                                    cfg.threads, &ids);
    } else {
      batch = sample_pretrain_batch(ds, cfg.batch_size, cfg.queries, cfg.pipeline, cfg.seed, it,
                                    cfg.threads);
    }
    const double lr = adam.learning_rate();
    const auto [loss, acc] = protoclr_step(net, adam, batch);
    const TrainLogRow row{it, loss, acc, lr};
    log.rows.push_back(row);
    if (on_step) on_step(row);

    window.push_back(acc);
    window_sum += acc;
    if (window.size() > cfg.accuracy_window) {
      window_sum -= window.front();
      window.pop_front();
    }
    const double smoothed = window_sum / static_cast<double>(window.size());
    if (smoothed > log.best_accuracy) {
      log.best_accuracy = smoothed;
      log.best_iteration = it;
      result.best_state = net.state();
      since_best = 0;
    } else {
      ++since_best;
    }
    if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_interval > 0 &&
        (it + 1) % cfg.checkpoint_interval == 0) {
      const auto path = cfg.checkpoint_dir / ("iter_" + std::to_string(it + 1) + ".ptt1");
      save_ptt1(path, training_state(net, adam));
      log.checkpoints.push_back(path);
    }
    if (since_best >= cfg.patience) {
      log.stopped_early = true;
      break;
    }
  }
  if (!cfg.checkpoint_dir.empty() && result.best_state) {
    log.best_checkpoint = cfg.checkpoint_dir / "best.ptt1";
    save_ptt1(log.best_checkpoint, *result.best_state);
  }
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace prototransfer
