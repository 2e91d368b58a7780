#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace prototransfer;
using namespace pt_test;

namespace {

std::size_t nearest_bruteforce(const Tensor& protos, const Tensor& q, std::size_t row) {
  const std::size_t N = protos.dim(0), D = protos.dim(1);
  std::size_t best = 0;
  double best_d = 1e300;
  for (std::size_t n = 0; n < N; ++n) {
    double d = 0;
    for (std::size_t k = 0; k < D; ++k) {
      const double diff = static_cast<double>(q[row * D + k]) - protos[n * D + k];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = n;
    }
  }
  return best;
}

double accuracy(const Prediction& p, const std::vector<std::size_t>& labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += p.labels[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Well separated clusters around one-hot centers scaled by 3.
Tensor clustered(const std::vector<std::size_t>& labels, std::size_t D, Rng& rng) {
  Tensor x(Shape{labels.size(), D});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t k = 0; k < D; ++k) {
      x[i * D + k] = static_cast<float>((k == labels[i] ? 3.0 : 0.0) + uniform(rng, -0.3, 0.3));
    }
  }
  return x;
}

std::vector<std::size_t> repeat_labels(std::size_t ways, std::size_t shots) {
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < ways; ++n)
    for (std::size_t k = 0; k < shots; ++k) out.push_back(n);
  return out;
}

}  // namespace

// ---- prototypes and the equivalent head ------------------------------------------------

TEST(Prototypes, AreClassMeans) {
  const Tensor emb = Tensor::from({3, 2}, {1, 1, 3, 3, 7, -1});
  const PrototypeSet p = compute_prototypes(emb, {0, 0, 1});
  EXPECT_EQ(p.centroids[0], 2.0f);
  EXPECT_EQ(p.centroids[1], 2.0f);
  EXPECT_EQ(p.centroids[2], 7.0f);
  EXPECT_EQ(p.centroids[3], -1.0f);
  EXPECT_THROW(compute_prototypes(emb, {0, 2, 2}, 3), ContractError);
  EXPECT_THROW(compute_prototypes(emb, {0, 1}), ShapeError);
}

TEST(Prototypes, MatchBruteForceMeans) {
  Rng rng(1);
  const auto labels = repeat_labels(5, 4);
  const Tensor emb = random_float({20, 6}, rng);
  const PrototypeSet p = compute_prototypes(emb, labels);
  for (std::size_t n = 0; n < 5; ++n) {
    for (std::size_t d = 0; d < 6; ++d) {
      double s = 0;
      for (std::size_t i = 0; i < 20; ++i) s += labels[i] == n ? emb[i * 6 + d] : 0.0;
      EXPECT_NEAR(p.centroids[n * 6 + d], s / 4, 1e-6);
    }
  }
}

TEST(ProtoHead, InitializationFromPrototypes) {
  PrototypeSet p;
  p.centroids = Tensor::from({1, 2}, {2, 2});
  const LinearHead h = init_head(p);
  EXPECT_EQ(h.weight.value[0], 4.0f);
  EXPECT_EQ(h.weight.value[1], 4.0f);
  EXPECT_EQ(h.bias.value[0], -8.0f);
}

TEST(ProtoHead, ZeroPrototypeGivesZeroHead) {
  PrototypeSet p;
  p.centroids = Tensor(Shape{2, 3});
  const LinearHead h = init_head(p);
  for (float v : h.weight.value.data()) EXPECT_EQ(v, 0.0f);
  for (float v : h.bias.value.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ProtoHead, AgreesWithNearestPrototype) {
  Rng rng(make_stream(2, Stream::Episode, {0x4ead}));
  std::size_t checked = 0;
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t N = 2 + rng() % 19, D = 1 + rng() % 64, M = 1 + rng() % 20;
    PrototypeSet p;
    p.centroids = random_float({N, D}, rng, -2, 2);
    const Tensor q = random_float({M, D}, rng, -2, 2);
    const Prediction a = classify_head(init_head(p), q), b = classify_embeddings(p, q);
    for (std::size_t i = 0; i < M; ++i) {
      ASSERT_EQ(a.labels[i], b.labels[i]) << "instance " << inst;
      ASSERT_EQ(b.labels[i], nearest_bruteforce(p.centroids, q, i));
      ++checked;
    }
  }
  EXPECT_GT(checked, 1000u);
}

TEST(ProtoHead, AgreesOnLargeQueryBatches) {
  Rng rng(3);
  PrototypeSet p;
  p.centroids = random_float({20, 64}, rng);
  const Tensor q = random_float({1000, 64}, rng);
  EXPECT_EQ(classify_head(init_head(p), q).labels, classify_embeddings(p, q).labels);
}

TEST(ProtoHead, TiesPickClassZeroWithUniformScores) {
  PrototypeSet p;
  p.centroids = Tensor::from({3, 1}, {1, 1, 1});
  const Tensor q = Tensor::from({1, 1}, {0.5f});
  for (const Prediction& pr : {classify_head(init_head(p), q), classify_embeddings(p, q)}) {
    EXPECT_EQ(pr.labels[0], 0u);
    for (std::size_t n = 0; n < 3; ++n) EXPECT_NEAR(pr.scores[n], 1.0 / 3.0, 1e-7);
  }
}

TEST(ProtoHead, StateRoundTrip) {
  Rng rng(4);
  PrototypeSet p;
  p.centroids = random_float({3, 4}, rng);
  const LinearHead h = init_head(p);
  const LinearHead back = head_from_state(head_state(h));
  EXPECT_TRUE(back.weight.value == h.weight.value);
  EXPECT_TRUE(back.bias.value == h.bias.value);
  TensorList bad = head_state(h);
  bad[1].tensor = Tensor(Shape{4});
  EXPECT_THROW(head_from_state(bad), LoadError);
}

// ---- fine-tuning ----------------------------------------------------------------------------

TEST(ProtoTune, ZeroEpochsMatchesProtoNetPredictions) {
  const Dataset ds = make_synthetic_dataset(5, 6, 16, 0.2, 5);
  const Conv4<float> net({1, 16}, 5);
  Rng rng(5);
  const Episode ep = sample_episode(ds, 5, 1, 5, rng);
  const Tensor support = gather_images(ds, ep.support_ids), query = gather_images(ds, ep.query_ids);
  FineTuneConfig cfg;
  cfg.epochs = 0;
  const AdaptedModel m = proto_tune(net, support, ep.support_labels, 5, cfg, rng);
  EXPECT_TRUE(m.epoch_loss.empty());
  const PrototypeSet protos = compute_prototypes(net.embed(support), ep.support_labels, 5);
  EXPECT_EQ(predict(m, net, query).labels, classify_prototypes(net, protos, query).labels);
}

TEST(ProtoTune, OneShotRunsOneStepPerEpoch) {
  Rng rng(6);
  EXPECT_EQ(epoch_batches(5, 5, rng, false).size(), 1u);
  EXPECT_EQ(epoch_batches(25, 5, rng, false).size(), 5u);
  const auto merged = epoch_batches(11, 5, rng, true);
  ASSERT_EQ(merged.size(), 2u);
  EXPECT_EQ(merged.back().size(), 6u);
  const auto labels = repeat_labels(5, 1);
  const Tensor emb = clustered(labels, 8, rng);
  FineTuneConfig cfg;
  const AdaptedModel m = linear_probe(emb, labels, 5, cfg, rng);
  EXPECT_EQ(m.epoch_loss.size(), 15u);
}

TEST(ProtoTune, HeadOnlyLeavesBackboneUntouched) {
  const Dataset ds = make_synthetic_dataset(5, 4, 16, 0.2, 7);
  const Conv4<float> net({1, 16}, 7);
  const TensorList before = net.state();
  Rng rng(7);
  const Episode ep = sample_episode(ds, 5, 2, 1, rng);
  const Tensor support = gather_images(ds, ep.support_ids);
  const AdaptedModel m = proto_tune(net, support, ep.support_labels, 5, FineTuneConfig{}, rng);
  EXPECT_FALSE(m.net.has_value());
  FineTuneConfig full;
  full.scope = FineTuneScope::FullModel;
  full.epochs = 2;
  const AdaptedModel f = proto_tune(net, support, ep.support_labels, 5, full, rng);
  ASSERT_TRUE(f.net.has_value());
  EXPECT_FALSE(f.net->state()[1].tensor == before[1].tensor);
  const TensorList after = net.state();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(after[i].tensor == before[i].tensor);
}

TEST(ProtoTune, SeparableSupportIsFitExactly) {
  Rng rng(8);
  const auto labels = repeat_labels(5, 5);
  const Tensor emb = clustered(labels, 16, rng);
  FineTuneConfig cfg;
  cfg.epochs = 200;
  const AdaptedModel probe = linear_probe(emb, labels, 5, cfg, rng);
  EXPECT_EQ(accuracy(classify_head(probe.head, emb), labels), 1.0);
  LinearHead head = init_head(compute_prototypes(emb, labels, 5));
  finetune_head(head, emb, labels, cfg, rng);
  EXPECT_EQ(accuracy(classify_head(head, emb), labels), 1.0);
}

TEST(ProtoTune, RandomHeadStartsNearUniformLoss) {
  Rng rng(9);
  const auto labels = repeat_labels(5, 5);
  const Tensor emb = random_float({25, 64}, rng, 0, 1);
  FineTuneConfig cfg;
  cfg.epochs = 1;
  cfg.learning_rate = 1e-6;
  const AdaptedModel m = linear_probe(emb, labels, 5, cfg, rng);
  EXPECT_NEAR(m.epoch_loss[0], std::log(5.0), 0.5);
}

TEST(ProtoTune, LossFallsOverEpochs) {
  Rng rng(10);
  const auto labels = repeat_labels(5, 5);
  const Tensor emb = random_float({25, 32}, rng, 0, 1);
  LinearHead head = init_head(compute_prototypes(emb, labels, 5));
  FineTuneConfig cfg;
  cfg.epochs = 30;
  const auto losses = finetune_head(head, emb, labels, cfg, rng);
  EXPECT_LT(losses.back(), losses.front());
}

TEST(FineTuneScopeNames, RoundTrip) {
  for (auto s : {FineTuneScope::HeadOnly, FineTuneScope::FullModel}) EXPECT_EQ(parse_scope(scope_name(s)), s);
  EXPECT_THROW(parse_scope("all"), ConfigError);
}

// ---- supervised baselines ----------------------------------------------------------------------

TEST(ProtoNetBaseline, ZeroIterationsIsANoOp) {
  Dataset unlabeled;
  unlabeled.images.emplace_back(1, 16, 16);
  Conv4<float> net({1, 16}, 11);
  const TensorList before = net.state();
  ProtoNetConfig cfg;
  EXPECT_TRUE(train_protonet_supervised(unlabeled, net, cfg).empty());
  EXPECT_TRUE(net.state()[0].tensor == before[0].tensor);
  cfg.iterations = 1;
  EXPECT_THROW(train_protonet_supervised(unlabeled, net, cfg), ContractError);
}

TEST(ProtoNetBaseline, LearnsSeparableClasses) {
  SyntheticSpec spec;
  spec.n_classes = 10;
  spec.n_per_class = 20;
  spec.image_size = 16;
  spec.noise_std = 0.2;
  spec.max_shift = 1;
  spec.seed = 12;
  const Dataset ds = make_synthetic_dataset(spec);
  Conv4<float> net({1, 16}, 12);
  ProtoNetConfig cfg;
  cfg.ways = 5;
  cfg.shots = 5;
  cfg.queries = 5;
  cfg.iterations = 100;
  cfg.seed = 12;
  const auto losses = train_protonet_supervised(ds, net, cfg);
  ASSERT_EQ(losses.size(), 100u);
  EXPECT_LT(losses.back(), losses.front());
  Rng rng(13);
  double acc = 0;
  for (int e = 0; e < 50; ++e) {
    const Episode ep = sample_episode(ds, 5, 5, 10, rng);
    const PrototypeSet p = compute_prototypes(net.embed(gather_images(ds, ep.support_ids)), ep.support_labels, 5);
    acc += accuracy(classify_prototypes(net, p, gather_images(ds, ep.query_ids)), ep.query_labels);
  }
  EXPECT_GE(acc / 50, 0.95);
}

TEST(PreLinearBaseline, RejectsSingleClassData) {
  const Dataset ds = make_synthetic_dataset(2, 3, 16, 0.1, 14);
  Dataset one = restrict_dataset(ds, 1, std::nullopt, 0);
  Conv4<float> net({1, 16}, 14);
  EXPECT_THROW(train_pre_linear(one, net, PreLinearConfig{}), ContractError);
}

TEST(PreLinearBaseline, ClassifierFitsEightBaseClasses) {
  const Dataset ds = make_synthetic_dataset(8, 20, 16, 0.1, 15);
  Conv4<float> net({1, 16}, 15);
  PreLinearConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 32;
  cfg.seed = 15;
  const PreLinearResult r = train_pre_linear(ds, net, cfg);
  EXPECT_EQ(r.losses.size(), 15u * 5u);
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), 0);
  EXPECT_GE(accuracy(classify_head(r.classifier, net.embed(gather_images(ds, all))), ds.labels), 0.9);
  PreLinearConfig capped = cfg;
  capped.max_steps = 3;
  Conv4<float> net2({1, 16}, 15);
  EXPECT_EQ(train_pre_linear(ds, net2, capped).losses.size(), 3u);
}
