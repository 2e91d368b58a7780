#pragma once

// Episodic evaluation, generalization gap and ablation sweeps.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "prototransfer/backbone.hpp"
#include "prototransfer/data.hpp"
#include "prototransfer/errors.hpp"
#include "prototransfer/fewshot.hpp"
#include "prototransfer/protoclr.hpp"
#include "prototransfer/rng.hpp"

#ifndef PROTOTRANSFER_BUILD_ID
#define PROTOTRANSFER_BUILD_ID "unknown"
#endif

namespace prototransfer {

inline constexpr const char* kBuildId = PROTOTRANSFER_BUILD_ID;

/// Mean and 95% half-width 1.96 * s / sqrt(n) with the n-1 sample standard
/// deviation. A single value has half-width 0.
inline std::pair<double, double> confidence_interval(const std::vector<double>& accs) {
  if (accs.empty()) throw ContractError("confidence_interval: no values");
  const double n = static_cast<double>(accs.size());
  double mean = 0;
  for (double a : accs) mean += a;
  mean /= n;
  if (accs.size() == 1) return {mean, 0.0};
  double ss = 0;
  for (double a : accs) ss += (a - mean) * (a - mean);
  return {mean, 1.96 * std::sqrt(ss / (n - 1)) / std::sqrt(n)};
}

struct EvalReport {
  std::string method;
  std::string dataset;
  std::string split;
  std::size_t n_ways = 0;
  std::size_t k_shots = 0;
  std::size_t q_queries = 0;
  std::size_t n_episodes = 0;
  std::vector<double> accuracies;           // by episode index
  std::vector<std::uint64_t> episode_seeds;  // by episode index
  double mean = 0;
  double ci95 = 0;
  double wall_seconds = 0;
};

/// Everything an adaptor may look at for one episode.
struct EpisodeContext {
  const Conv4<float>& net;
  const Dataset& ds;
  const Episode& episode;
  const Tensor* features;  // eval-mode embeddings of all of `ds`, or null
  Rng& rng;                // adaptation stream of this episode
  const std::pair<Tensor, Tensor>* joint = nullptr;  // transductive (support, query) embeddings

  Tensor support_images() const { return gather_images(ds, episode.support_ids); }
  Tensor query_images() const { return gather_images(ds, episode.query_ids); }
  Tensor support_embeddings() const {
    if (joint) return joint->first;
    return features ? detail::gather_rows(*features, episode.support_ids) : net.embed(support_images());
  }
  Tensor query_embeddings() const {
    if (joint) return joint->second;
    return features ? detail::gather_rows(*features, episode.query_ids) : net.embed(query_images());
  }
};

/// Predicts a label for every query of the episode.
using Adaptor = std::function<std::vector<std::size_t>(const EpisodeContext&)>;

struct AdaptorSpec {
  std::string name;
  Adaptor fn;
  bool uses_features = true;  // reads only the frozen backbone's embeddings
};

inline const std::vector<std::string>& adaptor_names() {
  static const std::vector<std::string> names{"proto", "prototune", "linear", "oracle", "random"};
  return names;
}

/// proto: nearest prototype. prototune: prototype-initialized head fine-tuned
/// on the support set. linear: randomly initialized head trained on frozen
/// support embeddings. oracle: true labels. random: uniform guesses.
inline AdaptorSpec make_adaptor(const std::string& name, const FineTuneConfig& ft = {}) {
  if (name == "proto") {
    return {name, [](const EpisodeContext& c) {
              const auto protos = compute_prototypes(c.support_embeddings(), c.episode.support_labels,
                                                     c.episode.n_ways);
              return classify_embeddings(protos, c.query_embeddings()).labels;
            }};
  }
  if (name == "prototune") {
    const bool full = ft.scope == FineTuneScope::FullModel;
    return {name,
            [ft, full](const EpisodeContext& c) {
              if (full) {
                const auto m = proto_tune(c.net, c.support_images(), c.episode.support_labels,
                                          c.episode.n_ways, ft, c.rng);
                return predict(m, c.net, c.query_images()).labels;
              }
              const Tensor s = c.support_embeddings();
              const auto m = proto_tune(c.net, Tensor(Shape{1}), c.episode.support_labels,
                                        c.episode.n_ways, ft, c.rng, &s);
              const Tensor q = c.query_embeddings();
              return predict(m, c.net, Tensor(Shape{1}), &q).labels;
            },
            !full};
  }
  if (name == "linear") {
    FineTuneConfig head_only = ft;
    head_only.scope = FineTuneScope::HeadOnly;
    return {name, [head_only](const EpisodeContext& c) {
              const auto m = linear_probe(c.support_embeddings(), c.episode.support_labels,
                                          c.episode.n_ways, head_only, c.rng);
              return classify_head(m.head, c.query_embeddings()).labels;
            }};
  }
  if (name == "oracle") {
    return {name, [](const EpisodeContext& c) { return c.episode.query_labels; }, false};
  }
  if (name == "random") {
    return {name,
            [](const EpisodeContext& c) {
              std::uniform_int_distribution<std::size_t> pick(0, c.episode.n_ways - 1);
              std::vector<std::size_t> out(c.episode.query_ids.size());
              for (auto& v : out) v = pick(c.rng);
              return out;
            },
            false};
  }
  std::string valid;
  for (const auto& n : adaptor_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown adaptor '" + name + "' (valid: " + valid + ")");
}

struct EvalConfig {
  std::size_t n_ways = 5;
  std::size_t k_shots = 5;
  std::size_t q_queries = 15;
  std::size_t n_episodes = 600;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool transductive_bn = false;  // batch statistics of support + query instead of running statistics

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

/// Eval-mode embeddings of every image of `ds` as [size, D]. Embeddings are
/// computed per image, so they equal those of any other batching.
inline Tensor embed_dataset(const Conv4<float>& net, const Dataset& ds, std::size_t threads = 1) {
  constexpr std::size_t kChunk = 128;
  const std::size_t D = net.embedding_dim();
  Tensor out(Shape{ds.size(), D});
  const std::size_t chunks = (ds.size() + kChunk - 1) / kChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    std::vector<std::size_t> ids;
    for (std::size_t i = c * kChunk; i < std::min(ds.size(), (c + 1) * kChunk); ++i) ids.push_back(i);
    const Tensor z = net.embed(gather_images(ds, ids));
    std::copy(z.raw(), z.raw() + z.numel(), out.raw() + c * kChunk * D);
  });
  return out;
}

/// Seed of episode `index`; the same for every method evaluated with `seed`.
inline std::uint64_t episode_seed(std::uint64_t seed, std::size_t index) {
  return derive_seed(seed, Stream::Episode, {index});
}

/// Runs one episode from its seed; returns the query accuracy.
inline double run_episode(const AdaptorSpec& adaptor, const Conv4<float>& net, const Dataset& ds,
                          const EvalConfig& cfg, std::uint64_t ep_seed, const Tensor* features) {
  Rng sampler(ep_seed);
  const Episode ep = sample_episode(ds, cfg.n_ways, cfg.k_shots, cfg.q_queries, sampler);
  Rng adapt = make_stream(ep_seed, Stream::FineTune);
  std::optional<std::pair<Tensor, Tensor>> joint;
  if (cfg.transductive_bn) {
    std::vector<std::size_t> ids = ep.support_ids;
    ids.insert(ids.end(), ep.query_ids.begin(), ep.query_ids.end());
    Tape<float> tape;
    const Tensor z = net.forward_frozen(tape.constant(gather_images(ds, ids)), Mode::Train).value();
    std::vector<std::size_t> s(ep.support_ids.size()), q(ep.query_ids.size());
    std::iota(s.begin(), s.end(), 0);
    std::iota(q.begin(), q.end(), s.size());
    joint.emplace(detail::gather_rows(z, s), detail::gather_rows(z, q));
  }
  const EpisodeContext ctx{net, ds, ep, cfg.transductive_bn ? nullptr : features, adapt,
                           joint ? &*joint : nullptr};
  const auto pred = adaptor.fn(ctx);
  if (pred.size() != ep.query_labels.size()) {
    throw ContractError("adaptor '" + adaptor.name + "' returned " + std::to_string(pred.size()) +
                        " predictions for " + std::to_string(ep.query_labels.size()) + " queries");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == ep.query_labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Evaluates `adaptor` on `cfg.n_episodes` episodes sampled from `ds`.
/// `features` may supply a precomputed embed_dataset() result.
inline EvalReport evaluate(const AdaptorSpec& adaptor, const Conv4<float>& net, const Dataset& ds,
                           const EvalConfig& cfg, const Tensor* features = nullptr) {
  if (cfg.n_episodes == 0) throw ContractError("evaluate: need at least one episode");
  const auto start = std::chrono::steady_clock::now();
  EvalReport r;
  r.method = adaptor.name;
  r.dataset = ds.provenance;
  r.split = split_name(ds.split);
  r.n_ways = cfg.n_ways;
  r.k_shots = cfg.k_shots;
  r.q_queries = cfg.q_queries;
  r.n_episodes = cfg.n_episodes;
  r.accuracies.assign(cfg.n_episodes, 0.0);
  r.episode_seeds.resize(cfg.n_episodes);
  for (std::size_t e = 0; e < cfg.n_episodes; ++e) r.episode_seeds[e] = episode_seed(cfg.seed, e);

  std::optional<Tensor> cache;
  if (adaptor.uses_features && features == nullptr && !cfg.transductive_bn) {
    cache = embed_dataset(net, ds, cfg.threads);
    features = &*cache;
  }
  parallel_for(cfg.n_episodes, cfg.threads, [&](std::size_t e) {
    try {
      r.accuracies[e] = run_episode(adaptor, net, ds, cfg, r.episode_seeds[e], features);
    } catch (const std::exception& ex) {
      throw ContractError("episode " + std::to_string(e) + " (seed " +
                          std::to_string(r.episode_seeds[e]) + ") failed: " + ex.what());
    }
  });
  std::tie(r.mean, r.ci95) = confidence_interval(r.accuracies);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

struct GapReport {
  EvalReport train;
  EvalReport test;
  double gap = 0;  // train mean - test mean
};

/// Nearest-prototype accuracy on episodes from each split.
inline GapReport generalization_gap(const Conv4<float>& net, const Dataset& train_split,
                                    const Dataset& test_split, const EvalConfig& cfg,
                                    const AdaptorSpec& adaptor = make_adaptor("proto")) {
  GapReport g;
  g.train = evaluate(adaptor, net, train_split, cfg);
  g.test = evaluate(adaptor, net, test_split, cfg);
  g.gap = g.train.mean - g.test.mean;
  return g;
}

// ---- ablation --------------------------------------------------------------

struct AblationPoint {
  std::size_t batch_size = 50;
  std::size_t queries = 3;
  bool finetune = false;

  friend bool operator==(const AblationPoint&, const AblationPoint&) = default;
};

struct AblationConfig {
  std::vector<AblationPoint> grid;
  bool include_umtra = true;  // adds (N = ways, Q = 1, no fine-tune) when missing
  std::vector<std::uint64_t> seeds{0};
  ProtoClrConfig pretrain;    // batch size and queries are overridden per point
  FineTuneConfig finetune;
  EvalConfig eval;
};

struct AblationRow {
  AblationPoint point;
  std::uint64_t seed = 0;
  bool umtra = false;
  double final_train_accuracy = 0;
  EvalReport report;
};

/// Grid points in evaluation order, with the UMTRA-equivalent row appended
/// when requested and absent.
inline std::vector<std::pair<AblationPoint, bool>> ablation_points(const AblationConfig& cfg) {
  std::vector<std::pair<AblationPoint, bool>> out;
  const AblationPoint umtra{cfg.eval.n_ways, 1, false};
  for (const auto& p : cfg.grid) out.emplace_back(p, p == umtra);
  if (cfg.include_umtra && std::find(cfg.grid.begin(), cfg.grid.end(), umtra) == cfg.grid.end()) {
    out.emplace_back(umtra, true);
  }
  return out;
}

/// Pre-trains a fresh network per (point, seed) and evaluates it. All rows of
/// one seed share network initialization, batch/augmentation streams and
/// episode seeds.
inline std::vector<AblationRow> ablation_sweep(const Dataset& unlabeled, const Dataset& eval_ds,
                                               const AblationConfig& cfg,
                                               const std::function<void(const AblationRow&)>& on_row = {}) {
  const auto points = ablation_points(cfg);
  if (points.empty()) throw ContractError("ablation_sweep: empty grid");
  if (cfg.seeds.empty()) throw ContractError("ablation_sweep: no seeds");
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : cfg.seeds) {
    for (const auto& [p, umtra] : points) {
      ProtoClrConfig pc = cfg.pretrain;
      pc.batch_size = p.batch_size;
      pc.queries = p.queries;
      pc.seed = seed;
      pc.checkpoint_dir.clear();
      Conv4<float> net(Geometry{pc.pipeline.channels, pc.pipeline.out_size}, seed);
      const auto res = train_protoclr(unlabeled, net, pc);
      EvalConfig ec = cfg.eval;
      ec.seed = derive_seed(seed, Stream::Episode, {0xab1a});
      FineTuneConfig ft = cfg.finetune;
      AdaptorSpec adaptor = p.finetune ? make_adaptor("prototune", ft) : make_adaptor("proto");
      AblationRow row{p, seed, umtra, 0.0, evaluate(adaptor, net, eval_ds, ec)};
      if (!res.log.rows.empty()) {
        const std::size_t w = std::min(pc.accuracy_window, res.log.rows.size());
        for (std::size_t i = res.log.rows.size() - w; i < res.log.rows.size(); ++i) {
          row.final_train_accuracy += res.log.rows[i].accuracy / static_cast<double>(w);
        }
      }
      if (on_row) on_row(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

// ---- report emission ---------------------------------------------------------

/// `# key: value` lines describing a run.
using ReportHeader = std::vector<std::pair<std::string, std::string>>;

inline void write_header(std::ostream& os, const ReportHeader& header, const char* prefix = "# ",
                         const char* suffix = "") {
  os << prefix << "build: " << kBuildId << suffix << "\n";
  os << prefix << "ci: 95% normal approximation, 1.96 * sample std (n-1) / sqrt(episodes)" << suffix
     << "\n";
  for (const auto& [k, v] : header) os << prefix << k << ": " << v << suffix << "\n";
}

namespace detail {
inline std::string fmt(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}
}  // namespace detail

inline void write_reports_csv(std::ostream& os, const std::vector<EvalReport>& reports,
                              const ReportHeader& header = {}) {
  write_header(os, header);
  os << "method,dataset,split,ways,shots,queries,episodes,mean,ci95,seconds\n";
  for (const auto& r : reports) {
    os << r.method << "," << r.dataset << "," << r.split << "," << r.n_ways << "," << r.k_shots << ","
       << r.q_queries << "," << r.n_episodes << "," << detail::fmt(r.mean, 9) << ","
       << detail::fmt(r.ci95, 9) << "," << detail::fmt(r.wall_seconds, 3) << "\n";
  }
}

/// One row per episode with its replay seed.
inline void write_episodes_csv(std::ostream& os, const std::vector<EvalReport>& reports) {
  os << "method,episode,seed,accuracy\n";
  for (const auto& r : reports) {
    for (std::size_t e = 0; e < r.accuracies.size(); ++e) {
      os << r.method << "," << e << "," << r.episode_seeds[e] << "," << detail::fmt(r.accuracies[e], 9)
         << "\n";
    }
  }
}

/// Pipe table with columns padded to equal width.
inline void write_markdown_table(std::ostream& os, const std::vector<std::string>& head,
                                 const std::vector<std::vector<std::string>>& body) {
  std::vector<std::size_t> w(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) w[c] = std::max<std::size_t>(3, head[c].size());
  for (const auto& row : body) {
    for (std::size_t c = 0; c < row.size() && c < w.size(); ++c) w[c] = std::max(w[c], row[c].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    os << "|";
    for (std::size_t c = 0; c < w.size(); ++c) {
      const std::string s = c < cells.size() ? cells[c] : "";
      os << " " << s << std::string(w[c] - s.size(), ' ') << " |";
    }
    os << "\n";
  };
  line(head);
  os << "|";
  for (std::size_t c = 0; c < w.size(); ++c) os << std::string(w[c] + 2, '-') << "|";
  os << "\n";
  for (const auto& row : body) line(row);
}

inline std::string percent_pm(double mean, double ci) {
  return detail::fmt(100 * mean, 2) + " +- " + detail::fmt(100 * ci, 2);
}

inline void write_reports_markdown(std::ostream& os, const std::vector<EvalReport>& reports,
                                   const ReportHeader& header = {}) {
  write_header(os, header, "<!-- ", " -->");
  os << "\n";
  std::vector<std::vector<std::string>> body;
  for (const auto& r : reports) {
    body.push_back({r.method, r.dataset, r.split, std::to_string(r.n_ways) + "-way " +
                    std::to_string(r.k_shots) + "-shot", std::to_string(r.n_episodes),
                    percent_pm(r.mean, r.ci95)});
  }
  write_markdown_table(os, {"method", "dataset", "split", "task", "episodes", "accuracy (%)"}, body);
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows,
                               const ReportHeader& header = {}) {
  write_header(os, header);
  os << "seed,batch,queries,finetune,umtra,train_acc,ways,shots,episodes,mean,ci95\n";
  for (const auto& r : rows) {
    os << r.seed << "," << r.point.batch_size << "," << r.point.queries << ","
       << (r.point.finetune ? 1 : 0) << "," << (r.umtra ? 1 : 0) << ","
       << detail::fmt(r.final_train_accuracy, 6) << "," << r.report.n_ways << "," << r.report.k_shots
       << "," << r.report.n_episodes << "," << detail::fmt(r.report.mean, 9) << ","
       << detail::fmt(r.report.ci95, 9) << "\n";
  }
}

inline void write_ablation_markdown(std::ostream& os, const std::vector<AblationRow>& rows,
                                    const ReportHeader& header = {}) {
  write_header(os, header, "<!-- ", " -->");
  os << "\n";
  std::vector<std::vector<std::string>> body;
  for (const auto& r : rows) {
    body.push_back({std::to_string(r.seed), std::to_string(r.point.batch_size),
                    std::to_string(r.point.queries), r.point.finetune ? "yes" : "no",
                    r.umtra ? "UMTRA-equivalent" : "",
                    percent_pm(r.report.mean, r.report.ci95)});
  }
  write_markdown_table(os, {"seed", "batch", "Q", "fine-tune", "note", "accuracy (%)"}, body);
}

}  // namespace prototransfer
