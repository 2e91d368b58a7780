// prototransfer command-line interface.
//
// Exit codes: 0 ok, 1 internal error, 2 configuration error, 3 data error,
// 4 numeric failure (non-finite loss, failed gradient check).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "prototransfer.hpp"

namespace fs = std::filesystem;
using namespace prototransfer;

namespace {

struct Failure {
  int code;
  std::string kind;
  std::string message;
};

[[noreturn]] void fail(int code, const std::string& kind, const std::string& message) {
  throw Failure{code, kind, message};
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c == '\n' ? ' ' : c);
  }
  return out + "\"";
}

template <class V>
void override_if(std::optional<V>& flag, V& target) {
  if (flag) target = *flag;
}

// ---- shared options -------------------------------------------------------------

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 0;

  void add(CLI::App* app, const std::string& seed_help) {
    app->add_option("--config", config, "run configuration (JSON); defaults when omitted");
    app->add_option("--seed", seed, seed_help);
    app->add_option("--threads", threads, "worker threads (default: PROTO_THREADS or 1)");
  }

  RunConfig load() const {
    if (config.empty()) return RunConfig{};
    if (!fs::exists(config)) throw ConfigError("config file '" + config + "' not found");
    return load_config(config);
  }
};

Conv4<float> load_backbone(const std::string& path, const RunConfig& cfg) {
  const TensorList state = load_ptt1(path);
  Conv4<float> net = Conv4<float>::from_state(state);
  if (net.geometry() != make_geometry(cfg)) {
    throw ConfigError("checkpoint geometry " + std::to_string(net.geometry().channels) + "x" +
                      std::to_string(net.geometry().size) + " does not match backbone config " +
                      std::to_string(cfg.backbone.channels) + "x" +
                      std::to_string(cfg.backbone.image_size));
  }
  return net;
}

Dataset eval_split(const RunConfig& cfg) { return load_split(cfg, cfg.eval.split == "test"); }

void write_text(const std::string& path, const std::function<void(std::ostream&)>& fn) {
  if (path.empty()) return;
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw LoadError("cannot open '" + path + "' for writing");
  fn(os);
}

ReportHeader config_header(const RunConfig& cfg, const std::string& command) {
  return {{"command", command}, {"config", config_to_json(cfg).dump()}};
}

// ---- pretrain --------------------------------------------------------------------

struct PretrainArgs {
  Common common;
  std::string out;
  std::string log;
  std::string checkpoint_dir;
  std::string method = "protoclr";
  std::optional<std::uint64_t> max_iters;
  std::size_t train_ways = 20;
  std::size_t train_shots = 5;
  std::size_t train_queries = 15;
  std::size_t base_epochs = 100;
};

int cmd_pretrain(const PretrainArgs& a) {
  RunConfig cfg = a.common.load();
  auto seed = a.common.seed;
  override_if(seed, cfg.protoclr.seed);
  auto iters = a.max_iters;
  override_if(iters, cfg.protoclr.max_iterations);
  validate_config(cfg);
  const std::size_t threads = resolve_threads(a.common.threads);
  const Dataset ds = load_split(cfg, false);
  Conv4<float> net(make_geometry(cfg), cfg.protoclr.seed);
  const std::string log_path = a.log.empty() ? fs::path(a.out).replace_extension(".csv").string() : a.log;

  if (a.method == "protoclr") {
    ProtoClrConfig pc = make_protoclr_config(cfg);
    pc.threads = threads;
    pc.checkpoint_dir = a.checkpoint_dir;
    const auto res = train_protoclr(ds, net, pc);
    save_ptt1(a.out, training_state(net, res.optimizer));
    write_text(log_path, [&](std::ostream& os) { res.log.write_csv(os); });
    const double last = res.log.rows.empty() ? 0.0 : res.log.rows.back().accuracy;
    // Mean batch accuracy over the last smoothing window.
    double final_acc = 0;
    const std::size_t w = std::min(pc.accuracy_window, res.log.rows.size());
    for (std::size_t i = res.log.rows.size() - w; i < res.log.rows.size(); ++i) {
      final_acc += res.log.rows[i].accuracy / static_cast<double>(w);
    }
    std::printf("iterations=%zu final_acc=%.4f last_batch_acc=%.4f best_smoothed_acc=%.4f best_iteration=%llu "
                "stopped_early=%d checkpoint=%s log=%s\n",
                res.log.rows.size(), final_acc, last, std::max(0.0, res.log.best_accuracy),
                static_cast<unsigned long long>(res.log.best_iteration), res.log.stopped_early ? 1 : 0,
                a.out.c_str(), log_path.c_str());
    return 0;
  }
  std::vector<double> losses;
  if (a.method == "protonet") {
    ProtoNetConfig pn;
    pn.ways = a.train_ways;
    pn.shots = a.train_shots;
    pn.queries = a.train_queries;
    pn.iterations = cfg.protoclr.max_iterations;
    pn.adam = make_protoclr_config(cfg).adam;
    pn.seed = cfg.protoclr.seed;
    losses = train_protonet_supervised(ds, net, pn);
  } else if (a.method == "pre-linear") {
    PreLinearConfig pl;
    pl.epochs = a.base_epochs;
    pl.max_steps = cfg.protoclr.max_iterations;
    pl.adam = make_protoclr_config(cfg).adam;
    pl.seed = cfg.protoclr.seed;
    losses = train_pre_linear(ds, net, pl).losses;
  } else {
    throw ConfigError("unknown method '" + a.method + "' (valid: protoclr, protonet, pre-linear)");
  }
  save_ptt1(a.out, net.state());
  write_text(log_path, [&](std::ostream& os) {
    os << "iter,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, losses[i]);
      os << buf;
    }
  });
  std::printf("iterations=%zu final_loss=%.6f checkpoint=%s log=%s\n", losses.size(),
              losses.empty() ? 0.0 : losses.back(), a.out.c_str(), log_path.c_str());
  return 0;
}

// ---- finetune / eval ------------------------------------------------------------------

struct TaskFlags {
  std::optional<std::size_t> ways, shots, queries, episodes, epochs;
  std::optional<std::string> scope, adaptor;

  void add(CLI::App* app, bool episodes_flag) {
    app->add_option("--ways", ways, "classes per episode");
    app->add_option("--shots", shots, "support samples per class");
    app->add_option("--queries", queries, "query samples per class");
    if (episodes_flag) app->add_option("--episodes", episodes, "number of episodes");
    app->add_option("--epochs", epochs, "fine-tuning epochs");
    app->add_option("--scope", scope, "fine-tuning scope: head-only | full-model");
  }

  void apply(RunConfig& cfg) {
    override_if(ways, cfg.eval.ways);
    override_if(shots, cfg.eval.shots);
    override_if(queries, cfg.eval.queries);
    override_if(episodes, cfg.eval.episodes);
    override_if(epochs, cfg.finetune.epochs);
    override_if(adaptor, cfg.eval.adaptor);
    if (scope) cfg.finetune.scope = parse_scope(*scope);
  }
};

struct FinetuneArgs {
  Common common;
  TaskFlags task;
  std::string checkpoint;
  std::string out;
  std::size_t episode = 0;
};

int cmd_finetune(FinetuneArgs& a) {
  RunConfig cfg = a.common.load();
  a.task.apply(cfg);
  override_if(a.common.seed, cfg.eval.seed);
  validate_config(cfg);
  const Conv4<float> net = load_backbone(a.checkpoint, cfg);
  const Dataset ds = eval_split(cfg);
  const std::uint64_t seed = episode_seed(cfg.eval.seed, a.episode);
  Rng sampler(seed);
  const Episode ep = sample_episode(ds, cfg.eval.ways, cfg.eval.shots, cfg.eval.queries, sampler);
  Rng adapt = make_stream(seed, Stream::FineTune);
  const auto model = proto_tune(net, gather_images(ds, ep.support_ids), ep.support_labels, ep.n_ways,
                                cfg.finetune, adapt);
  const auto pred = predict(model, net, gather_images(ds, ep.query_ids));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) hits += pred.labels[i] == ep.query_labels[i];
  TensorList out = model.net ? model.net->state() : net.state();
  const TensorList head = head_state(model.head);
  out.insert(out.end(), head.begin(), head.end());
  save_ptt1(a.out, out);
  for (std::size_t e = 0; e < model.epoch_loss.size(); ++e) {
    std::printf("epoch=%zu support_loss=%.6f\n", e + 1, model.epoch_loss[e]);
  }
  std::printf("episode=%zu seed=%llu scope=%s query_acc=%.4f out=%s\n", a.episode,
              static_cast<unsigned long long>(seed), scope_name(cfg.finetune.scope).c_str(),
              pred.labels.empty() ? 0.0 : static_cast<double>(hits) / pred.labels.size(), a.out.c_str());
  return 0;
}

struct EvalArgs {
  Common common;
  TaskFlags task;
  std::string checkpoint;
  std::string csv;
  std::string episodes_csv;
  std::string markdown;
};

int cmd_eval(EvalArgs& a) {
  RunConfig cfg = a.common.load();
  a.task.apply(cfg);
  override_if(a.common.seed, cfg.eval.seed);
  validate_config(cfg);
  const AdaptorSpec adaptor = make_adaptor(cfg.eval.adaptor, cfg.finetune);
  const Conv4<float> net = load_backbone(a.checkpoint, cfg);
  const Dataset ds = eval_split(cfg);
  EvalConfig ec = make_eval_config(cfg);
  ec.threads = resolve_threads(a.common.threads);
  const EvalReport r = evaluate(adaptor, net, ds, ec);
  const std::vector<EvalReport> reports{r};
  ReportHeader header = config_header(cfg, "eval");
  header.push_back({"checkpoint", a.checkpoint});
  write_reports_markdown(std::cout, reports, header);
  write_text(a.csv, [&](std::ostream& os) { write_reports_csv(os, reports, header); });
  write_text(a.episodes_csv, [&](std::ostream& os) { write_episodes_csv(os, reports); });
  write_text(a.markdown, [&](std::ostream& os) { write_reports_markdown(os, reports, header); });
  return 0;
}

// ---- ablate ------------------------------------------------------------------------

struct AblateArgs {
  Common common;
  TaskFlags task;
  std::vector<std::size_t> batches{5, 50};
  std::vector<std::size_t> queries{1, 3};
  std::vector<int> finetune{0};
  std::vector<std::uint64_t> seeds{0};
  bool no_umtra = false;
  std::optional<std::uint64_t> max_iters;
  std::string csv;
  std::string markdown;
};

int cmd_ablate(AblateArgs& a) {
  RunConfig cfg = a.common.load();
  a.task.apply(cfg);
  override_if(a.max_iters, cfg.protoclr.max_iterations);
  if (a.common.seed) a.seeds = {*a.common.seed};
  validate_config(cfg);
  AblationConfig ac;
  for (std::size_t n : a.batches) {
    for (std::size_t q : a.queries) {
      for (int f : a.finetune) ac.grid.push_back({n, q, f != 0});
    }
  }
  ac.include_umtra = !a.no_umtra;
  ac.seeds = a.seeds;
  ac.pretrain = make_protoclr_config(cfg);
  ac.pretrain.threads = resolve_threads(a.common.threads);
  ac.finetune = cfg.finetune;
  ac.eval = make_eval_config(cfg);
  ac.eval.threads = ac.pretrain.threads;
  const Dataset train = load_split(cfg, false);
  const Dataset test = eval_split(cfg);
  const auto rows = ablation_sweep(train, test, ac, [](const AblationRow& r) {
    std::fprintf(stderr, "seed=%llu batch=%zu queries=%zu finetune=%d mean=%.4f\n",
                 static_cast<unsigned long long>(r.seed), r.point.batch_size, r.point.queries,
                 r.point.finetune ? 1 : 0, r.report.mean);
  });
  const ReportHeader header = config_header(cfg, "ablate");
  write_ablation_markdown(std::cout, rows, header);
  write_text(a.csv, [&](std::ostream& os) { write_ablation_csv(os, rows, header); });
  write_text(a.markdown, [&](std::ostream& os) { write_ablation_markdown(os, rows, header); });
  return 0;
}

// ---- gradcheck ---------------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 0;
  std::size_t seeds = 5;
  std::size_t size = 16;
  std::size_t channels = 1;
  std::size_t entries = 64;
  double step = 1e-6;
  double tolerance = 1e-3;
  bool inject_fault = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  double worst = 0, worst_abs = 0;
  bool ok = true;
  for (std::size_t s = 0; s < a.seeds; ++s) {
    NetGradcheckConfig c;
    c.seed = a.seed + s;
    c.image_size = a.size;
    c.channels = a.channels;
    c.sampled_entries = a.entries;
    c.step = a.step;
    c.tolerance = a.tolerance;
    GradientHook hook;
    if (a.inject_fault) {
      // Test hook: perturb one analytic gradient entry.
      hook = [](std::vector<Parameter<double>*>& params) {
        auto& g = params.front()->grad;
        g[0] = g[0] * 1.5 + 1e-3;
      };
    }
    const auto r = gradcheck_protoclr(c, hook);
    for (const auto& t : r.tensors) {
      std::printf(
          "seed=%llu tensor=%s checked=%zu/%zu max_rel_error=%.3e max_abs_error=%.3e "
          "max_abs_grad=%.3e directional_rel_error=%.3e\n",
          static_cast<unsigned long long>(c.seed), t.name.c_str(), t.checked, t.numel, t.max_error,
          t.max_abs_error, t.max_abs_grad, t.directional_error);
    }
    worst = std::max(worst, r.max_error);
    worst_abs = std::max(worst_abs, r.max_abs_error);
    ok = ok && r.passed;
  }
  std::printf("max_relative_error=%.3e max_abs_error=%.3e abs_floor=%.1e tolerance=%.1e result=%s\n", worst,
              worst_abs, NetGradcheckConfig{}.floor, a.tolerance, ok ? "pass" : "fail");
  if (!ok) fail(4, "numeric", "gradient check failed: max relative error " + std::to_string(worst));
  return 0;
}

// ---- convert ------------------------------------------------------------------------

struct ConvertArgs {
  std::string input;
  std::string output;
  std::string format = "pgm";
  std::size_t size = 28;
  std::size_t channels = 1;
};

int cmd_convert(const ConvertArgs& a) {
  if (a.format != "pgm" && a.format != "ptt1") {
    throw ConfigError("unknown format '" + a.format + "' (valid: pgm, ptt1)");
  }
  const Dataset ds = load_directory_dataset(a.input, a.size, a.channels);
  std::vector<std::size_t> seen(ds.num_classes(), 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t c = ds.labels[i];
    char name[32];
    std::snprintf(name, sizeof name, "%05zu", seen[c]++);
    const fs::path dir = fs::path(a.output) / ds.class_names[c];
    if (a.format == "ptt1") {
      save_ptt1_image(dir / (std::string(name) + ".ptt1"), ds.images[i]);
    } else {
      save_pnm(dir / (std::string(name) + (ds.images[i].channels == 1 ? ".pgm" : ".ppm")), ds.images[i]);
    }
  }
  std::printf("classes=%zu images=%zu format=%s out=%s\n", ds.num_classes(), ds.size(), a.format.c_str(),
              a.output.c_str());
  return 0;
}

int run(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const Failure& f) {
    std::fprintf(stderr, "error code=%d kind=%s message=%s\n", f.code, f.kind.c_str(), quote(f.message).c_str());
    return f.code;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error code=2 kind=config message=%s\n", quote(e.what()).c_str());
    return 2;
  } catch (const GeometryError& e) {
    std::fprintf(stderr, "error code=2 kind=config message=%s\n", quote(e.what()).c_str());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error code=4 kind=numeric message=%s\n", quote(e.what()).c_str());
    return 4;
  } catch (const LoadError& e) {
    std::fprintf(stderr, "error code=3 kind=data message=%s\n", quote(e.what()).c_str());
    return 3;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error code=3 kind=data message=%s\n", quote(e.what()).c_str());
    return 3;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error code=3 kind=data message=%s\n", quote(e.what()).c_str());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error code=1 kind=internal message=%s\n", quote(e.what()).c_str());
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Self-supervised prototypical pre-training and few-shot evaluation"};
  app.require_subcommand(1);
  app.footer("Configuration fields (section.key, default):\n" + config_help());

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "pre-train a backbone");
  pre.common.add(p, "master seed (overrides protoclr.seed)");
  p->add_option("--out", pre.out, "checkpoint path (PTT1)")->required();
  p->add_option("--log", pre.log, "CSV training log (default: checkpoint path with .csv)");
  p->add_option("--checkpoint-dir", pre.checkpoint_dir, "directory for periodic and best checkpoints");
  p->add_option("--max-iters", pre.max_iters, "iteration cap (overrides protoclr.max_iterations)");
  p->add_option("--method", pre.method, "protoclr | protonet | pre-linear");
  p->add_option("--train-ways", pre.train_ways, "protonet: classes per training episode");
  p->add_option("--train-shots", pre.train_shots, "protonet: support samples per class");
  p->add_option("--train-queries", pre.train_queries, "protonet: query samples per class");
  p->add_option("--base-epochs", pre.base_epochs, "pre-linear: epochs over the base classes");

  FinetuneArgs ft;
  auto* f = app.add_subcommand("finetune", "adapt a checkpoint to one episode");
  ft.common.add(f, "episode seed (overrides eval.seed)");
  ft.task.add(f, false);
  f->add_option("--checkpoint", ft.checkpoint, "backbone checkpoint")->required();
  f->add_option("--out", ft.out, "adapted model path (PTT1)")->required();
  f->add_option("--episode", ft.episode, "episode index");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "episodic evaluation");
  ev.common.add(e, "episode seed (overrides eval.seed)");
  ev.task.add(e, true);
  e->add_option("--adaptor", ev.task.adaptor, "proto | prototune | linear | oracle | random");
  e->add_option("--checkpoint", ev.checkpoint, "backbone checkpoint")->required();
  e->add_option("--csv", ev.csv, "summary CSV");
  e->add_option("--episodes-csv", ev.episodes_csv, "per-episode CSV with replay seeds");
  e->add_option("--markdown", ev.markdown, "markdown report");

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "batch size / queries / fine-tuning sweep");
  ab.common.add(b, "single seed (replaces --seeds)");
  ab.task.add(b, true);
  b->add_option("--batches", ab.batches, "batch sizes")->delimiter(',');
  b->add_option("--queries-per-image", ab.queries, "augmented queries")->delimiter(',');
  b->add_option("--finetune", ab.finetune, "0 and/or 1")->delimiter(',');
  b->add_option("--seeds", ab.seeds, "seeds")->delimiter(',');
  b->add_flag("--no-umtra", ab.no_umtra, "omit the UMTRA-equivalent row");
  b->add_option("--max-iters", ab.max_iters, "iteration cap per configuration");
  b->add_option("--csv", ab.csv, "CSV report");
  b->add_option("--markdown", ab.markdown, "markdown report");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "finite-difference check of the pre-training gradient");
  g->add_option("--seed", gc.seed, "first seed");
  g->add_option("--seeds", gc.seeds, "number of seeds");
  g->add_option("--size", gc.size, "image side length");
  g->add_option("--channels", gc.channels, "image channels");
  g->add_option("--entries", gc.entries, "entries sampled from large tensors");
  g->add_option("--step", gc.step, "central-difference step h")->check(CLI::PositiveNumber);
  g->add_option("--tolerance", gc.tolerance, "maximum relative error");
  g->add_flag("--inject-fault", gc.inject_fault, "corrupt one analytic gradient (test hook)");

  ConvertArgs cv;
  auto* c = app.add_subcommand("convert", "convert an image directory to PGM/PPM or PTT1 files");
  c->add_option("--input", cv.input, "root with one sub-directory per class")->required();
  c->add_option("--output", cv.output, "output root")->required();
  c->add_option("--format", cv.format, "pgm | ptt1");
  c->add_option("--size", cv.size, "output side length");
  c->add_option("--channels", cv.channels, "channels (1 or 3)");

  std::string defaults_out;
  auto* d = app.add_subcommand("defaults", "print the default configuration");
  d->add_option("--out", defaults_out, "also write it to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::fprintf(stderr, "error code=2 kind=usage message=%s\n", quote(ex.what()).c_str());
    return 2;
  }

  if (p->parsed()) return run([&] { return cmd_pretrain(pre); });
  if (f->parsed()) return run([&] { return cmd_finetune(ft); });
  if (e->parsed()) return run([&] { return cmd_eval(ev); });
  if (b->parsed()) return run([&] { return cmd_ablate(ab); });
  if (g->parsed()) return run([&] { return cmd_gradcheck(gc); });
  if (c->parsed()) return run([&] { return cmd_convert(cv); });
  return run([&] {
    const std::string text = defaults_json();
    std::cout << text;
    write_text(defaults_out, [&](std::ostream& os) { os << text; });
    return 0;
  });
}
