// Acceptance suite: one [PASS]/[FAIL] line per criterion.
//
//   acceptance                 run every criterion
//   acceptance --criterion N   run criterion N only

#include <sys/wait.h>

#include <chrono>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <prototransfer.hpp>

using namespace prototransfer;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

AugmentationPipeline light_pipeline(std::size_t size) {
  AugmentationPipeline p{"light", 1, size, {}};
  p.transforms.push_back(presets::rrc({0.7, 1.0}, size));
  TransformSpec drop;
  drop.kind = TransformKind::PixelDropout;
  drop.p = 0.5;
  drop.drop_rate = 0.2;
  p.transforms.push_back(drop);
  return p;
}

// ---- 1: gradient correctness ---------------------------------------------------------

Outcome gradient_check() {
  constexpr double kTolerance = 1e-3;
  constexpr double kBudget = 120.0;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0, worst_abs = 0;
  bool ok = true;
  std::size_t tensors = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    NetGradcheckConfig c;
    c.seed = seed;
    c.tolerance = kTolerance;
    const auto r = gradcheck_protoclr(c);
    worst = std::max(worst, r.max_error);
    worst_abs = std::max(worst_abs, r.max_abs_error);
    ok = ok && r.passed;
    tensors = r.tensors.size();
  }
  const double secs = seconds_since(t0);
  return {ok && worst <= kTolerance && secs <= kBudget,
          fmt("max relative error %.3e (entries within the 1e-6 absolute floor count as 0; max absolute error "
              "%.3e) over %zu parameter tensors x 5 seeds (tol %.0e), %.1fs (budget %.0fs)",
              worst, worst_abs, tensors, kTolerance, secs, kBudget)};
}

// ---- 2: head-init equivalence -----------------------------------------------------------

Outcome head_equivalence() {
  constexpr std::size_t kInstances = 10000;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng = make_stream(2, Stream::Episode, {0xe9});
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::size_t agree = 0;
  for (std::size_t inst = 0; inst < kInstances; ++inst) {
    const std::size_t N = 2 + rng() % 19, D = 1 + rng() % 64;
    PrototypeSet p;
    p.centroids = Tensor(Shape{N, D});
    Tensor q(Shape{1, D});
    for (auto& v : p.centroids.data()) v = static_cast<float>(gauss(rng));
    for (auto& v : q.data()) v = static_cast<float>(gauss(rng));
    std::size_t nearest = 0;
    double best = 1e300;
    for (std::size_t n = 0; n < N; ++n) {
      double d = 0;
      for (std::size_t k = 0; k < D; ++k) {
        const double diff = static_cast<double>(q[k]) - p.centroids[n * D + k];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        nearest = n;
      }
    }
    agree += classify_head(init_head(p), q).labels[0] == nearest;
  }
  return {agree == kInstances,
          fmt("%zu/%zu instances agree, %.2fs", agree, kInstances, seconds_since(t0))};
}

// ---- 3: loss oracles ------------------------------------------------------------------------

Outcome loss_oracles() {
  Tape<float> tape;
  const double l50 =
      protoclr_loss(tape.constant(Tensor(Shape{50, 64}, 0.3f)), tape.constant(Tensor(Shape{150, 64}, 0.3f)))
          .loss.value()
          .item();
  const Tensor two = Tensor::from({2, 2}, {0, 0, 1, 1});
  const double l2 = protoclr_loss(tape.constant(two), tape.constant(two)).loss.value().item();
  const double e50 = std::abs(l50 - std::log(50.0)), e2 = std::abs(l2 - std::log1p(std::exp(-2.0)));
  return {e50 <= 1e-5 && e2 <= 1e-6,
          fmt("N=50 identical: %.7f (|err| %.1e, tol 1e-5); N=2: %.7f (|err| %.1e, tol 1e-6)", l50, e50, l2, e2)};
}

// ---- 4: label blindness -----------------------------------------------------------------------

Outcome label_blindness() {
  SyntheticSpec s;
  s.n_classes = 8;
  s.n_per_class = 30;
  s.image_size = 28;
  s.seed = 4;
  const Dataset labeled = make_synthetic_dataset(s);
  Dataset permuted = labeled;
  std::vector<std::size_t> perm{3, 7, 0, 5, 1, 6, 2, 4};
  for (auto& l : permuted.labels) l = perm[l];
  Dataset shuffled = labeled;
  Rng rng(4);
  std::shuffle(shuffled.labels.begin(), shuffled.labels.end(), rng);
  Dataset none;
  none.images = labeled.images;
  for (Dataset* d : {&permuted, &shuffled}) d->index_classes();

  ProtoClrConfig cfg;
  cfg.batch_size = 16;
  cfg.queries = 3;
  cfg.max_iterations = 20;
  cfg.seed = 4;
  std::vector<std::pair<TensorList, std::vector<TrainLogRow>>> runs;
  for (const Dataset* d : std::vector<const Dataset*>{&labeled, &permuted, &shuffled, &none}) {
    Conv4<float> net({1, 28}, 4);
    const auto r = train_protoclr(*d, net, cfg);
    runs.emplace_back(training_state(net, r.optimizer), r.log.rows);
  }
  bool same = true;
  for (std::size_t k = 1; k < runs.size(); ++k) {
    same = same && runs[k].second == runs[0].second && runs[k].first.size() == runs[0].first.size();
    for (std::size_t i = 0; same && i < runs[0].first.size(); ++i) {
      const Tensor &a = runs[0].first[i].tensor, &b = runs[k].first[i].tensor;
      same = a.shape() == b.shape() && std::memcmp(a.raw(), b.raw(), a.numel() * sizeof(float)) == 0;
    }
  }
  return {same, fmt("20 iterations under label permutation, shuffle and removal: weights, optimizer state "
                    "and log %s",
                    same ? "bitwise identical" : "DIFFER")};
}

// ---- 5: synthetic end-to-end ----------------------------------------------------------------

Outcome end_to_end() {
  constexpr double kBudget = 600.0;
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticSpec s;
  s.n_classes = 8;
  s.n_per_class = 30;
  s.image_size = 28;
  s.noise_std = 0.05;
  s.seed = 1;
  const Dataset ds = make_synthetic_dataset(s);
  Conv4<float> net({1, 28}, 1);
  ProtoClrConfig cfg;
  cfg.batch_size = 16;
  cfg.queries = 3;
  cfg.max_iterations = 1000;
  cfg.seed = 1;
  cfg.pipeline = omniglot_pipeline(28);
  train_protoclr(ds, net, cfg);
  EvalConfig ec;
  ec.n_episodes = 600;
  ec.seed = 5;
  ec.k_shots = 1;
  const EvalReport one = evaluate(make_adaptor("proto"), net, ds, ec);
  ec.k_shots = 5;
  const EvalReport five = evaluate(make_adaptor("proto"), net, ds, ec);
  const double secs = seconds_since(t0);
  return {one.mean >= 0.95 && five.mean >= 0.98 && secs <= kBudget,
          fmt("1000 iterations N=16 Q=3; 5-way 1-shot %.4f +- %.4f (>= 0.95), 5-shot %.4f +- %.4f (>= 0.98), "
              "%.0fs (budget %.0fs)",
              one.mean, one.ci95, five.mean, five.ci95, secs, kBudget)};
}

// ---- 6 and 7: directional reproductions -----------------------------------------------------

struct Splits {
  Dataset train, test;
};

Splits disjoint_template_splits() {
  SyntheticSpec a;
  a.n_classes = 64;
  a.n_per_class = 20;
  a.image_size = 16;
  a.noise_std = 0.2;
  a.max_shift = 1;
  a.family = 1;
  a.seed = 11;
  SyntheticSpec b = a;
  b.n_classes = 20;
  b.family = 2;
  b.seed = 12;
  return {make_synthetic_dataset(a), make_synthetic_dataset(b)};
}

EvalConfig five_way_five_shot() {
  EvalConfig ec;
  ec.n_episodes = 600;
  ec.seed = 5;
  return ec;
}

Conv4<float> pretrain_protoclr(const Dataset& ds, std::size_t n, std::size_t q, std::uint64_t seed) {
  Conv4<float> net({1, 16}, seed);
  ProtoClrConfig cfg;
  cfg.batch_size = n;
  cfg.queries = q;
  cfg.max_iterations = 300;
  cfg.seed = seed;
  cfg.pipeline = light_pipeline(16);
  train_protoclr(ds, net, cfg);
  return net;
}

Outcome batch_and_query_ablation() {
  const auto t0 = std::chrono::steady_clock::now();
  const Splits sp = disjoint_template_splits();
  const EvalConfig ec = five_way_five_shot();
  const std::uint64_t seeds[] = {1, 2, 3};
  double n50q3 = 0, n50q1 = 0, n5q1 = 0;
  std::string per_seed;
  for (std::uint64_t seed : seeds) {
    const double a = evaluate(make_adaptor("proto"), pretrain_protoclr(sp.train, 50, 3, seed), sp.test, ec).mean;
    const double b = evaluate(make_adaptor("proto"), pretrain_protoclr(sp.train, 50, 1, seed), sp.test, ec).mean;
    const double c = evaluate(make_adaptor("proto"), pretrain_protoclr(sp.train, 5, 1, seed), sp.test, ec).mean;
    n50q3 += a / 3;
    n50q1 += b / 3;
    n5q1 += c / 3;
    per_seed += fmt(" [seed %llu: %.4f/%.4f/%.4f]", static_cast<unsigned long long>(seed), a, b, c);
  }
  return {n50q1 > n5q1 && n50q3 >= n50q1,
          fmt("mean 5-way 5-shot over 3 seeds: N=50 Q=3 %.4f, N=50 Q=1 %.4f, N=5 Q=1 %.4f;%s; %.0fs", n50q3,
              n50q1, n5q1, per_seed.c_str(), seconds_since(t0))};
}

Outcome generalization_gap_comparison() {
  const auto t0 = std::chrono::steady_clock::now();
  const Splits sp = disjoint_template_splits();
  const EvalConfig ec = five_way_five_shot();
  bool ok = true;
  std::string per_seed;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Conv4<float> clr = pretrain_protoclr(sp.train, 50, 3, seed);
    Conv4<float> sup({1, 16}, seed);
    ProtoNetConfig pn;
    pn.ways = 5;
    pn.shots = 5;
    pn.queries = 5;
    pn.iterations = 300;
    pn.seed = seed;
    train_protonet_supervised(sp.train, sup, pn);
    const GapReport gc = generalization_gap(clr, sp.train, sp.test, ec);
    const GapReport gs = generalization_gap(sup, sp.train, sp.test, ec);
    ok = ok && gc.gap <= gs.gap;
    per_seed += fmt(" [seed %llu: ProtoCLR %.4f-%.4f=%.4f, ProtoNet %.4f-%.4f=%.4f]",
                    static_cast<unsigned long long>(seed), gc.train.mean, gc.test.mean, gc.gap, gs.train.mean,
                    gs.test.mean, gs.gap);
  }
  return {ok, fmt("train-split minus test-split accuracy, ProtoCLR <= supervised ProtoNet on every seed:%s; %.0fs",
                  per_seed.c_str(), seconds_since(t0))};
}

// ---- 8: confidence interval ------------------------------------------------------------------

Outcome ci_formula() {
  std::vector<double> a(600);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<double>(i % 2);
  const double ci = confidence_interval(a).second;
  return {std::abs(ci - 0.04004) <= 1e-4, fmt("alternating {0,1} x 600: half-width %.6f (0.04004 +- 1e-4)", ci)};
}

// ---- 9: CLI determinism ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(PROTOTRANSFER_CLI) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome cli_determinism() {
  const fs::path dir = fs::temp_directory_path() / ("pt_accept9_" + std::to_string(std::random_device{}()));
  fs::create_directories(dir);
  const fs::path cfg = dir / "run.json";
  {
    std::ofstream os(cfg);
    os << R"({"data": {"synthetic_classes": 16, "synthetic_per_class": 10},
              "protoclr": {"batch_size": 16, "queries": 3, "max_iterations": 25}})";
  }
  bool ok = true;
  std::vector<std::string> ckpts, logs;
  std::string detail;
  for (int threads : {1, 4}) {
    for (int rep = 0; rep < 2; ++rep) {
      const fs::path out = dir / fmt("t%d_r%d.ptt1", threads, rep);
      const int code = run_cli("pretrain --config " + cfg.string() + " --seed 7 --threads " +
                               std::to_string(threads) + " --out " + out.string());
      ok = ok && code == 0;
      ckpts.push_back(slurp(out));
      logs.push_back(slurp(fs::path(out).replace_extension(".csv")));
    }
  }
  const bool within = ckpts[0] == ckpts[1] && logs[0] == logs[1] && ckpts[2] == ckpts[3] && logs[2] == logs[3];
  const bool across = ckpts[0] == ckpts[2] && logs[0] == logs[2];
  ok = ok && within && across && !ckpts[0].empty() && logs[0].size() > 30;
  detail = fmt("pretrain --seed 7 twice at --threads 1 and 4: checkpoints %zu bytes, repeat runs %s, "
               "across thread counts %s",
               ckpts[0].size(), within ? "byte-identical" : "DIFFER", across ? "byte-identical" : "DIFFER");
  fs::remove_all(dir);
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::function<Outcome()>> criteria{
      gradient_check, head_equivalence,  loss_oracles, label_blindness, end_to_end,
      batch_and_query_ablation, generalization_gap_comparison, ci_formula, cli_determinism};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<std::size_t>(only) != i + 1) continue;
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("[%s] criterion %zu: %s\n", o.pass ? "PASS" : "FAIL", i + 1, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
