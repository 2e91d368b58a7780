#pragma once

#include <algorithm>
#include <array>
#include <climits>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "prototransfer/augment.hpp"
#include "prototransfer/checkpoint.hpp"
#include "prototransfer/errors.hpp"
#include "prototransfer/image.hpp"
#include "prototransfer/rng.hpp"
#include "prototransfer/tensor.hpp"

namespace prototransfer {

enum class Split { Train, Val, Test, All };

inline std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::All: return "all";
  }
  return "all";
}

/// Images with optional dense labels 0..C-1.
///
/// `class_samples[c]` lists the sample indices of class c. Unlabeled datasets
/// have empty `labels` and `class_samples`.
struct Dataset {
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;
  std::vector<std::vector<std::size_t>> class_samples;
  Split split = Split::All;
  std::string provenance;

  std::size_t size() const noexcept { return images.size(); }
  bool labeled() const noexcept { return !labels.empty(); }
  std::size_t num_classes() const noexcept { return class_samples.size(); }

  /// Rebuilds `class_samples` from `labels` and checks density.
  void index_classes() {
    class_samples.clear();
    if (labels.empty()) return;
    if (labels.size() != images.size()) throw ContractError("Dataset: label count mismatch");
    const std::size_t C = *std::max_element(labels.begin(), labels.end()) + 1;
    class_samples.assign(C, {});
    for (std::size_t i = 0; i < labels.size(); ++i) class_samples[labels[i]].push_back(i);
    for (std::size_t c = 0; c < C; ++c) {
      if (class_samples[c].empty()) {
        throw ContractError("Dataset: class " + std::to_string(c) + " has no samples");
      }
    }
    if (class_names.size() != C) {
      class_names.resize(C);
      for (std::size_t c = 0; c < C; ++c) {
        if (class_names[c].empty()) class_names[c] = "class" + std::to_string(c);
      }
    }
  }
};

/// N-way K-shot task. Labels are episode-local (0..N-1, in sampled-class order).
struct Episode {
  std::size_t n_ways = 0;
  std::size_t k_shots = 0;
  std::size_t q_queries = 0;
  std::vector<std::size_t> classes;  // dataset class ids, index = local label
  std::vector<std::size_t> support_ids;
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query_ids;
  std::vector<std::size_t> query_labels;
};

/// One ProtoCLR batch: N originals and Q augmented views of each.
/// Query (i, q) is stored at index i * Q + q.
struct PretrainBatch {
  std::size_t n = 0;
  std::size_t q = 0;
  std::vector<std::size_t> sample_ids;
  std::vector<Image> prototypes;
  std::vector<Image> queries;
};

// ---- loading ----------------------------------------------------------------

inline std::vector<std::string> read_split_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot open split file '" + path.string() + "'");
  std::vector<std::string> names;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) {
      line.pop_back();
    }
    const auto start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    names.push_back(line.substr(start));
  }
  return names;
}

/// Single-tensor PTT1 image file holding [C, H, W] (or [H, W]) values in [0, 1].
inline Image load_ptt1_image(const std::filesystem::path& path) {
  const TensorList list = load_ptt1(path);
  if (list.size() != 1) throw LoadError(path.string() + ": expected exactly one tensor");
  const Tensor& t = list.front().tensor;
  Image img;
  if (t.rank() == 2) {
    img = Image(1, t.dim(0), t.dim(1));
  } else if (t.rank() == 3) {
    img = Image(t.dim(0), t.dim(1), t.dim(2));
  } else {
    throw LoadError(path.string() + ": image tensor must be [C,H,W] or [H,W]");
  }
  if (img.channels != 1 && img.channels != 3) {
    throw LoadError(path.string() + ": image must have 1 or 3 channels");
  }
  std::copy(t.data().begin(), t.data().end(), img.pixels.begin());
  for (float v : img.pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw LoadError(path.string() + ": pixel outside [0,1]");
  }
  return img;
}

inline void save_ptt1_image(const std::filesystem::path& path, const Image& img) {
  save_ptt1(path, {{"image", Tensor(Shape{img.channels, img.height, img.width}, img.pixels)}});
}

inline Image load_image_file(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".pgm" || ext == ".ppm") return load_pnm(path);
  if (ext == ".ptt1") return load_ptt1_image(path);
  throw LoadError(path.string() + ": unsupported image extension '" + ext + "'");
}

inline bool is_image_file(const std::filesystem::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".pgm" || ext == ".ppm" || ext == ".ptt1";
}

/// Loads `root/<class>/<sample>.{pgm,ppm,ptt1}`. Classes (and files within a
/// class) are sorted lexicographically; `classes`, when given, selects the
/// classes to load (e.g. from a split file).
inline Dataset load_directory_dataset(const std::filesystem::path& root, std::size_t image_size,
                                      std::size_t channels,
                                      const std::vector<std::string>& classes = {},
                                      Split split = Split::All) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw LoadError("dataset root '" + root.string() + "' is not a directory");
  if (channels != 1 && channels != 3) throw LoadError("dataset channels must be 1 or 3");
  std::vector<std::string> names = classes;
  if (names.empty()) {
    for (const auto& e : fs::directory_iterator(root)) {
      if (e.is_directory()) names.push_back(e.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw LoadError("dataset root '" + root.string() + "' has no class directories");
  Dataset ds;
  ds.split = split;
  ds.provenance = root.string();
  for (std::size_t c = 0; c < names.size(); ++c) {
    const fs::path dir = root / names[c];
    if (!fs::is_directory(dir)) throw LoadError("class directory '" + dir.string() + "' not found");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw LoadError("class directory '" + dir.string() + "' is empty");
    for (const auto& f : files) {
      Image img = load_image_file(f);
      if (img.channels != channels) {
        throw LoadError(f.string() + ": has " + std::to_string(img.channels) +
                        " channel(s), dataset expects " + std::to_string(channels));
      }
      ds.images.push_back(resize(img, image_size, image_size));
      ds.labels.push_back(c);
    }
  }
  ds.class_names = names;
  ds.index_classes();
  return ds;
}

// ---- synthetic data -----------------------------------------------------------

struct SyntheticSpec {
  std::size_t n_classes = 8;
  std::size_t n_per_class = 20;
  std::size_t image_size = 28;
  std::size_t channels = 1;
  double noise_std = 0.05;
  std::uint64_t seed = 0;
  /// Template family; classes of different families share no templates.
  std::uint64_t family = 0;
  /// Maximum per-sample translation of the template in pixels.
  std::size_t max_shift = 0;
  /// Number of strokes per template.
  std::size_t strokes = 3;

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

namespace detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * dx - px, qy = ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

}  // namespace detail

/// Deterministic class template: antialiased strokes (line segments and
/// rings) at class-specific positions, drawn on a canvas `pad` pixels wider
/// on each side than the image so samples can be shifted.
inline Image synthetic_template(const SyntheticSpec& spec, std::size_t cls, std::size_t pad = 0) {
  Rng rng = make_stream(spec.family, Stream::Synthetic, {cls});
  const std::size_t S = spec.image_size;
  const double s = static_cast<double>(S);
  const std::size_t canvas = S + 2 * pad;
  Image img(spec.channels, canvas, canvas);
  const double width = std::max(1.0, s / 14.0);
  std::vector<std::array<double, 3>> colors;
  for (std::size_t k = 0; k < spec.strokes; ++k) {
    const bool ring = uniform(rng, 0, 1) < 0.3;
    const double ax = uniform(rng, 0.2, 0.8) * s, ay = uniform(rng, 0.2, 0.8) * s;
    const double bx = uniform(rng, 0.2, 0.8) * s, by = uniform(rng, 0.2, 0.8) * s;
    const double radius = uniform(rng, 0.1, 0.25) * s;
    std::array<double, 3> col{1, 1, 1};
    if (spec.channels == 3) col = {uniform(rng, 0.3, 1), uniform(rng, 0.3, 1), uniform(rng, 0.3, 1)};
    for (std::size_t y = 0; y < canvas; ++y) {
      for (std::size_t x = 0; x < canvas; ++x) {
        const double px = static_cast<double>(x) - static_cast<double>(pad) + 0.5;
        const double py = static_cast<double>(y) - static_cast<double>(pad) + 0.5;
        const double d = ring ? std::abs(std::hypot(px - ax, py - ay) - radius)
                              : detail::segment_distance(px, py, ax, ay, bx, by);
        const double cover = std::clamp(width / 2 + 0.5 - d, 0.0, 1.0);
        if (cover <= 0) continue;
        for (std::size_t c = 0; c < spec.channels; ++c) {
          float& v = img.at(c, y, x);
          v = std::max(v, static_cast<float>(cover * col[c]));
        }
      }
    }
  }
  return img;
}

/// Labeled dataset of `n_classes` templates from `spec.family`, each sample a
/// shifted template plus Gaussian pixel noise, clamped to [0, 1].
inline Dataset make_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.n_classes < 2) throw ContractError("make_synthetic_dataset: need at least 2 classes");
  if (spec.n_per_class < 1) throw ContractError("make_synthetic_dataset: need samples per class");
  if (spec.image_size < 4) throw GeometryError("make_synthetic_dataset: image size too small");
  Dataset ds;
  ds.provenance = "synthetic(family=" + std::to_string(spec.family) +
                  ", classes=" + std::to_string(spec.n_classes) +
                  ", seed=" + std::to_string(spec.seed) + ")";
  Rng rng = make_stream(spec.seed, Stream::Synthetic, {spec.family, 0xda7a});
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t pad = spec.max_shift;
  const std::size_t S = spec.image_size;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    const Image tmpl = synthetic_template(spec, c, pad);
    ds.class_names.push_back("f" + std::to_string(spec.family) + "_c" + std::to_string(c));
    for (std::size_t k = 0; k < spec.n_per_class; ++k) {
      std::size_t dy = pad, dx = pad;
      if (pad > 0) {
        std::uniform_int_distribution<std::size_t> shift(0, 2 * pad);
        dy = shift(rng);
        dx = shift(rng);
      }
      Image img(spec.channels, S, S);
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        for (std::size_t y = 0; y < S; ++y) {
          for (std::size_t x = 0; x < S; ++x) {
            double v = tmpl.at(ch, y + dy, x + dx);
            if (spec.noise_std > 0) v += spec.noise_std * noise(rng);
            img.at(ch, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(c);
    }
  }
  ds.index_classes();
  return ds;
}

inline Dataset make_synthetic_dataset(std::size_t n_classes, std::size_t n_per_class,
                                      std::size_t image_size, double noise_std, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_classes = n_classes;
  spec.n_per_class = n_per_class;
  spec.image_size = image_size;
  spec.noise_std = noise_std;
  spec.seed = seed;
  return make_synthetic_dataset(spec);
}

// ---- restriction --------------------------------------------------------------

namespace detail {

inline Dataset subset(const Dataset& src, const std::vector<std::size_t>& ids) {
  Dataset out;
  out.split = src.split;
  out.provenance = src.provenance;
  std::vector<std::size_t> remap(src.num_classes(), SIZE_MAX);
  std::vector<std::size_t> present;
  for (std::size_t id : ids) {
    if (src.labeled()) present.push_back(src.labels[id]);
  }
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());
  for (std::size_t k = 0; k < present.size(); ++k) {
    remap[present[k]] = k;
    out.class_names.push_back(src.class_names[present[k]]);
  }
  for (std::size_t id : ids) {
    out.images.push_back(src.images[id]);
    if (src.labeled()) out.labels.push_back(remap[src.labels[id]]);
  }
  out.index_classes();
  return out;
}

}  // namespace detail

/// Keeps a seeded random subset of `n_classes` classes (all their images),
/// then removes samples uniformly at random from the pooled remainder until
/// `n_images` remain. Classes left empty are dropped and labels re-densified
/// preserving class order.
inline Dataset restrict_dataset(const Dataset& ds, std::optional<std::size_t> n_classes,
                                std::optional<std::size_t> n_images, std::uint64_t seed) {
  std::vector<std::size_t> ids(ds.size());
  std::iota(ids.begin(), ids.end(), 0);
  if (n_classes) {
    if (!ds.labeled()) throw ContractError("restrict: class restriction needs labels");
    if (*n_classes == 0 || *n_classes > ds.num_classes()) {
      throw ContractError("restrict: requested " + std::to_string(*n_classes) + " classes, dataset has " +
                          std::to_string(ds.num_classes()));
    }
    Rng rng = make_stream(seed, Stream::Restrict, {0});
    std::vector<std::size_t> classes(ds.num_classes());
    std::iota(classes.begin(), classes.end(), 0);
    std::shuffle(classes.begin(), classes.end(), rng);
    classes.resize(*n_classes);
    std::sort(classes.begin(), classes.end());
    ids.clear();
    for (std::size_t c : classes) ids.insert(ids.end(), ds.class_samples[c].begin(), ds.class_samples[c].end());
    std::sort(ids.begin(), ids.end());
  }
  if (n_images) {
    if (*n_images == 0 || *n_images > ids.size()) {
      throw ContractError("restrict: requested " + std::to_string(*n_images) + " images, " +
                          std::to_string(ids.size()) + " available");
    }
    Rng rng = make_stream(seed, Stream::Restrict, {1});
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(*n_images);
    std::sort(ids.begin(), ids.end());
  }
  return detail::subset(ds, ids);
}

// ---- sampling -------------------------------------------------------------------

/// `n` distinct sample indices. Labels are never consulted.
inline std::vector<std::size_t> sample_distinct(std::size_t population, std::size_t n, Rng& rng) {
  if (n > population) {
    throw ContractError("sample: requested " + std::to_string(n) + " distinct samples from " +
                        std::to_string(population));
  }
  std::vector<std::size_t> ids(population);
  std::iota(ids.begin(), ids.end(), 0);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, population - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(n);
  return ids;
}

/// Applies `fn(k)` for k in [0, count) on up to `threads` threads. Work is
/// statically partitioned; callers write results by index.
template <class Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t k = 0; k < count; ++k) fn(k);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t k = t; k < count; k += threads) fn(k);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Draws N distinct samples (uniform, labels ignored) and Q augmented views of
/// each. View (i, q) uses the stream derived from (seed, iteration, i, q), so
/// the batch is identical for any thread count.
inline PretrainBatch sample_pretrain_batch(const Dataset& ds, std::size_t n, std::size_t q,
                                           const AugmentationPipeline& pipeline, std::uint64_t seed,
                                           std::uint64_t iteration, std::size_t threads = 1,
                                           const std::vector<std::size_t>* ids_override = nullptr) {
  if (n == 0) throw ContractError("sample_pretrain_batch: N must be positive");
  if (q == 0) throw ContractError("sample_pretrain_batch: Q must be at least 1");
  if (n > ds.size()) {
    throw ContractError("sample_pretrain_batch: batch size " + std::to_string(n) +
                        " exceeds dataset size " + std::to_string(ds.size()));
  }
  PretrainBatch batch;
  batch.n = n;
  batch.q = q;
  if (ids_override) {
    if (ids_override->size() != n) throw ContractError("sample_pretrain_batch: id override size");
    batch.sample_ids = *ids_override;
  } else {
    Rng rng = make_stream(seed, Stream::Batch, {iteration});
    batch.sample_ids = sample_distinct(ds.size(), n, rng);
  }
  for (std::size_t id : batch.sample_ids) batch.prototypes.push_back(ds.images[id]);
  batch.queries.resize(n * q);
  parallel_for(n * q, threads, [&](std::size_t k) {
    const std::size_t i = k / q, j = k % q;
    Rng rng = make_stream(seed, Stream::Augment, {iteration, i, j});
    batch.queries[k] = apply_pipeline(pipeline, batch.prototypes[i], rng);
  });
  return batch;
}

/// Classes without replacement, then K support and Q query samples per class
/// without replacement. Local label n is the n-th sampled class.
inline Episode sample_episode(const Dataset& ds, std::size_t n_ways, std::size_t k_shots,
                              std::size_t q_queries, Rng& rng) {
  if (!ds.labeled()) throw ContractError("sample_episode: dataset has no labels");
  if (n_ways == 0 || k_shots == 0) throw ContractError("sample_episode: ways and shots must be positive");
  if (n_ways > ds.num_classes()) {
    throw ContractError("sample_episode: " + std::to_string(n_ways) + "-way episode needs " +
                        std::to_string(n_ways) + " classes, dataset has " +
                        std::to_string(ds.num_classes()) + " (short by " +
                        std::to_string(n_ways - ds.num_classes()) + ")");
  }
  Episode ep;
  ep.n_ways = n_ways;
  ep.k_shots = k_shots;
  ep.q_queries = q_queries;
  ep.classes = sample_distinct(ds.num_classes(), n_ways, rng);
  const std::size_t need = k_shots + q_queries;
  for (std::size_t n = 0; n < n_ways; ++n) {
    const auto& pool = ds.class_samples[ep.classes[n]];
    if (pool.size() < need) {
      throw ContractError("sample_episode: class '" + ds.class_names[ep.classes[n]] + "' has " +
                          std::to_string(pool.size()) + " samples, episode needs " +
                          std::to_string(need) + " (short by " + std::to_string(need - pool.size()) + ")");
    }
    const auto picks = sample_distinct(pool.size(), need, rng);
    for (std::size_t k = 0; k < need; ++k) {
      if (k < k_shots) {
        ep.support_ids.push_back(pool[picks[k]]);
        ep.support_labels.push_back(n);
      } else {
        ep.query_ids.push_back(pool[picks[k]]);
        ep.query_labels.push_back(n);
      }
    }
  }
  return ep;
}

/// Images of the given samples as one [B, C, H, W] tensor.
inline Tensor gather_images(const Dataset& ds, const std::vector<std::size_t>& ids) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(ids.size());
  for (std::size_t id : ids) ptrs.push_back(&ds.images.at(id));
  return stack_images(ptrs);
}

}  // namespace prototransfer
