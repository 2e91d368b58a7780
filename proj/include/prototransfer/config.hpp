#pragma once

// Run configuration: one JSON document with sections data, augment, backbone,
// protoclr, finetune and eval. Every field has a default; unknown keys are
// rejected.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "prototransfer/augment.hpp"
#include "prototransfer/data.hpp"
#include "prototransfer/errors.hpp"
#include "prototransfer/eval.hpp"
#include "prototransfer/fewshot.hpp"
#include "prototransfer/protoclr.hpp"

namespace prototransfer {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | directory
  std::string root;
  std::string train_classes;  // split file; empty loads every class directory
  std::string test_classes;   // split file; empty reuses the training classes
  std::size_t restrict_classes = 0;  // 0: keep all
  std::size_t restrict_images = 0;   // 0: keep all
  std::uint64_t restrict_seed = 0;
  std::size_t synthetic_classes = 8;
  std::size_t synthetic_per_class = 20;
  std::size_t synthetic_test_per_class = 0;  // 0: same as synthetic_per_class
  double synthetic_noise = 0.05;
  std::size_t synthetic_shift = 0;
  std::size_t synthetic_strokes = 3;
  std::uint64_t synthetic_seed = 0;
  std::uint64_t synthetic_family = 0;
  std::uint64_t synthetic_test_family = 1;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct AugmentConfig {
  std::string preset = "omniglot";
  std::vector<TransformSpec> transforms;  // non-empty: replaces the preset

  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

struct BackboneConfig {
  std::size_t channels = 1;
  std::size_t image_size = 28;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct PretrainConfig {
  std::size_t batch_size = 50;
  std::size_t queries = 3;
  double learning_rate = 1e-3;
  double decay_factor = 0.5;
  std::uint64_t decay_period = 25000;
  std::uint64_t patience = 20000;
  std::uint64_t max_iterations = 1000000;
  std::size_t accuracy_window = 100;
  std::uint64_t seed = 0;
  bool epoch_shuffle = false;
  std::uint64_t checkpoint_interval = 0;

  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct EvalSection {
  std::size_t ways = 5;
  std::size_t shots = 5;
  std::size_t queries = 15;
  std::size_t episodes = 600;
  std::uint64_t seed = 0;
  std::string adaptor = "proto";
  std::string split = "test";  // train | test
  bool transductive_bn = false;

  friend bool operator==(const EvalSection&, const EvalSection&) = default;
};

struct RunConfig {
  DataConfig data;
  AugmentConfig augment;
  BackboneConfig backbone;
  PretrainConfig protoclr;
  FineTuneConfig finetune;
  EvalSection eval;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

using nlohmann::json;

struct ConfigField {
  const char* section;
  const char* key;
  const char* help;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <class V>
V json_as(const json& j, const std::string& where) {
  try {
    if constexpr (std::is_same_v<V, bool>) {
      if (!j.is_boolean()) throw ConfigError(where + ": expected a boolean");
    } else if constexpr (std::is_integral_v<V>) {
      if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) {
        throw ConfigError(where + ": expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!j.is_number()) throw ConfigError(where + ": expected a number");
    } else {
      if (!j.is_string()) throw ConfigError(where + ": expected a string");
    }
    return j.get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline json transform_to_json(const TransformSpec& t) {
  return json{{"kind", transform_kind_name(t.kind)},
              {"p", t.p},
              {"size", t.size},
              {"scale", {t.scale[0], t.scale[1]}},
              {"ratio", {t.ratio[0], t.ratio[1]}},
              {"brightness", t.brightness},
              {"contrast", t.contrast},
              {"saturation", t.saturation},
              {"hue", t.hue},
              {"sigma", {t.sigma[0], t.sigma[1]}},
              {"drop_rate", t.drop_rate}};
}

inline Range json_range(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2) throw ConfigError(where + ": expected [low, high]");
  return {json_as<double>(j[0], where), json_as<double>(j[1], where)};
}

inline TransformSpec transform_from_json(const json& j, const std::string& where) {
  if (!j.is_object() || !j.contains("kind")) throw ConfigError(where + ": expected an object with 'kind'");
  TransformSpec t;
  t.kind = parse_transform_kind(json_as<std::string>(j["kind"], where + ".kind"));
  for (const auto& [key, v] : j.items()) {
    const std::string at = where + "." + key;
    if (key == "kind") continue;
    if (key == "p") t.p = json_as<double>(v, at);
    else if (key == "size") t.size = json_as<std::size_t>(v, at);
    else if (key == "scale") t.scale = json_range(v, at);
    else if (key == "ratio") t.ratio = json_range(v, at);
    else if (key == "brightness") t.brightness = json_as<double>(v, at);
    else if (key == "contrast") t.contrast = json_as<double>(v, at);
    else if (key == "saturation") t.saturation = json_as<double>(v, at);
    else if (key == "hue") t.hue = json_as<double>(v, at);
    else if (key == "sigma") t.sigma = json_range(v, at);
    else if (key == "drop_rate") t.drop_rate = json_as<double>(v, at);
    else throw ConfigError("config: unknown key '" + at + "'");
  }
  return t;
}

#define PT_FIELD(SEC, MEMBER, KEY, HELP)                                                  \
  ConfigField {                                                                           \
    #SEC, KEY, HELP, [](const RunConfig& c) { return json(c.SEC.MEMBER); },               \
        [](RunConfig& c, const json& j) {                                                 \
          c.SEC.MEMBER = json_as<decltype(c.SEC.MEMBER)>(j, std::string(#SEC ".") + KEY); \
        }                                                                                 \
  }

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields{
      PT_FIELD(data, source, "source", "synthetic | directory"),
      PT_FIELD(data, root, "root", "dataset root with one sub-directory per class"),
      PT_FIELD(data, train_classes, "train_classes", "split file listing training classes"),
      PT_FIELD(data, test_classes, "test_classes", "split file listing test classes"),
      PT_FIELD(data, restrict_classes, "restrict_classes", "keep this many classes (0: all)"),
      PT_FIELD(data, restrict_images, "restrict_images", "keep this many images (0: all)"),
      PT_FIELD(data, restrict_seed, "restrict_seed", "seed of the restriction draw"),
      PT_FIELD(data, synthetic_classes, "synthetic_classes", "synthetic classes per split"),
      PT_FIELD(data, synthetic_per_class, "synthetic_per_class", "synthetic samples per class"),
      PT_FIELD(data, synthetic_test_per_class, "synthetic_test_per_class",
               "synthetic samples per test class (0: synthetic_per_class)"),
      PT_FIELD(data, synthetic_noise, "synthetic_noise", "Gaussian pixel noise std"),
      PT_FIELD(data, synthetic_shift, "synthetic_shift", "max template shift in pixels"),
      PT_FIELD(data, synthetic_strokes, "synthetic_strokes", "strokes per template"),
      PT_FIELD(data, synthetic_seed, "synthetic_seed", "sample noise/shift seed"),
      PT_FIELD(data, synthetic_family, "synthetic_family", "template family of the training split"),
      PT_FIELD(data, synthetic_test_family, "synthetic_test_family",
               "template family of the test split"),
      PT_FIELD(augment, preset, "preset", "omniglot | mini | cdfsl"),
      ConfigField{"augment", "transforms", "custom ordered transform list; replaces the preset",
                  [](const RunConfig& c) {
                    json a = json::array();
                    for (const auto& t : c.augment.transforms) a.push_back(transform_to_json(t));
                    return a;
                  },
                  [](RunConfig& c, const json& j) {
                    if (!j.is_array()) throw ConfigError("augment.transforms: expected an array");
                    c.augment.transforms.clear();
                    for (std::size_t i = 0; i < j.size(); ++i) {
                      c.augment.transforms.push_back(
                          transform_from_json(j[i], "augment.transforms[" + std::to_string(i) + "]"));
                    }
                  }},
      PT_FIELD(backbone, channels, "channels", "input channels (1 or 3)"),
      PT_FIELD(backbone, image_size, "image_size", "input side length (>= 16)"),
      PT_FIELD(protoclr, batch_size, "batch_size", "images per batch (N)"),
      PT_FIELD(protoclr, queries, "queries", "augmented queries per image (Q)"),
      PT_FIELD(protoclr, learning_rate, "learning_rate", "Adam learning rate"),
      PT_FIELD(protoclr, decay_factor, "decay_factor", "learning-rate decay factor"),
      PT_FIELD(protoclr, decay_period, "decay_period", "iterations between decays (0: none)"),
      PT_FIELD(protoclr, patience, "patience", "stop after this many iterations without improvement"),
      PT_FIELD(protoclr, max_iterations, "max_iterations", "iteration cap"),
      PT_FIELD(protoclr, accuracy_window, "accuracy_window", "training-accuracy smoothing window"),
      PT_FIELD(protoclr, seed, "seed", "master seed (init, batches, augmentation)"),
      PT_FIELD(protoclr, epoch_shuffle, "epoch_shuffle", "draw batches by epoch permutation"),
      PT_FIELD(protoclr, checkpoint_interval, "checkpoint_interval",
               "iterations between checkpoints (0: none)"),
      PT_FIELD(finetune, epochs, "epochs", "fine-tuning epochs"),
      PT_FIELD(finetune, batch_size, "batch_size", "fine-tuning batch size"),
      PT_FIELD(finetune, learning_rate, "learning_rate", "fine-tuning Adam learning rate"),
      ConfigField{"finetune", "scope", "head-only | full-model",
                  [](const RunConfig& c) { return json(scope_name(c.finetune.scope)); },
                  [](RunConfig& c, const json& j) {
                    c.finetune.scope = parse_scope(json_as<std::string>(j, "finetune.scope"));
                  }},
      PT_FIELD(eval, ways, "ways", "classes per episode"),
      PT_FIELD(eval, shots, "shots", "support samples per class"),
      PT_FIELD(eval, queries, "queries", "query samples per class"),
      PT_FIELD(eval, episodes, "episodes", "number of episodes"),
      PT_FIELD(eval, seed, "seed", "episode seed"),
      PT_FIELD(eval, adaptor, "adaptor", "proto | prototune | linear | oracle | random"),
      PT_FIELD(eval, split, "split", "train | test"),
      PT_FIELD(eval, transductive_bn, "transductive_bn",
               "normalize each episode with its own batch statistics"),
  };
  return fields;
}

#undef PT_FIELD

}  // namespace detail

inline const char* kConfigSections[] = {"data", "augment", "backbone", "protoclr", "finetune", "eval"};

/// Sections and keys in documentation order.
inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const char* s : kConfigSections) j[s] = nlohmann::ordered_json::object();
  for (const auto& f : detail::config_fields()) j[f.section][f.key] = f.get(c);
  return j;
}

/// Checks cross-field constraints.
inline void validate_config(const RunConfig& c) {
  if (c.data.source != "synthetic" && c.data.source != "directory") {
    throw ConfigError("data.source: unknown source '" + c.data.source + "' (valid: synthetic, directory)");
  }
  if (c.data.source == "directory" && c.data.root.empty()) {
    throw ConfigError("data.root: required when data.source is 'directory'");
  }
  if (c.backbone.channels != 1 && c.backbone.channels != 3) {
    throw ConfigError("backbone.channels: must be 1 or 3");
  }
  if (c.backbone.image_size < Conv4<float>::kMinInputSize) {
    throw ConfigError("backbone.image_size: must be at least " +
                      std::to_string(Conv4<float>::kMinInputSize));
  }
  const auto p = pipeline_preset(c.augment.preset, c.backbone.image_size);
  if (c.augment.transforms.empty() && p.channels != c.backbone.channels) {
    throw ConfigError("augment.preset: '" + c.augment.preset + "' works on " + std::to_string(p.channels) +
                      " channel(s), backbone.channels is " + std::to_string(c.backbone.channels));
  }
  if (c.protoclr.batch_size < 2) throw ConfigError("protoclr.batch_size: must be at least 2");
  if (c.protoclr.queries < 1) throw ConfigError("protoclr.queries: must be at least 1");
  if (c.protoclr.patience < 1) throw ConfigError("protoclr.patience: must be at least 1");
  if (c.protoclr.accuracy_window < 1) throw ConfigError("protoclr.accuracy_window: must be at least 1");
  if (c.finetune.batch_size < 1) throw ConfigError("finetune.batch_size: must be at least 1");
  if (c.eval.ways < 2) throw ConfigError("eval.ways: must be at least 2");
  if (c.eval.shots < 1) throw ConfigError("eval.shots: must be at least 1");
  if (c.eval.episodes < 1) throw ConfigError("eval.episodes: must be at least 1");
  if (c.eval.split != "train" && c.eval.split != "test") {
    throw ConfigError("eval.split: must be 'train' or 'test'");
  }
  make_adaptor(c.eval.adaptor);
}

/// Defaults overlaid with the fields present in `j`.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  const auto& fields = detail::config_fields();
  for (const auto& [section, body] : j.items()) {
    if (std::find_if(std::begin(kConfigSections), std::end(kConfigSections),
                     [&](const char* s) { return section == s; }) == std::end(kConfigSections)) {
      throw ConfigError("config: unknown section '" + section + "'");
    }
    if (!body.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
    for (const auto& [key, value] : body.items()) {
      auto it = std::find_if(fields.begin(), fields.end(), [&](const detail::ConfigField& f) {
        return section == f.section && key == f.key;
      });
      if (it == fields.end()) throw ConfigError("config: unknown key '" + section + "." + key + "'");
      it->set(base, value);
    }
  }
  validate_config(base);
  return base;
}

inline RunConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline std::string defaults_json() { return config_to_json(RunConfig{}).dump(2) + "\n"; }

/// `section.key  default  description` lines.
inline std::string config_help() {
  std::string out;
  const RunConfig d;
  for (const auto& f : detail::config_fields()) {
    std::string name = std::string(f.section) + "." + f.key;
    std::string def = f.get(d).dump();
    name.resize(std::max<std::size_t>(name.size() + 1, 32), ' ');
    def.resize(std::max<std::size_t>(def.size() + 1, 12), ' ');
    out += "  " + name + def + f.help + "\n";
  }
  return out;
}

// ---- translation to module configs -------------------------------------------

inline AugmentationPipeline make_pipeline(const RunConfig& c) {
  if (!c.augment.transforms.empty()) {
    return AugmentationPipeline{"custom", c.backbone.channels, c.backbone.image_size, c.augment.transforms};
  }
  return pipeline_preset(c.augment.preset, c.backbone.image_size);
}

inline ProtoClrConfig make_protoclr_config(const RunConfig& c) {
  ProtoClrConfig p;
  p.batch_size = c.protoclr.batch_size;
  p.queries = c.protoclr.queries;
  p.adam.learning_rate = c.protoclr.learning_rate;
  p.adam.decay_factor = c.protoclr.decay_factor;
  p.adam.decay_period = c.protoclr.decay_period;
  p.patience = c.protoclr.patience;
  p.max_iterations = c.protoclr.max_iterations;
  p.accuracy_window = c.protoclr.accuracy_window;
  p.seed = c.protoclr.seed;
  p.epoch_shuffle = c.protoclr.epoch_shuffle;
  p.checkpoint_interval = c.protoclr.checkpoint_interval;
  p.pipeline = make_pipeline(c);
  return p;
}

inline EvalConfig make_eval_config(const RunConfig& c) {
  EvalConfig e;
  e.n_ways = c.eval.ways;
  e.k_shots = c.eval.shots;
  e.q_queries = c.eval.queries;
  e.n_episodes = c.eval.episodes;
  e.seed = c.eval.seed;
  e.transductive_bn = c.eval.transductive_bn;
  return e;
}

inline Geometry make_geometry(const RunConfig& c) {
  return Geometry{c.backbone.channels, c.backbone.image_size};
}

/// Training (`test` false) or test split described by the data section.
inline Dataset load_split(const RunConfig& c, bool test) {
  Dataset ds;
  if (c.data.source == "synthetic") {
    SyntheticSpec s;
    s.n_classes = c.data.synthetic_classes;
    s.n_per_class = test && c.data.synthetic_test_per_class > 0 ? c.data.synthetic_test_per_class
                                                                 : c.data.synthetic_per_class;
    s.image_size = c.backbone.image_size;
    s.channels = c.backbone.channels;
    s.noise_std = c.data.synthetic_noise;
    s.max_shift = c.data.synthetic_shift;
    s.strokes = c.data.synthetic_strokes;
    s.family = test ? c.data.synthetic_test_family : c.data.synthetic_family;
    s.seed = c.data.synthetic_seed + (test ? 1 : 0);
    ds = make_synthetic_dataset(s);
  } else {
    std::vector<std::string> classes;
    const std::string& file = test && !c.data.test_classes.empty() ? c.data.test_classes : c.data.train_classes;
    if (!file.empty()) classes = read_split_file(file);
    ds = load_directory_dataset(c.data.root, c.backbone.image_size, c.backbone.channels, classes);
  }
  ds.split = test ? Split::Test : Split::Train;
  if (c.data.restrict_classes || c.data.restrict_images) {
    auto opt = [](std::size_t v) { return v ? std::optional<std::size_t>(v) : std::nullopt; };
    ds = restrict_dataset(ds, opt(c.data.restrict_classes), opt(c.data.restrict_images),
                          c.data.restrict_seed);
    ds.split = test ? Split::Test : Split::Train;
  }
  return ds;
}

}  // namespace prototransfer
