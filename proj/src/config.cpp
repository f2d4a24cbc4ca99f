#include "moby/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace moby {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) out.push_back(parse_number<T>(key, item));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(values[i]);
    } else {
      out += std::to_string(values[i]);
    }
  }
  return out;
}

struct Field {
  ConfigKey key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

// Field bound to a member reached through `access`.
template <typename Access>
Field index_field(std::string name, std::string doc, Access access) {
  const std::string n = name;
  return {{std::move(name), std::move(doc)},
          [access](const ExperimentConfig& c) { return std::to_string(access(const_cast<ExperimentConfig&>(c))); },
          [access, n](ExperimentConfig& c, const std::string& v) { access(c) = parse_number<Index>(n, v); }};
}

template <typename Access>
Field double_field(std::string name, std::string doc, Access access) {
  const std::string n = name;
  return {{std::move(name), std::move(doc)},
          [access](const ExperimentConfig& c) { return format_double(access(const_cast<ExperimentConfig&>(c))); },
          [access, n](ExperimentConfig& c, const std::string& v) { access(c) = parse_number<double>(n, v); }};
}

template <typename Access>
Field string_field(std::string name, std::string doc, Access access) {
  return {{std::move(name), std::move(doc)},
          [access](const ExperimentConfig& c) { return access(const_cast<ExperimentConfig&>(c)); },
          [access](ExperimentConfig& c, const std::string& v) { access(c) = v; }};
}

std::string variant_name(BackboneVariant v) { return v == BackboneVariant::kSwinLite ? "swin_lite" : "vit_lite"; }
std::string norm_name(NormKind k) { return k == NormKind::kLayerNorm ? "layer_norm" : "batch_norm"; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({{"seed", "training seed: initialization, drop path, shuffling, augmentation, probe"},
                 [](const ExperimentConfig& c) { return std::to_string(c.seed); },
                 [](ExperimentConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); }});
    f.push_back(string_field("data.source", "synthetic_shapes, tiny_natural, or a dataset file path",
                             [](ExperimentConfig& c) -> std::string& { return c.data.source; }));
    f.push_back(string_field("data.test_source", "optional dataset file with held-out labeled records",
                             [](ExperimentConfig& c) -> std::string& { return c.data.test_source; }));
    f.push_back(index_field("data.classes", "number of classes of a builtin source",
                            [](ExperimentConfig& c) -> Index& { return c.data.classes; }));
    f.push_back(index_field("data.count", "training images of a builtin source",
                            [](ExperimentConfig& c) -> Index& { return c.data.count; }));
    f.push_back(index_field("data.test_count", "held-out images", [](ExperimentConfig& c) -> Index& { return c.data.test_count; }));
    f.push_back({{"data.seed", "seed of the builtin generators, independent of the training seed"},
                 [](const ExperimentConfig& c) { return std::to_string(c.data.seed); },
                 [](ExperimentConfig& c, const std::string& v) { c.data.seed = parse_number<std::uint64_t>("data.seed", v); }});
    f.push_back({{"backbone.variant", "swin_lite or vit_lite"},
                 [](const ExperimentConfig& c) { return variant_name(c.backbone.variant); },
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "swin_lite") {
                     c.backbone.variant = BackboneVariant::kSwinLite;
                   } else if (v == "vit_lite") {
                     c.backbone.variant = BackboneVariant::kVitLite;
                   } else {
                     throw ConfigError("config key 'backbone.variant': expected swin_lite or vit_lite, got '" + v + "'");
                   }
                 }});
    f.push_back(index_field("backbone.image_size", "input resolution", [](ExperimentConfig& c) -> Index& { return c.backbone.image_size; }));
    f.push_back(index_field("backbone.patch_size", "patch edge in pixels", [](ExperimentConfig& c) -> Index& { return c.backbone.patch_size; }));
    f.push_back(index_field("backbone.embed_dim", "channels of the first stage", [](ExperimentConfig& c) -> Index& { return c.backbone.embed_dim; }));
    f.push_back({{"backbone.depths", "blocks per stage, comma separated"},
                 [](const ExperimentConfig& c) { return join(c.backbone.depths); },
                 [](ExperimentConfig& c, const std::string& v) { c.backbone.depths = parse_list<Index>("backbone.depths", v); }});
    f.push_back({{"backbone.num_heads", "attention heads per stage, comma separated"},
                 [](const ExperimentConfig& c) { return join(c.backbone.num_heads); },
                 [](ExperimentConfig& c, const std::string& v) { c.backbone.num_heads = parse_list<Index>("backbone.num_heads", v); }});
    f.push_back(index_field("backbone.window_size", "attention window edge in tokens", [](ExperimentConfig& c) -> Index& { return c.backbone.window_size; }));
    f.push_back(double_field("backbone.mlp_ratio", "MLP hidden width over block width", [](ExperimentConfig& c) -> double& { return c.backbone.mlp_ratio; }));
    f.push_back({{"backbone.norm_before_mlp", "layer_norm or batch_norm"},
                 [](const ExperimentConfig& c) { return norm_name(c.backbone.norm_before_mlp); },
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "layer_norm") {
                     c.backbone.norm_before_mlp = NormKind::kLayerNorm;
                   } else if (v == "batch_norm") {
                     c.backbone.norm_before_mlp = NormKind::kBatchNorm;
                   } else {
                     throw ConfigError("config key 'backbone.norm_before_mlp': expected layer_norm or batch_norm, got '" + v + "'");
                   }
                 }});
    f.push_back(double_field("moby.tau", "contrastive temperature", [](ExperimentConfig& c) -> double& { return c.moby.tau; }));
    f.push_back(index_field("moby.queue_size", "keys per queue, clamped to the training set size",
                            [](ExperimentConfig& c) -> Index& { return c.moby.queue_size; }));
    f.push_back(double_field("moby.momentum_start", "target momentum at step 0", [](ExperimentConfig& c) -> double& { return c.moby.momentum_start; }));
    f.push_back(double_field("moby.online_drop_path", "drop path rate of the online encoder",
                             [](ExperimentConfig& c) -> double& { return c.moby.online_drop_path; }));
    f.push_back(double_field("moby.target_drop_path", "drop path rate of the target encoder",
                             [](ExperimentConfig& c) -> double& { return c.moby.target_drop_path; }));
    f.push_back(index_field("moby.head_hidden", "hidden width of projector and predictor", [](ExperimentConfig& c) -> Index& { return c.moby.heads.hidden; }));
    f.push_back(index_field("moby.head_out", "output width of projector and predictor", [](ExperimentConfig& c) -> Index& { return c.moby.heads.out; }));
    f.push_back(double_field("optim.lr", "AdamW learning rate (fixed)", [](ExperimentConfig& c) -> double& { return c.optim.lr; }));
    f.push_back(double_field("optim.weight_decay", "AdamW decoupled weight decay", [](ExperimentConfig& c) -> double& { return c.optim.weight_decay; }));
    f.push_back(double_field("optim.beta1", "AdamW first moment decay", [](ExperimentConfig& c) -> double& { return c.optim.beta1; }));
    f.push_back(double_field("optim.beta2", "AdamW second moment decay", [](ExperimentConfig& c) -> double& { return c.optim.beta2; }));
    f.push_back(double_field("optim.eps", "AdamW denominator epsilon", [](ExperimentConfig& c) -> double& { return c.optim.eps; }));
    f.push_back({{"optim.exclude_norm_and_bias", "skip weight decay on 1-d tensors and bias tables"},
                 [](const ExperimentConfig& c) { return std::string(c.optim.exclude_norm_and_bias ? "true" : "false"); },
                 [](ExperimentConfig& c, const std::string& v) { c.optim.exclude_norm_and_bias = parse_bool("optim.exclude_norm_and_bias", v); }});
    f.push_back(index_field("train.batch_size", "view pairs per step", [](ExperimentConfig& c) -> Index& { return c.batch_size; }));
    f.push_back(index_field("train.epochs", "passes over the training set", [](ExperimentConfig& c) -> Index& { return c.epochs; }));
    f.push_back(index_field("train.checkpoint_every", "steps between checkpoints, 0 for the final one only",
                            [](ExperimentConfig& c) -> Index& { return c.checkpoint_every; }));
    f.push_back(index_field("train.log_every", "steps between progress lines, 0 for none", [](ExperimentConfig& c) -> Index& { return c.log_every; }));
    f.push_back(double_field("train.crop_scale_min", "smallest crop area fraction of the pre-training views",
                             [](ExperimentConfig& c) -> double& { return c.crop_scale_min; }));
    f.push_back({{"train.precision", "f32 or f64"}, [](const ExperimentConfig& c) { return to_string(c.precision); },
                 [](ExperimentConfig& c, const std::string& v) { c.precision = parse_precision(v); }});
    f.push_back({{"probe.lr_grid", "linear probe learning rates, comma separated"},
                 [](const ExperimentConfig& c) { return join(c.probe.lr_grid); },
                 [](ExperimentConfig& c, const std::string& v) { c.probe.lr_grid = parse_list<double>("probe.lr_grid", v); }});
    f.push_back(index_field("probe.epochs", "linear probe epochs", [](ExperimentConfig& c) -> Index& { return c.probe.epochs; }));
    f.push_back(double_field("probe.warmup_fraction", "fraction of probe iterations spent warming up",
                             [](ExperimentConfig& c) -> double& { return c.probe.warmup_fraction; }));
    f.push_back(double_field("probe.momentum", "SGD momentum of the probe", [](ExperimentConfig& c) -> double& { return c.probe.momentum; }));
    f.push_back(index_field("probe.batch_size", "probe minibatch", [](ExperimentConfig& c) -> Index& { return c.probe.batch_size; }));
    f.push_back(index_field("probe.augment_passes", "augmented feature copies cycled through probe epochs",
                            [](ExperimentConfig& c) -> Index& { return c.probe.augment_passes; }));
    f.push_back(index_field("probe.knn_k", "neighbours of the k-NN probe", [](ExperimentConfig& c) -> Index& { return c.probe.knn_k; }));
    f.push_back(double_field("probe.knn_tau", "vote temperature of the k-NN probe", [](ExperimentConfig& c) -> double& { return c.probe.knn_tau; }));
    f.push_back(string_field("output_dir", "directory for config, metrics and checkpoints",
                             [](ExperimentConfig& c) -> std::string& { return c.output_dir; }));
    return f;
  }();
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key.name == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::string to_string(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& text) {
  if (text == "f32") return Precision::kF32;
  if (text == "f64") return Precision::kF64;
  throw ConfigError("precision must be f32 or f64, got '" + text + "'");
}

void ExperimentConfig::validate() const {
  auto named = [](const std::string& key, const auto& check) {
    try {
      check();
    } catch (const ConfigError& e) {
      throw ConfigError(key + ": " + e.what());
    }
  };
  named("data", [&] { dataset().validate(); });
  named("backbone", [&] { backbone.validate(); });
  named("moby", [&] { moby.validate(); });
  named("optim", [&] { optim.validate(); });
  named("probe", [&] { probe.validate(); });
  if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
  if (epochs < 0) throw ConfigError("train.epochs must be non-negative");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be non-negative");
  if (log_every < 0) throw ConfigError("train.log_every must be non-negative");
  if (!(crop_scale_min > 0.0 && crop_scale_min <= 1.0)) throw ConfigError("train.crop_scale_min must be in (0, 1]");
  if (moby.queue_size < batch_size) throw ConfigError("moby.queue_size must be at least train.batch_size");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

DatasetConfig ExperimentConfig::dataset() const {
  DatasetConfig d = data;
  d.image_size = backbone.image_size;
  return d;
}

MobyConfig ExperimentConfig::effective_moby(Index train_size) const {
  MobyConfig m = moby;
  m.queue_size = std::max(batch_size, std::min(m.queue_size, train_size));
  return m;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value) {
  field(key).set(config, value);
}

std::string get_config_value(const ExperimentConfig& config, const std::string& key) { return field(key).get(config); }

ExperimentConfig parse_config(std::istream& in, ExperimentConfig base) {
  std::string line;
  std::set<std::string> seen;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(text.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config line " + std::to_string(number) + ": key '" + key + "' repeated");
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(number) + ": " + e.what());
    }
  }
  return base;
}

ExperimentConfig load_config(const std::string& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_config(in, std::move(base));
}

std::string write_config(const ExperimentConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key.name + " = " + f.get(config) + "\n";
  return out;
}

void save_config(const std::string& path, const ExperimentConfig& config) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write config file " + path);
  out << write_config(config);
}

}  // namespace moby
