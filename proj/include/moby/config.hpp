#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "moby/backbone.hpp"
#include "moby/data.hpp"
#include "moby/eval.hpp"
#include "moby/moby.hpp"

namespace moby {

enum class Precision { kF32, kF64 };

/// Everything that determines an experiment. Read from and written as a flat
/// `key = value` text file; see `config_keys()` for the documented keys.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  DatasetConfig data;
  BackboneConfig backbone;
  MobyConfig moby;
  AdamWConfig optim;
  ProbeConfig probe;
  Index batch_size = 64;
  Index epochs = 100;
  Index checkpoint_every = 0;  // steps; 0 writes only the final checkpoint
  Index log_every = 50;
  double crop_scale_min = 0.08;  // smallest crop area of the pre-training views
  Precision precision = Precision::kF32;
  std::string output_dir = "runs/default";

  /// Checks every field; the message names the offending key.
  void validate() const;

  /// Dataset settings with the image size taken from the backbone.
  DatasetConfig dataset() const;
  /// MoBY settings with the queue clamped to the number of training images.
  MobyConfig effective_moby(Index train_size) const;
};

struct ConfigKey {
  std::string name;
  std::string doc;
};

/// Every accepted key, in file order, with a one-line description.
const std::vector<ConfigKey>& config_keys();

/// Applies `key = value` lines on top of `base`. Blank lines and lines
/// starting with '#' are skipped. Unknown, repeated or malformed keys throw
/// ConfigError naming the key and line.
ExperimentConfig parse_config(std::istream& in, ExperimentConfig base = {});
ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {});

/// Sets one key from its textual value.
void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& config, const std::string& key);

/// Every key with its resolved value; parse_config(write_config(c)) == c.
std::string write_config(const ExperimentConfig& config);
void save_config(const std::string& path, const ExperimentConfig& config);

std::string to_string(Precision p);
Precision parse_precision(const std::string& text);

}  // namespace moby
