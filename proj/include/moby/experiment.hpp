#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "moby/checkpoint.hpp"
#include "moby/config.hpp"

namespace moby {

struct PretrainResult {
  Index steps = 0;  // global step reached
  std::string final_checkpoint;
  std::vector<StepMetrics> metrics;  // steps run by this call
};

/// Pre-trains per `config` into config.output_dir:
///   config.cfg        resolved configuration
///   metrics.csv       step,loss,momentum,queue_fill,lr (deterministic)
///   timing.csv        step,wall_ms
///   ckpt_<step>.mbck  every checkpoint_every steps
///   final.mbck        at the end
/// With `resume`, training continues from that checkpoint and metrics rows
/// at or past its step are replaced. `log` receives progress lines.
PretrainResult run_pretrain(const ExperimentConfig& config, const std::optional<std::string>& resume = std::nullopt,
                            std::ostream* log = nullptr);

/// Linear and k-NN probes of the online backbone in `checkpoint`, or of a
/// freshly initialized backbone without one. Writes eval.csv and
/// eval_summary.txt into config.output_dir.
EvalReport run_eval(const ExperimentConfig& config, const std::optional<std::string>& checkpoint = std::nullopt,
                    std::ostream* log = nullptr);

enum class SweepAxis { kQueueSize, kTau, kMomentumStart, kDropPath, kNormBeforeMlp };

SweepAxis parse_sweep_axis(const std::string& text);
std::string to_string(SweepAxis axis);

/// Values of the corresponding ablation in the published MoBY ablations (100-epoch column).
std::vector<std::string> published_sweep_values(SweepAxis axis);
/// Published top-1 for a cell, when one exists.
std::optional<double> published_reference(SweepAxis axis, const std::string& value);

/// Sets the axis in a copy of `base`. Drop path values read
/// "online/target"; norm values are layer_norm or batch_norm.
ExperimentConfig apply_sweep_value(const ExperimentConfig& base, SweepAxis axis, const std::string& value);

struct SweepCell {
  std::string value;
  std::uint64_t seed = 0;
  std::string output_dir;
  bool ok = false;
  std::string error;
  EvalReport report;
  std::optional<double> published;
};

struct SweepReport {
  SweepAxis axis = SweepAxis::kTau;
  std::vector<SweepCell> cells;
};

/// Pre-train and probe for every (value, seed) in its own subdirectory of
/// base.output_dir. A failing cell is recorded and the sweep continues.
SweepReport run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::string>& values,
                      const std::vector<std::uint64_t>& seeds, std::ostream* log = nullptr);

void write_sweep_csv(std::ostream& out, const SweepReport& report);
/// Table with one row per value: mean probe top-1, k-NN top-1 and the published value.
std::string format_sweep_table(const SweepReport& report);

}  // namespace moby
