// Command-line front end: pretrain, eval, sweep, inspect-checkpoint.
//
// Exit codes: 0 success, 2 invalid configuration or input, 3 numerical abort.

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>
#include <sstream>

#include "moby/experiment.hpp"
#include "moby/heap.hpp"

namespace {

using namespace moby;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string precision;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "experiment config file (key = value)");
  cmd->add_option("--seed", flags.seed, "training seed");
  cmd->add_option("--out", flags.out, "output directory");
  cmd->add_option("--precision", flags.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--set", flags.overrides, "extra key=value setting, applied after the config file; repeatable")->allow_extra_args(false);
}

// defaults <- embedded checkpoint config <- config file <- --set <- flags
ExperimentConfig resolve(const CommonFlags& flags, const std::optional<std::string>& checkpoint) {
  ExperimentConfig config;
  if (checkpoint && flags.config.empty()) {
    std::istringstream text(read_checkpoint(*checkpoint).config_text);
    config = parse_config(text);
  }
  if (!flags.config.empty()) config = load_config(flags.config);
  for (const auto& kv : flags.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (flags.seed) config.seed = *flags.seed;
  if (!flags.out.empty()) config.output_dir = flags.out;
  if (!flags.precision.empty()) config.precision = parse_precision(flags.precision);
  config.validate();
  return config;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text, std::uint64_t fallback) {
  std::vector<std::uint64_t> seeds;
  if (text.empty()) return {fallback};
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) seeds.push_back(std::stoull(item));
  return seeds;
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

void inspect(const std::string& path) {
  const Checkpoint c = read_checkpoint(path);
  std::size_t bytes = 0;
  for (const auto& t : c.tensors) bytes += t.payload.size();
  std::cout << "checkpoint " << path << "\n  version " << kCheckpointVersion << "\n  seed " << c.seed << "\n  step "
            << c.step << "\n  optimizer steps " << c.optimizer_steps << "\n  queues";
  for (const auto& q : c.queues) std::cout << "  (cursor " << q.cursor << ", fill " << q.fill << ")";
  std::cout << "\n  tensors " << c.tensors.size() << ", " << bytes << " payload bytes\n";
  for (const auto& t : c.tensors) {
    std::cout << "    " << std::left << std::setw(64) << t.name << ' ' << to_string(t.dtype) << " [";
    for (std::size_t i = 0; i < t.shape.size(); ++i) std::cout << (i ? ", " : "") << t.shape[i];
    std::cout << "]\n";
  }
  std::cout << "config:\n" << c.config_text;
}

}  // namespace

int main(int argc, char** argv) {
  retain_freed_memory();
  CLI::App app{"MoBY self-supervised pre-training with a Swin-lite backbone"};
  app.require_subcommand(1);

  CommonFlags pretrain_flags, eval_flags, sweep_flags;
  std::string resume, eval_checkpoint, inspect_path, axis, values, seeds;

  auto* pretrain_cmd = app.add_subcommand("pretrain", "pre-train and write metrics and checkpoints");
  add_common(pretrain_cmd, pretrain_flags);
  pretrain_cmd->add_option("--resume", resume, "checkpoint to continue from");

  auto* eval_cmd = app.add_subcommand("eval", "linear and k-NN probes of a checkpoint (or of a random init)");
  add_common(eval_cmd, eval_flags);
  eval_cmd->add_option("checkpoint", eval_checkpoint, "checkpoint file; omit to probe an untrained backbone");

  auto* sweep_cmd = app.add_subcommand("sweep", "ablation over one hyper-parameter");
  add_common(sweep_cmd, sweep_flags);
  sweep_cmd->add_option("--axis", axis, "queue_size, tau, momentum_start, drop_path or norm_before_mlp")->required();
  sweep_cmd->add_option("--values", values, "comma-separated values (default: the published ablation grid)");
  sweep_cmd->add_option("--seeds", seeds, "comma-separated seeds (default: the config seed)");

  auto* inspect_cmd = app.add_subcommand("inspect-checkpoint", "print checkpoint contents");
  inspect_cmd->add_option("checkpoint", inspect_path, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*pretrain_cmd) {
      const std::optional<std::string> from = resume.empty() ? std::nullopt : std::optional(resume);
      const ExperimentConfig config = resolve(pretrain_flags, from);
      const PretrainResult r = run_pretrain(config, from, &std::cerr);
      std::cout << "trained to step " << r.steps << "; checkpoint " << r.final_checkpoint << '\n';
    } else if (*eval_cmd) {
      const std::optional<std::string> ckpt = eval_checkpoint.empty() ? std::nullopt : std::optional(eval_checkpoint);
      const ExperimentConfig config = resolve(eval_flags, ckpt);
      const EvalReport report = run_eval(config, ckpt);
      std::cout << report_summary(report);
    } else if (*sweep_cmd) {
      const ExperimentConfig base = resolve(sweep_flags, std::nullopt);
      const SweepAxis a = parse_sweep_axis(axis);
      const auto vals = values.empty() ? published_sweep_values(a) : split(values);
      const SweepReport report = run_sweep(base, a, vals, parse_seeds(seeds, base.seed), &std::cerr);
      std::cout << format_sweep_table(report);
    } else if (*inspect_cmd) {
      inspect(inspect_path);
    }
  } catch (const NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "invalid configuration: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "incompatible checkpoint: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
