#include "moby/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

namespace moby {

namespace fs = std::filesystem;

namespace {

BackboneConfig training_backbone(const ExperimentConfig& config) {
  BackboneConfig b = config.backbone;
  b.drop_path_rate = config.moby.online_drop_path;
  return b;
}

// Rewrites a CSV keeping the header and rows whose leading step is below `step`.
void truncate_csv(const fs::path& path, const std::string& header, Index step) {
  std::vector<std::string> kept;
  if (std::ifstream in(path); in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto comma = line.find(',');
      if (comma != std::string::npos && std::stoll(line.substr(0, comma)) < step) kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  out << header << '\n';
  for (const auto& l : kept) out << l << '\n';
}

std::string checkpoint_name(Index step) {
  std::ostringstream s;
  s << "ckpt_" << std::setw(7) << std::setfill('0') << step << ".mbck";
  return s.str();
}

template <typename Scalar>
PretrainResult pretrain(const ExperimentConfig& config, const std::optional<std::string>& resume, std::ostream* log) {
  const fs::path dir = config.output_dir;
  fs::create_directories(dir);
  save_config((dir / "config.cfg").string(), config);
  const std::string config_text = write_config(config);

  const DatasetSplit data = load_dataset(config.dataset());
  const auto train_size = static_cast<Index>(data.train.records.size());
  const MobyConfig moby = config.effective_moby(train_size);
  TrainingState<Scalar> state(training_backbone(config), moby, config.optim, config.seed);
  if (resume) {
    const Checkpoint ckpt = read_checkpoint(*resume);
    if (ckpt.seed != config.seed) {
      throw ConfigError("checkpoint was trained with seed " + std::to_string(ckpt.seed) + " but the config says " +
                        std::to_string(config.seed));
    }
    restore(state, ckpt);
  }

  AugmentationPolicy view1 = AugmentationPolicy::view1(), view2 = AugmentationPolicy::view2();
  view1.scale_min = view2.scale_min = config.crop_scale_min;
  PairLoader loader(data.train, view1, view2, config.batch_size, config.seed);
  if (loader.batches_per_epoch() == 0) throw ConfigError("train.batch_size exceeds the training set size");
  const Index total = config.epochs * loader.batches_per_epoch();
  const MomentumSchedule schedule{moby.momentum_start, std::max<Index>(total, 1)};
  if (log) {
    *log << "pretrain: " << train_size << " images, " << loader.batches_per_epoch() << " steps/epoch, " << total
         << " steps, queue " << moby.queue_size << ", " << to_string(config.precision) << ", from step " << state.step
         << '\n';
  }

  const fs::path metrics_path = dir / "metrics.csv", timing_path = dir / "timing.csv";
  truncate_csv(metrics_path, "step,loss,momentum,queue_fill,lr", resume ? state.step : 0);
  truncate_csv(timing_path, "step,wall_ms", resume ? state.step : 0);
  std::ofstream metrics_out(metrics_path, std::ios::app), timing_out(timing_path, std::ios::app);
  metrics_out << std::setprecision(17);

  PretrainResult result;
  Prefetcher<Scalar> batches(loader, state.step, total);
  auto last = std::chrono::steady_clock::now();
  double window_ms = 0;
  while (auto batch = batches.next()) {
    const StepMetrics m = training_step(batch->view1, batch->view2, state, moby, schedule, config.seed);
    const auto now = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(now - last).count();
    last = now;
    window_ms += ms;
    metrics_out << m.step << ',' << m.loss << ',' << m.momentum << ',' << m.queue_fill << ',' << m.lr << '\n';
    timing_out << m.step << ',' << std::fixed << std::setprecision(3) << ms << std::defaultfloat << '\n';
    result.metrics.push_back(m);
    if (log && config.log_every > 0 && state.step % config.log_every == 0) {
      *log << "step " << state.step << '/' << total << "  loss " << std::fixed << std::setprecision(4) << m.loss
           << "  m " << std::setprecision(5) << m.momentum << "  fill " << m.queue_fill << "  "
           << std::setprecision(1) << window_ms / static_cast<double>(config.log_every) << " ms/step\n"
           << std::defaultfloat;
      window_ms = 0;
    }
    if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0) {
      metrics_out.flush();
      write_checkpoint((dir / checkpoint_name(state.step)).string(), snapshot(state, config.seed, config_text));
    }
  }
  result.steps = state.step;
  result.final_checkpoint = (dir / "final.mbck").string();
  write_checkpoint(result.final_checkpoint, snapshot(state, config.seed, config_text));
  return result;
}

template <typename Scalar>
EvalReport evaluate_run(const ExperimentConfig& config, const std::optional<std::string>& checkpoint, std::ostream* log) {
  const fs::path dir = config.output_dir;
  fs::create_directories(dir);
  const DatasetSplit data = load_dataset(config.dataset());
  // Same stream as the online encoder's initialization, so an untrained
  // backbone here equals the step-0 online backbone.
  Rng init = Rng::derive(config.seed, {tag(Stream::kInit)});
  auto backbone = make_backbone<Scalar>(training_backbone(config), init);
  if (checkpoint) restore_backbone(*backbone, read_checkpoint(*checkpoint));
  ProbeConfig probe = config.probe;
  probe.seed = config.seed;
  const EvalReport report = evaluate(*backbone, data, probe);
  {
    std::ofstream csv(dir / "eval.csv");
    write_report_csv(csv, report);
    std::ofstream summary(dir / "eval_summary.txt");
    summary << report_summary(report);
  }
  if (log) *log << report_summary(report);
  return report;
}

struct Reference {
  const char* value;
  double top1;
};

const std::map<SweepAxis, std::vector<Reference>>& references() {
  static const std::map<SweepAxis, std::vector<Reference>> table{
      {SweepAxis::kQueueSize, {{"1024", 71.0}, {"2048", 70.8}, {"4096", 70.9}, {"8192", 71.0}, {"16384", 70.8}}},
      {SweepAxis::kTau, {{"0.07", 62.7}, {"0.1", 67.7}, {"0.2", 70.9}, {"0.3", 70.8}}},
      {SweepAxis::kMomentumStart, {{"0.99", 70.9}, {"0.993", 70.7}, {"0.996", 70.5}, {"0.999", 67.6}}},
      {SweepAxis::kDropPath, {{"0.05/0.0", 70.9}, {"0.1/0.0", 70.9}, {"0.2/0.0", 70.9}, {"0.1/0.1", 69.0}}},
      {SweepAxis::kNormBeforeMlp, {{"layer_norm", 70.9}, {"batch_norm", 72.0}}},
  };
  return table;
}

// Numeric components of a sweep value ("0.1/0.0" -> {0.1, 0.0}); empty if not numeric.
std::vector<double> numbers_of(const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string part;
  while (std::getline(ss, part, '/')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(part, &used));
      if (used != part.size()) return {};
    } catch (const std::exception&) {
      return {};
    }
  }
  return out;
}

bool same_value(const std::string& a, const std::string& b) {
  if (a == b) return true;
  const auto x = numbers_of(a), y = numbers_of(b);
  if (x.empty() || x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(x[i] - y[i]) > 1e-12) return false;
  }
  return true;
}

std::string cell_dir_name(SweepAxis axis, const std::string& value, std::uint64_t seed) {
  std::string v = value;
  for (char& c : v) {
    if (c == '/') c = '-';
  }
  return to_string(axis) + "_" + v + "_seed" + std::to_string(seed);
}

}  // namespace

PretrainResult run_pretrain(const ExperimentConfig& config, const std::optional<std::string>& resume, std::ostream* log) {
  config.validate();
  return config.precision == Precision::kF32 ? pretrain<float>(config, resume, log) : pretrain<double>(config, resume, log);
}

EvalReport run_eval(const ExperimentConfig& config, const std::optional<std::string>& checkpoint, std::ostream* log) {
  config.validate();
  return config.precision == Precision::kF32 ? evaluate_run<float>(config, checkpoint, log)
                                             : evaluate_run<double>(config, checkpoint, log);
}

SweepAxis parse_sweep_axis(const std::string& text) {
  if (text == "queue_size" || text == "K") return SweepAxis::kQueueSize;
  if (text == "tau") return SweepAxis::kTau;
  if (text == "momentum_start" || text == "m0") return SweepAxis::kMomentumStart;
  if (text == "drop_path") return SweepAxis::kDropPath;
  if (text == "norm_before_mlp") return SweepAxis::kNormBeforeMlp;
  throw ConfigError("unknown sweep axis '" + text + "' (queue_size, tau, momentum_start, drop_path, norm_before_mlp)");
}

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kQueueSize: return "queue_size";
    case SweepAxis::kTau: return "tau";
    case SweepAxis::kMomentumStart: return "momentum_start";
    case SweepAxis::kDropPath: return "drop_path";
    case SweepAxis::kNormBeforeMlp: return "norm_before_mlp";
  }
  return "?";
}

std::vector<std::string> published_sweep_values(SweepAxis axis) {
  std::vector<std::string> out;
  for (const auto& r : references().at(axis)) out.emplace_back(r.value);
  return out;
}

std::optional<double> published_reference(SweepAxis axis, const std::string& value) {
  for (const auto& r : references().at(axis)) {
    if (same_value(r.value, value)) return r.top1;
  }
  return std::nullopt;
}

ExperimentConfig apply_sweep_value(const ExperimentConfig& base, SweepAxis axis, const std::string& value) {
  ExperimentConfig c = base;
  switch (axis) {
    case SweepAxis::kQueueSize: set_config_value(c, "moby.queue_size", value); break;
    case SweepAxis::kTau: set_config_value(c, "moby.tau", value); break;
    case SweepAxis::kMomentumStart: set_config_value(c, "moby.momentum_start", value); break;
    case SweepAxis::kNormBeforeMlp: set_config_value(c, "backbone.norm_before_mlp", value); break;
    case SweepAxis::kDropPath: {
      const auto slash = value.find('/');
      if (slash == std::string::npos) throw ConfigError("drop_path sweep values read online/target, got '" + value + "'");
      set_config_value(c, "moby.online_drop_path", value.substr(0, slash));
      set_config_value(c, "moby.target_drop_path", value.substr(slash + 1));
      break;
    }
  }
  return c;
}

SweepReport run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::string>& values,
                      const std::vector<std::uint64_t>& seeds, std::ostream* log) {
  if (values.empty() || seeds.empty()) throw ConfigError("a sweep needs at least one value and one seed");
  SweepReport report;
  report.axis = axis;
  const fs::path root = base.output_dir;
  fs::create_directories(root);
  for (const auto& value : values) {
    for (std::uint64_t seed : seeds) {
      SweepCell cell;
      cell.value = value;
      cell.seed = seed;
      cell.published = published_reference(axis, value);
      cell.output_dir = (root / cell_dir_name(axis, value, seed)).string();
      if (log) *log << "== " << to_string(axis) << " = " << value << ", seed " << seed << '\n';
      try {
        ExperimentConfig config = apply_sweep_value(base, axis, value);
        config.seed = seed;
        config.output_dir = cell.output_dir;
        const PretrainResult trained = run_pretrain(config, std::nullopt, log);
        cell.report = run_eval(config, trained.final_checkpoint, log);
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
        if (log) *log << "cell failed: " << cell.error << '\n';
      }
      report.cells.push_back(std::move(cell));
      std::ofstream csv(root / "sweep.csv");
      write_sweep_csv(csv, report);
    }
  }
  std::ofstream table(root / "sweep.txt");
  table << format_sweep_table(report);
  return report;
}

void write_sweep_csv(std::ostream& out, const SweepReport& report) {
  out << "axis,value,seed,status,best_lr,top1,knn_top1,published_top1,error\n";
  for (const auto& c : report.cells) {
    std::string error = c.error;
    for (char& ch : error) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    std::ostringstream row;
    row << std::setprecision(17) << to_string(report.axis) << ',' << c.value << ',' << c.seed << ','
        << (c.ok ? "ok" : "failed") << ',';
    if (c.ok) {
      row << c.report.best_lr << ',' << c.report.best_top1 << ',' << c.report.knn_top1;
    } else {
      row << ",,";
    }
    row << ',';
    if (c.published) row << *c.published;
    out << row.str();
    out << ',' << error << '\n';
  }
}

std::string format_sweep_table(const SweepReport& report) {
  std::ostringstream s;
  s << std::left << std::setw(16) << to_string(report.axis) << std::right << std::setw(8) << "runs" << std::setw(16)
    << "probe top-1" << std::setw(16) << "k-NN top-1" << std::setw(17) << "published top-1" << '\n';
  std::vector<std::string> order;
  for (const auto& c : report.cells) {
    if (std::find(order.begin(), order.end(), c.value) == order.end()) order.push_back(c.value);
  }
  for (const auto& value : order) {
    std::vector<double> top1, knn;
    std::size_t runs = 0;
    std::optional<double> published;
    for (const auto& c : report.cells) {
      if (c.value != value) continue;
      ++runs;
      published = c.published;
      if (c.ok) {
        top1.push_back(100 * c.report.best_top1);
        knn.push_back(100 * c.report.knn_top1);
      }
    }
    auto stat = [](const std::vector<double>& v) {
      if (v.empty()) return std::string("failed");
      double mean = 0, var = 0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      for (double x : v) var += (x - mean) * (x - mean);
      std::ostringstream o;
      o << std::fixed << std::setprecision(1) << mean;
      if (v.size() > 1) o << " +- " << std::sqrt(var / static_cast<double>(v.size() - 1));
      return o.str();
    };
    std::ostringstream ok;
    ok << top1.size() << '/' << runs;
    std::ostringstream ref;
    if (published) ref << std::fixed << std::setprecision(1) << *published;
    s << std::left << std::setw(16) << value << std::right << std::setw(8) << ok.str() << std::setw(16) << stat(top1)
      << std::setw(16) << stat(knn) << std::setw(17) << (published ? ref.str() : "-") << '\n';
  }
  s << "published values: ImageNet-1K linear top-1, 100-epoch Swin-T; context only\n";
  for (const auto& c : report.cells) {
    if (!c.ok) s << "failed " << c.value << " seed " << c.seed << ": " << c.error << '\n';
  }
  return s.str();
}

}  // namespace moby
