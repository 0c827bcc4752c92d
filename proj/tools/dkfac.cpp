// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

// dkfac: train, compare and inspect-fim entry points.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dkfac/runner.hpp"

namespace fs = std::filesystem;
using namespace dkfac;

namespace {

enum Exit : int {
  kOk = 0,
  kConfig = 1,
  kDivergence = 2,
  kIo = 3,
  kUnreachable = 4,
};

struct CommonArgs {
  std::string config;
  std::string preset;
  std::vector<std::string> sets;
  std::string out = ".";
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "flat key = value run configuration");
  cmd->add_option("--preset", a.preset, "large-batch preset")
      ->check(CLI::IsMember(preset_names()));
  cmd->add_option("--set", a.sets, "override, key=value (repeatable)")->allow_extra_args(false);
  cmd->add_option("--out", a.out, "output directory");
}

RunConfig resolve(const CommonArgs& a) {
  return resolve_config(a.preset.empty() ? std::nullopt : std::optional<std::string>(a.preset),
                        a.config.empty() ? std::nullopt : std::optional<fs::path>(a.config),
                        a.sets, std::getenv("KFAC_SEED"));
}

RunConfig resolve_on(RunConfig base, const CommonArgs& a) {
  std::vector<std::string> problems;
  for (const auto& s : a.sets)
    apply_override(base, s, problems);
  if (const char* env = std::getenv("KFAC_SEED"); env && *env) {
    const auto err = set_key(base, "seed", env);
    if (!err.empty())
      problems.push_back("KFAC_SEED: " + err);
  }
  for (auto& p : validate(base))
    problems.push_back(std::move(p));
  if (!problems.empty())
    throw ConfigError(std::move(problems));
  return base;
}

std::string threshold_text(const std::optional<std::int64_t>& it) {
  return it ? std::to_string(*it) : "not reached";
}

int cmd_train(const CommonArgs& a, const std::string& resume) {
  RunConfig cfg;
  if (!resume.empty()) {
    if (!fs::exists(resume))
      throw IoError("checkpoint " + resume + " does not exist");
    cfg = (a.config.empty() && a.preset.empty()) ? resolve_on(checkpoint_config(resume), a) : resolve(a);
  } else {
    cfg = resolve(a);
  }
  Trainer trainer(cfg);
  if (!resume.empty())
    trainer.load_checkpoint(resume);
  TrainOptions opts;
  opts.out_dir = fs::path(a.out);
  const auto r = trainer.run(opts);
  std::cout << "iterations " << trainer.iteration() << " (" << r.iterations_per_epoch
            << " per epoch)\n"
            << "final train_loss " << format_real(r.final_loss) << "\n"
            << "final train_acc " << format_real(r.final_train_acc) << "\n";
  if (r.final_val_acc)
    std::cout << "final val_acc " << format_real(*r.final_val_acc) << "\n";
  std::cout << "outputs in " << fs::path(a.out).string() << "\n";
  return kOk;
}

int cmd_compare(const CommonArgs& a) {
  RunConfig base = resolve(a);
  if (base.threshold > 1.0) {
    std::cout << "threshold " << format_real(base.threshold)
              << " unreachable: train accuracy cannot exceed 1\n";
    return kUnreachable;
  }
  const fs::path out(a.out);
  fs::create_directories(out);
  struct Run {
    std::string name;
    TrainResult result;
  };
  std::vector<Run> runs;
  for (const std::string opt : {"kfac", "sgd"}) {
    RunConfig cfg = base;
    cfg.optimizer = opt;
    Trainer trainer(cfg);
    TrainOptions opts;
    opts.out_dir = out;
    opts.stop_at_threshold = true;
    opts.metrics_name = "metrics_" + opt + ".csv";
    opts.write_checkpoint = false;
    runs.push_back({opt, trainer.run(opts)});
  }
  std::ofstream csv(out / "compare.csv");
  csv << "optimizer,iterations_to_threshold,iterations_run,final_train_acc,final_val_acc\n";
  std::cout << "threshold " << format_real(base.threshold) << " (train accuracy)\n";
  for (const auto& r : runs) {
    csv << r.name << ',' << (r.result.iterations_to_threshold ? std::to_string(*r.result.iterations_to_threshold) : "")
        << ',' << r.result.iterations << ',' << format_real(r.result.final_train_acc) << ','
        << (r.result.final_val_acc ? format_real(*r.result.final_val_acc) : "") << '\n';
    std::cout << std::left << std::setw(6) << r.name << " iterations to threshold: "
              << threshold_text(r.result.iterations_to_threshold)
              << "  final train_acc " << format_real(r.result.final_train_acc) << "\n";
  }
  if (!csv)
    throw IoError("cannot write " + (out / "compare.csv").string());
  return kOk;
}

int cmd_inspect(const CommonArgs& a, const std::string& checkpoint_arg) {
  const fs::path out(a.out);
  const fs::path checkpoint = checkpoint_arg.empty() ? out / "checkpoint.json" : fs::path(checkpoint_arg);
  if (!fs::exists(checkpoint))
    throw IoError("checkpoint " + checkpoint.string() + " does not exist");
  const RunConfig cfg = (a.config.empty() && a.preset.empty())
                            ? resolve_on(checkpoint_config(checkpoint), a)
                            : resolve(a);
  const Dataset train = load_datasets(cfg).first;
  const auto specs = parse_layers(cfg.layers, train.sample_shape(), train.class_count);
  const auto report = fim_memory_report(specs, cfg.bytes_per_real);
  const auto history = checkpoint_diff_history(checkpoint);

  fs::create_directories(out);
  std::ofstream fim(out / "fim_memory.csv");
  write_fim_memory_csv(fim, report);
  std::ofstream diff(out / "diff_history.csv");
  write_diff_history_csv(diff, history);
  if (!fim || !diff)
    throw IoError("cannot write reports in " + out.string());

  std::cout << "FIM bytes, full BN blocks:     " << report.total_full << "\n"
            << "FIM bytes, diagonal BN blocks: " << report.total_diagonal << "\n";
  for (std::size_t i = 0; i < report.full.size(); ++i) {
    const auto& f = report.full[i];
    if (f.kind != LayerKind::batch_norm)
      continue;
    const auto& d = report.diagonal[i];
    std::cout << "  bn layer " << f.layer_index << ": " << f.f_bn_bytes << " -> " << d.f_bn_bytes
              << " bytes\n";
  }
  std::cout << "diff history rows: " << history.size() << "\n";
  return kOk;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed K-FAC training on simulated workers"};
  app.require_subcommand(1);

  CommonArgs train_args, compare_args, inspect_args;
  std::string resume, checkpoint;

  auto* train = app.add_subcommand("train", "train one optimizer and write metrics");
  add_common(train, train_args);
  train->add_option("--resume", resume, "continue from a checkpoint");

  auto* compare = app.add_subcommand("compare", "K-FAC vs SGD iterations to a train-accuracy threshold");
  add_common(compare, compare_args);

  auto* inspect = app.add_subcommand("inspect-fim", "FIM memory and Diff percentile report");
  add_common(inspect, inspect_args);
  inspect->add_option("--checkpoint", checkpoint, "checkpoint (default OUT/checkpoint.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*train)
      return cmd_train(train_args, resume);
    if (*compare)
      return cmd_compare(compare_args);
    return cmd_inspect(inspect_args, checkpoint);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const StageError& e) {
    std::cerr << "iteration failed: " << e.what() << "\n";
    return kDivergence;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
}
