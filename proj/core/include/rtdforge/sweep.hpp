#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rtdforge/config.hpp"
#include "rtdforge/pretrain.hpp"

namespace rtdforge {

inline const std::vector<double> kDefaultGeneratorMultipliers = {0.125, 0.25, 0.5, 0.75, 1.0};

struct SweepSpec {
  std::vector<double> multipliers = kDefaultGeneratorMultipliers;
  ModelConfig model;
  PretrainConfig pretrain;
  std::uint64_t steps = 0;       // per-run budget; 0 keeps pretrain.total_steps
  bool halt_on_collapse = true;
  std::filesystem::path corpus;  // may be empty for runners that need no data
  std::filesystem::path vocab;
  bool vocab_size_set = false;   // false: taken from the vocabulary

  void validate() const;
};

/// Spec file keys: multipliers, steps, halt_on_collapse, base_config, corpus,
/// vocab. Relative paths resolve against `base_dir`.
SweepSpec parse_sweep_spec(const KvConfig& kv, const std::filesystem::path& base_dir);

struct SweepRunPlan {
  std::size_t index = 0;
  double multiplier = 0.0;
  ModelConfig model;
  PretrainConfig pretrain;
  std::filesystem::path out_dir;  // empty: no files
};

/// One planned run per multiplier, sharing the discriminator config and the
/// seed, each with its own output directory.
std::vector<SweepRunPlan> plan_sweep(const SweepSpec& spec, const std::filesystem::path& out_dir);

using SweepRunner = std::function<PretrainResult(const SweepRunPlan& plan)>;

/// Real pretraining on a shared tokenized corpus.
SweepRunner pretraining_runner(std::vector<std::vector<TokenId>> documents, Vocab vocab);

/// Feeds `auc(multiplier, step)` for steps 1..total_steps through a collapse
/// monitor with the plan's window, threshold and halting; no training.
SweepRunner scripted_runner(std::function<double(double multiplier, std::uint64_t step)> auc);

struct SweepRunRecord {
  double multiplier = 0.0;
  std::filesystem::path out_dir;
  RunStatus status = RunStatus::kFailed;
  std::uint64_t steps_completed = 0;
  std::optional<std::uint64_t> collapsed_at;
  double final_disc_auc = 0.0;
  double final_window_auc = 0.0;
  double gen_masked_accuracy = 0.0;
  std::string error;
  std::map<std::string, double> downstream;  // completed runs only
};

/// Called for each completed run; returns downstream metrics.
using DownstreamEval =
    std::function<std::map<std::string, double>(const SweepRunPlan&, const PretrainResult&)>;

struct SweepOptions {
  std::size_t parallelism = 1;
  DownstreamEval downstream;
  std::ostream* progress = nullptr;
};

/// Runs every plan. A failing run is recorded and the sweep continues. When a
/// plan has an output directory its manifest is written there.
std::vector<SweepRunRecord> run_sweep(const std::vector<SweepRunPlan>& plans, const SweepRunner& runner,
                                      const SweepOptions& options = {});

std::string render_sweep_text(const std::vector<SweepRunRecord>& records);
std::string render_sweep_json(const std::vector<SweepRunRecord>& records);

struct SweepArgs {
  std::filesystem::path spec;
  std::filesystem::path out;
  std::size_t parallelism = 1;
  std::optional<std::filesystem::path> finetune_task;  // directory with train.tsv, dev.tsv
  std::optional<std::filesystem::path> descriptor;
  std::optional<std::filesystem::path> finetune_config;
  std::vector<std::uint64_t> finetune_seeds = {0};
};

/// sweep-generator command: writes out/summary.txt, out/summary.json, a
/// manifest, and one directory per multiplier.
int cmd_sweep_generator(const SweepArgs& args, std::ostream& out);

}  // namespace rtdforge
