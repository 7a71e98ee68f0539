#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "rtdforge/checkpoint.hpp"
#include "rtdforge/finetune.hpp"
#include "rtdforge/glue.hpp"
#include "rtdforge/pretrain.hpp"

namespace rtdforge {

enum ExitCode : int {
  kExitSuccess = 0,
  kExitFailure = 1,
  kExitConfigError = 2,
  kExitDataError = 3,
  kExitCollapseHalt = 4,
};

/// Exit code for an exception caught at a command boundary.
int exit_code_for(const std::exception& error);

/// Caps BLAS worker threads from RTDFORGE_THREADS. Returns the cap applied,
/// or nullopt when the variable is unset.
std::optional<int> apply_thread_cap();

/// UTC, second resolution, e.g. 2024-05-01T12:00:00Z.
std::string utc_timestamp();

struct RunManifest {
  std::string command;
  std::string config_digest;
  std::vector<std::uint64_t> seeds;
  std::string started_at;
  std::string finished_at;
  RunStatus status = RunStatus::kFailed;
  std::map<std::string, std::string> artifacts;  // role -> path
  std::string error;                             // set when failed

  std::string to_json() const;
  static RunManifest from_json(std::string_view text);
};

/// Writes dir/manifest.json, replacing any earlier manifest.
void write_manifest(const RunManifest& manifest, const std::filesystem::path& dir);
RunManifest read_manifest(const std::filesystem::path& dir);

struct TrainTokenizerArgs {
  std::filesystem::path corpus;
  std::size_t vocab_size = 0;
  std::filesystem::path out;
};

struct PretrainArgs {
  std::filesystem::path config;
  std::filesystem::path corpus;
  std::filesystem::path vocab;
  std::filesystem::path out;
  std::optional<std::filesystem::path> resume;
  bool quiet = false;  // no per-step lines on the output stream
};

struct FinetuneArgs {
  std::filesystem::path task;        // directory holding train.tsv and dev.tsv
  std::filesystem::path descriptor;
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> config;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path out;
  std::string model_name;            // empty: checkpoint file stem
  bool random_init = false;          // checkpoint config and vocab, fresh weights
};

struct GlueReportArgs {
  std::vector<std::filesystem::path> results;
  std::vector<AggregationMode> modes;
  std::optional<std::filesystem::path> out;  // *.json renders JSON, anything else text
};

struct EstimateComputeArgs {
  double tflops = 0.0;
  double devices = 0.0;
  double utilization = 0.33;
  double days = 0.0;
  std::optional<double> score;
};

/// "a,b,c" -> {a, b, c}. ConfigError on anything but non-negative integers.
std::vector<std::uint64_t> parse_seed_list(std::string_view text);

/// Fine-tunes the checkpoint's discriminator (or, with `random_init`, a fresh
/// encoder of the same config) on task_dir/train.tsv and scores
/// task_dir/dev.tsv, once per seed.
TaskResult finetune_from_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& task_dir,
                                    const TaskDescriptor& task, const FinetuneConfig& config,
                                    const std::vector<std::uint64_t>& seeds, bool random_init);

// Each command prints its summary to `out` and returns an exit code.
// Errors propagate as exceptions; `run_command` maps them to exit codes.
int cmd_train_tokenizer(const TrainTokenizerArgs& args, std::ostream& out);
int cmd_pretrain(const PretrainArgs& args, std::ostream& out);
int cmd_finetune(const FinetuneArgs& args, std::ostream& out);
int cmd_glue_report(const GlueReportArgs& args, std::ostream& out);
int cmd_estimate_compute(const EstimateComputeArgs& args, std::ostream& out);

/// Runs `body`, printing any error to `err` and returning its exit code.
template <typename F>
int run_command(F&& body, std::ostream& err) {
  try {
    return body();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

}  // namespace rtdforge
