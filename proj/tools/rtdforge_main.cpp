// rtdforge: tokenizer training, RTD pretraining, fine-tuning and reporting.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rtdforge/error.hpp"
#include "rtdforge/harness.hpp"
#include "rtdforge/sweep.hpp"

int main(int argc, char** argv) {
  using namespace rtdforge;
  CLI::App app{"Replaced-token-detection pretraining and GLUE-style evaluation"};
  app.require_subcommand(1);

  TrainTokenizerArgs tok;
  auto* tok_cmd = app.add_subcommand("train-tokenizer", "Train a byte-level BPE vocabulary");
  tok_cmd->add_option("--corpus", tok.corpus, "Corpus, documents separated by blank lines")->required();
  tok_cmd->add_option("--vocab-size", tok.vocab_size, "Target vocabulary size")->required();
  tok_cmd->add_option("--out", tok.out, "Output vocabulary file")->required();

  PretrainArgs pre;
  std::string resume;
  auto* pre_cmd = app.add_subcommand("pretrain", "Run replaced-token-detection pretraining");
  pre_cmd->add_option("--config", pre.config, "Model and pretraining config")->required();
  pre_cmd->add_option("--corpus", pre.corpus, "Training corpus")->required();
  pre_cmd->add_option("--vocab", pre.vocab, "Vocabulary file")->required();
  pre_cmd->add_option("--out", pre.out, "Run directory")->required();
  pre_cmd->add_option("--resume", resume, "Checkpoint to resume from");
  pre_cmd->add_flag("--quiet", pre.quiet, "Do not echo metric lines");

  FinetuneArgs ft;
  std::string seeds = "0";
  std::string ft_config;
  auto* ft_cmd = app.add_subcommand("finetune", "Fine-tune a pretrained discriminator on one task");
  ft_cmd->add_option("--task", ft.task, "Directory with train.tsv and dev.tsv")->required();
  ft_cmd->add_option("--descriptor", ft.descriptor, "Task descriptor")->required();
  ft_cmd->add_option("--checkpoint", ft.checkpoint, "Pretraining checkpoint")->required();
  ft_cmd->add_option("--seeds", seeds, "Comma-separated seeds");
  ft_cmd->add_option("--config", ft_config, "Fine-tuning config");
  ft_cmd->add_option("--out", ft.out, "Output directory")->required();
  ft_cmd->add_option("--model", ft.model_name, "Model name for result records");
  ft_cmd->add_flag("--random-init", ft.random_init, "Ignore the checkpoint weights");

  GlueReportArgs rep;
  std::vector<std::string> modes;
  std::string rep_out;
  auto* rep_cmd = app.add_subcommand("glue-report", "Aggregate result records into a report");
  rep_cmd->add_option("--results", rep.results, "Result files or directories")->required();
  rep_cmd->add_option("--mode", modes, "avg, avg-tasks or glue (repeatable)");
  rep_cmd->add_option("--out", rep_out, "Report file (.json for JSON)");

  SweepArgs sw;
  std::string sw_task, sw_descriptor, sw_ft_config, sw_seeds = "0";
  auto* sw_cmd = app.add_subcommand("sweep-generator", "Pretrain once per generator size");
  sw_cmd->add_option("--spec", sw.spec, "Sweep spec")->required();
  sw_cmd->add_option("--out", sw.out, "Sweep directory")->required();
  sw_cmd->add_option("--parallel", sw.parallelism, "Concurrent runs")->check(CLI::PositiveNumber);
  sw_cmd->add_option("--finetune-task", sw_task, "Downstream task directory for completed runs");
  sw_cmd->add_option("--descriptor", sw_descriptor, "Downstream task descriptor");
  sw_cmd->add_option("--finetune-config", sw_ft_config, "Downstream fine-tuning config");
  sw_cmd->add_option("--finetune-seeds", sw_seeds, "Downstream seeds");

  EstimateComputeArgs est;
  double score = 0.0;
  auto* est_cmd = app.add_subcommand("estimate-compute", "Estimate pretraining compute in pfs-days");
  est_cmd->add_option("--tflops", est.tflops, "Peak TFLOPS per device")->required();
  est_cmd->add_option("--devices", est.devices, "Device count")->required();
  est_cmd->add_option("--utilization", est.utilization, "Sustained fraction of peak");
  est_cmd->add_option("--days", est.days, "Wall-clock days")->required();
  auto* score_opt = est_cmd->add_option("--score", score, "Benchmark score for pfs-days per point");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitSuccess : kExitConfigError;
  }

  return run_command(
      [&]() -> int {
        apply_thread_cap();
        if (*tok_cmd) {
          return cmd_train_tokenizer(tok, std::cout);
        }
        if (*pre_cmd) {
          if (!resume.empty()) pre.resume = resume;
          return cmd_pretrain(pre, std::cout);
        }
        if (*ft_cmd) {
          ft.seeds = parse_seed_list(seeds);
          if (!ft_config.empty()) ft.config = ft_config;
          return cmd_finetune(ft, std::cout);
        }
        if (*rep_cmd) {
          for (const std::string& m : modes) {
            try {
              rep.modes.push_back(parse_aggregation_mode(m));
            } catch (const std::exception& e) {
              throw ConfigError(e.what(), "mode");
            }
          }
          if (!rep_out.empty()) rep.out = rep_out;
          return cmd_glue_report(rep, std::cout);
        }
        if (*sw_cmd) {
          if (!sw_task.empty()) sw.finetune_task = sw_task;
          if (!sw_descriptor.empty()) sw.descriptor = sw_descriptor;
          if (!sw_ft_config.empty()) sw.finetune_config = sw_ft_config;
          sw.finetune_seeds = parse_seed_list(sw_seeds);
          return cmd_sweep_generator(sw, std::cout);
        }
        if (*score_opt) est.score = score;
        return cmd_estimate_compute(est, std::cout);
      },
      std::cerr);
}
