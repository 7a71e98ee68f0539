#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rtdforge/checkpoint.hpp"
#include "rtdforge/data.hpp"
#include "rtdforge/model.hpp"
#include "rtdforge/optim.hpp"
#include "rtdforge/tokenizer.hpp"

namespace rtdforge {

struct PretrainConfig {
  double learning_rate = 5e-4;
  std::uint64_t warmup_steps = 10000;
  std::uint64_t total_steps = 1'000'000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.9999;
  double adam_epsilon = 1e-6;
  double weight_decay = 0.01;
  std::size_t batch_size = 128;
  std::size_t gradient_accumulation_steps = 1;
  std::size_t max_seq_len = 128;
  double mask_percent = 0.15;
  double disc_loss_weight = 50.0;
  std::uint64_t seed = 0;
  std::size_t collapse_window = 500;
  double collapse_threshold = 0.55;
  bool halt_on_collapse = false;
  std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t log_every = 1;

  void validate() const;
  AdamWHyper adam() const { return {adam_beta1, adam_beta2, adam_epsilon, weight_decay}; }
  std::size_t micro_batch_size() const { return batch_size / gradient_accumulation_steps; }
};

struct PretrainBatchOutcome {
  double gen_loss = 0.0;
  double disc_loss = 0.0;
  double combined_loss = 0.0;  // gen_loss + lambda * disc_loss
  double gen_masked_accuracy = 0.0;
  double disc_auc = 0.5;
  double replaced_fraction = 0.0;
  double learning_rate = 0.0;
};

/// Rolling-window mean test on the discriminator AUC. Trips once, at the
/// first step whose full window mean falls below the threshold.
class CollapseMonitor {
 public:
  CollapseMonitor(std::size_t window, double threshold);

  /// Feeds the AUC of 1-based optimizer step `step`. Returns true on the
  /// step that trips the monitor.
  bool observe(std::uint64_t step, double auc);

  std::optional<std::uint64_t> tripped_at() const noexcept { return tripped_at_; }
  bool full() const noexcept { return history_.size() == window_; }
  double window_mean() const;
  std::size_t window() const noexcept { return window_; }
  double threshold() const noexcept { return threshold_; }

  std::string save() const;
  void load(const std::string& text);

 private:
  std::size_t window_;
  double threshold_;
  std::deque<double> history_;
  double sum_ = 0.0;
  std::optional<std::uint64_t> tripped_at_;
};

/// Discriminator input and per-position labels after sampling.
struct Replacement {
  Batch disc_input;
  std::vector<std::int32_t> labels;  // B * L, 1 where the token was replaced
  std::vector<TokenId> sampled;      // one per masked slot, flat order
  std::size_t replaced = 0;
};

/// Draws one token per masked position from softmax(logits) and writes it
/// into a copy of the original sequence. `gen_logits` is either [B, L, V] or
/// [N, V] rows in MaskedBatch::flat_positions order. No gradient flows.
template <typename T>
Replacement sample_replacements(const Tensor<T>& gen_logits, const MaskedBatch& masked, Rng& rng);

/// Loss tensors of one micro-batch.
template <typename T>
struct RtdForward {
  Tensor<T> gen_loss;
  Tensor<T> disc_loss;
  Tensor<T> objective;  // gen_weight * gen_loss + lambda * disc_weight * disc_loss
  Tensor<T> gen_logits;   // [N, V]
  Tensor<T> disc_logits;  // [B, L]
  Replacement replacement;
  std::size_t gen_correct = 0;
};

/// Generator forward, sampling, discriminator forward and both losses. A
/// non-null `fixed` replacement skips sampling (used by gradient checks).
template <typename T>
RtdForward<T> rtd_forward(ElectraModel<T>& model, const MaskedBatch& masked, double lambda,
                          Rng& sample_rng, bool training, double gen_weight = 1.0,
                          double disc_weight = 1.0, const Replacement* fixed = nullptr);

/// One optimizer step over `micro_batches` (gradient accumulation). Each
/// micro-batch loss is weighted by its share of loss positions so the result
/// equals the mean over the whole batch. Uses lr_at(step).
template <typename T>
PretrainBatchOutcome pretrain_step(ElectraModel<T>& model, AdamW<T>& optimizer,
                                   const PretrainConfig& config,
                                   std::span<const MaskedBatch> micro_batches, std::uint64_t step,
                                   Rng& sample_rng);

/// Checkpoint of model weights (shared tables once, with aliases).
template <typename T>
Checkpoint model_checkpoint(const ElectraModel<T>& model);

/// Restores weights. With `include_generator` false, generator tensors and
/// the RTD head may be absent and are left untouched.
template <typename T>
void load_model_weights(ElectraModel<T>& model, const Checkpoint& checkpoint, bool include_generator);

std::string format_metric_line(std::uint64_t step, const PretrainBatchOutcome& outcome);

enum class RunStatus { kCompleted, kCollapsed, kFailed };
std::string to_string(RunStatus status);

/// Owns every piece of mutable training state so that save/restore resumes
/// bit-identically.
class PretrainTrainer {
 public:
  PretrainTrainer(std::vector<std::vector<TokenId>> documents, Vocab vocab, ModelConfig model_config,
                  PretrainConfig config);

  /// Runs one optimizer step and feeds the collapse monitor.
  PretrainBatchOutcome step();

  std::uint64_t steps_done() const noexcept { return steps_done_; }
  const PretrainConfig& config() const noexcept { return config_; }
  const Vocab& vocab() const noexcept { return vocab_; }
  ElectraModel<float>& model() noexcept { return model_; }
  const ElectraModel<float>& model() const noexcept { return model_; }
  const CollapseMonitor& monitor() const noexcept { return monitor_; }

  Checkpoint checkpoint() const;
  /// Restores weights, optimizer, RNG streams, counters and monitor. The
  /// checkpoint's model config must equal this trainer's.
  void restore(const Checkpoint& checkpoint);

  /// Draws and masks the next batch, split into accumulation micro-batches.
  std::vector<MaskedBatch> next_batch();

 private:
  std::vector<std::vector<TokenId>> documents_;
  Vocab vocab_;
  PretrainConfig config_;
  ElectraModel<float> model_;
  AdamW<float> optimizer_;
  BatchIterator doc_iterator_;
  Rng mask_rng_;
  Rng sample_rng_;
  CollapseMonitor monitor_;
  std::uint64_t steps_done_ = 0;
};

struct PretrainRunOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::optional<std::filesystem::path> resume_from;
  std::function<void(std::uint64_t, const PretrainBatchOutcome&)> on_step;
  std::ostream* log = nullptr;  // metric lines, in addition to out_dir/metrics.log
};

struct PretrainResult {
  RunStatus status = RunStatus::kCompleted;
  std::uint64_t steps_completed = 0;
  std::optional<std::uint64_t> collapsed_at;
  PretrainBatchOutcome last;
  double final_window_auc = 0.0;
  std::filesystem::path final_checkpoint;
  std::vector<std::filesystem::path> checkpoints;
};

/// Tokenizes documents (empty ones dropped).
std::vector<std::vector<TokenId>> tokenize_documents(const Vocab& vocab,
                                                     std::span<const std::string> documents);

/// Trains until total_steps (or a collapse halt), writing metric lines and
/// checkpoints under out_dir when set.
PretrainResult run_pretraining(std::vector<std::vector<TokenId>> documents, const Vocab& vocab,
                               const ModelConfig& model_config, const PretrainConfig& config,
                               const PretrainRunOptions& options = {});

}  // namespace rtdforge
