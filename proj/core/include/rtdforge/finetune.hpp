#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rtdforge/checkpoint.hpp"
#include "rtdforge/data.hpp"
#include "rtdforge/metrics.hpp"
#include "rtdforge/model.hpp"
#include "rtdforge/optim.hpp"

namespace rtdforge {

struct FinetuneConfig {
  double learning_rate = 3e-4;
  double layerwise_decay = 0.8;
  std::uint64_t warmup_steps = 10000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.9999;
  double adam_epsilon = 1e-6;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::size_t epochs = 0;  // 0: 10 for RTE and STS-B, 3 otherwise
  std::size_t max_seq_len = 128;
  std::uint64_t seed = 0;
  bool mean_pooling = true;  // false: first-token pooling
  double head_dropout = 0.1;

  void validate() const;
  AdamWHyper adam() const { return {adam_beta1, adam_beta2, adam_epsilon, weight_decay}; }
};

/// min(warmup_steps, floor(total_steps / 10)).
std::uint64_t effective_warmup(std::uint64_t warmup_steps, std::uint64_t total_steps);

/// 10 epochs for RTE and STS-B, 3 for every other task.
std::size_t default_epochs(const std::string& task_name);

enum class TaskKind { kClassification, kRegression };

struct TaskDescriptor {
  std::string name;
  bool pair = false;
  TaskKind kind = TaskKind::kClassification;
  std::vector<std::string> labels;    // class names, index = class id
  std::vector<std::string> metrics;   // acc, f1, mcc, pearson, spearman
  std::size_t epochs = 0;             // 0: task default
  std::size_t max_seq_len = 0;        // 0: fine-tuning config value

  /// Number of head outputs: classes, or 1 for regression.
  std::size_t output_size() const;
  void validate() const;
};

/// Packed inputs with parallel targets.
struct TaskData {
  std::vector<TokenSequence> inputs;
  std::vector<int> classes;      // classification
  std::vector<double> targets;   // regression
  std::size_t size() const { return inputs.size(); }
};

/// Packs examples and maps labels. DataError on an unknown label, a
/// non-numeric regression target or a single/pair mismatch.
TaskData prepare_task_data(const std::vector<TaskExample>& examples, const TaskDescriptor& task,
                           const Vocab& vocab, std::size_t max_seq_len);

/// Encoder plus pooling and a two-layer MLP head.
template <typename T>
class TaskModel {
 public:
  TaskModel(EncoderWeights<T> encoder, std::size_t output_size, bool mean_pooling,
            double head_dropout, std::uint64_t seed, double init_stddev = 0.02);

  /// Pooled vector [B, hidden].
  Tensor<T> pool(const Batch& batch, bool training);
  /// Head outputs [B, output_size].
  Tensor<T> forward(const Batch& batch, bool training);

  std::vector<NamedParameter<T>> named_parameters() const;
  std::size_t num_layers() const noexcept { return encoder.layers.size(); }

  EncoderWeights<T> encoder;
  Tensor<T> dense_w, dense_b, out_w, out_b;

 private:
  bool mean_pooling_;
  double head_dropout_;
  Rng dropout_rng_;
};

/// Discriminator encoder restored from a pretraining checkpoint. Generator
/// tensors and the RTD head are ignored. When `expected` is given, a config
/// difference raises ConfigError listing the mismatched fields.
template <typename T>
EncoderWeights<T> load_pretrained_encoder(const Checkpoint& checkpoint,
                                          const ModelConfig* expected = nullptr);

/// Freshly initialised discriminator encoder.
template <typename T>
EncoderWeights<T> random_encoder(const ModelConfig& config, std::uint64_t seed);

/// Deep copy with independent storage.
template <typename T>
EncoderWeights<T> clone_encoder(const EncoderWeights<T>& encoder);

using MetricMap = std::map<std::string, double>;  // fractions / correlations

template <typename T>
MetricMap evaluate_task(TaskModel<T>& model, const TaskData& data, const TaskDescriptor& task,
                        std::size_t batch_size);

struct FinetuneResult {
  MetricMap metrics;                // final epoch
  std::vector<MetricMap> per_epoch;
  std::vector<double> train_loss;   // mean loss per epoch
};

/// Epoch-mode training with layer-wise decayed learning rates; evaluates the
/// dev split after every epoch and returns the final-epoch metrics.
template <typename T>
FinetuneResult finetune(TaskModel<T>& model, const TaskData& train, const TaskData& dev,
                        const TaskDescriptor& task, const FinetuneConfig& config);

struct SeedRun {
  std::uint64_t seed = 0;
  FinetuneResult result;
};

struct TaskResult {
  std::vector<SeedRun> runs;
  std::map<std::string, MeanStd> summary;
};

/// Produces the starting encoder for one seed.
using EncoderFactory = std::function<EncoderWeights<float>(std::uint64_t seed)>;

/// Fine-tunes once per seed from the same starting weights and summarises
/// each metric by sample mean and stddev. Any failed seed raises an error
/// listing all failures.
TaskResult multi_seed_eval(const EncoderFactory& encoder_for_seed, const TaskData& train,
                           const TaskData& dev, const TaskDescriptor& task,
                           const FinetuneConfig& config, const std::vector<std::uint64_t>& seeds);

extern template class TaskModel<float>;
extern template class TaskModel<double>;

}  // namespace rtdforge
