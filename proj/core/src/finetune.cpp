#include "rtdforge/finetune.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "rtdforge/autodiff.hpp"
#include "rtdforge/config.hpp"
#include "rtdforge/error.hpp"
#include "rtdforge/ops.hpp"
#include "rtdforge/pretrain.hpp"

namespace rtdforge {

void FinetuneConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError(key + ": " + why, key);
  };
  if (!(learning_rate > 0.0)) fail("learning_rate", "must be positive");
  if (!(layerwise_decay > 0.0 && layerwise_decay <= 1.0)) fail("layerwise_decay", "must lie in (0, 1]");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1", "must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2", "must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) fail("adam_epsilon", "must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be non-negative");
  if (batch_size == 0) fail("batch_size", "must be positive");
  if (max_seq_len < 3) fail("max_seq_len", "must be at least 3");
  if (!(head_dropout >= 0.0 && head_dropout < 1.0)) fail("head_dropout", "must lie in [0, 1)");
}

std::uint64_t effective_warmup(std::uint64_t warmup_steps, std::uint64_t total_steps) {
  return std::min(warmup_steps, total_steps / 10);
}

std::size_t default_epochs(const std::string& task_name) {
  return task_name == "RTE" || task_name == "STS-B" ? 10 : 3;
}

std::size_t TaskDescriptor::output_size() const {
  return kind == TaskKind::kRegression ? 1 : labels.size();
}

void TaskDescriptor::validate() const {
  if (name.empty()) {
    throw ConfigError("task descriptor needs a name", "name");
  }
  if (kind == TaskKind::kClassification && labels.size() < 2) {
    throw ConfigError("classification task needs at least two labels", "labels");
  }
  if (metrics.empty()) {
    throw ConfigError("task descriptor needs at least one metric", "metrics");
  }
  for (const std::string& m : metrics) {
    const bool known = m == "acc" || m == "f1" || m == "mcc" || m == "pearson" || m == "spearman";
    if (!known) {
      throw ConfigError("unknown metric " + m, "metrics");
    }
    const bool regression_metric = m == "pearson" || m == "spearman";
    if (regression_metric != (kind == TaskKind::kRegression)) {
      throw ConfigError("metric " + m + " does not fit a " +
                            (kind == TaskKind::kRegression ? "regression" : "classification") + " task",
                        "metrics");
    }
    if ((m == "f1" || m == "mcc") && labels.size() != 2) {
      throw ConfigError("metric " + m + " needs exactly two labels", "metrics");
    }
  }
}

TaskData prepare_task_data(const std::vector<TaskExample>& examples, const TaskDescriptor& task,
                           const Vocab& vocab, std::size_t max_seq_len) {
  TaskData data;
  data.inputs.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const TaskExample& ex = examples[i];
    const std::string where = "task " + task.name + " example " + std::to_string(i + 1);
    if (ex.sentence2.has_value() != task.pair) {
      throw DataError(where + ": expected " + (task.pair ? "a sentence pair" : "a single sentence"));
    }
    if (task.kind == TaskKind::kClassification) {
      const auto it = std::find(task.labels.begin(), task.labels.end(), ex.label);
      if (it == task.labels.end()) {
        throw DataError(where + ": unknown label '" + ex.label + "'");
      }
      data.classes.push_back(static_cast<int>(it - task.labels.begin()));
    } else {
      double v = 0.0;
      const char* first = ex.label.data();
      const char* last = first + ex.label.size();
      const auto [ptr, ec] = std::from_chars(first, last, v);
      if (ec != std::errc() || ptr != last) {
        throw DataError(where + ": regression target '" + ex.label + "' is not a number");
      }
      data.targets.push_back(v);
    }
    data.inputs.push_back(pack_downstream(ex, vocab, max_seq_len));
  }
  return data;
}

namespace {

template <typename T>
Tensor<T> head_linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return ops::add(ops::matmul(x, w), b);
}

template <typename T>
Tensor<T> init_normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape), true);
  for (T& v : t.data()) {
    v = static_cast<T>(rng.truncated_normal(stddev));
  }
  return t;
}

template <typename T>
Batch gather_batch(const TaskData& data, std::span<const std::size_t> indices) {
  std::vector<TokenSequence> picked;
  picked.reserve(indices.size());
  for (std::size_t i : indices) {
    picked.push_back(data.inputs[i]);
  }
  return collate(picked);
}

template <typename T>
Tensor<T> clone_param(const Tensor<T>& t) {
  return t.defined() ? t.clone() : Tensor<T>();
}

}  // namespace

template <typename T>
TaskModel<T>::TaskModel(EncoderWeights<T> enc, std::size_t output_size, bool mean_pooling,
                        double head_dropout, std::uint64_t seed, double init_stddev)
    : encoder(std::move(enc)),
      mean_pooling_(mean_pooling),
      head_dropout_(head_dropout),
      dropout_rng_(mix_seed(seed, 0x5d)) {
  if (output_size == 0) {
    throw ValueError("task head needs at least one output");
  }
  Rng init(mix_seed(seed, 0x4e));
  const std::size_t h = encoder.dims.hidden;
  dense_w = init_normal<T>({h, h}, init_stddev, init);
  dense_b = Tensor<T>({h}, true);
  out_w = init_normal<T>({h, output_size}, init_stddev, init);
  out_b = Tensor<T>({output_size}, true);
}

template <typename T>
Tensor<T> TaskModel<T>::pool(const Batch& batch, bool training) {
  const Tensor<T> states = encode(encoder, batch, training, &dropout_rng_);
  const std::span<const std::int32_t> mask(batch.attention_mask);
  if (mean_pooling_) {
    return ops::masked_mean_pool(states, mask);
  }
  const std::size_t h = encoder.dims.hidden;
  const Tensor<T> flat = ops::reshape(states, {batch.batch_size * batch.seq_len, h});
  std::vector<std::int32_t> first(batch.batch_size);
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    first[b] = static_cast<std::int32_t>(b * batch.seq_len);
  }
  return ops::embedding_lookup(flat, std::span<const std::int32_t>(first), {batch.batch_size});
}

template <typename T>
Tensor<T> TaskModel<T>::forward(const Batch& batch, bool training) {
  Tensor<T> x = ops::dropout(pool(batch, training), head_dropout_, &dropout_rng_, training);
  x = ops::gelu(head_linear(x, dense_w, dense_b));
  x = ops::dropout(x, head_dropout_, &dropout_rng_, training);
  return head_linear(x, out_w, out_b);
}

template <typename T>
std::vector<NamedParameter<T>> TaskModel<T>::named_parameters() const {
  std::vector<NamedParameter<T>> out;
  out.push_back({"embeddings/token", encoder.embeddings.token, false, 0});
  out.push_back({"embeddings/position", encoder.embeddings.position, false, 0});
  out.push_back({"embeddings/segment", encoder.embeddings.segment, false, 0});
  append_encoder_parameters(encoder, "encoder/", out);
  const std::size_t head = encoder.layers.size() + 1;
  out.push_back({"head/dense/weight", dense_w, true, head});
  out.push_back({"head/dense/bias", dense_b, false, head});
  out.push_back({"head/out/weight", out_w, true, head});
  out.push_back({"head/out/bias", out_b, false, head});
  return out;
}

template <typename T>
EncoderWeights<T> load_pretrained_encoder(const Checkpoint& checkpoint, const ModelConfig* expected) {
  const ModelConfig saved = model_config_from_text(checkpoint.config_text);
  if (expected != nullptr) {
    const std::vector<std::string> diff = model_config_differences(saved, *expected);
    if (!diff.empty()) {
      std::string fields;
      for (const std::string& d : diff) {
        fields += (fields.empty() ? "" : ", ") + d;
      }
      throw ConfigError("pretrained checkpoint does not match the expected model: " + fields);
    }
  }
  ElectraModel<T> model(saved, 0);
  load_model_weights(model, checkpoint, false);
  return model.discriminator;
}

template <typename T>
EncoderWeights<T> random_encoder(const ModelConfig& config, std::uint64_t seed) {
  ElectraModel<T> model(config, seed);
  return model.discriminator;
}

template <typename T>
EncoderWeights<T> clone_encoder(const EncoderWeights<T>& e) {
  EncoderWeights<T> c = e;
  c.embeddings.token = e.embeddings.token.clone();
  c.embeddings.position = e.embeddings.position.clone();
  c.embeddings.segment = e.embeddings.segment.clone();
  c.emb_ln_gain = e.emb_ln_gain.clone();
  c.emb_ln_bias = e.emb_ln_bias.clone();
  c.projection_w = clone_param(e.projection_w);
  c.projection_b = clone_param(e.projection_b);
  for (LayerWeights<T>& l : c.layers) {
    for (Tensor<T>* t : {&l.query_w, &l.query_b, &l.key_w, &l.key_b, &l.value_w, &l.value_b,
                         &l.attn_out_w, &l.attn_out_b, &l.attn_ln_gain, &l.attn_ln_bias, &l.ffn_in_w,
                         &l.ffn_in_b, &l.ffn_out_w, &l.ffn_out_b, &l.ffn_ln_gain, &l.ffn_ln_bias}) {
      *t = t->clone();
    }
  }
  return c;
}

template <typename T>
MetricMap evaluate_task(TaskModel<T>& model, const TaskData& data, const TaskDescriptor& task,
                        std::size_t batch_size) {
  if (data.size() == 0) {
    throw DataError("no evaluation examples for task " + task.name);
  }
  std::vector<int> predicted;
  std::vector<double> scores;
  const std::size_t out = task.output_size();
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) {
      idx.push_back(i);
    }
    const Batch batch = gather_batch<T>(data, idx);
    const Tensor<T> logits = model.forward(batch, false);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const T* row = logits.data().data() + r * out;
      if (task.kind == TaskKind::kRegression) {
        scores.push_back(static_cast<double>(row[0]));
      } else {
        predicted.push_back(static_cast<int>(std::max_element(row, row + out) - row));
      }
    }
  }
  MetricMap metrics;
  for (const std::string& m : task.metrics) {
    if (m == "acc") {
      metrics[m] = accuracy(predicted, data.classes);
    } else if (m == "f1") {
      metrics[m] = f1_binary(predicted, data.classes);
    } else if (m == "mcc") {
      metrics[m] = matthews_corr(predicted, data.classes).value;
    } else if (m == "pearson") {
      metrics[m] = pearson_corr(scores, data.targets).value;
    } else if (m == "spearman") {
      metrics[m] = spearman_corr(scores, data.targets).value;
    }
  }
  if (task.kind == TaskKind::kRegression) {
    double se = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      se += (scores[i] - data.targets[i]) * (scores[i] - data.targets[i]);
    }
    metrics["mse"] = se / static_cast<double>(scores.size());
  }
  return metrics;
}

template <typename T>
FinetuneResult finetune(TaskModel<T>& model, const TaskData& train, const TaskData& dev,
                        const TaskDescriptor& task, const FinetuneConfig& config) {
  config.validate();
  task.validate();
  if (train.size() == 0) {
    throw DataError("no training examples for task " + task.name);
  }
  const std::size_t epochs =
      task.epochs > 0 ? task.epochs : (config.epochs > 0 ? config.epochs : default_epochs(task.name));
  const std::uint64_t per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const std::uint64_t total = per_epoch * epochs;
  const std::uint64_t warmup = effective_warmup(config.warmup_steps, total);

  AdamW<T> optimizer(model.named_parameters(), config.adam());
  const std::size_t layers = model.num_layers();
  std::vector<double> scales(layers + 2);
  for (std::size_t d = 0; d < scales.size(); ++d) {
    scales[d] = layerwise_lr(d, layers, 1.0, config.layerwise_decay);
  }
  optimizer.set_lr_scales(scales);

  BatchIterator order(train.size(), config.batch_size, IterationMode::kEpoch,
                      Rng(mix_seed(config.seed, 0x3c)));
  FinetuneResult result;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    while (auto picks = order.next()) {
      const Batch batch = gather_batch<T>(train, *picks);
      Tape<T> tape;
      TapeScope<T> scope(tape);
      const Tensor<T> out = model.forward(batch, true);
      Tensor<T> loss;
      if (task.kind == TaskKind::kRegression) {
        std::vector<T> targets;
        for (std::size_t i : *picks) {
          targets.push_back(static_cast<T>(train.targets[i]));
        }
        loss = ops::mse_loss(ops::reshape(out, {picks->size()}), std::span<const T>(targets));
      } else {
        std::vector<std::int32_t> targets;
        for (std::size_t i : *picks) {
          targets.push_back(train.classes[i]);
        }
        loss = ops::cross_entropy_from_logits(out, std::span<const std::int32_t>(targets));
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite fine-tuning loss in epoch " + std::to_string(epoch + 1));
      }
      tape.backward(loss);
      optimizer.step(lr_at(step, warmup, total, config.learning_rate));
      ++step;
      loss_sum += value;
      ++batches;
    }
    result.train_loss.push_back(loss_sum / static_cast<double>(batches));
    result.per_epoch.push_back(evaluate_task(model, dev, task, config.batch_size));
  }
  result.metrics = result.per_epoch.back();
  return result;
}

TaskResult multi_seed_eval(const EncoderFactory& encoder_for_seed, const TaskData& train,
                           const TaskData& dev, const TaskDescriptor& task,
                           const FinetuneConfig& config, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) {
    throw ValueError("multi_seed_eval needs at least one seed");
  }
  TaskResult out;
  std::string failures;
  for (std::uint64_t seed : seeds) {
    try {
      FinetuneConfig c = config;
      c.seed = seed;
      TaskModel<float> model(encoder_for_seed(seed), task.output_size(), c.mean_pooling, c.head_dropout, seed);
      out.runs.push_back({seed, finetune(model, train, dev, task, c)});
    } catch (const std::exception& e) {
      failures += (failures.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": " + e.what();
    }
  }
  if (!failures.empty()) {
    throw Error("fine-tuning failed for " + failures);
  }
  std::map<std::string, std::vector<double>> values;
  for (const SeedRun& run : out.runs) {
    for (const auto& [name, v] : run.result.metrics) {
      values[name].push_back(v);
    }
  }
  for (const auto& [name, v] : values) {
    out.summary[name] = mean_std(v);
  }
  return out;
}

#define RTDFORGE_INSTANTIATE_FINETUNE(T)                                                         \
  template class TaskModel<T>;                                                                   \
  template EncoderWeights<T> load_pretrained_encoder<T>(const Checkpoint&, const ModelConfig*);  \
  template EncoderWeights<T> random_encoder<T>(const ModelConfig&, std::uint64_t);               \
  template EncoderWeights<T> clone_encoder<T>(const EncoderWeights<T>&);                         \
  template MetricMap evaluate_task<T>(TaskModel<T>&, const TaskData&, const TaskDescriptor&,     \
                                      std::size_t);                                              \
  template FinetuneResult finetune<T>(TaskModel<T>&, const TaskData&, const TaskData&,           \
                                      const TaskDescriptor&, const FinetuneConfig&);

RTDFORGE_INSTANTIATE_FINETUNE(float)
RTDFORGE_INSTANTIATE_FINETUNE(double)

#undef RTDFORGE_INSTANTIATE_FINETUNE

}  // namespace rtdforge
