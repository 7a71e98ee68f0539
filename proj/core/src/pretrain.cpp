#include "rtdforge/pretrain.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "rtdforge/autodiff.hpp"
#include "rtdforge/config.hpp"
#include "rtdforge/error.hpp"
#include "rtdforge/metrics.hpp"
#include "rtdforge/ops.hpp"

namespace rtdforge {

void PretrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError(key + ": " + why, key);
  };
  if (!(learning_rate > 0.0)) fail("learning_rate", "must be positive");
  if (total_steps == 0) fail("total_steps", "must be positive");
  if (warmup_steps >= total_steps) fail("warmup_steps", "must be smaller than total_steps");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1", "must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2", "must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) fail("adam_epsilon", "must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be non-negative");
  if (batch_size == 0) fail("batch_size", "must be positive");
  if (gradient_accumulation_steps == 0 || batch_size % gradient_accumulation_steps != 0) {
    fail("gradient_accumulation_steps", "must be positive and divide batch_size");
  }
  if (max_seq_len < 3) fail("max_seq_len", "must be at least 3");
  if (!(mask_percent > 0.0 && mask_percent <= 0.5)) fail("mask_percent", "must lie in (0, 0.5]");
  if (!(disc_loss_weight > 0.0)) fail("disc_loss_weight", "must be positive");
  if (collapse_window == 0) fail("collapse_window", "must be positive");
  if (!(collapse_threshold >= 0.0 && collapse_threshold <= 1.0)) {
    fail("collapse_threshold", "must lie in [0, 1]");
  }
  if (log_every == 0) fail("log_every", "must be positive");
}

CollapseMonitor::CollapseMonitor(std::size_t window, double threshold)
    : window_(window), threshold_(threshold) {
  if (window == 0) {
    throw ValueError("collapse window must be positive");
  }
}

bool CollapseMonitor::observe(std::uint64_t step, double auc) {
  if (!(auc >= 0.0 && auc <= 1.0)) {
    throw ValueError("AUC outside [0, 1]: " + std::to_string(auc));
  }
  history_.push_back(auc);
  sum_ += auc;
  if (history_.size() > window_) {
    sum_ -= history_.front();
    history_.pop_front();
  }
  if (tripped_at_ || !full()) {
    return false;
  }
  if (window_mean() < threshold_) {
    tripped_at_ = step;
    return true;
  }
  return false;
}

double CollapseMonitor::window_mean() const {
  if (history_.empty()) {
    return 0.0;
  }
  // Re-summing avoids drift from the running sum in long runs.
  double total = 0.0;
  for (double v : history_) {
    total += v;
  }
  return total / static_cast<double>(history_.size());
}

std::string CollapseMonitor::save() const {
  std::ostringstream os;
  os << (tripped_at_ ? static_cast<long long>(*tripped_at_) : -1LL) << ' ' << history_.size();
  char buf[32];
  for (double v : history_) {
    std::snprintf(buf, sizeof buf, " %.17g", v);
    os << buf;
  }
  return os.str();
}

void CollapseMonitor::load(const std::string& text) {
  std::istringstream is(text);
  long long tripped = -1;
  std::size_t n = 0;
  if (!(is >> tripped >> n) || n > window_) {
    throw DataError("invalid collapse monitor state");
  }
  history_.clear();
  sum_ = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double v;
    if (!(is >> v)) {
      throw DataError("truncated collapse monitor state");
    }
    history_.push_back(v);
    sum_ += v;
  }
  tripped_at_ = tripped >= 0 ? std::optional<std::uint64_t>(static_cast<std::uint64_t>(tripped))
                             : std::nullopt;
}

namespace {

template <typename T>
TokenId sample_row(const T* logits, std::size_t vocab, Rng& rng) {
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < vocab; ++j) {
    peak = std::max(peak, static_cast<double>(logits[j]));
  }
  double total = 0.0;
  for (std::size_t j = 0; j < vocab; ++j) {
    total += std::exp(static_cast<double>(logits[j]) - peak);
  }
  const double target = rng.uniform() * total;
  double cumulative = 0.0;
  std::size_t last_live = 0;
  for (std::size_t j = 0; j < vocab; ++j) {
    const double p = std::exp(static_cast<double>(logits[j]) - peak);
    if (p > 0.0) {
      last_live = j;
    }
    cumulative += p;
    if (cumulative > target) {
      return static_cast<TokenId>(j);
    }
  }
  return static_cast<TokenId>(last_live);
}

template <typename T>
bool all_finite(std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

}  // namespace

template <typename T>
Replacement sample_replacements(const Tensor<T>& gen_logits, const MaskedBatch& masked, Rng& rng) {
  const std::vector<std::size_t> flat = masked.flat_positions();
  const std::vector<TokenId> originals = masked.flat_originals();
  const Batch& base = masked.original;
  const std::size_t vocab = gen_logits.shape().back();
  const bool dense = gen_logits.rank() == 3;
  if (dense) {
    if (gen_logits.dim(0) != base.batch_size || gen_logits.dim(1) != base.seq_len) {
      throw DimensionError("sample_replacements: logits " + shape_str(gen_logits.shape()) +
                           " do not match batch");
    }
  } else if (gen_logits.rank() != 2 || gen_logits.dim(0) != flat.size()) {
    throw DimensionError("sample_replacements: expected [B, L, V] or [N, V] logits, got " +
                         shape_str(gen_logits.shape()));
  }

  Replacement rep;
  rep.disc_input = base;
  rep.labels.assign(base.ids.size(), 0);
  rep.sampled.resize(flat.size());
  const T* data = gen_logits.data().data();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const std::size_t row = dense ? flat[i] : i;
    const TokenId token = sample_row(data + row * vocab, vocab, rng);
    rep.sampled[i] = token;
    rep.disc_input.ids[flat[i]] = token;
    if (token != originals[i]) {
      rep.labels[flat[i]] = 1;
      ++rep.replaced;
    }
  }
  return rep;
}

template <typename T>
RtdForward<T> rtd_forward(ElectraModel<T>& model, const MaskedBatch& masked, double lambda,
                          Rng& sample_rng, bool training, double gen_weight, double disc_weight,
                          const Replacement* fixed) {
  const std::vector<std::size_t> flat = masked.flat_positions();
  const std::vector<TokenId> originals = masked.flat_originals();
  RtdForward<T> f;
  f.gen_logits = model.generator_logits_at(masked.inputs, flat, training);
  f.gen_loss = ops::cross_entropy_from_logits(f.gen_logits, std::span<const std::int32_t>(originals));

  const std::size_t vocab = f.gen_logits.dim(1);
  const T* logits = f.gen_logits.data().data();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const T* row = logits + i * vocab;
    const auto best = static_cast<TokenId>(std::max_element(row, row + vocab) - row);
    f.gen_correct += best == originals[i] ? 1 : 0;
  }

  f.replacement = fixed != nullptr ? *fixed : sample_replacements(f.gen_logits, masked, sample_rng);
  const Batch& input = f.replacement.disc_input;
  f.disc_logits = model.discriminator_logits(input, training);
  const Tensor<T> labels({input.batch_size, input.seq_len},
                         std::vector<T>(f.replacement.labels.begin(), f.replacement.labels.end()));
  f.disc_loss = ops::binary_cross_entropy_from_logits(f.disc_logits, labels,
                                                      std::span<const std::int32_t>(input.attention_mask));
  f.objective = ops::add(ops::scale(f.gen_loss, static_cast<T>(gen_weight)),
                         ops::scale(f.disc_loss, static_cast<T>(lambda * disc_weight)));
  return f;
}

template <typename T>
PretrainBatchOutcome pretrain_step(ElectraModel<T>& model, AdamW<T>& optimizer,
                                   const PretrainConfig& config,
                                   std::span<const MaskedBatch> micro_batches, std::uint64_t step,
                                   Rng& sample_rng) {
  if (micro_batches.empty()) {
    throw ValueError("pretrain_step: no micro-batches");
  }
  std::size_t total_masked = 0;
  std::size_t total_scored = 0;
  for (const MaskedBatch& mb : micro_batches) {
    total_masked += mb.masked_count();
    total_scored += mb.original.non_pad_count();
  }

  const double lambda = config.disc_loss_weight;
  PretrainBatchOutcome out;
  std::size_t correct = 0;
  std::size_t replaced = 0;
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(total_scored);
  labels.reserve(total_scored);

  for (const MaskedBatch& mb : micro_batches) {
    const double wg = static_cast<double>(mb.masked_count()) / static_cast<double>(total_masked);
    const double wd = static_cast<double>(mb.original.non_pad_count()) / static_cast<double>(total_scored);
    Tape<T> tape;
    TapeScope<T> scope(tape);
    RtdForward<T> f = rtd_forward(model, mb, lambda, sample_rng, true, wg, wd);
    const double gen = f.gen_loss.item();
    const double disc = f.disc_loss.item();
    if (!std::isfinite(gen)) {
      throw NumericError("non-finite generator loss at step " + std::to_string(step));
    }
    if (!std::isfinite(disc)) {
      throw NumericError("non-finite discriminator loss at step " + std::to_string(step));
    }
    tape.backward(f.objective);

    out.gen_loss += wg * gen;
    out.disc_loss += wd * disc;
    correct += f.gen_correct;
    replaced += f.replacement.replaced;
    const Batch& input = f.replacement.disc_input;
    for (std::size_t i = 0; i < input.attention_mask.size(); ++i) {
      if (input.attention_mask[i] != 0) {
        scores.push_back(static_cast<double>(f.disc_logits[i]));
        labels.push_back(f.replacement.labels[i]);
      }
    }
  }

  for (const auto& slot : optimizer.slots()) {
    if (slot.param.tensor.has_grad() && !all_finite<T>(slot.param.tensor.grad())) {
      throw NumericError("non-finite gradient in " + slot.param.name + " at step " + std::to_string(step));
    }
  }

  out.combined_loss = out.gen_loss + lambda * out.disc_loss;
  out.gen_masked_accuracy = static_cast<double>(correct) / static_cast<double>(total_masked);
  out.replaced_fraction = static_cast<double>(replaced) / static_cast<double>(total_masked);
  const bool both = std::find(labels.begin(), labels.end(), 0) != labels.end() &&
                    std::find(labels.begin(), labels.end(), 1) != labels.end();
  out.disc_auc = both ? roc_auc(scores, labels) : 0.5;
  out.learning_rate = lr_at(step, config.warmup_steps, config.total_steps, config.learning_rate);
  optimizer.step(out.learning_rate);
  return out;
}

template <typename T>
Checkpoint model_checkpoint(const ElectraModel<T>& model) {
  Checkpoint c;
  c.config_text = model_config_to_text(model.config());
  for (const NamedParameter<T>& p : model.named_parameters(true)) {
    c.tensors.push_back(to_checkpoint_tensor(p.name, p.tensor));
  }
  for (const TensorAlias& a : ElectraModel<T>::aliases()) {
    c.aliases.emplace_back(a.alias, a.canonical);
  }
  return c;
}

template <typename T>
void load_model_weights(ElectraModel<T>& model, const Checkpoint& checkpoint, bool include_generator) {
  for (NamedParameter<T>& p : model.named_parameters(true)) {
    const bool optional = !include_generator && (p.name.rfind("generator/", 0) == 0 ||
                                                 p.name.rfind("discriminator/head/", 0) == 0);
    const CheckpointTensor* t = checkpoint.find(p.name);
    if (t == nullptr) {
      if (optional) {
        continue;
      }
      throw DataError("checkpoint lacks tensor " + p.name);
    }
    assign_from(p.tensor, *t);
  }
}

std::string format_metric_line(std::uint64_t step, const PretrainBatchOutcome& o) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "step=%llu gen_loss=%.8g disc_loss=%.8g gen_acc=%.8g disc_auc=%.8g replaced_frac=%.8g lr=%.8g",
                static_cast<unsigned long long>(step), o.gen_loss, o.disc_loss, o.gen_masked_accuracy,
                o.disc_auc, o.replaced_fraction, o.learning_rate);
  return buf;
}

std::string to_string(RunStatus status) {
  switch (status) {
    case RunStatus::kCompleted:
      return "completed";
    case RunStatus::kCollapsed:
      return "collapsed";
    case RunStatus::kFailed:
      return "failed";
  }
  return "failed";
}

namespace {

std::vector<std::vector<TokenId>> drop_empty(std::vector<std::vector<TokenId>> docs) {
  std::erase_if(docs, [](const std::vector<TokenId>& d) { return d.empty(); });
  if (docs.empty()) {
    throw DataError("pretraining corpus has no non-empty documents");
  }
  return docs;
}

const ModelConfig& checked(const ModelConfig& model, const PretrainConfig& config, const Vocab& vocab) {
  model.validate();
  config.validate();
  if (config.max_seq_len > model.max_positions) {
    throw ConfigError("max_seq_len exceeds max_positions", "max_seq_len");
  }
  if (vocab.size() > model.vocab_size) {
    throw ConfigError("vocab_size " + std::to_string(model.vocab_size) + " is smaller than the vocabulary (" +
                          std::to_string(vocab.size()) + " tokens)",
                      "vocab_size");
  }
  return model;
}

std::map<std::string, std::string> parse_lines(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) {
      out[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  return out;
}

const std::string& required(const std::map<std::string, std::string>& kv, const std::string& key,
                            const std::string& section) {
  const auto it = kv.find(key);
  if (it == kv.end()) {
    throw DataError("checkpoint section " + section + " lacks " + key);
  }
  return it->second;
}

}  // namespace

PretrainTrainer::PretrainTrainer(std::vector<std::vector<TokenId>> documents, Vocab vocab,
                                 ModelConfig model_config, PretrainConfig config)
    : documents_(drop_empty(std::move(documents))),
      vocab_(std::move(vocab)),
      config_(config),
      model_(checked(model_config, config, vocab_), config.seed),
      optimizer_(model_.named_parameters(true), config.adam()),
      doc_iterator_(documents_.size(), config.batch_size, IterationMode::kStep, Rng(mix_seed(config.seed, 1))),
      mask_rng_(mix_seed(config.seed, 2)),
      sample_rng_(mix_seed(config.seed, 3)),
      monitor_(config.collapse_window, config.collapse_threshold) {}

std::vector<MaskedBatch> PretrainTrainer::next_batch() {
  const std::vector<std::size_t> picks = *doc_iterator_.next();
  std::vector<TokenSequence> sequences;
  sequences.reserve(picks.size());
  for (std::size_t i : picks) {
    sequences.push_back(*dynamic_segment(documents_[i], config_.max_seq_len, doc_iterator_.rng()));
  }
  const std::size_t micro = config_.micro_batch_size();
  std::vector<MaskedBatch> out;
  const std::span<const TokenSequence> all(sequences);
  for (std::size_t start = 0; start < all.size(); start += micro) {
    const Batch batch = collate(all.subspan(start, micro));
    out.push_back(apply_masking(batch, config_.mask_percent, mask_rng_));
  }
  return out;
}

PretrainBatchOutcome PretrainTrainer::step() {
  if (steps_done_ >= config_.total_steps) {
    throw ValueError("training already reached total_steps");
  }
  const std::vector<MaskedBatch> batches = next_batch();
  const PretrainBatchOutcome out =
      pretrain_step<float>(model_, optimizer_, config_, batches, steps_done_, sample_rng_);
  ++steps_done_;
  monitor_.observe(steps_done_, out.disc_auc);
  return out;
}

Checkpoint PretrainTrainer::checkpoint() const {
  Checkpoint c = model_checkpoint(model_);
  optimizer_.save(c.add_section("optimizer"));
  CheckpointSection& rng = c.add_section("rng");
  rng.text = "data=" + doc_iterator_.rng().state() + "\nmask=" + mask_rng_.state() +
             "\nsample=" + sample_rng_.state() + "\ndropout=" +
             model_.dropout_rng().state() + "\n";
  CheckpointSection& trainer = c.add_section("trainer");
  trainer.text = "steps_done=" + std::to_string(steps_done_) +
                 "\npretrain_config_digest=" + fnv1a_hex(pretrain_config_to_text(config_)) +
                 "\nmonitor=" + monitor_.save() + "\n";
  c.add_section("vocab").text = serialize_vocab(vocab_);
  return c;
}

void PretrainTrainer::restore(const Checkpoint& c) {
  const ModelConfig saved = model_config_from_text(c.config_text);
  const std::vector<std::string> diff = model_config_differences(saved, model_.config());
  if (!diff.empty()) {
    std::string fields;
    for (const std::string& d : diff) {
      fields += (fields.empty() ? "" : ", ") + d;
    }
    throw ConfigError("checkpoint model config differs: " + fields);
  }
  if (const CheckpointSection* v = c.section("vocab")) {
    if (!(parse_vocab(v->text) == vocab_)) {
      throw DataError("checkpoint vocabulary differs from the supplied vocabulary");
    }
  }
  const CheckpointSection* opt = c.section("optimizer");
  const CheckpointSection* rng = c.section("rng");
  const CheckpointSection* trainer = c.section("trainer");
  if (opt == nullptr || rng == nullptr || trainer == nullptr) {
    throw DataError("checkpoint lacks training state (optimizer, rng or trainer section)");
  }
  load_model_weights(model_, c, true);
  optimizer_.load(*opt);
  const auto rng_kv = parse_lines(rng->text);
  doc_iterator_.rng().set_state(required(rng_kv, "data", "rng"));
  mask_rng_.set_state(required(rng_kv, "mask", "rng"));
  sample_rng_.set_state(required(rng_kv, "sample", "rng"));
  model_.dropout_rng().set_state(required(rng_kv, "dropout", "rng"));
  const auto trainer_kv = parse_lines(trainer->text);
  steps_done_ = std::stoull(required(trainer_kv, "steps_done", "trainer"));
  monitor_.load(required(trainer_kv, "monitor", "trainer"));
}

std::vector<std::vector<TokenId>> tokenize_documents(const Vocab& vocab,
                                                     std::span<const std::string> documents) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(documents.size());
  for (const std::string& d : documents) {
    std::vector<TokenId> ids = encode(vocab, d);
    if (!ids.empty()) {
      out.push_back(std::move(ids));
    }
  }
  return out;
}

PretrainResult run_pretraining(std::vector<std::vector<TokenId>> documents, const Vocab& vocab,
                               const ModelConfig& model_config, const PretrainConfig& config,
                               const PretrainRunOptions& options) {
  PretrainTrainer trainer(std::move(documents), vocab, model_config, config);
  if (options.resume_from) {
    trainer.restore(load_checkpoint(*options.resume_from));
  }

  std::ofstream log_file;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const auto mode = options.resume_from ? std::ios::app : std::ios::trunc;
    log_file.open(options.out_dir / "metrics.log", std::ios::out | mode);
    if (!log_file) {
      throw DataError("cannot write " + (options.out_dir / "metrics.log").string());
    }
  }

  PretrainResult result;
  while (trainer.steps_done() < config.total_steps) {
    result.last = trainer.step();
    const std::uint64_t s = trainer.steps_done();
    if (s % config.log_every == 0 || s == config.total_steps) {
      const std::string line = format_metric_line(s, result.last);
      if (log_file.is_open()) {
        log_file << line << '\n';
      }
      if (options.log != nullptr) {
        *options.log << line << '\n';
      }
    }
    if (options.on_step) {
      options.on_step(s, result.last);
    }
    if (!options.out_dir.empty() && config.checkpoint_every > 0 && s % config.checkpoint_every == 0 &&
        s < config.total_steps) {
      const auto path = options.out_dir / "checkpoints" / ("step-" + std::to_string(s) + ".ckpt");
      save_checkpoint(trainer.checkpoint(), path);
      result.checkpoints.push_back(path);
    }
    if (trainer.monitor().tripped_at() == s && config.halt_on_collapse) {
      break;
    }
  }
  log_file.flush();

  result.steps_completed = trainer.steps_done();
  result.collapsed_at = trainer.monitor().tripped_at();
  result.status = result.collapsed_at ? RunStatus::kCollapsed : RunStatus::kCompleted;
  result.final_window_auc = trainer.monitor().window_mean();
  if (!options.out_dir.empty()) {
    result.final_checkpoint = options.out_dir / "final.ckpt";
    save_checkpoint(trainer.checkpoint(), result.final_checkpoint);
    result.checkpoints.push_back(result.final_checkpoint);
  }
  return result;
}

#define RTDFORGE_INSTANTIATE_PRETRAIN(T)                                                          \
  template Replacement sample_replacements<T>(const Tensor<T>&, const MaskedBatch&, Rng&);        \
  template RtdForward<T> rtd_forward<T>(ElectraModel<T>&, const MaskedBatch&, double, Rng&, bool, \
                                        double, double, const Replacement*);                      \
  template PretrainBatchOutcome pretrain_step<T>(ElectraModel<T>&, AdamW<T>&, const PretrainConfig&, \
                                                 std::span<const MaskedBatch>, std::uint64_t, Rng&); \
  template Checkpoint model_checkpoint<T>(const ElectraModel<T>&);                                \
  template void load_model_weights<T>(ElectraModel<T>&, const Checkpoint&, bool);

RTDFORGE_INSTANTIATE_PRETRAIN(float)
RTDFORGE_INSTANTIATE_PRETRAIN(double)

#undef RTDFORGE_INSTANTIATE_PRETRAIN

}  // namespace rtdforge
