#include "rtdforge/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <type_traits>
#include <variant>

#include "rtdforge/checkpoint.hpp"
#include "rtdforge/error.hpp"

namespace rtdforge {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "config tables assume 64-bit size_t");

namespace {

std::string_view trim(std::string_view s) {
  const auto not_space = [](char c) { return c != ' ' && c != '\t' && c != '\r'; };
  while (!s.empty() && !not_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && !not_space(s.back())) s.remove_suffix(1);
  return s;
}

template <typename C>
struct Field {
  std::string_view key;
  std::variant<std::size_t C::*, double C::*, bool C::*> member;
};

const std::vector<Field<ModelConfig>>& model_fields() {
  using M = ModelConfig;
  static const std::vector<Field<M>> fields = {
      {"vocab_size", &M::vocab_size},
      {"embedding_size", &M::embedding_size},
      {"hidden_size", &M::hidden_size},
      {"ffn_size", &M::ffn_size},
      {"num_layers", &M::num_layers},
      {"num_heads", &M::num_heads},
      {"head_size", &M::head_size},
      {"max_positions", &M::max_positions},
      {"dropout", &M::dropout},
      {"attention_dropout", &M::attention_dropout},
      {"generator_multiplier", &M::generator_multiplier},
      {"generator_layer_multiplier", &M::generator_layer_multiplier},
      {"layer_norm_epsilon", &M::layer_norm_epsilon},
      {"init_stddev", &M::init_stddev},
  };
  return fields;
}

const std::vector<Field<PretrainConfig>>& pretrain_fields() {
  using P = PretrainConfig;
  static const std::vector<Field<P>> fields = {
      {"learning_rate", &P::learning_rate},
      {"warmup_steps", &P::warmup_steps},
      {"total_steps", &P::total_steps},
      {"adam_beta1", &P::adam_beta1},
      {"adam_beta2", &P::adam_beta2},
      {"adam_epsilon", &P::adam_epsilon},
      {"weight_decay", &P::weight_decay},
      {"batch_size", &P::batch_size},
      {"gradient_accumulation_steps", &P::gradient_accumulation_steps},
      {"max_seq_len", &P::max_seq_len},
      {"mask_percent", &P::mask_percent},
      {"disc_loss_weight", &P::disc_loss_weight},
      {"seed", &P::seed},
      {"collapse_window", &P::collapse_window},
      {"collapse_threshold", &P::collapse_threshold},
      {"halt_on_collapse", &P::halt_on_collapse},
      {"checkpoint_every", &P::checkpoint_every},
      {"log_every", &P::log_every},
  };
  return fields;
}

const std::vector<Field<FinetuneConfig>>& finetune_fields() {
  using F = FinetuneConfig;
  static const std::vector<Field<F>> fields = {
      {"learning_rate", &F::learning_rate},
      {"layerwise_decay", &F::layerwise_decay},
      {"warmup_steps", &F::warmup_steps},
      {"adam_beta1", &F::adam_beta1},
      {"adam_beta2", &F::adam_beta2},
      {"adam_epsilon", &F::adam_epsilon},
      {"weight_decay", &F::weight_decay},
      {"batch_size", &F::batch_size},
      {"epochs", &F::epochs},
      {"max_seq_len", &F::max_seq_len},
      {"seed", &F::seed},
      {"mean_pooling", &F::mean_pooling},
      {"head_dropout", &F::head_dropout},
  };
  return fields;
}

template <typename C>
std::vector<std::string_view> keys_of(const std::vector<Field<C>>& fields) {
  std::vector<std::string_view> keys;
  for (const Field<C>& f : fields) {
    keys.push_back(f.key);
  }
  return keys;
}

template <typename C>
void apply_fields(const KvConfig& kv, const std::vector<Field<C>>& fields, C& config) {
  for (const Field<C>& f : fields) {
    if (!kv.has(f.key)) {
      continue;
    }
    std::visit(
        [&](auto member) {
          using V = std::remove_cvref_t<decltype(config.*member)>;
          if constexpr (std::is_same_v<V, double>) {
            config.*member = kv.get_double(f.key, 0.0);
          } else if constexpr (std::is_same_v<V, bool>) {
            config.*member = kv.get_bool(f.key, false);
          } else {
            config.*member = kv.get_u64(f.key, 0);
          }
        },
        f.member);
  }
}

template <typename C>
std::string value_text(const C& config, const Field<C>& f) {
  return std::visit(
      [&](auto member) -> std::string {
        using V = std::remove_cvref_t<decltype(config.*member)>;
        if constexpr (std::is_same_v<V, double>) {
          char buf[40];
          std::snprintf(buf, sizeof buf, "%.17g", config.*member);
          return buf;
        } else if constexpr (std::is_same_v<V, bool>) {
          return config.*member ? "true" : "false";
        } else {
          return std::to_string(config.*member);
        }
      },
      f.member);
}

template <typename C>
std::string fields_to_text(const C& config, const std::vector<Field<C>>& fields) {
  std::string out;
  for (const Field<C>& f : fields) {
    out += std::string(f.key) + "=" + value_text(config, f) + "\n";
  }
  return out;
}

}  // namespace

KvConfig KvConfig::parse(std::string_view text, std::string source) {
  KvConfig kv;
  kv.source_ = std::move(source);
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) {
      end = text.size();
    }
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(kv.source_ + " line " + std::to_string(line_no) + ": expected key = value", "",
                        line_no);
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) {
      throw ConfigError(kv.source_ + " line " + std::to_string(line_no) + ": empty key", "", line_no);
    }
    if (const KvEntry* prior = kv.find(key)) {
      throw ConfigError(kv.source_ + " line " + std::to_string(line_no) + ": duplicate key '" + key +
                            "' (first set on line " + std::to_string(prior->line) + ")",
                        key, line_no);
    }
    kv.entries_.push_back({key, value, line_no});
  }
  return kv;
}

KvConfig KvConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str(), path.string());
}

const KvEntry* KvConfig::find(std::string_view key) const {
  for (const KvEntry& e : entries_) {
    if (e.key == key) {
      return &e;
    }
  }
  return nullptr;
}

void KvConfig::bad_value(const KvEntry& e, const std::string& expected) const {
  throw ConfigError(source_ + " line " + std::to_string(e.line) + ": key '" + e.key + "' expects " +
                        expected + ", got '" + e.value + "'",
                    e.key, e.line);
}

std::string KvConfig::get_string(std::string_view key, const std::string& fallback) const {
  const KvEntry* e = find(key);
  return e != nullptr ? e->value : fallback;
}

double KvConfig::get_double(std::string_view key, double fallback) const {
  const KvEntry* e = find(key);
  if (e == nullptr) {
    return fallback;
  }
  double v = 0.0;
  const char* first = e->value.data();
  const char* last = first + e->value.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || e->value.empty()) {
    bad_value(*e, "a number");
  }
  return v;
}

std::uint64_t KvConfig::get_u64(std::string_view key, std::uint64_t fallback) const {
  const KvEntry* e = find(key);
  if (e == nullptr) {
    return fallback;
  }
  std::uint64_t v = 0;
  const char* first = e->value.data();
  const char* last = first + e->value.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || e->value.empty()) {
    bad_value(*e, "a non-negative integer");
  }
  return v;
}

bool KvConfig::get_bool(std::string_view key, bool fallback) const {
  const KvEntry* e = find(key);
  if (e == nullptr) {
    return fallback;
  }
  const std::string& v = e->value;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(*e, "true or false");
}

std::vector<std::string> KvConfig::get_list(std::string_view key) const {
  std::vector<std::string> out;
  const KvEntry* e = find(key);
  if (e == nullptr) {
    return out;
  }
  std::string_view rest = e->value;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string_view item = trim(rest.substr(0, comma));
    if (item.empty()) {
      bad_value(*e, "a comma-separated list without empty items");
    }
    out.emplace_back(item);
    if (comma == std::string_view::npos) {
      break;
    }
    rest = rest.substr(comma + 1);
    if (trim(rest).empty()) {
      bad_value(*e, "a comma-separated list without empty items");
    }
  }
  return out;
}

void KvConfig::reject_unknown(std::span<const std::string_view> known) const {
  for (const KvEntry& e : entries_) {
    if (std::find(known.begin(), known.end(), e.key) == known.end()) {
      throw ConfigError(source_ + " line " + std::to_string(e.line) + ": unknown key '" + e.key + "'",
                        e.key, e.line);
    }
  }
}

std::span<const std::string_view> model_config_keys() {
  static const std::vector<std::string_view> keys = keys_of(model_fields());
  return keys;
}

std::span<const std::string_view> pretrain_config_keys() {
  static const std::vector<std::string_view> keys = keys_of(pretrain_fields());
  return keys;
}

std::span<const std::string_view> finetune_config_keys() {
  static const std::vector<std::string_view> keys = keys_of(finetune_fields());
  return keys;
}

std::span<const std::string_view> task_descriptor_keys() {
  static const std::vector<std::string_view> keys = {"name",    "input",  "output",     "labels",
                                                     "metrics", "epochs", "max_seq_len"};
  return keys;
}

void apply_model_config(const KvConfig& kv, ModelConfig& config) { apply_fields(kv, model_fields(), config); }
void apply_pretrain_config(const KvConfig& kv, PretrainConfig& config) {
  apply_fields(kv, pretrain_fields(), config);
}
void apply_finetune_config(const KvConfig& kv, FinetuneConfig& config) {
  apply_fields(kv, finetune_fields(), config);
}

std::string model_config_to_text(const ModelConfig& config) { return fields_to_text(config, model_fields()); }
std::string pretrain_config_to_text(const PretrainConfig& config) {
  return fields_to_text(config, pretrain_fields());
}
std::string finetune_config_to_text(const FinetuneConfig& config) {
  return fields_to_text(config, finetune_fields());
}

ModelConfig model_config_from_text(std::string_view text) {
  const KvConfig kv = KvConfig::parse(text, "checkpoint model config");
  kv.reject_unknown(model_config_keys());
  ModelConfig config;
  apply_model_config(kv, config);
  config.validate();
  return config;
}

std::vector<std::string> model_config_differences(const ModelConfig& a, const ModelConfig& b) {
  std::vector<std::string> out;
  for (const Field<ModelConfig>& f : model_fields()) {
    const std::string va = value_text(a, f);
    const std::string vb = value_text(b, f);
    if (va != vb) {
      out.push_back(std::string(f.key) + ": " + va + " != " + vb);
    }
  }
  return out;
}

PretrainSettings parse_pretrain_settings(const KvConfig& kv) {
  std::vector<std::string_view> known(model_config_keys().begin(), model_config_keys().end());
  known.insert(known.end(), pretrain_config_keys().begin(), pretrain_config_keys().end());
  kv.reject_unknown(known);
  PretrainSettings s;
  apply_model_config(kv, s.model);
  apply_pretrain_config(kv, s.pretrain);
  s.vocab_size_set = kv.has("vocab_size");
  auto relocate = [&](const ConfigError& e) {
    const KvEntry* entry = kv.find(e.key());
    if (entry == nullptr) {
      return ConfigError(kv.source() + ": " + e.what(), e.key(), 0);
    }
    return ConfigError(kv.source() + " line " + std::to_string(entry->line) + ": " + e.what(), e.key(),
                       entry->line);
  };
  try {
    s.model.validate();
    s.pretrain.validate();
  } catch (const ConfigError& e) {
    throw relocate(e);
  }
  return s;
}

FinetuneConfig parse_finetune_settings(const KvConfig& kv) {
  kv.reject_unknown(finetune_config_keys());
  FinetuneConfig c;
  apply_finetune_config(kv, c);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    const KvEntry* entry = kv.find(e.key());
    throw ConfigError(kv.source() + (entry ? " line " + std::to_string(entry->line) : "") + ": " + e.what(),
                      e.key(), entry ? entry->line : 0);
  }
  return c;
}

TaskDescriptor parse_task_descriptor(const KvConfig& kv) {
  kv.reject_unknown(task_descriptor_keys());
  auto fail = [&](const std::string& key, const std::string& why) {
    const KvEntry* e = kv.find(key);
    throw ConfigError(kv.source() + (e ? " line " + std::to_string(e->line) : "") + ": " + key + ": " + why,
                      key, e ? e->line : 0);
  };
  TaskDescriptor t;
  t.name = kv.get_string("name", "");
  if (t.name.empty()) fail("name", "required");

  const std::string input = kv.get_string("input", "single");
  if (input == "pair") {
    t.pair = true;
  } else if (input != "single") {
    fail("input", "expected single or pair");
  }

  const std::string output = kv.get_string("output", "");
  std::size_t classes = 0;
  if (output == "regression") {
    t.kind = TaskKind::kRegression;
  } else if (output.rfind("classification-", 0) == 0) {
    const std::string k = output.substr(std::string("classification-").size());
    const auto [ptr, ec] = std::from_chars(k.data(), k.data() + k.size(), classes);
    if (ec != std::errc() || ptr != k.data() + k.size() || classes < 2) {
      fail("output", "expected classification-k with k >= 2");
    }
  } else {
    fail("output", "expected classification-k or regression");
  }

  t.labels = kv.get_list("labels");
  if (t.kind == TaskKind::kClassification) {
    if (t.labels.empty()) {
      for (std::size_t i = 0; i < classes; ++i) {
        t.labels.push_back(std::to_string(i));
      }
    } else if (t.labels.size() != classes) {
      fail("labels", "lists " + std::to_string(t.labels.size()) + " labels for " + std::to_string(classes) +
                         " classes");
    }
  } else if (!t.labels.empty()) {
    fail("labels", "not allowed for regression");
  }

  t.metrics = kv.get_list("metrics");
  if (t.metrics.empty()) {
    t.metrics = t.kind == TaskKind::kRegression ? std::vector<std::string>{"pearson", "spearman"}
                                                : std::vector<std::string>{"acc"};
  }
  t.epochs = kv.get_u64("epochs", 0);
  t.max_seq_len = kv.get_u64("max_seq_len", 0);
  try {
    t.validate();
  } catch (const ConfigError& e) {
    fail(e.key(), e.what());
  }
  return t;
}

std::string config_digest(std::string_view canonical_text) { return fnv1a_hex(canonical_text); }

}  // namespace rtdforge
