#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rtdforge/finetune.hpp"
#include "rtdforge/model.hpp"
#include "rtdforge/pretrain.hpp"

namespace rtdforge {

struct KvEntry {
  std::string key;
  std::string value;
  int line = 0;
};

/// Flat `key = value` text. `#` starts a comment, blank lines are ignored,
/// duplicate keys are errors.
class KvConfig {
 public:
  static KvConfig parse(std::string_view text, std::string source = "config");
  static KvConfig load(const std::filesystem::path& path);

  const std::vector<KvEntry>& entries() const noexcept { return entries_; }
  const std::string& source() const noexcept { return source_; }
  const KvEntry* find(std::string_view key) const;
  bool has(std::string_view key) const { return find(key) != nullptr; }

  std::string get_string(std::string_view key, const std::string& fallback) const;
  double get_double(std::string_view key, double fallback) const;
  std::uint64_t get_u64(std::string_view key, std::uint64_t fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;
  std::vector<std::string> get_list(std::string_view key) const;

  /// ConfigError naming the first key (and its line) not in `known`.
  void reject_unknown(std::span<const std::string_view> known) const;

 private:
  [[noreturn]] void bad_value(const KvEntry& e, const std::string& expected) const;

  std::string source_;
  std::vector<KvEntry> entries_;
};

// Every key accepted by each schema, in documentation order.
std::span<const std::string_view> model_config_keys();
std::span<const std::string_view> pretrain_config_keys();
std::span<const std::string_view> finetune_config_keys();
std::span<const std::string_view> task_descriptor_keys();

/// Overwrites the fields whose keys are present.
void apply_model_config(const KvConfig& kv, ModelConfig& config);
void apply_pretrain_config(const KvConfig& kv, PretrainConfig& config);
void apply_finetune_config(const KvConfig& kv, FinetuneConfig& config);

/// Canonical text with every field, one `key=value` per line, floats in
/// round-trip precision.
std::string model_config_to_text(const ModelConfig& config);
std::string pretrain_config_to_text(const PretrainConfig& config);
std::string finetune_config_to_text(const FinetuneConfig& config);
ModelConfig model_config_from_text(std::string_view text);

/// "field: a != b" for each differing field.
std::vector<std::string> model_config_differences(const ModelConfig& a, const ModelConfig& b);

struct PretrainSettings {
  ModelConfig model;
  PretrainConfig pretrain;
  bool vocab_size_set = false;  // false: the caller takes it from the vocabulary
};

/// Model and pretraining keys from one file; anything else is an error.
PretrainSettings parse_pretrain_settings(const KvConfig& kv);
FinetuneConfig parse_finetune_settings(const KvConfig& kv);

/// Keys: name, input (single|pair), output (classification-k|regression),
/// labels, metrics, epochs, max_seq_len.
TaskDescriptor parse_task_descriptor(const KvConfig& kv);

/// FNV-1a digest of the canonical text.
std::string config_digest(std::string_view canonical_text);

}  // namespace rtdforge
