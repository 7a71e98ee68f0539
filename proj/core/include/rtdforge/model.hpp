#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rtdforge/data.hpp"
#include "rtdforge/rng.hpp"
#include "rtdforge/tensor.hpp"

namespace rtdforge {

struct ModelConfig {
  std::size_t vocab_size = 30522;
  std::size_t embedding_size = 128;
  std::size_t hidden_size = 256;
  std::size_t ffn_size = 1024;
  std::size_t num_layers = 12;
  std::size_t num_heads = 4;
  std::size_t head_size = 64;
  std::size_t max_positions = 512;
  double dropout = 0.1;
  double attention_dropout = 0.1;
  double generator_multiplier = 0.25;
  double generator_layer_multiplier = 1.0;
  double layer_norm_epsilon = 1e-12;
  double init_stddev = 0.02;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Width and depth of one encoder stack.
struct EncoderDims {
  std::size_t hidden = 0;
  std::size_t ffn = 0;
  std::size_t heads = 0;
  std::size_t head_size = 0;
  std::size_t layers = 0;

  friend bool operator==(const EncoderDims&, const EncoderDims&) = default;
};

/// Round half up, x >= 0.
std::size_t round_half_up(double x);

EncoderDims discriminator_dims(const ModelConfig& config);

/// Hidden, FFN and head counts scaled by the generator multiplier (each at
/// least 1). Head size is hidden / heads, dropping heads until it divides.
EncoderDims generator_dims(const ModelConfig& config);

/// Token, position and segment tables read by both encoders.
template <typename T>
struct SharedEmbeddings {
  Tensor<T> token;     // [vocab, emb]
  Tensor<T> position;  // [max_positions, emb]
  Tensor<T> segment;   // [2, emb]
};

template <typename T>
struct LayerWeights {
  Tensor<T> query_w, query_b;
  Tensor<T> key_w, key_b;
  Tensor<T> value_w, value_b;
  Tensor<T> attn_out_w, attn_out_b;
  Tensor<T> attn_ln_gain, attn_ln_bias;
  Tensor<T> ffn_in_w, ffn_in_b;
  Tensor<T> ffn_out_w, ffn_out_b;
  Tensor<T> ffn_ln_gain, ffn_ln_bias;
};

template <typename T>
struct EncoderWeights {
  EncoderDims dims;
  SharedEmbeddings<T> embeddings;  // handles into the shared storage
  Tensor<T> emb_ln_gain, emb_ln_bias;
  Tensor<T> projection_w, projection_b;  // undefined when emb == hidden
  std::vector<LayerWeights<T>> layers;
  double dropout = 0.0;
  double attention_dropout = 0.0;
  double layer_norm_epsilon = 1e-12;
};

/// Named handle to one trainable buffer.
template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  bool weight_decay = true;  // false for embeddings, layer norms and biases
  std::size_t depth = 0;     // 0 embeddings, i + 1 for layer i, num_layers + 1 heads
};

struct TensorAlias {
  std::string alias;
  std::string canonical;
};

/// Freshly initialised encoder over `embeddings`.
template <typename T>
EncoderWeights<T> make_encoder(const ModelConfig& config, const EncoderDims& dims,
                               const SharedEmbeddings<T>& embeddings, Rng& init_rng);

template <typename T>
SharedEmbeddings<T> make_embeddings(const ModelConfig& config, Rng& init_rng);

/// Contextual states [B, L, hidden]. Pad keys are masked out of attention.
template <typename T>
Tensor<T> encode(const EncoderWeights<T>& weights, const Batch& batch, bool training,
                 Rng* dropout_rng);

/// Named parameters of one encoder (embedding tables excluded), with
/// `prefix` prepended to every name.
template <typename T>
void append_encoder_parameters(const EncoderWeights<T>& weights, const std::string& prefix,
                               std::vector<NamedParameter<T>>& out);

/// Generator and discriminator sharing one set of embedding tables.
template <typename T>
class ElectraModel {
 public:
  ElectraModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }

  SharedEmbeddings<T> embeddings;
  EncoderWeights<T> generator;
  EncoderWeights<T> discriminator;
  // Generator MLM head: dense hidden -> emb, gelu, layer norm, then the
  // transposed token table plus a free bias.
  Tensor<T> gen_dense_w, gen_dense_b, gen_ln_gain, gen_ln_bias, gen_output_bias;
  // Discriminator RTD head: one logit per position.
  Tensor<T> disc_head_w, disc_head_b;

  Rng& dropout_rng() noexcept { return dropout_rng_; }
  const Rng& dropout_rng() const noexcept { return dropout_rng_; }

  /// Vocabulary logits [B, L, vocab].
  Tensor<T> generator_logits(const Batch& batch, bool training);
  /// Vocabulary logits [N, vocab] only at the flat (row * L + pos) positions.
  Tensor<T> generator_logits_at(const Batch& batch, std::span<const std::size_t> flat_positions,
                                bool training);
  /// Replacement logits [B, L].
  Tensor<T> discriminator_logits(const Batch& batch, bool training);

  /// Distinct trainable buffers under canonical names.
  std::vector<NamedParameter<T>> named_parameters(bool include_generator = true) const;
  /// Extra names under which shared buffers are also reachable.
  static std::vector<TensorAlias> aliases();

 private:
  Tensor<T> project_to_vocab(const Tensor<T>& hidden);

  ModelConfig config_;
  Rng dropout_rng_;
};

/// Sum of element counts over distinct storage; tied buffers count once.
template <typename T>
std::size_t count_parameters(const ElectraModel<T>& model, bool include_generator);

template <typename T>
std::size_t count_unique_elements(std::span<const NamedParameter<T>> params);

extern template class ElectraModel<float>;
extern template class ElectraModel<double>;

}  // namespace rtdforge
