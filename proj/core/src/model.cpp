#include "rtdforge/model.hpp"

#include <cmath>
#include <unordered_set>

#include "rtdforge/error.hpp"
#include "rtdforge/ops.hpp"

namespace rtdforge {

void ModelConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError(key + ": " + why, key);
  };
  if (vocab_size <= Vocab::kSpecialCount) fail("vocab_size", "must exceed the special-token count");
  if (embedding_size == 0) fail("embedding_size", "must be positive");
  if (hidden_size == 0) fail("hidden_size", "must be positive");
  if (ffn_size == 0) fail("ffn_size", "must be positive");
  if (num_heads == 0) fail("num_heads", "must be positive");
  if (hidden_size != num_heads * head_size) {
    fail("head_size", "hidden_size (" + std::to_string(hidden_size) + ") must equal num_heads x head_size (" +
                          std::to_string(num_heads) + " x " + std::to_string(head_size) + ")");
  }
  if (max_positions < 3) fail("max_positions", "must be at least 3");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout", "must lie in [0, 1)");
  if (!(attention_dropout >= 0.0 && attention_dropout < 1.0)) {
    fail("attention_dropout", "must lie in [0, 1)");
  }
  if (!(generator_multiplier > 0.0 && generator_multiplier <= 1.0)) {
    fail("generator_multiplier", "must lie in (0, 1]");
  }
  if (!(generator_layer_multiplier > 0.0 && generator_layer_multiplier <= 1.0)) {
    fail("generator_layer_multiplier", "must lie in (0, 1]");
  }
  if (!(layer_norm_epsilon > 0.0)) fail("layer_norm_epsilon", "must be positive");
  if (!(init_stddev > 0.0)) fail("init_stddev", "must be positive");
}

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

EncoderDims discriminator_dims(const ModelConfig& config) {
  return {config.hidden_size, config.ffn_size, config.num_heads, config.head_size, config.num_layers};
}

EncoderDims generator_dims(const ModelConfig& config) {
  const double g = config.generator_multiplier;
  EncoderDims dims;
  dims.hidden = std::max<std::size_t>(1, round_half_up(g * static_cast<double>(config.hidden_size)));
  dims.ffn = std::max<std::size_t>(1, round_half_up(g * static_cast<double>(config.ffn_size)));
  dims.heads = std::max<std::size_t>(1, round_half_up(g * static_cast<double>(config.num_heads)));
  while (dims.hidden % dims.heads != 0) {
    --dims.heads;
  }
  dims.head_size = dims.hidden / dims.heads;
  dims.layers = round_half_up(config.generator_layer_multiplier * static_cast<double>(config.num_layers));
  return dims;
}

namespace {

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape), true);
  for (T& v : t.data()) {
    v = static_cast<T>(rng.truncated_normal(stddev));
  }
  return t;
}

template <typename T>
Tensor<T> zeros(Shape shape) {
  return Tensor<T>(std::move(shape), true);
}

template <typename T>
Tensor<T> ones(Shape shape) {
  return Tensor<T>::full(std::move(shape), T{1}, true);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return ops::add(ops::matmul(x, w), b);
}

// [B, L, heads * hs] -> [B, heads, L, hs]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t b, std::size_t l, std::size_t heads,
                      std::size_t hs) {
  if (heads == 1) {
    return ops::reshape(x, {b, 1, l, hs});
  }
  return ops::transpose(ops::reshape(x, {b, l, heads, hs}), 1, 2);
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t b, std::size_t l, std::size_t heads,
                      std::size_t hs) {
  if (heads == 1) {
    return ops::reshape(x, {b, l, hs});
  }
  return ops::reshape(ops::transpose(x, 1, 2), {b, l, heads * hs});
}

template <typename T>
Tensor<T> transformer_block(const EncoderWeights<T>& w, const LayerWeights<T>& layer,
                            const Tensor<T>& x, const Batch& batch, bool training, Rng* rng) {
  const std::size_t b = batch.batch_size;
  const std::size_t l = batch.seq_len;
  const std::size_t heads = w.dims.heads;
  const std::size_t hs = w.dims.head_size;

  const Tensor<T> q = split_heads(linear(x, layer.query_w, layer.query_b), b, l, heads, hs);
  const Tensor<T> k = split_heads(linear(x, layer.key_w, layer.key_b), b, l, heads, hs);
  const Tensor<T> v = split_heads(linear(x, layer.value_w, layer.value_b), b, l, heads, hs);

  Tensor<T> scores = ops::scale(ops::matmul(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hs))));
  scores = ops::mask_attention_keys(scores, std::span<const std::int32_t>(batch.attention_mask));
  Tensor<T> probs = ops::softmax(scores, -1);
  probs = ops::dropout(probs, w.attention_dropout, rng, training);

  const Tensor<T> context = merge_heads(ops::matmul(probs, v), b, l, heads, hs);
  Tensor<T> attn = ops::dropout(linear(context, layer.attn_out_w, layer.attn_out_b), w.dropout, rng, training);
  const Tensor<T> h = ops::layer_norm(ops::add(x, attn), layer.attn_ln_gain, layer.attn_ln_bias,
                                      w.layer_norm_epsilon);

  Tensor<T> ffn = ops::gelu(linear(h, layer.ffn_in_w, layer.ffn_in_b));
  ffn = ops::dropout(linear(ffn, layer.ffn_out_w, layer.ffn_out_b), w.dropout, rng, training);
  return ops::layer_norm(ops::add(h, ffn), layer.ffn_ln_gain, layer.ffn_ln_bias, w.layer_norm_epsilon);
}

}  // namespace

template <typename T>
SharedEmbeddings<T> make_embeddings(const ModelConfig& config, Rng& init_rng) {
  const double sd = config.init_stddev;
  SharedEmbeddings<T> e;
  e.token = normal_init<T>({config.vocab_size, config.embedding_size}, sd, init_rng);
  e.position = normal_init<T>({config.max_positions, config.embedding_size}, sd, init_rng);
  e.segment = normal_init<T>({2, config.embedding_size}, sd, init_rng);
  return e;
}

template <typename T>
EncoderWeights<T> make_encoder(const ModelConfig& config, const EncoderDims& dims,
                               const SharedEmbeddings<T>& embeddings, Rng& init_rng) {
  const double sd = config.init_stddev;
  const std::size_t e = config.embedding_size;
  const std::size_t h = dims.hidden;
  EncoderWeights<T> w;
  w.dims = dims;
  w.embeddings = embeddings;
  w.dropout = config.dropout;
  w.attention_dropout = config.attention_dropout;
  w.layer_norm_epsilon = config.layer_norm_epsilon;
  w.emb_ln_gain = ones<T>({e});
  w.emb_ln_bias = zeros<T>({e});
  if (e != h) {
    w.projection_w = normal_init<T>({e, h}, sd, init_rng);
    w.projection_b = zeros<T>({h});
  }
  w.layers.resize(dims.layers);
  for (LayerWeights<T>& layer : w.layers) {
    layer.query_w = normal_init<T>({h, h}, sd, init_rng);
    layer.query_b = zeros<T>({h});
    layer.key_w = normal_init<T>({h, h}, sd, init_rng);
    layer.key_b = zeros<T>({h});
    layer.value_w = normal_init<T>({h, h}, sd, init_rng);
    layer.value_b = zeros<T>({h});
    layer.attn_out_w = normal_init<T>({h, h}, sd, init_rng);
    layer.attn_out_b = zeros<T>({h});
    layer.attn_ln_gain = ones<T>({h});
    layer.attn_ln_bias = zeros<T>({h});
    layer.ffn_in_w = normal_init<T>({h, dims.ffn}, sd, init_rng);
    layer.ffn_in_b = zeros<T>({dims.ffn});
    layer.ffn_out_w = normal_init<T>({dims.ffn, h}, sd, init_rng);
    layer.ffn_out_b = zeros<T>({h});
    layer.ffn_ln_gain = ones<T>({h});
    layer.ffn_ln_bias = zeros<T>({h});
  }
  return w;
}

template <typename T>
Tensor<T> encode(const EncoderWeights<T>& w, const Batch& batch, bool training, Rng* dropout_rng) {
  const std::size_t b = batch.batch_size;
  const std::size_t l = batch.seq_len;
  if (b == 0 || l == 0) {
    throw DimensionError("encode: empty batch");
  }
  if (l > w.embeddings.position.dim(0)) {
    throw ValueError("sequence length " + std::to_string(l) + " exceeds max_positions " +
                     std::to_string(w.embeddings.position.dim(0)));
  }
  std::vector<std::int32_t> positions(b * l);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<std::int32_t>(i % l);
  }
  const Shape leading{b, l};
  Tensor<T> x = ops::embedding_lookup(w.embeddings.token, std::span<const std::int32_t>(batch.ids), leading);
  x = ops::add(x, ops::embedding_lookup(w.embeddings.position, std::span<const std::int32_t>(positions), leading));
  x = ops::add(x, ops::embedding_lookup(w.embeddings.segment, std::span<const std::int32_t>(batch.segment_ids), leading));
  x = ops::layer_norm(x, w.emb_ln_gain, w.emb_ln_bias, w.layer_norm_epsilon);
  x = ops::dropout(x, w.dropout, dropout_rng, training);
  if (w.projection_w.defined()) {
    x = linear(x, w.projection_w, w.projection_b);
  }
  for (const LayerWeights<T>& layer : w.layers) {
    x = transformer_block(w, layer, x, batch, training, dropout_rng);
  }
  return x;
}

template <typename T>
void append_encoder_parameters(const EncoderWeights<T>& w, const std::string& prefix,
                               std::vector<NamedParameter<T>>& out) {
  auto add = [&](const std::string& name, const Tensor<T>& t, bool decay, std::size_t depth) {
    out.push_back({prefix + name, t, decay, depth});
  };
  add("embeddings/layer_norm/gain", w.emb_ln_gain, false, 0);
  add("embeddings/layer_norm/bias", w.emb_ln_bias, false, 0);
  if (w.projection_w.defined()) {
    add("embeddings/projection/weight", w.projection_w, true, 0);
    add("embeddings/projection/bias", w.projection_b, false, 0);
  }
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const LayerWeights<T>& layer = w.layers[i];
    const std::string p = "layer_" + std::to_string(i) + "/";
    const std::size_t d = i + 1;
    add(p + "attention/query/weight", layer.query_w, true, d);
    add(p + "attention/query/bias", layer.query_b, false, d);
    add(p + "attention/key/weight", layer.key_w, true, d);
    add(p + "attention/key/bias", layer.key_b, false, d);
    add(p + "attention/value/weight", layer.value_w, true, d);
    add(p + "attention/value/bias", layer.value_b, false, d);
    add(p + "attention/output/weight", layer.attn_out_w, true, d);
    add(p + "attention/output/bias", layer.attn_out_b, false, d);
    add(p + "attention/layer_norm/gain", layer.attn_ln_gain, false, d);
    add(p + "attention/layer_norm/bias", layer.attn_ln_bias, false, d);
    add(p + "ffn/in/weight", layer.ffn_in_w, true, d);
    add(p + "ffn/in/bias", layer.ffn_in_b, false, d);
    add(p + "ffn/out/weight", layer.ffn_out_w, true, d);
    add(p + "ffn/out/bias", layer.ffn_out_b, false, d);
    add(p + "ffn/layer_norm/gain", layer.ffn_ln_gain, false, d);
    add(p + "ffn/layer_norm/bias", layer.ffn_ln_bias, false, d);
  }
}

template <typename T>
ElectraModel<T>::ElectraModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config), dropout_rng_(mix_seed(seed, 0xd5)) {
  config_.validate();
  Rng init(mix_seed(seed, 0x1a));
  const double sd = config.init_stddev;
  embeddings = make_embeddings<T>(config, init);
  discriminator = make_encoder<T>(config, discriminator_dims(config), embeddings, init);
  generator = make_encoder<T>(config, generator_dims(config), embeddings, init);

  const std::size_t e = config.embedding_size;
  gen_dense_w = normal_init<T>({generator.dims.hidden, e}, sd, init);
  gen_dense_b = zeros<T>({e});
  gen_ln_gain = ones<T>({e});
  gen_ln_bias = zeros<T>({e});
  gen_output_bias = zeros<T>({config.vocab_size});
  disc_head_w = normal_init<T>({config.hidden_size, 1}, sd, init);
  disc_head_b = zeros<T>({1});
}

template <typename T>
Tensor<T> ElectraModel<T>::project_to_vocab(const Tensor<T>& hidden) {
  Tensor<T> x = ops::gelu(linear(hidden, gen_dense_w, gen_dense_b));
  x = ops::layer_norm(x, gen_ln_gain, gen_ln_bias, config_.layer_norm_epsilon);
  return ops::add(ops::matmul(x, embeddings.token, true), gen_output_bias);
}

template <typename T>
Tensor<T> ElectraModel<T>::generator_logits(const Batch& batch, bool training) {
  return project_to_vocab(encode(generator, batch, training, &dropout_rng_));
}

template <typename T>
Tensor<T> ElectraModel<T>::generator_logits_at(const Batch& batch,
                                               std::span<const std::size_t> flat_positions,
                                               bool training) {
  const Tensor<T> h = encode(generator, batch, training, &dropout_rng_);
  const std::size_t rows = batch.batch_size * batch.seq_len;
  const Tensor<T> flat = ops::reshape(h, {rows, generator.dims.hidden});
  std::vector<std::int32_t> ids(flat_positions.begin(), flat_positions.end());
  const Tensor<T> picked = ops::embedding_lookup(flat, std::span<const std::int32_t>(ids), {ids.size()});
  return project_to_vocab(picked);
}

template <typename T>
Tensor<T> ElectraModel<T>::discriminator_logits(const Batch& batch, bool training) {
  const Tensor<T> h = encode(discriminator, batch, training, &dropout_rng_);
  return ops::reshape(linear(h, disc_head_w, disc_head_b), {batch.batch_size, batch.seq_len});
}

template <typename T>
std::vector<NamedParameter<T>> ElectraModel<T>::named_parameters(bool include_generator) const {
  std::vector<NamedParameter<T>> out;
  out.push_back({"embeddings/token", embeddings.token, false, 0});
  out.push_back({"embeddings/position", embeddings.position, false, 0});
  out.push_back({"embeddings/segment", embeddings.segment, false, 0});
  append_encoder_parameters(discriminator, "discriminator/", out);
  const std::size_t head_depth = discriminator.layers.size() + 1;
  out.push_back({"discriminator/head/weight", disc_head_w, true, head_depth});
  out.push_back({"discriminator/head/bias", disc_head_b, false, head_depth});
  if (include_generator) {
    append_encoder_parameters(generator, "generator/", out);
    const std::size_t gen_depth = generator.layers.size() + 1;
    out.push_back({"generator/head/dense/weight", gen_dense_w, true, gen_depth});
    out.push_back({"generator/head/dense/bias", gen_dense_b, false, gen_depth});
    out.push_back({"generator/head/layer_norm/gain", gen_ln_gain, false, gen_depth});
    out.push_back({"generator/head/layer_norm/bias", gen_ln_bias, false, gen_depth});
    out.push_back({"generator/head/output_bias", gen_output_bias, false, gen_depth});
  }
  return out;
}

template <typename T>
std::vector<TensorAlias> ElectraModel<T>::aliases() {
  return {
      {"discriminator/embeddings/token", "embeddings/token"},
      {"discriminator/embeddings/position", "embeddings/position"},
      {"discriminator/embeddings/segment", "embeddings/segment"},
      {"generator/embeddings/token", "embeddings/token"},
      {"generator/embeddings/position", "embeddings/position"},
      {"generator/embeddings/segment", "embeddings/segment"},
      {"generator/output/embedding", "embeddings/token"},
  };
}

template <typename T>
std::size_t count_unique_elements(std::span<const NamedParameter<T>> params) {
  std::unordered_set<const void*> seen;
  std::size_t total = 0;
  for (const NamedParameter<T>& p : params) {
    if (seen.insert(p.tensor.storage().get()).second) {
      total += p.tensor.numel();
    }
  }
  return total;
}

template <typename T>
std::size_t count_parameters(const ElectraModel<T>& model, bool include_generator) {
  const auto params = model.named_parameters(include_generator);
  return count_unique_elements<T>(params);
}

#define RTDFORGE_INSTANTIATE_MODEL(T)                                                            \
  template SharedEmbeddings<T> make_embeddings<T>(const ModelConfig&, Rng&);                     \
  template EncoderWeights<T> make_encoder<T>(const ModelConfig&, const EncoderDims&,             \
                                             const SharedEmbeddings<T>&, Rng&);                  \
  template Tensor<T> encode<T>(const EncoderWeights<T>&, const Batch&, bool, Rng*);              \
  template void append_encoder_parameters<T>(const EncoderWeights<T>&, const std::string&,       \
                                             std::vector<NamedParameter<T>>&);                   \
  template class ElectraModel<T>;                                                                \
  template std::size_t count_unique_elements<T>(std::span<const NamedParameter<T>>);             \
  template std::size_t count_parameters<T>(const ElectraModel<T>&, bool);

RTDFORGE_INSTANTIATE_MODEL(float)
RTDFORGE_INSTANTIATE_MODEL(double)

#undef RTDFORGE_INSTANTIATE_MODEL

}  // namespace rtdforge
