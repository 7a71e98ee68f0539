#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "gradcheck.hpp"
#include "rtdforge/error.hpp"
#include "rtdforge/metrics.hpp"
#include "rtdforge/model.hpp"
#include "rtdforge/pretrain.hpp"

namespace rtdforge {
namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.vocab_size = 50;
  c.embedding_size = 8;
  c.hidden_size = 12;
  c.ffn_size = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.head_size = 6;
  c.max_positions = 16;
  c.dropout = 0.0;
  c.attention_dropout = 0.0;
  c.generator_multiplier = 0.5;
  return c;
}

// Rows of random ids (>= 4) wrapped as [CLS] ... [SEP], ragged lengths.
Batch random_batch(std::size_t vocab, std::vector<std::size_t> lengths, std::size_t max_len, Rng& rng) {
  std::vector<TokenSequence> seqs;
  for (std::size_t n : lengths) {
    std::vector<TokenId> doc(n);
    for (auto& t : doc) t = static_cast<TokenId>(Vocab::kSpecialCount + rng.uniform_index(vocab - 4));
    seqs.push_back(*dynamic_segment(doc, max_len, rng));
  }
  return collate(seqs);
}

std::vector<double> as_vector(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

TEST(Dims, GeneratorRoundingAtTableDefaults) {
  ModelConfig c;
  const EncoderDims g = generator_dims(c);
  EXPECT_EQ(g.hidden, 64u);
  EXPECT_EQ(g.ffn, 256u);
  EXPECT_EQ(g.heads, 1u);
  EXPECT_EQ(g.head_size, 64u);
  EXPECT_EQ(g.layers, 12u);
  const EncoderDims d = discriminator_dims(c);
  EXPECT_EQ(d, (EncoderDims{256, 1024, 4, 64, 12}));
}

TEST(Dims, GeneratorRoundingAcrossSweep) {
  ModelConfig c;
  const std::vector<std::pair<double, EncoderDims>> expected = {
      {0.125, {32, 128, 1, 32, 12}}, {0.5, {128, 512, 2, 64, 12}},
      {0.75, {192, 768, 3, 64, 12}}, {1.0, {256, 1024, 4, 64, 12}}};
  for (const auto& [g, dims] : expected) {
    c.generator_multiplier = g;
    EXPECT_EQ(generator_dims(c), dims) << g;
  }
  c.generator_multiplier = 0.25;
  c.generator_layer_multiplier = 0.5;
  EXPECT_EQ(generator_dims(c).layers, 6u);
}

TEST(Config, TableDefaultsValidate) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.vocab_size, 30522u);
  EXPECT_EQ(c.embedding_size, 128u);
  EXPECT_EQ(c.hidden_size, 256u);
  EXPECT_EQ(c.ffn_size, 1024u);
  EXPECT_EQ(c.num_layers, 12u);
  EXPECT_EQ(c.num_heads, 4u);
  EXPECT_EQ(c.head_size, 64u);
  EXPECT_DOUBLE_EQ(c.generator_multiplier, 0.25);
}

TEST(Config, HeadProductMustMatchHidden) {
  ModelConfig c;
  c.head_size = 32;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "head_size");
  }
  ModelConfig g;
  g.generator_multiplier = 0.0;
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(ParameterCount, DiscriminatorAtTableDefaultsIsAbout14M) {
  ElectraModel<float> model(ModelConfig{}, 0);
  const std::size_t disc = count_parameters(model, false);
  EXPECT_GE(disc, 13'000'000u);
  EXPECT_LE(disc, 15'000'000u);
  // Closed form: embeddings + projection + 12 blocks + head.
  const std::size_t emb = 30522 * 128 + 512 * 128 + 2 * 128 + 2 * 128;
  const std::size_t proj = 128 * 256 + 256;
  const std::size_t block = 4 * (256 * 256 + 256) + 2 * 512 + (256 * 1024 + 1024) + (1024 * 256 + 256);
  EXPECT_EQ(disc, emb + proj + 12 * block + 257);
}

TEST(ParameterCount, ZeroLayerConfigHasEmbeddingsAndProjectionsOnly) {
  ModelConfig c = toy_config();
  c.num_layers = 0;
  ElectraModel<double> model(c, 1);
  const std::size_t emb = 50 * 8 + 16 * 8 + 2 * 8 + 2 * 8;
  EXPECT_EQ(count_parameters(model, false), emb + (8 * 12 + 12) + 13);
}

TEST(ParameterCount, MatchesCheckpointWalk) {
  ElectraModel<double> model(toy_config(), 2);
  const Checkpoint ckpt = model_checkpoint(model);
  std::size_t walked = 0;
  std::set<std::string> names;
  for (const auto& t : ckpt.tensors) {
    walked += t.data.size();
    EXPECT_TRUE(names.insert(t.name).second) << t.name;
  }
  EXPECT_EQ(walked, count_parameters(model, true));
  EXPECT_GT(count_parameters(model, true), count_parameters(model, false));
  for (const auto& [alias, canonical] : ckpt.aliases) {
    EXPECT_TRUE(names.count(canonical)) << alias;
    EXPECT_FALSE(names.count(alias)) << alias;
  }
}

TEST(Sharing, EmbeddingTablesAreOneStorage) {
  ElectraModel<double> model(toy_config(), 3);
  EXPECT_TRUE(model.generator.embeddings.token.shares_storage(model.embeddings.token));
  EXPECT_TRUE(model.discriminator.embeddings.token.shares_storage(model.embeddings.token));
  EXPECT_TRUE(model.discriminator.embeddings.position.shares_storage(model.generator.embeddings.position));
  EXPECT_TRUE(model.discriminator.embeddings.segment.shares_storage(model.generator.embeddings.segment));
  EXPECT_FALSE(model.discriminator.emb_ln_gain.shares_storage(model.generator.emb_ln_gain));
}

TEST(Sharing, EditingTokenTableChangesBothNetworksAndOutputLogits) {
  ElectraModel<double> model(toy_config(), 4);
  Rng rng(5);
  const Batch batch = random_batch(50, {6, 4}, 10, rng);
  const auto gen_before = as_vector(model.generator_logits(batch, false));
  const auto disc_before = as_vector(model.discriminator_logits(batch, false));
  // Row 40 may not occur in the input; it still moves an output logit.
  for (std::size_t e = 0; e < 8; ++e) model.embeddings.token[40 * 8 + e] += 0.5;
  const Tensor<double> gen_after = model.generator_logits(batch, false);
  bool output_changed = false;
  for (std::size_t row = 0; row < batch.batch_size * batch.seq_len; ++row) {
    if (gen_after[row * 50 + 40] != gen_before[row * 50 + 40]) output_changed = true;
  }
  EXPECT_TRUE(output_changed);
  const TokenId used = batch.ids[1];
  for (std::size_t e = 0; e < 8; ++e) model.embeddings.token[static_cast<std::size_t>(used) * 8 + e] += 0.5;
  EXPECT_NE(as_vector(model.discriminator_logits(batch, false)), disc_before);
}

TEST(Encoder, OutputShapeMatchesContract) {
  ModelConfig c;
  c.vocab_size = 400;
  c.num_layers = 1;
  ElectraModel<float> model(c, 6);
  Rng rng(7);
  const Batch batch = random_batch(400, {14, 14}, 16, rng);
  ASSERT_EQ(batch.seq_len, 16u);
  const Tensor<float> h = encode(model.discriminator, batch, false, nullptr);
  EXPECT_EQ(h.shape(), (Shape{2, 16, 256}));
  EXPECT_EQ(model.generator_logits(batch, false).shape(), (Shape{2, 16, 400}));
  EXPECT_EQ(model.discriminator_logits(batch, false).shape(), (Shape{2, 16}));
}

TEST(Encoder, PadContentDoesNotLeakIntoRealPositions) {
  ElectraModel<double> model(toy_config(), 8);
  Rng rng(9);
  Batch batch = random_batch(50, {3, 9}, 12, rng);
  ASSERT_EQ(batch.attention_mask[batch.flat(0, 7)], 0);
  const Tensor<double> before = encode(model.discriminator, batch, false, nullptr);
  for (std::size_t p = 5; p < batch.seq_len; ++p) batch.ids[batch.flat(0, p)] = 17 + static_cast<TokenId>(p);
  const Tensor<double> after = encode(model.discriminator, batch, false, nullptr);
  const std::size_t h = 12;
  for (std::size_t p = 0; p < 5; ++p) {
    for (std::size_t k = 0; k < h; ++k) {
      const std::size_t i = (0 * batch.seq_len + p) * h + k;
      EXPECT_NEAR(before[i], after[i], 1e-13);
    }
  }
  // Row 1 is untouched by row 0's padding.
  for (std::size_t i = batch.seq_len * h; i < before.numel(); ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(Encoder, BidirectionalContext) {
  ElectraModel<double> model(toy_config(), 10);
  Rng rng(11);
  Batch batch = random_batch(50, {8}, 10, rng);
  const Tensor<double> before = encode(model.discriminator, batch, false, nullptr);
  batch.ids[6] = batch.ids[6] == 20 ? 21 : 20;
  const Tensor<double> after = encode(model.discriminator, batch, false, nullptr);
  double diff = 0.0;
  for (std::size_t k = 0; k < 12; ++k) diff += std::abs(before[1 * 12 + k] - after[1 * 12 + k]);
  EXPECT_GT(diff, 0.0);
}

TEST(Encoder, SegmentIdsMatter) {
  ElectraModel<double> model(toy_config(), 12);
  const std::vector<TokenId> a = {10, 11, 12};
  const std::vector<TokenId> b = {13, 14};
  const TokenSequence seq = pack_token_ids(a, std::span<const TokenId>(b), 10);
  Batch batch = collate(std::span<const TokenSequence>(&seq, 1));
  const auto before = as_vector(encode(model.discriminator, batch, false, nullptr));
  for (auto& s : batch.segment_ids) s = 1 - s;
  const auto after = as_vector(encode(model.discriminator, batch, false, nullptr));
  double diff = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) diff += std::abs(before[i] - after[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Encoder, OverlongSequenceThrows) {
  ElectraModel<double> model(toy_config(), 13);
  Rng rng(14);
  const Batch batch = random_batch(50, {20}, 24, rng);
  EXPECT_THROW(model.discriminator_logits(batch, false), Error);
}

TEST(Encoder, OutOfVocabularyIdThrows) {
  ElectraModel<double> model(toy_config(), 15);
  Rng rng(16);
  Batch batch = random_batch(50, {4}, 8, rng);
  batch.ids[2] = 50;
  EXPECT_THROW(model.discriminator_logits(batch, false), IndexError);
}

TEST(Encoder, EvaluationModeIsDeterministic) {
  ModelConfig c = toy_config();
  c.dropout = 0.1;
  c.attention_dropout = 0.1;
  ElectraModel<double> model(c, 17);
  Rng rng(18);
  const Batch batch = random_batch(50, {7, 5}, 10, rng);
  EXPECT_EQ(as_vector(model.discriminator_logits(batch, false)),
            as_vector(model.discriminator_logits(batch, false)));
  EXPECT_NE(as_vector(model.discriminator_logits(batch, true)),
            as_vector(model.discriminator_logits(batch, false)));
}

TEST(Encoder, SameSeedSameWeights) {
  ElectraModel<double> a(toy_config(), 19);
  ElectraModel<double> b(toy_config(), 19);
  ElectraModel<double> c(toy_config(), 20);
  EXPECT_EQ(serialize_checkpoint(model_checkpoint(a)), serialize_checkpoint(model_checkpoint(b)));
  EXPECT_NE(serialize_checkpoint(model_checkpoint(a)), serialize_checkpoint(model_checkpoint(c)));
}

TEST(Init, TruncatedNormalBiasesZeroGainsOne) {
  ModelConfig c;
  c.vocab_size = 2000;
  c.num_layers = 1;
  ElectraModel<double> model(c, 21);
  const auto& tok = model.embeddings.token;
  double sum = 0.0;
  double sq = 0.0;
  for (double v : tok.data()) {
    EXPECT_LE(std::abs(v), 0.04 + 1e-12);
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(tok.numel());
  EXPECT_NEAR(sum / n, 0.0, 1e-3);
  // Truncation at two stddev shrinks the spread to about 0.88 of 0.02.
  EXPECT_NEAR(std::sqrt(sq / n), 0.02 * 0.8796, 5e-4);
  for (double v : model.discriminator.layers[0].query_b.data()) EXPECT_EQ(v, 0.0);
  for (double v : model.discriminator.layers[0].attn_ln_gain.data()) EXPECT_EQ(v, 1.0);
}

TEST(Discriminator, UntrainedAucIsChance) {
  ModelConfig c = toy_config();
  c.vocab_size = 300;
  c.max_positions = 64;
  ElectraModel<double> model(c, 22);
  Rng rng(23);
  std::vector<double> scores;
  std::vector<int> labels;
  while (scores.size() < 2000) {
    const Batch batch = random_batch(300, {60, 60}, 64, rng);
    const Tensor<double> logits = model.discriminator_logits(batch, false);
    for (std::size_t i = 0; i < logits.numel(); ++i) {
      if (batch.attention_mask[i] == 0 || Vocab::is_special(batch.ids[i])) continue;
      scores.push_back(logits[i]);
      labels.push_back(static_cast<int>(rng.uniform_index(2)));
    }
  }
  EXPECT_NEAR(roc_auc(scores, labels), 0.5, 0.05);
}

TEST(Gradients, FullForwardBackwardMatchesFiniteDifferences) {
  ElectraModel<double> model(toy_config(), 24);
  // Larger weights than the 0.02 init so every path carries signal.
  Rng perturb(25);
  for (auto& p : model.named_parameters(true)) {
    for (double& v : p.tensor.data()) v += 0.3 * perturb.normal();
  }
  Rng rng(26);
  const Batch batch = random_batch(50, {6, 4}, 8, rng);
  Rng mask_rng(27);
  const MaskedBatch masked = apply_masking(batch, 0.3, mask_rng);
  Rng sample_rng(28);
  const Replacement fixed = rtd_forward(model, masked, 50.0, sample_rng, false).replacement;

  std::vector<Tensor<double>> params;
  for (auto& p : model.named_parameters(true)) params.push_back(p.tensor);
  const auto r = testing::check_gradients(
      params,
      [&] {
        Rng unused(0);
        return rtd_forward(model, masked, 2.0, unused, false, 1.0, 1.0, &fixed).objective;
      },
      1e-6, 600, 29);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
  EXPECT_EQ(r.probes, 600u);
}

TEST(Gradients, BothLossesReachTheSharedTokenTable) {
  ElectraModel<double> model(toy_config(), 30);
  Rng rng(31);
  const Batch batch = random_batch(50, {7}, 9, rng);
  Rng mask_rng(32);
  const MaskedBatch masked = apply_masking(batch, 0.3, mask_rng);
  Rng sample_rng(33);
  const Replacement fixed = rtd_forward(model, masked, 1.0, sample_rng, false).replacement;

  auto token_grad = [&](double gen_weight, double disc_weight) {
    model.embeddings.token.zero_grad();
    Tape<double> tape;
    Tensor<double> loss;
    {
      TapeScope<double> scope(tape);
      Rng unused(0);
      loss = rtd_forward(model, masked, 1.0, unused, false, gen_weight, disc_weight, &fixed).objective;
    }
    tape.backward(loss);
    double norm = 0.0;
    for (double g : model.embeddings.token.grad()) norm += g * g;
    return norm;
  };
  EXPECT_GT(token_grad(1.0, 0.0), 0.0);
  EXPECT_GT(token_grad(0.0, 1.0), 0.0);
}

}  // namespace
}  // namespace rtdforge
