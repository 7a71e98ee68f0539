#include <benchmark/benchmark.h>

#include <vector>

#include "rtdforge/data.hpp"
#include "rtdforge/model.hpp"
#include "rtdforge/optim.hpp"
#include "rtdforge/pretrain.hpp"

namespace {

using namespace rtdforge;

ModelConfig config(std::size_t hidden, std::size_t layers) {
  ModelConfig c;
  c.vocab_size = 2000;
  c.embedding_size = 128;
  c.hidden_size = hidden;
  c.ffn_size = 4 * hidden;
  c.num_layers = layers;
  c.num_heads = hidden / 64;
  c.head_size = 64;
  c.max_positions = 128;
  return c;
}

MaskedBatch batch(std::size_t rows, Rng& rng) {
  std::vector<TokenSequence> seqs;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<TokenId> doc(200);
    for (auto& t : doc) t = static_cast<TokenId>(Vocab::kSpecialCount + rng.uniform_index(1996));
    seqs.push_back(*dynamic_segment(doc, 128, rng));
  }
  return apply_masking(collate(seqs), 0.15, rng);
}

void BM_DiscriminatorForward(benchmark::State& state) {
  ElectraModel<float> model(config(static_cast<std::size_t>(state.range(0)), 4), 1);
  Rng rng(2);
  const MaskedBatch b = batch(16, rng);
  for (auto _ : state) benchmark::DoNotOptimize(model.discriminator_logits(b.inputs, false));
}
BENCHMARK(BM_DiscriminatorForward)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_PretrainStep(benchmark::State& state) {
  const ModelConfig c = config(static_cast<std::size_t>(state.range(0)), 4);
  ElectraModel<float> model(c, 3);
  PretrainConfig p;
  p.warmup_steps = 10;
  p.total_steps = 1'000'000;
  AdamW<float> opt(model.named_parameters(true), p.adam());
  Rng rng(4);
  const MaskedBatch b = batch(16, rng);
  std::uint64_t step = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(pretrain_step<float>(model, opt, p, std::span(&b, 1), step++, rng));
  }
}
BENCHMARK(BM_PretrainStep)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
