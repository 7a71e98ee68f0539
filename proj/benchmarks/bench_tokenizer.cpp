#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "rtdforge/rng.hpp"
#include "rtdforge/tokenizer.hpp"

namespace {

std::vector<std::string> documents(std::size_t count) {
  static const char* const kWords[] = {"the",   "model", "replaced", "token", "detection", "small",
                                       "trains", "with",  "a",        "generator", "and", "discriminator"};
  rtdforge::Rng rng(7);
  std::vector<std::string> docs;
  for (std::size_t d = 0; d < count; ++d) {
    std::string text;
    for (int w = 0; w < 200; ++w) {
      text += kWords[rng.uniform_index(std::size(kWords))];
      text += rng.uniform_index(10) == 0 ? ".\n" : " ";
    }
    docs.push_back(std::move(text));
  }
  return docs;
}

void BM_TrainVocab(benchmark::State& state) {
  const auto docs = documents(200);
  for (auto _ : state) benchmark::DoNotOptimize(rtdforge::train_vocab(docs, static_cast<std::size_t>(state.range(0))));
}
BENCHMARK(BM_TrainVocab)->Arg(400)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_Encode(benchmark::State& state) {
  const auto docs = documents(200);
  const rtdforge::Vocab vocab = rtdforge::train_vocab(docs, 1000);
  std::size_t bytes = 0;
  for (auto _ : state) {
    for (const auto& d : docs) {
      benchmark::DoNotOptimize(rtdforge::encode(vocab, d));
      bytes += d.size();
    }
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
}
BENCHMARK(BM_Encode)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
