#include <benchmark/benchmark.h>

#include "rtdforge/autodiff.hpp"
#include "rtdforge/ops.hpp"
#include "rtdforge/rng.hpp"

namespace {

using rtdforge::Rng;
using rtdforge::Shape;
using F = rtdforge::Tensor<float>;

F random(const Shape& shape, Rng& rng, bool grad = false) {
  F t(shape, grad);
  for (float& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const F a = random({16, n, n}, rng);
  const F b = random({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(rtdforge::ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * 16 * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  F a = random({16, n, n}, rng, true);
  F b = random({n, n}, rng, true);
  for (auto _ : state) {
    rtdforge::Tape<float> tape;
    F loss;
    {
      rtdforge::TapeScope<float> scope(tape);
      loss = rtdforge::ops::sum(rtdforge::ops::matmul(a, b));
    }
    tape.backward(loss);
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(128);

void BM_Softmax(benchmark::State& state) {
  Rng rng(3);
  const F x = random({16, 2, 128, 128}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(rtdforge::ops::softmax(x));
}
BENCHMARK(BM_Softmax);

void BM_LayerNormGelu(benchmark::State& state) {
  Rng rng(4);
  const F x = random({16, 128, 256}, rng);
  const F gain = F::full({256}, 1.0f);
  const F bias = F::full({256}, 0.0f);
  for (auto _ : state) benchmark::DoNotOptimize(rtdforge::ops::gelu(rtdforge::ops::layer_norm(x, gain, bias, 1e-12)));
}
BENCHMARK(BM_LayerNormGelu);

}  // namespace

BENCHMARK_MAIN();
