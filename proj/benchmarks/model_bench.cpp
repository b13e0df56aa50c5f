#include <benchmark/benchmark.h>

#include "kest/losses.hpp"
#include "kest/model.hpp"

namespace {

using namespace kest;

ModelConfig bench_config() {
  ModelConfig c;
  c.d_model = 64;
  c.n_layers = 2;
  c.n_heads = 4;
  c.vocab_size = special::kCount + 200;
  c.max_len = 48;
  c.dropout = 0.0;
  return c;
}

TokenSequence bench_sequence(int content_len) {
  std::vector<TokenId> content;
  for (int i = 0; i < content_len; ++i) content.push_back(special::kCount + (i * 7) % 200);
  return TokenSequence::from_content(content, 48);
}

void BM_ForwardAg(benchmark::State& state) {
  const auto m = ModelF::initialized(bench_config(), 1);
  const auto s = bench_sequence(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(m.forward_ag(s, 0));
}
BENCHMARK(BM_ForwardAg)->Arg(6)->Arg(14)->Arg(30)->Arg(46);

void BM_ForwardNag(benchmark::State& state) {
  const auto m = ModelF::initialized(bench_config(), 1);
  const auto s = bench_sequence(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(m.forward_nag(s, 0));
}
BENCHMARK(BM_ForwardNag)->Arg(6)->Arg(14)->Arg(30)->Arg(46);

void BM_ForwardCls(benchmark::State& state) {
  const auto m = ModelF::initialized(bench_config(), 1);
  const auto s = bench_sequence(30);
  for (auto _ : state) benchmark::DoNotOptimize(m.forward_cls(s));
}
BENCHMARK(BM_ForwardCls);

void BM_TrainStepAg(benchmark::State& state) {
  auto m = ModelF::initialized(bench_config(), 1);
  AdamW<float> opt(m.parameters(), {});
  const auto s = bench_sequence(30);
  for (auto _ : state) {
    ag::Tape<float> tape;
    auto loss = loss_ag(m.forward_ag(tape, s, 0), s);
    m.zero_grad();
    tape.backward(loss);
    opt.step(1e-4);
  }
}
BENCHMARK(BM_TrainStepAg);

}  // namespace

BENCHMARK_MAIN();
