#include <benchmark/benchmark.h>

#include "kest/losses.hpp"
#include "kest/rng.hpp"

namespace {

using namespace kest;

std::vector<Matrix<double>> random_set(Rng& rng, int n, Index rows, Index cols) {
  std::vector<Matrix<double>> out;
  for (int i = 0; i < n; ++i) {
    Matrix<double> m(rows, cols);
    for (Index k = 0; k < m.size(); ++k) m.data()[k] = normal01(rng);
    out.push_back(std::move(m));
  }
  return out;
}

// Group of N sequences of 48 x 64 output rows against N targets, five bandwidths.
void BM_LossMmd(benchmark::State& state) {
  Rng rng = make_rng(1, "bench-mmd");
  const int n = static_cast<int>(state.range(0));
  const auto o = random_set(rng, n, 48, 64), t = random_set(rng, n, 48, 64);
  const auto bank = median_bandwidths<double>(o, t, 2);
  for (auto _ : state) benchmark::DoNotOptimize(loss_mmd(o, t, bank));
}
BENCHMARK(BM_LossMmd)->Arg(2)->Arg(8)->Arg(16);

void BM_LossMmdBackward(benchmark::State& state) {
  Rng rng = make_rng(2, "bench-mmd");
  const int n = static_cast<int>(state.range(0));
  const auto o = random_set(rng, n, 48, 64), t = random_set(rng, n, 48, 64);
  const auto bank = median_bandwidths<double>(o, t, 2);
  for (auto _ : state) {
    ag::Tape<double> tape;
    std::vector<ag::Var<double>> vars;
    for (const auto& m : o) vars.push_back(tape.leaf(m));
    auto loss = loss_mmd(vars, t, bank);
    tape.backward(loss);
    benchmark::DoNotOptimize(vars.front().grad().data());
  }
}
BENCHMARK(BM_LossMmdBackward)->Arg(2)->Arg(8)->Arg(16);

}  // namespace

BENCHMARK_MAIN();
