#include <benchmark/benchmark.h>

#include "deqrb/attacks.hpp"
#include "deqrb/gradients.hpp"

using namespace deqrb;

namespace {

struct Setup {
  LayerParams p;
  Vec64 x;
  SolverConfig scfg;
  BackwardConfig bcfg;

  explicit Setup(std::size_t d, std::size_t l = 64) {
    Rng rng(1);
    p = init_params({d, l, 10}, Activation::Tanh, rng);
    x = random_uniform(l, 0, 1, rng);
    scfg.max_iters = 8;
  }
};

void BM_SolveBroyden(benchmark::State& state) {
  Setup s(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(solve(s.p, s.x, s.scfg));
}
BENCHMARK(BM_SolveBroyden)->Arg(16)->Arg(64)->Arg(256);

void BM_SolvePicard(benchmark::State& state) {
  Setup s(static_cast<std::size_t>(state.range(0)));
  s.scfg.method = SolverMethod::Picard;
  for (auto _ : state) benchmark::DoNotOptimize(solve(s.p, s.x, s.scfg));
}
BENCHMARK(BM_SolvePicard)->Arg(16)->Arg(64)->Arg(256);

void BM_SourceGradient(benchmark::State& state) {
  Setup s(64);
  const GradientSource sources[] = {GradientSource::exact_final(), GradientSource::phantom_final(5, 0.5),
                                    GradientSource::unrolled_ensemble(2, 0.5), GradientSource::adjoint_ensemble(0.5)};
  const GradientSource& src = sources[state.range(0)];
  for (auto _ : state) benchmark::DoNotOptimize(source_gradient(s.p, s.x, 3, src, s.scfg, s.bcfg));
  state.SetLabel(src.label());
}
BENCHMARK(BM_SourceGradient)->DenseRange(0, 3);

void BM_PgdAttack(benchmark::State& state) {
  Setup s(32);
  AttackConfig a;
  a.epsilon = 0.1;
  a.step = 0.025;
  a.steps = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  for (auto _ : state) benchmark::DoNotOptimize(pgd_attack(s.p, s.x, 3, a, s.scfg, s.bcfg, rng));
}
BENCHMARK(BM_PgdAttack)->Arg(10)->Arg(20);

}  // namespace

BENCHMARK_MAIN();
