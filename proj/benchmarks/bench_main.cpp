#include <benchmark/benchmark.h>

#include "pibnas/blocks.hpp"
#include "pibnas/cost_model.hpp"
#include "pibnas/network.hpp"
#include "pibnas/ops.hpp"

using namespace pibnas;

namespace {

Tensor random_tensor(const Shape& s, std::uint64_t seed, bool grad = false) {
  Rng rng(seed);
  std::vector<Real> v(static_cast<std::size_t>(s.numel()));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(s, std::move(v), grad);
}

// args: channels, spatial size, kernel
void BM_Conv2dForward(benchmark::State& st) {
  const int c = static_cast<int>(st.range(0)), hw = static_cast<int>(st.range(1)), k = static_cast<int>(st.range(2));
  const Tensor x = random_tensor(Shape{8, c, hw, hw}, 1);
  const Tensor w = random_tensor(Shape{c, c, k, k}, 2);
  for (auto _ : st) benchmark::DoNotOptimize(conv2d(x, w, Tensor(), Conv2dOptions::square(1, k / 2)));
  st.SetItemsProcessed(st.iterations() * 8LL * c * c * k * k * hw * hw);
}
BENCHMARK(BM_Conv2dForward)->Args({16, 32, 1})->Args({16, 32, 3})->Args({64, 8, 3});

void BM_DepthwiseForwardBackward(benchmark::State& st) {
  const int c = static_cast<int>(st.range(0)), k = static_cast<int>(st.range(1));
  Tensor x = random_tensor(Shape{8, c, 16, 16}, 3, true);
  Tensor w = random_tensor(Shape{c, 1, k, k}, 4, true);
  for (auto _ : st) {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum(conv2d(x, w, Tensor(), Conv2dOptions::square(1, k / 2, 1, c))));
    x.clear_grad();
    w.clear_grad();
  }
}
BENCHMARK(BM_DepthwiseForwardBackward)->Args({32, 3})->Args({32, 7});

// args: channels, grouped reduce
void BM_PibBlockTrainStep(benchmark::State& st) {
  BlockConfig cfg;
  cfg.channels = static_cast<int>(st.range(0));
  cfg.kernel = 5;
  cfg.grouped_reduce = st.range(1) != 0;
  Rng rng(5);
  Block b = make_pib_conv(cfg, rng);
  const Tensor x = random_tensor(Shape{8, cfg.channels, 16, 16}, 6);
  for (auto _ : st) {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum(b.forward(x, Mode::train)));
  }
}
BENCHMARK(BM_PibBlockTrainStep)->Args({16, 1})->Args({16, 0})->Args({32, 1});

void BM_CostReport(benchmark::State& st) {
  const Genotype g = load_genotype_file(std::string(PIBNAS_DATA_DIR) + "/genotypes/darts_v2.geno");
  const NetworkPlan plan = plan_network(static_cast<int>(st.range(0)), 36, 10, 32, true);
  for (auto _ : st) benchmark::DoNotOptimize(cost_report(g, plan));
}
BENCHMARK(BM_CostReport)->Arg(8)->Arg(20);

void BM_EvalNetworkForward(benchmark::State& st) {
  const Genotype g = load_genotype_file(std::string(PIBNAS_DATA_DIR) + "/genotypes/pibconv_representative.geno");
  Rng rng(7);
  EvalNetwork net(g, plan_network(4, 8, 4, 32, false), {}, rng);
  const Tensor x = random_tensor(Shape{8, 3, 32, 32}, 8);
  net.forward(x, Mode::train);
  for (auto _ : st) benchmark::DoNotOptimize(net.forward(x, Mode::eval).logits);
}
BENCHMARK(BM_EvalNetworkForward)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
