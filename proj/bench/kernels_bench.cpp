// Serial reference vs OpenMP kernels at the shapes training actually uses
// (batch 64, 1024 -> 128 -> 64 -> 2 MLP) plus one larger layer.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "cfkd/kernels.hpp"

namespace k = cfkd::kernels;

namespace {

std::vector<double> noise(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

k::GemmShape shape(const benchmark::State& st) {
  return {std::size_t(st.range(0)), std::size_t(st.range(1)), std::size_t(st.range(2))};
}

template <bool Parallel>
void BM_LinearForward(benchmark::State& st) {
  const auto s = shape(st);
  const auto in = noise(s.batch * s.in, 1), w = noise(s.in * s.out, 2), b = noise(s.out, 3);
  std::vector<double> out(s.batch * s.out);
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::linear_forward(s, in, w, b, out);
    else k::serial::linear_forward(s, in, w, b, out);
    benchmark::DoNotOptimize(out.data());
  }
  st.SetItemsProcessed(st.iterations() * std::int64_t(s.batch * s.in * s.out));
}

template <bool Parallel>
void BM_LinearGradWeights(benchmark::State& st) {
  const auto s = shape(st);
  const auto in = noise(s.batch * s.in, 1), g = noise(s.batch * s.out, 2);
  std::vector<double> gw(s.in * s.out);
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::linear_grad_weights(s, in, g, gw);
    else k::serial::linear_grad_weights(s, in, g, gw);
    benchmark::DoNotOptimize(gw.data());
  }
  st.SetItemsProcessed(st.iterations() * std::int64_t(s.batch * s.in * s.out));
}

template <bool Parallel>
void BM_LinearGradInput(benchmark::State& st) {
  const auto s = shape(st);
  const auto g = noise(s.batch * s.out, 1), w = noise(s.in * s.out, 2);
  std::vector<double> gi(s.batch * s.in);
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::linear_grad_input(s, g, w, gi);
    else k::serial::linear_grad_input(s, g, w, gi);
    benchmark::DoNotOptimize(gi.data());
  }
  st.SetItemsProcessed(st.iterations() * std::int64_t(s.batch * s.in * s.out));
}

template <bool Parallel>
void BM_Relu(benchmark::State& st) {
  const auto in = noise(std::size_t(st.range(0)), 1);
  std::vector<double> out(in.size());
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::relu_forward(in, out);
    else k::serial::relu_forward(in, out);
    benchmark::DoNotOptimize(out.data());
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({64, 1024, 128})->Args({64, 128, 64})->Args({64, 64, 2})->Args({256, 1024, 256});
}

}  // namespace

BENCHMARK(BM_LinearForward<false>)->Apply(gemm_shapes);
BENCHMARK(BM_LinearForward<true>)->Apply(gemm_shapes);
BENCHMARK(BM_LinearGradWeights<false>)->Apply(gemm_shapes);
BENCHMARK(BM_LinearGradWeights<true>)->Apply(gemm_shapes);
BENCHMARK(BM_LinearGradInput<false>)->Apply(gemm_shapes);
BENCHMARK(BM_LinearGradInput<true>)->Apply(gemm_shapes);
BENCHMARK(BM_Relu<false>)->Arg(64 * 64)->Arg(1 << 20);
BENCHMARK(BM_Relu<true>)->Arg(64 * 64)->Arg(1 << 20);

BENCHMARK_MAIN();
