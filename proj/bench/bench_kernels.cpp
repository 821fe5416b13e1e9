// Serial reference vs OpenMP variant of each kernel. Arg 0 is the problem
// size; run with OMP_NUM_THREADS to pick the thread count.

#include <benchmark/benchmark.h>

#include <cmath>
#include <vector>

#include "ucam/kernels.hpp"
#include "ucam/rng.hpp"

using namespace ucam;

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.gaussian();
  return v;
}

template <void (*Kernel)(const kernels::GemmArgs&)>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Kernel({kernels::Trans::No, kernels::Trans::No, n, n, n, a.data(), b.data(), c.data(), false});
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <void (*Kernel)(const kernels::ConvolveArgs&)>
void BM_convolve(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto in = filled(n * n, 3);
  std::vector<double> taps(31), out(n * n);
  for (std::size_t i = 0; i < taps.size(); ++i) taps[i] = std::exp(-0.5 * std::pow(static_cast<double>(i) - 15.0, 2));
  for (auto _ : state) {
    Kernel({n, n, 1, taps, in.data(), out.data()});
    Kernel({n, n, 0, taps, in.data(), out.data()});
    benchmark::DoNotOptimize(out.data());
  }
}

template <void (*Kernel)(const kernels::BicubicArgs&)>
void BM_bicubic(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto in = filled(14 * 14, 4);
  std::vector<double> out(n * n);
  for (auto _ : state) {
    Kernel({14, 14, n, n, -0.5, in.data(), out.data()});
    benchmark::DoNotOptimize(out.data());
  }
}

template <void (*Kernel)(const kernels::LogSumExpArgs&)>
void BM_log_sum_exp(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto cost = filled(n * n, 5), offset = filled(n, 6);
  std::vector<double> out(n);
  for (auto _ : state) {
    Kernel({n, n, false, -100.0, cost.data(), offset.data(), out.data()});
    Kernel({n, n, true, -100.0, cost.data(), offset.data(), out.data()});
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<kernels::serial::gemm>)->Name("gemm/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_gemm<kernels::parallel::gemm>)->Name("gemm/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_convolve<kernels::serial::convolve>)->Name("convolve/serial")->Arg(448);
BENCHMARK(BM_convolve<kernels::parallel::convolve>)->Name("convolve/parallel")->Arg(448);
BENCHMARK(BM_bicubic<kernels::serial::bicubic>)->Name("bicubic/serial")->Arg(448);
BENCHMARK(BM_bicubic<kernels::parallel::bicubic>)->Name("bicubic/parallel")->Arg(448);
BENCHMARK(BM_log_sum_exp<kernels::serial::log_sum_exp>)->Name("log_sum_exp/serial")->Arg(196)->Arg(1024);
BENCHMARK(BM_log_sum_exp<kernels::parallel::log_sum_exp>)->Name("log_sum_exp/parallel")->Arg(196)->Arg(1024);

BENCHMARK_MAIN();
