#pragma once

// Data-parallel inner loops. Every kernel exists twice: `serial::` is the
// reference, `parallel::` splits the outermost output loop across OpenMP
// threads. Both call the same per-row routine, so each output element is
// produced by identical arithmetic in identical order and the two variants
// agree bit for bit. The unqualified `kernels::` entry points pick the
// parallel variant when the build has OpenMP.

#include <cstddef>
#include <span>

namespace ucam::kernels {

enum class Trans { No, Yes };

/// C[m,n] (=|+=) op(A)[m,k] * op(B)[k,n], row-major. op(A) = A or A^T.
/// With ta == Yes, A is stored as [k,m]; with tb == Yes, B is stored as [n,k].
struct GemmArgs {
  Trans ta = Trans::No;
  Trans tb = Trans::No;
  std::size_t m = 0, n = 0, k = 0;
  const double* a = nullptr;
  const double* b = nullptr;
  double* c = nullptr;
  bool accumulate = false;
};

/// 1-D convolution along rows (axis = 1) or columns (axis = 0) of a
/// row-major height x width image, edge-clamped. Kernel length must be odd.
struct ConvolveArgs {
  std::size_t height = 0, width = 0;
  int axis = 1;
  std::span<const double> kernel;
  const double* in = nullptr;
  double* out = nullptr;
};

/// Bicubic resize of a src_h x src_w grid to dst_h x dst_w with the Keys
/// kernel (parameter a), pixel-center alignment and clamped borders.
struct BicubicArgs {
  std::size_t src_h = 0, src_w = 0, dst_h = 0, dst_w = 0;
  double a = -0.5;
  const double* in = nullptr;
  double* out = nullptr;
};

/// out[i] = log sum_j exp(scale * cost[i,j] + offset[j]) over a rows x cols
/// cost matrix; with transpose, out[j] = log sum_i exp(scale * cost[i,j] + offset[i]).
/// An all -inf slice yields -inf.
struct LogSumExpArgs {
  std::size_t rows = 0, cols = 0;
  bool transpose = false;
  double scale = 1.0;
  const double* cost = nullptr;
  const double* offset = nullptr;
  double* out = nullptr;
};

double cubic_weight(double x, double a);

namespace serial {
void gemm(const GemmArgs& args);
void convolve(const ConvolveArgs& args);
void bicubic(const BicubicArgs& args);
void log_sum_exp(const LogSumExpArgs& args);
}  // namespace serial

namespace parallel {
void gemm(const GemmArgs& args);
void convolve(const ConvolveArgs& args);
void bicubic(const BicubicArgs& args);
void log_sum_exp(const LogSumExpArgs& args);
}  // namespace parallel

void gemm(const GemmArgs& args);
void convolve(const ConvolveArgs& args);
void bicubic(const BicubicArgs& args);
void log_sum_exp(const LogSumExpArgs& args);

/// Number of OpenMP threads the parallel variants will use (1 without OpenMP).
int max_threads();

}  // namespace ucam::kernels
