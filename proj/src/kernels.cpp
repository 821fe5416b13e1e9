#include "ucam/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#ifdef UCAM_HAVE_OPENMP
#include <omp.h>
#endif

#include "ucam/error.hpp"

namespace ucam::kernels {

namespace {

// Below this many multiply-adds the thread fork costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 15;

// Row i of C for row-major A[m,k], B[k,n]; transposed operands are copied
// to this layout first (see PlainGemm).
void gemm_row(const GemmArgs& g, std::size_t i) {
  double* crow = g.c + i * g.n;
  if (!g.accumulate) std::fill(crow, crow + g.n, 0.0);
  const double* arow = g.a + i * g.k;
  for (std::size_t p = 0; p < g.k; ++p) {
    const double aip = arow[p];
    if (aip == 0.0) continue;
    const double* brow = g.b + p * g.n;
    for (std::size_t j = 0; j < g.n; ++j) crow[j] += aip * brow[j];
  }
}

// Owns row-major copies of transposed operands so the row kernel always
// streams contiguous memory.
class PlainGemm {
 public:
  explicit PlainGemm(const GemmArgs& g) : args_(g) {
    if (g.ta == Trans::Yes) {
      a_.resize(g.m * g.k);
      for (std::size_t p = 0; p < g.k; ++p)
        for (std::size_t i = 0; i < g.m; ++i) a_[i * g.k + p] = g.a[p * g.m + i];
      args_.a = a_.data();
      args_.ta = Trans::No;
    }
    if (g.tb == Trans::Yes) {
      b_.resize(g.k * g.n);
      for (std::size_t j = 0; j < g.n; ++j)
        for (std::size_t p = 0; p < g.k; ++p) b_[p * g.n + j] = g.b[j * g.k + p];
      args_.b = b_.data();
      args_.tb = Trans::No;
    }
  }
  PlainGemm(const PlainGemm&) = delete;
  PlainGemm& operator=(const PlainGemm&) = delete;
  const GemmArgs& args() const { return args_; }

 private:
  GemmArgs args_;
  std::vector<double> a_, b_;
};

void convolve_row(const ConvolveArgs& c, std::size_t r) {
  const auto radius = static_cast<std::ptrdiff_t>(c.kernel.size() / 2);
  const auto h = static_cast<std::ptrdiff_t>(c.height);
  const auto w = static_cast<std::ptrdiff_t>(c.width);
  const auto row = static_cast<std::ptrdiff_t>(r);
  for (std::ptrdiff_t col = 0; col < w; ++col) {
    double acc = 0.0;
    for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
      const double kv = c.kernel[static_cast<std::size_t>(t + radius)];
      std::ptrdiff_t y = row, x = col;
      if (c.axis == 1)
        x = std::clamp<std::ptrdiff_t>(col + t, 0, w - 1);
      else
        y = std::clamp<std::ptrdiff_t>(row + t, 0, h - 1);
      acc += kv * c.in[y * w + x];
    }
    c.out[row * w + col] = acc;
  }
}

void bicubic_row(const BicubicArgs& b, std::size_t oy) {
  const double sy = (static_cast<double>(oy) + 0.5) * static_cast<double>(b.src_h) / static_cast<double>(b.dst_h) - 0.5;
  const auto y0 = static_cast<std::ptrdiff_t>(std::floor(sy));
  const double fy = sy - static_cast<double>(y0);
  const auto sh = static_cast<std::ptrdiff_t>(b.src_h);
  const auto sw = static_cast<std::ptrdiff_t>(b.src_w);
  double wy[4];
  for (int t = 0; t < 4; ++t) wy[t] = cubic_weight(fy - (t - 1), b.a);
  for (std::size_t ox = 0; ox < b.dst_w; ++ox) {
    const double sx = (static_cast<double>(ox) + 0.5) * static_cast<double>(b.src_w) / static_cast<double>(b.dst_w) - 0.5;
    const auto x0 = static_cast<std::ptrdiff_t>(std::floor(sx));
    const double fx = sx - static_cast<double>(x0);
    double acc = 0.0;
    for (int ty = 0; ty < 4; ++ty) {
      const std::ptrdiff_t y = std::clamp<std::ptrdiff_t>(y0 + ty - 1, 0, sh - 1);
      double racc = 0.0;
      for (int tx = 0; tx < 4; ++tx) {
        const std::ptrdiff_t x = std::clamp<std::ptrdiff_t>(x0 + tx - 1, 0, sw - 1);
        racc += cubic_weight(fx - (tx - 1), b.a) * b.in[y * sw + x];
      }
      acc += wy[ty] * racc;
    }
    b.out[oy * b.dst_w + ox] = acc;
  }
}

void log_sum_exp_entry(const LogSumExpArgs& l, std::size_t i) {
  const std::size_t count = l.transpose ? l.rows : l.cols;
  auto term = [&](std::size_t j) {
    const double c = l.transpose ? l.cost[j * l.cols + i] : l.cost[i * l.cols + j];
    return l.scale * c + l.offset[j];
  };
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < count; ++j) m = std::max(m, term(j));
  if (m == -std::numeric_limits<double>::infinity()) {
    l.out[i] = m;
    return;
  }
  double acc = 0.0;
  for (std::size_t j = 0; j < count; ++j) acc += std::exp(term(j) - m);
  l.out[i] = m + std::log(acc);
}

void check_conv(const ConvolveArgs& c) {
  if (c.kernel.size() % 2 == 0) throw ValidationError("convolution kernel length must be odd");
  if (c.axis != 0 && c.axis != 1) throw ValidationError("convolution axis must be 0 or 1");
}

}  // namespace

double cubic_weight(double x, double a) {
  x = std::fabs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace serial {

void gemm(const GemmArgs& args) {
  const PlainGemm plain(args);
  for (std::size_t i = 0; i < args.m; ++i) gemm_row(plain.args(), i);
}

void convolve(const ConvolveArgs& args) {
  check_conv(args);
  for (std::size_t r = 0; r < args.height; ++r) convolve_row(args, r);
}

void bicubic(const BicubicArgs& args) {
  for (std::size_t r = 0; r < args.dst_h; ++r) bicubic_row(args, r);
}

void log_sum_exp(const LogSumExpArgs& args) {
  const std::size_t out = args.transpose ? args.cols : args.rows;
  for (std::size_t i = 0; i < out; ++i) log_sum_exp_entry(args, i);
}

}  // namespace serial

namespace parallel {

void gemm(const GemmArgs& args) {
  const PlainGemm plain(args);
  const auto m = static_cast<std::int64_t>(args.m);
  [[maybe_unused]] const bool big = args.m * args.n * args.k >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t i = 0; i < m; ++i) gemm_row(plain.args(), static_cast<std::size_t>(i));
}

void convolve(const ConvolveArgs& args) {
  check_conv(args);
  const auto h = static_cast<std::int64_t>(args.height);
  [[maybe_unused]] const bool big = args.height * args.width * args.kernel.size() >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t r = 0; r < h; ++r) convolve_row(args, static_cast<std::size_t>(r));
}

void bicubic(const BicubicArgs& args) {
  const auto h = static_cast<std::int64_t>(args.dst_h);
  [[maybe_unused]] const bool big = args.dst_h * args.dst_w * 16 >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t r = 0; r < h; ++r) bicubic_row(args, static_cast<std::size_t>(r));
}

void log_sum_exp(const LogSumExpArgs& args) {
  const auto out = static_cast<std::int64_t>(args.transpose ? args.cols : args.rows);
  [[maybe_unused]] const bool big = args.rows * args.cols >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t i = 0; i < out; ++i) log_sum_exp_entry(args, static_cast<std::size_t>(i));
}

}  // namespace parallel

#ifdef UCAM_HAVE_OPENMP
void gemm(const GemmArgs& args) { parallel::gemm(args); }
void convolve(const ConvolveArgs& args) { parallel::convolve(args); }
void bicubic(const BicubicArgs& args) { parallel::bicubic(args); }
void log_sum_exp(const LogSumExpArgs& args) { parallel::log_sum_exp(args); }
int max_threads() { return omp_get_max_threads(); }
#else
void gemm(const GemmArgs& args) { serial::gemm(args); }
void convolve(const ConvolveArgs& args) { serial::convolve(args); }
void bicubic(const BicubicArgs& args) { serial::bicubic(args); }
void log_sum_exp(const LogSumExpArgs& args) { serial::log_sum_exp(args); }
int max_threads() { return 1; }
#endif

}  // namespace ucam::kernels
