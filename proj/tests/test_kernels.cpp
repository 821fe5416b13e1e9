#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#ifdef UCAM_HAVE_OPENMP
#include <omp.h>
#endif

#include "support.hpp"
#include "ucam/kernels.hpp"

namespace k = ucam::kernels;
using k::Trans;

namespace {

std::vector<double> random_values(std::size_t n, ucam::RngStream& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.gaussian();
  return v;
}

// Force several threads even on a single-core host so the parallel split is exercised.
struct ThreadScope {
  ThreadScope() {
#ifdef UCAM_HAVE_OPENMP
    omp_set_num_threads(4);
#endif
  }
};

}  // namespace

TEST_CASE("gemm matches a naive triple loop for every transpose combination") {
  ThreadScope threads;
  ucam::RngStream rng(1);
  const std::size_t m = 7, n = 5, kk = 9;
  const auto a = random_values(m * kk, rng), b = random_values(kk * n, rng);
  for (Trans ta : {Trans::No, Trans::Yes})
    for (Trans tb : {Trans::No, Trans::Yes}) {
      std::vector<double> c(m * n, 1.0), want(m * n, 1.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t p = 0; p < kk; ++p) {
            const double av = ta == Trans::No ? a[i * kk + p] : a[p * m + i];
            const double bv = tb == Trans::No ? b[p * n + j] : b[j * kk + p];
            want[i * n + j] += av * bv;
          }
      k::serial::gemm({ta, tb, m, n, kk, a.data(), b.data(), c.data(), true});
      for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("serial and parallel kernels agree bit for bit") {
  ThreadScope threads;
  ucam::RngStream rng(2);

  SUBCASE("gemm") {
    const std::size_t m = 61, n = 37, kk = 53;
    const auto a = random_values(m * kk, rng), b = random_values(kk * n, rng);
    for (Trans ta : {Trans::No, Trans::Yes})
      for (Trans tb : {Trans::No, Trans::Yes})
        for (bool acc : {false, true}) {
          std::vector<double> s(m * n, 0.5), p(m * n, 0.5);
          k::serial::gemm({ta, tb, m, n, kk, a.data(), b.data(), s.data(), acc});
          k::parallel::gemm({ta, tb, m, n, kk, a.data(), b.data(), p.data(), acc});
          CHECK(s == p);
        }
  }
  SUBCASE("convolve") {
    const std::size_t h = 40, w = 33;
    const auto img = random_values(h * w, rng);
    const auto taps = ucam::test::random_tensor({7}, rng);
    for (int axis : {0, 1}) {
      std::vector<double> s(h * w), p(h * w);
      k::serial::convolve({h, w, axis, taps.values(), img.data(), s.data()});
      k::parallel::convolve({h, w, axis, taps.values(), img.data(), p.data()});
      CHECK(s == p);
    }
  }
  SUBCASE("bicubic") {
    const auto src = random_values(14 * 14, rng);
    std::vector<double> s(97 * 113), p(97 * 113);
    k::serial::bicubic({14, 14, 97, 113, -0.5, src.data(), s.data()});
    k::parallel::bicubic({14, 14, 97, 113, -0.5, src.data(), p.data()});
    CHECK(s == p);
  }
  SUBCASE("log_sum_exp") {
    const std::size_t r = 23, c = 29;
    const auto cost = random_values(r * c, rng);
    for (bool tr : {false, true}) {
      const auto offset = random_values(tr ? r : c, rng);
      std::vector<double> s(tr ? c : r), p(tr ? c : r);
      k::serial::log_sum_exp({r, c, tr, -3.0, cost.data(), offset.data(), s.data()});
      k::parallel::log_sum_exp({r, c, tr, -3.0, cost.data(), offset.data(), p.data()});
      CHECK(s == p);
    }
  }
}

TEST_CASE("log_sum_exp matches the direct formula and handles -inf slices") {
  const std::vector<double> cost{0.0, 1.0, 2.0, 3.0, 4.0, 5.0};  // 2 x 3
  const std::vector<double> off_cols{0.0, -1.0, 0.5};
  std::vector<double> out(2);
  k::log_sum_exp({2, 3, false, 2.0, cost.data(), off_cols.data(), out.data()});
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) s += std::exp(2.0 * cost[i * 3 + j] + off_cols[j]);
    CHECK(out[i] == doctest::Approx(std::log(s)).epsilon(1e-14));
  }
  const double ninf = -std::numeric_limits<double>::infinity();
  const std::vector<double> off_rows{ninf, ninf};
  std::vector<double> cols(3);
  k::log_sum_exp({2, 3, true, 1.0, cost.data(), off_rows.data(), cols.data()});
  for (double v : cols) CHECK(v == ninf);
}

TEST_CASE("convolution with a normalized kernel preserves constants") {
  const std::size_t h = 9, w = 11;
  std::vector<double> img(h * w, 3.0), out(h * w);
  const std::vector<double> taps{0.25, 0.5, 0.25};
  k::convolve({h, w, 1, taps, img.data(), out.data()});
  for (double v : out) CHECK(v == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("Keys cubic weights interpolate") {
  CHECK(k::cubic_weight(0.0, -0.5) == 1.0);
  CHECK(k::cubic_weight(1.0, -0.5) == doctest::Approx(0.0));
  CHECK(k::cubic_weight(2.0, -0.5) == doctest::Approx(0.0));
  CHECK(k::cubic_weight(-0.5, -0.5) == k::cubic_weight(0.5, -0.5));
  double total = 0.0;
  for (double x : {-1.3, -0.3, 0.7, 1.7}) total += k::cubic_weight(x, -0.5);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
}
