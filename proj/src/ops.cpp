#include "ucam/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "ucam/error.hpp"
#include "ucam/kernels.hpp"

namespace ucam {

namespace {

using Inputs = Tape::Inputs;
using GradIn = std::span<Tensor* const>;

template <class F, class D>
Var unary(std::string_view name, const Var& x, F f, D df) {
  return x.tape().record(
      name, {x},
      [f](Inputs in) {
        const Tensor& a = *in[0];
        Tensor out(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
        return out;
      },
      [df](Inputs in, const Tensor& out, const Tensor& g, GradIn gi) {
        if (!gi[0]) return;
        const Tensor& a = *in[0];
        Tensor& ga = *gi[0];
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i] * df(a[i], out[i]);
      });
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape())
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
}

void require_rank(const char* op, const Var& x, std::size_t rank) {
  if (x.value().rank() != rank)
    throw ValidationError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                          shape_string(x.shape()));
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw ValidationError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                          shape_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  return out;
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var elementwise(Elementwise kind, const Var& a, const std::optional<Var>& b) {
  const bool binary = kind == Elementwise::Add || kind == Elementwise::Subtract || kind == Elementwise::Multiply;
  if (binary && !b) throw ValidationError("binary elementwise operation needs two operands");
  if (!binary && b) throw ValidationError("unary elementwise operation takes one operand");
  switch (kind) {
    case Elementwise::Add: return add(a, *b);
    case Elementwise::Subtract: return sub(a, *b);
    case Elementwise::Multiply: return mul(a, *b);
    case Elementwise::Relu: return relu(a);
    case Elementwise::Softplus: return softplus(a);
    case Elementwise::Tanh: return tanh(a);
    case Elementwise::Exponential: return exp(a);
    case Elementwise::Logarithm: return log(a);
    case Elementwise::Negate: return negate(a);
  }
  throw ValidationError("unknown elementwise kind");
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  return a.tape().record(
      "add", {a, b},
      [](Inputs in) {
        Tensor out = *in[0];
        out += *in[1];
        return out;
      },
      [](Inputs, const Tensor&, const Tensor& g, GradIn gi) {
        if (gi[0]) *gi[0] += g;
        if (gi[1]) *gi[1] += g;
      });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("subtract", a, b);
  return a.tape().record(
      "subtract", {a, b},
      [](Inputs in) {
        Tensor out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= (*in[1])[i];
        return out;
      },
      [](Inputs, const Tensor&, const Tensor& g, GradIn gi) {
        if (gi[0]) *gi[0] += g;
        if (gi[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
      });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("multiply", a, b);
  return a.tape().record(
      "multiply", {a, b},
      [](Inputs in) {
        Tensor out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*in[1])[i];
        return out;
      },
      [](Inputs in, const Tensor&, const Tensor& g, GradIn gi) {
        if (gi[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * (*in[1])[i];
        if (gi[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * (*in[0])[i];
      });
}

Var relu(const Var& x) {
  return unary("relu", x, [](double a) { return a > 0.0 ? a : 0.0; },
               [](double a, double) { return a > 0.0 ? 1.0 : 0.0; });
}

Var softplus(const Var& x) {
  return unary("softplus", x, stable_softplus, [](double a, double) { return stable_sigmoid(a); });
}

Var tanh(const Var& x) {
  return unary("tanh", x, [](double a) { return std::tanh(a); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& x) {
  return unary("sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var exp(const Var& x) {
  return unary("exponential", x, [](double a) { return std::exp(a); }, [](double, double y) { return y; });
}

Var log(const Var& x) {
  for (double v : x.value().values())
    if (!(v > 0.0)) throw ValidationError("logarithm requires strictly positive input, got " + std::to_string(v));
  return unary("logarithm", x, [](double a) { return std::log(a); }, [](double a, double) { return 1.0 / a; });
}

Var negate(const Var& x) {
  return unary("negate", x, [](double a) { return -a; }, [](double, double) { return -1.0; });
}

Var sqrt(const Var& x) {
  for (double v : x.value().values())
    if (!(v > 0.0)) throw ValidationError("sqrt requires strictly positive input");
  return unary("sqrt", x, [](double a) { return std::sqrt(a); }, [](double, double y) { return 0.5 / y; });
}

Var scale(const Var& x, double factor) {
  return unary("scale", x, [factor](double a) { return factor * a; }, [factor](double, double) { return factor; });
}

Var add_scalar(const Var& x, double offset) {
  return unary("add_scalar", x, [offset](double a) { return a + offset; }, [](double, double) { return 1.0; });
}

Var matmul(const Var& a, const Var& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ValidationError("matmul: inner extents disagree " + shape_string(a.shape()) + " x " +
                          shape_string(b.shape()));
  return a.tape().record(
      "matmul", {a, b},
      [m, k, n](Inputs in) {
        Tensor out({m, n});
        kernels::gemm({kernels::Trans::No, kernels::Trans::No, m, n, k, in[0]->data(), in[1]->data(), out.data(), false});
        return out;
      },
      [m, k, n](Inputs in, const Tensor&, const Tensor& g, GradIn gi) {
        // dA = G B^T, dB = A^T G
        if (gi[0])
          kernels::gemm({kernels::Trans::No, kernels::Trans::Yes, m, k, n, g.data(), in[1]->data(), gi[0]->data(), true});
        if (gi[1])
          kernels::gemm({kernels::Trans::Yes, kernels::Trans::No, k, n, m, in[0]->data(), g.data(), gi[1]->data(), true});
      });
}

Var add_rowwise(const Var& x, const Var& y) {
  require_rank("add_rowwise", x, 2);
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  const std::size_t r = y.value().rank() == 1 ? 1 : y.shape()[0];
  const std::size_t yn = y.shape().back();
  if (y.value().rank() > 2 || yn != n || m % r != 0)
    throw ValidationError("add_rowwise: cannot broadcast " + shape_string(y.shape()) + " onto " +
                          shape_string(x.shape()));
  const std::size_t group = m / r;
  return x.tape().record(
      "add_rowwise", {x, y},
      [m, n, group](Inputs in) {
        Tensor out = *in[0];
        const Tensor& yv = *in[1];
        for (std::size_t i = 0; i < m; ++i) {
          const double* yr = yv.data() + (i / group) * n;
          double* o = out.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) o[j] += yr[j];
        }
        return out;
      },
      [m, n, group](Inputs, const Tensor&, const Tensor& g, GradIn gi) {
        if (gi[0]) *gi[0] += g;
        if (gi[1]) {
          double* gy = gi[1]->data();
          for (std::size_t i = 0; i < m; ++i) {
            double* yr = gy + (i / group) * n;
            const double* gr = g.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) yr[j] += gr[j];
          }
        }
      });
}

Var expand_last(const Var& x, std::size_t n) {
  if (n == 0) throw ValidationError("expand_last: extent must be positive");
  Shape out_shape = x.shape();
  out_shape.push_back(n);
  return x.tape().record(
      "expand_last", {x},
      [n, out_shape](Inputs in) {
        Tensor out(out_shape);
        for (std::size_t i = 0; i < in[0]->size(); ++i)
          for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (*in[0])[i];
        return out;
      },
      [n](Inputs in, const Tensor&, const Tensor& g, GradIn gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < in[0]->size(); ++i)
          for (std::size_t j = 0; j < n; ++j) (*gi[0])[i] += g[i * n + j];
      });
}

Var softmax(const Var& x, std::size_t axis) {
  const AxisSplit s = split_axis("softmax", x.shape(), axis);
  return x.tape().record(
      "softmax", {x},
      [s](Inputs in) {
        const Tensor& a = *in[0];
        Tensor out(a.shape());
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, a[base + l * s.inner]);
            double z = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) {
              const double e = std::exp(a[base + l * s.inner] - mx);
              out[base + l * s.inner] = e;
              z += e;
            }
            for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= z;
          }
        return out;
      },
      [s](Inputs, const Tensor& y, const Tensor& g, GradIn gi) {
        if (!gi[0]) return;
        Tensor& ga = *gi[0];
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = base + l * s.inner;
              ga[idx] += y[idx] * (g[idx] - dot);
            }
          }
      });
}

Var log_sum_exp(const Var& x, std::size_t axis) {
  const AxisSplit s = split_axis("log_sum_exp", x.shape(), axis);
  const Shape out_shape = drop_axis(x.shape(), axis);
  return x.tape().record(
      "log_sum_exp", {x},
      [s, out_shape](Inputs in) {
        const Tensor& a = *in[0];
        Tensor out(out_shape);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, a[base + l * s.inner]);
            double z = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) z += std::exp(a[base + l * s.inner] - mx);
            out[o * s.inner + i] = mx + std::log(z);
          }
        return out;
      },
      [s](Inputs in, const Tensor& y, const Tensor& g, GradIn gi) {
        if (!gi[0]) return;
        const Tensor& a = *in[0];
        Tensor& ga = *gi[0];
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            const double lse = y[o * s.inner + i];
            const double go = g[o * s.inner + i];
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = base + l * s.inner;
              ga[idx] += go * std::exp(a[idx] - lse);
            }
          }
      });
}

Var sum(const Var& x) {
  return x.tape().record(
      "sum", {x},
      [](Inputs in) {
        double acc = 0.0;
        for (double v : in[0]->values()) acc += v;
        return Tensor::scalar(acc);
      },
      [](Inputs, const Tensor&, const Tensor& g, GradIn gi) {
        if (!gi[0]) return;
        const double go = g[0];
        for (auto& v : gi[0]->values()) v += go;
      });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Var sum_axis(const Var& x, std::size_t axis) {
  const AxisSplit s = split_axis("sum_axis", x.shape(), axis);
  const Shape out_shape = drop_axis(x.shape(), axis);
  return x.tape().record(
      "sum_axis", {x},
      [s, out_shape](Inputs in) {
        Tensor out(out_shape);
        const Tensor& a = *in[0];
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t l = 0; l < s.len; ++l)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += a[(o * s.len + l) * s.inner + i];
        return out;
      },
      [s](Inputs, const Tensor&, const Tensor& g, GradIn gi) {
        if (!gi[0]) return;
        Tensor& ga = *gi[0];
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t l = 0; l < s.len; ++l)
            for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.len + l) * s.inner + i] += g[o * s.inner + i];
      });
}

Var mean_axis(const Var& x, std::size_t axis) {
  const std::size_t len = split_axis("mean_axis", x.shape(), axis).len;
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(len));
}

Var reshape(const Var& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw ValidationError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  return x.tape().record(
      "reshape", {x}, [shape](Inputs in) { return in[0]->reshaped(shape); },
      [](Inputs, const Tensor&, const Tensor& g, GradIn gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
      });
}

Var concat_columns(const Var& a, const Var& b) {
  require_rank("concat_columns", a, 2);
  require_rank("concat_columns", b, 2);
  const std::size_t m = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  if (b.shape()[0] != m)
    throw ValidationError("concat_columns: row counts differ " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  return a.tape().record(
      "concat_columns", {a, b},
      [m, p, q](Inputs in) {
        Tensor out({m, p + q});
        for (std::size_t i = 0; i < m; ++i) {
          std::copy_n(in[0]->data() + i * p, p, out.data() + i * (p + q));
          std::copy_n(in[1]->data() + i * q, q, out.data() + i * (p + q) + p);
        }
        return out;
      },
      [m, p, q](Inputs, const Tensor&, const Tensor& g, GradIn gi) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* gr = g.data() + i * (p + q);
          if (gi[0])
            for (std::size_t j = 0; j < p; ++j) (*gi[0])[i * p + j] += gr[j];
          if (gi[1])
            for (std::size_t j = 0; j < q; ++j) (*gi[1])[i * q + j] += gr[p + j];
        }
      });
}

Var pick(const Var& x, std::span<const std::size_t> index) {
  require_rank("pick", x, 2);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (index.size() != rows)
    throw ValidationError("pick: need one index per row (" + std::to_string(rows) + "), got " +
                          std::to_string(index.size()));
  for (auto c : index)
    if (c >= cols) throw ValidationError("pick: index " + std::to_string(c) + " out of range " + std::to_string(cols));
  std::vector<std::size_t> idx(index.begin(), index.end());
  return x.tape().record(
      "pick", {x},
      [idx, cols](Inputs in) {
        Tensor out({idx.size()});
        for (std::size_t r = 0; r < idx.size(); ++r) out[r] = (*in[0])[r * cols + idx[r]];
        return out;
      },
      [idx, cols](Inputs, const Tensor&, const Tensor& g, GradIn gi) {
        if (!gi[0]) return;
        for (std::size_t r = 0; r < idx.size(); ++r) (*gi[0])[r * cols + idx[r]] += g[r];
      });
}

Var gather_rows(const Var& table, std::span<const std::size_t> ids) {
  require_rank("gather_rows", table, 2);
  const std::size_t rows = table.shape()[0], width = table.shape()[1];
  if (ids.empty()) throw ValidationError("gather_rows: empty id list");
  for (auto id : ids)
    if (id >= rows) throw ValidationError("gather_rows: id " + std::to_string(id) + " out of range " + std::to_string(rows));
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return table.tape().record(
      "gather_rows", {table},
      [idv, width](Inputs in) {
        Tensor out({idv.size(), width});
        for (std::size_t r = 0; r < idv.size(); ++r)
          std::copy_n(in[0]->data() + idv[r] * width, width, out.data() + r * width);
        return out;
      },
      [idv, width](Inputs, const Tensor&, const Tensor& g, GradIn gi) {
        if (!gi[0]) return;
        for (std::size_t r = 0; r < idv.size(); ++r)
          for (std::size_t j = 0; j < width; ++j) (*gi[0])[idv[r] * width + j] += g[r * width + j];
      });
}

Var tile_rows(const Var& x, std::size_t times) {
  require_rank("tile_rows", x, 2);
  if (times == 0) throw ValidationError("tile_rows: repeat count must be positive");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  return x.tape().record(
      "tile_rows", {x},
      [m, n, times](Inputs in) {
        Tensor out({times * m, n});
        for (std::size_t t = 0; t < times; ++t) std::copy_n(in[0]->data(), m * n, out.data() + t * m * n);
        return out;
      },
      [m, n, times](Inputs, const Tensor&, const Tensor& g, GradIn gi) {
        if (!gi[0]) return;
        for (std::size_t t = 0; t < times; ++t)
          for (std::size_t i = 0; i < m * n; ++i) (*gi[0])[i] += g[t * m * n + i];
      });
}

Var weighted_pool(const Var& weights, const Var& values) {
  require_rank("weighted_pool", weights, 2);
  require_rank("weighted_pool", values, 2);
  const std::size_t b = weights.shape()[0], groups = weights.shape()[1], n = values.shape()[1];
  if (values.shape()[0] != b * groups)
    throw ValidationError("weighted_pool: values " + shape_string(values.shape()) + " do not match weights " +
                          shape_string(weights.shape()));
  return weights.tape().record(
      "weighted_pool", {weights, values},
      [b, groups, n](Inputs in) {
        Tensor out({b, n});
        const Tensor& w = *in[0];
        const Tensor& v = *in[1];
        for (std::size_t e = 0; e < b; ++e)
          for (std::size_t g = 0; g < groups; ++g) {
            const double wg = w[e * groups + g];
            const double* vr = v.data() + (e * groups + g) * n;
            double* o = out.data() + e * n;
            for (std::size_t j = 0; j < n; ++j) o[j] += wg * vr[j];
          }
        return out;
      },
      [b, groups, n](Inputs in, const Tensor&, const Tensor& gout, GradIn gi) {
        const Tensor& w = *in[0];
        const Tensor& v = *in[1];
        for (std::size_t e = 0; e < b; ++e)
          for (std::size_t g = 0; g < groups; ++g) {
            const double* vr = v.data() + (e * groups + g) * n;
            const double* gr = gout.data() + e * n;
            if (gi[0]) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += gr[j] * vr[j];
              (*gi[0])[e * groups + g] += acc;
            }
            if (gi[1]) {
              double* gv = gi[1]->data() + (e * groups + g) * n;
              for (std::size_t j = 0; j < n; ++j) gv[j] += w[e * groups + g] * gr[j];
            }
          }
      });
}

Var dropout(const Var& x, double rate, RngStream& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor mask(x.shape());
  for (auto& m : mask.values()) m = rng.bernoulli(rate) ? 0.0 : keep_scale;
  return x.tape().record(
      "dropout", {x},
      [mask](Inputs in) {
        Tensor out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
        return out;
      },
      [mask](Inputs, const Tensor&, const Tensor& g, GradIn gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * mask[i];
      });
}

}  // namespace ucam
