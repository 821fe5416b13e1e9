#include "ucam/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "ucam/error.hpp"
#include "ucam/kernels.hpp"

namespace ucam {

using nlohmann::json;

namespace {

constexpr std::uint64_t kSweepOrderStream = 13;
constexpr std::uint64_t kSweepSampleStream = 14;
constexpr double kInf = std::numeric_limits<double>::infinity();

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double cell_distance(std::size_t a, std::size_t b, std::size_t cols) {
  const double dr = static_cast<double>(a / cols) - static_cast<double>(b / cols);
  const double dc = static_cast<double>(a % cols) - static_cast<double>(b % cols);
  return std::sqrt(dr * dr + dc * dc);
}

std::vector<std::size_t> support(const Tensor& t) {
  std::vector<std::size_t> s;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] > 0.0) s.push_back(i);
  return s;
}

double sinkhorn(const AttentionMap& a, const AttentionMap& b, const SinkhornOptions& o) {
  const std::vector<std::size_t> si = support(a.grid()), sj = support(b.grid());
  const std::size_t n = si.size(), m = sj.size(), cols = a.cols();
  std::vector<double> cost(n * m), log_a(n), log_b(m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) cost[i * m + j] = cell_distance(si[i], sj[j], cols);
  for (std::size_t i = 0; i < n; ++i) log_a[i] = std::log(a.grid()[si[i]]);
  for (std::size_t j = 0; j < m; ++j) log_b[j] = std::log(b.grid()[sj[j]]);

  // Dual potentials scaled by 1/epsilon; plan P_ij = exp(f_i + g_j - C_ij / epsilon).
  std::vector<double> f(n, 0.0), g(m, 0.0), row_lse(n), col_lse(m);
  const double scale = -1.0 / o.epsilon;
  kernels::LogSumExpArgs rows{n, m, false, scale, cost.data(), g.data(), row_lse.data()};
  kernels::LogSumExpArgs columns{n, m, true, scale, cost.data(), f.data(), col_lse.data()};
  kernels::log_sum_exp(rows);
  for (std::size_t it = 0; it < o.max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) f[i] = log_a[i] - row_lse[i];
    kernels::log_sum_exp(columns);
    for (std::size_t j = 0; j < m; ++j) g[j] = log_b[j] - col_lse[j];
    kernels::log_sum_exp(rows);
    double violation = 0.0;
    for (std::size_t i = 0; i < n; ++i) violation += std::fabs(std::exp(f[i] + row_lse[i]) - a.grid()[si[i]]);
    if (violation < o.tolerance) break;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) total += std::exp(f[i] + g[j] + scale * cost[i * m + j]) * cost[i * m + j];
  if (!std::isfinite(total)) throw NumericalFault("emd: sinkhorn produced a non-finite cost");
  return total;
}

// Successive shortest paths (Bellman-Ford) on the transportation network
// source -> supply cell -> demand cell -> sink.
double exact_transport(const AttentionMap& a, const AttentionMap& b) {
  const std::size_t cells = a.grid().size(), cols = a.cols();
  const std::size_t source = 2 * cells, sink = 2 * cells + 1, nodes = 2 * cells + 2;
  struct Edge {
    std::size_t to;
    double cap;
    double cost;
  };
  std::vector<Edge> edges;
  std::vector<std::vector<std::size_t>> out(nodes);
  auto add_edge = [&](std::size_t u, std::size_t v, double cap, double cost) {
    out[u].push_back(edges.size());
    edges.push_back({v, cap, cost});
    out[v].push_back(edges.size());
    edges.push_back({u, 0.0, -cost});
  };
  const double unbounded = 2.0;
  for (std::size_t i = 0; i < cells; ++i) add_edge(source, i, a.grid()[i], 0.0);
  for (std::size_t j = 0; j < cells; ++j) add_edge(cells + j, sink, b.grid()[j], 0.0);
  for (std::size_t i = 0; i < cells; ++i)
    for (std::size_t j = 0; j < cells; ++j) add_edge(i, cells + j, unbounded, cell_distance(i, j, cols));

  constexpr double kResidual = 1e-15;
  double remaining = 0.0;
  for (double v : a.grid().values()) remaining += v;
  std::vector<double> dist(nodes);
  std::vector<std::size_t> via(nodes);
  while (remaining > kResidual) {
    std::fill(dist.begin(), dist.end(), kInf);
    dist[source] = 0.0;
    for (std::size_t round = 0; round + 1 < nodes; ++round) {
      bool changed = false;
      for (std::size_t u = 0; u < nodes; ++u) {
        if (dist[u] == kInf) continue;
        for (std::size_t e : out[u]) {
          if (edges[e].cap <= kResidual) continue;
          const double d = dist[u] + edges[e].cost;
          if (d < dist[edges[e].to] - 1e-15) {
            dist[edges[e].to] = d;
            via[edges[e].to] = e;
            changed = true;
          }
        }
      }
      if (!changed) break;
    }
    if (dist[sink] == kInf) break;
    double push = remaining;
    for (std::size_t v = sink; v != source; v = edges[via[v] ^ 1].to) push = std::min(push, edges[via[v]].cap);
    for (std::size_t v = sink; v != source; v = edges[via[v] ^ 1].to) {
      edges[via[v]].cap -= push;
      edges[via[v] ^ 1].cap += push;
    }
    remaining -= push;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < cells; ++i)
    for (std::size_t e : out[i]) {
      const Edge& fwd = edges[e];
      if ((e & 1) == 0 && fwd.to >= cells && fwd.to < 2 * cells) total += (unbounded - fwd.cap) * fwd.cost;
    }
  return total;
}

}  // namespace

double vqa_accuracy(std::size_t predicted, std::span<const std::size_t> annotations) {
  if (annotations.empty()) throw ValidationError("vqa_accuracy: annotations must be nonempty");
  const auto matches = static_cast<double>(std::count(annotations.begin(), annotations.end(), predicted));
  return std::min(matches / 3.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(values.size());
  for (std::size_t start = 0; start < order.size();) {
    std::size_t end = start + 1;
    while (end < order.size() && values[order[end]] == values[order[start]]) ++end;
    const double rank = 0.5 * static_cast<double>(start + 1 + end);
    for (std::size_t k = start; k < end; ++k) ranks[order[k]] = rank;
    start = end;
  }
  return ranks;
}

std::optional<double> spearman_rank_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ValidationError("spearman_rank_correlation: lengths " + std::to_string(a.size()) + " and " +
                          std::to_string(b.size()) + " differ");
  if (a.size() < 2) throw ValidationError("spearman_rank_correlation: need at least 2 values");
  for (std::span<const double> s : {a, b})
    for (double v : s)
      if (!std::isfinite(v)) throw ValidationError("spearman_rank_correlation: non-finite value");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  return pearson(ra, rb);
}

AttentionMap::AttentionMap(Tensor grid, bool normalized) : grid_(std::move(grid)), normalized_(normalized) {
  if (grid_.rank() != 2) throw ValidationError("attention map must be [rows, cols], got " + shape_string(grid_.shape()));
  double total = 0.0;
  for (double v : grid_.values()) {
    if (v < 0.0) throw ValidationError("attention map has a negative entry");
    total += v;
  }
  if (normalized_ && std::fabs(total - 1.0) > 1e-9)
    throw ValidationError("attention map marked normalized sums to " + std::to_string(total));
}

AttentionMap AttentionMap::normalize(Tensor grid) {
  double total = 0.0;
  for (double v : grid.values()) total += v;
  if (!(total > 0.0)) throw ValidationError("attention map has no mass to normalize");
  for (auto& v : grid.values()) v /= total;
  return AttentionMap(std::move(grid), true);
}

double emd(const AttentionMap& a, const AttentionMap& b, EmdMethod method, const SinkhornOptions& options) {
  if (a.grid().shape() != b.grid().shape())
    throw ValidationError("emd: extents " + shape_string(a.grid().shape()) + " and " + shape_string(b.grid().shape()) +
                          " differ");
  if (!a.normalized() || !b.normalized()) throw ValidationError("emd: both maps must be normalized");
  if (method == EmdMethod::ExactSmall) {
    if (a.grid().size() > kExactEmdMaxCells)
      throw ValidationError("emd: exact method supports at most " + std::to_string(kExactEmdMaxCells) +
                            " cells; use sinkhorn for " + shape_string(a.grid().shape()) + " maps");
    return exact_transport(a, b);
  }
  if (!(options.epsilon > 0.0) || !(options.tolerance > 0.0) || options.max_iterations == 0)
    throw ValidationError("emd: invalid sinkhorn options");
  return sinkhorn(a, b, options);
}

UncertaintyErrorReport uncertainty_error_report(std::span<const UncertaintyEstimate> estimates,
                                                std::span<const std::size_t> predictions,
                                                std::span<const std::size_t> targets) {
  if (estimates.size() != predictions.size() || estimates.size() != targets.size())
    throw ValidationError("uncertainty_error_report: estimates, predictions and targets must align");
  UncertaintyErrorReport r;
  double sum_correct = 0.0, sum_wrong = 0.0;
  std::vector<double> variance, indicator;
  for (std::size_t k = 0; k < estimates.size(); ++k) {
    const auto& e = estimates[k];
    if (targets[k] >= e.mean_probs.size()) throw ValidationError("uncertainty_error_report: target out of range");
    const double p_miss = 1.0 - e.mean_probs[targets[k]];
    const double error = p_miss >= 1.0 ? kInf : std::log(1.0 / (1.0 - p_miss));
    r.errors.push_back(error);
    const bool wrong = predictions[k] != targets[k];
    (wrong ? sum_wrong : sum_correct) += e.predictive;
    ++(wrong ? r.wrong : r.correct);
    if (std::isfinite(error)) {
      variance.push_back(e.predictive);
      indicator.push_back(wrong ? 1.0 : 0.0);
    }
  }
  if (r.correct > 0) r.mean_predictive_correct = sum_correct / static_cast<double>(r.correct);
  if (r.wrong > 0) r.mean_predictive_wrong = sum_wrong / static_cast<double>(r.wrong);
  if (variance.size() >= 2) r.point_biserial = pearson(variance, indicator);
  return r;
}

std::vector<SweepEntry> epistemic_sweep(const Dataset& train_set, const Dataset& heldout, std::span<const double> fractions,
                                        const ModelConfig& model, const TrainConfig& config, std::size_t mc_samples) {
  if (heldout.examples.empty()) throw ValidationError("epistemic_sweep: empty held-out set");
  RngStream order_rng = RngStream(config.seed).split(kSweepOrderStream);
  const auto order = shuffled_indices(train_set.size(), order_rng);
  std::vector<SweepEntry> out;
  for (double fraction : fractions) {
    if (!(fraction > 0.0 && fraction <= 1.0))
      throw ValidationError("epistemic_sweep: fraction " + std::to_string(fraction) + " outside (0, 1]");
    const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(train_set.size())));
    if (count == 0)
      throw ValidationError("epistemic_sweep: fraction " + std::to_string(fraction) + " leaves no training examples");
    const Dataset subset = train_set.subset(std::span(order).first(count));
    const TrainResult trained = train(subset, nullptr, model, config);

    RngStream rng = RngStream(config.seed).split(kSweepSampleStream);
    std::vector<double> entropies;
    for (const auto& ex : heldout.examples)
      entropies.push_back(mc_predict(trained.params, model, ex, rng, mc_samples).entropy);
    SweepEntry e{fraction, count, 0.0, 0.0};
    for (double h : entropies) e.mean_entropy += h;
    e.mean_entropy /= static_cast<double>(entropies.size());
    for (double h : entropies) e.entropy_variance += (h - e.mean_entropy) * (h - e.mean_entropy);
    e.entropy_variance /= static_cast<double>(entropies.size());
    out.push_back(e);
  }
  return out;
}

AleatoricSubsetReport aleatoric_subset_report(std::span<const UncertaintyEstimate> estimates,
                                              std::span<const bool> noisy) {
  if (estimates.size() != noisy.size()) throw ValidationError("aleatoric_subset_report: estimates and flags must align");
  if (estimates.empty()) throw ValidationError("aleatoric_subset_report: no estimates");
  AleatoricSubsetReport r;
  double clean = 0.0, dirty = 0.0;
  for (std::size_t k = 0; k < estimates.size(); ++k) {
    const auto& v = estimates[k].aleatoric_variance;
    if (v.empty()) throw ValidationError("aleatoric_subset_report: estimate without variances");
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (noisy[k]) {
      dirty += m;
      ++r.noisy_count;
    } else {
      clean += m;
      ++r.clean_count;
    }
  }
  if (r.clean_count > 0) r.clean_mean = clean / static_cast<double>(r.clean_count);
  if (r.noisy_count > 0) r.noisy_mean = dirty / static_cast<double>(r.noisy_count);
  return r;
}

std::vector<AttentionMap> attention_maps(std::span<const Prediction> predictions) {
  std::vector<AttentionMap> maps;
  maps.reserve(predictions.size());
  for (const auto& p : predictions) maps.push_back(AttentionMap::normalize(p.attention));
  return maps;
}

namespace {
json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
}  // namespace

json report_json(const UncertaintyErrorReport& r) {
  std::size_t infinite = 0;
  double finite_sum = 0.0;
  for (double e : r.errors) std::isfinite(e) ? void(finite_sum += e) : void(++infinite);
  const std::size_t finite = r.errors.size() - infinite;
  return json{{"correct", r.correct},
              {"wrong", r.wrong},
              {"mean_predictive_correct", optional_json(r.mean_predictive_correct)},
              {"mean_predictive_wrong", optional_json(r.mean_predictive_wrong)},
              {"point_biserial", optional_json(r.point_biserial)},
              {"mean_error", finite > 0 ? json(finite_sum / static_cast<double>(finite)) : json(nullptr)},
              {"infinite_errors", infinite}};
}

json report_json(const AleatoricSubsetReport& r) {
  return json{{"clean_mean", optional_json(r.clean_mean)},
              {"noisy_mean", optional_json(r.noisy_mean)},
              {"clean_count", r.clean_count},
              {"noisy_count", r.noisy_count}};
}

json report_json(const MetricsReport& r) {
  json j{{"accuracy", r.accuracy},
         {"rank_correlation", optional_json(r.rank_correlation)},
         {"rank_correlation_count", r.rank_correlation_count},
         {"emd", optional_json(r.emd)}};
  if (r.uncertainty_error) j["uncertainty_error"] = report_json(*r.uncertainty_error);
  if (r.aleatoric_subsets) j["aleatoric_subsets"] = report_json(*r.aleatoric_subsets);
  if (!r.sweep.empty()) {
    json s = json::array();
    for (const auto& e : r.sweep)
      s.push_back({{"fraction", e.fraction},
                   {"train_size", e.train_size},
                   {"mean_entropy", e.mean_entropy},
                   {"entropy_variance", e.entropy_variance}});
    j["epistemic_sweep"] = s;
  }
  return j;
}

}  // namespace ucam
