#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "ucam/rng.hpp"
#include "ucam/tape.hpp"
#include "ucam/tensor.hpp"

namespace ucam::test {

/// Builds a scalar loss from leaves on a fresh tape.
using ScalarGraph = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double evaluate(const ScalarGraph& graph, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  return graph(tape, leaves).item();
}

struct FdResult {
  double worst_relative = 0.0;
  std::size_t probes = 0;
};

/// Compares the tape gradient of every input coordinate (or `max_probes`
/// random ones) with a central difference of step h. Relative error uses
/// max(|analytic|, |numeric|, floor) as the denominator so that coordinates
/// with a vanishing derivative are judged on an absolute scale.
inline FdResult check_gradients(const ScalarGraph& graph, std::vector<Tensor> inputs, RngStream& rng,
                                std::size_t max_probes = 100, double h = 1e-5, double floor = 1e-3) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  const Var root = graph(tape, leaves);
  const GradientStore grads = tape.backward(root);

  std::size_t total = 0;
  for (const auto& t : inputs) total += t.size();
  FdResult r;
  for (std::size_t p = 0; p < std::min(max_probes, total); ++p) {
    std::size_t flat = total <= max_probes ? p : rng.below(total);
    std::size_t which = 0;
    while (flat >= inputs[which].size()) flat -= inputs[which++].size();
    const double analytic = grads.get_or_zero(leaves[which])[flat];
    const double saved = inputs[which][flat];
    inputs[which][flat] = saved + h;
    const double up = evaluate(graph, inputs);
    inputs[which][flat] = saved - h;
    const double down = evaluate(graph, inputs);
    inputs[which][flat] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
    r.worst_relative = std::max(r.worst_relative, std::fabs(analytic - numeric) / denom);
    ++r.probes;
  }
  return r;
}

inline Tensor random_tensor(Shape shape, RngStream& rng, double stddev = 1.0) {
  return Tensor::gaussian(std::move(shape), rng, 0.0, stddev);
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::size_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("ucam-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace ucam::test
