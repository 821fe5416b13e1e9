#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "ucam/rng.hpp"
#include "ucam/tape.hpp"

namespace ucam {

enum class Elementwise { Add, Subtract, Multiply, Relu, Softplus, Tanh, Exponential, Logarithm, Negate };

/// Dispatches to the named primitive. Binary kinds need `b`; unary kinds reject it.
Var elementwise(Elementwise kind, const Var& a, const std::optional<Var>& b = std::nullopt);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var relu(const Var& x);
/// log(1 + exp(x)) as max(x, 0) + log1p(exp(-|x|)).
Var softplus(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var exp(const Var& x);
/// Throws ValidationError unless every input is strictly positive.
Var log(const Var& x);
Var negate(const Var& x);
Var sqrt(const Var& x);
Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double offset);

/// [m,k] x [k,n] -> [m,n].
Var matmul(const Var& a, const Var& b);

/// x is [m,n], y is [r,n] (or [n], read as r = 1) with r dividing m; row i of
/// x receives row i / (m / r) of y. Covers bias addition (r = 1) and
/// per-example broadcasts over grouped rows.
Var add_rowwise(const Var& x, const Var& y);
/// [m] -> [m,n] by repeating each entry along a new last axis.
Var expand_last(const Var& x, std::size_t n);

Var softmax(const Var& x, std::size_t axis);
/// Reduces `axis`; the result drops that extent.
Var log_sum_exp(const Var& x, std::size_t axis);

Var sum(const Var& x);
Var mean(const Var& x);
Var sum_axis(const Var& x, std::size_t axis);
Var mean_axis(const Var& x, std::size_t axis);

Var reshape(const Var& x, Shape shape);
/// Concatenates [m,p] and [m,q] into [m,p+q].
Var concat_columns(const Var& a, const Var& b);
/// [B,C] x indices(B) -> [B], entry b is x[b, index[b]].
Var pick(const Var& x, std::span<const std::size_t> index);
/// table [V,h], ids(n) -> [n,h].
Var gather_rows(const Var& table, std::span<const std::size_t> ids);
/// [m,n] -> [times*m, n], the whole block repeated `times` times.
Var tile_rows(const Var& x, std::size_t times);
/// weights [B,G], values [B*G,n] -> [B,n]; out[b] = sum_g weights[b,g] * values[b*G+g].
Var weighted_pool(const Var& weights, const Var& values);

/// Inverted dropout: with training, each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate). Identity otherwise.
Var dropout(const Var& x, double rate, RngStream& rng, bool training);

}  // namespace ucam
