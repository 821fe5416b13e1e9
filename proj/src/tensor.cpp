#include "ucam/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "ucam/error.hpp"

namespace ucam {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (auto e : shape_)
    if (e == 0) throw ValidationError("tensor extents must be positive, got " + shape_string(shape_));
  data_.assign(shape_size(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  for (auto e : shape_)
    if (e == 0) throw ValidationError("tensor extents must be positive, got " + shape_string(shape_));
  if (data_.size() != shape_size(shape_))
    throw ValidationError("tensor of shape " + shape_string(shape_) + " needs " +
                          std::to_string(shape_size(shape_)) + " values, got " + std::to_string(data_.size()));
  if (!all_finite()) throw ValidationError("tensor values must be finite");
}

Tensor Tensor::constant(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::gaussian(Shape shape, RngStream& rng, double mean, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_) v = rng.gaussian(mean, stddev);
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.data_[0] = value;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ValidationError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw ValidationError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_)
    throw ValidationError("shape mismatch in accumulate: " + shape_string(shape_) + " vs " +
                          shape_string(other.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double factor) {
  for (auto& v : data_) v *= factor;
  return *this;
}

}  // namespace ucam
