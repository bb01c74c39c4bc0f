#include "cfkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "cfkd/errors.hpp"

namespace cfkd {

std::size_t shape_product(const std::vector<std::size_t>& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), values_(shape_product(shape_), fill) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive");
  }
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive");
  }
  if (values_.size() != shape_product(shape_)) {
    throw ShapeError("tensor has " + std::to_string(values_.size()) + " values but shape holds " +
                     std::to_string(shape_product(shape_)));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  if (rows.size() == 0) throw ShapeError("empty matrix literal");
  const std::size_t ncols = rows.begin()->size();
  std::vector<double> v;
  v.reserve(rows.size() * ncols);
  for (const auto& r : rows) {
    if (r.size() != ncols) throw ShapeError("ragged matrix literal");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), ncols}, std::move(v));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::rows() const noexcept { return shape_.size() <= 1 ? 1 : shape_.front(); }

std::size_t Tensor::cols() const noexcept {
  if (shape_.empty()) return values_.size();
  if (shape_.size() == 1) return shape_.front();
  return values_.size() / shape_.front();
}

std::span<const double> Tensor::row(std::size_t r) const {
  return std::span<const double>(values_).subspan(r * cols(), cols());
}

std::span<double> Tensor::row(std::size_t r) { return std::span<double>(values_).subspan(r * cols(), cols()); }

void Tensor::fill(double v) noexcept { std::fill(values_.begin(), values_.end(), v); }

void Tensor::check_finite(std::string_view where) const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      throw NumericError("non-finite value at index " + std::to_string(i) + " in " + std::string(where));
    }
  }
}

}  // namespace cfkd
