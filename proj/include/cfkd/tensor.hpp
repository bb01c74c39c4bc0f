#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace cfkd {

/// Dense row-major array of doubles.
///
/// The element count always equals the product of the shape. Finiteness is
/// not enforced on every write; call `check_finite` at trust boundaries.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  [[nodiscard]] const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] bool empty() const noexcept { return values_.empty(); }

  /// First dimension; 1 for rank-0/1 tensors treated as a single row.
  [[nodiscard]] std::size_t rows() const noexcept;
  /// Product of all dimensions after the first.
  [[nodiscard]] std::size_t cols() const noexcept;

  [[nodiscard]] std::span<double> values() noexcept { return values_; }
  [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
  [[nodiscard]] double* data() noexcept { return values_.data(); }
  [[nodiscard]] const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  [[nodiscard]] std::span<const double> row(std::size_t r) const;
  [[nodiscard]] std::span<double> row(std::size_t r);

  void fill(double v) noexcept;
  /// Throws NumericError naming `where` if any element is NaN or infinite.
  void check_finite(std::string_view where) const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

[[nodiscard]] std::size_t shape_product(const std::vector<std::size_t>& shape) noexcept;

}  // namespace cfkd
