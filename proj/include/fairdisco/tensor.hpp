#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace fairdisco {

class Rng;

/// Dense row-major double tensor. Small by design: shape bookkeeping plus the
/// handful of accessors the layers need; heavy math happens through Eigen maps
/// over data().
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor from(std::vector<int> s, std::vector<double> values);
  static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0);

  std::int64_t numel() const;
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // 2D/4D indexing (row-major)
  double& at(int i, int j);
  double at(int i, int j) const;
  double& at(int n, int c, int h, int w);
  double at(int n, int c, int h, int w) const;

  std::span<double> row(int i);              // 2D only
  std::span<const double> row(int i) const;  // 2D only

  void fill(double value);
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

bool bitwise_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace fairdisco
