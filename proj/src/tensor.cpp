#include "fairdisco/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "fairdisco/rng.hpp"

namespace fairdisco {

namespace {
std::int64_t product(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (const int d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= d;
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
  data.assign(static_cast<std::size_t>(product(shape)), 0.0);
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> values) {
  Tensor t;
  t.shape = std::move(s);
  if (product(t.shape) != static_cast<std::int64_t>(values.size()))
    throw std::invalid_argument("Tensor::from: shape does not match value count");
  t.data = std::move(values);
  return t;
}

Tensor Tensor::randn(std::vector<int> s, Rng& rng, double stddev) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = rng.normal() * stddev;
  return t;
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(data.size()); }

double& Tensor::at(int i, int j) {
  return data[static_cast<std::size_t>(i) * shape[1] + j];
}
double Tensor::at(int i, int j) const {
  return data[static_cast<std::size_t>(i) * shape[1] + j];
}

double& Tensor::at(int n, int c, int h, int w) {
  const std::size_t idx =
      ((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w;
  return data[idx];
}
double Tensor::at(int n, int c, int h, int w) const {
  const std::size_t idx =
      ((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w;
  return data[idx];
}

std::span<double> Tensor::row(int i) {
  return {data.data() + static_cast<std::size_t>(i) * shape[1], static_cast<std::size_t>(shape[1])};
}
std::span<const double> Tensor::row(int i) const {
  return {data.data() + static_cast<std::size_t>(i) * shape[1], static_cast<std::size_t>(shape[1])};
}

void Tensor::fill(double value) { std::fill(data.begin(), data.end(), value); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) return false;
  return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace fairdisco
