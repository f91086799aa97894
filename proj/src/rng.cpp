#include "fairdisco/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fairdisco {

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  std::uint64_t state = base ^ 0x51ed270b31f0a9c3ULL;
  for (const char c : tag) {
    state ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    splitmix64(state);
  }
  return splitmix64(state);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                          std::uint64_t index_a, std::uint64_t index_b) {
  std::uint64_t state = derive_seed(base, tag) ^ index_a;
  splitmix64(state);
  state ^= index_b;
  return splitmix64(state);
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (lo > hi) throw std::invalid_argument("Rng::uniform_int: lo > hi");
  const auto range = static_cast<std::uint64_t>(hi - lo) + 1;
  if (range == 0) return static_cast<std::int64_t>(gen_());  // full 64-bit span
  const auto scaled = static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(gen_()) * range) >> 64);
  return lo + static_cast<std::int64_t>(scaled);
}

double Rng::normal() {
  const double u1 = std::max(uniform(), 0x1.0p-60);
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

WeightedSampler::WeightedSampler(std::span<const double> weights) {
  if (weights.empty()) throw std::invalid_argument("WeightedSampler: no weights");
  cumulative_.reserve(weights.size());
  double acc = 0.0;
  for (const double w : weights) {
    if (!(w > 0.0) || !std::isfinite(w))
      throw std::invalid_argument("WeightedSampler: weights must be positive and finite");
    acc += w;
    cumulative_.push_back(acc);
  }
}

std::size_t WeightedSampler::draw(Rng& rng) const {
  const double u = rng.uniform() * cumulative_.back();
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  return it == cumulative_.end() ? cumulative_.size() - 1
                                 : static_cast<std::size_t>(it - cumulative_.begin());
}

}  // namespace fairdisco
