#include "fairdisco/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include <fmt/format.h>

#include "fairdisco/core.hpp"

namespace fairdisco {

namespace {

void check_prob_rows(const Tensor& probs, const char* what, int min_cols = 1) {
  if (probs.ndim() != 2)
    throw std::invalid_argument(fmt::format("{}: expected a B x K matrix", what));
  const int batch = probs.dim(0);
  const int cols = probs.dim(1);
  if (batch < 1) throw std::invalid_argument(fmt::format("{}: empty batch", what));
  if (cols < min_cols)
    throw std::invalid_argument(fmt::format("{}: needs at least {} columns", what, min_cols));
  for (int b = 0; b < batch; ++b) {
    double sum = 0.0;
    for (const double p : probs.row(b)) {
      if (!std::isfinite(p) || p < -kLossInputSumTol)
        throw std::invalid_argument(fmt::format("{}: invalid probability entry", what));
      sum += p;
    }
    if (std::abs(sum - 1.0) > kLossInputSumTol)
      throw std::invalid_argument(
          fmt::format("{}: row {} sums to {} (expected 1)", what, b, sum));
  }
}

void check_labels(std::span<const int> labels, int batch, int num_classes, const char* what) {
  if (static_cast<int>(labels.size()) != batch)
    throw std::invalid_argument(fmt::format("{}: label count != batch size", what));
  for (const int y : labels)
    if (y < 0 || y >= num_classes)
      throw std::out_of_range(fmt::format("{}: label {} out of range [0, {})", what, y, num_classes));
}

double clamped_log(double p) { return std::log(p < kLogEps ? kLogEps : p); }

}  // namespace

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha))
    throw ValidationError("loss weight alpha must be finite and >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta))
    throw ValidationError("loss weight beta must be finite and >= 0");
  if (!(tau > 0.0) || !std::isfinite(tau))
    throw ValidationError("contrastive temperature tau must be finite and > 0");
}

std::string to_string(LossTerm term) {
  switch (term) {
    case LossTerm::Target: return "L_c";
    case LossTerm::Confusion: return "L_conf";
    case LossTerm::Sensitive: return "L_s";
    case LossTerm::Contrastive: return "L_contr";
  }
  throw std::logic_error("unreachable");
}

std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::FeatureExtractor: return "phi";
    case ParamGroup::TargetHead: return "f_c";
    case ParamGroup::SensitiveHead: return "f_s";
    case ParamGroup::ProjectionHead: return "H";
    case ParamGroup::AttributeEmbedder: return "psi";
  }
  throw std::logic_error("unreachable");
}

ScopeTable ScopeTable::standard() {
  ScopeTable table;
  table.set(LossTerm::Target, ParamGroup::FeatureExtractor, true);
  table.set(LossTerm::Target, ParamGroup::TargetHead, true);
  table.set(LossTerm::Confusion, ParamGroup::FeatureExtractor, true);
  table.set(LossTerm::Sensitive, ParamGroup::SensitiveHead, true);
  table.set(LossTerm::Contrastive, ParamGroup::FeatureExtractor, true);
  table.set(LossTerm::Contrastive, ParamGroup::ProjectionHead, true);
  return table;
}

ScopeTable ScopeTable::literal() {
  ScopeTable table = standard();
  table.set(LossTerm::Confusion, ParamGroup::SensitiveHead, true);
  return table;
}

void ScopeTable::set(LossTerm term, ParamGroup group, bool allowed) {
  const auto t = static_cast<std::size_t>(term);
  const auto bit = 1u << static_cast<int>(group);
  if (allowed)
    masks_[t] |= bit;
  else
    masks_[t] &= ~bit;
}

double target_loss(const Tensor& class_probs, std::span<const int> true_conditions,
                   std::span<const double> sample_weights) {
  return target_loss_grad(class_probs, true_conditions, sample_weights).value;
}

ValueGrad target_loss_grad(const Tensor& class_probs, std::span<const int> true_conditions,
                           std::span<const double> sample_weights) {
  check_prob_rows(class_probs, "target_loss");
  const int batch = class_probs.dim(0);
  check_labels(true_conditions, batch, class_probs.dim(1), "target_loss");
  if (!sample_weights.empty() && static_cast<int>(sample_weights.size()) != batch)
    throw std::invalid_argument("target_loss: weight count != batch size");

  ValueGrad out;
  out.grad = Tensor::zeros(class_probs.shape);
  double sum = 0.0;
  for (int b = 0; b < batch; ++b) {
    const double w = sample_weights.empty() ? 1.0 : sample_weights[static_cast<std::size_t>(b)];
    const int y = true_conditions[static_cast<std::size_t>(b)];
    const double p = class_probs.at(b, y);
    sum += -w * clamped_log(p);
    if (p >= kLogEps) out.grad.at(b, y) = -w / (p * batch);
  }
  out.value = sum / batch;
  return out;
}

double confusion_loss(const Tensor& skin_probs) {
  return confusion_loss_grad(skin_probs).value;
}

ValueGrad confusion_loss_grad(const Tensor& skin_probs) {
  check_prob_rows(skin_probs, "confusion_loss", 2);
  const int batch = skin_probs.dim(0);
  const int n = skin_probs.dim(1);
  ValueGrad out;
  out.grad = Tensor::zeros(skin_probs.shape);
  double sum = 0.0;
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < n; ++i) {
      const double p = skin_probs.at(b, i);
      sum += -clamped_log(p) / n;
      if (p >= kLogEps) out.grad.at(b, i) = -1.0 / (n * p * batch);
    }
  }
  out.value = sum / batch;
  return out;
}

double sensitive_loss(const Tensor& skin_probs, std::span<const int> true_types) {
  return sensitive_loss_grad(skin_probs, true_types).value;
}

ValueGrad sensitive_loss_grad(const Tensor& skin_probs, std::span<const int> true_types) {
  check_prob_rows(skin_probs, "sensitive_loss");
  const int batch = skin_probs.dim(0);
  check_labels(true_types, batch, skin_probs.dim(1), "sensitive_loss");
  ValueGrad out;
  out.grad = Tensor::zeros(skin_probs.shape);
  double sum = 0.0;
  for (int b = 0; b < batch; ++b) {
    const int s = true_types[static_cast<std::size_t>(b)];
    const double p = skin_probs.at(b, s);
    sum += -clamped_log(p);
    if (p >= kLogEps) out.grad.at(b, s) = -1.0 / (p * batch);
  }
  out.value = sum / batch;
  return out;
}

double contrastive_loss(const Tensor& embeddings, std::span<const int> true_conditions,
                        double tau) {
  return contrastive_loss_grad(embeddings, true_conditions, tau).value;
}

ValueGrad contrastive_loss_grad(const Tensor& embeddings, std::span<const int> true_conditions,
                                double tau) {
  if (embeddings.ndim() != 2)
    throw std::invalid_argument("contrastive_loss: expected a B x d matrix");
  const int batch = embeddings.dim(0);
  const int dim = embeddings.dim(1);
  if (batch < 2) throw std::invalid_argument("contrastive_loss: batch size must be >= 2");
  if (!(tau > 0.0)) throw std::invalid_argument("contrastive_loss: tau must be > 0");
  if (static_cast<int>(true_conditions.size()) != batch)
    throw std::invalid_argument("contrastive_loss: label count != batch size");

  // Normalize once; cosine similarity is the dot of unit vectors.
  std::vector<double> norms(static_cast<std::size_t>(batch));
  Tensor unit = Tensor::zeros(embeddings.shape);
  for (int i = 0; i < batch; ++i) {
    double sq = 0.0;
    for (int k = 0; k < dim; ++k) sq += embeddings.at(i, k) * embeddings.at(i, k);
    const double norm = std::sqrt(sq);
    if (!(norm > 1e-15) || !std::isfinite(norm))
      throw std::invalid_argument(
          fmt::format("contrastive_loss: zero-norm embedding at row {}", i));
    norms[static_cast<std::size_t>(i)] = norm;
    for (int k = 0; k < dim; ++k) unit.at(i, k) = embeddings.at(i, k) / norm;
  }

  Tensor cos = Tensor::zeros({batch, batch});
  for (int i = 0; i < batch; ++i)
    for (int j = 0; j < batch; ++j) {
      double dot = 0.0;
      for (int k = 0; k < dim; ++k) dot += unit.at(i, k) * unit.at(j, k);
      cos.at(i, j) = dot;
    }

  // cos_grad(i, j) accumulates dL/dcos for the directed pair (anchor i, other j).
  Tensor cos_grad = Tensor::zeros({batch, batch});
  double loss_sum = 0.0;
  int contributing = 0;
  for (int i = 0; i < batch; ++i) {
    std::vector<int> positives, negatives;
    for (int j = 0; j < batch; ++j) {
      if (j == i) continue;
      (true_conditions[static_cast<std::size_t>(j)] == true_conditions[static_cast<std::size_t>(i)]
           ? positives
           : negatives)
          .push_back(j);
    }
    if (positives.empty()) continue;
    ++contributing;
    const double inv_p = 1.0 / static_cast<double>(positives.size());

    // Stable per-pair log-ratio: shift by the max exponent in the denominator.
    double neg_max = -std::numeric_limits<double>::infinity();
    for (const int n : negatives) neg_max = std::max(neg_max, cos.at(i, n) / tau);
    for (const int p : positives) {
      const double a = cos.at(i, p) / tau;
      const double shift = std::max(a, neg_max);
      const double ea = std::exp(a - shift);
      double denom = ea;
      for (const int n : negatives) denom += std::exp(cos.at(i, n) / tau - shift);
      loss_sum += -inv_p * ((a - shift) - std::log(denom));

      // d/da of -(a - log(e^a + sum_n e^bn)) = -(1 - e^a/denom)
      cos_grad.at(i, p) += -inv_p * (1.0 - ea / denom) / tau;
      for (const int n : negatives) {
        const double en = std::exp(cos.at(i, n) / tau - shift);
        cos_grad.at(i, n) += inv_p * (en / denom) / tau;
      }
    }
  }

  ValueGrad out;
  out.grad = Tensor::zeros(embeddings.shape);
  if (contributing == 0) {
    out.value = 0.0;
    return out;
  }
  const double inv_anchor = 1.0 / contributing;
  out.value = loss_sum * inv_anchor;

  // Chain through cosine: d(u_i . u_j)/de_i = (u_j - cos_ij * u_i) / ||e_i||.
  for (int i = 0; i < batch; ++i)
    for (int j = 0; j < batch; ++j) {
      const double g = cos_grad.at(i, j) * inv_anchor;
      if (g == 0.0) continue;
      const double c = cos.at(i, j);
      const double inv_ni = 1.0 / norms[static_cast<std::size_t>(i)];
      const double inv_nj = 1.0 / norms[static_cast<std::size_t>(j)];
      for (int k = 0; k < dim; ++k) {
        out.grad.at(i, k) += g * (unit.at(j, k) - c * unit.at(i, k)) * inv_ni;
        out.grad.at(j, k) += g * (unit.at(i, k) - c * unit.at(j, k)) * inv_nj;
      }
    }
  return out;
}

TotalLoss total_loss(const LossReport& parts, const LossWeights& weights,
                     const ScopeTable& scopes) {
  weights.validate();
  for (const double v : {parts.l_c, parts.l_conf, parts.l_s, parts.l_contr})
    if (!std::isfinite(v))
      throw std::invalid_argument("total_loss: non-finite loss component");
  TotalLoss out;
  out.parts = parts;
  out.parts.l_total =
      parts.l_c + weights.alpha * parts.l_conf + parts.l_s + weights.beta * parts.l_contr;
  out.value = out.parts.l_total;
  out.scopes = scopes;
  return out;
}

}  // namespace fairdisco
