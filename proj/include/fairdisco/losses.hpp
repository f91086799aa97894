#pragma once

#include <array>
#include <span>
#include <string>

#include "fairdisco/tensor.hpp"

namespace fairdisco {

// Floor applied to every log argument.
inline constexpr double kLogEps = 1e-12;

// Softmax-output validation tolerance. Deliberately looser than the
// prediction-record tolerance so finite-difference probes of the losses
// (step 1e-4) stay inside the valid input set.
inline constexpr double kLossInputSumTol = 1e-3;

/// Weights of the composite objective: total = L_c + alpha*L_conf + L_s + beta*L_contr.
struct LossWeights {
  double alpha = 1.0;  // confusion-loss weight
  double beta = 1.0;   // contrastive-loss weight
  double tau = 0.1;    // contrastive temperature

  void validate() const;
};

/// Per-batch (or per-epoch mean) loss values.
struct LossReport {
  double l_c = 0.0;
  double l_conf = 0.0;
  double l_s = 0.0;
  double l_contr = 0.0;
  double l_total = 0.0;
};

enum class LossTerm : int { Target = 0, Confusion = 1, Sensitive = 2, Contrastive = 3 };
enum class ParamGroup : int {
  FeatureExtractor = 0,
  TargetHead = 1,
  SensitiveHead = 2,
  ProjectionHead = 3,
  AttributeEmbedder = 4,
};
inline constexpr int kNumLossTerms = 4;
inline constexpr int kNumParamGroups = 5;

std::string to_string(LossTerm term);
std::string to_string(ParamGroup group);

/// Which parameter groups each loss term may update. The default table keeps
/// the confusion loss away from the sensitive head so the head stays a clean
/// adversary trained by the sensitive loss alone; literal() additionally lets
/// the confusion loss update the sensitive head.
class ScopeTable {
 public:
  static ScopeTable standard();
  static ScopeTable literal();

  bool allows(LossTerm term, ParamGroup group) const {
    return (masks_[static_cast<std::size_t>(term)] >> static_cast<int>(group)) & 1u;
  }
  void set(LossTerm term, ParamGroup group, bool allowed);

  bool operator==(const ScopeTable&) const = default;

 private:
  std::array<unsigned, kNumLossTerms> masks_{};
};

struct ValueGrad {
  double value = 0.0;
  Tensor grad;  // same shape as the differentiated input
};

/// Mean cross-entropy of the true condition over the batch, optionally with
/// per-sample weights multiplying each sample's term (reweighting). probs is
/// B x M of softmax rows.
double target_loss(const Tensor& class_probs, std::span<const int> true_conditions,
                   std::span<const double> sample_weights = {});
ValueGrad target_loss_grad(const Tensor& class_probs, std::span<const int> true_conditions,
                           std::span<const double> sample_weights = {});

/// Cross-entropy against the uniform distribution over skin types, averaged
/// over the batch. Minimized (value ln N) exactly at the uniform vector.
double confusion_loss(const Tensor& skin_probs);
ValueGrad confusion_loss_grad(const Tensor& skin_probs);

/// Mean cross-entropy of the true skin type over the batch.
double sensitive_loss(const Tensor& skin_probs, std::span<const int> true_types);
ValueGrad sensitive_loss_grad(const Tensor& skin_probs, std::span<const int> true_types);

/// Supervised contrastive loss over projection embeddings (B x d). For each
/// anchor the positives are the other in-batch samples with the same
/// condition label regardless of skin type; similarities are cosine. Anchors
/// without positives are excluded from the averaging denominator.
double contrastive_loss(const Tensor& embeddings, std::span<const int> true_conditions,
                        double tau);
ValueGrad contrastive_loss_grad(const Tensor& embeddings, std::span<const int> true_conditions,
                                double tau);

struct TotalLoss {
  double value = 0.0;
  LossReport parts;   // l_total filled in
  ScopeTable scopes;  // the table in effect for this composition
};

/// Composes the four parts: L_c + alpha*L_conf + L_s + beta*L_contr.
/// All parts must be finite.
TotalLoss total_loss(const LossReport& parts, const LossWeights& weights,
                     const ScopeTable& scopes = ScopeTable::standard());

}  // namespace fairdisco
