#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fairdisco/core.hpp"
#include "fairdisco/losses.hpp"
#include "fairdisco/nn.hpp"
#include "fairdisco/tensor.hpp"

namespace fairdisco {

enum class Architecture { BASE, ATRB, FDC_NO_CL, FDC };
enum class BackboneKind { Tiny, ResNet18 };

Architecture parse_architecture(const std::string& text);
std::string to_string(Architecture arch);
BackboneKind parse_backbone(const std::string& text);
std::string to_string(BackboneKind kind);

/// Convolutional encoder phi: [B, 3, H, W] -> representation z [B, D].
/// Tiny: three conv/relu/pool blocks (channels D/4, D/2, D) and global average
/// pooling, for desk-scale runs. ResNet18: the standard 18-layer residual
/// stack without its final fully connected layer (D = 512).
class FeatureExtractor {
 public:
  FeatureExtractor(BackboneKind kind, int dim, Rng& rng);

  Tensor forward(const Tensor& images, bool training);
  Tensor backward(const Tensor& grad_z, bool accumulate_param_grads = true);
  std::vector<nn::Parameter*> parameters();
  std::vector<std::pair<std::string, Tensor*>> buffers();

  BackboneKind kind() const { return kind_; }
  int dim() const { return dim_; }
  bool pretrained = false;

 private:
  BackboneKind kind_;
  int dim_;
  std::unique_ptr<nn::Module> net_;
};

/// Linear map D -> K followed by softmax; used for both f_c and f_s.
class LinearSoftmaxHead {
 public:
  LinearSoftmaxHead(int in_dim, int classes, Rng& rng, const std::string& name);

  Tensor forward(const Tensor& z, bool training);  // probabilities [B, K]
  /// Chains softmax and linear backward; returns dL/dz.
  Tensor backward(const Tensor& grad_probs, bool accumulate_param_grads = true);
  std::vector<nn::Parameter*> parameters();

 private:
  nn::Linear linear_;
  Tensor probs_;
};

/// Two-layer perceptron D -> hidden -> out producing the contrastive
/// projection r.
class ProjectionHead {
 public:
  ProjectionHead(int in_dim, int hidden, int out_dim, Rng& rng, const std::string& name);

  Tensor forward(const Tensor& z, bool training);
  Tensor backward(const Tensor& grad_r, bool accumulate_param_grads = true);
  std::vector<nn::Parameter*> parameters();
  int out_dim() const { return out_dim_; }

 private:
  nn::Linear l1_;
  nn::ReLU relu_;
  nn::Linear l2_;
  int out_dim_;
};

/// One-hot skin type -> linear map (no bias by default) -> t with dim(z).
class AttributeEmbedder {
 public:
  AttributeEmbedder(int num_types, int out_dim, bool bias, Rng& rng, const std::string& name);

  Tensor forward(std::span<const int> skin_types);  // [B, D]
  void backward(const Tensor& grad_t, bool accumulate_param_grads = true);
  std::vector<nn::Parameter*> parameters();

 private:
  nn::Linear linear_;
  int num_types_;
};

struct BundleConfig {
  Architecture arch = Architecture::BASE;
  BackboneKind backbone = BackboneKind::Tiny;
  int repr_dim = 64;  // ResNet18 forces 512
  int proj_hidden = 512;
  int proj_dim = 128;
  bool psi_bias = false;
  bool scope_literal = false;  // use the literal scope table
};

struct FairDiscoOutput {
  Tensor class_probs;  // [B, M]
  Tensor skin_probs;   // [B, N]
  Tensor projections;  // [B, proj_dim]; empty for FDC_NO_CL
};

/// The assembled network for one variant: shared feature extractor plus the
/// heads that variant owns, with the loss scope table and everything needed
/// to reload it from disk.
class ModelBundle {
 public:
  ModelBundle(const BundleConfig& config, ConditionVocabulary conditions,
              SkinTypeVocabulary skin_types, LossWeights weights, std::uint64_t seed);

  Tensor forward_base(const Tensor& images, bool training = false);
  Tensor forward_atrb(const Tensor& images, std::span<const int> skin_types,
                      bool training = false);
  FairDiscoOutput forward_fairdisco(const Tensor& images, bool training = false);

  std::vector<nn::Parameter*> group_parameters(ParamGroup group);
  std::vector<ParamGroup> groups_present() const;
  std::vector<nn::Parameter*> all_parameters();
  std::vector<std::pair<std::string, Tensor*>> all_buffers();
  std::int64_t parameter_count();
  void zero_grads();

  Architecture arch() const { return config_.arch; }
  const BundleConfig& config() const { return config_; }
  const ConditionVocabulary& conditions() const { return conditions_; }
  const SkinTypeVocabulary& skin_types() const { return skin_types_; }
  const LossWeights& weights() const { return weights_; }
  const ScopeTable& scopes() const { return scopes_; }
  std::uint64_t seed() const { return seed_; }
  int num_conditions() const { return conditions_.size(); }
  int num_types() const { return skin_types_.size(); }

  FeatureExtractor& phi() { return *phi_; }
  LinearSoftmaxHead& target_head() { return *target_; }
  LinearSoftmaxHead& sensitive_head();    // throws if absent
  ProjectionHead& projection_head();      // throws if absent
  AttributeEmbedder& attribute_embedder();  // throws if absent
  bool has_sensitive_head() const { return sensitive_ != nullptr; }
  bool has_projection_head() const { return projection_ != nullptr; }
  bool has_attribute_embedder() const { return psi_ != nullptr; }

 private:
  BundleConfig config_;
  ConditionVocabulary conditions_;
  SkinTypeVocabulary skin_types_;
  LossWeights weights_;
  ScopeTable scopes_;
  std::uint64_t seed_;
  std::unique_ptr<FeatureExtractor> phi_;
  std::unique_ptr<LinearSoftmaxHead> target_;
  std::unique_ptr<LinearSoftmaxHead> sensitive_;
  std::unique_ptr<ProjectionHead> projection_;
  std::unique_ptr<AttributeEmbedder> psi_;
};

/// Single-archive checkpoint: JSON metadata (variant, backbone, dims,
/// vocabularies, loss weights, seed, array index) followed by raw
/// little-endian doubles for every parameter and buffer.
void save_checkpoint(const std::filesystem::path& path, ModelBundle& bundle);
ModelBundle load_checkpoint(const std::filesystem::path& path);

/// Loads backbone parameters (names prefixed "phi.") from another checkpoint
/// and marks the extractor pretrained.
void load_pretrained_backbone(ModelBundle& bundle, const std::filesystem::path& weights_path);

}  // namespace fairdisco
