#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "fairdisco/config.hpp"
#include "fairdisco/data.hpp"
#include "fairdisco/losses.hpp"
#include "fairdisco/metrics.hpp"
#include "fairdisco/model.hpp"

namespace fairdisco {

/// Training procedure. BASE/RESM/REWT share the plain architecture and differ
/// in sampling (RESM: group-balanced draws) or loss weighting (REWT: the
/// independence weights multiply the per-sample target term). All methods
/// except RESM use the class-balanced sampler.
enum class Method { BASE, RESM, REWT, ATRB, FDC_NO_CL, FDC };

Method parse_method(const std::string& text);
std::string to_string(Method method);
Architecture architecture_for(Method method);
WeightMode sampler_mode_for(Method method);

struct TrainConfig {
  Method method = Method::BASE;
  LossWeights weights;  // alpha, beta, tau
  double lr = 1e-4;
  int lr_step_epochs = 2;
  double lr_gamma = 0.9;
  int batch_size = 64;
  int epochs = 20;
  std::uint64_t seed = 0;
  BackboneKind backbone = BackboneKind::ResNet18;
  int repr_dim = 512;
  int image_size = 224;
  bool augment = true;
  bool scope_literal = false;
  bool psi_bias = false;
  int proj_hidden = 512;
  int proj_dim = 128;
  std::string pretrained_path;  // checkpoint supplying backbone weights; empty = none

  void validate() const;
  void apply(const KeyValueConfig& kv);  // overlay file settings
  static TrainConfig from_file(const std::filesystem::path& path);
};

/// lr at epoch e: lr0 * gamma^(e / step), integer division.
double lr_at_epoch(const TrainConfig& config, int epoch);

struct ActiveLosses {
  bool target = true;
  bool confusion = false;
  bool sensitive = false;
  bool contrastive = false;
};
ActiveLosses active_losses_for(Architecture arch, const LossWeights& weights);

/// Adam with one state slot per parameter group. A step touches only the
/// groups passed as active; skipped groups keep parameters, moments, and the
/// bias-correction counter bit-identical.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void attach(ModelBundle& bundle);
  void step(std::span<const ParamGroup> active_groups, double lr);

 private:
  struct GroupState {
    std::vector<nn::Parameter*> params;
    std::vector<Tensor> m, v;
    std::int64_t t = 0;
  };
  double beta1_, beta2_, eps_;
  std::map<ParamGroup, GroupState> groups_;
};

struct Batch {
  Tensor images;
  std::vector<int> conditions;
  std::vector<int> skin_types;
  std::vector<double> target_weights;  // per-sample L_c multipliers; empty = 1
};

/// One forward/backward/update cycle with the given active losses. Gradients
/// flow only along the bundle's scope table; parameter groups outside the
/// active losses' scopes are untouched. Returns the batch's loss parts.
LossReport train_step(ModelBundle& bundle, const Batch& batch, AdamOptimizer& adam, double lr,
                      const ActiveLosses& active);

std::vector<ParamGroup> active_groups_for(const ModelBundle& bundle, const ScopeTable& scopes,
                                          const ActiveLosses& active);

struct TrainState {
  int epochs_completed = 0;
  std::vector<LossReport> history;  // per-epoch means
  double current_lr = 0.0;
};

struct TrainResult {
  ModelBundle bundle;
  TrainState state;
};

/// Full training run on the given train set (vocabularies come from it).
TrainResult train(const TrainConfig& config, const DatasetManifest& train_set, ImageStore& store);

/// Evaluation-mode pass over the test set in manifest order. The checkpoint's
/// vocabularies must match the test manifest's.
PredictionLog evaluate(ModelBundle& bundle, const DatasetManifest& test_set, ImageStore& store,
                       int image_size);

/// Frozen representations z for every sample, in manifest order.
Tensor extract_representations(ModelBundle& bundle, const DatasetManifest& dataset,
                               ImageStore& store, int image_size);

struct SweepRow {
  double weight;
  double accuracy;
  double pqd;
  double dpm;
  double eom;
};

/// One train+evaluate per grid point with the same seed, varying alpha
/// (parameter 'a') or beta ('b') while everything else stays fixed.
std::vector<SweepRow> sweep(const TrainConfig& config, char parameter,
                            std::span<const double> grid, const DatasetManifest& train_set,
                            const DatasetManifest& test_set, ImageStore& store);
std::string sweep_to_csv(std::span<const SweepRow> rows, char parameter);

}  // namespace fairdisco
