#include "fairdisco/train.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <set>

#include <fmt/format.h>

namespace fairdisco {

Method parse_method(const std::string& text) {
  if (text == "BASE") return Method::BASE;
  if (text == "RESM") return Method::RESM;
  if (text == "REWT") return Method::REWT;
  if (text == "ATRB") return Method::ATRB;
  if (text == "FDC_NO_CL") return Method::FDC_NO_CL;
  if (text == "FDC") return Method::FDC;
  throw ValidationError(fmt::format("unknown method '{}'", text));
}

std::string to_string(Method method) {
  switch (method) {
    case Method::BASE: return "BASE";
    case Method::RESM: return "RESM";
    case Method::REWT: return "REWT";
    case Method::ATRB: return "ATRB";
    case Method::FDC_NO_CL: return "FDC_NO_CL";
    case Method::FDC: return "FDC";
  }
  throw std::logic_error("unreachable");
}

Architecture architecture_for(Method method) {
  switch (method) {
    case Method::BASE:
    case Method::RESM:
    case Method::REWT: return Architecture::BASE;
    case Method::ATRB: return Architecture::ATRB;
    case Method::FDC_NO_CL: return Architecture::FDC_NO_CL;
    case Method::FDC: return Architecture::FDC;
  }
  throw std::logic_error("unreachable");
}

WeightMode sampler_mode_for(Method method) {
  return method == Method::RESM ? WeightMode::GroupBalanced : WeightMode::ClassBalanced;
}

void TrainConfig::validate() const {
  weights.validate();
  if (!(lr > 0.0)) throw ValidationError("lr must be positive");
  if (lr_step_epochs < 1) throw ValidationError("lr_step_epochs must be positive");
  if (!(lr_gamma > 0.0 && lr_gamma <= 1.0)) throw ValidationError("lr_gamma must be in (0, 1]");
  if (batch_size < 2) throw ValidationError("batch_size must be at least 2");
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (image_size < 8) throw ValidationError("image_size must be at least 8");
  const auto arch = architecture_for(method);
  const bool has_confusion =
      arch == Architecture::FDC || arch == Architecture::FDC_NO_CL;
  if (!has_confusion && weights.alpha != 1.0 && weights.alpha != 0.0)
    throw ValidationError(
        fmt::format("alpha is only meaningful for FDC variants (method {})", to_string(method)));
  if (arch != Architecture::FDC && weights.beta != 1.0 && weights.beta != 0.0)
    throw ValidationError(
        fmt::format("beta is only meaningful for FDC (method {})", to_string(method)));
}

void TrainConfig::apply(const KeyValueConfig& kv) {
  kv.require_known_keys({"variant", "alpha", "beta", "tau", "lr", "lr_step_epochs", "lr_gamma",
                         "batch_size", "epochs", "seed", "backbone", "repr_dim", "image_size",
                         "augment", "scope_literal", "psi_bias", "proj_hidden", "proj_dim",
                         "pretrained"});
  if (kv.has("variant")) method = parse_method(kv.get_string("variant"));
  if (kv.has("alpha")) weights.alpha = kv.get_double("alpha");
  if (kv.has("beta")) weights.beta = kv.get_double("beta");
  if (kv.has("tau")) weights.tau = kv.get_double("tau");
  if (kv.has("lr")) lr = kv.get_double("lr");
  if (kv.has("lr_step_epochs")) lr_step_epochs = kv.get_int("lr_step_epochs");
  if (kv.has("lr_gamma")) lr_gamma = kv.get_double("lr_gamma");
  if (kv.has("batch_size")) batch_size = kv.get_int("batch_size");
  if (kv.has("epochs")) epochs = kv.get_int("epochs");
  if (kv.has("seed")) seed = kv.get_uint64("seed");
  if (kv.has("backbone")) backbone = parse_backbone(kv.get_string("backbone"));
  if (kv.has("repr_dim")) repr_dim = kv.get_int("repr_dim");
  if (kv.has("image_size")) image_size = kv.get_int("image_size");
  if (kv.has("augment")) augment = kv.get_bool("augment");
  if (kv.has("scope_literal")) scope_literal = kv.get_bool("scope_literal");
  if (kv.has("psi_bias")) psi_bias = kv.get_bool("psi_bias");
  if (kv.has("proj_hidden")) proj_hidden = kv.get_int("proj_hidden");
  if (kv.has("proj_dim")) proj_dim = kv.get_int("proj_dim");
  if (kv.has("pretrained")) pretrained_path = kv.get_string("pretrained");
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
  TrainConfig config;
  config.apply(KeyValueConfig::from_file(path));
  return config;
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  return config.lr * std::pow(config.lr_gamma, epoch / config.lr_step_epochs);
}

ActiveLosses active_losses_for(Architecture arch, const LossWeights& weights) {
  ActiveLosses active;
  active.target = true;
  const bool sensitive_branch =
      arch == Architecture::FDC || arch == Architecture::FDC_NO_CL;
  active.sensitive = sensitive_branch;
  active.confusion = sensitive_branch && weights.alpha > 0.0;
  active.contrastive = arch == Architecture::FDC && weights.beta > 0.0;
  return active;
}

AdamOptimizer::AdamOptimizer(double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::attach(ModelBundle& bundle) {
  groups_.clear();
  for (const auto group : bundle.groups_present()) {
    GroupState state;
    state.params = bundle.group_parameters(group);
    for (auto* p : state.params) {
      state.m.push_back(Tensor::zeros(p->value.shape));
      state.v.push_back(Tensor::zeros(p->value.shape));
    }
    groups_.emplace(group, std::move(state));
  }
}

void AdamOptimizer::step(std::span<const ParamGroup> active_groups, double lr) {
  for (const auto group : active_groups) {
    const auto it = groups_.find(group);
    if (it == groups_.end())
      throw ValidationError(fmt::format("optimizer has no state for group {}", to_string(group)));
    auto& state = it->second;
    ++state.t;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state.t));
    for (std::size_t i = 0; i < state.params.size(); ++i) {
      auto& value = state.params[i]->value;
      const auto& grad = state.params[i]->grad;
      auto& m = state.m[i];
      auto& v = state.v[i];
      for (std::size_t k = 0; k < value.data.size(); ++k) {
        const double g = grad.data[k];
        m.data[k] = beta1_ * m.data[k] + (1.0 - beta1_) * g;
        v.data[k] = beta2_ * v.data[k] + (1.0 - beta2_) * g * g;
        value.data[k] -= lr * (m.data[k] / c1) / (std::sqrt(v.data[k] / c2) + eps_);
      }
    }
  }
}

std::vector<ParamGroup> active_groups_for(const ModelBundle& bundle, const ScopeTable& scopes,
                                          const ActiveLosses& active) {
  std::set<ParamGroup> groups;
  auto add_scope = [&](LossTerm term) {
    for (int g = 0; g < kNumParamGroups; ++g) {
      const auto group = static_cast<ParamGroup>(g);
      if (scopes.allows(term, group)) groups.insert(group);
    }
  };
  if (active.target) add_scope(LossTerm::Target);
  if (active.confusion) add_scope(LossTerm::Confusion);
  if (active.sensitive) add_scope(LossTerm::Sensitive);
  if (active.contrastive) add_scope(LossTerm::Contrastive);

  std::vector<ParamGroup> out;
  for (const auto group : bundle.groups_present())
    if (groups.contains(group)) out.push_back(group);
  return out;
}

LossReport train_step(ModelBundle& bundle, const Batch& batch, AdamOptimizer& adam, double lr,
                      const ActiveLosses& active) {
  const auto& scopes = bundle.scopes();
  const auto& weights = bundle.weights();
  const Architecture arch = bundle.arch();
  bundle.zero_grads();

  LossReport parts;
  Tensor dz;
  bool dz_live = false;
  auto add_dz = [&](const Tensor& contribution, double scale) {
    if (!dz_live) {
      dz = contribution;
      if (scale != 1.0)
        for (double& v : dz.data) v *= scale;
      dz_live = true;
    } else {
      for (std::size_t i = 0; i < dz.data.size(); ++i)
        dz.data[i] += scale * contribution.data[i];
    }
  };

  if (arch == Architecture::ATRB) {
    Tensor z = bundle.phi().forward(batch.images, true);
    const Tensor t = bundle.attribute_embedder().forward(batch.skin_types);
    for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] += t.data[i];
    const Tensor probs = bundle.target_head().forward(z, true);
    const auto vg = target_loss_grad(probs, batch.conditions, batch.target_weights);
    parts.l_c = vg.value;
    if (active.target) {
      const Tensor dsum = bundle.target_head().backward(
          vg.grad, scopes.allows(LossTerm::Target, ParamGroup::TargetHead));
      bundle.attribute_embedder().backward(
          dsum, scopes.allows(LossTerm::Target, ParamGroup::AttributeEmbedder));
      if (scopes.allows(LossTerm::Target, ParamGroup::FeatureExtractor)) add_dz(dsum, 1.0);
    }
  } else {
    const Tensor z = bundle.phi().forward(batch.images, true);
    const Tensor class_probs = bundle.target_head().forward(z, true);
    const auto vg = target_loss_grad(class_probs, batch.conditions, batch.target_weights);
    parts.l_c = vg.value;
    if (active.target) {
      const Tensor dz_c = bundle.target_head().backward(
          vg.grad, scopes.allows(LossTerm::Target, ParamGroup::TargetHead));
      if (scopes.allows(LossTerm::Target, ParamGroup::FeatureExtractor)) add_dz(dz_c, 1.0);
    }

    if (bundle.has_sensitive_head()) {
      const Tensor skin_probs = bundle.sensitive_head().forward(z, true);
      parts.l_conf = confusion_loss(skin_probs);
      parts.l_s = sensitive_loss(skin_probs, batch.skin_types);
      if (active.confusion) {
        auto conf = confusion_loss_grad(skin_probs);
        for (double& v : conf.grad.data) v *= weights.alpha;
        const Tensor dz_conf = bundle.sensitive_head().backward(
            conf.grad, scopes.allows(LossTerm::Confusion, ParamGroup::SensitiveHead));
        if (scopes.allows(LossTerm::Confusion, ParamGroup::FeatureExtractor)) add_dz(dz_conf, 1.0);
      }
      if (active.sensitive) {
        const auto sens = sensitive_loss_grad(skin_probs, batch.skin_types);
        const Tensor dz_s = bundle.sensitive_head().backward(
            sens.grad, scopes.allows(LossTerm::Sensitive, ParamGroup::SensitiveHead));
        if (scopes.allows(LossTerm::Sensitive, ParamGroup::FeatureExtractor)) add_dz(dz_s, 1.0);
      }
    }

    if (bundle.has_projection_head() && active.contrastive) {
      const Tensor r = bundle.projection_head().forward(z, true);
      auto contr = contrastive_loss_grad(r, batch.conditions, weights.tau);
      parts.l_contr = contr.value;
      for (double& v : contr.grad.data) v *= weights.beta;
      const Tensor dz_k = bundle.projection_head().backward(
          contr.grad, scopes.allows(LossTerm::Contrastive, ParamGroup::ProjectionHead));
      if (scopes.allows(LossTerm::Contrastive, ParamGroup::FeatureExtractor)) add_dz(dz_k, 1.0);
    }
  }

  if (dz_live) bundle.phi().backward(dz, true);

  parts.l_total = total_loss(parts, weights, scopes).value;

  const auto groups = active_groups_for(bundle, scopes, active);
#ifndef NDEBUG
  // scope violation check: groups outside every active loss's scope must have
  // accumulated no gradient
  {
    std::set<ParamGroup> allowed(groups.begin(), groups.end());
    for (const auto group : bundle.groups_present()) {
      if (allowed.contains(group)) continue;
      for (auto* p : bundle.group_parameters(group))
        for (const double g : p->grad.data) assert(g == 0.0);
    }
  }
#endif
  adam.step(groups, lr);
  return parts;
}

namespace {

Batch assemble_batch(const DatasetManifest& train_set, std::span<const int> draw_indices,
                     ImageStore& store, const AugmentConfig& aug, const TrainConfig& config,
                     int epoch, int first_draw, const SampleWeightTable* rewt) {
  Batch batch;
  std::vector<cv::Mat> mats;
  mats.reserve(draw_indices.size());
  for (std::size_t i = 0; i < draw_indices.size(); ++i) {
    const auto& sample = train_set.samples[static_cast<std::size_t>(draw_indices[i])];
    Rng aug_rng(derive_seed(config.seed, "augment", static_cast<std::uint64_t>(epoch),
                            static_cast<std::uint64_t>(first_draw + static_cast<int>(i))));
    mats.push_back(augment_image(store.get(sample), aug, aug_rng));
    batch.conditions.push_back(sample.condition);
    batch.skin_types.push_back(sample.skin_type);
    if (rewt) batch.target_weights.push_back(rewt->weight_for(sample));
  }
  batch.images = images_to_batch(mats);
  return batch;
}

}  // namespace

TrainResult train(const TrainConfig& config, const DatasetManifest& train_set, ImageStore& store) {
  config.validate();
  if (train_set.samples.empty()) throw ValidationError("training set is empty");

  BundleConfig bc;
  bc.arch = architecture_for(config.method);
  bc.backbone = config.backbone;
  bc.repr_dim = config.repr_dim;
  bc.proj_hidden = config.proj_hidden;
  bc.proj_dim = config.proj_dim;
  bc.psi_bias = config.psi_bias;
  bc.scope_literal = config.scope_literal;
  ModelBundle bundle(bc, train_set.conditions, train_set.skin_types, config.weights, config.seed);
  if (!config.pretrained_path.empty()) load_pretrained_backbone(bundle, config.pretrained_path);

  AdamOptimizer adam;
  adam.attach(bundle);

  const auto sampling_table = sampler_mode_for(config.method) == WeightMode::GroupBalanced
                                  ? resample_weights(train_set)
                                  : class_balanced_weights(train_set);
  std::vector<double> draw_weights;
  draw_weights.reserve(train_set.samples.size());
  for (const auto& sample : train_set.samples)
    draw_weights.push_back(sampling_table.weight_for(sample));
  const WeightedSampler sampler(draw_weights);

  std::optional<SampleWeightTable> rewt;
  if (config.method == Method::REWT) rewt = reweight_table(train_set);

  AugmentConfig aug;
  aug.enabled = config.augment;
  aug.out_size = config.image_size;

  const ActiveLosses active = active_losses_for(bundle.arch(), config.weights);
  Rng sampler_rng(derive_seed(config.seed, "sampler"));
  const int n = static_cast<int>(train_set.samples.size());

  TrainState state;
  state.current_lr = lr_at_epoch(config, 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at_epoch(config, epoch);
    std::vector<int> draws(static_cast<std::size_t>(n));
    for (auto& d : draws) d = static_cast<int>(sampler.draw(sampler_rng));

    LossReport epoch_sum;
    int contributed = 0;
    for (int first = 0; first < n; first += config.batch_size) {
      const int count = std::min(config.batch_size, n - first);
      if (count < 2) break;  // contrastive pairs need company; drop the remainder
      const Batch batch = assemble_batch(
          train_set, std::span<const int>(draws).subspan(static_cast<std::size_t>(first),
                                                         static_cast<std::size_t>(count)),
          store, aug, config, epoch, first, rewt ? &*rewt : nullptr);
      const LossReport r = train_step(bundle, batch, adam, lr, active);
      epoch_sum.l_c += r.l_c * count;
      epoch_sum.l_conf += r.l_conf * count;
      epoch_sum.l_s += r.l_s * count;
      epoch_sum.l_contr += r.l_contr * count;
      epoch_sum.l_total += r.l_total * count;
      contributed += count;
    }
    if (contributed > 0) {
      epoch_sum.l_c /= contributed;
      epoch_sum.l_conf /= contributed;
      epoch_sum.l_s /= contributed;
      epoch_sum.l_contr /= contributed;
      epoch_sum.l_total /= contributed;
    }
    state.history.push_back(epoch_sum);
    state.current_lr = lr;
    ++state.epochs_completed;
  }
  return {std::move(bundle), std::move(state)};
}

PredictionLog evaluate(ModelBundle& bundle, const DatasetManifest& test_set, ImageStore& store,
                       int image_size) {
  if (test_set.samples.empty()) throw ValidationError("test set is empty");
  if (!(bundle.conditions() == test_set.conditions) ||
      !(bundle.skin_types() == test_set.skin_types))
    throw ValidationError("checkpoint and test-set vocabularies do not match");

  PredictionLog log;
  log.condition_names = bundle.conditions().names();

  // the log covers exactly the types present in the test set
  std::vector<int> type_map(static_cast<std::size_t>(bundle.num_types()), -1);
  for (const auto& sample : test_set.samples)
    type_map[static_cast<std::size_t>(sample.skin_type)] = 0;
  for (int j = 0; j < bundle.num_types(); ++j)
    if (type_map[static_cast<std::size_t>(j)] == 0) {
      type_map[static_cast<std::size_t>(j)] = static_cast<int>(log.skin_type_names.size());
      log.skin_type_names.push_back(bundle.skin_types().name_of(j));
    }

  const int n = static_cast<int>(test_set.samples.size());
  const int batch_size = 64;
  for (int first = 0; first < n; first += batch_size) {
    const int count = std::min(batch_size, n - first);
    std::vector<cv::Mat> mats;
    std::vector<int> skin_types;
    for (int i = 0; i < count; ++i) {
      const auto& sample = test_set.samples[static_cast<std::size_t>(first + i)];
      mats.push_back(eval_preprocess(store.get(sample), image_size));
      skin_types.push_back(sample.skin_type);
    }
    const Tensor images = images_to_batch(mats);
    const Tensor probs = bundle.arch() == Architecture::ATRB
                             ? bundle.forward_atrb(images, skin_types, false)
                             : bundle.forward_base(images, false);
    for (int i = 0; i < count; ++i) {
      const auto& sample = test_set.samples[static_cast<std::size_t>(first + i)];
      PredictionRecord rec;
      rec.sample_id = sample.id;
      rec.true_condition = sample.condition;
      rec.class_probs.assign(probs.row(i).begin(), probs.row(i).end());
      rec.predicted_condition = 0;
      for (int j = 1; j < bundle.num_conditions(); ++j)
        if (rec.class_probs[static_cast<std::size_t>(j)] >
            rec.class_probs[static_cast<std::size_t>(rec.predicted_condition)])
          rec.predicted_condition = j;
      rec.skin_type = type_map[static_cast<std::size_t>(sample.skin_type)];
      log.records.push_back(std::move(rec));
    }
  }
  log.validate();
  return log;
}

Tensor extract_representations(ModelBundle& bundle, const DatasetManifest& dataset,
                               ImageStore& store, int image_size) {
  const int n = static_cast<int>(dataset.samples.size());
  if (n == 0) throw ValidationError("cannot extract representations from an empty set");
  Tensor out = Tensor::zeros({n, bundle.phi().dim()});
  const int batch_size = 64;
  for (int first = 0; first < n; first += batch_size) {
    const int count = std::min(batch_size, n - first);
    std::vector<cv::Mat> mats;
    for (int i = 0; i < count; ++i)
      mats.push_back(
          eval_preprocess(store.get(dataset.samples[static_cast<std::size_t>(first + i)]),
                          image_size));
    const Tensor z = bundle.phi().forward(images_to_batch(mats), false);
    for (int i = 0; i < count; ++i)
      for (int k = 0; k < bundle.phi().dim(); ++k) out.at(first + i, k) = z.at(i, k);
  }
  return out;
}

std::vector<SweepRow> sweep(const TrainConfig& config, char parameter,
                            std::span<const double> grid, const DatasetManifest& train_set,
                            const DatasetManifest& test_set, ImageStore& store) {
  if (grid.empty()) throw ValidationError("sweep grid is empty");
  if (parameter != 'a' && parameter != 'b')
    throw ValidationError("sweep parameter must be 'a' (alpha) or 'b' (beta)");
  std::vector<SweepRow> rows;
  for (const double value : grid) {
    TrainConfig point = config;
    (parameter == 'a' ? point.weights.alpha : point.weights.beta) = value;
    auto result = train(point, train_set, store);
    const auto log = evaluate(result.bundle, test_set, store, point.image_size);
    const auto report = make_report(log);
    rows.push_back({value, report.overall_accuracy, report.pqd, report.dpm, report.eom});
  }
  return rows;
}

std::string sweep_to_csv(std::span<const SweepRow> rows, char parameter) {
  std::string out = fmt::format("{},accuracy,pqd,dpm,eom\n", parameter == 'a' ? "alpha" : "beta");
  for (const auto& row : rows)
    out += fmt::format("{},{},{},{},{}\n", row.weight, row.accuracy, row.pqd, row.dpm, row.eom);
  return out;
}

}  // namespace fairdisco
