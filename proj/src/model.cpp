#include "fairdisco/model.hpp"

#include <cstring>
#include <fstream>
#include <unordered_map>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace fairdisco {

Architecture parse_architecture(const std::string& text) {
  if (text == "BASE") return Architecture::BASE;
  if (text == "ATRB") return Architecture::ATRB;
  if (text == "FDC_NO_CL") return Architecture::FDC_NO_CL;
  if (text == "FDC") return Architecture::FDC;
  throw ValidationError(fmt::format("unknown architecture '{}'", text));
}

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::BASE: return "BASE";
    case Architecture::ATRB: return "ATRB";
    case Architecture::FDC_NO_CL: return "FDC_NO_CL";
    case Architecture::FDC: return "FDC";
  }
  throw std::logic_error("unreachable");
}

BackboneKind parse_backbone(const std::string& text) {
  if (text == "tiny") return BackboneKind::Tiny;
  if (text == "resnet18") return BackboneKind::ResNet18;
  throw ValidationError(fmt::format("unknown backbone '{}'", text));
}

std::string to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::Tiny: return "tiny";
    case BackboneKind::ResNet18: return "resnet18";
  }
  throw std::logic_error("unreachable");
}

namespace {

// Residual unit: conv3x3(stride)-BN-ReLU-conv3x3-BN plus identity (or 1x1
// conv + BN projection when the shape changes), then ReLU.
class BasicBlock : public nn::Module {
 public:
  BasicBlock(int in_c, int out_c, int stride, Rng& rng, const std::string& name)
      : conv1_(in_c, out_c, 3, stride, 1, false, rng, name + ".conv1"),
        bn1_(out_c, name + ".bn1"),
        conv2_(out_c, out_c, 3, 1, 1, false, rng, name + ".conv2"),
        bn2_(out_c, name + ".bn2") {
    if (stride != 1 || in_c != out_c) {
      down_conv_ = std::make_unique<nn::Conv2d>(in_c, out_c, 1, stride, 0, false, rng,
                                                name + ".down.conv");
      down_bn_ = std::make_unique<nn::BatchNorm2d>(out_c, name + ".down.bn");
    }
  }

  Tensor forward(const Tensor& x, bool training) override {
    Tensor identity = down_conv_ ? down_bn_->forward(down_conv_->forward(x, training), training)
                                 : x;
    Tensor h = bn1_.forward(conv1_.forward(x, training), training);
    h = relu1_.forward(h, training);
    h = bn2_.forward(conv2_.forward(h, training), training);
    for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] += identity.data[i];
    return relu_out_.forward(h, training);
  }

  Tensor backward(const Tensor& grad_out, bool accumulate_param_grads = true) override {
    Tensor g = relu_out_.backward(grad_out, accumulate_param_grads);
    // g splits into the residual branch and the identity branch
    Tensor g_branch = bn2_.backward(g, accumulate_param_grads);
    g_branch = conv2_.backward(g_branch, accumulate_param_grads);
    g_branch = relu1_.backward(g_branch, accumulate_param_grads);
    g_branch = bn1_.backward(g_branch, accumulate_param_grads);
    g_branch = conv1_.backward(g_branch, accumulate_param_grads);

    Tensor g_identity;
    if (down_conv_) {
      g_identity = down_bn_->backward(g, accumulate_param_grads);
      g_identity = down_conv_->backward(g_identity, accumulate_param_grads);
    } else {
      g_identity = g;
    }
    for (std::size_t i = 0; i < g_branch.data.size(); ++i)
      g_branch.data[i] += g_identity.data[i];
    return g_branch;
  }

  void collect_parameters(std::vector<nn::Parameter*>& out) override {
    conv1_.collect_parameters(out);
    bn1_.collect_parameters(out);
    conv2_.collect_parameters(out);
    bn2_.collect_parameters(out);
    if (down_conv_) {
      down_conv_->collect_parameters(out);
      down_bn_->collect_parameters(out);
    }
  }

  void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out) override {
    bn1_.collect_buffers(out);
    bn2_.collect_buffers(out);
    if (down_bn_) down_bn_->collect_buffers(out);
  }

 private:
  nn::Conv2d conv1_;
  nn::BatchNorm2d bn1_;
  nn::ReLU relu1_;
  nn::Conv2d conv2_;
  nn::BatchNorm2d bn2_;
  std::unique_ptr<nn::Conv2d> down_conv_;
  std::unique_ptr<nn::BatchNorm2d> down_bn_;
  nn::ReLU relu_out_;
};

std::unique_ptr<nn::Module> make_tiny(int dim, Rng& rng) {
  if (dim < 4 || dim % 4 != 0)
    throw ValidationError(fmt::format("tiny backbone dim {} must be a positive multiple of 4", dim));
  auto net = std::make_unique<nn::Sequential>();
  const int c1 = dim / 4, c2 = dim / 2;
  net->add(std::make_unique<nn::Conv2d>(3, c1, 3, 1, 1, true, rng, "phi.conv1"));
  net->add(std::make_unique<nn::ReLU>());
  net->add(std::make_unique<nn::MaxPool2d>(2, 2));
  net->add(std::make_unique<nn::Conv2d>(c1, c2, 3, 1, 1, true, rng, "phi.conv2"));
  net->add(std::make_unique<nn::ReLU>());
  net->add(std::make_unique<nn::MaxPool2d>(2, 2));
  net->add(std::make_unique<nn::Conv2d>(c2, dim, 3, 1, 1, true, rng, "phi.conv3"));
  net->add(std::make_unique<nn::ReLU>());
  net->add(std::make_unique<nn::MaxPool2d>(2, 2));
  net->add(std::make_unique<nn::GlobalAvgPool>());
  return net;
}

std::unique_ptr<nn::Module> make_resnet18(Rng& rng) {
  auto net = std::make_unique<nn::Sequential>();
  net->add(std::make_unique<nn::Conv2d>(3, 64, 7, 2, 3, false, rng, "phi.conv1"));
  net->add(std::make_unique<nn::BatchNorm2d>(64, "phi.bn1"));
  net->add(std::make_unique<nn::ReLU>());
  net->add(std::make_unique<nn::MaxPool2d>(3, 2, 1));
  const int stage_channels[4] = {64, 128, 256, 512};
  int in_c = 64;
  for (int stage = 0; stage < 4; ++stage) {
    const int out_c = stage_channels[stage];
    const int stride = stage == 0 ? 1 : 2;
    net->add(std::make_unique<BasicBlock>(in_c, out_c, stride, rng,
                                          fmt::format("phi.layer{}.0", stage + 1)));
    net->add(std::make_unique<BasicBlock>(out_c, out_c, 1, rng,
                                          fmt::format("phi.layer{}.1", stage + 1)));
    in_c = out_c;
  }
  net->add(std::make_unique<nn::GlobalAvgPool>());
  return net;
}

}  // namespace

FeatureExtractor::FeatureExtractor(BackboneKind kind, int dim, Rng& rng)
    : kind_(kind), dim_(dim) {
  if (kind == BackboneKind::ResNet18) {
    if (dim != 512)
      throw ValidationError("resnet18 backbone has a fixed representation dim of 512");
    net_ = make_resnet18(rng);
  } else {
    net_ = make_tiny(dim, rng);
  }
}

Tensor FeatureExtractor::forward(const Tensor& images, bool training) {
  if (images.ndim() != 4 || images.dim(1) != 3)
    throw ValidationError("feature extractor expects [B, 3, H, W] images");
  Tensor z = net_->forward(images, training);
  if (z.dim(1) != dim_) throw std::logic_error("feature extractor produced wrong dim");
  return z;
}

Tensor FeatureExtractor::backward(const Tensor& grad_z, bool accumulate_param_grads) {
  return net_->backward(grad_z, accumulate_param_grads);
}

std::vector<nn::Parameter*> FeatureExtractor::parameters() {
  std::vector<nn::Parameter*> out;
  net_->collect_parameters(out);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> FeatureExtractor::buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  net_->collect_buffers(out);
  return out;
}

LinearSoftmaxHead::LinearSoftmaxHead(int in_dim, int classes, Rng& rng, const std::string& name)
    : linear_(in_dim, classes, true, rng, name) {}

Tensor LinearSoftmaxHead::forward(const Tensor& z, bool training) {
  probs_ = nn::softmax_rows(linear_.forward(z, training));
  return probs_;
}

Tensor LinearSoftmaxHead::backward(const Tensor& grad_probs, bool accumulate_param_grads) {
  const Tensor dlogits = nn::softmax_backward(probs_, grad_probs);
  return linear_.backward(dlogits, accumulate_param_grads);
}

std::vector<nn::Parameter*> LinearSoftmaxHead::parameters() {
  std::vector<nn::Parameter*> out;
  linear_.collect_parameters(out);
  return out;
}

ProjectionHead::ProjectionHead(int in_dim, int hidden, int out_dim, Rng& rng,
                               const std::string& name)
    : l1_(in_dim, hidden, true, rng, name + ".l1"),
      l2_(hidden, out_dim, true, rng, name + ".l2"),
      out_dim_(out_dim) {}

Tensor ProjectionHead::forward(const Tensor& z, bool training) {
  return l2_.forward(relu_.forward(l1_.forward(z, training), training), training);
}

Tensor ProjectionHead::backward(const Tensor& grad_r, bool accumulate_param_grads) {
  Tensor g = l2_.backward(grad_r, accumulate_param_grads);
  g = relu_.backward(g, accumulate_param_grads);
  return l1_.backward(g, accumulate_param_grads);
}

std::vector<nn::Parameter*> ProjectionHead::parameters() {
  std::vector<nn::Parameter*> out;
  l1_.collect_parameters(out);
  l2_.collect_parameters(out);
  return out;
}

AttributeEmbedder::AttributeEmbedder(int num_types, int out_dim, bool bias, Rng& rng,
                                     const std::string& name)
    : linear_(num_types, out_dim, bias, rng, name), num_types_(num_types) {}

Tensor AttributeEmbedder::forward(std::span<const int> skin_types) {
  Tensor onehot = Tensor::zeros({static_cast<int>(skin_types.size()), num_types_});
  for (std::size_t i = 0; i < skin_types.size(); ++i) {
    const int s = skin_types[i];
    if (s < 0 || s >= num_types_)
      throw ValidationError(fmt::format("attribute embedder: skin type {} out of range", s));
    onehot.at(static_cast<int>(i), s) = 1.0;
  }
  return linear_.forward(onehot, true);
}

void AttributeEmbedder::backward(const Tensor& grad_t, bool accumulate_param_grads) {
  linear_.backward(grad_t, accumulate_param_grads);
}

std::vector<nn::Parameter*> AttributeEmbedder::parameters() {
  std::vector<nn::Parameter*> out;
  linear_.collect_parameters(out);
  return out;
}

ModelBundle::ModelBundle(const BundleConfig& config, ConditionVocabulary conditions,
                         SkinTypeVocabulary skin_types, LossWeights weights, std::uint64_t seed)
    : config_(config),
      conditions_(std::move(conditions)),
      skin_types_(std::move(skin_types)),
      weights_(weights),
      seed_(seed) {
  weights_.validate();
  if (config_.backbone == BackboneKind::ResNet18) config_.repr_dim = 512;
  scopes_ = config_.scope_literal ? ScopeTable::literal() : ScopeTable::standard();

  // One independent stream per component: adding or removing heads never
  // shifts the initialization of the others.
  Rng phi_rng(derive_seed(seed, "init/phi"));
  phi_ = std::make_unique<FeatureExtractor>(config_.backbone, config_.repr_dim, phi_rng);

  Rng fc_rng(derive_seed(seed, "init/f_c"));
  target_ = std::make_unique<LinearSoftmaxHead>(config_.repr_dim, conditions_.size(), fc_rng,
                                                "f_c");

  const bool wants_sensitive =
      config_.arch == Architecture::FDC || config_.arch == Architecture::FDC_NO_CL;
  if (wants_sensitive) {
    Rng fs_rng(derive_seed(seed, "init/f_s"));
    sensitive_ = std::make_unique<LinearSoftmaxHead>(config_.repr_dim, skin_types_.size(), fs_rng,
                                                     "f_s");
  }
  if (config_.arch == Architecture::FDC) {
    Rng h_rng(derive_seed(seed, "init/H"));
    projection_ = std::make_unique<ProjectionHead>(config_.repr_dim, config_.proj_hidden,
                                                   config_.proj_dim, h_rng, "H");
  }
  if (config_.arch == Architecture::ATRB) {
    Rng psi_rng(derive_seed(seed, "init/psi"));
    psi_ = std::make_unique<AttributeEmbedder>(skin_types_.size(), config_.repr_dim,
                                               config_.psi_bias, psi_rng, "psi");
    // ATRB trains psi through the target loss
    scopes_.set(LossTerm::Target, ParamGroup::AttributeEmbedder, true);
  }
}

Tensor ModelBundle::forward_base(const Tensor& images, bool training) {
  if (config_.arch == Architecture::ATRB)
    throw ValidationError("forward_base: ATRB requires skin types; use forward_atrb");
  const Tensor z = phi_->forward(images, training);
  return target_->forward(z, training);
}

Tensor ModelBundle::forward_atrb(const Tensor& images, std::span<const int> skin_types,
                                 bool training) {
  if (config_.arch != Architecture::ATRB)
    throw ValidationError("forward_atrb: bundle is not the ATRB variant");
  if (static_cast<int>(skin_types.size()) != images.dim(0))
    throw ValidationError("forward_atrb: skin-type count != batch size");
  Tensor z = phi_->forward(images, training);
  const Tensor t = psi_->forward(skin_types);
  for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] += t.data[i];
  return target_->forward(z, training);
}

FairDiscoOutput ModelBundle::forward_fairdisco(const Tensor& images, bool training) {
  if (config_.arch != Architecture::FDC && config_.arch != Architecture::FDC_NO_CL)
    throw ValidationError("forward_fairdisco: bundle lacks the sensitive branch");
  FairDiscoOutput out;
  const Tensor z = phi_->forward(images, training);
  out.class_probs = target_->forward(z, training);
  out.skin_probs = sensitive_->forward(z, training);
  if (projection_) out.projections = projection_->forward(z, training);
  return out;
}

LinearSoftmaxHead& ModelBundle::sensitive_head() {
  if (!sensitive_) throw ValidationError("bundle has no sensitive head");
  return *sensitive_;
}

ProjectionHead& ModelBundle::projection_head() {
  if (!projection_) throw ValidationError("bundle has no projection head");
  return *projection_;
}

AttributeEmbedder& ModelBundle::attribute_embedder() {
  if (!psi_) throw ValidationError("bundle has no attribute embedder");
  return *psi_;
}

std::vector<nn::Parameter*> ModelBundle::group_parameters(ParamGroup group) {
  switch (group) {
    case ParamGroup::FeatureExtractor: return phi_->parameters();
    case ParamGroup::TargetHead: return target_->parameters();
    case ParamGroup::SensitiveHead: return sensitive_ ? sensitive_->parameters()
                                                      : std::vector<nn::Parameter*>{};
    case ParamGroup::ProjectionHead: return projection_ ? projection_->parameters()
                                                        : std::vector<nn::Parameter*>{};
    case ParamGroup::AttributeEmbedder: return psi_ ? psi_->parameters()
                                                    : std::vector<nn::Parameter*>{};
  }
  throw std::logic_error("unreachable");
}

std::vector<ParamGroup> ModelBundle::groups_present() const {
  std::vector<ParamGroup> groups{ParamGroup::FeatureExtractor, ParamGroup::TargetHead};
  if (sensitive_) groups.push_back(ParamGroup::SensitiveHead);
  if (projection_) groups.push_back(ParamGroup::ProjectionHead);
  if (psi_) groups.push_back(ParamGroup::AttributeEmbedder);
  return groups;
}

std::vector<nn::Parameter*> ModelBundle::all_parameters() {
  std::vector<nn::Parameter*> out;
  for (const auto group : groups_present())
    for (auto* p : group_parameters(group)) out.push_back(p);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> ModelBundle::all_buffers() {
  return phi_->buffers();
}

std::int64_t ModelBundle::parameter_count() {
  std::int64_t n = 0;
  for (auto* p : all_parameters()) n += p->value.numel();
  return n;
}

void ModelBundle::zero_grads() {
  for (auto* p : all_parameters()) p->zero_grad();
}

namespace {

constexpr char kMagic[8] = {'F', 'D', 'C', 'K', 'P', 'T', '0', '1'};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, ModelBundle& bundle) {
  nlohmann::ordered_json meta;
  meta["variant"] = to_string(bundle.arch());
  meta["backbone"] = to_string(bundle.config().backbone);
  meta["repr_dim"] = bundle.config().repr_dim;
  meta["proj_hidden"] = bundle.config().proj_hidden;
  meta["proj_dim"] = bundle.config().proj_dim;
  meta["psi_bias"] = bundle.config().psi_bias;
  meta["scope_literal"] = bundle.config().scope_literal;
  meta["conditions"] = bundle.conditions().names();
  meta["skin_types"] = bundle.skin_types().names();
  meta["grouped_skin_types"] = bundle.skin_types().grouped();
  meta["alpha"] = bundle.weights().alpha;
  meta["beta"] = bundle.weights().beta;
  meta["tau"] = bundle.weights().tau;
  meta["seed"] = bundle.seed();
  meta["pretrained"] = bundle.phi().pretrained;

  std::vector<std::pair<std::string, const Tensor*>> arrays;
  for (auto* p : bundle.all_parameters()) arrays.emplace_back(p->name, &p->value);
  for (const auto& [name, tensor] : bundle.all_buffers()) arrays.emplace_back(name, tensor);

  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  std::int64_t offset = 0;
  for (const auto& [name, tensor] : arrays) {
    nlohmann::ordered_json entry;
    entry["name"] = name;
    entry["shape"] = tensor->shape;
    entry["offset"] = offset;
    offset += tensor->numel();
    index.push_back(entry);
  }
  meta["arrays"] = index;

  const std::string header = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error(fmt::format("cannot open checkpoint '{}' for writing", path.string()));
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t header_len = header.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, tensor] : arrays)
    out.write(reinterpret_cast<const char*>(tensor->data.data()),
              static_cast<std::streamsize>(tensor->data.size() * sizeof(double)));
  if (!out) throw std::runtime_error(fmt::format("failed writing checkpoint '{}'", path.string()));
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(fmt::format("cannot open checkpoint '{}'", path.string()));
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ValidationError(fmt::format("'{}' is not a fairdisco checkpoint", path.string()));
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ValidationError("checkpoint truncated in header");

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("checkpoint metadata is not valid JSON: {}", e.what()));
  }

  BundleConfig config;
  config.arch = parse_architecture(meta.at("variant").get<std::string>());
  config.backbone = parse_backbone(meta.at("backbone").get<std::string>());
  config.repr_dim = meta.at("repr_dim").get<int>();
  config.proj_hidden = meta.at("proj_hidden").get<int>();
  config.proj_dim = meta.at("proj_dim").get<int>();
  config.psi_bias = meta.at("psi_bias").get<bool>();
  config.scope_literal = meta.at("scope_literal").get<bool>();

  LossWeights weights;
  weights.alpha = meta.at("alpha").get<double>();
  weights.beta = meta.at("beta").get<double>();
  weights.tau = meta.at("tau").get<double>();

  auto conditions = ConditionVocabulary::from_names(
      meta.at("conditions").get<std::vector<std::string>>());
  auto skin_types = SkinTypeVocabulary::from_names(
      meta.at("skin_types").get<std::vector<std::string>>());

  ModelBundle bundle(config, std::move(conditions), std::move(skin_types), weights,
                     meta.at("seed").get<std::uint64_t>());
  bundle.phi().pretrained = meta.value("pretrained", false);

  std::unordered_map<std::string, Tensor*> targets;
  for (auto* p : bundle.all_parameters()) targets.emplace(p->name, &p->value);
  for (const auto& [name, tensor] : bundle.all_buffers()) targets.emplace(name, tensor);

  std::size_t loaded = 0;
  for (const auto& entry : meta.at("arrays")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int>>();
    const auto it = targets.find(name);
    if (it == targets.end())
      throw ValidationError(fmt::format("checkpoint array '{}' has no destination", name));
    if (it->second->shape != shape)
      throw ValidationError(fmt::format("checkpoint array '{}' has mismatched shape", name));
    in.read(reinterpret_cast<char*>(it->second->data.data()),
            static_cast<std::streamsize>(it->second->data.size() * sizeof(double)));
    if (!in) throw ValidationError(fmt::format("checkpoint truncated in array '{}'", name));
    ++loaded;
  }
  if (loaded != targets.size())
    throw ValidationError(fmt::format("checkpoint holds {} arrays, bundle needs {}", loaded,
                                      targets.size()));
  return bundle;
}

void load_pretrained_backbone(ModelBundle& bundle, const std::filesystem::path& weights_path) {
  ModelBundle donor = load_checkpoint(weights_path);
  if (donor.config().backbone != bundle.config().backbone ||
      donor.config().repr_dim != bundle.config().repr_dim)
    throw ValidationError("pretrained weights were built for a different backbone");

  std::unordered_map<std::string, const Tensor*> source;
  for (auto* p : donor.phi().parameters()) source.emplace(p->name, &p->value);
  for (const auto& [name, tensor] : donor.phi().buffers()) source.emplace(name, tensor);

  for (auto* p : bundle.phi().parameters()) p->value = *source.at(p->name);
  for (auto& [name, tensor] : bundle.phi().buffers()) *tensor = *source.at(name);
  bundle.phi().pretrained = true;
}

}  // namespace fairdisco
