#include "fairdisco/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "fairdisco/rng.hpp"

namespace fairdisco {

void SynthSpec::validate() const {
  if (n_samples < 1) throw ValidationError("synth: n_samples must be positive");
  if (image_size < 16) throw ValidationError("synth: image_size must be at least 16");
  if (num_classes < 1 || num_classes > 6)
    throw ValidationError("synth: num_classes must be in 1..6 (glyph-coded)");
  if (num_types < 2 || num_types > 6)
    throw ValidationError("synth: num_types must be in 2..6 (tone-coded)");
  if (!(rho >= 0.0 && rho <= 1.0))
    throw ValidationError(fmt::format("synth: rho {} outside [0, 1]", rho));
  if (num_classes % num_types != 0)
    throw ValidationError(
        "synth: num_classes must be a multiple of num_types so the deterministic "
        "rho=1 coupling keeps both marginals uniform");
  if (noise < 0.0) throw ValidationError("synth: noise must be non-negative");
}

namespace {

const char* kGlyphNames[6] = {"disk", "square", "triangle", "diamond", "cross", "ring"};

// tone levels spread over [60, 200]; slightly brown (B < G < R)
cv::Scalar tone_color(int type, int num_types) {
  const double v = num_types == 1 ? 130.0 : 60.0 + 140.0 * type / (num_types - 1.0);
  return {0.80 * v, 0.92 * v, v};
}

void draw_glyph(cv::Mat& canvas, int glyph, const cv::Point& center, int radius) {
  const cv::Scalar fg(235, 235, 235);
  switch (glyph) {
    case 0:
      cv::circle(canvas, center, radius, fg, cv::FILLED, cv::LINE_8);
      break;
    case 1:
      cv::rectangle(canvas, center - cv::Point(radius, radius), center + cv::Point(radius, radius),
                    fg, cv::FILLED, cv::LINE_8);
      break;
    case 2: {
      const std::vector<cv::Point> tri{
          {center.x, center.y - radius},
          {center.x - radius, center.y + radius},
          {center.x + radius, center.y + radius},
      };
      cv::fillConvexPoly(canvas, tri, fg, cv::LINE_8);
      break;
    }
    case 3: {
      const std::vector<cv::Point> diamond{
          {center.x, center.y - radius},
          {center.x + radius, center.y},
          {center.x, center.y + radius},
          {center.x - radius, center.y},
      };
      cv::fillConvexPoly(canvas, diamond, fg, cv::LINE_8);
      break;
    }
    case 4: {
      const int arm = std::max(1, radius / 3);
      cv::rectangle(canvas, {center.x - radius, center.y - arm}, {center.x + radius, center.y + arm},
                    fg, cv::FILLED, cv::LINE_8);
      cv::rectangle(canvas, {center.x - arm, center.y - radius}, {center.x + arm, center.y + radius},
                    fg, cv::FILLED, cv::LINE_8);
      break;
    }
    case 5:
      cv::circle(canvas, center, radius, fg, std::max(1, radius / 3), cv::LINE_8);
      break;
    default:
      throw std::logic_error("glyph index out of range");
  }
}

std::uint64_t sample_stream_seed(std::uint64_t base, int index) {
  std::uint64_t state = base ^ static_cast<std::uint64_t>(index);
  return splitmix64(state);
}

}  // namespace

SynthDraw synth_draw(const SynthSpec& spec, int index) {
  Rng rng(sample_stream_seed(spec.seed, index));
  SynthDraw draw;
  draw.condition = static_cast<int>(rng.uniform_int(0, spec.num_classes - 1));
  draw.skin_type = rng.bernoulli(spec.rho)
                       ? draw.condition % spec.num_types
                       : static_cast<int>(rng.uniform_int(0, spec.num_types - 1));
  draw.render_seed = rng.next_u64();
  return draw;
}

cv::Mat render_synth_image(const SynthSpec& spec, int condition, int skin_type,
                           std::uint64_t sample_seed) {
  Rng rng(sample_seed);
  const int size = spec.image_size;
  cv::Mat canvas(size, size, CV_8UC3, tone_color(skin_type, spec.num_types));

  const int radius = static_cast<int>(
      rng.uniform(0.25 * size, 0.37 * size));
  const int jitter = std::max(1, size / 8);
  const cv::Point center(size / 2 + static_cast<int>(rng.uniform_int(-jitter, jitter)),
                         size / 2 + static_cast<int>(rng.uniform_int(-jitter, jitter)));
  draw_glyph(canvas, condition, center, radius);

  if (spec.noise > 0.0) {
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        auto& px = canvas.at<cv::Vec3b>(y, x);
        for (int c = 0; c < 3; ++c) {
          const double v = px[c] + rng.normal(0.0, spec.noise);
          px[c] = static_cast<unsigned char>(std::clamp(v, 0.0, 255.0));
        }
      }
  }
  return canvas;
}

DatasetManifest generate(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  const auto image_dir = out_dir / "images";
  std::filesystem::create_directories(image_dir);

  std::vector<RawRow> rows;
  rows.reserve(static_cast<std::size_t>(spec.n_samples));
  for (int i = 0; i < spec.n_samples; ++i) {
    const SynthDraw draw = synth_draw(spec, i);
    const cv::Mat image = render_synth_image(spec, draw.condition, draw.skin_type,
                                             draw.render_seed);

    const std::string id = fmt::format("synth_{:06d}", i);
    const std::string rel_path = fmt::format("images/{}.png", id);
    if (!cv::imwrite((out_dir / rel_path).string(), image))
      throw std::runtime_error(fmt::format("failed to write '{}'", rel_path));
    rows.push_back({id, rel_path, kGlyphNames[draw.condition], draw.skin_type + 1, "Synth"});
  }

  // manifest.csv, deterministic bytes
  const auto manifest_path = out_dir / "manifest.csv";
  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("cannot write synth manifest");
  out << "id,image_path,condition,fitzpatrick,source\n";
  for (const auto& r : rows)
    out << fmt::format("{},{},{},{},{}\n", r.id, r.image_path, r.condition, r.fitzpatrick,
                       r.source);
  out.close();

  return load_manifest(manifest_path);
}

double label_mutual_information(const DatasetManifest& manifest) {
  const auto& t = manifest.counts;
  const double n = t.total;
  double mi = 0.0;
  for (std::size_t c = 0; c < t.cells.size(); ++c)
    for (std::size_t j = 0; j < t.type_totals.size(); ++j) {
      if (t.cells[c][j] == 0) continue;
      const double p_joint = t.cells[c][j] / n;
      const double p_c = t.condition_totals[c] / n;
      const double p_j = t.type_totals[j] / n;
      mi += p_joint * std::log(p_joint / (p_c * p_j));
    }
  return mi;
}

ProbeResult linear_probe(const Tensor& representations, std::span<const int> type_labels,
                         int num_types, const ProbeOptions& options) {
  if (representations.ndim() != 2)
    throw ValidationError("linear_probe: representations must be n x d");
  const int n = representations.dim(0);
  const int d = representations.dim(1);
  if (static_cast<int>(type_labels.size()) != n)
    throw ValidationError("linear_probe: label count != representation count");
  if (num_types < 2) throw ValidationError("linear_probe: needs at least two skin types");
  for (const int s : type_labels)
    if (s < 0 || s >= num_types)
      throw ValidationError(fmt::format("linear_probe: label {} out of range", s));
  {
    std::vector<int> seen(static_cast<std::size_t>(num_types), 0);
    for (const int s : type_labels) seen[static_cast<std::size_t>(s)] = 1;
    int distinct = 0;
    for (const int v : seen) distinct += v;
    if (distinct < 2) throw ValidationError("linear_probe: single-class label set");
  }

  // seeded holdout split
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(options.seed, "probe/holdout"));
  rng.shuffle(order);
  const int n_holdout = std::max(1, static_cast<int>(std::lround(options.holdout_fraction * n)));
  const int n_train = n - n_holdout;
  if (n_train < 1) throw ValidationError("linear_probe: no training rows left");

  using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  MatRM x_train(n_train, d), x_test(n_holdout, d);
  std::vector<int> y_train(static_cast<std::size_t>(n_train)),
      y_test(static_cast<std::size_t>(n_holdout));
  for (int i = 0; i < n_train; ++i) {
    const int src = order[static_cast<std::size_t>(i)];
    for (int k = 0; k < d; ++k) x_train(i, k) = representations.at(src, k);
    y_train[static_cast<std::size_t>(i)] = type_labels[static_cast<std::size_t>(src)];
  }
  for (int i = 0; i < n_holdout; ++i) {
    const int src = order[static_cast<std::size_t>(n_train + i)];
    for (int k = 0; k < d; ++k) x_test(i, k) = representations.at(src, k);
    y_test[static_cast<std::size_t>(i)] = type_labels[static_cast<std::size_t>(src)];
  }

  // per-feature standardization from the probe-train statistics
  for (int k = 0; k < d; ++k) {
    const double mean = x_train.col(k).mean();
    const double var = (x_train.col(k).array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + 1e-8);
    x_train.col(k) = (x_train.col(k).array() - mean) * inv;
    x_test.col(k) = (x_test.col(k).array() - mean) * inv;
  }

  // multinomial logistic regression, zero init, full-batch Adam
  MatRM w = MatRM::Zero(d, num_types);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(num_types);
  MatRM mw = MatRM::Zero(d, num_types), vw = MatRM::Zero(d, num_types);
  Eigen::RowVectorXd mb = Eigen::RowVectorXd::Zero(num_types),
                     vb = Eigen::RowVectorXd::Zero(num_types);
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  MatRM logits(n_train, num_types), probs(n_train, num_types);
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    logits.noalias() = x_train * w;
    logits.rowwise() += b;
    for (int i = 0; i < n_train; ++i) {
      const double m = logits.row(i).maxCoeff();
      probs.row(i) = (logits.row(i).array() - m).exp();
      probs.row(i) /= probs.row(i).sum();
    }
    for (int i = 0; i < n_train; ++i)
      probs(i, y_train[static_cast<std::size_t>(i)]) -= 1.0;
    probs /= static_cast<double>(n_train);

    const MatRM gw = x_train.transpose() * probs;
    const Eigen::RowVectorXd gb = probs.colwise().sum();

    const double c1 = 1.0 - std::pow(beta1, epoch);
    const double c2 = 1.0 - std::pow(beta2, epoch);
    mw = beta1 * mw + (1.0 - beta1) * gw;
    vw = beta2 * vw + (1.0 - beta2) * gw.cwiseProduct(gw);
    w.array() -= options.lr * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
    mb = beta1 * mb + (1.0 - beta1) * gb;
    vb = beta2 * vb + (1.0 - beta2) * gb.cwiseProduct(gb);
    b.array() -= options.lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
  }

  int correct = 0;
  for (int i = 0; i < n_holdout; ++i) {
    Eigen::RowVectorXd scores = x_test.row(i) * w + b;
    int arg = 0;
    for (int k = 1; k < num_types; ++k)
      if (scores(k) > scores(arg)) arg = k;
    if (arg == y_test[static_cast<std::size_t>(i)]) ++correct;
  }

  ProbeResult result;
  result.probe_accuracy = static_cast<double>(correct) / n_holdout;
  result.chance_level = 1.0 / num_types;
  result.n_train = n_train;
  result.n_holdout = n_holdout;
  return result;
}

}  // namespace fairdisco
