#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <Eigen/Dense>

#include "fairdisco/core.hpp"
#include "fairdisco/data.hpp"
#include "fairdisco/rng.hpp"
#include "fairdisco/synth.hpp"

using namespace fairdisco;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// empirical joint from label draws alone (no rendering)
CountsTable draw_counts(const SynthSpec& spec) {
  std::vector<Sample> samples;
  for (int i = 0; i < spec.n_samples; ++i) {
    const auto draw = synth_draw(spec, i);
    Sample s;
    s.condition = draw.condition;
    s.skin_type = draw.skin_type;
    samples.push_back(s);
  }
  return count_samples(samples, spec.num_classes, spec.num_types);
}

double counts_mi(const CountsTable& t) {
  const double n = t.total;
  double mi = 0.0;
  for (std::size_t c = 0; c < t.cells.size(); ++c)
    for (std::size_t j = 0; j < t.type_totals.size(); ++j) {
      if (t.cells[c][j] == 0) continue;
      const double p = t.cells[c][j] / n;
      mi += p * std::log(p / ((t.condition_totals[c] / n) * (t.type_totals[j] / n)));
    }
  return mi;
}

}  // namespace

TEST_CASE("spec validation") {
  SynthSpec bad_rho;
  bad_rho.rho = 1.5;
  CHECK_THROWS_AS(bad_rho.validate(), ValidationError);

  SynthSpec bad_ratio;
  bad_ratio.num_classes = 4;
  bad_ratio.num_types = 3;  // 4 % 3 != 0: rho=1 coupling could not stay uniform
  CHECK_THROWS_AS(bad_ratio.validate(), ValidationError);

  SynthSpec ok;
  ok.num_classes = 6;
  ok.num_types = 3;
  CHECK_NOTHROW(ok.validate());
}

TEST_CASE("rho=0 labels are independent: mutual information below 0.01 nats") {
  SynthSpec spec;
  spec.n_samples = 10000;
  spec.rho = 0.0;
  spec.seed = 41;
  CHECK(counts_mi(draw_counts(spec)) < 0.01);
}

TEST_CASE("rho=1 concentrates the joint on the diagonal pairing") {
  SynthSpec spec;
  spec.n_samples = 3000;
  spec.rho = 1.0;
  spec.seed = 42;
  for (int i = 0; i < spec.n_samples; ++i) {
    const auto draw = synth_draw(spec, i);
    CHECK(draw.skin_type == draw.condition % spec.num_types);
  }
}

TEST_CASE("marginals stay uniform for every rho") {
  for (const double rho : {0.0, 0.5, 1.0}) {
    SynthSpec spec;
    spec.n_samples = 10000;
    spec.rho = rho;
    spec.seed = 43;
    const auto counts = draw_counts(spec);
    for (const int c : counts.condition_totals)
      CHECK(std::abs(c / 10000.0 - 1.0 / 3.0) < 0.02);
    for (const int j : counts.type_totals)
      CHECK(std::abs(j / 10000.0 - 1.0 / 3.0) < 0.02);
  }
}

TEST_CASE("generation is byte-identical for a fixed seed") {
  SynthSpec spec;
  spec.n_samples = 60;
  spec.seed = 44;
  spec.rho = 0.8;
  const auto dir_a = temp_dir("fairdisco_synth_a");
  const auto dir_b = temp_dir("fairdisco_synth_b");
  const auto manifest_a = generate(spec, dir_a);
  const auto manifest_b = generate(spec, dir_b);

  CHECK(manifest_a.counts.total == 60);
  CHECK(slurp(dir_a / "manifest.csv") == slurp(dir_b / "manifest.csv"));
  for (const auto& sample : manifest_a.samples)
    CHECK(slurp(dir_a / sample.image_path) == slurp(dir_b / sample.image_path));

  SynthSpec other = spec;
  other.seed = 45;
  const auto dir_c = temp_dir("fairdisco_synth_c");
  generate(other, dir_c);
  CHECK(slurp(dir_a / "manifest.csv") != slurp(dir_c / "manifest.csv"));

  // the emitted manifest is consumable by the data module unchanged
  const auto reloaded = load_manifest(dir_a / "manifest.csv");
  CHECK(reloaded.counts.total == 60);
  ImageStore store(dir_a);
  const auto& img = store.get(reloaded.samples.front());
  CHECK(img.rows == spec.image_size);
  CHECK(img.cols == spec.image_size);

  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
  std::filesystem::remove_all(dir_c);
}

TEST_CASE("rendered tones differ by skin type and glyphs by condition") {
  SynthSpec spec;
  const auto a = render_synth_image(spec, 0, 0, 7);
  const auto b = render_synth_image(spec, 0, 2, 7);
  const auto c = render_synth_image(spec, 1, 0, 7);
  // corner pixel is background: tone-coded
  CHECK(a.at<cv::Vec3b>(0, 0)[2] < b.at<cv::Vec3b>(0, 0)[2]);
  // same tone, different glyph: some pixels differ
  CHECK(cv::countNonZero(cv::Mat(a != c).reshape(1)) > 0);
}

TEST_CASE("probe on perfectly informative representations") {
  Rng rng(46);
  const int n = 600, types = 3;
  Tensor reps = Tensor::zeros({n, 5});
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(0, types - 1));
    reps.at(i, labels[static_cast<std::size_t>(i)]) = 1.0;  // one-hot of s
    reps.at(i, 4) = rng.normal();                           // distractor
  }
  const auto result = linear_probe(reps, labels, types, {0.2, 200, 0.05, 9});
  CHECK(result.chance_level == doctest::Approx(1.0 / 3.0));
  CHECK(result.probe_accuracy > 0.98);
  CHECK(result.n_train + result.n_holdout == n);
}

TEST_CASE("probe on pure noise sits at chance level") {
  Rng rng(47);
  const int n = 5000, types = 3;
  Tensor reps = Tensor::randn({n, 8}, rng);
  std::vector<int> labels(n);
  for (auto& s : labels) s = static_cast<int>(rng.uniform_int(0, types - 1));
  const auto result = linear_probe(reps, labels, types, {0.2, 200, 0.05, 10});
  CHECK(std::abs(result.probe_accuracy - result.chance_level) < 0.03);
}

TEST_CASE("probe accuracy is invariant to orthogonal rotation of representations") {
  Rng rng(48);
  const int n = 900, d = 8, types = 3;
  Tensor reps = Tensor::zeros({n, d});
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    const int s = static_cast<int>(rng.uniform_int(0, types - 1));
    labels[static_cast<std::size_t>(i)] = s;
    for (int k = 0; k < d; ++k) reps.at(i, k) = rng.normal() * 0.8;
    reps.at(i, s) += 1.6;  // informative direction, noisy
  }
  const auto base = linear_probe(reps, labels, types, {0.2, 200, 0.05, 11});

  // random orthogonal matrix via QR
  Eigen::MatrixXd g(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g(i, j) = rng.normal();
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  Tensor rotated = Tensor::zeros({n, d});
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += reps.at(i, j) * q(j, k);
      rotated.at(i, k) = acc;
    }
  const auto turned = linear_probe(rotated, labels, types, {0.2, 200, 0.05, 11});
  CHECK(std::abs(turned.probe_accuracy - base.probe_accuracy) < 0.02);
}

TEST_CASE("probe input validation") {
  Tensor reps = Tensor::zeros({4, 2});
  std::vector<int> one_class{1, 1, 1, 1};
  CHECK_THROWS_AS(linear_probe(reps, one_class, 3), ValidationError);
  std::vector<int> short_labels{0, 1};
  CHECK_THROWS_AS(linear_probe(reps, short_labels, 3), ValidationError);
}
