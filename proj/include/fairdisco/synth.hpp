#pragma once

#include <filesystem>
#include <optional>
#include <span>

#include "fairdisco/data.hpp"
#include "fairdisco/tensor.hpp"

namespace fairdisco {

/// Parametric biased dataset: the condition is rendered as a foreground glyph,
/// the sensitive attribute as the background tone, and rho couples the two
/// (rho=0 independent, rho=1 deterministic pairing s = y mod N). Marginals
/// stay uniform for every rho, which forces num_classes % num_types == 0.
struct SynthSpec {
  int n_samples = 6000;
  int image_size = 32;
  int num_classes = 3;  // glyph-coded, at most 6
  int num_types = 3;    // tone-coded, 2..6
  double rho = 0.0;
  double noise = 8.0;  // gaussian pixel noise stddev, 0..255 scale
  std::uint64_t seed = 0;

  void validate() const;
};

/// One sample's random draw: labels plus the seed its rendering runs from.
/// Everything comes from the per-sample stream (spec.seed xor sample index),
/// so generation parallelizes without changing output.
struct SynthDraw {
  int condition;
  int skin_type;
  std::uint64_t render_seed;
};
SynthDraw synth_draw(const SynthSpec& spec, int index);

/// Writes images/<id>.png plus manifest.csv under out_dir; returns the loaded
/// manifest. Byte-identical for identical specs.
DatasetManifest generate(const SynthSpec& spec, const std::filesystem::path& out_dir);

/// Renders a single sample in memory (BGR). Exposed for tests.
cv::Mat render_synth_image(const SynthSpec& spec, int condition, int skin_type,
                           std::uint64_t sample_seed);

/// Plug-in mutual information (nats) of the empirical (condition, type) joint.
double label_mutual_information(const DatasetManifest& manifest);

struct ProbeOptions {
  double holdout_fraction = 0.2;
  int epochs = 200;  // full-batch, fixed budget
  double lr = 0.05;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double probe_accuracy = 0.0;  // held-out accuracy of the fresh linear head
  double chance_level = 0.0;    // 1 / N
  std::optional<double> main_class_accuracy;  // filled by callers that know it
  int n_train = 0;
  int n_holdout = 0;
};

/// Trains a fresh multinomial logistic regression on frozen representations
/// (n x d) against skin-type labels and reports held-out accuracy. Features
/// are standardized internally; optimization is deterministic (zero init,
/// full-batch Adam for the fixed budget). The only randomness is the seeded
/// holdout shuffle.
ProbeResult linear_probe(const Tensor& representations, std::span<const int> type_labels,
                         int num_types, const ProbeOptions& options = {});

}  // namespace fairdisco
