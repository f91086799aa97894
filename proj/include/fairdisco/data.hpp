#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <opencv2/core.hpp>

#include "fairdisco/core.hpp"
#include "fairdisco/rng.hpp"
#include "fairdisco/tensor.hpp"

namespace fairdisco {

/// Joint (condition x skin type) counts with marginals.
struct CountsTable {
  std::vector<std::vector<int>> cells;  // [condition][type]
  std::vector<int> condition_totals;
  std::vector<int> type_totals;
  int total = 0;
};

/// Validated sample set plus its vocabularies and summary counts. Unknown
/// skin types have already been dropped.
struct DatasetManifest {
  std::vector<Sample> samples;
  ConditionVocabulary conditions;
  SkinTypeVocabulary skin_types;
  CountsTable counts;
  int dropped_unknown = 0;
  std::filesystem::path base_dir;  // image paths resolve relative to this

  const Sample& by_id(const std::string& id) const;
};

CountsTable count_samples(const std::vector<Sample>& samples, int num_conditions, int num_types);

enum class PathCheck { None, Error, Skip };

struct LoadOptions {
  bool group_skin_types = false;
  PathCheck path_check = PathCheck::None;
};

/// Parses the manifest CSV (`id,image_path,condition,fitzpatrick,source`,
/// header required, fitzpatrick in {1..6,-1}). Unknown-type rows are dropped
/// with a logged count. PathCheck::Error fails on the first unresolvable
/// image path, PathCheck::Skip drops such rows with a warning.
DatasetManifest load_manifest(const std::filesystem::path& csv_path,
                              const LoadOptions& options = {});

/// Builds a manifest from in-memory rows (synthetic data, tests).
DatasetManifest manifest_from_rows(const std::vector<RawRow>& rows,
                                   const LoadOptions& options = {},
                                   const std::filesystem::path& base_dir = {});

/// Restriction to a subset of sample indices; vocabularies are retained so
/// label indices stay stable, counts are recomputed.
DatasetManifest subset_manifest(const DatasetManifest& manifest, std::span<const int> indices);

std::string counts_table_text(const DatasetManifest& manifest);

enum class SplitKind { InDomain, OutDomainA, OutDomainB, OutDomainC };
SplitKind parse_split_kind(const std::string& text);
std::string to_string(SplitKind kind);

struct SplitSpec {
  SplitKind kind = SplitKind::InDomain;
  double ratio = 0.8;  // in-domain train fraction
  std::uint64_t seed = 0;
  bool stratified = false;  // in-domain only: stratify by condition
};

struct Split {
  std::vector<int> train;  // indices into manifest.samples
  std::vector<int> test;
};

/// In-domain: seeded uniform split at the given ratio. Out-domain A/B/C:
/// train on Fitzpatrick {1,2}/{3,4}/{5,6}, test on the rest, then both sides
/// are restricted to the conditions present in both. Fails if any condition
/// class ends up empty on either side (in-domain) or nothing remains.
Split make_split(const DatasetManifest& manifest, const SplitSpec& spec);

void write_split_ids(const std::filesystem::path& path, const DatasetManifest& manifest,
                     std::span<const int> indices);
std::vector<int> read_split_ids(const std::filesystem::path& path,
                                const DatasetManifest& manifest);

enum class WeightMode { ClassBalanced, GroupBalanced, Reweight };

/// Per-(condition, type) weight table. Reweight entries multiply the
/// per-sample target-loss term; the two balanced modes are sampling weights.
struct SampleWeightTable {
  WeightMode mode = WeightMode::ClassBalanced;
  std::vector<std::vector<double>> cell;  // [condition][type]; NaN where empty

  double weight_for(const Sample& sample) const;
};

/// w(c, t) = P(c) * P(t) / P_obs(c, t) from the manifest's empirical counts.
SampleWeightTable reweight_table(const DatasetManifest& manifest);

/// Sampling weight 1 / count(condition, type).
SampleWeightTable resample_weights(const DatasetManifest& manifest);

/// Sampling weight 1 / count(condition).
SampleWeightTable class_balanced_weights(const DatasetManifest& manifest);

struct AugmentConfig {
  bool enabled = true;
  double crop_scale_min = 0.8;
  double crop_scale_max = 1.0;
  double max_rotation_deg = 15.0;
  double hflip_prob = 0.5;
  int out_size = 224;
};

/// Training path: random crop, rotation, horizontal flip, then resize to
/// out_size x out_size. With enabled=false this is the evaluation path
/// (resize only).
cv::Mat augment_image(const cv::Mat& bgr, const AugmentConfig& config, Rng& rng);
cv::Mat eval_preprocess(const cv::Mat& bgr, int out_size);

/// HWC uint8 BGR -> CHW double RGB scaled to [0, 1].
Tensor image_to_tensor(const cv::Mat& bgr);
Tensor images_to_batch(const std::vector<cv::Mat>& bgr_images);

/// Decodes and caches images, resolving relative paths against the manifest's
/// base directory and then $FAIRDISCO_DATA_DIR.
class ImageStore {
 public:
  explicit ImageStore(std::filesystem::path base_dir = {});

  const cv::Mat& get(const Sample& sample);
  std::filesystem::path resolve(const std::string& image_path) const;

 private:
  std::filesystem::path base_dir_;
  std::unordered_map<std::string, cv::Mat> cache_;
};

}  // namespace fairdisco
