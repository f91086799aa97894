#include "fairdisco/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace fairdisco {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::string strip(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

const Sample& DatasetManifest::by_id(const std::string& id) const {
  for (const auto& s : samples)
    if (s.id == id) return s;
  throw ValidationError(fmt::format("sample id '{}' not in manifest", id));
}

CountsTable count_samples(const std::vector<Sample>& samples, int num_conditions,
                          int num_types) {
  CountsTable t;
  t.cells.assign(static_cast<std::size_t>(num_conditions),
                 std::vector<int>(static_cast<std::size_t>(num_types), 0));
  t.condition_totals.assign(static_cast<std::size_t>(num_conditions), 0);
  t.type_totals.assign(static_cast<std::size_t>(num_types), 0);
  for (const auto& s : samples) {
    ++t.cells[static_cast<std::size_t>(s.condition)][static_cast<std::size_t>(s.skin_type)];
    ++t.condition_totals[static_cast<std::size_t>(s.condition)];
    ++t.type_totals[static_cast<std::size_t>(s.skin_type)];
    ++t.total;
  }
  return t;
}

DatasetManifest manifest_from_rows(const std::vector<RawRow>& rows, const LoadOptions& options,
                                   const std::filesystem::path& base_dir) {
  auto vocab = build_vocabularies(rows, options.group_skin_types);
  DatasetManifest manifest;
  manifest.conditions = std::move(vocab.conditions);
  manifest.skin_types = std::move(vocab.skin_types);
  manifest.base_dir = base_dir;

  ImageStore store(base_dir);
  for (const auto& row : rows) {
    if (row.fitzpatrick == kUnknownFitzpatrick) {
      ++manifest.dropped_unknown;
      continue;
    }
    if (options.path_check != PathCheck::None) {
      const auto resolved = store.resolve(row.image_path);
      if (!std::filesystem::exists(resolved)) {
        if (options.path_check == PathCheck::Error)
          throw ValidationError(
              fmt::format("image path '{}' does not resolve (sample '{}')", row.image_path, row.id));
        emit_warning(fmt::format("skipping sample '{}': image '{}' not found", row.id,
                                 row.image_path));
        continue;
      }
    }
    Sample s;
    s.id = row.id;
    s.image_path = row.image_path;
    s.condition = manifest.conditions.index_of(row.condition);
    s.skin_type = manifest.skin_types.index_of_fitz(row.fitzpatrick);
    s.fitzpatrick = row.fitzpatrick;
    s.source = parse_source_domain(row.source);
    manifest.samples.push_back(std::move(s));
  }
  if (manifest.samples.empty())
    throw ValidationError("manifest has no usable samples after filtering");
  if (manifest.dropped_unknown > 0)
    emit_warning(fmt::format("dropped {} samples with unknown skin type",
                             manifest.dropped_unknown));
  manifest.counts =
      count_samples(manifest.samples, manifest.conditions.size(), manifest.skin_types.size());
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& csv_path, const LoadOptions& options) {
  std::ifstream in(csv_path);
  if (!in) throw ValidationError(fmt::format("cannot open manifest '{}'", csv_path.string()));

  std::string line;
  if (!std::getline(in, line)) throw ValidationError("manifest file is empty");
  const auto header = split_fields(strip(line));
  const std::vector<std::string> expected{"id", "image_path", "condition", "fitzpatrick",
                                          "source"};
  if (header != expected)
    throw ValidationError(fmt::format(
        "manifest header mismatch: expected 'id,image_path,condition,fitzpatrick,source', got '{}'",
        strip(line)));

  std::vector<RawRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto stripped = strip(line);
    if (stripped.empty()) continue;
    const auto fields = split_fields(stripped);
    if (fields.size() != 5)
      throw ValidationError(
          fmt::format("manifest line {}: expected 5 fields, got {}", line_no, fields.size()));
    RawRow row;
    row.id = fields[0];
    row.image_path = fields[1];
    row.condition = fields[2];
    try {
      row.fitzpatrick = std::stoi(fields[3]);
    } catch (const std::exception&) {
      throw ValidationError(
          fmt::format("manifest line {}: fitzpatrick '{}' is not an integer", line_no, fields[3]));
    }
    if (row.fitzpatrick != kUnknownFitzpatrick && (row.fitzpatrick < 1 || row.fitzpatrick > 6))
      throw ValidationError(
          fmt::format("manifest line {}: fitzpatrick {} outside {{1..6,-1}}", line_no,
                      row.fitzpatrick));
    row.source = fields[4];
    rows.push_back(std::move(row));
  }
  return manifest_from_rows(rows, options, csv_path.parent_path());
}

DatasetManifest subset_manifest(const DatasetManifest& manifest, std::span<const int> indices) {
  DatasetManifest out;
  out.conditions = manifest.conditions;
  out.skin_types = manifest.skin_types;
  out.base_dir = manifest.base_dir;
  out.samples.reserve(indices.size());
  for (const int i : indices) {
    if (i < 0 || i >= static_cast<int>(manifest.samples.size()))
      throw ValidationError(fmt::format("subset index {} out of range", i));
    out.samples.push_back(manifest.samples[static_cast<std::size_t>(i)]);
  }
  if (out.samples.empty()) throw ValidationError("subset is empty");
  out.counts = count_samples(out.samples, out.conditions.size(), out.skin_types.size());
  return out;
}

std::string counts_table_text(const DatasetManifest& manifest) {
  const auto& t = manifest.counts;
  std::string out = fmt::format("{:<18}", "Skin Condition");
  for (const auto& name : manifest.skin_types.names()) out += fmt::format("{:>8}", name);
  out += fmt::format("{:>8}\n", "Total");
  for (int c = 0; c < manifest.conditions.size(); ++c) {
    out += fmt::format("{:<18}", manifest.conditions.name_of(c));
    for (int j = 0; j < manifest.skin_types.size(); ++j)
      out += fmt::format("{:>8}", t.cells[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)]);
    out += fmt::format("{:>8}\n", t.condition_totals[static_cast<std::size_t>(c)]);
  }
  out += fmt::format("{:<18}", "Total");
  for (int j = 0; j < manifest.skin_types.size(); ++j)
    out += fmt::format("{:>8}", t.type_totals[static_cast<std::size_t>(j)]);
  out += fmt::format("{:>8}\n", t.total);
  return out;
}

SplitKind parse_split_kind(const std::string& text) {
  if (text == "in-domain") return SplitKind::InDomain;
  if (text == "out-domain-a") return SplitKind::OutDomainA;
  if (text == "out-domain-b") return SplitKind::OutDomainB;
  if (text == "out-domain-c") return SplitKind::OutDomainC;
  throw ValidationError(fmt::format("unknown split kind '{}'", text));
}

std::string to_string(SplitKind kind) {
  switch (kind) {
    case SplitKind::InDomain: return "in-domain";
    case SplitKind::OutDomainA: return "out-domain-a";
    case SplitKind::OutDomainB: return "out-domain-b";
    case SplitKind::OutDomainC: return "out-domain-c";
  }
  throw std::logic_error("unreachable");
}

namespace {

Split in_domain_split(const DatasetManifest& manifest, const SplitSpec& spec) {
  const int n = static_cast<int>(manifest.samples.size());
  if (!(spec.ratio > 0.0) || !(spec.ratio < 1.0))
    throw ValidationError(
        fmt::format("in-domain ratio {} leaves an empty train or test set", spec.ratio));

  Split split;
  Rng rng(derive_seed(spec.seed, "split"));
  if (spec.stratified) {
    std::vector<std::vector<int>> per_class(static_cast<std::size_t>(manifest.conditions.size()));
    for (int i = 0; i < n; ++i)
      per_class[static_cast<std::size_t>(manifest.samples[static_cast<std::size_t>(i)].condition)]
          .push_back(i);
    for (auto& bucket : per_class) {
      rng.shuffle(bucket);
      const auto train_n =
          static_cast<std::size_t>(std::lround(spec.ratio * static_cast<double>(bucket.size())));
      for (std::size_t i = 0; i < bucket.size(); ++i)
        (i < train_n ? split.train : split.test).push_back(bucket[i]);
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
  } else {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    const auto train_n = static_cast<std::size_t>(std::lround(spec.ratio * n));
    split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_n));
    split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(train_n), order.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
  }
  if (split.train.empty() || split.test.empty())
    throw ValidationError("in-domain split left an empty train or test set");

  // every condition class must survive on both sides
  for (int side = 0; side < 2; ++side) {
    std::vector<int> seen(static_cast<std::size_t>(manifest.conditions.size()), 0);
    for (const int i : (side == 0 ? split.train : split.test))
      seen[static_cast<std::size_t>(manifest.samples[static_cast<std::size_t>(i)].condition)] = 1;
    for (int c = 0; c < manifest.conditions.size(); ++c)
      if (!seen[static_cast<std::size_t>(c)])
        throw ValidationError(fmt::format("split leaves condition '{}' empty in the {} set",
                                          manifest.conditions.name_of(c),
                                          side == 0 ? "train" : "test"));
  }
  return split;
}

Split out_domain_split(const DatasetManifest& manifest, SplitKind kind) {
  int lo = 0, hi = 0;
  switch (kind) {
    case SplitKind::OutDomainA: lo = 1, hi = 2; break;
    case SplitKind::OutDomainB: lo = 3, hi = 4; break;
    case SplitKind::OutDomainC: lo = 5, hi = 6; break;
    default: throw std::logic_error("unreachable");
  }
  Split split;
  for (int i = 0; i < static_cast<int>(manifest.samples.size()); ++i) {
    const int f = manifest.samples[static_cast<std::size_t>(i)].fitzpatrick;
    (f >= lo && f <= hi ? split.train : split.test).push_back(i);
  }
  if (split.train.empty() || split.test.empty())
    throw ValidationError(fmt::format("{} split leaves an empty train or test set",
                                      to_string(kind)));

  // keep only conditions present on both sides
  std::set<int> train_conditions, test_conditions;
  for (const int i : split.train)
    train_conditions.insert(manifest.samples[static_cast<std::size_t>(i)].condition);
  for (const int i : split.test)
    test_conditions.insert(manifest.samples[static_cast<std::size_t>(i)].condition);
  std::set<int> shared;
  std::set_intersection(train_conditions.begin(), train_conditions.end(),
                        test_conditions.begin(), test_conditions.end(),
                        std::inserter(shared, shared.begin()));
  auto filter = [&](std::vector<int>& side) {
    std::erase_if(side, [&](int i) {
      return !shared.contains(manifest.samples[static_cast<std::size_t>(i)].condition);
    });
  };
  filter(split.train);
  filter(split.test);
  if (split.train.empty() || split.test.empty())
    throw ValidationError(
        fmt::format("{} split has no shared conditions between train and test", to_string(kind)));
  return split;
}

}  // namespace

Split make_split(const DatasetManifest& manifest, const SplitSpec& spec) {
  if (spec.kind == SplitKind::InDomain) return in_domain_split(manifest, spec);
  return out_domain_split(manifest, spec.kind);
}

void write_split_ids(const std::filesystem::path& path, const DatasetManifest& manifest,
                     std::span<const int> indices) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot open '{}' for writing", path.string()));
  for (const int i : indices) out << manifest.samples[static_cast<std::size_t>(i)].id << "\n";
  if (!out) throw std::runtime_error(fmt::format("failed writing '{}'", path.string()));
}

std::vector<int> read_split_ids(const std::filesystem::path& path,
                                const DatasetManifest& manifest) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot open split file '{}'", path.string()));
  std::unordered_map<std::string, int> index;
  for (int i = 0; i < static_cast<int>(manifest.samples.size()); ++i)
    index.emplace(manifest.samples[static_cast<std::size_t>(i)].id, i);
  std::vector<int> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto id = strip(line);
    if (id.empty()) continue;
    const auto it = index.find(id);
    if (it == index.end())
      throw ValidationError(fmt::format("split id '{}' not found in manifest", id));
    out.push_back(it->second);
  }
  if (out.empty()) throw ValidationError(fmt::format("split file '{}' is empty", path.string()));
  return out;
}

double SampleWeightTable::weight_for(const Sample& sample) const {
  const double w =
      cell[static_cast<std::size_t>(sample.condition)][static_cast<std::size_t>(sample.skin_type)];
  if (std::isnan(w))
    throw ValidationError(
        fmt::format("weight requested for empty (condition, type) cell ({}, {})", sample.condition,
                    sample.skin_type));
  return w;
}

SampleWeightTable reweight_table(const DatasetManifest& manifest) {
  const auto& t = manifest.counts;
  SampleWeightTable table;
  table.mode = WeightMode::Reweight;
  table.cell.assign(t.cells.size(), std::vector<double>(t.type_totals.size(), kNaN));
  const double n = static_cast<double>(t.total);
  for (std::size_t c = 0; c < t.cells.size(); ++c)
    for (std::size_t j = 0; j < t.type_totals.size(); ++j) {
      const int observed = t.cells[c][j];
      if (observed == 0) continue;
      const double expected =
          (static_cast<double>(t.condition_totals[c]) / n) *
          (static_cast<double>(t.type_totals[j]) / n);
      table.cell[c][j] = expected / (static_cast<double>(observed) / n);
    }
  return table;
}

SampleWeightTable resample_weights(const DatasetManifest& manifest) {
  const auto& t = manifest.counts;
  SampleWeightTable table;
  table.mode = WeightMode::GroupBalanced;
  table.cell.assign(t.cells.size(), std::vector<double>(t.type_totals.size(), kNaN));
  for (std::size_t c = 0; c < t.cells.size(); ++c)
    for (std::size_t j = 0; j < t.type_totals.size(); ++j)
      if (t.cells[c][j] > 0) table.cell[c][j] = 1.0 / t.cells[c][j];
  return table;
}

SampleWeightTable class_balanced_weights(const DatasetManifest& manifest) {
  const auto& t = manifest.counts;
  SampleWeightTable table;
  table.mode = WeightMode::ClassBalanced;
  table.cell.assign(t.cells.size(), std::vector<double>(t.type_totals.size(), kNaN));
  for (std::size_t c = 0; c < t.cells.size(); ++c) {
    if (t.condition_totals[c] == 0) continue;
    const double w = 1.0 / t.condition_totals[c];
    for (std::size_t j = 0; j < t.type_totals.size(); ++j) table.cell[c][j] = w;
  }
  return table;
}

cv::Mat eval_preprocess(const cv::Mat& bgr, int out_size) {
  if (bgr.empty()) throw ValidationError("cannot preprocess an empty image");
  cv::Mat resized;
  cv::resize(bgr, resized, cv::Size(out_size, out_size), 0, 0, cv::INTER_LINEAR);
  return resized;
}

cv::Mat augment_image(const cv::Mat& bgr, const AugmentConfig& config, Rng& rng) {
  if (bgr.empty()) throw ValidationError("cannot augment an empty image");
  if (!config.enabled) return eval_preprocess(bgr, config.out_size);

  // crop: scale of the shorter side, position uniform
  const double scale = rng.uniform(config.crop_scale_min, config.crop_scale_max);
  const int side = std::max(
      1, static_cast<int>(std::lround(scale * std::min(bgr.rows, bgr.cols))));
  const int max_x = bgr.cols - side;
  const int max_y = bgr.rows - side;
  const int x = max_x > 0 ? static_cast<int>(rng.uniform_int(0, max_x)) : 0;
  const int y = max_y > 0 ? static_cast<int>(rng.uniform_int(0, max_y)) : 0;
  cv::Mat cropped = bgr(cv::Rect(x, y, side, side)).clone();

  // rotation about the crop center
  const double angle = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg);
  const cv::Point2f center(static_cast<float>(side) / 2.0f, static_cast<float>(side) / 2.0f);
  const cv::Mat rot = cv::getRotationMatrix2D(center, angle, 1.0);
  cv::Mat rotated;
  cv::warpAffine(cropped, rotated, rot, cropped.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT_101);

  if (rng.bernoulli(config.hflip_prob)) cv::flip(rotated, rotated, 1);

  return eval_preprocess(rotated, config.out_size);
}

Tensor image_to_tensor(const cv::Mat& bgr) {
  if (bgr.empty() || bgr.type() != CV_8UC3)
    throw ValidationError("image_to_tensor expects a non-empty 8-bit BGR image");
  Tensor t = Tensor::zeros({1, 3, bgr.rows, bgr.cols});
  for (int y = 0; y < bgr.rows; ++y)
    for (int x = 0; x < bgr.cols; ++x) {
      const auto& px = bgr.at<cv::Vec3b>(y, x);
      t.at(0, 0, y, x) = px[2] / 255.0;  // R
      t.at(0, 1, y, x) = px[1] / 255.0;  // G
      t.at(0, 2, y, x) = px[0] / 255.0;  // B
    }
  return t;
}

Tensor images_to_batch(const std::vector<cv::Mat>& bgr_images) {
  if (bgr_images.empty()) throw ValidationError("images_to_batch: empty batch");
  const int h = bgr_images.front().rows;
  const int w = bgr_images.front().cols;
  Tensor batch = Tensor::zeros({static_cast<int>(bgr_images.size()), 3, h, w});
  for (std::size_t i = 0; i < bgr_images.size(); ++i) {
    const auto& img = bgr_images[i];
    if (img.rows != h || img.cols != w || img.type() != CV_8UC3)
      throw ValidationError("images_to_batch: inconsistent image shapes");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const auto& px = img.at<cv::Vec3b>(y, x);
        batch.at(static_cast<int>(i), 0, y, x) = px[2] / 255.0;
        batch.at(static_cast<int>(i), 1, y, x) = px[1] / 255.0;
        batch.at(static_cast<int>(i), 2, y, x) = px[0] / 255.0;
      }
  }
  return batch;
}

ImageStore::ImageStore(std::filesystem::path base_dir) : base_dir_(std::move(base_dir)) {}

std::filesystem::path ImageStore::resolve(const std::string& image_path) const {
  const std::filesystem::path p(image_path);
  if (p.is_absolute()) return p;
  if (!base_dir_.empty()) {
    const auto local = base_dir_ / p;
    if (std::filesystem::exists(local)) return local;
  }
  if (const char* root = std::getenv("FAIRDISCO_DATA_DIR")) {
    const auto global = std::filesystem::path(root) / p;
    if (std::filesystem::exists(global)) return global;
  }
  return base_dir_.empty() ? p : base_dir_ / p;
}

const cv::Mat& ImageStore::get(const Sample& sample) {
  const auto it = cache_.find(sample.image_path);
  if (it != cache_.end()) return it->second;
  const auto path = resolve(sample.image_path);
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty())
    throw std::runtime_error(
        fmt::format("cannot decode image '{}' (sample '{}')", path.string(), sample.id));
  return cache_.emplace(sample.image_path, std::move(img)).first->second;
}

}  // namespace fairdisco
