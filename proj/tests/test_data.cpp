#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>

#include "fairdisco/core.hpp"
#include "fairdisco/data.hpp"
#include "fairdisco/rng.hpp"

using namespace fairdisco;

namespace {

// Fitzpatrick17k joint counts: rows benign/malignant/non-neoplastic, columns T1..T6.
const int kFitzCounts[3][6] = {
    {444, 671, 475, 367, 159, 44},
    {453, 742, 456, 301, 147, 61},
    {2050, 3395, 2377, 2113, 1227, 530},
};
const char* kFitzConditions[3] = {"benign", "malignant", "non-neoplastic"};

std::vector<RawRow> fitz_rows(int unknown_rows = 565) {
  std::vector<RawRow> rows;
  int id = 0;
  for (int c = 0; c < 3; ++c)
    for (int f = 1; f <= 6; ++f)
      for (int k = 0; k < kFitzCounts[c][f - 1]; ++k)
        rows.push_back({"f" + std::to_string(id++), "img.png", kFitzConditions[c], f,
                        f <= 3 ? "Derm" : "Atla"});
  for (int k = 0; k < unknown_rows; ++k)
    rows.push_back({"u" + std::to_string(k), "img.png", kFitzConditions[k % 3],
                    kUnknownFitzpatrick, "Derm"});
  return rows;
}

std::vector<RawRow> ddi_rows() {
  // grouped counts: malignant 49/74/48, non-malignant 159/167/159
  const int counts[2][3] = {{49, 74, 48}, {159, 167, 159}};
  const char* conditions[2] = {"malignant", "non-malignant"};
  std::vector<RawRow> rows;
  int id = 0;
  for (int c = 0; c < 2; ++c)
    for (int g = 0; g < 3; ++g)
      for (int k = 0; k < counts[c][g]; ++k)
        rows.push_back({"d" + std::to_string(id++), "img.png", conditions[c], 2 * g + 1 + (k % 2),
                        "DDI"});
  return rows;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("Fitzpatrick-shaped manifest: unknowns dropped, counts match") {
  set_warning_hook([](const std::string&) {});
  const auto manifest = manifest_from_rows(fitz_rows());
  set_warning_hook({});
  CHECK(manifest.counts.total == 16012);
  CHECK(manifest.dropped_unknown == 565);
  CHECK(manifest.conditions.size() == 3);
  CHECK(manifest.skin_types.size() == 6);
  CHECK(manifest.counts.condition_totals[0] == 2160);   // benign
  CHECK(manifest.counts.condition_totals[1] == 2160);   // malignant
  CHECK(manifest.counts.condition_totals[2] == 11692);  // non-neoplastic
  CHECK(manifest.counts.type_totals ==
        std::vector<int>{2947, 4808, 3308, 2781, 1533, 635});

  // summary equals a recount of the rows
  const auto recount =
      count_samples(manifest.samples, manifest.conditions.size(), manifest.skin_types.size());
  CHECK(recount.cells == manifest.counts.cells);
  CHECK(recount.total == manifest.counts.total);
}

TEST_CASE("DDI-shaped manifest with grouped skin types") {
  LoadOptions options;
  options.group_skin_types = true;
  const auto manifest = manifest_from_rows(ddi_rows(), options);
  CHECK(manifest.counts.total == 656);
  CHECK(manifest.skin_types.size() == 3);
  CHECK(manifest.skin_types.name_of(0) == "T12");
  CHECK(manifest.counts.type_totals == std::vector<int>{208, 241, 207});
}

TEST_CASE("manifest CSV parsing") {
  const auto dir = temp_dir("fairdisco_data_csv");

  SUBCASE("round trip through a real file") {
    const auto path = dir / "manifest.csv";
    std::ofstream out(path);
    out << "id,image_path,condition,fitzpatrick,source\n";
    out << "a1,images/a1.png,benign,1,Derm\n";
    out << "a2,images/a2.png,malignant,5,Atla\n";
    out << "a3,images/a3.png,benign,-1,Derm\n";  // unknown, dropped
    out.close();
    set_warning_hook([](const std::string&) {});
    const auto manifest = load_manifest(path);
    set_warning_hook({});
    CHECK(manifest.samples.size() == 2);
    CHECK(manifest.dropped_unknown == 1);
    CHECK(manifest.base_dir == dir);
  }

  SUBCASE("empty file is an error") {
    const auto path = dir / "empty.csv";
    std::ofstream(path).close();
    CHECK_THROWS_AS(load_manifest(path), ValidationError);
  }

  SUBCASE("missing columns are an error") {
    const auto path = dir / "badheader.csv";
    std::ofstream out(path);
    out << "id,condition,fitzpatrick\n";
    out << "a1,benign,1\n";
    out.close();
    CHECK_THROWS_AS(load_manifest(path), ValidationError);
  }

  SUBCASE("bad fitzpatrick value is an error") {
    const auto path = dir / "badfitz.csv";
    std::ofstream out(path);
    out << "id,image_path,condition,fitzpatrick,source\n";
    out << "a1,x.png,benign,9,Derm\n";
    out.close();
    CHECK_THROWS_AS(load_manifest(path), ValidationError);
  }

  SUBCASE("path checking: error versus skip-and-log") {
    const auto path = dir / "paths.csv";
    std::ofstream out(path);
    out << "id,image_path,condition,fitzpatrick,source\n";
    out << "a1,present.png,benign,1,Derm\n";
    out << "a2,absent.png,malignant,2,Derm\n";
    out.close();
    cv::Mat img(8, 8, CV_8UC3, cv::Scalar(1, 2, 3));
    cv::imwrite((dir / "present.png").string(), img);

    LoadOptions strict;
    strict.path_check = PathCheck::Error;
    CHECK_THROWS_AS(load_manifest(path, strict), ValidationError);

    LoadOptions lenient;
    lenient.path_check = PathCheck::Skip;
    int warnings = 0;
    set_warning_hook([&](const std::string&) { ++warnings; });
    const auto manifest = load_manifest(path, lenient);
    set_warning_hook({});
    CHECK(manifest.samples.size() == 1);
    CHECK(warnings == 1);
  }

  std::filesystem::remove_all(dir);
}

TEST_CASE("out-domain splits on the Fitzpatrick-shaped manifest") {
  set_warning_hook([](const std::string&) {});
  const auto manifest = manifest_from_rows(fitz_rows());
  set_warning_hook({});

  const auto a = make_split(manifest, {SplitKind::OutDomainA});
  CHECK(a.train.size() == 7755);  // types 1-2
  CHECK(a.test.size() == 8257);

  const auto b = make_split(manifest, {SplitKind::OutDomainB});
  CHECK(b.train.size() == 6089);  // types 3-4
  CHECK(b.test.size() == 9923);

  const auto c = make_split(manifest, {SplitKind::OutDomainC});
  CHECK(c.train.size() == 2168);  // types 5-6
  CHECK(c.test.size() == 13844);

  for (const int i : c.train) {
    const int f = manifest.samples[static_cast<std::size_t>(i)].fitzpatrick;
    CHECK(f >= 5);
  }
}

TEST_CASE("out-domain condition filtering keeps only shared conditions") {
  std::vector<RawRow> rows;
  int id = 0;
  auto add = [&](const std::string& cond, int fitz, int n) {
    for (int k = 0; k < n; ++k)
      rows.push_back({"m" + std::to_string(id++), "x.png", cond, fitz, "Derm"});
  };
  add("shared", 1, 10);
  add("shared", 4, 10);
  add("trainonly", 2, 5);  // appears only in types 1-2
  add("testonly", 5, 5);   // appears only outside types 1-2

  const auto manifest = manifest_from_rows(rows);
  const auto split = make_split(manifest, {SplitKind::OutDomainA});
  CHECK(split.train.size() == 10);
  CHECK(split.test.size() == 10);

  std::set<int> train_conditions;
  for (const int i : split.train)
    train_conditions.insert(manifest.samples[static_cast<std::size_t>(i)].condition);
  for (const int i : split.test)
    CHECK(train_conditions.contains(manifest.samples[static_cast<std::size_t>(i)].condition));
}

TEST_CASE("in-domain split determinism, disjointness, degenerate ratio") {
  set_warning_hook([](const std::string&) {});
  Rng rng(55);
  for (int trial = 0; trial < 15; ++trial) {
    std::vector<RawRow> rows;
    const int n = static_cast<int>(rng.uniform_int(60, 200));
    for (int i = 0; i < n; ++i)
      rows.push_back({"p" + std::to_string(i), "x.png",
                      std::string("c") + char('a' + rng.uniform_int(0, 2)),
                      static_cast<int>(rng.uniform_int(1, 6)), "Derm"});
    const auto manifest = manifest_from_rows(rows);
    SplitSpec spec;
    spec.ratio = rng.uniform(0.5, 0.9);
    spec.seed = static_cast<std::uint64_t>(trial);

    Split split;
    try {
      split = make_split(manifest, spec);
    } catch (const ValidationError&) {
      continue;  // a condition class happened to land entirely on one side
    }
    CHECK(split.train.size() + split.test.size() == manifest.samples.size());
    std::set<int> train_set(split.train.begin(), split.train.end());
    for (const int i : split.test) CHECK_FALSE(train_set.contains(i));

    const auto again = make_split(manifest, spec);
    CHECK(again.train == split.train);
    CHECK(again.test == split.test);

    SplitSpec other = spec;
    other.seed += 1000;
    const auto different = make_split(manifest, other);
    CHECK(different.train.size() == split.train.size());
  }
  set_warning_hook({});

  const auto manifest = manifest_from_rows(fitz_rows(0));
  SplitSpec degenerate;
  degenerate.ratio = 1.0;
  CHECK_THROWS_AS(make_split(manifest, degenerate), ValidationError);
}

TEST_CASE("stratified in-domain split keeps per-class ratios") {
  std::vector<RawRow> rows;
  int id = 0;
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 100; ++k)
      rows.push_back({"s" + std::to_string(id++), "x.png", "c" + std::to_string(c),
                      1 + (k % 6), "Derm"});
  const auto manifest = manifest_from_rows(rows);
  SplitSpec spec;
  spec.stratified = true;
  spec.ratio = 0.8;
  const auto split = make_split(manifest, spec);
  std::vector<int> per_class(3, 0);
  for (const int i : split.train)
    ++per_class[static_cast<std::size_t>(manifest.samples[static_cast<std::size_t>(i)].condition)];
  CHECK(per_class == std::vector<int>{80, 80, 80});
}

TEST_CASE("split id files round trip") {
  const auto dir = temp_dir("fairdisco_split_ids");
  std::vector<RawRow> rows;
  for (int i = 0; i < 20; ++i)
    rows.push_back({"r" + std::to_string(i), "x.png", i % 2 ? "a" : "b",
                    1 + (i % 6), "Derm"});
  const auto manifest = manifest_from_rows(rows);
  const auto split = make_split(manifest, {SplitKind::InDomain, 0.7, 3});
  const auto path = dir / "train_ids.txt";
  write_split_ids(path, manifest, split.train);
  const auto loaded = read_split_ids(path, manifest);
  CHECK(loaded == split.train);

  std::ofstream bad(dir / "bad.txt");
  bad << "missing_id\n";
  bad.close();
  CHECK_THROWS_AS(read_split_ids(dir / "bad.txt", manifest), ValidationError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("reweighting: frozen Table-1 cell and the factorization identity") {
  set_warning_hook([](const std::string&) {});
  const auto manifest = manifest_from_rows(fitz_rows());
  set_warning_hook({});
  const auto table = reweight_table(manifest);

  // cell (malignant, T1): (2160 * 2947) / (16012 * 453)
  const double expected = 2160.0 * 2947.0 / (16012.0 * 453.0);
  CHECK(table.cell[1][0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(table.cell[1][0] == doctest::Approx(0.8776).epsilon(5e-5));

  // weighted joint factorizes exactly: w * P_obs = P(c) * P(t), every cell
  const auto& t = manifest.counts;
  const double n = t.total;
  for (std::size_t c = 0; c < t.cells.size(); ++c)
    for (std::size_t j = 0; j < t.type_totals.size(); ++j) {
      if (t.cells[c][j] == 0) continue;
      const double weighted_joint = table.cell[c][j] * (t.cells[c][j] / n);
      const double product = (t.condition_totals[c] / n) * (t.type_totals[j] / n);
      CHECK(std::abs(weighted_joint - product) < 1e-12);
    }
}

TEST_CASE("reweighting on an independent joint gives unit weights") {
  // counts(c, t) = a_c * b_t is exactly independent
  const int a[2] = {2, 3};
  const int b[3] = {4, 1, 5};
  std::vector<RawRow> rows;
  int id = 0;
  for (int c = 0; c < 2; ++c)
    for (int t = 0; t < 3; ++t)
      for (int k = 0; k < a[c] * b[t]; ++k)
        rows.push_back({"w" + std::to_string(id++), "x.png", c ? "x" : "y", t + 1, "Derm"});
  const auto manifest = manifest_from_rows(rows);
  const auto table = reweight_table(manifest);
  for (const auto& row : table.cell)
    for (const double w : row) CHECK(std::abs(w - 1.0) < 1e-12);
}

TEST_CASE("reweighting on random manifests satisfies the identity") {
  Rng rng(660);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<RawRow> rows;
    int id = 0;
    for (int c = 0; c < 3; ++c)
      for (int t = 1; t <= 4; ++t) {
        const int count = static_cast<int>(rng.uniform_int(1, 40));
        for (int k = 0; k < count; ++k)
          rows.push_back({"q" + std::to_string(id++), "x.png", "c" + std::to_string(c), t,
                          "Derm"});
      }
    const auto manifest = manifest_from_rows(rows);
    const auto table = reweight_table(manifest);
    const auto& t = manifest.counts;
    const double n = t.total;
    for (std::size_t c = 0; c < t.cells.size(); ++c)
      for (std::size_t j = 0; j < t.type_totals.size(); ++j) {
        const double weighted_joint = table.cell[c][j] * (t.cells[c][j] / n);
        const double product = (t.condition_totals[c] / n) * (t.type_totals[j] / n);
        CHECK(std::abs(weighted_joint - product) < 1e-12);
      }
  }
}

TEST_CASE("resampling weights and draw uniformity") {
  // two groups with counts 10 and 90
  std::vector<RawRow> rows;
  int id = 0;
  for (int k = 0; k < 10; ++k)
    rows.push_back({"g" + std::to_string(id++), "x.png", "a", 1, "Derm"});
  for (int k = 0; k < 90; ++k)
    rows.push_back({"g" + std::to_string(id++), "x.png", "a", 2, "Derm"});
  set_warning_hook([](const std::string&) {});
  const auto manifest = manifest_from_rows(rows);
  set_warning_hook({});
  const auto table = resample_weights(manifest);
  CHECK(table.cell[0][0] == doctest::Approx(0.1));
  CHECK(table.cell[0][1] == doctest::Approx(1.0 / 90.0));

  // 100k weighted draws: per-group frequency uniform within 2% absolute
  std::vector<double> weights;
  for (const auto& s : manifest.samples) weights.push_back(table.weight_for(s));
  WeightedSampler sampler(weights);
  Rng rng(77);
  int group0 = 0;
  const int draws = 100000;
  for (int k = 0; k < draws; ++k)
    if (manifest.samples[sampler.draw(rng)].skin_type == 0) ++group0;
  CHECK(std::abs(static_cast<double>(group0) / draws - 0.5) < 0.02);

  // empty group requested
  const auto empty_cell_manifest = manifest_from_rows(
      {{"e0", "x.png", "a", 1, "Derm"}, {"e1", "x.png", "b", 2, "Derm"}});
  const auto sparse = resample_weights(empty_cell_manifest);
  Sample probe = empty_cell_manifest.samples[0];
  probe.skin_type = 1;  // cell (a, T2) has no samples
  CHECK_THROWS_AS(sparse.weight_for(probe), ValidationError);
}

TEST_CASE("class-balanced weights and draw frequencies") {
  set_warning_hook([](const std::string&) {});
  const auto manifest = manifest_from_rows(fitz_rows(0));
  set_warning_hook({});
  const auto table = class_balanced_weights(manifest);
  CHECK(table.cell[0][0] == doctest::Approx(1.0 / 2160.0));
  CHECK(table.cell[1][3] == doctest::Approx(1.0 / 2160.0));
  CHECK(table.cell[2][5] == doctest::Approx(1.0 / 11692.0));

  std::vector<double> weights;
  for (const auto& s : manifest.samples) weights.push_back(table.weight_for(s));
  WeightedSampler sampler(weights);
  Rng rng(88);
  std::vector<int> per_class(3, 0);
  const int draws = 100000;
  for (int k = 0; k < draws; ++k)
    ++per_class[static_cast<std::size_t>(
        manifest.samples[sampler.draw(rng)].condition)];
  for (const int count : per_class)
    CHECK(std::abs(static_cast<double>(count) / draws - 1.0 / 3.0) < 0.02);

  // single class -> uniform over samples
  const auto single = manifest_from_rows(
      {{"s0", "x.png", "only", 1, "Derm"}, {"s1", "x.png", "only", 2, "Derm"}});
  const auto uniform = class_balanced_weights(single);
  CHECK(uniform.cell[0][0] == doctest::Approx(uniform.cell[0][1]));
}

TEST_CASE("augmentation pipeline") {
  const auto dir = temp_dir("fairdisco_augment");
  Rng pix(123);
  cv::Mat img(48, 64, CV_8UC3);
  for (int y = 0; y < img.rows; ++y)
    for (int x = 0; x < img.cols; ++x)
      img.at<cv::Vec3b>(y, x) = cv::Vec3b(static_cast<unsigned char>(pix.uniform_int(0, 255)),
                                          static_cast<unsigned char>(pix.uniform_int(0, 255)),
                                          static_cast<unsigned char>(pix.uniform_int(0, 255)));

  // evaluation path: exact 224 x 224 x 3
  const auto eval = eval_preprocess(img, 224);
  CHECK(eval.rows == 224);
  CHECK(eval.cols == 224);
  CHECK(eval.channels() == 3);

  // disabled augmentation is the deterministic resize-only path
  AugmentConfig off;
  off.enabled = false;
  Rng r1(5), r2(6);
  const auto a = augment_image(img, off, r1);
  const auto b = augment_image(img, off, r2);
  CHECK(cv::countNonZero(cv::Mat(a != b).reshape(1)) == 0);

  // seeded augmentation: same seed, same bytes; different seed, different image
  AugmentConfig on;
  on.out_size = 64;
  Rng s1(42), s2(42), s3(43);
  const auto x1 = augment_image(img, on, s1);
  const auto x2 = augment_image(img, on, s2);
  const auto x3 = augment_image(img, on, s3);
  CHECK(cv::countNonZero(cv::Mat(x1 != x2).reshape(1)) == 0);
  CHECK(cv::countNonZero(cv::Mat(x1 != x3).reshape(1)) > 0);

  CHECK_THROWS(augment_image(cv::Mat(), on, s1));
  std::filesystem::remove_all(dir);
}

TEST_CASE("image tensors and the image store") {
  const auto dir = temp_dir("fairdisco_store");
  cv::Mat img(4, 4, CV_8UC3, cv::Scalar(255, 128, 0));  // BGR
  cv::imwrite((dir / "img.png").string(), img);

  const auto tensor = image_to_tensor(img);
  CHECK(tensor.shape == std::vector<int>{1, 3, 4, 4});
  CHECK(tensor.at(0, 0, 0, 0) == doctest::Approx(0.0));          // R
  CHECK(tensor.at(0, 1, 0, 0) == doctest::Approx(128.0 / 255));  // G
  CHECK(tensor.at(0, 2, 0, 0) == doctest::Approx(1.0));          // B

  ImageStore store(dir);
  Sample sample{"s0", "img.png", 0, 0, 1, SourceDomain::Synth};
  const auto& loaded = store.get(sample);
  CHECK(loaded.rows == 4);
  const auto& cached = store.get(sample);
  CHECK(&loaded == &cached);

  Sample missing{"s1", "nope.png", 0, 0, 1, SourceDomain::Synth};
  CHECK_THROWS(store.get(missing));
  std::filesystem::remove_all(dir);
}

TEST_CASE("subset manifest keeps vocabularies and recounts") {
  const auto manifest = manifest_from_rows(ddi_rows(), {true, PathCheck::None});
  std::vector<int> indices;
  for (int i = 0; i < 100; ++i) indices.push_back(i);
  const auto sub = subset_manifest(manifest, indices);
  CHECK(sub.conditions == manifest.conditions);
  CHECK(sub.skin_types == manifest.skin_types);
  CHECK(sub.counts.total == 100);
  CHECK_THROWS_AS(subset_manifest(manifest, std::vector<int>{99999}), ValidationError);
}
