#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fairdisco/core.hpp"

namespace fairdisco {

/// All predictions of one evaluation run plus the vocabularies they are read
/// against. skin_type_names covers the groups the log claims; every claimed
/// group must have at least one record.
struct PredictionLog {
  std::vector<PredictionRecord> records;
  std::vector<std::string> condition_names;  // size M
  std::vector<std::string> skin_type_names;  // claimed groups

  int num_conditions() const { return static_cast<int>(condition_names.size()); }
  int num_types() const { return static_cast<int>(skin_type_names.size()); }
  void validate() const;  // throws ValidationError
};

struct GroupAccuracy {
  std::vector<double> per_type;  // aligned with skin_type_names
  std::vector<int> totals;
  std::vector<int> correct;
  double overall = 0.0;
};

/// accuracy_j = correct_j / total_j per skin type, plus overall accuracy.
GroupAccuracy group_accuracy(const PredictionLog& log);

/// min/max ratio of per-type accuracies; 1.0 when max = 0.
double pqd(std::span<const double> per_type_accuracies);

/// Mean over classes of min/max per-group prediction rates p(yhat=i | s=j).
/// A class whose max rate is 0 contributes 1 (all groups identically ignore it).
double dpm(const PredictionLog& log);

/// Same aggregation over per-group true-positive rates p(yhat=i | y=i, s=j).
/// Groups with no ground truth of class i are excluded from that class; a
/// class with no qualifying group is dropped and M reduced; like dpm, a kept
/// class whose max TPR is 0 contributes 1. Throws if every class is dropped.
double eom(const PredictionLog& log);

struct RateCurves {
  std::vector<double> prediction_rate;  // p(yhat=i | s=j) per type
  std::vector<double> tpr;              // p(yhat=i | y=i, s=j); NaN where undefined
};

/// The per-type vectors behind the prediction-rate / true-rate curves.
RateCurves group_rate_curves(const PredictionLog& log, int condition);

/// Probability-ranking AUC with ties counted 1/2 (Mann-Whitney). Binary logs
/// only; throws if either class is absent.
double auc(const PredictionLog& log, int positive_condition);

struct FairnessReport {
  double overall_accuracy = 0.0;
  std::vector<std::string> skin_type_names;
  std::vector<double> per_type_accuracy;
  double pqd = 0.0;
  double dpm = 0.0;
  double eom = 0.0;
  std::optional<double> auc;                            // binary tasks
  std::vector<std::string> condition_names;
  std::vector<RateCurves> curves;                       // one per condition
};

FairnessReport make_report(const PredictionLog& log);

std::string report_to_json(const FairnessReport& report);
/// One table row shaped like the in-domain comparison tables, percentages
/// with 2 decimals.
std::string report_to_markdown(const FairnessReport& report, const std::string& model_name);
/// Long-form CSV of the rate curves: condition,skin_type,prediction_rate,tpr.
std::string rate_curves_to_csv(const FairnessReport& report);

// CSV round trip: header line `# conditions=...;skin_types=...` then
// sample_id,true,pred,prob_<name>...,skin_type rows.
void write_prediction_log(const std::filesystem::path& path, const PredictionLog& log);
PredictionLog read_prediction_log(const std::filesystem::path& path);

}  // namespace fairdisco
