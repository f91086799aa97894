#include "fairdisco/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

namespace fairdisco {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<int> group_totals(const PredictionLog& log) {
  std::vector<int> totals(static_cast<std::size_t>(log.num_types()), 0);
  for (const auto& r : log.records) ++totals[static_cast<std::size_t>(r.skin_type)];
  return totals;
}

void require_covered_groups(const PredictionLog& log, const std::vector<int>& totals) {
  for (std::size_t j = 0; j < totals.size(); ++j)
    if (totals[j] == 0)
      throw ValidationError(
          fmt::format("skin type '{}' has zero records in the log", log.skin_type_names[j]));
}

}  // namespace

void PredictionLog::validate() const {
  if (records.empty()) throw ValidationError("prediction log is empty");
  if (condition_names.empty() || skin_type_names.empty())
    throw ValidationError("prediction log lacks vocabularies");
  for (const auto& r : records) validate_record(r, num_conditions(), num_types());
}

GroupAccuracy group_accuracy(const PredictionLog& log) {
  log.validate();
  const int s = log.num_types();
  GroupAccuracy out;
  out.totals.assign(static_cast<std::size_t>(s), 0);
  out.correct.assign(static_cast<std::size_t>(s), 0);
  int correct_all = 0;
  for (const auto& r : log.records) {
    const auto j = static_cast<std::size_t>(r.skin_type);
    ++out.totals[j];
    if (r.predicted_condition == r.true_condition) {
      ++out.correct[j];
      ++correct_all;
    }
  }
  require_covered_groups(log, out.totals);
  out.per_type.resize(static_cast<std::size_t>(s));
  for (int j = 0; j < s; ++j)
    out.per_type[static_cast<std::size_t>(j)] =
        static_cast<double>(out.correct[static_cast<std::size_t>(j)]) /
        out.totals[static_cast<std::size_t>(j)];
  out.overall = static_cast<double>(correct_all) / static_cast<double>(log.records.size());
  return out;
}

double pqd(std::span<const double> per_type_accuracies) {
  if (per_type_accuracies.empty()) throw ValidationError("pqd: no group accuracies");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const double a : per_type_accuracies) {
    if (!std::isfinite(a) || a < 0.0)
      throw ValidationError("pqd: accuracies must be finite and non-negative");
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  return hi == 0.0 ? 1.0 : lo / hi;
}

double dpm(const PredictionLog& log) {
  log.validate();
  const int m = log.num_conditions();
  const int s = log.num_types();
  if (s < 2) throw ValidationError("dpm: needs at least two skin-type groups");
  const auto totals = group_totals(log);
  require_covered_groups(log, totals);

  std::vector<std::vector<int>> predicted(static_cast<std::size_t>(m),
                                          std::vector<int>(static_cast<std::size_t>(s), 0));
  for (const auto& r : log.records)
    ++predicted[static_cast<std::size_t>(r.predicted_condition)]
               [static_cast<std::size_t>(r.skin_type)];

  double sum = 0.0;
  for (int i = 0; i < m; ++i) {
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (int j = 0; j < s; ++j) {
      const double rate = static_cast<double>(predicted[static_cast<std::size_t>(i)]
                                                       [static_cast<std::size_t>(j)]) /
                          totals[static_cast<std::size_t>(j)];
      lo = std::min(lo, rate);
      hi = std::max(hi, rate);
    }
    sum += hi == 0.0 ? 1.0 : lo / hi;
  }
  return sum / m;
}

double eom(const PredictionLog& log) {
  log.validate();
  const int m = log.num_conditions();
  const int s = log.num_types();
  if (s < 2) throw ValidationError("eom: needs at least two skin-type groups");
  const auto totals = group_totals(log);
  require_covered_groups(log, totals);

  std::vector<std::vector<int>> ground(static_cast<std::size_t>(m),
                                       std::vector<int>(static_cast<std::size_t>(s), 0));
  std::vector<std::vector<int>> hits(static_cast<std::size_t>(m),
                                     std::vector<int>(static_cast<std::size_t>(s), 0));
  for (const auto& r : log.records) {
    const auto i = static_cast<std::size_t>(r.true_condition);
    const auto j = static_cast<std::size_t>(r.skin_type);
    ++ground[i][j];
    if (r.predicted_condition == r.true_condition) ++hits[i][j];
  }

  double sum = 0.0;
  int kept = 0;
  for (int i = 0; i < m; ++i) {
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    bool qualifying = false;
    for (int j = 0; j < s; ++j) {
      const int gt = ground[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      if (gt == 0) continue;
      qualifying = true;
      const double tpr =
          static_cast<double>(hits[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) / gt;
      lo = std::min(lo, tpr);
      hi = std::max(hi, tpr);
    }
    if (!qualifying) continue;
    ++kept;
    sum += hi == 0.0 ? 1.0 : lo / hi;
  }
  if (kept == 0) throw ValidationError("eom: every class lacks ground-truth support");
  return sum / kept;
}

RateCurves group_rate_curves(const PredictionLog& log, int condition) {
  log.validate();
  if (condition < 0 || condition >= log.num_conditions())
    throw ValidationError(fmt::format("rate curves: condition {} out of range", condition));
  const int s = log.num_types();
  const auto totals = group_totals(log);
  require_covered_groups(log, totals);

  RateCurves out;
  out.prediction_rate.assign(static_cast<std::size_t>(s), 0.0);
  out.tpr.assign(static_cast<std::size_t>(s), kNaN);
  std::vector<int> gt(static_cast<std::size_t>(s), 0), tp(static_cast<std::size_t>(s), 0);
  for (const auto& r : log.records) {
    const auto j = static_cast<std::size_t>(r.skin_type);
    if (r.predicted_condition == condition) out.prediction_rate[j] += 1.0;
    if (r.true_condition == condition) {
      ++gt[j];
      if (r.predicted_condition == condition) ++tp[j];
    }
  }
  for (int j = 0; j < s; ++j) {
    out.prediction_rate[static_cast<std::size_t>(j)] /= totals[static_cast<std::size_t>(j)];
    if (gt[static_cast<std::size_t>(j)] > 0)
      out.tpr[static_cast<std::size_t>(j)] =
          static_cast<double>(tp[static_cast<std::size_t>(j)]) / gt[static_cast<std::size_t>(j)];
  }
  return out;
}

double auc(const PredictionLog& log, int positive_condition) {
  log.validate();
  if (log.num_conditions() != 2)
    throw ValidationError("auc: defined for binary tasks only");
  if (positive_condition != 0 && positive_condition != 1)
    throw ValidationError("auc: positive class out of range");

  struct Scored {
    double score;
    bool positive;
  };
  std::vector<Scored> scored;
  scored.reserve(log.records.size());
  std::size_t n_pos = 0;
  for (const auto& r : log.records) {
    const bool pos = r.true_condition == positive_condition;
    scored.push_back({r.class_probs[static_cast<std::size_t>(positive_condition)], pos});
    if (pos) ++n_pos;
  }
  const std::size_t n_neg = scored.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw ValidationError("auc: one of the classes is absent from the log");

  // Rank-sum with average ranks for ties.
  std::sort(scored.begin(), scored.end(),
            [](const Scored& a, const Scored& b) { return a.score < b.score; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < scored.size()) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].score == scored[i].score) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (scored[k].positive) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u =
      rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

FairnessReport make_report(const PredictionLog& log) {
  FairnessReport report;
  const auto acc = group_accuracy(log);
  report.overall_accuracy = acc.overall;
  report.skin_type_names = log.skin_type_names;
  report.per_type_accuracy = acc.per_type;
  report.pqd = pqd(acc.per_type);
  if (log.num_types() >= 2) {
    report.dpm = dpm(log);
    report.eom = eom(log);
  } else {
    report.dpm = 1.0;
    report.eom = 1.0;
  }
  if (log.num_conditions() == 2) report.auc = auc(log, 1);
  report.condition_names = log.condition_names;
  for (int i = 0; i < log.num_conditions(); ++i)
    report.curves.push_back(group_rate_curves(log, i));
  return report;
}

std::string report_to_json(const FairnessReport& report) {
  nlohmann::ordered_json j;
  j["overall_accuracy"] = report.overall_accuracy;
  nlohmann::ordered_json per_type = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < report.skin_type_names.size(); ++i)
    per_type[report.skin_type_names[i]] = report.per_type_accuracy[i];
  j["per_type_accuracy"] = per_type;
  j["pqd"] = report.pqd;
  j["dpm"] = report.dpm;
  j["eom"] = report.eom;
  if (report.auc) j["auc"] = *report.auc;
  nlohmann::ordered_json curves = nlohmann::ordered_json::object();
  for (std::size_t c = 0; c < report.condition_names.size(); ++c) {
    nlohmann::ordered_json entry;
    entry["prediction_rate"] = report.curves[c].prediction_rate;
    nlohmann::ordered_json tprs = nlohmann::ordered_json::array();
    for (const double v : report.curves[c].tpr) {
      if (std::isnan(v))
        tprs.push_back(nullptr);
      else
        tprs.push_back(v);
    }
    entry["tpr"] = tprs;
    curves[report.condition_names[c]] = entry;
  }
  j["rate_curves"] = curves;
  return j.dump(2) + "\n";
}

std::string report_to_markdown(const FairnessReport& report, const std::string& model_name) {
  std::string header = "| Model | Avg |";
  std::string rule = "|---|---|";
  std::string row = fmt::format("| {} | {:.2f} |", model_name, report.overall_accuracy * 100.0);
  for (std::size_t i = 0; i < report.skin_type_names.size(); ++i) {
    header += fmt::format(" {} |", report.skin_type_names[i]);
    rule += "---|";
    row += fmt::format(" {:.2f} |", report.per_type_accuracy[i] * 100.0);
  }
  header += " PQD | DPM | EOM |";
  rule += "---|---|---|";
  row += fmt::format(" {:.2f} | {:.2f} | {:.2f} |", report.pqd * 100.0, report.dpm * 100.0,
                     report.eom * 100.0);
  if (report.auc) {
    header += " AUC |";
    rule += "---|";
    row += fmt::format(" {:.2f} |", *report.auc);
  }
  return header + "\n" + rule + "\n" + row + "\n";
}

std::string rate_curves_to_csv(const FairnessReport& report) {
  std::string out = "condition,skin_type,prediction_rate,tpr\n";
  for (std::size_t c = 0; c < report.condition_names.size(); ++c)
    for (std::size_t j = 0; j < report.skin_type_names.size(); ++j) {
      const double tpr = report.curves[c].tpr[j];
      out += fmt::format("{},{},{},{}\n", report.condition_names[c], report.skin_type_names[j],
                         report.curves[c].prediction_rate[j],
                         std::isnan(tpr) ? std::string() : fmt::format("{}", tpr));
    }
  return out;
}

namespace {

std::vector<std::string> split_on(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string part;
  std::stringstream ss(text);
  while (std::getline(ss, part, sep)) parts.push_back(part);
  if (!text.empty() && text.back() == sep) parts.emplace_back();
  return parts;
}

}  // namespace

void write_prediction_log(const std::filesystem::path& path, const PredictionLog& log) {
  log.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot open '{}' for writing", path.string()));
  out << fmt::format("# conditions={};skin_types={}\n", fmt::join(log.condition_names, "|"),
                     fmt::join(log.skin_type_names, "|"));
  out << "sample_id,true,pred";
  for (const auto& name : log.condition_names) out << fmt::format(",prob_{}", name);
  out << ",skin_type\n";
  for (const auto& r : log.records) {
    out << fmt::format("{},{},{}", r.sample_id,
                       log.condition_names[static_cast<std::size_t>(r.true_condition)],
                       log.condition_names[static_cast<std::size_t>(r.predicted_condition)]);
    for (const double p : r.class_probs) out << fmt::format(",{:.17g}", p);
    out << fmt::format(",{}\n", log.skin_type_names[static_cast<std::size_t>(r.skin_type)]);
  }
  if (!out) throw std::runtime_error(fmt::format("failed writing '{}'", path.string()));
}

PredictionLog read_prediction_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot open prediction log '{}'", path.string()));
  std::string line;
  if (!std::getline(in, line) || line.rfind("# conditions=", 0) != 0)
    throw ValidationError("prediction log: missing vocabulary header line");
  const auto semi = line.find(";skin_types=");
  if (semi == std::string::npos)
    throw ValidationError("prediction log: malformed vocabulary header line");

  PredictionLog log;
  log.condition_names = split_on(line.substr(13, semi - 13), '|');
  log.skin_type_names = split_on(line.substr(semi + 12), '|');
  if (!std::getline(in, line) || line.rfind("sample_id,true,pred", 0) != 0)
    throw ValidationError("prediction log: missing column header");

  const int m = log.num_conditions();
  auto condition_index = [&](const std::string& name) {
    for (int i = 0; i < m; ++i)
      if (log.condition_names[static_cast<std::size_t>(i)] == name) return i;
    throw ValidationError(fmt::format("prediction log: unknown condition '{}'", name));
  };
  auto type_index = [&](const std::string& name) {
    for (int i = 0; i < log.num_types(); ++i)
      if (log.skin_type_names[static_cast<std::size_t>(i)] == name) return i;
    throw ValidationError(fmt::format("prediction log: unknown skin type '{}'", name));
  };

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_on(line, ',');
    if (static_cast<int>(fields.size()) != 4 + m)
      throw ValidationError(fmt::format("prediction log: row with {} fields (expected {})",
                                        fields.size(), 4 + m));
    PredictionRecord rec;
    rec.sample_id = fields[0];
    rec.true_condition = condition_index(fields[1]);
    rec.predicted_condition = condition_index(fields[2]);
    rec.class_probs.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      try {
        rec.class_probs.push_back(std::stod(fields[static_cast<std::size_t>(3 + i)]));
      } catch (const std::exception&) {
        throw ValidationError("prediction log: non-numeric probability");
      }
    }
    rec.skin_type = type_index(fields.back());
    log.records.push_back(std::move(rec));
  }
  log.validate();
  return log;
}

}  // namespace fairdisco
