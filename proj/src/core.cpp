#include "fairdisco/core.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>
#include <unordered_set>

#include <fmt/format.h>

namespace fairdisco {

namespace {
std::function<void(const std::string&)>& warning_hook() {
  static std::function<void(const std::string&)> hook;
  return hook;
}
}  // namespace

void emit_warning(const std::string& message) {
  if (warning_hook()) {
    warning_hook()(message);
  } else {
    std::cerr << "[fairdisco] warning: " << message << "\n";
  }
}

void set_warning_hook(std::function<void(const std::string&)> hook) {
  warning_hook() = std::move(hook);
}

SourceDomain parse_source_domain(const std::string& text) {
  if (text == "Derm" || text == "derm") return SourceDomain::Derm;
  if (text == "Atla" || text == "atla") return SourceDomain::Atla;
  if (text == "DDI" || text == "ddi") return SourceDomain::DDI;
  if (text == "Synth" || text == "synth") return SourceDomain::Synth;
  throw ValidationError(fmt::format("unknown source domain '{}'", text));
}

std::string to_string(SourceDomain domain) {
  switch (domain) {
    case SourceDomain::Derm: return "Derm";
    case SourceDomain::Atla: return "Atla";
    case SourceDomain::DDI: return "DDI";
    case SourceDomain::Synth: return "Synth";
  }
  throw std::logic_error("unreachable");
}

ConditionVocabulary ConditionVocabulary::from_names(std::vector<std::string> names) {
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  if (names.empty()) throw ValidationError("condition vocabulary is empty");
  ConditionVocabulary vocab;
  vocab.names_ = std::move(names);
  return vocab;
}

int ConditionVocabulary::index_of(const std::string& name) const {
  const auto it = std::lower_bound(names_.begin(), names_.end(), name);
  if (it == names_.end() || *it != name)
    throw ValidationError(fmt::format("condition '{}' not in vocabulary", name));
  return static_cast<int>(it - names_.begin());
}

const std::string& ConditionVocabulary::name_of(int index) const {
  if (index < 0 || index >= size())
    throw ValidationError(fmt::format("condition index {} out of range [0, {})", index, size()));
  return names_[static_cast<std::size_t>(index)];
}

int SkinTypeVocabulary::group_of(int fitz) {
  if (fitz < 1 || fitz > 6)
    throw ValidationError(fmt::format("fitzpatrick value {} outside 1..6", fitz));
  return (fitz - 1) / 2;
}

namespace {
const char* kGroupNames[3] = {"T12", "T34", "T56"};
}

SkinTypeVocabulary SkinTypeVocabulary::from_fitzpatrick(const std::vector<int>& fitz_values,
                                                        bool grouped) {
  std::set<int> codes;
  for (const int f : fitz_values) {
    if (f == kUnknownFitzpatrick) continue;
    if (f < 1 || f > 6)
      throw ValidationError(fmt::format("fitzpatrick value {} outside 1..6", f));
    codes.insert(grouped ? group_of(f) : f);
  }
  if (codes.empty()) throw ValidationError("no known skin types in manifest");
  SkinTypeVocabulary vocab;
  vocab.grouped_ = grouped;
  for (const int c : codes) {
    vocab.codes_.push_back(c);
    vocab.names_.push_back(grouped ? kGroupNames[c] : fmt::format("T{}", c));
  }
  return vocab;
}

SkinTypeVocabulary SkinTypeVocabulary::from_names(std::vector<std::string> names) {
  if (names.empty()) throw ValidationError("skin-type vocabulary is empty");
  SkinTypeVocabulary vocab;
  const bool grouped = names.front().size() == 3;  // "T12" vs "T1"
  vocab.grouped_ = grouped;
  for (const auto& name : names) {
    int code = -1;
    if (grouped) {
      for (int g = 0; g < 3; ++g)
        if (name == kGroupNames[g]) code = g;
    } else if (name.size() == 2 && name[0] == 'T' && name[1] >= '1' && name[1] <= '6') {
      code = name[1] - '0';
    }
    if (code < 0) throw ValidationError(fmt::format("bad skin-type name '{}'", name));
    vocab.codes_.push_back(code);
    vocab.names_.push_back(name);
  }
  for (std::size_t i = 1; i < vocab.codes_.size(); ++i)
    if (vocab.codes_[i] <= vocab.codes_[i - 1])
      throw ValidationError("skin-type names out of order or duplicated");
  return vocab;
}

int SkinTypeVocabulary::index_of_fitz(int fitz) const {
  if (fitz == kUnknownFitzpatrick) throw ValidationError("unknown skin type is not indexable");
  const int code = grouped_ ? group_of(fitz) : fitz;
  const auto it = std::lower_bound(codes_.begin(), codes_.end(), code);
  if (it == codes_.end() || *it != code)
    throw ValidationError(fmt::format("fitzpatrick value {} not in vocabulary", fitz));
  return static_cast<int>(it - codes_.begin());
}

int SkinTypeVocabulary::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  throw ValidationError(fmt::format("skin type '{}' not in vocabulary", name));
}

const std::string& SkinTypeVocabulary::name_of(int index) const {
  if (index < 0 || index >= size())
    throw ValidationError(fmt::format("skin-type index {} out of range [0, {})", index, size()));
  return names_[static_cast<std::size_t>(index)];
}

void validate_record(const PredictionRecord& record, int num_conditions, int num_types) {
  if (record.class_probs.empty()) throw ValidationError("prediction record has no probabilities");
  double sum = 0.0;
  std::size_t argmax = 0;
  for (std::size_t i = 0; i < record.class_probs.size(); ++i) {
    const double p = record.class_probs[i];
    if (!(p >= 0.0) || !std::isfinite(p))
      throw ValidationError("prediction record has a non-finite or negative probability");
    sum += p;
    if (p > record.class_probs[argmax]) argmax = i;
  }
  if (std::abs(sum - 1.0) > kProbSumTolerance)
    throw ValidationError(fmt::format("class probabilities sum to {} (expected 1)", sum));
  if (static_cast<int>(argmax) != record.predicted_condition)
    throw ValidationError(fmt::format("predicted condition {} is not the argmax ({})",
                                      record.predicted_condition, argmax));
  if (num_conditions >= 0) {
    if (record.true_condition < 0 || record.true_condition >= num_conditions ||
        record.predicted_condition >= num_conditions ||
        static_cast<int>(record.class_probs.size()) != num_conditions)
      throw ValidationError("prediction record conditions out of vocabulary range");
  }
  if (num_types >= 0 && (record.skin_type < 0 || record.skin_type >= num_types))
    throw ValidationError("prediction record skin type out of vocabulary range");
}

Vocabularies build_vocabularies(const std::vector<RawRow>& rows, bool group_skin_types) {
  if (rows.empty()) throw ValidationError("manifest has no rows");
  std::unordered_set<std::string> ids;
  std::vector<std::string> condition_names;
  std::vector<int> fitz_values;
  condition_names.reserve(rows.size());
  fitz_values.reserve(rows.size());
  for (const auto& row : rows) {
    if (!ids.insert(row.id).second)
      throw ValidationError(fmt::format("duplicate sample id '{}'", row.id));
    condition_names.push_back(row.condition);
    fitz_values.push_back(row.fitzpatrick);
  }
  Vocabularies vocab{ConditionVocabulary::from_names(std::move(condition_names)),
                     SkinTypeVocabulary::from_fitzpatrick(fitz_values, group_skin_types)};
  if (vocab.conditions.size() == 1)
    emit_warning(fmt::format("manifest has a single condition class '{}'",
                             vocab.conditions.name_of(0)));
  return vocab;
}

}  // namespace fairdisco
