#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fairdisco {

// Bad user input or configuration; the CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Warning sink, replaceable in tests. Default writes to stderr.
void emit_warning(const std::string& message);
void set_warning_hook(std::function<void(const std::string&)> hook);  // empty -> default

enum class SourceDomain { Derm, Atla, DDI, Synth };
SourceDomain parse_source_domain(const std::string& text);
std::string to_string(SourceDomain domain);

constexpr int kUnknownFitzpatrick = -1;

/// Dense skin-condition vocabulary. Indices are assigned by lexicographic
/// name sort so identical manifests always map to identical indices.
class ConditionVocabulary {
 public:
  ConditionVocabulary() = default;
  static ConditionVocabulary from_names(std::vector<std::string> names);

  int index_of(const std::string& name) const;  // throws ValidationError on unknown
  const std::string& name_of(int index) const;
  int size() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }

  bool operator==(const ConditionVocabulary&) const = default;

 private:
  std::vector<std::string> names_;  // sorted, unique
};

/// Fitzpatrick skin-type vocabulary over the types actually present.
/// Either per-type (T1..T6) or grouped (T12/T34/T56: {1,2}->T12, {3,4}->T34,
/// {5,6}->T56). Unknown types (fitzpatrick = -1) are flagged upstream and are
/// never indexed here.
class SkinTypeVocabulary {
 public:
  SkinTypeVocabulary() = default;
  static SkinTypeVocabulary from_fitzpatrick(const std::vector<int>& fitz_values, bool grouped);
  static SkinTypeVocabulary from_names(std::vector<std::string> names);  // e.g. checkpoint reload

  static int group_of(int fitz);  // 1,2 -> 0; 3,4 -> 1; 5,6 -> 2

  // Index of the type a raw Fitzpatrick value falls into; throws if unknown
  // or not part of this vocabulary.
  int index_of_fitz(int fitz) const;
  int index_of(const std::string& name) const;
  const std::string& name_of(int index) const;
  int size() const { return static_cast<int>(names_.size()); }
  bool grouped() const { return grouped_; }
  const std::vector<std::string>& names() const { return names_; }

  bool operator==(const SkinTypeVocabulary&) const = default;

 private:
  std::vector<std::string> names_;  // sorted by scale position
  std::vector<int> codes_;          // ungrouped: fitz value 1..6; grouped: group 0..2
  bool grouped_ = false;
};

/// One labeled image record, fully validated against its vocabularies.
struct Sample {
  std::string id;
  std::string image_path;
  int condition = -1;    // index into ConditionVocabulary
  int skin_type = -1;    // index into SkinTypeVocabulary
  int fitzpatrick = kUnknownFitzpatrick;  // raw scale value 1..6
  SourceDomain source = SourceDomain::Synth;
};

/// Per-sample evaluation output; the unit every metric is computed from.
struct PredictionRecord {
  std::string sample_id;
  int true_condition = -1;
  int predicted_condition = -1;
  std::vector<double> class_probs;  // length M, sums to 1 within 1e-6
  int skin_type = -1;
};

inline constexpr double kProbSumTolerance = 1e-6;

// Throws ValidationError unless probs sum to 1 within tolerance and
// predicted == argmax(probs). num_conditions/num_types of -1 skip the range check.
void validate_record(const PredictionRecord& record, int num_conditions, int num_types);

/// Raw manifest row before vocabulary assignment.
struct RawRow {
  std::string id;
  std::string image_path;
  std::string condition;
  int fitzpatrick = kUnknownFitzpatrick;
  std::string source;
};

struct Vocabularies {
  ConditionVocabulary conditions;
  SkinTypeVocabulary skin_types;
};

// Builds both vocabularies from raw rows. Unknown skin types are skipped (not
// indexed); duplicate sample ids and an empty row set are errors; a
// single-condition manifest emits a warning.
Vocabularies build_vocabularies(const std::vector<RawRow>& rows, bool group_skin_types = false);

}  // namespace fairdisco
