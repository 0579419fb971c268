#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "medseq/common.hpp"

namespace medseq {

using TokenId = std::uint32_t;

enum class TokenKind {
  Padding,
  Unknown,
  Separator,
  BeginSequence,
  Sex,
  Race,
  AgeBucket,
  YearBucket,
  EncounterStart,
  EncounterEnd,
  DeptSpecialty,
  ChiefComplaintName,
  ChiefComplaintLocation,
  DiagnosisPart1,
  DiagnosisPart2,
  DiagnosisPart3,
  LabComponent,
  LabQuantile,
  MedPart1,
  MedPart2,
  MedPart3,
  Procedure,
  TimeInterval,
};

const char* kind_name(TokenKind kind);
std::optional<TokenKind> kind_from_name(const std::string& name);

/// Canonical token text, e.g. ("Sex", "Female") -> "Sex_Female".
/// Position tags keep part strings from different kinds distinct.
std::string make_token_text(TokenKind kind, const std::string& payload);

struct TokenInfo {
  TokenKind kind;
  std::string payload;  // the value without the kind tag
  std::string text;     // unique serialized form
};

// The 13-interval ladder from "1-5 minutes" up to "3-6 months". The exact
// interior boundaries are a reconstruction: a near-geometric ladder with
// human-round edges. The top bucket doubles as the repeatable 6-month
// token for gaps beyond its upper bound.
class TimeBucketTable {
 public:
  struct Bucket {
    std::int64_t lo;  // seconds, inclusive
    std::int64_t hi;  // seconds, exclusive (except the repeatable top)
    std::string label;
  };

  static TimeBucketTable default_table();
  static TimeBucketTable from_labels(const std::vector<std::string>& labels);

  std::size_t size() const { return buckets_.size(); }
  const Bucket& bucket(std::size_t k) const { return buckets_.at(k); }
  std::size_t top_index() const { return buckets_.size() - 1; }

  /// Bucket indices for a nonnegative gap. Empty when the gap is below the
  /// smallest lower bound; round(gap / 6 months) copies of the top bucket
  /// when the gap exceeds the top bound. Negative gaps are an error.
  std::vector<std::size_t> encode_gap(std::int64_t gap_seconds) const;

  /// Geometric midpoint sqrt(lo*hi) of an ordinary bucket; the repeatable
  /// top bucket decodes to exactly 6 months.
  std::int64_t decode_bucket(std::size_t k) const;

  std::optional<std::size_t> index_of_label(const std::string& label) const;

 private:
  std::vector<Bucket> buckets_;
  std::unordered_map<std::string, std::size_t> by_label_;

  void rebuild_index();
  void validate() const;
};

/// Per (lab component, unit) decile cut points fitted on training values.
/// Pairs with fewer than min_count values are skipped; their results
/// tokenize to the Unknown quantile downstream.
class QuantileBinning {
 public:
  struct Sample {
    std::string component;
    std::string unit;
    double value;
  };

  static QuantileBinning fit(const std::vector<Sample>& values,
                             std::size_t min_count = 10,
                             std::vector<std::string>* warnings = nullptr);

  /// Decile bin in 1..10, out-of-range values clamped to the end bins.
  /// nullopt when the (component, unit) pair was never fitted.
  std::optional<int> assign(const std::string& component,
                            const std::string& unit, double value) const;

  bool has(const std::string& component, const std::string& unit) const;
  std::size_t pair_count() const { return cuts_.size(); }
  const std::vector<double>* cuts(const std::string& component,
                                  const std::string& unit) const;

  std::string serialize() const;
  static QuantileBinning deserialize(const std::string& text);

  void save(const std::string& path) const;
  static QuantileBinning load(const std::string& path);

 private:
  std::map<std::pair<std::string, std::string>, std::vector<double>> cuts_;
};

struct VocabConfig {
  std::size_t top_k_diagnoses = 1000;
  std::size_t top_k_medications = 500;
  std::size_t top_k_labs = 1000;
  std::size_t top_k_procedures = 1500;
  std::vector<std::string> sex_categories = {"Female",  "Male",  "Masked",
                                             "Other",   "Unknown",
                                             "Unspecified"};
  std::vector<std::string> race_categories = {
      "AmericanIndianOrAlaskaNative", "Asian", "BlackOrAfricanAmerican",
      "NativeHawaiianOrOtherPacificIslander", "Other", "Unknown", "White"};
  std::vector<std::string> encounter_types = {"Emergency", "Inpatient",
                                              "OfficeVisit", "Telehealth",
                                              "UrgentCare"};
  int age_min = 18;
  int age_max = 120;
  int year_min = 2000;
  int year_max = 2034;
};

/// Event frequencies measured on the training split; input to vocabulary
/// construction.
struct CorpusStats {
  std::map<std::string, std::int64_t> diagnosis_codes;  // full ICD-10-CM
  std::map<std::string, std::int64_t> medication_codes;  // full ATC
  std::map<std::string, std::int64_t> procedure_codes;
  std::map<std::pair<std::string, std::string>, std::int64_t> lab_pairs;
  std::map<std::string, std::int64_t> dept_specialties;
  std::map<std::string, std::int64_t> cc_names;
  std::map<std::string, std::int64_t> cc_locations;
  std::set<std::string> encounter_types;
  std::int64_t total_events = 0;
};

struct CodeSplit {
  std::vector<std::string> token_texts;
  std::vector<std::string> payloads;
  bool valid = true;
  std::string diagnostic;
};

/// ICD-10-CM -> 1-3 position-tagged tokens (dot stripped; 3/2/2 split).
CodeSplit encode_diagnosis(const std::string& icd_code);
/// 7-character ATC -> exactly 3 position-tagged tokens (3/2/2 split).
CodeSplit encode_medication(const std::string& atc_code);

/// Inverse of encode_diagnosis on part payloads ("E11","9" -> "E11.9").
std::string decode_diagnosis(const std::vector<std::string>& payloads);
std::string decode_medication(const std::vector<std::string>& payloads);

std::string age_bucket_payload(int age);
std::string year_bucket_payload(int year);

class Vocabulary {
 public:
  Vocabulary() = default;

  static Vocabulary build(const CorpusStats& stats, const VocabConfig& config);

  std::size_t size() const { return tokens_.size(); }
  const TokenInfo& info(TokenId id) const;
  std::optional<TokenId> find_text(const std::string& text) const;
  std::optional<TokenId> find(TokenKind kind, const std::string& payload) const;
  /// Lookup that falls back to the Unknown token.
  TokenId token_or_unknown(TokenKind kind, const std::string& payload) const;

  TokenId pad() const { return pad_; }
  TokenId unknown() const { return unk_; }
  TokenId separator() const { return sep_; }
  TokenId begin_sequence() const { return bos_; }

  const TimeBucketTable& time_table() const { return time_table_; }
  /// Seconds for a TimeInterval token; 0 for every other kind.
  std::int64_t decode_time_token(TokenId id) const;
  /// TimeInterval token ids representing a nonnegative gap.
  std::vector<TokenId> encode_gap_tokens(std::int64_t gap_seconds) const;

  bool is_known_diagnosis(const std::string& code) const {
    return known_diagnoses_.count(code) > 0;
  }
  bool is_known_medication(const std::string& code) const {
    return known_medications_.count(code) > 0;
  }
  const std::set<std::string>& known_diagnoses() const {
    return known_diagnoses_;
  }
  const std::set<std::string>& known_medications() const {
    return known_medications_;
  }

  /// Line-oriented text form: id<TAB>kind<TAB>token-string, ids dense from 0.
  std::string serialize() const;
  std::uint64_t fingerprint() const;

  /// Writes the vocabulary file plus a ".codes" companion carrying the
  /// admitted full diagnosis/medication code sets used for validity checks.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);
  static Vocabulary deserialize(const std::string& text,
                                const std::string& codes_text = "");

 private:
  std::vector<TokenInfo> tokens_;
  std::unordered_map<std::string, TokenId> by_text_;
  std::vector<TokenId> time_token_ids_;  // ladder order
  TokenId pad_ = 0, unk_ = 0, sep_ = 0, bos_ = 0;
  TimeBucketTable time_table_;
  std::set<std::string> known_diagnoses_;
  std::set<std::string> known_medications_;

  TokenId add(TokenKind kind, const std::string& payload);
  void finalize();
};

/// Accumulates CorpusStats over patient records; see synthgen.hpp for the
/// record type. Declared here to keep vocabulary inputs in one place.
struct PatientRecord;
void accumulate_stats(const PatientRecord& record, CorpusStats* stats);

}  // namespace medseq
