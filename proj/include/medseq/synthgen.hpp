#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "medseq/common.hpp"

namespace medseq {

struct ChiefComplaint {
  std::string name;
  std::string location;  // empty when not documented
};

struct DxEvent {
  std::string code;       // full ICD-10-CM
  std::int64_t date_day;  // day-resolution documentation date
};

struct LabEvent {
  std::string component;  // LOINC
  std::string unit;
  double value;
  std::int64_t instant;  // collection instant, epoch seconds
};

struct MedEvent {
  std::string code;  // full ATC
  std::int64_t instant;  // order instant
};

struct ProcEvent {
  std::string code;
  std::int64_t instant;  // procedure start
};

struct Encounter {
  std::string type;
  std::string dept;
  std::vector<ChiefComplaint> complaints;
  std::int64_t start = 0;
  std::int64_t end = 0;
  std::vector<DxEvent> diagnoses;
  std::vector<LabEvent> labs;
  std::vector<MedEvent> medications;
  std::vector<ProcEvent> procedures;
};

struct PatientRecord {
  std::uint64_t id = 0;
  std::string sex;
  std::string race;
  int birth_year = 0;
  int epoch_year = 0;  // calendar year of day 0 for this corpus
  std::vector<Encounter> encounters;  // ordered by start instant
};

/// Calendar year of an instant under the synthetic 365-day calendar.
inline int year_of_instant(std::int64_t instant, int epoch_year) {
  return epoch_year + static_cast<int>((instant / duration::day) / 365);
}

struct LabSpec {
  std::string component;
  std::string unit;
  double mean;
  double sd;
};

/// A chronic condition with a flat daily onset hazard. Once acquired it is
/// documented at the next outpatient encounter (back-dated to onset) and
/// re-documented at later visits.
struct ConditionSpec {
  std::string code;
  double annual_onset_prob = 0.0;
  std::string indicated_med;   // empty = none
  std::string monitored_lab;   // component; empty = none
  double lab_shift = 0.0;      // additive mean shift while active
};

/// An acute event whose daily hazard is multiplied by each active driver
/// condition; every firing produces an emergent encounter.
struct AcuteSpec {
  std::string code;
  double annual_base_prob = 0.0;
  double recurrence_multiplier = 1.0;  // applied once the event has occurred
  std::vector<std::pair<std::string, double>> driver_multipliers;
  std::string indicated_med;
  double inpatient_follow_prob = 0.0;
};

struct GeneratorConfig {
  std::uint64_t seed = 1;
  std::size_t population = 1000;
  int start_year = 2018;
  int span_days = 1460;

  double outpatient_daily_prob = 0.008;
  double telehealth_daily_prob = 0.0006;
  double redocument_prob = 0.8;
  double med_reorder_prob = 0.6;
  double background_dx_prob = 0.10;
  double background_med_prob = 0.12;
  double routine_lab_prob = 0.55;
  double complaint_prob = 0.35;

  std::vector<ConditionSpec> conditions;
  std::vector<AcuteSpec> acutes;
  std::vector<std::string> background_dx;
  std::vector<std::string> background_meds;
  std::vector<LabSpec> labs;
  std::vector<std::string> routine_lab_components;
  std::vector<std::pair<std::string, std::string>> complaints;

  /// The documented desk-scale scenario: three chronic drivers
  /// (hyperlipidemia, hypertension, type 2 diabetes) multiplying the
  /// hazard of myocardial infarction, plus background conditions that
  /// exercise 1-, 2-, and 3-part code shapes.
  static GeneratorConfig defaults();

  /// Flat per-day hazard equivalent to an annual probability.
  static double daily_hazard(double annual_prob);
};

/// Deterministic population generator; patient i's randomness derives only
/// from (config.seed, i), so any subset can be regenerated independently.
void generate_population(const GeneratorConfig& config,
                         const std::function<void(PatientRecord&&)>& sink);
std::vector<PatientRecord> generate_population(const GeneratorConfig& config);

/// Age-at-first-encounter rule plus the two-face-to-face-encounters-within-
/// two-years rule; drops patients with no qualifying encounters.
std::vector<PatientRecord> apply_inclusion_filter(
    std::vector<PatientRecord> records, int min_age = 18, int max_age = 120);
bool passes_inclusion_filter(const PatientRecord& record, int min_age = 18,
                             int max_age = 120);

/// Line-delimited JSON, one patient per line.
std::string record_to_json_line(const PatientRecord& record);
PatientRecord record_from_json_line(const std::string& line);
void save_records(const std::vector<PatientRecord>& records,
                  const std::string& path);
std::vector<PatientRecord> load_records(const std::string& path);

}  // namespace medseq
