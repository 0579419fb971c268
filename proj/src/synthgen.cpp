#include "medseq/synthgen.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "medseq/vocab.hpp"

namespace medseq {

using json = nlohmann::json;
using namespace duration;

double GeneratorConfig::daily_hazard(double annual_prob) {
  if (annual_prob <= 0.0) return 0.0;
  if (annual_prob >= 1.0) return 1.0;
  return 1.0 - std::pow(1.0 - annual_prob, 1.0 / 365.0);
}

GeneratorConfig GeneratorConfig::defaults() {
  GeneratorConfig c;
  c.conditions = {
      // The planted drivers of myocardial infarction.
      {"E78.5", 0.16, "C10AA05", "2093-3", 58.0},
      {"I10", 0.14, "C09AA02", "2160-0", 0.18},
      {"E11.9", 0.09, "A10BA02", "4548-4", 2.2},
      // Background chronic conditions, no planted downstream effect.
      {"J45.909", 0.05, "R03AC02", "", 0.0},
      {"F10.20", 0.04, "", "", 0.0},
      {"N18.3", 0.03, "", "2160-0", 0.9},
      {"M79.7", 0.03, "", "", 0.0},
      {"M06.9", 0.02, "", "", 0.0},
      {"B18.2", 0.01, "", "", 0.0},
  };
  c.acutes = {
      {"I21.9",
       0.012,
       3.0,
       {{"E78.5", 5.0}, {"I10", 3.0}, {"E11.9", 2.0}},
       "B01AC06",
       0.35},
      {"K85.9", 0.006, 2.0, {{"F10.20", 4.0}}, "", 0.25},
  };
  c.background_dx = {"R05.9",  "R10.9",  "R51.9",   "R53.83", "J06.9",
                     "M54.50", "Z00.00", "T82.310", "I25.10"};
  c.background_meds = {"N02BE01", "A02BC01", "J01CA04", "N06AB03", "C07AB02"};
  c.labs = {
      {"718-7", "g/dL", 13.8, 1.4},    {"6690-2", "10*3/uL", 7.2, 1.9},
      {"777-3", "10*3/uL", 260.0, 55.0}, {"2345-7", "mg/dL", 98.0, 18.0},
      {"2160-0", "mg/dL", 0.95, 0.22}, {"2093-3", "mg/dL", 185.0, 32.0},
      {"2571-8", "mg/dL", 120.0, 45.0}, {"4548-4", "%", 5.4, 0.5},
      {"10839-9", "ng/mL", 0.02, 0.015},
  };
  c.routine_lab_components = {"718-7", "6690-2", "777-3", "2345-7", "2160-0"};
  c.complaints = {
      {"ChestPain", "Chest"},     {"ShortnessOfBreath", "Chest"},
      {"AbdominalPain", "Abdomen"}, {"Headache", "Head"},
      {"Cough", "Chest"},         {"BackPain", "Back"},
      {"Fatigue", ""},            {"Fever", ""},
      {"JointPain", "Knee"},
  };
  return c;
}

namespace {

struct WeightedName {
  const char* name;
  double weight;
};

std::string pick_weighted(Rng& rng, const std::vector<WeightedName>& items) {
  double total = 0.0;
  for (const auto& it : items) total += it.weight;
  double u = rng.uniform01() * total;
  for (const auto& it : items) {
    u -= it.weight;
    if (u < 0.0) return it.name;
  }
  return items.back().name;
}

const std::vector<WeightedName> kSexWeights = {
    {"Female", 0.52},  {"Male", 0.46},        {"Unknown", 0.012},
    {"Masked", 0.004}, {"Other", 0.002},      {"Unspecified", 0.002}};

const std::vector<WeightedName> kRaceWeights = {
    {"White", 0.70},
    {"BlackOrAfricanAmerican", 0.14},
    {"Asian", 0.05},
    {"AmericanIndianOrAlaskaNative", 0.01},
    {"NativeHawaiianOrOtherPacificIslander", 0.004},
    {"Other", 0.056},
    {"Unknown", 0.04}};

struct AcuteOccurrence {
  std::size_t acute_index;
  std::int64_t day;
};

const LabSpec* find_lab(const GeneratorConfig& cfg,
                        const std::string& component) {
  for (const auto& lab : cfg.labs) {
    if (lab.component == component) return &lab;
  }
  return nullptr;
}

class PatientBuilder {
 public:
  PatientBuilder(const GeneratorConfig& cfg, std::uint64_t patient_id)
      : cfg_(cfg), rng_(derive_seed(cfg.seed, patient_id)) {
    record_.id = patient_id;
    record_.epoch_year = cfg.start_year;
  }

  PatientRecord build() {
    draw_demographics();
    draw_condition_onsets();
    draw_acute_occurrences();
    draw_visit_days();
    for (std::int64_t d : visit_days_) add_office_visit(d, "OfficeVisit");
    for (std::int64_t d : telehealth_days_) add_telehealth(d);
    for (const auto& occ : acute_events_) add_emergent(occ);
    std::stable_sort(
        record_.encounters.begin(), record_.encounters.end(),
        [](const Encounter& a, const Encounter& b) { return a.start < b.start; });
    return std::move(record_);
  }

 private:
  void draw_demographics() {
    record_.sex = pick_weighted(rng_, kSexWeights);
    record_.race = pick_weighted(rng_, kRaceWeights);
    age_at_day0_ = 25 + static_cast<int>(rng_.below(61));  // 25..85
    record_.birth_year = cfg_.start_year - age_at_day0_;
  }

  void draw_condition_onsets() {
    onset_day_.assign(cfg_.conditions.size(), -1);
    for (std::size_t i = 0; i < cfg_.conditions.size(); ++i) {
      const double h =
          GeneratorConfig::daily_hazard(cfg_.conditions[i].annual_onset_prob);
      const std::int64_t d = rng_.geometric_days(h);
      if (d < cfg_.span_days) onset_day_[i] = d;
    }
  }

  bool condition_active(std::size_t i, std::int64_t day) const {
    return onset_day_[i] >= 0 && onset_day_[i] <= day;
  }

  // Exact sampling of the per-day Bernoulli process with piecewise-constant
  // hazard: the geometric wait is memoryless, so redrawing at every hazard
  // change point preserves the process law.
  void draw_acute_occurrences() {
    for (std::size_t a = 0; a < cfg_.acutes.size(); ++a) {
      const AcuteSpec& spec = cfg_.acutes[a];
      const double base = GeneratorConfig::daily_hazard(spec.annual_base_prob);
      std::vector<std::int64_t> changes;
      for (std::size_t i = 0; i < cfg_.conditions.size(); ++i) {
        if (onset_day_[i] > 0) changes.push_back(onset_day_[i]);
      }
      std::sort(changes.begin(), changes.end());
      std::int64_t day = 0;
      bool occurred = false;
      while (day < cfg_.span_days) {
        double h = base;
        for (const auto& [code, mult] : spec.driver_multipliers) {
          for (std::size_t i = 0; i < cfg_.conditions.size(); ++i) {
            if (cfg_.conditions[i].code == code && condition_active(i, day)) {
              h *= mult;
            }
          }
        }
        if (occurred) h *= spec.recurrence_multiplier;
        h = std::min(h, 1.0);
        std::int64_t next_change = cfg_.span_days;
        for (std::int64_t c : changes) {
          if (c > day) {
            next_change = std::min(next_change, c);
            break;
          }
        }
        const std::int64_t fire = day + rng_.geometric_days(h);
        if (fire < next_change && fire < cfg_.span_days) {
          acute_events_.push_back({a, fire});
          occurred = true;
          day = fire + 1;
        } else {
          day = next_change;
        }
      }
    }
    std::sort(acute_events_.begin(), acute_events_.end(),
              [](const AcuteOccurrence& x, const AcuteOccurrence& y) {
                return x.day < y.day;
              });
  }

  void draw_visit_days() {
    std::int64_t day = rng_.geometric_days(cfg_.outpatient_daily_prob);
    std::set<std::int64_t> days;
    while (day < cfg_.span_days) {
      days.insert(day);
      day += 1 + rng_.geometric_days(cfg_.outpatient_daily_prob);
    }
    // Follow-up visit one to three weeks after each acute event.
    for (const auto& occ : acute_events_) {
      const std::int64_t f = occ.day + 7 + rng_.range(0, 14);
      if (f < cfg_.span_days) days.insert(f);
    }
    visit_days_.assign(days.begin(), days.end());

    day = rng_.geometric_days(cfg_.telehealth_daily_prob);
    while (day < cfg_.span_days) {
      if (!days.count(day)) telehealth_days_.push_back(day);
      day += 1 + rng_.geometric_days(cfg_.telehealth_daily_prob);
    }
  }

  double lab_value(const std::string& component, std::int64_t day) {
    const LabSpec* spec = find_lab(cfg_, component);
    if (spec == nullptr) return 0.0;
    double mean = spec->mean;
    for (std::size_t i = 0; i < cfg_.conditions.size(); ++i) {
      if (cfg_.conditions[i].monitored_lab == component &&
          condition_active(i, day)) {
        mean += cfg_.conditions[i].lab_shift;
      }
    }
    return std::max(0.0, rng_.normal(mean, spec->sd));
  }

  void push_lab(Encounter& enc, const std::string& component,
                std::int64_t instant, std::int64_t day) {
    const LabSpec* spec = find_lab(cfg_, component);
    if (spec == nullptr) return;
    enc.labs.push_back({component, spec->unit, lab_value(component, day),
                        instant});
  }

  void document_conditions(Encounter& enc, std::int64_t day) {
    for (std::size_t i = 0; i < cfg_.conditions.size(); ++i) {
      if (!condition_active(i, day)) continue;
      if (!documented_.count(i)) {
        // First documentation back-dates to the true onset day.
        enc.diagnoses.push_back({cfg_.conditions[i].code, onset_day_[i]});
        documented_.insert(i);
      } else if (rng_.bernoulli(cfg_.redocument_prob)) {
        enc.diagnoses.push_back({cfg_.conditions[i].code, day});
      }
    }
  }

  void order_indicated_meds(Encounter& enc, std::int64_t day,
                            std::int64_t from, std::int64_t to) {
    for (std::size_t i = 0; i < cfg_.conditions.size(); ++i) {
      if (!condition_active(i, day)) continue;
      const auto& med = cfg_.conditions[i].indicated_med;
      if (!med.empty() && rng_.bernoulli(cfg_.med_reorder_prob)) {
        enc.medications.push_back({med, from + rng_.range(0, to - from)});
      }
    }
  }

  void add_office_visit(std::int64_t day, const std::string& type) {
    Encounter enc;
    enc.type = type;
    enc.dept = rng_.bernoulli(0.6) ? "FamilyMedicine" : "InternalMedicine";
    enc.start = day * duration::day + 8 * hour + rng_.range(0, 8 * hour);
    enc.end = enc.start + 45 * minute + rng_.range(0, 45 * minute);
    bool chest_complaint = false;
    if (rng_.bernoulli(cfg_.complaint_prob) && !cfg_.complaints.empty()) {
      const auto& cc =
          cfg_.complaints[rng_.below(cfg_.complaints.size())];
      enc.complaints.push_back({cc.first, cc.second});
      chest_complaint = cc.second == "Chest";
    }
    document_conditions(enc, day);
    if (rng_.bernoulli(cfg_.background_dx_prob) && !cfg_.background_dx.empty()) {
      enc.diagnoses.push_back(
          {cfg_.background_dx[rng_.below(cfg_.background_dx.size())], day});
    }
    bool any_labs = false;
    for (std::size_t i = 0; i < cfg_.conditions.size(); ++i) {
      if (condition_active(i, day) && !cfg_.conditions[i].monitored_lab.empty() &&
          rng_.bernoulli(0.7)) {
        push_lab(enc, cfg_.conditions[i].monitored_lab,
                 enc.start + 5 * minute + rng_.range(0, 25 * minute), day);
        any_labs = true;
      }
    }
    if (rng_.bernoulli(cfg_.routine_lab_prob) &&
        !cfg_.routine_lab_components.empty()) {
      push_lab(enc,
               cfg_.routine_lab_components[rng_.below(
                   cfg_.routine_lab_components.size())],
               enc.start + 5 * minute + rng_.range(0, 25 * minute), day);
      any_labs = true;
    }
    order_indicated_meds(enc, day, enc.start + 10 * minute,
                         enc.start + 40 * minute);
    if (rng_.bernoulli(cfg_.background_med_prob) &&
        !cfg_.background_meds.empty()) {
      enc.medications.push_back(
          {cfg_.background_meds[rng_.below(cfg_.background_meds.size())],
           enc.start + 10 * minute + rng_.range(0, 30 * minute)});
    }
    enc.procedures.push_back(
        {rng_.bernoulli(0.7) ? "99213" : "99214", enc.start + rng_.range(
            5 * minute, 35 * minute)});
    if (any_labs) {
      enc.procedures.push_back({"36415", enc.start + rng_.range(
          5 * minute, 35 * minute)});
    }
    if (chest_complaint && rng_.bernoulli(0.6)) {
      enc.procedures.push_back({"93000", enc.start + rng_.range(
          10 * minute, 40 * minute)});
    }
    record_.encounters.push_back(std::move(enc));
  }

  void add_telehealth(std::int64_t day) {
    Encounter enc;
    enc.type = "Telehealth";
    enc.dept = "FamilyMedicine";
    enc.start = day * duration::day + 9 * hour + rng_.range(0, 7 * hour);
    enc.end = enc.start + 10 * minute + rng_.range(0, 20 * minute);
    document_conditions(enc, day);
    order_indicated_meds(enc, day, enc.start + 2 * minute,
                         enc.start + 8 * minute);
    record_.encounters.push_back(std::move(enc));
  }

  void add_emergent(const AcuteOccurrence& occ) {
    const AcuteSpec& spec = cfg_.acutes[occ.acute_index];
    Encounter enc;
    enc.type = rng_.bernoulli(0.75) ? "Emergency" : "UrgentCare";
    enc.dept = "EmergencyMedicine";
    enc.start = occ.day * duration::day + rng_.range(0, 20 * hour);
    enc.end = enc.start + 2 * hour + rng_.range(0, 10 * hour);
    if (spec.code == "I21.9") {
      enc.complaints.push_back({"ChestPain", "Chest"});
      push_lab(enc, "10839-9", enc.start + 15 * minute + rng_.range(0, hour),
               occ.day);
      if (!enc.labs.empty()) {
        enc.labs.back().value += 2.0;  // elevated troponin at the event
      }
      enc.procedures.push_back({"93000", enc.start + rng_.range(
          10 * minute, 50 * minute)});
    } else {
      enc.complaints.push_back({"AbdominalPain", "Abdomen"});
    }
    enc.procedures.push_back({"99285", enc.start + rng_.range(
        5 * minute, 45 * minute)});
    enc.diagnoses.push_back({spec.code, occ.day});
    document_conditions(enc, occ.day);
    if (!spec.indicated_med.empty()) {
      enc.medications.push_back(
          {spec.indicated_med, enc.start + 30 * minute + rng_.range(0, hour)});
    }
    const std::int64_t er_end = enc.end;
    record_.encounters.push_back(std::move(enc));

    if (rng_.bernoulli(spec.inpatient_follow_prob)) {
      Encounter ip;
      ip.type = "Inpatient";
      ip.dept = "HospitalMedicine";
      ip.start = er_end + rng_.range(10 * minute, 2 * hour);
      ip.end = ip.start + duration::day + rng_.range(0, 6 * duration::day);
      ip.diagnoses.push_back({spec.code, occ.day});
      const std::int64_t ip_day = ip.start / duration::day;
      push_lab(ip, "718-7", ip.start + 6 * hour + rng_.range(0, 4 * hour),
               ip_day);
      if (spec.code == "I21.9" && rng_.bernoulli(0.5)) {
        ip.procedures.push_back({"93452", ip.start + rng_.range(
            4 * hour, 20 * hour)});
      }
      if (!spec.indicated_med.empty()) {
        ip.medications.push_back(
            {spec.indicated_med, ip.start + rng_.range(hour, 12 * hour)});
      }
      record_.encounters.push_back(std::move(ip));
    }
  }

  const GeneratorConfig& cfg_;
  Rng rng_;
  PatientRecord record_;
  int age_at_day0_ = 0;
  std::vector<std::int64_t> onset_day_;
  std::vector<AcuteOccurrence> acute_events_;
  std::vector<std::int64_t> visit_days_;
  std::vector<std::int64_t> telehealth_days_;
  std::set<std::size_t> documented_;
};

}  // namespace

void generate_population(const GeneratorConfig& config,
                         const std::function<void(PatientRecord&&)>& sink) {
  for (const auto& cond : config.conditions) {
    if (cond.annual_onset_prob < 0.0) {
      throw MedseqError("condition hazard must be nonnegative: " + cond.code);
    }
  }
  for (const auto& acute : config.acutes) {
    for (const auto& [code, mult] : acute.driver_multipliers) {
      if (mult < 1.0) {
        throw MedseqError("planted dependency multiplier must be >= 1: " +
                          code);
      }
    }
  }
  for (std::uint64_t i = 0; i < config.population; ++i) {
    PatientBuilder builder(config, i);
    sink(builder.build());
  }
}

std::vector<PatientRecord> generate_population(const GeneratorConfig& config) {
  std::vector<PatientRecord> out;
  out.reserve(config.population);
  generate_population(config,
                      [&](PatientRecord&& r) { out.push_back(std::move(r)); });
  return out;
}

bool passes_inclusion_filter(const PatientRecord& record, int min_age,
                             int max_age) {
  if (record.encounters.empty()) return false;
  const int age = year_of_instant(record.encounters.front().start,
                                  record.epoch_year) -
                  record.birth_year;
  if (age < min_age || age > max_age) return false;
  std::vector<std::int64_t> face_to_face;
  for (const auto& enc : record.encounters) {
    if (enc.type != "Telehealth") face_to_face.push_back(enc.start);
  }
  for (std::size_t i = 0; i + 1 < face_to_face.size(); ++i) {
    if (face_to_face[i + 1] - face_to_face[i] <= 2 * duration::year) {
      return true;
    }
  }
  return false;
}

std::vector<PatientRecord> apply_inclusion_filter(
    std::vector<PatientRecord> records, int min_age, int max_age) {
  std::vector<PatientRecord> kept;
  kept.reserve(records.size());
  for (auto& r : records) {
    if (passes_inclusion_filter(r, min_age, max_age)) {
      kept.push_back(std::move(r));
    }
  }
  return kept;
}

// ---------------------------------------------------------------------------
// JSONL serialization

std::string record_to_json_line(const PatientRecord& r) {
  json encs = json::array();
  for (const auto& e : r.encounters) {
    json cc = json::array();
    for (const auto& c : e.complaints) cc.push_back({c.name, c.location});
    json dx = json::array();
    for (const auto& d : e.diagnoses) dx.push_back({d.code, d.date_day});
    json labs = json::array();
    for (const auto& l : e.labs) {
      labs.push_back({l.component, l.unit, l.value, l.instant});
    }
    json meds = json::array();
    for (const auto& m : e.medications) meds.push_back({m.code, m.instant});
    json procs = json::array();
    for (const auto& p : e.procedures) procs.push_back({p.code, p.instant});
    encs.push_back({{"type", e.type},
                    {"dept", e.dept},
                    {"cc", cc},
                    {"start", e.start},
                    {"end", e.end},
                    {"dx", dx},
                    {"labs", labs},
                    {"meds", meds},
                    {"procs", procs}});
  }
  const json j = {{"id", r.id},
                  {"sex", r.sex},
                  {"race", r.race},
                  {"birth_year", r.birth_year},
                  {"epoch_year", r.epoch_year},
                  {"encounters", encs}};
  return j.dump();
}

PatientRecord record_from_json_line(const std::string& line) {
  const json j = json::parse(line);
  PatientRecord r;
  r.id = j.at("id").get<std::uint64_t>();
  r.sex = j.at("sex").get<std::string>();
  r.race = j.at("race").get<std::string>();
  r.birth_year = j.at("birth_year").get<int>();
  r.epoch_year = j.at("epoch_year").get<int>();
  for (const auto& je : j.at("encounters")) {
    Encounter e;
    e.type = je.at("type").get<std::string>();
    e.dept = je.at("dept").get<std::string>();
    e.start = je.at("start").get<std::int64_t>();
    e.end = je.at("end").get<std::int64_t>();
    for (const auto& c : je.at("cc")) {
      e.complaints.push_back({c.at(0).get<std::string>(),
                              c.at(1).get<std::string>()});
    }
    for (const auto& d : je.at("dx")) {
      e.diagnoses.push_back({d.at(0).get<std::string>(),
                             d.at(1).get<std::int64_t>()});
    }
    for (const auto& l : je.at("labs")) {
      e.labs.push_back({l.at(0).get<std::string>(), l.at(1).get<std::string>(),
                        l.at(2).get<double>(), l.at(3).get<std::int64_t>()});
    }
    for (const auto& m : je.at("meds")) {
      e.medications.push_back({m.at(0).get<std::string>(),
                               m.at(1).get<std::int64_t>()});
    }
    for (const auto& p : je.at("procs")) {
      e.procedures.push_back({p.at(0).get<std::string>(),
                              p.at(1).get<std::int64_t>()});
    }
    r.encounters.push_back(std::move(e));
  }
  return r;
}

void save_records(const std::vector<PatientRecord>& records,
                  const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write records file: " + path);
  for (const auto& r : records) out << record_to_json_line(r) << '\n';
  if (!out) throw MedseqError("error writing records file: " + path);
}

std::vector<PatientRecord> load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open records file: " + path);
  std::vector<PatientRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) records.push_back(record_from_json_line(line));
  }
  return records;
}

// Declared in vocab.hpp; lives here so the vocabulary module does not
// depend on record types.
void accumulate_stats(const PatientRecord& record, CorpusStats* stats) {
  for (const auto& enc : record.encounters) {
    stats->encounter_types.insert(enc.type);
    stats->dept_specialties[enc.dept] += 1;
    stats->total_events += 1;  // the encounter itself
    for (const auto& c : enc.complaints) {
      stats->cc_names[c.name] += 1;
      if (!c.location.empty()) stats->cc_locations[c.location] += 1;
    }
    for (const auto& d : enc.diagnoses) {
      stats->diagnosis_codes[d.code] += 1;
      stats->total_events += 1;
    }
    for (const auto& l : enc.labs) {
      stats->lab_pairs[{l.component, l.unit}] += 1;
      stats->total_events += 1;
    }
    for (const auto& m : enc.medications) {
      stats->medication_codes[m.code] += 1;
      stats->total_events += 1;
    }
    for (const auto& p : enc.procedures) {
      stats->procedure_codes[p.code] += 1;
      stats->total_events += 1;
    }
  }
}

}  // namespace medseq
