#include "medseq/vocab.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace medseq {

namespace {

struct KindNameEntry {
  TokenKind kind;
  const char* name;
};

constexpr std::array<KindNameEntry, 23> kKindNames{{
    {TokenKind::Padding, "pad"},
    {TokenKind::Unknown, "unk"},
    {TokenKind::Separator, "sep"},
    {TokenKind::BeginSequence, "bos"},
    {TokenKind::Sex, "sex"},
    {TokenKind::Race, "race"},
    {TokenKind::AgeBucket, "age"},
    {TokenKind::YearBucket, "year"},
    {TokenKind::EncounterStart, "enc_start"},
    {TokenKind::EncounterEnd, "enc_end"},
    {TokenKind::DeptSpecialty, "dept"},
    {TokenKind::ChiefComplaintName, "cc_name"},
    {TokenKind::ChiefComplaintLocation, "cc_loc"},
    {TokenKind::DiagnosisPart1, "dx1"},
    {TokenKind::DiagnosisPart2, "dx2"},
    {TokenKind::DiagnosisPart3, "dx3"},
    {TokenKind::LabComponent, "lab"},
    {TokenKind::LabQuantile, "lab_q"},
    {TokenKind::MedPart1, "med1"},
    {TokenKind::MedPart2, "med2"},
    {TokenKind::MedPart3, "med3"},
    {TokenKind::Procedure, "proc"},
    {TokenKind::TimeInterval, "time"},
}};

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

bool is_upper_alpha(char c) { return c >= 'A' && c <= 'Z'; }
bool is_alnum_upper(char c) {
  return (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
}

}  // namespace

const char* kind_name(TokenKind kind) {
  for (const auto& e : kKindNames) {
    if (e.kind == kind) return e.name;
  }
  return "?";
}

std::optional<TokenKind> kind_from_name(const std::string& name) {
  for (const auto& e : kKindNames) {
    if (name == e.name) return e.kind;
  }
  return std::nullopt;
}

std::string make_token_text(TokenKind kind, const std::string& payload) {
  switch (kind) {
    case TokenKind::Padding:
      return "PAD";
    case TokenKind::Unknown:
      return "UNK";
    case TokenKind::Separator:
      return "SEP";
    case TokenKind::BeginSequence:
      return "BOS";
    case TokenKind::Sex:
      return "Sex_" + payload;
    case TokenKind::Race:
      return "Race_" + payload;
    case TokenKind::AgeBucket:
      return "Age_" + payload;
    case TokenKind::YearBucket:
      return "Year_" + payload;
    case TokenKind::EncounterStart:
      return payload + "_Start";
    case TokenKind::EncounterEnd:
      return payload + "_End";
    case TokenKind::DeptSpecialty:
      return "Dept_" + payload;
    case TokenKind::ChiefComplaintName:
      return "CC_" + payload;
    case TokenKind::ChiefComplaintLocation:
      return "CCLoc_" + payload;
    case TokenKind::DiagnosisPart1:
      return "Dx1_" + payload;
    case TokenKind::DiagnosisPart2:
      return "Dx2_" + payload;
    case TokenKind::DiagnosisPart3:
      return "Dx3_" + payload;
    case TokenKind::LabComponent:
      return "Lab_" + payload;
    case TokenKind::LabQuantile:
      return "Q" + payload;
    case TokenKind::MedPart1:
      return "Med1_" + payload;
    case TokenKind::MedPart2:
      return "Med2_" + payload;
    case TokenKind::MedPart3:
      return "Med3_" + payload;
    case TokenKind::Procedure:
      return "Proc_" + payload;
    case TokenKind::TimeInterval:
      return "Time_" + payload;
  }
  return "?";
}

// ---------------------------------------------------------------------------
// TimeBucketTable

TimeBucketTable TimeBucketTable::default_table() {
  using namespace duration;
  TimeBucketTable t;
  const std::vector<std::pair<std::int64_t, std::string>> edges = {
      {minute, "1m"},        {5 * minute, "5m"},   {15 * minute, "15m"},
      {45 * minute, "45m"},  {2 * hour, "2h"},     {6 * hour, "6h"},
      {12 * hour, "12h"},    {day, "1d"},          {3 * day, "3d"},
      {7 * day, "7d"},       {14 * day, "14d"},    {month, "1mo"},
      {3 * month, "3mo"},    {6 * month, "6mo"},
  };
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    t.buckets_.push_back({edges[i].first, edges[i + 1].first,
                          edges[i].second + "-" + edges[i + 1].second});
  }
  t.validate();
  t.rebuild_index();
  return t;
}

TimeBucketTable TimeBucketTable::from_labels(
    const std::vector<std::string>& labels) {
  TimeBucketTable t;
  for (const auto& label : labels) {
    const auto dash = label.find('-');
    if (dash == std::string::npos) {
      throw MedseqError("bad time bucket label: " + label);
    }
    Bucket b;
    b.lo = parse_duration(label.substr(0, dash));
    b.hi = parse_duration(label.substr(dash + 1));
    b.label = label;
    t.buckets_.push_back(std::move(b));
  }
  t.validate();
  t.rebuild_index();
  return t;
}

void TimeBucketTable::validate() const {
  if (buckets_.empty()) throw MedseqError("empty time bucket table");
  if (buckets_.front().lo <= 0) {
    throw MedseqError("smallest time bucket lower bound must be positive");
  }
  for (std::size_t i = 0; i < buckets_.size(); ++i) {
    if (buckets_[i].lo >= buckets_[i].hi) {
      throw MedseqError("time bucket bounds not ascending: " +
                        buckets_[i].label);
    }
    if (i > 0 && buckets_[i].lo != buckets_[i - 1].hi) {
      throw MedseqError("time buckets not contiguous at " + buckets_[i].label);
    }
  }
}

void TimeBucketTable::rebuild_index() {
  by_label_.clear();
  for (std::size_t i = 0; i < buckets_.size(); ++i) {
    by_label_[buckets_[i].label] = i;
  }
}

std::vector<std::size_t> TimeBucketTable::encode_gap(
    std::int64_t gap_seconds) const {
  if (gap_seconds < 0) {
    throw MedseqError("non-chronological events: negative time gap");
  }
  if (gap_seconds < buckets_.front().lo) return {};
  const std::int64_t top_hi = buckets_.back().hi;
  if (gap_seconds >= top_hi) {
    const auto reps = static_cast<std::size_t>(std::max<std::int64_t>(
        1, std::llround(static_cast<double>(gap_seconds) /
                        static_cast<double>(top_hi))));
    return std::vector<std::size_t>(reps, top_index());
  }
  for (std::size_t k = 0; k < buckets_.size(); ++k) {
    if (gap_seconds >= buckets_[k].lo && gap_seconds < buckets_[k].hi) {
      return {k};
    }
  }
  throw MedseqError("unreachable: gap not covered by contiguous buckets");
}

std::int64_t TimeBucketTable::decode_bucket(std::size_t k) const {
  const Bucket& b = buckets_.at(k);
  if (k == top_index()) return b.hi;  // repeatable token counts whole units
  return std::llround(std::sqrt(static_cast<double>(b.lo) *
                                static_cast<double>(b.hi)));
}

std::optional<std::size_t> TimeBucketTable::index_of_label(
    const std::string& label) const {
  const auto it = by_label_.find(label);
  if (it == by_label_.end()) return std::nullopt;
  return it->second;
}

// ---------------------------------------------------------------------------
// QuantileBinning

QuantileBinning QuantileBinning::fit(const std::vector<Sample>& values,
                                     std::size_t min_count,
                                     std::vector<std::string>* warnings) {
  std::map<std::pair<std::string, std::string>, std::vector<double>> grouped;
  for (const auto& s : values) {
    grouped[{s.component, s.unit}].push_back(s.value);
  }
  QuantileBinning bins;
  for (auto& [key, vals] : grouped) {
    if (vals.size() < min_count) {
      if (warnings) {
        warnings->push_back("skipping under-sampled lab pair " + key.first +
                            "/" + key.second + " (" +
                            std::to_string(vals.size()) + " values)");
      }
      continue;
    }
    std::sort(vals.begin(), vals.end());
    const std::size_t n = vals.size();
    std::vector<double> cuts(9);
    for (int k = 1; k <= 9; ++k) {
      // Linear-interpolated empirical decile: h = (n-1)*k/10, 0-indexed.
      const double h = static_cast<double>(n - 1) * k / 10.0;
      const auto idx = static_cast<std::size_t>(std::floor(h));
      const double frac = h - static_cast<double>(idx);
      double cut = vals[idx];
      if (frac > 0.0 && idx + 1 < n) {
        cut += frac * (vals[idx + 1] - vals[idx]);
      }
      cuts[static_cast<std::size_t>(k - 1)] = cut;
    }
    bins.cuts_[key] = std::move(cuts);
  }
  return bins;
}

std::optional<int> QuantileBinning::assign(const std::string& component,
                                           const std::string& unit,
                                           double value) const {
  const auto it = cuts_.find({component, unit});
  if (it == cuts_.end()) return std::nullopt;
  const auto& cuts = it->second;
  // Bin index is 1 + number of cut points strictly below the value, which
  // clamps out-of-range values to the end bins and sends a value tied with
  // every cut point (degenerate distribution) to bin 1.
  const auto below =
      std::lower_bound(cuts.begin(), cuts.end(), value) - cuts.begin();
  return static_cast<int>(below) + 1;
}

bool QuantileBinning::has(const std::string& component,
                          const std::string& unit) const {
  return cuts_.count({component, unit}) > 0;
}

const std::vector<double>* QuantileBinning::cuts(
    const std::string& component, const std::string& unit) const {
  const auto it = cuts_.find({component, unit});
  return it == cuts_.end() ? nullptr : &it->second;
}

std::string QuantileBinning::serialize() const {
  std::ostringstream out;
  for (const auto& [key, cuts] : cuts_) {
    out << key.first << '\t' << key.second;
    for (double c : cuts) out << '\t' << format_double(c);
    out << '\n';
  }
  return out.str();
}

QuantileBinning QuantileBinning::deserialize(const std::string& text) {
  QuantileBinning bins;
  for (const auto& line : split(text, '\n')) {
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 11) {
      throw MedseqError("bad quantile binning line: " + line);
    }
    std::vector<double> cuts(9);
    for (int k = 0; k < 9; ++k) {
      cuts[static_cast<std::size_t>(k)] =
          std::stod(fields[static_cast<std::size_t>(k + 2)]);
    }
    bins.cuts_[{fields[0], fields[1]}] = std::move(cuts);
  }
  return bins;
}

void QuantileBinning::save(const std::string& path) const {
  write_file(path, serialize());
}

QuantileBinning QuantileBinning::load(const std::string& path) {
  return deserialize(read_file(path));
}

// ---------------------------------------------------------------------------
// Code splitting

CodeSplit encode_diagnosis(const std::string& icd_code) {
  CodeSplit out;
  std::string compact;
  compact.reserve(icd_code.size());
  int dots = 0;
  for (std::size_t i = 0; i < icd_code.size(); ++i) {
    if (icd_code[i] == '.') {
      ++dots;
      if (i != 3) dots = 99;  // dot only legal after the category
      continue;
    }
    compact.push_back(icd_code[i]);
  }
  const bool shape_ok =
      dots <= 1 && compact.size() >= 3 && compact.size() <= 7 &&
      is_upper_alpha(compact[0]) && is_alnum_upper(compact[1]) &&
      is_alnum_upper(compact[2]) &&
      std::all_of(compact.begin() + 3, compact.end(), is_alnum_upper);
  if (!shape_ok) {
    out.valid = false;
    out.diagnostic = "malformed ICD-10-CM code: " + icd_code;
    out.token_texts = {make_token_text(TokenKind::Unknown, "")};
    return out;
  }
  out.payloads.push_back(compact.substr(0, 3));
  out.token_texts.push_back(
      make_token_text(TokenKind::DiagnosisPart1, out.payloads[0]));
  if (compact.size() > 3) {
    out.payloads.push_back(compact.substr(3, 2));
    out.token_texts.push_back(
        make_token_text(TokenKind::DiagnosisPart2, out.payloads[1]));
  }
  if (compact.size() > 5) {
    out.payloads.push_back(compact.substr(5, 2));
    out.token_texts.push_back(
        make_token_text(TokenKind::DiagnosisPart3, out.payloads[2]));
  }
  return out;
}

CodeSplit encode_medication(const std::string& atc_code) {
  CodeSplit out;
  const bool shape_ok =
      atc_code.size() == 7 && is_upper_alpha(atc_code[0]) &&
      std::all_of(atc_code.begin(), atc_code.end(), is_alnum_upper);
  if (!shape_ok) {
    out.valid = false;
    out.diagnostic = "malformed ATC code (want 7 characters): " + atc_code;
    out.token_texts = {make_token_text(TokenKind::Unknown, "")};
    return out;
  }
  out.payloads = {atc_code.substr(0, 3), atc_code.substr(3, 2),
                  atc_code.substr(5, 2)};
  out.token_texts = {make_token_text(TokenKind::MedPart1, out.payloads[0]),
                     make_token_text(TokenKind::MedPart2, out.payloads[1]),
                     make_token_text(TokenKind::MedPart3, out.payloads[2])};
  return out;
}

std::string decode_diagnosis(const std::vector<std::string>& payloads) {
  if (payloads.empty()) return "";
  std::string code = payloads[0];
  if (payloads.size() > 1) {
    code += ".";
    for (std::size_t i = 1; i < payloads.size(); ++i) code += payloads[i];
  }
  return code;
}

std::string decode_medication(const std::vector<std::string>& payloads) {
  std::string code;
  for (const auto& p : payloads) code += p;
  return code;
}

std::string age_bucket_payload(int age) {
  const int lo = (age / 5) * 5;
  return std::to_string(lo) + "-" + std::to_string(lo + 4);
}

std::string year_bucket_payload(int year) {
  const int lo = 1970 + ((year - 1970) / 5) * 5;  // aligned to 1970 epoch
  return std::to_string(lo) + "-" + std::to_string(lo + 4);
}

// ---------------------------------------------------------------------------
// Vocabulary

TokenId Vocabulary::add(TokenKind kind, const std::string& payload) {
  TokenInfo info{kind, payload, make_token_text(kind, payload)};
  const auto it = by_text_.find(info.text);
  if (it != by_text_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  by_text_[info.text] = id;
  tokens_.push_back(std::move(info));
  return id;
}

namespace {

template <typename Map>
std::vector<typename Map::key_type> top_k_keys(const Map& counts,
                                               std::size_t k) {
  using Key = typename Map::key_type;
  std::vector<std::pair<Key, std::int64_t>> items(counts.begin(),
                                                  counts.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;  // lexicographic tie-break
  });
  if (items.size() > k) items.resize(k);
  std::vector<Key> keys;
  keys.reserve(items.size());
  for (auto& [key, count] : items) keys.push_back(key);
  std::sort(keys.begin(), keys.end());
  return keys;
}

}  // namespace

Vocabulary Vocabulary::build(const CorpusStats& stats,
                             const VocabConfig& config) {
  if (stats.total_events == 0) {
    throw MedseqError("no events observed: cannot build vocabulary");
  }
  Vocabulary v;
  v.time_table_ = TimeBucketTable::default_table();
  v.pad_ = v.add(TokenKind::Padding, "");
  v.unk_ = v.add(TokenKind::Unknown, "");
  v.sep_ = v.add(TokenKind::Separator, "");
  v.bos_ = v.add(TokenKind::BeginSequence, "");

  auto sorted_copy = [](std::vector<std::string> items) {
    std::sort(items.begin(), items.end());
    return items;
  };
  for (const auto& s : sorted_copy(config.sex_categories)) {
    v.add(TokenKind::Sex, s);
  }
  for (const auto& r : sorted_copy(config.race_categories)) {
    v.add(TokenKind::Race, r);
  }
  for (int lo = (config.age_min / 5) * 5; lo <= config.age_max; lo += 5) {
    v.add(TokenKind::AgeBucket, age_bucket_payload(lo));
  }
  for (int y = 1970 + ((config.year_min - 1970) / 5) * 5; y <= config.year_max;
       y += 5) {
    v.add(TokenKind::YearBucket, year_bucket_payload(y));
  }

  std::set<std::string> enc_types(config.encounter_types.begin(),
                                  config.encounter_types.end());
  enc_types.insert(stats.encounter_types.begin(), stats.encounter_types.end());
  for (const auto& type : enc_types) {
    v.add(TokenKind::EncounterStart, type);
    v.add(TokenKind::EncounterEnd, type);
  }

  std::set<std::string> depts{"Unspecified"};
  for (const auto& [name, count] : stats.dept_specialties) depts.insert(name);
  for (const auto& name : depts) v.add(TokenKind::DeptSpecialty, name);
  for (const auto& [name, count] : stats.cc_names) {
    v.add(TokenKind::ChiefComplaintName, name);
  }
  for (const auto& [name, count] : stats.cc_locations) {
    v.add(TokenKind::ChiefComplaintLocation, name);
  }

  for (const auto& code :
       top_k_keys(stats.diagnosis_codes, config.top_k_diagnoses)) {
    const CodeSplit parts = encode_diagnosis(code);
    if (!parts.valid) continue;
    v.known_diagnoses_.insert(code);
    static constexpr TokenKind kDxKinds[] = {TokenKind::DiagnosisPart1,
                                             TokenKind::DiagnosisPart2,
                                             TokenKind::DiagnosisPart3};
    for (std::size_t i = 0; i < parts.payloads.size(); ++i) {
      v.add(kDxKinds[i], parts.payloads[i]);
    }
  }
  for (const auto& [component, unit] :
       top_k_keys(stats.lab_pairs, config.top_k_labs)) {
    v.add(TokenKind::LabComponent, component);
  }
  for (int q = 1; q <= 10; ++q) {
    v.add(TokenKind::LabQuantile, std::to_string(q));
  }
  for (const auto& code :
       top_k_keys(stats.medication_codes, config.top_k_medications)) {
    const CodeSplit parts = encode_medication(code);
    if (!parts.valid) continue;
    v.known_medications_.insert(code);
    v.add(TokenKind::MedPart1, parts.payloads[0]);
    v.add(TokenKind::MedPart2, parts.payloads[1]);
    v.add(TokenKind::MedPart3, parts.payloads[2]);
  }
  for (const auto& code :
       top_k_keys(stats.procedure_codes, config.top_k_procedures)) {
    v.add(TokenKind::Procedure, code);
  }
  for (std::size_t k = 0; k < v.time_table_.size(); ++k) {
    v.add(TokenKind::TimeInterval, v.time_table_.bucket(k).label);
  }
  v.finalize();
  return v;
}

void Vocabulary::finalize() {
  time_token_ids_.clear();
  for (TokenId id = 0; id < tokens_.size(); ++id) {
    if (tokens_[id].kind == TokenKind::TimeInterval) {
      time_token_ids_.push_back(id);
    }
  }
}

const TokenInfo& Vocabulary::info(TokenId id) const {
  if (id >= tokens_.size()) throw MedseqError("token id out of range");
  return tokens_[id];
}

std::optional<TokenId> Vocabulary::find_text(const std::string& text) const {
  const auto it = by_text_.find(text);
  if (it == by_text_.end()) return std::nullopt;
  return it->second;
}

std::optional<TokenId> Vocabulary::find(TokenKind kind,
                                        const std::string& payload) const {
  return find_text(make_token_text(kind, payload));
}

TokenId Vocabulary::token_or_unknown(TokenKind kind,
                                     const std::string& payload) const {
  const auto id = find(kind, payload);
  return id ? *id : unk_;
}

std::int64_t Vocabulary::decode_time_token(TokenId id) const {
  const TokenInfo& t = info(id);
  if (t.kind != TokenKind::TimeInterval) return 0;
  const auto k = time_table_.index_of_label(t.payload);
  if (!k) throw MedseqError("time token with unknown bucket: " + t.payload);
  return time_table_.decode_bucket(*k);
}

std::vector<TokenId> Vocabulary::encode_gap_tokens(
    std::int64_t gap_seconds) const {
  std::vector<TokenId> out;
  for (std::size_t k : time_table_.encode_gap(gap_seconds)) {
    out.push_back(time_token_ids_.at(k));
  }
  return out;
}

std::string Vocabulary::serialize() const {
  std::ostringstream out;
  for (TokenId id = 0; id < tokens_.size(); ++id) {
    out << id << '\t' << kind_name(tokens_[id].kind) << '\t'
        << tokens_[id].text << '\n';
  }
  return out.str();
}

std::uint64_t Vocabulary::fingerprint() const {
  const std::string text = serialize();
  return fnv1a(text.data(), text.size());
}

void Vocabulary::save(const std::string& path) const {
  write_file(path, serialize());
  std::ostringstream codes;
  for (const auto& code : known_diagnoses_) codes << "dx\t" << code << '\n';
  for (const auto& code : known_medications_) codes << "med\t" << code << '\n';
  write_file(path + ".codes", codes.str());
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::string codes_text;
  try {
    codes_text = read_file(path + ".codes");
  } catch (const MedseqError&) {
    codes_text.clear();  // companion is optional on load
  }
  return deserialize(read_file(path), codes_text);
}

Vocabulary Vocabulary::deserialize(const std::string& text,
                                   const std::string& codes_text) {
  Vocabulary v;
  std::vector<std::string> time_labels;
  for (const auto& line : split(text, '\n')) {
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 3) throw MedseqError("bad vocabulary line: " + line);
    const auto id = static_cast<TokenId>(std::stoul(fields[0]));
    if (id != v.tokens_.size()) {
      throw MedseqError("vocabulary ids must be dense from 0");
    }
    const auto kind = kind_from_name(fields[1]);
    if (!kind) throw MedseqError("unknown token kind: " + fields[1]);
    TokenInfo info;
    info.kind = *kind;
    info.text = fields[2];
    // Payload is the text minus the kind tag; rebuild and cross-check.
    switch (*kind) {
      case TokenKind::Padding:
      case TokenKind::Unknown:
      case TokenKind::Separator:
      case TokenKind::BeginSequence:
        info.payload = "";
        break;
      case TokenKind::EncounterStart:
        info.payload = info.text.substr(0, info.text.size() - 6);
        break;
      case TokenKind::EncounterEnd:
        info.payload = info.text.substr(0, info.text.size() - 4);
        break;
      case TokenKind::LabQuantile:
        info.payload = info.text.substr(1);
        break;
      default: {
        const auto us = info.text.find('_');
        info.payload = us == std::string::npos ? info.text
                                               : info.text.substr(us + 1);
        break;
      }
    }
    if (make_token_text(info.kind, info.payload) != info.text) {
      throw MedseqError("token text does not match kind: " + line);
    }
    if (*kind == TokenKind::TimeInterval) time_labels.push_back(info.payload);
    if (v.by_text_.count(info.text)) {
      throw MedseqError("duplicate token text: " + info.text);
    }
    switch (*kind) {
      case TokenKind::Padding:
        v.pad_ = id;
        break;
      case TokenKind::Unknown:
        v.unk_ = id;
        break;
      case TokenKind::Separator:
        v.sep_ = id;
        break;
      case TokenKind::BeginSequence:
        v.bos_ = id;
        break;
      default:
        break;
    }
    v.by_text_[info.text] = id;
    v.tokens_.push_back(std::move(info));
  }
  if (v.tokens_.empty()) throw MedseqError("empty vocabulary file");
  if (!time_labels.empty()) {
    v.time_table_ = TimeBucketTable::from_labels(time_labels);
  }
  for (const auto& line : split(codes_text, '\n')) {
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 2) throw MedseqError("bad codes line: " + line);
    if (fields[0] == "dx") {
      v.known_diagnoses_.insert(fields[1]);
    } else if (fields[0] == "med") {
      v.known_medications_.insert(fields[1]);
    } else {
      throw MedseqError("bad codes family: " + fields[0]);
    }
  }
  v.finalize();
  return v;
}

}  // namespace medseq
