#include "medseq/sequencer.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>

namespace medseq {

namespace {

// Ordering of same-instant event groups within an encounter.
enum ClassRank : int {
  kHeader = 0,
  kDiagnosis = 1,
  kLab = 2,
  kMedication = 3,
  kProcedure = 4,
  kEnd = 5,
};

struct EventGroup {
  std::int64_t instant;
  std::size_t enc_idx;
  int class_rank;
  std::uint64_t order_key;  // permutation key for same-date diagnoses
  std::vector<TokenId> tokens;
};

}  // namespace

TokenSequence tokenize_record(const PatientRecord& record,
                              const Vocabulary& vocab,
                              const QuantileBinning& bins, Rng& rng) {
  if (record.encounters.empty()) {
    throw MedseqError("record has no encounters: " +
                      std::to_string(record.id));
  }
  for (std::size_t i = 0; i < record.encounters.size(); ++i) {
    const Encounter& e = record.encounters[i];
    if (e.start > e.end) {
      throw MedseqError("non-chronological record: encounter ends before "
                        "it starts");
    }
    if (i > 0 && e.start < record.encounters[i - 1].start) {
      throw MedseqError("non-chronological record: encounters out of order");
    }
  }

  std::vector<EventGroup> groups;
  for (std::size_t ei = 0; ei < record.encounters.size(); ++ei) {
    const Encounter& enc = record.encounters[ei];

    EventGroup header{enc.start, ei, kHeader, 0, {}};
    header.tokens.push_back(
        vocab.token_or_unknown(TokenKind::EncounterStart, enc.type));
    header.tokens.push_back(vocab.token_or_unknown(
        TokenKind::DeptSpecialty, enc.dept.empty() ? "Unspecified" : enc.dept));
    for (const auto& cc : enc.complaints) {
      header.tokens.push_back(
          vocab.token_or_unknown(TokenKind::ChiefComplaintName, cc.name));
      if (!cc.location.empty()) {
        header.tokens.push_back(vocab.token_or_unknown(
            TokenKind::ChiefComplaintLocation, cc.location));
      }
    }
    groups.push_back(std::move(header));

    // Diagnoses placed at max(header instant, midnight of documented date);
    // ties on (instant, date) get a random relative order.
    std::map<std::pair<std::int64_t, std::int64_t>, std::vector<EventGroup>>
        dx_ties;
    for (const auto& dx : enc.diagnoses) {
      const std::int64_t midnight = dx.date_day * duration::day;
      const std::int64_t instant = std::max(enc.start, midnight);
      EventGroup g{instant, ei, kDiagnosis, 0, {}};
      const CodeSplit parts = encode_diagnosis(dx.code);
      if (!parts.valid) {
        g.tokens.push_back(vocab.unknown());
      } else {
        static constexpr TokenKind kDxKinds[] = {TokenKind::DiagnosisPart1,
                                                 TokenKind::DiagnosisPart2,
                                                 TokenKind::DiagnosisPart3};
        for (std::size_t p = 0; p < parts.payloads.size(); ++p) {
          g.tokens.push_back(
              vocab.token_or_unknown(kDxKinds[p], parts.payloads[p]));
        }
      }
      dx_ties[{instant, dx.date_day}].push_back(std::move(g));
    }
    for (auto& [key, tied] : dx_ties) {
      std::vector<std::size_t> perm(tied.size());
      for (std::size_t k = 0; k < perm.size(); ++k) perm[k] = k;
      rng.shuffle(perm);
      for (std::size_t k = 0; k < tied.size(); ++k) {
        tied[k].order_key = perm[k];
        groups.push_back(std::move(tied[k]));
      }
    }

    for (const auto& lab : enc.labs) {
      EventGroup g{lab.instant, ei, kLab, 0, {}};
      g.tokens.push_back(
          vocab.token_or_unknown(TokenKind::LabComponent, lab.component));
      const auto bin = bins.assign(lab.component, lab.unit, lab.value);
      if (bin) {
        g.tokens.push_back(vocab.token_or_unknown(TokenKind::LabQuantile,
                                                  std::to_string(*bin)));
      } else {
        g.tokens.push_back(vocab.unknown());  // under-sampled pair
      }
      groups.push_back(std::move(g));
    }
    for (const auto& med : enc.medications) {
      EventGroup g{med.instant, ei, kMedication, 0, {}};
      const CodeSplit parts = encode_medication(med.code);
      if (!parts.valid) {
        g.tokens.push_back(vocab.unknown());
      } else {
        g.tokens.push_back(
            vocab.token_or_unknown(TokenKind::MedPart1, parts.payloads[0]));
        g.tokens.push_back(
            vocab.token_or_unknown(TokenKind::MedPart2, parts.payloads[1]));
        g.tokens.push_back(
            vocab.token_or_unknown(TokenKind::MedPart3, parts.payloads[2]));
      }
      groups.push_back(std::move(g));
    }
    for (const auto& proc : enc.procedures) {
      EventGroup g{proc.instant, ei, kProcedure, 0, {}};
      g.tokens.push_back(
          vocab.token_or_unknown(TokenKind::Procedure, proc.code));
      groups.push_back(std::move(g));
    }
    groups.push_back({enc.end, ei, kEnd, 0,
                      {vocab.token_or_unknown(TokenKind::EncounterEnd,
                                              enc.type)}});
  }

  std::stable_sort(groups.begin(), groups.end(),
                   [](const EventGroup& a, const EventGroup& b) {
                     return std::tie(a.instant, a.enc_idx, a.class_rank,
                                     a.order_key) <
                            std::tie(b.instant, b.enc_idx, b.class_rank,
                                     b.order_key);
                   });

  TokenSequence seq;
  seq.patient_id = record.id;
  const std::int64_t first_start = record.encounters.front().start;
  const int year = year_of_instant(first_start, record.epoch_year);
  const int age = year - record.birth_year;
  auto push = [&seq](TokenId id, std::int64_t t) {
    seq.tokens.push_back(id);
    seq.token_times.push_back(t);
  };
  push(vocab.token_or_unknown(TokenKind::Sex, record.sex), first_start);
  push(vocab.token_or_unknown(TokenKind::Race, record.race), first_start);
  push(vocab.token_or_unknown(TokenKind::AgeBucket, age_bucket_payload(age)),
       first_start);
  push(vocab.token_or_unknown(TokenKind::YearBucket,
                              year_bucket_payload(year)),
       first_start);
  push(vocab.begin_sequence(), first_start);

  std::int64_t prev_instant = first_start;
  for (const auto& g : groups) {
    const std::int64_t gap = g.instant - prev_instant;
    if (gap < 0) {
      throw MedseqError("non-chronological record: event predates "
                        "previous event");
    }
    for (TokenId t : vocab.encode_gap_tokens(gap)) push(t, g.instant);
    for (TokenId t : g.tokens) push(t, g.instant);
    prev_instant = g.instant;
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Parsing

std::vector<ParsedEvent> parse_tokens(std::span<const TokenId> tokens,
                                      const Vocabulary& vocab) {
  std::vector<ParsedEvent> events;
  std::size_t i = 0;
  const std::size_t n = tokens.size();
  auto kind_at = [&](std::size_t j) { return vocab.info(tokens[j]).kind; };
  auto payload_at = [&](std::size_t j) -> const std::string& {
    return vocab.info(tokens[j]).payload;
  };

  while (i < n) {
    ParsedEvent ev;
    ev.token_begin = i;
    const TokenKind kind = kind_at(i);
    switch (kind) {
      case TokenKind::Padding:
      case TokenKind::Separator: {
        ev.kind = EventKind::Control;
        ev.code = vocab.info(tokens[i]).text;
        ++i;
        break;
      }
      case TokenKind::BeginSequence: {
        ev.kind = EventKind::BeginSequence;
        ++i;
        break;
      }
      case TokenKind::Sex:
      case TokenKind::Race:
      case TokenKind::AgeBucket:
      case TokenKind::YearBucket: {
        ev.kind = EventKind::Demographic;
        ev.code = vocab.info(tokens[i]).text;
        ++i;
        break;
      }
      case TokenKind::TimeInterval: {
        ev.kind = EventKind::Time;
        ev.code = payload_at(i);
        ++i;
        break;
      }
      case TokenKind::EncounterStart: {
        ev.kind = EventKind::EncounterStart;
        ev.code = payload_at(i);
        ++i;
        if (i < n && kind_at(i) == TokenKind::DeptSpecialty) {
          ev.detail = payload_at(i);
          ++i;
        } else {
          ev.valid = false;  // header must carry a department specialty
        }
        while (i < n && kind_at(i) == TokenKind::ChiefComplaintName) {
          std::string name = payload_at(i);
          std::string loc;
          ++i;
          if (i < n && kind_at(i) == TokenKind::ChiefComplaintLocation) {
            loc = payload_at(i);
            ++i;
          }
          ev.complaints.emplace_back(std::move(name), std::move(loc));
        }
        break;
      }
      case TokenKind::EncounterEnd: {
        ev.kind = EventKind::EncounterEnd;
        ev.code = payload_at(i);
        ++i;
        break;
      }
      case TokenKind::DiagnosisPart1: {
        ev.kind = EventKind::Diagnosis;
        std::vector<std::string> parts{payload_at(i)};
        ++i;
        if (i < n && kind_at(i) == TokenKind::DiagnosisPart2) {
          parts.push_back(payload_at(i));
          ++i;
          if (i < n && kind_at(i) == TokenKind::DiagnosisPart3) {
            parts.push_back(payload_at(i));
            ++i;
          }
        }
        ev.code = decode_diagnosis(parts);
        ev.valid = vocab.is_known_diagnosis(ev.code);
        break;
      }
      case TokenKind::MedPart1: {
        ev.kind = EventKind::Medication;
        std::vector<std::string> parts{payload_at(i)};
        ++i;
        if (i < n && kind_at(i) == TokenKind::MedPart2) {
          parts.push_back(payload_at(i));
          ++i;
          if (i < n && kind_at(i) == TokenKind::MedPart3) {
            parts.push_back(payload_at(i));
            ++i;
          }
        }
        ev.code = decode_medication(parts);
        // A medication is exactly three parts forming a known ATC code.
        ev.valid = parts.size() == 3 && vocab.is_known_medication(ev.code);
        break;
      }
      case TokenKind::LabComponent: {
        ev.kind = EventKind::Lab;
        ev.code = payload_at(i);
        ++i;
        if (i < n && kind_at(i) == TokenKind::LabQuantile) {
          ev.lab_quantile = std::stoi(payload_at(i));
          ++i;
        } else if (i < n && kind_at(i) == TokenKind::Unknown) {
          ev.lab_quantile = 0;  // under-sampled pair emission
          ++i;
        } else {
          ev.valid = false;  // lab token without a result quantile
        }
        break;
      }
      case TokenKind::Procedure: {
        ev.kind = EventKind::Procedure;
        ev.code = payload_at(i);
        ++i;
        break;
      }
      case TokenKind::Unknown:
      case TokenKind::DeptSpecialty:
      case TokenKind::ChiefComplaintName:
      case TokenKind::ChiefComplaintLocation:
      case TokenKind::DiagnosisPart2:
      case TokenKind::DiagnosisPart3:
      case TokenKind::LabQuantile:
      case TokenKind::MedPart2:
      case TokenKind::MedPart3: {
        // Continuation token with no initiator: consumed as a fragment.
        ev.kind = EventKind::Fragment;
        ev.valid = false;
        ev.code = vocab.info(tokens[i]).text;
        ++i;
        break;
      }
    }
    ev.token_count = i - ev.token_begin;
    events.push_back(std::move(ev));
  }
  return events;
}

// ---------------------------------------------------------------------------
// Packing and splits

PackedBatch pack_sequences(const std::vector<TokenSequence>& sequences,
                           std::size_t context_len, const Vocabulary& vocab) {
  if (context_len < 2) throw MedseqError("context length must be >= 2");
  PackedBatch batch;
  batch.cols = context_len;
  if (sequences.empty()) return batch;

  std::size_t total = sequences.size() - 1;  // separators
  for (const auto& s : sequences) total += s.tokens.size();
  const std::size_t rows = (total + context_len - 1) / context_len;
  batch.rows = rows;
  batch.tokens.assign(rows * context_len, vocab.pad());
  batch.provenance.assign(rows * context_len,
                          std::numeric_limits<std::uint64_t>::max());
  batch.supervised.assign(rows * context_len, 0);

  std::size_t pos = 0;
  auto emit = [&](TokenId t, std::uint64_t pid) {
    batch.tokens[pos] = t;
    batch.provenance[pos] = pid;
    batch.supervised[pos] = 1;
    ++pos;
  };
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    if (s > 0) emit(vocab.separator(), sequences[s - 1].patient_id);
    for (TokenId t : sequences[s].tokens) emit(t, sequences[s].patient_id);
  }
  return batch;
}

std::pair<std::vector<std::uint64_t>, std::vector<std::uint64_t>>
split_patients(const std::vector<std::uint64_t>& patient_ids, double fraction,
               std::uint64_t seed) {
  if (fraction <= 0.0 || fraction >= 1.0) {
    throw MedseqError("split fraction must be in (0, 1)");
  }
  std::vector<std::uint64_t> shuffled = patient_ids;
  Rng rng(derive_seed(seed, 0x5717));
  rng.shuffle(shuffled);
  const auto n_train = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(shuffled.size())));
  std::vector<std::uint64_t> train(shuffled.begin(),
                                   shuffled.begin() + n_train);
  std::vector<std::uint64_t> test(shuffled.begin() + n_train, shuffled.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

std::vector<TokenId> left_truncate(const std::vector<TokenId>& tokens,
                                   std::size_t budget) {
  if (budget < 1) throw MedseqError("truncation budget must be >= 1");
  if (tokens.size() <= budget) return tokens;
  return {tokens.end() - static_cast<std::ptrdiff_t>(budget), tokens.end()};
}

// ---------------------------------------------------------------------------
// Binary token streams

namespace {

constexpr char kTokenMagic[8] = {'M', 'S', 'Q', 'T', 'O', 'K', '0', '1'};
constexpr char kIndexMagic[8] = {'M', 'S', 'Q', 'I', 'D', 'X', '0', '1'};
constexpr char kTimesMagic[8] = {'M', 'S', 'Q', 'T', 'I', 'M', '0', '1'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw SchemaError("truncated binary file: " + path);
  return v;
}

}  // namespace

void write_token_file(const std::string& path,
                      const std::vector<TokenSequence>& sequences,
                      std::uint64_t vocab_fingerprint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write token file: " + path);
  out.write(kTokenMagic, sizeof(kTokenMagic));
  write_pod(out, kFormatVersion);
  write_pod(out, vocab_fingerprint);
  write_pod(out, std::uint32_t{0});  // context length: unpacked stream
  std::uint64_t total = 0;
  for (const auto& s : sequences) total += s.tokens.size();
  write_pod(out, total);
  for (const auto& s : sequences) {
    out.write(reinterpret_cast<const char*>(s.tokens.data()),
              static_cast<std::streamsize>(s.tokens.size() * sizeof(TokenId)));
  }
  if (!out) throw FileError("error writing token file: " + path);

  std::ofstream idx(path + ".idx", std::ios::binary);
  if (!idx) throw FileError("cannot write index file: " + path + ".idx");
  idx.write(kIndexMagic, sizeof(kIndexMagic));
  write_pod(idx, kFormatVersion);
  write_pod(idx, static_cast<std::uint64_t>(sequences.size()));
  std::uint64_t offset = 0;
  for (const auto& s : sequences) {
    write_pod(idx, s.patient_id);
    write_pod(idx, offset);
    write_pod(idx, static_cast<std::uint64_t>(s.tokens.size()));
    offset += s.tokens.size();
  }
  if (!idx) throw FileError("error writing index file: " + path + ".idx");
}

void write_times_sidecar(const std::string& token_path,
                         const std::vector<TokenSequence>& sequences) {
  const std::string path = token_path + ".times";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write times file: " + path);
  out.write(kTimesMagic, sizeof(kTimesMagic));
  write_pod(out, kFormatVersion);
  std::uint64_t total = 0;
  for (const auto& s : sequences) total += s.token_times.size();
  write_pod(out, total);
  for (const auto& s : sequences) {
    out.write(
        reinterpret_cast<const char*>(s.token_times.data()),
        static_cast<std::streamsize>(s.token_times.size() * sizeof(std::int64_t)));
  }
  if (!out) throw FileError("error writing times file: " + path);
}

TokenFile read_token_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open token file: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kTokenMagic, sizeof(magic)) != 0) {
    throw SchemaError("not a token file: " + path);
  }
  TokenFile file;
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kFormatVersion) {
    throw SchemaError("unsupported token file version " +
                      std::to_string(version) + ": " + path);
  }
  file.vocab_fingerprint = read_pod<std::uint64_t>(in, path);
  file.context_len = read_pod<std::uint32_t>(in, path);
  const auto count = read_pod<std::uint64_t>(in, path);
  file.tokens.resize(count);
  in.read(reinterpret_cast<char*>(file.tokens.data()),
          static_cast<std::streamsize>(count * sizeof(TokenId)));
  if (!in) throw SchemaError("truncated token file: " + path);

  std::ifstream idx(path + ".idx", std::ios::binary);
  if (idx) {
    char imagic[8];
    idx.read(imagic, sizeof(imagic));
    if (!idx || std::memcmp(imagic, kIndexMagic, sizeof(imagic)) != 0) {
      throw SchemaError("not an index file: " + path + ".idx");
    }
    const auto iversion = read_pod<std::uint32_t>(idx, path);
    if (iversion != kFormatVersion) {
      throw SchemaError("unsupported index file version: " + path + ".idx");
    }
    const auto entries = read_pod<std::uint64_t>(idx, path);
    for (std::uint64_t i = 0; i < entries; ++i) {
      TokenFile::Entry e;
      e.patient_id = read_pod<std::uint64_t>(idx, path);
      e.offset = read_pod<std::uint64_t>(idx, path);
      e.length = read_pod<std::uint64_t>(idx, path);
      file.index.push_back(e);
    }
  }

  std::ifstream times(path + ".times", std::ios::binary);
  if (times) {
    char tmagic[8];
    times.read(tmagic, sizeof(tmagic));
    if (!times || std::memcmp(tmagic, kTimesMagic, sizeof(tmagic)) != 0) {
      throw SchemaError("not a times file: " + path + ".times");
    }
    const auto tversion = read_pod<std::uint32_t>(times, path);
    if (tversion != kFormatVersion) {
      throw SchemaError("unsupported times file version: " + path + ".times");
    }
    const auto tcount = read_pod<std::uint64_t>(times, path);
    file.times.resize(tcount);
    times.read(reinterpret_cast<char*>(file.times.data()),
               static_cast<std::streamsize>(tcount * sizeof(std::int64_t)));
    if (!times) throw SchemaError("truncated times file: " + path + ".times");
  }
  return file;
}

std::vector<TokenSequence> TokenFile::to_sequences() const {
  std::vector<TokenSequence> out;
  for (const auto& e : index) {
    TokenSequence s;
    s.patient_id = e.patient_id;
    s.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(e.offset),
                    tokens.begin() +
                        static_cast<std::ptrdiff_t>(e.offset + e.length));
    if (times.size() == tokens.size()) {
      s.token_times.assign(
          times.begin() + static_cast<std::ptrdiff_t>(e.offset),
          times.begin() + static_cast<std::ptrdiff_t>(e.offset + e.length));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// EpochPacker

EpochPacker::EpochPacker(std::vector<TokenSequence> sequences,
                         std::size_t context_len, const Vocabulary& vocab,
                         std::uint64_t seed)
    : sequences_(std::move(sequences)),
      context_len_(context_len),
      vocab_(&vocab),
      rng_(derive_seed(seed, 0xec0c)) {
  if (sequences_.empty()) throw MedseqError("no sequences to pack");
  repack();
}

void EpochPacker::repack() {
  rng_.shuffle(sequences_);
  shard_ = pack_sequences(sequences_, context_len_, *vocab_);
  cursor_ = 0;
  ++epoch_;
}

EpochPacker::Block EpochPacker::next(std::size_t batch_rows) {
  Block block;
  block.cols = context_len_;
  if (cursor_ + batch_rows <= shard_.rows) {
    block.rows = batch_rows;
    block.tokens = shard_.tokens.data() + cursor_ * context_len_;
    block.supervised = shard_.supervised.data() + cursor_ * context_len_;
    cursor_ += batch_rows;
    return block;
  }
  // Assemble the boundary batch from the epoch tail plus a fresh epoch.
  spill_tokens_.clear();
  spill_mask_.clear();
  std::size_t needed = batch_rows;
  while (needed > 0) {
    if (cursor_ >= shard_.rows) repack();
    const std::size_t take = std::min(needed, shard_.rows - cursor_);
    const std::size_t begin = cursor_ * context_len_;
    const std::size_t count = take * context_len_;
    spill_tokens_.insert(spill_tokens_.end(), shard_.tokens.begin() + begin,
                         shard_.tokens.begin() + begin + count);
    spill_mask_.insert(spill_mask_.end(), shard_.supervised.begin() + begin,
                       shard_.supervised.begin() + begin + count);
    cursor_ += take;
    needed -= take;
  }
  block.rows = batch_rows;
  block.tokens = spill_tokens_.data();
  block.supervised = spill_mask_.data();
  return block;
}

}  // namespace medseq
