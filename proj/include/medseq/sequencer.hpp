#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "medseq/synthgen.hpp"
#include "medseq/vocab.hpp"

namespace medseq {

struct TokenSequence {
  std::uint64_t patient_id = 0;
  std::vector<TokenId> tokens;
  /// One absolute instant per token, nondecreasing. Time tokens carry the
  /// instant of the event they lead up to.
  std::vector<std::int64_t> token_times;
};

/// Dense training rows: patients concatenated with single separators,
/// sliced into fixed context-length rows, terminal remainder padded.
struct PackedBatch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<TokenId> tokens;            // rows*cols, row-major
  std::vector<std::uint64_t> provenance;  // patient id per position
  std::vector<std::uint8_t> supervised;   // 0 only on padding

  std::span<const TokenId> row(std::size_t r) const {
    return {tokens.data() + r * cols, cols};
  }
};

enum class EventKind {
  Demographic,
  BeginSequence,
  EncounterStart,
  EncounterEnd,
  Diagnosis,
  Lab,
  Medication,
  Procedure,
  Time,
  Control,   // separator / padding
  Fragment,  // stray continuation or unknown token
};

struct ParsedEvent {
  EventKind kind = EventKind::Fragment;
  bool valid = true;
  std::string code;    // reassembled code, encounter type, complaint, ...
  std::string detail;  // department specialty for encounter headers
  int lab_quantile = 0;  // 1..10; 0 means unknown-quantile
  std::vector<std::pair<std::string, std::string>> complaints;
  std::size_t token_begin = 0;
  std::size_t token_count = 0;
};

/// Tokenizes one record under the ordering rules: events sorted by their
/// rule-defined instants, diagnoses at max(encounter header instant,
/// midnight of documented date) with same-date ties permuted by `rng`,
/// time-interval tokens between consecutive events.
TokenSequence tokenize_record(const PatientRecord& record,
                              const Vocabulary& vocab,
                              const QuantileBinning& bins, Rng& rng);

/// Greedy total parse of a token stream against the event grammar.
/// Violations yield validity=false events; the parse never aborts.
std::vector<ParsedEvent> parse_tokens(std::span<const TokenId> tokens,
                                      const Vocabulary& vocab);

PackedBatch pack_sequences(const std::vector<TokenSequence>& sequences,
                           std::size_t context_len, const Vocabulary& vocab);

std::pair<std::vector<std::uint64_t>, std::vector<std::uint64_t>>
split_patients(const std::vector<std::uint64_t>& patient_ids,
               double fraction, std::uint64_t seed);

/// Keeps the trailing `budget` tokens of an over-long sequence.
std::vector<TokenId> left_truncate(const std::vector<TokenId>& tokens,
                                   std::size_t budget);

// ---------------------------------------------------------------------------
// Binary token stream format: 8-byte magic, u32 version, u64 vocabulary
// fingerprint, u32 context length (0 for unpacked streams), u64 count,
// then little-endian u32 token ids. The ".idx" sidecar holds per-patient
// (id, offset, length) triples; the ".times" sidecar holds one i64 per
// token for persisted trajectories.

void write_token_file(const std::string& path,
                      const std::vector<TokenSequence>& sequences,
                      std::uint64_t vocab_fingerprint);

struct TokenFile {
  std::uint64_t vocab_fingerprint = 0;
  std::uint32_t context_len = 0;
  std::vector<TokenId> tokens;
  struct Entry {
    std::uint64_t patient_id;
    std::uint64_t offset;
    std::uint64_t length;
  };
  std::vector<Entry> index;
  std::vector<std::int64_t> times;  // present only when a .times file exists

  std::vector<TokenSequence> to_sequences() const;
};

TokenFile read_token_file(const std::string& path);
void write_times_sidecar(const std::string& token_path,
                         const std::vector<TokenSequence>& sequences);

/// Re-packs token sequences each epoch with a freshly shuffled patient
/// order, handing out fixed-size row blocks to the training loop.
class EpochPacker {
 public:
  EpochPacker(std::vector<TokenSequence> sequences, std::size_t context_len,
              const Vocabulary& vocab, std::uint64_t seed);

  struct Block {
    std::size_t rows = 0;
    std::size_t cols = 0;
    const TokenId* tokens = nullptr;
    const std::uint8_t* supervised = nullptr;
  };

  /// Next `batch_rows` rows, wrapping to a re-shuffled epoch at the end.
  Block next(std::size_t batch_rows);
  std::uint64_t epoch() const { return epoch_; }

 private:
  void repack();

  std::vector<TokenSequence> sequences_;
  std::size_t context_len_;
  const Vocabulary* vocab_;
  Rng rng_;
  PackedBatch shard_;
  std::size_t cursor_ = 0;
  std::uint64_t epoch_ = 0;
  std::vector<TokenId> spill_tokens_;  // batch assembled across epoch edge
  std::vector<std::uint8_t> spill_mask_;
};

}  // namespace medseq
