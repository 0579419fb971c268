#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "medseq/model.hpp"
#include "medseq/sequencer.hpp"

namespace medseq {

/// One sampled future: generated tokens with times measured in seconds from
/// the prompt's final event (t = 0). A token's time excludes its own decoded
/// interval; reached_time is the full decoded duration of the trajectory.
struct Trajectory {
  std::vector<TokenId> tokens;
  std::vector<std::int64_t> times;
  std::int64_t reached_time = 0;
};

/// Membership test for the estimators: either an explicit token-id set or
/// a predicate over parsed events (ICD prefix match, optionally restricted
/// to diagnoses inside given encounter types). Multi-token events match at
/// the time of their first token.
class TargetSet {
 public:
  static TargetSet tokens(std::set<TokenId> ids);
  static TargetSet diagnosis_prefix(std::string icd_prefix,
                                    std::set<std::string> encounter_types = {});

  /// Times (seconds from prompt end) of every matching event, ascending.
  std::vector<std::int64_t> match_times(const Trajectory& trajectory,
                                        const Vocabulary& vocab) const;

 private:
  std::set<TokenId> token_ids_;
  std::string icd_prefix_;
  std::set<std::string> encounter_types_;
  bool token_mode_ = true;
};

struct ProbabilityEstimate {
  double value = 0.0;
  std::int64_t numerator = 0;
  std::int64_t denominator = 0;
  std::int64_t n = 0;  // trajectories supplied
  bool excluded = false;  // denominator was zero: patient exits the eval
};

struct SimulateOptions {
  std::size_t n = 25;         // trajectories
  std::size_t d = 500;        // generated tokens per trajectory
  double temperature = 1.0;
  std::uint64_t seed = 1;
  std::size_t retries = 0;    // extra continuation rounds of d tokens when a
                              // trajectory stops early (separator/padding)
};

/// Monte Carlo rollout: the prompt is left-truncated to fit the model
/// context alongside d generated tokens, then n trajectories are sampled in
/// lockstep with per-trajectory RNG substreams. A sampled separator or
/// padding token ends a trajectory early (subject to `retries`).
std::vector<Trajectory> simulate(const ParameterSet<float>& params,
                                 const std::vector<TokenId>& prompt,
                                 const Vocabulary& vocab,
                                 const SimulateOptions& options);

/// The right-censored probability that a target-set event occurs within
/// tau seconds. Numerator counts trajectories with a hit at t <= tau;
/// the denominator additionally admits trajectories that reached tau
/// without a hit. Zero denominator yields the excluded marker.
ProbabilityEstimate estimate_probability(
    const std::vector<Trajectory>& trajectories, const TargetSet& target,
    std::int64_t tau, const Vocabulary& vocab);

struct CountDistribution {
  std::map<std::int64_t, std::int64_t> histogram;  // hits within tau -> count
  std::vector<ProbabilityEstimate> at_least;      // P(count >= k), k = 1...
  bool excluded = false;
};

/// Per-count-level censoring mirrors the time-window estimator: a
/// trajectory censored before tau still supports every level its observed
/// hits attained, and is excluded from levels beyond them.
CountDistribution count_distribution(
    const std::vector<Trajectory>& trajectories, const TargetSet& target,
    std::int64_t tau, const Vocabulary& vocab);

struct TimeToEvent {
  std::vector<std::int64_t> first_hit_times;  // uncensored trajectories
  std::vector<std::int64_t> censored_at;      // reached_time of the rest
  double median_seconds = 0.0;                // over uncensored only
  bool excluded = false;                      // no uncensored trajectory
};

TimeToEvent time_to_event(const std::vector<Trajectory>& trajectories,
                          const TargetSet& target, const Vocabulary& vocab);

/// CSV row block for estimator outputs:
/// patient_id,target,tau,value,numerator,denominator,n,excluded
std::string estimates_csv_header();
std::string estimate_csv_row(std::uint64_t patient_id,
                             const std::string& target_name, std::int64_t tau,
                             const ProbabilityEstimate& estimate);

}  // namespace medseq
