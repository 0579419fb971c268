#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "medseq/model.hpp"
#include "medseq/sequencer.hpp"

namespace medseq {

struct TrainConfig {
  std::size_t batch_rows = 32;
  std::uint64_t total_steps = 1000;
  std::uint64_t warmup_steps = 100;
  double peak_lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  std::string nan_checkpoint_path;  // diagnostic dump target on NaN loss

  void validate() const {
    if (warmup_steps > total_steps) {
      throw MedseqError("warmup steps must not exceed total steps");
    }
    if (peak_lr <= 0.0) throw MedseqError("peak learning rate must be positive");
  }
};

/// Linear warmup to the peak, then cosine decay to peak/10 at the final step.
double lr_at(std::uint64_t step, const TrainConfig& config);

struct FlopLedger {
  std::int64_t params = 0;       // N
  std::int64_t tokens = 0;       // D, consumed row positions
  double flops() const { return 6.0 * static_cast<double>(params) *
                                static_cast<double>(tokens); }
  double tflops() const { return flops() / 1e12; }
};

/// C = 6*N*D. The forward+backward accounting constant is fixed at 6;
/// N counts every trainable parameter including embeddings.
double estimate_flops(std::int64_t params, std::int64_t tokens);

struct LossCurvePoint {
  std::uint64_t step = 0;
  std::int64_t tokens = 0;
  double loss = 0.0;
  double lr = 0.0;
  double flops = 0.0;
};

struct TrainResult {
  std::vector<LossCurvePoint> curve;
  FlopLedger ledger;
  double final_loss = 0.0;
};

std::string loss_curve_csv(const std::vector<LossCurvePoint>& curve);

/// AdamW with decoupled weight decay and global gradient-norm clipping.
/// Deterministic given the parameter state, data order, and config seed.
/// A non-finite loss dumps a diagnostic checkpoint (when a path is set)
/// and aborts.
TrainResult train(ParameterSet<float>& params, EpochPacker& data,
                  const TrainConfig& config,
                  const std::function<void(const LossCurvePoint&)>& on_step =
                      nullptr);

/// Optimizer state exposed for tests of the update rule.
class AdamW {
 public:
  AdamW(const ModelConfig& model_config, const TrainConfig& config);

  /// Applies one update in place; returns the pre-clip global grad norm.
  double apply(ParameterSet<float>& params, ParameterSet<float>& grads,
               std::uint64_t step);

 private:
  TrainConfig config_;
  ParameterSet<float> m_;
  ParameterSet<float> v_;
};

}  // namespace medseq
