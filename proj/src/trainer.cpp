#include "medseq/trainer.hpp"

#include <cmath>
#include <sstream>

namespace medseq {

double lr_at(std::uint64_t step, const TrainConfig& config) {
  config.validate();
  if (step > config.total_steps) {
    throw MedseqError("lr_at: step beyond total steps");
  }
  if (config.warmup_steps > 0 && step < config.warmup_steps) {
    return config.peak_lr * static_cast<double>(step) /
           static_cast<double>(config.warmup_steps);
  }
  const std::uint64_t span = config.total_steps - config.warmup_steps;
  if (span == 0) return config.peak_lr;
  const double progress =
      static_cast<double>(step - config.warmup_steps) /
      static_cast<double>(span);
  const double floor = config.peak_lr / 10.0;
  return floor + (config.peak_lr - floor) * 0.5 *
                     (1.0 + std::cos(3.14159265358979323846 * progress));
}

double estimate_flops(std::int64_t params, std::int64_t tokens) {
  if (params <= 0 || tokens <= 0) {
    throw MedseqError("estimate_flops: N and D must be positive");
  }
  return 6.0 * static_cast<double>(params) * static_cast<double>(tokens);
}

std::string loss_curve_csv(const std::vector<LossCurvePoint>& curve) {
  std::ostringstream out;
  out << "step,tokens,loss,lr,flops\n";
  char buf[160];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof(buf), "%llu,%lld,%.8g,%.8g,%.8g\n",
                  static_cast<unsigned long long>(p.step),
                  static_cast<long long>(p.tokens), p.loss, p.lr, p.flops);
    out << buf;
  }
  return out.str();
}

AdamW::AdamW(const ModelConfig& model_config, const TrainConfig& config)
    : config_(config),
      m_(ParameterSet<float>::zeros(model_config)),
      v_(ParameterSet<float>::zeros(model_config)) {}

double AdamW::apply(ParameterSet<float>& params, ParameterSet<float>& grads,
                    std::uint64_t step) {
  double sq_norm = 0.0;
  grads.for_each([&sq_norm](const std::string&, Tensor<float>& g) {
    for (float x : g.data) sq_norm += static_cast<double>(x) * x;
  });
  const double norm = std::sqrt(sq_norm);
  if (config_.clip_norm > 0.0 && norm > config_.clip_norm) {
    const auto scale = static_cast<float>(config_.clip_norm / norm);
    grads.for_each([scale](const std::string&, Tensor<float>& g) {
      for (float& x : g.data) x *= scale;
    });
  }

  const double lr = lr_at(step, config_);
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step));
  const auto b1 = static_cast<float>(config_.beta1);
  const auto b2 = static_cast<float>(config_.beta2);

  auto* mstate = &m_;
  auto* vstate = &v_;
  std::vector<Tensor<float>*> mts, vts;
  mstate->for_each([&mts](const std::string&, Tensor<float>& t) {
    mts.push_back(&t);
  });
  vstate->for_each([&vts](const std::string&, Tensor<float>& t) {
    vts.push_back(&t);
  });
  std::size_t ti = 0;
  std::vector<Tensor<float>*> gts;
  grads.for_each([&gts](const std::string&, Tensor<float>& t) {
    gts.push_back(&t);
  });
  params.for_each([&](const std::string&, Tensor<float>& w) {
    Tensor<float>& m = *mts[ti];
    Tensor<float>& v = *vts[ti];
    Tensor<float>& g = *gts[ti];
    ++ti;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m.data[i] = b1 * m.data[i] + (1.0f - b1) * g.data[i];
      v.data[i] = b2 * v.data[i] + (1.0f - b2) * g.data[i] * g.data[i];
      const double mhat = static_cast<double>(m.data[i]) / bc1;
      const double vhat = static_cast<double>(v.data[i]) / bc2;
      const double update =
          mhat / (std::sqrt(vhat) + config_.adam_eps) +
          config_.weight_decay * static_cast<double>(w.data[i]);
      w.data[i] -= static_cast<float>(lr * update);
    }
  });
  return norm;
}

TrainResult train(ParameterSet<float>& params, EpochPacker& data,
                  const TrainConfig& config,
                  const std::function<void(const LossCurvePoint&)>& on_step) {
  config.validate();
  TrainResult result;
  result.ledger.params = static_cast<std::int64_t>(params.count());
  AdamW optimizer(params.config, config);

  ParameterSet<float> grads = ParameterSet<float>::zeros(params.config);
  for (std::uint64_t step = 1; step <= config.total_steps; ++step) {
    const EpochPacker::Block block = data.next(config.batch_rows);
    grads.for_each([](const std::string&, Tensor<float>& t) { t.zero(); });
    const float loss = loss_and_grad(params, block.tokens, block.supervised,
                                     block.rows, block.cols, &grads);
    if (!std::isfinite(loss)) {
      if (!config.nan_checkpoint_path.empty()) {
        save_checkpoint(config.nan_checkpoint_path, params, step, "");
      }
      throw MedseqError("non-finite loss at step " + std::to_string(step) +
                        (config.nan_checkpoint_path.empty()
                             ? ""
                             : "; diagnostic checkpoint written to " +
                                   config.nan_checkpoint_path));
    }
    optimizer.apply(params, grads, step);
    result.ledger.tokens +=
        static_cast<std::int64_t>(block.rows * block.cols);

    LossCurvePoint point;
    point.step = step;
    point.tokens = result.ledger.tokens;
    point.loss = static_cast<double>(loss);
    point.lr = lr_at(step, config);
    point.flops = result.ledger.flops();
    result.curve.push_back(point);
    result.final_loss = point.loss;
    if (on_step) on_step(point);
  }
  return result;
}

}  // namespace medseq
