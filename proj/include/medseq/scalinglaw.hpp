#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "medseq/common.hpp"

namespace medseq {

struct IsoFlopPoint {
  double compute = 0.0;  // C, FLOPs
  double params = 0.0;   // N
  double tokens = 0.0;   // D
  double loss = 0.0;
};

/// loss ~= a*(log10 N)^2 + b*log10 N + c, vertex at N_opt.
struct ParabolaFit {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  double vertex_log10 = 0.0;
  double optimum = 0.0;  // 10^vertex
  double min_loss = 0.0;
  double residual_rms = 0.0;
  bool extrapolated = false;  // vertex outside the swept range
};

/// value = prefactor * C^exponent, fitted by OLS in log10-log10 space.
struct PowerLawFit {
  double prefactor = 0.0;
  double exponent = 0.0;
  double residual_rms = 0.0;
};

/// For a fixed compute budget, the token count implied by each candidate
/// model size: D = round(C / (6N)). Pairs whose D falls below the context
/// length are rejected; an empty result is an error.
std::vector<std::pair<double, double>> plan_isoflop_sweep(
    double compute, const std::vector<double>& n_candidates,
    double min_tokens);

ParabolaFit fit_parabola(const std::vector<std::pair<double, double>>&
                             log10_x_vs_loss);

PowerLawFit fit_power_law(
    const std::vector<std::pair<double, double>>& compute_vs_value);

struct SyntheticSurface {
  double irreducible = 0.0;  // E
  double n_coeff = 1.0;      // A'
  double n_exp = 0.5;        // a
  double d_coeff = 1.0;      // B'
  double d_exp = 0.5;        // b

  double loss(double n, double d) const;
  /// Closed-form compute-optimal model size for budget C.
  double analytic_optimum(double compute) const;
  /// Closed-form exponent of N_opt vs C: b / (a + b).
  double analytic_exponent() const { return d_exp / (n_exp + d_exp); }
};

/// Evaluates the parametric loss surface at planned (N, D) pairs for each
/// budget; validation harness for the fitting pipeline.
std::vector<IsoFlopPoint> synthetic_surface_sweep(
    const SyntheticSurface& surface, const std::vector<double>& budgets,
    const std::vector<double>& n_candidates_per_budget_center,
    std::size_t sizes_per_budget, double decades_span, double min_tokens);

struct ScalingLawReport {
  std::vector<std::pair<double, ParabolaFit>> n_parabolas;  // per budget
  std::vector<std::pair<double, ParabolaFit>> d_parabolas;
  PowerLawFit n_law;           // N_opt = A * C^alpha
  PowerLawFit d_law;           // D_opt = B * C^beta, from the D parabolas
  PowerLawFit d_law_implied;   // D_opt = C / (6 N_opt)
};

/// Full isoFLOP -> parabola -> power-law pipeline. Points are grouped by
/// compute budget; both the loss-vs-log10(N) and loss-vs-log10(D) parabolas
/// are fitted, and D_opt is reported both from its own parabola and as
/// C/(6*N_opt).
ScalingLawReport fit_scaling_laws(const std::vector<IsoFlopPoint>& points);

std::string isoflop_csv(const std::vector<IsoFlopPoint>& points);
std::vector<IsoFlopPoint> isoflop_from_csv(const std::string& text);
std::string scaling_report_text(const ScalingLawReport& report);

}  // namespace medseq
