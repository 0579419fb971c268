#include "medseq/scalinglaw.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace medseq {

std::vector<std::pair<double, double>> plan_isoflop_sweep(
    double compute, const std::vector<double>& n_candidates,
    double min_tokens) {
  if (compute <= 0.0) throw MedseqError("compute budget must be positive");
  std::vector<std::pair<double, double>> pairs;
  std::vector<double> seen;
  for (double n : n_candidates) {
    if (n <= 0.0) throw MedseqError("candidate model size must be positive");
    for (double s : seen) {
      if (s == n) throw MedseqError("candidate model sizes must be distinct");
    }
    seen.push_back(n);
    const double d = std::round(compute / (6.0 * n));
    if (d < min_tokens) continue;
    pairs.emplace_back(n, d);
  }
  if (pairs.empty()) {
    throw MedseqError("compute budget too small: every candidate rejected");
  }
  return pairs;
}

ParabolaFit fit_parabola(
    const std::vector<std::pair<double, double>>& log10_x_vs_loss) {
  if (log10_x_vs_loss.size() < 3) {
    throw MedseqError("parabola fit needs at least 3 points");
  }
  std::vector<double> distinct;
  for (const auto& [x, y] : log10_x_vs_loss) {
    bool found = false;
    for (double d : distinct) found = found || d == x;
    if (!found) distinct.push_back(x);
  }
  if (distinct.size() < 3) {
    throw MedseqError("parabola fit needs at least 3 distinct abscissae");
  }

  // Least squares on the centered basis (x - mean) for conditioning.
  const std::size_t n = log10_x_vs_loss.size();
  double mean_x = 0.0;
  for (const auto& [x, y] : log10_x_vs_loss) mean_x += x;
  mean_x /= static_cast<double>(n);

  double s1 = static_cast<double>(n), sx = 0, sx2 = 0, sx3 = 0, sx4 = 0;
  double sy = 0, sxy = 0, sx2y = 0;
  for (const auto& [raw_x, y] : log10_x_vs_loss) {
    const double x = raw_x - mean_x;
    const double x2 = x * x;
    sx += x;
    sx2 += x2;
    sx3 += x2 * x;
    sx4 += x2 * x2;
    sy += y;
    sxy += x * y;
    sx2y += x2 * y;
  }
  // Solve the 3x3 normal equations [ (1,x,x^2) weights ] via elimination.
  double m[3][4] = {{s1, sx, sx2, sy},
                    {sx, sx2, sx3, sxy},
                    {sx2, sx3, sx4, sx2y}};
  for (int col = 0; col < 3; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 3; ++r) {
      if (std::fabs(m[r][col]) > std::fabs(m[pivot][col])) pivot = r;
    }
    std::swap(m[col], m[pivot]);
    if (m[col][col] == 0.0) throw MedseqError("degenerate parabola system");
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      const double f = m[r][col] / m[col][col];
      for (int cc = col; cc < 4; ++cc) m[r][cc] -= f * m[col][cc];
    }
  }
  const double c0 = m[0][3] / m[0][0];
  const double c1 = m[1][3] / m[1][1];
  const double c2 = m[2][3] / m[2][2];

  ParabolaFit fit;
  // Un-center: loss = c2 (x-mu)^2 + c1 (x-mu) + c0.
  fit.a = c2;
  fit.b = c1 - 2.0 * c2 * mean_x;
  fit.c = c0 - c1 * mean_x + c2 * mean_x * mean_x;
  if (fit.a <= 0.0) {
    throw MedseqError("no interior minimum: parabola opens downward or is "
                      "degenerate");
  }
  fit.vertex_log10 = -fit.b / (2.0 * fit.a);
  fit.optimum = std::pow(10.0, fit.vertex_log10);
  fit.min_loss = fit.c - fit.b * fit.b / (4.0 * fit.a);

  double lo = log10_x_vs_loss[0].first, hi = lo;
  double ss = 0.0;
  for (const auto& [x, y] : log10_x_vs_loss) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
    const double pred = fit.a * x * x + fit.b * x + fit.c;
    ss += (y - pred) * (y - pred);
  }
  fit.residual_rms = std::sqrt(ss / static_cast<double>(n));
  fit.extrapolated = fit.vertex_log10 < lo || fit.vertex_log10 > hi;
  return fit;
}

PowerLawFit fit_power_law(
    const std::vector<std::pair<double, double>>& compute_vs_value) {
  if (compute_vs_value.size() < 2) {
    throw MedseqError("power-law fit needs at least 2 points");
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [c, v] : compute_vs_value) {
    if (c <= 0.0 || v <= 0.0) {
      throw MedseqError("power-law fit needs positive compute and value");
    }
    const double x = std::log10(c);
    const double y = std::log10(v);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const auto n = static_cast<double>(compute_vs_value.size());
  const double denom = n * sxx - sx * sx;
  if (denom == 0.0) throw MedseqError("power-law fit: degenerate abscissae");
  PowerLawFit fit;
  fit.exponent = (n * sxy - sx * sy) / denom;
  const double intercept = (sy - fit.exponent * sx) / n;
  fit.prefactor = std::pow(10.0, intercept);
  double ss = 0.0;
  for (const auto& [c, v] : compute_vs_value) {
    const double pred = intercept + fit.exponent * std::log10(c);
    const double err = std::log10(v) - pred;
    ss += err * err;
  }
  fit.residual_rms = std::sqrt(ss / n);
  return fit;
}

double SyntheticSurface::loss(double n, double d) const {
  return irreducible + n_coeff / std::pow(n, n_exp) +
         d_coeff / std::pow(d, d_exp);
}

double SyntheticSurface::analytic_optimum(double compute) const {
  // Minimize E + A'/N^a + B'*(6N/C)^b over N: the stationarity condition
  // gives N_opt = [ (a A') / (b B') * (C/6)^b ]^(1/(a+b)).
  const double ratio = (n_exp * n_coeff) / (d_exp * d_coeff);
  return std::pow(ratio * std::pow(compute / 6.0, d_exp),
                  1.0 / (n_exp + d_exp));
}

std::vector<IsoFlopPoint> synthetic_surface_sweep(
    const SyntheticSurface& surface, const std::vector<double>& budgets,
    const std::vector<double>& n_candidates_per_budget_center,
    std::size_t sizes_per_budget, double decades_span, double min_tokens) {
  if (surface.n_exp <= 0.0 || surface.d_exp <= 0.0) {
    throw MedseqError("surface exponents must be positive");
  }
  std::vector<IsoFlopPoint> points;
  for (std::size_t bi = 0; bi < budgets.size(); ++bi) {
    const double compute = budgets[bi];
    std::vector<double> candidates;
    if (!n_candidates_per_budget_center.empty()) {
      // Geometric grid around the supplied center, agnostic of the surface.
      const double center = n_candidates_per_budget_center[bi];
      for (std::size_t i = 0; i < sizes_per_budget; ++i) {
        const double offset =
            decades_span *
            (2.0 * static_cast<double>(i) /
                 static_cast<double>(sizes_per_budget - 1) -
             1.0);
        candidates.push_back(center * std::pow(10.0, offset));
      }
    }
    for (const auto& [n, d] : plan_isoflop_sweep(compute, candidates,
                                                 min_tokens)) {
      IsoFlopPoint p;
      p.compute = compute;
      p.params = n;
      p.tokens = d;
      p.loss = surface.loss(n, d);
      points.push_back(p);
    }
  }
  return points;
}

ScalingLawReport fit_scaling_laws(const std::vector<IsoFlopPoint>& points) {
  std::map<double, std::vector<IsoFlopPoint>> by_budget;
  for (const auto& p : points) by_budget[p.compute].push_back(p);
  if (by_budget.size() < 2) {
    throw MedseqError("need at least 2 compute budgets to fit scaling laws");
  }
  ScalingLawReport report;
  std::vector<std::pair<double, double>> n_opt_points;
  std::vector<std::pair<double, double>> d_opt_points;
  std::vector<std::pair<double, double>> d_implied_points;
  for (const auto& [compute, group] : by_budget) {
    std::vector<std::pair<double, double>> n_xy, d_xy;
    for (const auto& p : group) {
      n_xy.emplace_back(std::log10(p.params), p.loss);
      d_xy.emplace_back(std::log10(p.tokens), p.loss);
    }
    const ParabolaFit n_fit = fit_parabola(n_xy);
    const ParabolaFit d_fit = fit_parabola(d_xy);
    report.n_parabolas.emplace_back(compute, n_fit);
    report.d_parabolas.emplace_back(compute, d_fit);
    n_opt_points.emplace_back(compute, n_fit.optimum);
    d_opt_points.emplace_back(compute, d_fit.optimum);
    d_implied_points.emplace_back(compute, compute / (6.0 * n_fit.optimum));
  }
  report.n_law = fit_power_law(n_opt_points);
  report.d_law = fit_power_law(d_opt_points);
  report.d_law_implied = fit_power_law(d_implied_points);
  return report;
}

std::string isoflop_csv(const std::vector<IsoFlopPoint>& points) {
  std::ostringstream out;
  out << "compute,params,tokens,loss\n";
  char buf[160];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g,%.10g\n", p.compute,
                  p.params, p.tokens, p.loss);
    out << buf;
  }
  return out.str();
}

std::vector<IsoFlopPoint> isoflop_from_csv(const std::string& text) {
  std::vector<IsoFlopPoint> points;
  bool header = true;
  for (const auto& line : split(text, '\n')) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const auto fields = split(line, ',');
    if (fields.size() != 4) throw MedseqError("bad isoflop csv line: " + line);
    IsoFlopPoint p;
    p.compute = std::stod(fields[0]);
    p.params = std::stod(fields[1]);
    p.tokens = std::stod(fields[2]);
    p.loss = std::stod(fields[3]);
    points.push_back(p);
  }
  return points;
}

std::string scaling_report_text(const ScalingLawReport& report) {
  std::ostringstream out;
  char buf[256];
  out << "per-budget parabola minima:\n";
  for (std::size_t i = 0; i < report.n_parabolas.size(); ++i) {
    const auto& [compute, n_fit] = report.n_parabolas[i];
    const auto& d_fit = report.d_parabolas[i].second;
    std::snprintf(buf, sizeof(buf),
                  "  C=%.4g  N_opt=%.4g (rms %.3g%s)  D_opt=%.4g (rms %.3g%s)\n",
                  compute, n_fit.optimum, n_fit.residual_rms,
                  n_fit.extrapolated ? ", extrapolated" : "", d_fit.optimum,
                  d_fit.residual_rms, d_fit.extrapolated ? ", extrapolated" : "");
    out << buf;
  }
  std::snprintf(buf, sizeof(buf),
                "N_opt = %.6g * C^%.4f   (residual rms %.4g)\n",
                report.n_law.prefactor, report.n_law.exponent,
                report.n_law.residual_rms);
  out << buf;
  std::snprintf(buf, sizeof(buf),
                "D_opt = %.6g * C^%.4f   (from D parabolas, rms %.4g)\n",
                report.d_law.prefactor, report.d_law.exponent,
                report.d_law.residual_rms);
  out << buf;
  std::snprintf(buf, sizeof(buf),
                "D_opt = %.6g * C^%.4f   (implied by C/(6 N_opt))\n",
                report.d_law_implied.prefactor, report.d_law_implied.exponent);
  out << buf;
  out << "reference natural-language-scale exponents for comparison: "
         "alpha=0.520, beta=0.512\n";
  return out.str();
}

}  // namespace medseq
