#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "pnrsim/detector.hpp"

namespace pnrsim {

/// Relative frequencies of simultaneous detections per shot, with the sample
/// mean and the unbiased sample variance.
struct CountHistogram {
  std::map<int, double> frequencies;
  std::uint64_t total_shots = 0;
  double mean_det = 0.0;
  double var_det = 0.0;

  void validate() const {
    if (total_shots == 0) throw std::invalid_argument("CountHistogram: empty");
    double sum = 0.0;
    for (const auto& [n, f] : frequencies) {
      if (n < 0 || f < 0.0) throw std::invalid_argument("CountHistogram: negative entry");
      sum += f;
    }
    if (std::fabs(sum - 1.0) > 1e-12) {
      throw std::invalid_argument("CountHistogram: frequencies do not sum to 1");
    }
  }
};

/// Builds a histogram from raw per-count tallies. Moments are computed from
/// exact integer sums, so they agree with the frequencies to rounding.
inline CountHistogram build_count_histogram(const std::map<int, std::uint64_t>& tallies) {
  unsigned __int128 n_total = 0;
  unsigned __int128 sum = 0;
  unsigned __int128 sum_sq = 0;
  for (const auto& [value, count] : tallies) {
    if (value < 0) throw std::invalid_argument("build_count_histogram: negative count value");
    const auto v = static_cast<unsigned __int128>(value);
    n_total += count;
    sum += v * count;
    sum_sq += v * v * count;
  }
  if (n_total == 0) throw std::invalid_argument("build_count_histogram: empty input");

  CountHistogram hist;
  hist.total_shots = static_cast<std::uint64_t>(n_total);
  const long double n = static_cast<long double>(n_total);
  hist.mean_det = static_cast<double>(static_cast<long double>(sum) / n);
  if (n_total > 1) {
    // n * sum_sq - sum^2 is exact in 128-bit for any realistic campaign.
    const long double num =
        static_cast<long double>(n_total * sum_sq) - static_cast<long double>(sum * sum);
    hist.var_det = static_cast<double>(num / (n * (n - 1.0L)));
  }
  for (const auto& [value, count] : tallies) {
    if (count > 0) hist.frequencies[value] = static_cast<double>(count) / static_cast<double>(n_total);
  }
  return hist;
}

inline CountHistogram build_count_histogram(std::span<const int> counts) {
  std::map<int, std::uint64_t> tallies;
  for (int c : counts) ++tallies[c];
  return build_count_histogram(tallies);
}

inline CountHistogram build_count_histogram(std::span<const ShotRecord> records) {
  std::map<int, std::uint64_t> tallies;
  for (const auto& r : records) ++tallies[static_cast<int>(r.n_detected)];
  return build_count_histogram(tallies);
}

struct PoissonFit {
  double mean = 0.0;
  double chi2 = 0.0;
  int dof = 0;
  double p_value = std::numeric_limits<double>::quiet_NaN();  ///< NaN when dof < 1
};

/// Maximum-likelihood Poisson fit (mean = sample mean) with a chi-squared
/// goodness-of-fit test. Adjacent count bins are merged until each carries an
/// expected count of at least 5; the last bin absorbs the upper tail.
inline PoissonFit fit_poisson(const CountHistogram& hist) {
  hist.validate();
  if (hist.total_shots < 100) {
    throw std::invalid_argument("fit_poisson: need at least 100 shots");
  }
  PoissonFit fit;
  fit.mean = hist.mean_det;

  const double n_shots = static_cast<double>(hist.total_shots);
  const int k_max = hist.frequencies.empty() ? 0 : hist.frequencies.rbegin()->first;

  std::vector<double> bin_obs, bin_exp;
  double acc_obs = 0.0, acc_exp = 0.0;
  double pmf = std::exp(-fit.mean);  // Poisson pmf at k = 0
  for (int k = 0; k <= k_max; ++k) {
    const auto it = hist.frequencies.find(k);
    acc_obs += (it != hist.frequencies.end()) ? it->second * n_shots : 0.0;
    acc_exp += pmf * n_shots;
    if (acc_exp >= 5.0) {
      bin_obs.push_back(acc_obs);
      bin_exp.push_back(acc_exp);
      acc_obs = acc_exp = 0.0;
    }
    pmf *= fit.mean / static_cast<double>(k + 1);
  }
  // Tail beyond k_max has zero observations by construction.
  double tail_exp = n_shots;
  for (double e : bin_exp) tail_exp -= e;
  tail_exp -= acc_exp;
  acc_exp += std::max(0.0, tail_exp);
  if (bin_exp.empty() || acc_exp >= 5.0) {
    bin_obs.push_back(acc_obs);
    bin_exp.push_back(acc_exp);
  } else {
    bin_obs.back() += acc_obs;
    bin_exp.back() += acc_exp;
  }

  for (std::size_t i = 0; i < bin_obs.size(); ++i) {
    if (bin_exp[i] > 0.0) {
      const double d = bin_obs[i] - bin_exp[i];
      fit.chi2 += d * d / bin_exp[i];
    }
  }
  fit.dof = static_cast<int>(bin_obs.size()) - 2;  // one for totals, one for the fitted mean
  if (fit.dof >= 1) {
    fit.p_value = boost::math::gamma_q(0.5 * fit.dof, 0.5 * fit.chi2);
  }
  return fit;
}

struct FanoFit {
  double fano = 1.0;
  double std_error = 0.0;
  int n_points = 0;
};

namespace detail {

/// Weighted least squares of var = F * mean through the origin. Weights are
/// shots/mean^2, i.e. the sigma^4 ~ mean^2 scaling of a sample variance's
/// own variance (shot counts are equal across points, so they drop out).
inline FanoFit fano_wls(std::span<const std::pair<double, double>> pts) {
  double swmv = 0.0, swmm = 0.0;
  for (const auto& [m, v] : pts) {
    const double w = 1.0 / (m * m);
    swmv += w * m * v;
    swmm += w * m * m;
  }
  FanoFit fit;
  fit.n_points = static_cast<int>(pts.size());
  fit.fano = swmv / swmm;
  if (pts.size() > 1) {
    double ss = 0.0;
    for (const auto& [m, v] : pts) {
      const double r = v - fit.fano * m;
      ss += r * r / (m * m);
    }
    fit.std_error = std::sqrt(ss / (static_cast<double>(pts.size()) - 1.0) / swmm);
  } else {
    fit.std_error = std::numeric_limits<double>::quiet_NaN();
  }
  return fit;
}

}  // namespace detail

/// Fano factor from the slope of variance vs mean, restricted to points with
/// mean_det <= max_mean where saturation does not yet bend the line.
inline FanoFit fit_fano_slope(std::span<const std::pair<double, double>> points,
                              double max_mean = 15.0) {
  std::vector<std::pair<double, double>> eligible;
  for (const auto& pt : points) {
    if (pt.first > 0.0 && pt.first <= max_mean && pt.second >= 0.0) eligible.push_back(pt);
  }
  if (eligible.size() < 3) {
    throw std::invalid_argument(
        "fit_fano_slope: need at least 3 points with 0 < mean_det <= max_mean");
  }
  return detail::fano_wls(eligible);
}

struct CrosstalkEstimate {
  double p = 0.0;
  double std_error = 0.0;
  bool under_dispersed = false;  ///< F < 1: saturated-regime data leaked into the fit
};

/// Inverts F = (1+p)/(1-p) to p = (F-1)/(F+1). Under-dispersed input (F < 1)
/// is reported as p = 0 with the warning flag set rather than an error.
inline CrosstalkEstimate estimate_crosstalk(double fano, double fano_stderr = 0.0) {
  if (!(fano >= 0.0) || !std::isfinite(fano)) {
    throw std::invalid_argument("estimate_crosstalk: fano must be finite and >= 0");
  }
  if (fano < 1.0) return {0.0, 0.0, true};
  CrosstalkEstimate est;
  est.p = (fano - 1.0) / (fano + 1.0);
  est.std_error = 2.0 * fano_stderr / ((fano + 1.0) * (fano + 1.0));
  return est;
}

struct EfficiencyCorrection {
  double qe = 0.0;
  double p_prime = 0.0;
};

/// Removes the cross-talk inflation from a measured efficiency:
/// eta = QE (1 + p') with p' = p/(1-p), so QE = eta/(1+p').
inline EfficiencyCorrection correct_efficiency(double eta_measured, double p) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("correct_efficiency: p must lie in [0, 1)");
  if (!(eta_measured >= 0.0)) throw std::invalid_argument("correct_efficiency: eta must be >= 0");
  const double p_prime = p / (1.0 - p);
  const double qe = eta_measured / (1.0 + p_prime);
  if (qe > 1.0 + 1e-12) {
    throw std::invalid_argument("correct_efficiency: eta exceeds the 1 + p' bound");
  }
  return {qe, p_prime};
}

/// Everything the analysis recovers about the detector, plus the mapping
/// constants needed to turn detected counts back into input photons.
struct CalibrationReport {
  double fano = 1.0;
  double fano_stderr = 0.0;
  double crosstalk_p = 0.0;
  double crosstalk_p_stderr = 0.0;
  double crosstalk_p_prime = 0.0;
  double crosstalk_p_prime_stderr = 0.0;
  double eta_total = 0.0;
  double qe_total = 0.0;
  double noise_mean = 0.0;
  double min_sensitivity_photons = 0.0;
  double fit_range_max_mean = 15.0;
  bool under_dispersed = false;

  void validate() const {
    auto close = [](double a, double b) { return std::fabs(a - b) <= 1e-12 * std::max(1.0, std::fabs(b)); };
    if (!close(crosstalk_p_prime, crosstalk_p / (1.0 - crosstalk_p)) ||
        !close(qe_total, eta_total / (1.0 + crosstalk_p_prime)) ||
        !close(min_sensitivity_photons, noise_mean / eta_total)) {
      throw std::invalid_argument("CalibrationReport: internal identities violated");
    }
  }
};

/// Assembles a consistent report from a Fano fit, the measured total
/// efficiency and the dark-run noise mean.
inline CalibrationReport make_calibration_report(const FanoFit& fano_fit, double eta_total,
                                                 double noise_mean, double fit_range_max_mean = 15.0) {
  if (!(eta_total > 0.0)) {
    throw std::invalid_argument("make_calibration_report: eta_total must be > 0");
  }
  if (!(noise_mean >= 0.0)) {
    throw std::invalid_argument("make_calibration_report: noise_mean must be >= 0");
  }
  const auto ct = estimate_crosstalk(fano_fit.fano, fano_fit.std_error);
  const double q = 1.0 - ct.p;

  CalibrationReport rep;
  rep.fano = fano_fit.fano;
  rep.fano_stderr = fano_fit.std_error;
  rep.crosstalk_p = ct.p;
  rep.crosstalk_p_stderr = ct.std_error;
  rep.crosstalk_p_prime = ct.p / q;
  rep.crosstalk_p_prime_stderr = ct.std_error / (q * q);
  rep.eta_total = eta_total;
  rep.qe_total = eta_total / (1.0 + rep.crosstalk_p_prime);
  rep.noise_mean = noise_mean;
  rep.min_sensitivity_photons = noise_mean / eta_total;
  rep.fit_range_max_mean = fit_range_max_mean;
  rep.under_dispersed = ct.under_dispersed;
  return rep;
}

struct CalibrationEstimate {
  double input_photons = 0.0;
  bool saturation_warning = false;  ///< detected mean beyond the linear regime
  bool below_noise_floor = false;
};

/// Detected counts above which the linear mapping stops being trusted: the
/// Fano fit range, extended to the ~20-detection point where saturation
/// visibly bends the detector response.
inline double calibration_linear_bound(const CalibrationReport& report) {
  return std::max(20.0, report.fit_range_max_mean);
}

/// Maps a mean number of simultaneous detections to the estimated mean input
/// photon number: subtract the noise floor, then divide by the cross-talk-
/// free quantum efficiency, max(0, (n_det - noise) / qe_total).
inline CalibrationEstimate calibrate(const CalibrationReport& report, double n_detected_mean) {
  if (!(n_detected_mean >= 0.0)) {
    throw std::invalid_argument("calibrate: n_detected_mean must be >= 0");
  }
  if (!(report.qe_total > 0.0)) throw std::invalid_argument("calibrate: report has qe_total <= 0");
  CalibrationEstimate est;
  est.input_photons = std::max(0.0, (n_detected_mean - report.noise_mean) / report.qe_total);
  est.below_noise_floor = n_detected_mean <= report.noise_mean;
  est.saturation_warning = n_detected_mean > calibration_linear_bound(report);
  return est;
}

/// Input estimate straight from a raw detected mean (cross-talk still in the
/// signal): divides the net signal by eta_total = qe_total (1 + p').
inline double estimate_input_from_raw(const CalibrationReport& report, double raw_detected_mean) {
  if (!(report.eta_total > 0.0)) {
    throw std::invalid_argument("estimate_input_from_raw: report has eta_total <= 0");
  }
  return std::max(0.0, (raw_detected_mean - report.noise_mean) / report.eta_total);
}

struct NoiseFloor {
  double noise_mean = 0.0;
  double min_sensitivity = 0.0;  ///< noise-equivalent input photons per pulse
};

/// Noise floor from a dark run (no input light): the mean detection frequency
/// and, divided by the total efficiency, the minimal detectable photon number.
inline NoiseFloor noise_floor(const CountHistogram& dark_hist, double eta_total) {
  dark_hist.validate();
  if (!(eta_total > 0.0)) throw std::invalid_argument("noise_floor: eta_total must be > 0");
  return {dark_hist.mean_det, dark_hist.mean_det / eta_total};
}

struct BiasSweepInput {
  double excess_bias_V = 0.0;
  std::vector<CountHistogram> sweep;  ///< low-mean histograms taken at this bias
};

struct BiasPointEstimate {
  double excess_bias_V = 0.0;
  double fano = 1.0;
  double fano_stderr = 0.0;
  double p = 0.0;
  double p_stderr = 0.0;
  bool under_dispersed = false;
};

/// Per-bias Fano and cross-talk estimates from low-mean sweeps, ordered by
/// bias. Each bias needs enough points for fit_fano_slope.
inline std::vector<BiasPointEstimate> sweep_bias_analysis(std::span<const BiasSweepInput> runs,
                                                          double max_mean = 15.0) {
  if (runs.size() < 2) throw std::invalid_argument("sweep_bias_analysis: need at least 2 bias points");
  std::vector<BiasPointEstimate> out;
  for (const auto& run : runs) {
    std::vector<std::pair<double, double>> points;
    points.reserve(run.sweep.size());
    for (const auto& h : run.sweep) points.emplace_back(h.mean_det, h.var_det);
    const auto fit = fit_fano_slope(points, max_mean);
    const auto ct = estimate_crosstalk(fit.fano, fit.std_error);
    out.push_back({run.excess_bias_V, fit.fano, fit.std_error, ct.p, ct.std_error, ct.under_dispersed});
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.excess_bias_V < b.excess_bias_V; });
  return out;
}

}  // namespace pnrsim
