#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pnrsim {

/// Full parameter set of the up-conversion + multi-pixel APD chain.
///
/// The optical front end (fiber coupling, waveguide conversion, prism and
/// interference filter) is collapsed into the single transmission
/// eta_chain_optical; qe_sipm is the end-to-end pixel quantum efficiency with
/// the fill factor folded in. Dark detections are split between noise photons
/// generated in the waveguide (which see the pixel QE and cross-talk like any
/// photon) and electronic SiPM counts, via dark_sipm_fraction.
struct DetectorConfig {
  int n_pixels = 100;
  double qe_sipm = 0.24;
  double eta_chain_optical = 0.11;
  double crosstalk_p = 0.314;
  double dark_mean_per_shot = 0.023;   ///< total dark detections per shot, after cross-talk
  double dark_sipm_fraction = 0.02;    ///< share of the dark mean that is SiPM-electronic
  double excess_bias_V = 1.3;
  double gain_single = 1.0;            ///< single-avalanche pulse height, arbitrary units
  double sigma_single = 0.07;          ///< per-avalanche amplitude spread, same units

  void validate() const {
    auto check_prob = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw std::invalid_argument(std::string("DetectorConfig: ") + name + " must lie in [0, 1]");
      }
    };
    if (n_pixels < 1) throw std::invalid_argument("DetectorConfig: n_pixels must be >= 1");
    check_prob(qe_sipm, "qe_sipm");
    check_prob(eta_chain_optical, "eta_chain_optical");
    check_prob(dark_sipm_fraction, "dark_sipm_fraction");
    if (!(crosstalk_p >= 0.0 && crosstalk_p < 1.0)) {
      throw std::invalid_argument("DetectorConfig: crosstalk_p must lie in [0, 1)");
    }
    if (!(dark_mean_per_shot >= 0.0) || !std::isfinite(dark_mean_per_shot)) {
      throw std::invalid_argument("DetectorConfig: dark_mean_per_shot must be finite and >= 0");
    }
    if (!(gain_single > 0.0)) throw std::invalid_argument("DetectorConfig: gain_single must be > 0");
    if (!(sigma_single >= 0.0)) throw std::invalid_argument("DetectorConfig: sigma_single must be >= 0");
    if (!std::isfinite(excess_bias_V)) throw std::invalid_argument("DetectorConfig: excess_bias_V must be finite");
  }

  double crosstalk_p_prime() const { return crosstalk_p / (1.0 - crosstalk_p); }

  /// Total chain efficiency eta = eta_optical * QE * (1 + p'); ~0.0385 at defaults.
  double total_efficiency() const {
    return eta_chain_optical * qe_sipm * (1.0 + crosstalk_p_prime());
  }

  /// Mean of the waveguide-origin noise *photons* injected before the pixel
  /// stage. Sized so that, after QE and cross-talk amplification, the
  /// non-SiPM share of dark_mean_per_shot comes out on average.
  double uc_noise_photon_mean() const {
    if (qe_sipm == 0.0) return 0.0;
    return dark_mean_per_shot * (1.0 - dark_sipm_fraction) * (1.0 - crosstalk_p) / qe_sipm;
  }

  /// Mean of SiPM-electronic dark *primaries* per shot (they cascade like any
  /// primary, hence the 1/(1+p') = (1-p) deflation).
  double sipm_dark_primary_mean() const {
    return dark_mean_per_shot * dark_sipm_fraction * (1.0 - crosstalk_p);
  }
};

/// Linear excess-bias response around a reference operating point, plus a
/// lookup table for the cross-talk probability as a function of bias.
struct BiasModel {
  double eta_slope_per_0p1V = 0.0031;  ///< absolute efficiency gain per 0.1 V
  double amp_slope_per_0p1V = 0.0039;  ///< relative avalanche-amplitude gain per 0.1 V
  double reference_bias_V = 1.3;
  /// (excess bias V, cross-talk p) pairs, ascending in V.
  std::vector<std::pair<double, double>> crosstalk_table = {
      {0.9, 0.20}, {1.1, 0.26}, {1.3, 0.314}, {1.5, 0.37}, {1.7, 0.43}};

  /// Linear extrapolation is allowed this far beyond the table ends.
  static constexpr double kExtrapolationMarginV = 0.3;

  void validate() const {
    if (crosstalk_table.size() < 2) {
      throw std::invalid_argument("BiasModel: crosstalk_table needs at least 2 points");
    }
    for (std::size_t i = 1; i < crosstalk_table.size(); ++i) {
      if (!(crosstalk_table[i].first > crosstalk_table[i - 1].first)) {
        throw std::invalid_argument("BiasModel: crosstalk_table must be strictly ascending in bias");
      }
    }
    for (const auto& [v, p] : crosstalk_table) {
      if (!(p >= 0.0 && p < 1.0)) {
        throw std::invalid_argument("BiasModel: table cross-talk values must lie in [0, 1)");
      }
    }
  }

  /// Piecewise-linear p(V); extrapolates linearly up to the margin, then throws.
  double crosstalk_at(double excess_bias_V) const {
    validate();
    const auto& tab = crosstalk_table;
    if (excess_bias_V < tab.front().first - kExtrapolationMarginV ||
        excess_bias_V > tab.back().first + kExtrapolationMarginV) {
      throw std::out_of_range("BiasModel: excess bias " + std::to_string(excess_bias_V) +
                              " V outside modeled range");
    }
    for (const auto& [v, p] : tab) {
      if (std::fabs(excess_bias_V - v) < 1e-12) return p;
    }
    std::size_t hi = 1;
    while (hi + 1 < tab.size() && tab[hi].first < excess_bias_V) ++hi;
    const auto& [v0, p0] = tab[hi - 1];
    const auto& [v1, p1] = tab[hi];
    const double t = (excess_bias_V - v0) / (v1 - v0);
    return std::clamp(p0 + t * (p1 - p0), 0.0, 0.95);
  }
};

/// Re-parameterizes a reference-point config for a different excess bias:
/// total efficiency shifts by eta_slope per 0.1 V (absorbed into qe_sipm),
/// the single-avalanche amplitude scales by amp_slope per 0.1 V, and the
/// cross-talk probability is interpolated from the table.
///
/// `config` must describe the detector at the model's reference bias.
inline DetectorConfig apply_bias(const DetectorConfig& config, const BiasModel& model,
                                 double excess_bias_V) {
  config.validate();
  model.validate();
  if (std::fabs(config.excess_bias_V - model.reference_bias_V) > 1e-9) {
    throw std::invalid_argument("apply_bias: config is not at the bias model's reference point");
  }
  if (!(config.eta_chain_optical > 0.0)) {
    throw std::invalid_argument("apply_bias: eta_chain_optical must be > 0 to rescale qe_sipm");
  }
  const double p_new = model.crosstalk_at(excess_bias_V);
  const double dv_steps = (excess_bias_V - model.reference_bias_V) / 0.1;
  const double eta_new = config.total_efficiency() + model.eta_slope_per_0p1V * dv_steps;
  if (!(eta_new > 0.0)) {
    throw std::out_of_range("apply_bias: extrapolated total efficiency is not positive");
  }

  DetectorConfig out = config;
  out.excess_bias_V = excess_bias_V;
  out.crosstalk_p = p_new;
  out.qe_sipm = eta_new * (1.0 - p_new) / config.eta_chain_optical;
  out.gain_single = config.gain_single * (1.0 + model.amp_slope_per_0p1V * dv_steps);
  out.validate();
  return out;
}

/// Expected number of distinct fired pixels when k photons land uniformly on
/// N pixels: N (1 - (1 - 1/N)^k). Analytic reference for saturation tests.
inline double expected_fired_pixels(int n_pixels, std::int64_t photons_at_array) {
  if (n_pixels < 1 || photons_at_array < 0) {
    throw std::invalid_argument("expected_fired_pixels: inputs must be non-negative (pixels >= 1)");
  }
  const double n = static_cast<double>(n_pixels);
  return n * (1.0 - std::pow(1.0 - 1.0 / n, static_cast<double>(photons_at_array)));
}

/// Outcome of one optical pulse through the chain.
struct ShotRecord {
  std::int64_t shot_id = 0;
  std::int64_t n_input = 0;         ///< telecom photons in the pulse
  std::int64_t n_after_optics = 0;  ///< photons reaching the pixel array (incl. waveguide noise)
  std::int64_t n_primary = 0;       ///< pixels fired by photons/dark counts, before cross-talk
  std::int64_t n_detected = 0;      ///< total fired pixels
  double pulse_height = 0.0;        ///< synthesized amplitude, gain units
};

}  // namespace pnrsim
