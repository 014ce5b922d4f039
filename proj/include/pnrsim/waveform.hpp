#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "pnrsim/detector.hpp"
#include "pnrsim/random.hpp"

namespace pnrsim {

/// Stylized single-pulse shape: linear rise to the peak, exponential fall.
/// Only the height feeds the analysis; the shape exists so traces look like
/// the oscilloscope output they stand in for.
struct PulseShape {
  double duration_ns = 50.0;
  double sample_period_ns = 2.0;
  double rise_fraction = 0.1;

  void validate() const {
    if (!(duration_ns > 0.0) || !(sample_period_ns > 0.0) || duration_ns <= sample_period_ns) {
      throw std::invalid_argument("PulseShape: require duration_ns > sample_period_ns > 0");
    }
    if (!(rise_fraction > 0.0 && rise_fraction < 1.0)) {
      throw std::invalid_argument("PulseShape: rise_fraction must lie in (0, 1)");
    }
  }
};

struct TraceSample {
  double t_ns;
  double amplitude;
};

/// Binned amplitude histogram used for photon-number discrimination.
struct PulseHeightSpectrum {
  std::vector<double> bin_edges;        ///< ascending, size = counts.size() + 1
  std::vector<std::uint64_t> counts;
  std::uint64_t total_shots = 0;

  void validate() const {
    if (bin_edges.size() != counts.size() + 1 || counts.empty()) {
      throw std::invalid_argument("PulseHeightSpectrum: need counts.size()+1 bin edges");
    }
    for (std::size_t i = 1; i < bin_edges.size(); ++i) {
      if (!(bin_edges[i] > bin_edges[i - 1])) {
        throw std::invalid_argument("PulseHeightSpectrum: bin edges must be strictly increasing");
      }
    }
    std::uint64_t sum = 0;
    for (auto c : counts) sum += c;
    if (sum != total_shots) {
      throw std::invalid_argument("PulseHeightSpectrum: counts must sum to total_shots");
    }
  }

  double bin_center(std::size_t i) const { return 0.5 * (bin_edges[i] + bin_edges[i + 1]); }
};

/// Draws the summed pixel amplitude for N simultaneous avalanches:
/// N * gain with a sqrt(N)-scaled Gaussian spread. N = 0 gives pure baseline
/// noise with half the single-avalanche spread.
inline double synthesize_height(std::int64_t n_detected, const DetectorConfig& config,
                                RandomStream& stream) {
  if (n_detected < 0) throw std::invalid_argument("synthesize_height: n_detected must be >= 0");
  if (n_detected == 0) return stream.normal(0.0, 0.5 * config.sigma_single);
  const double n = static_cast<double>(n_detected);
  return stream.normal(n * config.gain_single, std::sqrt(n) * config.sigma_single);
}

/// Builds one waveform whose maximum sample equals a synthesize_height draw
/// exactly. The first sample sits at the baseline, the peak lands at the end
/// of the rise region, and the tail decays to ~2% of the peak by the end.
inline std::vector<TraceSample> synthesize_trace(std::int64_t n_detected, const PulseShape& shape,
                                                 const DetectorConfig& config, RandomStream& stream) {
  shape.validate();
  const double height = synthesize_height(n_detected, config, stream);
  const std::size_t n_samples =
      static_cast<std::size_t>(std::ceil(shape.duration_ns / shape.sample_period_ns)) + 1;
  const std::size_t peak_index = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(shape.rise_fraction * (n_samples - 1))));
  const double t_peak = static_cast<double>(peak_index) * shape.sample_period_ns;
  const double tau = (shape.duration_ns - t_peak) / 4.0;

  std::vector<TraceSample> trace(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double t = static_cast<double>(i) * shape.sample_period_ns;
    double envelope;
    if (i <= peak_index) {
      envelope = static_cast<double>(i) / static_cast<double>(peak_index);
    } else {
      envelope = std::exp(-(t - t_peak) / tau);
    }
    trace[i] = {t, height * envelope};
  }
  return trace;
}

/// Pulse height of a trace: maximum amplitude minus the baseline estimated
/// from the pre-pulse sample(s) at the start of the record.
inline double extract_height(std::span<const TraceSample> trace) {
  if (trace.empty()) throw std::invalid_argument("extract_height: empty trace");
  const double baseline = trace.front().amplitude;
  double peak = trace.front().amplitude;
  for (const auto& s : trace) peak = std::max(peak, s.amplitude);
  return peak - baseline;
}

/// Nearest-integer photon-number discrimination, clamped at zero.
inline std::int64_t discriminate_count(double height, double gain_estimate) {
  if (!(gain_estimate > 0.0)) {
    throw std::invalid_argument("discriminate_count: gain_estimate must be > 0");
  }
  const double n = std::round(height / gain_estimate);
  return n < 0.0 ? 0 : static_cast<std::int64_t>(n);
}

/// Bins pulse heights into an amplitude histogram with fixed-width bins.
inline PulseHeightSpectrum build_spectrum(std::span<const double> heights, double bin_width = 0.02) {
  if (heights.empty()) throw std::invalid_argument("build_spectrum: no heights");
  if (!(bin_width > 0.0)) throw std::invalid_argument("build_spectrum: bin_width must be > 0");
  const auto [lo_it, hi_it] = std::minmax_element(heights.begin(), heights.end());
  // Anchor edges on multiples of bin_width so equal data yields equal bins.
  const std::int64_t lo_idx = static_cast<std::int64_t>(std::floor(*lo_it / bin_width)) - 1;
  const std::int64_t hi_idx = static_cast<std::int64_t>(std::floor(*hi_it / bin_width)) + 2;
  const std::size_t n_bins = static_cast<std::size_t>(hi_idx - lo_idx);

  PulseHeightSpectrum spec;
  spec.bin_edges.resize(n_bins + 1);
  for (std::size_t i = 0; i <= n_bins; ++i) {
    spec.bin_edges[i] = static_cast<double>(lo_idx + static_cast<std::int64_t>(i)) * bin_width;
  }
  spec.counts.assign(n_bins, 0);
  for (double h : heights) {
    auto idx = static_cast<std::int64_t>(std::floor(h / bin_width)) - lo_idx;
    idx = std::clamp<std::int64_t>(idx, 0, static_cast<std::int64_t>(n_bins) - 1);
    ++spec.counts[static_cast<std::size_t>(idx)];
  }
  spec.total_shots = heights.size();
  return spec;
}

struct SpectrumPeak {
  std::size_t bin_index;
  double position;  ///< parabola-refined amplitude of the maximum
  double height;    ///< smoothed count at the maximum
};

/// Local maxima of the moving-average-smoothed spectrum. A bin is a peak if
/// it dominates every bin within `neighborhood_bins` and clears a floor of
/// max(min_count, min_count_fraction * total_shots) smoothed counts.
inline std::vector<SpectrumPeak> find_spectrum_peaks(const PulseHeightSpectrum& spectrum,
                                                     int smooth_window = 3,
                                                     int neighborhood_bins = 20,
                                                     double min_count = 2.0,
                                                     double min_count_fraction = 1e-4) {
  spectrum.validate();
  if (smooth_window < 1 || smooth_window % 2 == 0) {
    throw std::invalid_argument("find_spectrum_peaks: smooth_window must be odd and >= 1");
  }
  const std::size_t n = spectrum.counts.size();
  const int half = smooth_window / 2;
  std::vector<double> smoothed(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    int cnt = 0;
    for (int d = -half; d <= half; ++d) {
      const std::int64_t j = static_cast<std::int64_t>(i) + d;
      if (j >= 0 && j < static_cast<std::int64_t>(n)) {
        acc += static_cast<double>(spectrum.counts[static_cast<std::size_t>(j)]);
        ++cnt;
      }
    }
    smoothed[i] = acc / cnt;
  }

  const double floor_count =
      std::max(min_count, min_count_fraction * static_cast<double>(spectrum.total_shots));
  std::vector<SpectrumPeak> peaks;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = smoothed[i];
    if (y < floor_count) continue;
    bool is_max = true;
    for (int d = -neighborhood_bins; d <= neighborhood_bins && is_max; ++d) {
      if (d == 0) continue;
      const std::int64_t j = static_cast<std::int64_t>(i) + d;
      if (j < 0 || j >= static_cast<std::int64_t>(n)) continue;
      const double yj = smoothed[static_cast<std::size_t>(j)];
      // Ties resolve to the leftmost bin of a flat top.
      if (yj > y || (yj == y && d < 0)) is_max = false;
    }
    if (!is_max) continue;

    double position = spectrum.bin_center(i);
    if (i > 0 && i + 1 < n) {
      const double yl = smoothed[i - 1], yr = smoothed[i + 1];
      const double denom = yl - 2.0 * y + yr;
      if (denom < 0.0) {
        const double shift = 0.5 * (yl - yr) / denom;
        if (std::fabs(shift) <= 0.5) {
          position += shift * (spectrum.bin_edges[i + 1] - spectrum.bin_edges[i]);
        }
      }
    }
    peaks.push_back({i, position, y});
  }
  return peaks;
}

/// Single-avalanche gain estimated as the median spacing between consecutive
/// resolved peaks of the smoothed spectrum. Throws when fewer than two peaks
/// are resolvable; the caller must then supply a gain.
inline double estimate_gain(const PulseHeightSpectrum& spectrum) {
  const auto peaks = find_spectrum_peaks(spectrum);
  if (peaks.size() < 2) {
    throw std::runtime_error("estimate_gain: fewer than 2 resolvable peaks in spectrum");
  }
  std::vector<double> spacings(peaks.size() - 1);
  for (std::size_t i = 0; i + 1 < peaks.size(); ++i) {
    spacings[i] = peaks[i + 1].position - peaks[i].position;
  }
  std::sort(spacings.begin(), spacings.end());
  const std::size_t m = spacings.size();
  const double gain =
      (m % 2 == 1) ? spacings[m / 2] : 0.5 * (spacings[m / 2 - 1] + spacings[m / 2]);
  if (!(gain > 0.0)) throw std::runtime_error("estimate_gain: non-positive peak spacing");
  return gain;
}

}  // namespace pnrsim
