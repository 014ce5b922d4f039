#include "pnrsim/waveform.hpp"

#include <cmath>
#include <vector>

#include "gtest/gtest.h"
#include "oracles.hpp"
#include "pnrsim/simulation.hpp"

using namespace pnrsim;

namespace {

constexpr std::uint64_t kSeed = 0x5eed0003ULL;

double gaussian_tail(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

std::vector<double> draw_heights(int n_detected, int n, std::uint64_t seed) {
  const DetectorConfig cfg;
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    RandomStream stream(seed, static_cast<std::uint64_t>(i));
    out[static_cast<std::size_t>(i)] = synthesize_height(n_detected, cfg, stream);
  }
  return out;
}

}  // namespace

TEST(SynthesizeHeight, ZeroPixelsZeroNoise) {
  DetectorConfig cfg;
  cfg.sigma_single = 0.0;
  RandomStream stream(kSeed, 0);
  EXPECT_EQ(synthesize_height(0, cfg, stream), 0.0);
  EXPECT_THROW(synthesize_height(-1, cfg, stream), std::invalid_argument);
}

TEST(SynthesizeHeight, MomentsAtFourAvalanches) {
  const auto xs = draw_heights(4, 100000, kSeed + 1);
  const double mean = oracle::mean_of(xs);
  const double sd = std::sqrt(oracle::unbiased_variance_of(xs));
  EXPECT_NEAR(mean, 4.0, 3.0 * 0.14 / std::sqrt(100000.0));
  EXPECT_NEAR(sd, 0.14, 3.0 * 0.14 / std::sqrt(2.0 * 100000.0));
}

// Height linearity: mean N*gain and spread sqrt(N)*sigma across the N grid.
TEST(SynthesizeHeight, SqrtNBroadening) {
  for (const int n_det : {1, 4, 9, 16}) {
    const int n = 50000;
    const auto xs = draw_heights(n_det, n, kSeed + 2 + static_cast<std::uint64_t>(n_det));
    const double expect_sd = std::sqrt(static_cast<double>(n_det)) * 0.07;
    EXPECT_NEAR(oracle::mean_of(xs), static_cast<double>(n_det),
                3.0 * expect_sd / std::sqrt(static_cast<double>(n)))
        << "N = " << n_det;
    EXPECT_NEAR(std::sqrt(oracle::unbiased_variance_of(xs)), expect_sd,
                3.0 * expect_sd / std::sqrt(2.0 * n))
        << "N = " << n_det;
  }
}

// The 10 <-> 11 peak overlap: ~1.4% misclassification per boundary, from the
// Gaussian tail at half a gain unit.
TEST(SynthesizeHeight, BoundaryMisclassificationNearTenMatchesGaussianTail) {
  const double theory_mid = gaussian_tail(0.5 / (std::sqrt(10.5) * 0.07));
  EXPECT_NEAR(theory_mid, 0.0137, 6e-4);

  const int n = 100000;
  const auto at10 = draw_heights(10, n, kSeed + 7);
  const auto at11 = draw_heights(11, n, kSeed + 8);
  int miss = 0;
  for (double h : at10) miss += h > 10.5;
  for (double h : at11) miss += h < 10.5;
  const double rate = static_cast<double>(miss) / (2.0 * n);
  const double se = std::sqrt(theory_mid * (1.0 - theory_mid) / (2.0 * n));
  EXPECT_NEAR(rate, 0.013791286880378839, 3.0 * se);  // averaged one-sided tails
}

TEST(SynthesizeTrace, MaximumEqualsTheHeightDraw) {
  const DetectorConfig cfg;
  const PulseShape shape;
  RandomStream s1(kSeed + 9, 0);
  const auto trace = synthesize_trace(4, shape, cfg, s1);
  RandomStream s2(kSeed + 9, 0);
  const double height = synthesize_height(4, cfg, s2);

  ASSERT_EQ(trace.size(), static_cast<std::size_t>(std::ceil(50.0 / 2.0)) + 1);
  double peak = trace.front().amplitude;
  double t_peak = trace.front().t_ns;
  for (const auto& s : trace) {
    if (s.amplitude > peak) {
      peak = s.amplitude;
      t_peak = s.t_ns;
    }
  }
  EXPECT_EQ(peak, height);
  EXPECT_LE(t_peak, shape.rise_fraction * shape.duration_ns + shape.sample_period_ns);
  EXPECT_EQ(trace.front().amplitude, 0.0);
}

TEST(SynthesizeTrace, ZeroWithoutNoiseIsFlat) {
  DetectorConfig cfg;
  cfg.sigma_single = 0.0;
  RandomStream stream(kSeed + 10, 0);
  const auto trace = synthesize_trace(0, PulseShape{}, cfg, stream);
  for (const auto& s : trace) ASSERT_EQ(s.amplitude, 0.0);

  PulseShape bad;
  bad.sample_period_ns = 60.0;
  EXPECT_THROW(synthesize_trace(1, bad, cfg, stream), std::invalid_argument);
}

TEST(ExtractHeight, RoundTripBaselineAndEdgeCases) {
  DetectorConfig cfg;
  cfg.sigma_single = 0.0;
  const PulseShape shape;
  RandomStream stream(kSeed + 11, 0);
  auto trace = synthesize_trace(6, shape, cfg, stream);
  EXPECT_NEAR(extract_height(trace), 6.0, 1e-9);

  for (auto& s : trace) s.amplitude += 2.5;  // baseline offset leaves the height alone
  EXPECT_NEAR(extract_height(trace), 6.0, 1e-9);

  const std::vector<TraceSample> flat(10, TraceSample{0.0, 0.0});
  EXPECT_EQ(extract_height(flat), 0.0);
  EXPECT_THROW(extract_height(std::span<const TraceSample>{}), std::invalid_argument);
}

TEST(DiscriminateCount, RoundingAndClamping) {
  EXPECT_EQ(discriminate_count(0.02, 1.0), 0);
  EXPECT_EQ(discriminate_count(4.96, 1.0), 5);
  EXPECT_EQ(discriminate_count(-0.7, 1.0), 0);
  EXPECT_EQ(discriminate_count(10.2, 2.0), 5);
  EXPECT_THROW(discriminate_count(1.0, 0.0), std::invalid_argument);
  EXPECT_THROW(discriminate_count(1.0, -1.0), std::invalid_argument);
}

// Trace -> height -> count round trip at fixed N (comfortably inside the
// >99% regime for N <= 7 at the default spread).
TEST(RoundTrip, PerCountAccuracy) {
  const DetectorConfig cfg;
  const PulseShape shape;
  for (const int n_det : {1, 4, 7}) {
    const int n = 20000;
    int hits = 0;
    for (int i = 0; i < n; ++i) {
      RandomStream stream(kSeed + 12, static_cast<std::uint64_t>(i));
      const auto trace = synthesize_trace(n_det, shape, cfg, stream);
      hits += discriminate_count(extract_height(trace), cfg.gain_single) == n_det;
    }
    EXPECT_GE(static_cast<double>(hits) / n, 0.99) << "N = " << n_det;
  }
}

// End-to-end at <n_det> = 5: discriminated counts match the true fired-pixel
// count in more than 99% of shots.
TEST(RoundTrip, EndToEndAtMeanFive) {
  const DetectorConfig cfg;
  const double mean_input = 5.0 / cfg.total_efficiency();
  const auto records = simulate_run(cfg, mean_input, 30000, kSeed + 13);
  int hits = 0;
  for (const auto& rec : records) {
    hits += discriminate_count(rec.pulse_height, cfg.gain_single) == rec.n_detected;
  }
  EXPECT_GT(static_cast<double>(hits) / static_cast<double>(records.size()), 0.99);
}

TEST(BuildSpectrum, CountsAndDeterminism) {
  const std::vector<double> heights = {0.01, 0.02, 1.01, 0.99, 2.0, -0.03};
  const auto spec = build_spectrum(heights, 0.02);
  spec.validate();
  EXPECT_EQ(spec.total_shots, heights.size());
  const auto again = build_spectrum(heights, 0.02);
  EXPECT_EQ(spec.bin_edges, again.bin_edges);
  EXPECT_EQ(spec.counts, again.counts);
  EXPECT_THROW(build_spectrum({}, 0.02), std::invalid_argument);
  EXPECT_THROW(build_spectrum(heights, 0.0), std::invalid_argument);
}

TEST(FindSpectrumPeaks, ResolvesIntegerPeaksAtMeanFive) {
  const DetectorConfig cfg;
  const double mean_input = 5.0 / cfg.total_efficiency();
  const auto records = simulate_run(cfg, mean_input, 100000, kSeed + 14);
  std::vector<double> heights;
  heights.reserve(records.size());
  for (const auto& rec : records) heights.push_back(rec.pulse_height);

  const auto all_peaks = find_spectrum_peaks(build_spectrum(heights, 0.02));
  // Judge positions only where the peaks carry real statistics.
  std::vector<SpectrumPeak> peaks;
  for (const auto& peak : all_peaks) {
    if (peak.height >= 50.0) peaks.push_back(peak);
  }
  ASSERT_GE(peaks.size(), 5u);
  for (const auto& peak : peaks) {
    EXPECT_NEAR(peak.position, std::round(peak.position), 0.2);
  }
  // Consecutive peaks sit one gain unit apart.
  for (std::size_t i = 0; i + 1 < peaks.size(); ++i) {
    EXPECT_NEAR(peaks[i + 1].position - peaks[i].position, 1.0, 0.25);
  }
}

TEST(EstimateGain, RecoversTheConfiguredGain) {
  const DetectorConfig cfg;
  const double mean_input = 0.6 / cfg.total_efficiency();
  const auto records = simulate_run(cfg, mean_input, 100000, kSeed + 15);
  std::vector<double> heights;
  heights.reserve(records.size());
  for (const auto& rec : records) heights.push_back(rec.pulse_height);

  const double gain = estimate_gain(build_spectrum(heights, 0.02));
  EXPECT_NEAR(gain, cfg.gain_single, 0.02 * cfg.gain_single);

  // Homogeneity: scaling the amplitude axis scales the estimate.
  std::vector<double> scaled = heights;
  for (auto& h : scaled) h *= 2.5;
  const double gain_scaled = estimate_gain(build_spectrum(scaled, 0.05));
  EXPECT_NEAR(gain_scaled, 2.5 * gain, 1e-6 * gain_scaled + 1e-9);
}

TEST(EstimateGain, SinglePeakIsAnError) {
  std::vector<double> heights;
  RandomStream stream(kSeed + 16, 0);
  for (int i = 0; i < 5000; ++i) heights.push_back(stream.normal(0.0, 0.03));
  EXPECT_THROW(estimate_gain(build_spectrum(heights, 0.02)), std::runtime_error);
}
