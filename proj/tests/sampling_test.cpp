#include "pnrsim/sampling.hpp"

#include <cmath>
#include <map>
#include <vector>

#include "gtest/gtest.h"
#include "oracles.hpp"

using namespace pnrsim;

namespace {

constexpr std::uint64_t kSeed = 0x5eed0001ULL;

std::vector<double> draw_poisson(double mean, int n, std::uint64_t seed) {
  std::vector<double> xs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    RandomStream stream(seed, static_cast<std::uint64_t>(i));
    xs[static_cast<std::size_t>(i)] = static_cast<double>(sample_poisson(stream, mean));
  }
  return xs;
}

}  // namespace

TEST(RandomStream, SameSeedAndIndexReproducesBitExactly) {
  RandomStream a(kSeed, 7);
  RandomStream b(kSeed, 7);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(RandomStream, InterleavingDoesNotChangeStreams) {
  RandomStream a1(kSeed, 5), b1(kSeed, 9);
  std::vector<std::uint64_t> a_mixed, b_mixed;
  for (int i = 0; i < 500; ++i) {
    a_mixed.push_back(a1.next_u64());
    b_mixed.push_back(b1.next_u64());
  }
  RandomStream a2(kSeed, 5), b2(kSeed, 9);
  for (int i = 0; i < 500; ++i) ASSERT_EQ(a_mixed[static_cast<std::size_t>(i)], a2.next_u64());
  for (int i = 0; i < 500; ++i) ASSERT_EQ(b_mixed[static_cast<std::size_t>(i)], b2.next_u64());
}

TEST(RandomStream, DistinctIndicesDiffer) {
  RandomStream a(kSeed, 0), b(kSeed, 1);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += a.next_u64() == b.next_u64();
  EXPECT_EQ(same, 0);
}

TEST(SamplePoisson, ZeroMeanIsAlwaysZero) {
  RandomStream stream(kSeed, 0);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_poisson(stream, 0.0), 0);
}

TEST(SamplePoisson, RejectsBadMean) {
  RandomStream stream(kSeed, 0);
  EXPECT_THROW(sample_poisson(stream, -1.0), std::invalid_argument);
  EXPECT_THROW(sample_poisson(stream, std::numeric_limits<double>::infinity()),
               std::invalid_argument);
  EXPECT_THROW(sample_poisson(stream, std::numeric_limits<double>::quiet_NaN()),
               std::invalid_argument);
}

TEST(SamplePoisson, MomentsAtMeanFive) {
  const auto xs = draw_poisson(5.0, 100000, kSeed);
  EXPECT_NEAR(oracle::mean_of(xs), 5.0, 0.05);
  EXPECT_NEAR(oracle::unbiased_variance_of(xs), 5.0, 0.15);
}

TEST(SamplePoisson, MeanAt148) {
  const auto xs = draw_poisson(148.0, 10000, kSeed + 1);
  EXPECT_NEAR(oracle::mean_of(xs), 148.0, 0.4);
}

// The Knuth and PTRS branches must both reproduce the Poisson pmf, including
// around the mean-10 hand-off.
TEST(SamplePoisson, PmfMatchesOracleAcrossSamplerBranches) {
  for (const double mean : {2.5, 9.5, 10.5, 30.0}) {
    std::map<int, std::uint64_t> tally;
    const int n = 300000;
    for (int i = 0; i < n; ++i) {
      RandomStream stream(kSeed + 2, static_cast<std::uint64_t>(i));
      ++tally[static_cast<int>(sample_poisson(stream, mean))];
    }
    const auto pmf = oracle::poisson_pmf(mean, static_cast<int>(mean) + 60);
    EXPECT_LT(oracle::total_variation(tally, n, pmf), 0.008) << "mean = " << mean;
  }
}

TEST(ThinBinomial, LosslessAndOpaqueEdges) {
  RandomStream stream(kSeed, 3);
  for (std::int64_t k : {0, 1, 7, 1000}) {
    EXPECT_EQ(thin_binomial(stream, k, 1.0), k);
    EXPECT_EQ(thin_binomial(stream, k, 0.0), 0);
  }
  EXPECT_LE(thin_binomial(stream, 50, 0.7), 50);
}

TEST(ThinBinomial, RejectsBadSurvival) {
  RandomStream stream(kSeed, 3);
  EXPECT_THROW(thin_binomial(stream, 5, -0.1), std::invalid_argument);
  EXPECT_THROW(thin_binomial(stream, 5, 1.1), std::invalid_argument);
  EXPECT_THROW(thin_binomial(stream, -1, 0.5), std::invalid_argument);
}

// Composing Poisson(100) with 11% survival is Poisson(11) by thinning.
TEST(ThinBinomial, PoissonCompositionKeepsPoissonStatistics) {
  const int n = 100000;
  std::vector<double> xs(n);
  for (int i = 0; i < n; ++i) {
    RandomStream stream(kSeed + 3, static_cast<std::uint64_t>(i));
    const auto photons = sample_poisson(stream, 100.0);
    xs[static_cast<std::size_t>(i)] = static_cast<double>(thin_binomial(stream, photons, 0.11));
  }
  const double mean = oracle::mean_of(xs);
  const double var = oracle::unbiased_variance_of(xs);
  EXPECT_NEAR(mean, 11.0, 0.1);
  EXPECT_NEAR(var / mean, 1.0, 0.02);
}

// The convolution oracle itself must agree with the thinning theorem at the
// small means where we can enumerate it.
TEST(ThinBinomial, ConvolutionOracleMatchesThinningTheorem) {
  for (const auto& [mean, survival] : std::vector<std::pair<double, double>>{
           {3.0, 0.5}, {5.0, 0.11}, {1.0, 0.9}}) {
    const auto conv = oracle::thinned_poisson_pmf(mean, survival, 30);
    const auto direct = oracle::poisson_pmf(mean * survival, 30);
    for (int k = 0; k <= 30; ++k) {
      ASSERT_NEAR(conv[static_cast<std::size_t>(k)], direct[static_cast<std::size_t>(k)], 1e-12);
    }
  }
}

TEST(ThinBinomial, EmpiricalPmfMatchesConvolutionOracle) {
  const double mean = 4.0, survival = 0.3;
  std::map<int, std::uint64_t> tally;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    RandomStream stream(kSeed + 4, static_cast<std::uint64_t>(i));
    const auto photons = sample_poisson(stream, mean);
    ++tally[static_cast<int>(thin_binomial(stream, photons, survival))];
  }
  EXPECT_LT(oracle::total_variation(tally, n, oracle::thinned_poisson_pmf(mean, survival, 30)),
            0.008);
}

// Thinning closure property: mean m*s and Fano 1 within 3 standard errors
// over the full (mean, survival) grid.
TEST(ThinBinomial, ClosureGrid) {
  const int n = 100000;
  for (const double m : {0.5, 2.0, 10.0}) {
    for (const double s : {0.1, 0.5, 0.9}) {
      std::vector<double> xs(n);
      for (int i = 0; i < n; ++i) {
        RandomStream stream(kSeed + 5, static_cast<std::uint64_t>(i));
        xs[static_cast<std::size_t>(i)] =
            static_cast<double>(thin_binomial(stream, sample_poisson(stream, m), s));
      }
      const double ms = m * s;
      const double mean = oracle::mean_of(xs);
      const double var = oracle::unbiased_variance_of(xs);
      const double se_mean = std::sqrt(ms / n);
      // Var(sample variance) of Poisson(ms) is (ms + 2 ms^2)/n; the Fano
      // ratio inherits it scaled by 1/ms.
      const double se_fano = std::sqrt((ms + 2.0 * ms * ms) / n) / ms;
      EXPECT_NEAR(mean, ms, 3.0 * se_mean) << "m=" << m << " s=" << s;
      EXPECT_NEAR(var / mean, 1.0, 3.0 * se_fano + 0.01) << "m=" << m << " s=" << s;
    }
  }
}

TEST(SampleCascadeTotal, NoCrossTalkIsAlwaysOne) {
  RandomStream stream(kSeed, 11);
  const CascadeParams params{0.0};
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_cascade_total(stream, params), 1);
}

TEST(SampleCascadeTotal, RejectsBadProbability) {
  RandomStream stream(kSeed, 11);
  EXPECT_THROW(sample_cascade_total(stream, CascadeParams{1.0}), std::invalid_argument);
  EXPECT_THROW(sample_cascade_total(stream, CascadeParams{-0.1}), std::invalid_argument);
  EXPECT_THROW(CascadeParams(1.2), std::invalid_argument);
}

TEST(SampleCascadeTotal, MeanAtReferenceCrossTalk) {
  RandomStream stream(kSeed, 12);
  const CascadeParams params{0.314};
  const int n = 1000000;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += static_cast<double>(sample_cascade_total(stream, params));
  // 1/(1 - 0.314) = 1.45773...
  EXPECT_NEAR(acc / n, 1.0 / 0.686, 0.003);
}

TEST(SampleCascadeTotal, GeometricPmfAtHalf) {
  RandomStream stream(kSeed, 13);
  const CascadeParams params{0.5};
  const int n = 1000000;
  std::map<int, std::uint64_t> tally;
  for (int i = 0; i < n; ++i) ++tally[static_cast<int>(sample_cascade_total(stream, params))];
  EXPECT_NEAR(static_cast<double>(tally[1]) / n, 0.5, 0.005);
  EXPECT_NEAR(static_cast<double>(tally[2]) / n, 0.25, 0.005);
  EXPECT_NEAR(static_cast<double>(tally[3]) / n, 0.125, 0.005);
  EXPECT_EQ(tally.count(0), 0u);
}

TEST(CascadeParams, PPrimeAccessor) {
  EXPECT_DOUBLE_EQ(CascadeParams{0.0}.p_prime(), 0.0);
  EXPECT_NEAR(CascadeParams{0.314}.p_prime(), 0.45772594752186595, 1e-15);
}

TEST(CompoundPoissonMoments, ClosedFormValues) {
  const auto pure = compound_poisson_moments(3.7, CascadeParams{0.0});
  EXPECT_DOUBLE_EQ(pure.mean, 3.7);
  EXPECT_DOUBLE_EQ(pure.variance, 3.7);

  // Independent evaluation: 1/0.686 and 1.314/0.686^2.
  const auto m = compound_poisson_moments(1.0, CascadeParams{0.314});
  EXPECT_NEAR(m.mean, 1.4577259475218659, 1e-12);
  EXPECT_NEAR(m.variance, 2.7922039286351775, 1e-12);

  // Fano factor (1+p)/(1-p) is independent of lambda.
  for (const double lambda : {0.3, 1.0, 8.0}) {
    const auto mm = compound_poisson_moments(lambda, CascadeParams{0.314});
    EXPECT_NEAR(mm.variance / mm.mean, 1.9155, 1e-4);
  }
  EXPECT_THROW(compound_poisson_moments(-1.0, CascadeParams{0.2}), std::invalid_argument);
}

// Monte-Carlo cascade sums over Poisson primaries must match the closed-form
// moments within 3 standard errors for every p in the grid.
TEST(CompoundPoissonMoments, MatchesMonteCarloCascades) {
  const double lambda = 2.0;
  const int n = 100000;
  for (const double p : {0.0, 0.1, 0.314, 0.5}) {
    const CascadeParams params{p};
    std::vector<double> xs(n);
    for (int i = 0; i < n; ++i) {
      RandomStream stream(kSeed + 6, static_cast<std::uint64_t>(i));
      const auto primaries = sample_poisson(stream, lambda);
      std::int64_t total = 0;
      for (std::int64_t j = 0; j < primaries; ++j) total += sample_cascade_total(stream, params);
      xs[static_cast<std::size_t>(i)] = static_cast<double>(total);
    }
    const auto expect = compound_poisson_moments(lambda, params);
    const double q = 1.0 - p;
    // Cumulants of the compound distribution: kappa_r = lambda E[G^r].
    const double eg2 = (1.0 + p) / (q * q);
    const double eg4 = (1.0 + 11.0 * p + 11.0 * p * p + p * p * p) / (q * q * q * q);
    const double kappa2 = lambda * eg2;
    const double kappa4 = lambda * eg4;
    const double se_mean = std::sqrt(expect.variance / n);
    const double se_var = std::sqrt((kappa4 + 2.0 * kappa2 * kappa2) / n);
    EXPECT_NEAR(oracle::mean_of(xs), expect.mean, 3.0 * se_mean) << "p = " << p;
    EXPECT_NEAR(oracle::unbiased_variance_of(xs), expect.variance, 3.0 * se_var) << "p = " << p;
  }
}

// Full pmf of the compound distribution against the convolution oracle.
TEST(CompoundPoisson, PmfMatchesConvolutionOracle) {
  const double lambda = 2.0, p = 0.4;
  const int n = 300000;
  std::map<int, std::uint64_t> tally;
  for (int i = 0; i < n; ++i) {
    RandomStream stream(kSeed + 7, static_cast<std::uint64_t>(i));
    const auto primaries = sample_poisson(stream, lambda);
    std::int64_t total = 0;
    for (std::int64_t j = 0; j < primaries; ++j) {
      total += sample_cascade_total(stream, CascadeParams{p});
    }
    ++tally[static_cast<int>(total)];
  }
  EXPECT_LT(oracle::total_variation(tally, n, oracle::compound_poisson_pmf(lambda, p)), 0.008);
}

TEST(Sampling, DeterministicAcrossRuns) {
  std::vector<std::int64_t> first;
  for (int i = 0; i < 50; ++i) {
    RandomStream stream(kSeed + 8, static_cast<std::uint64_t>(i));
    first.push_back(sample_poisson(stream, 12.5));
    first.push_back(thin_binomial(stream, 100, 0.3));
    first.push_back(sample_cascade_total(stream, CascadeParams{0.314}));
  }
  std::vector<std::int64_t> second;
  for (int i = 0; i < 50; ++i) {
    RandomStream stream(kSeed + 8, static_cast<std::uint64_t>(i));
    second.push_back(sample_poisson(stream, 12.5));
    second.push_back(thin_binomial(stream, 100, 0.3));
    second.push_back(sample_cascade_total(stream, CascadeParams{0.314}));
  }
  EXPECT_EQ(first, second);
}
