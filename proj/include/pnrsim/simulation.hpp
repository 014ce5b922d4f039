#pragma once

#include <cstdint>
#include <stdexcept>
#include <thread>
#include <vector>

#include "pnrsim/detector.hpp"
#include "pnrsim/random.hpp"
#include "pnrsim/sampling.hpp"
#include "pnrsim/waveform.hpp"

namespace pnrsim {

/// Propagates one coherent pulse through the whole chain and synthesizes its
/// pulse height. Stages, in fixed draw order:
///   1. n_input ~ Poisson(mean_input)
///   2. optical survival: Binomial(n_input, eta_chain_optical)
///   3. waveguide noise photons ~ Poisson(uc_noise_photon_mean) join them
///   4. each arriving photon fires with qe_sipm and lands on a uniformly
///      random pixel; multiple hits on one pixel fire it once
///   5. SiPM-electronic dark primaries ~ Poisson(sipm_dark_primary_mean)
///      land the same way
///   6. every primary fired pixel spawns a geometric cross-talk cascade;
///      each secondary fires a uniformly random not-yet-fired pixel, and a
///      cascade truncates once every pixel is fired
///
/// Pixel identity never reaches the output, so steps 4-6 track only the
/// fired count: a photon dart hits an unfired pixel with probability
/// (N - fired)/N, and a cascade secondary always fires one more pixel while
/// any remain.
inline ShotRecord simulate_shot(const DetectorConfig& config, double mean_input,
                                RandomStream& stream) {
  config.validate();
  if (!(mean_input >= 0.0)) throw std::invalid_argument("simulate_shot: mean_input must be >= 0");

  const std::int64_t n_pixels = config.n_pixels;
  ShotRecord rec;
  rec.shot_id = static_cast<std::int64_t>(stream.stream_index());

  rec.n_input = sample_poisson(stream, mean_input);
  const std::int64_t n_signal = thin_binomial(stream, rec.n_input, config.eta_chain_optical);
  const std::int64_t n_uc_noise = sample_poisson(stream, config.uc_noise_photon_mean());
  rec.n_after_optics = n_signal + n_uc_noise;

  const std::int64_t n_photon_darts = thin_binomial(stream, rec.n_after_optics, config.qe_sipm);
  const std::int64_t n_dark_darts = sample_poisson(stream, config.sipm_dark_primary_mean());

  std::int64_t fired = 0;
  for (std::int64_t i = 0; i < n_photon_darts + n_dark_darts; ++i) {
    const double unfired_fraction =
        static_cast<double>(n_pixels - fired) / static_cast<double>(n_pixels);
    if (stream.uniform01() < unfired_fraction) ++fired;
  }
  rec.n_primary = fired;

  const CascadeParams cascade{config.crosstalk_p};
  for (std::int64_t i = 0; i < rec.n_primary; ++i) {
    const std::int64_t secondaries = sample_cascade_total(stream, cascade) - 1;
    fired += std::min(secondaries, n_pixels - fired);
  }
  rec.n_detected = fired;

  rec.pulse_height = synthesize_height(rec.n_detected, config, stream);
  return rec;
}

/// Simulates shots [first_shot, first_shot + count) of a run. Shot j always
/// draws from RandomStream(master_seed, j), so any partitioning of a run into
/// blocks or threads yields bit-identical records.
inline std::vector<ShotRecord> simulate_block(const DetectorConfig& config, double mean_input,
                                              std::uint64_t master_seed, std::int64_t first_shot,
                                              std::int64_t count, unsigned n_threads = 1) {
  config.validate();
  if (first_shot < 0 || count < 0) {
    throw std::invalid_argument("simulate_block: shot range must be non-negative");
  }
  if (n_threads == 0) n_threads = std::max(1u, std::thread::hardware_concurrency());

  std::vector<ShotRecord> records(static_cast<std::size_t>(count));
  auto worker = [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t j = begin; j < end; ++j) {
      RandomStream stream(master_seed, static_cast<std::uint64_t>(first_shot + j));
      records[static_cast<std::size_t>(j)] = simulate_shot(config, mean_input, stream);
    }
  };

  if (n_threads <= 1 || count < 1024) {
    worker(0, count);
    return records;
  }
  const std::int64_t chunk = (count + n_threads - 1) / n_threads;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < n_threads; ++t) {
    const std::int64_t begin = static_cast<std::int64_t>(t) * chunk;
    const std::int64_t end = std::min(count, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back(worker, begin, end);
  }
  for (auto& th : pool) th.join();
  return records;
}

/// Runs n_shots independent shots with sequential shot ids. Reproducible from
/// master_seed alone; n_threads only changes wall time, never output.
inline std::vector<ShotRecord> simulate_run(const DetectorConfig& config, double mean_input,
                                            std::int64_t n_shots, std::uint64_t master_seed,
                                            unsigned n_threads = 1) {
  if (n_shots < 1) throw std::invalid_argument("simulate_run: n_shots must be >= 1");
  return simulate_block(config, mean_input, master_seed, 0, n_shots, n_threads);
}

}  // namespace pnrsim
