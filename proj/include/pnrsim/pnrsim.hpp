#pragma once

// Umbrella header for the up-conversion + multi-pixel APD photon-number-
// resolving detector simulator and its calibration toolkit.

#include "pnrsim/random.hpp"
#include "pnrsim/sampling.hpp"
#include "pnrsim/detector.hpp"
#include "pnrsim/waveform.hpp"
#include "pnrsim/simulation.hpp"
#include "pnrsim/statistics.hpp"
#include "pnrsim/experiment.hpp"
