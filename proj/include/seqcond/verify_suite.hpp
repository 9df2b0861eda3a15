#pragma once

// Layer-level verification: scan vs streaming equivalence, alpha rescaling,
// constant decode state, and finite-difference gradients.

#include <cstdint>
#include <vector>

#include "seqcond/sca_layer.hpp"
#include "seqcond/spectral_oracle.hpp"

namespace seqcond {

struct VerifySuiteConfig {
    std::uint64_t seed = 0;
    std::size_t configs = 50;
    std::size_t max_len = 256;
    Precision precision = Precision::kDouble;
    std::size_t gradcheck_layers = 3;
    std::size_t gradcheck_len = 6;
    std::size_t model_gradcheck_entries = 24;
    std::size_t rescale_instances = 20;
};

// Random small SCA configuration (D, K, K', H, M, c drawn from small ranges).
SCAConfig random_sca_config(Rng& rng);

// Moves every parameter off its initialization; decay raw values are drawn
// from [decay_lo, decay_hi].
template <class T>
void perturb_sca(SCALayer<T>& layer, Rng& rng, double decay_lo = -3.0, double decay_hi = -1.0);

double streaming_tolerance(Precision p);

std::vector<oracle::CheckResult> run_verify_suite(const VerifySuiteConfig& cfg);

}  // namespace seqcond
