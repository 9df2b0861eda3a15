#pragma once

// Exact torus realization of the characteristic-function retrieval identities.
//
// A prefix is a weighted set of distinct points h_k on the integer torus
// {0..N-1}^d. Integrals over frequency space become sums over the complete
// DFT lattice theta = 2*pi*m/N with weight 1/N^d, where
//     sum_theta exp(i <theta, h_k - h_j>) = N^d [h_k == h_j]
// holds exactly. Readouts are therefore exact up to floating-point rounding.

#include <complex>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "seqcond/rng.hpp"

namespace seqcond::oracle {

using Complex = std::complex<double>;
using LatticePoint = std::vector<int>;

class LatticePrefix {
public:
    // Throws InputError unless tokens are distinct points of {0..N-1}^d and
    // weights are positive and sum to 1 within 1e-12.
    LatticePrefix(int dim, int modulus, std::vector<LatticePoint> tokens, std::vector<double> weights);

    static LatticePrefix uniform(int dim, int modulus, std::vector<LatticePoint> tokens);

    int dim() const { return dim_; }
    int modulus() const { return modulus_; }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<LatticePoint>& tokens() const { return tokens_; }
    const std::vector<double>& weights() const { return weights_; }

private:
    int dim_;
    int modulus_;
    std::vector<LatticePoint> tokens_;
    std::vector<double> weights_;
};

class FrequencyLattice {
public:
    FrequencyLattice(int dim, int modulus);

    int dim() const { return dim_; }
    int modulus() const { return modulus_; }
    std::size_t size() const { return count_; }
    double quadrature_weight() const { return 1.0 / static_cast<double>(count_); }

    // Integer frequency index m of lattice point p (mixed radix, last axis fastest).
    LatticePoint index(std::size_t p) const;
    // theta = 2*pi*m/N
    std::vector<double> point(std::size_t p) const;
    std::vector<std::vector<double>> points() const;

private:
    int dim_;
    int modulus_;
    std::size_t count_;
};

// phi(theta) = sum_k p_k exp(i <theta, h_k>)
Complex char_fn(const LatticePrefix& prefix, std::span<const double> theta);

// S(theta) = i sum_k p_k h_k exp(i <theta, h_k>), the gradient of char_fn.
std::vector<Complex> deriv_summary(const LatticePrefix& prefix, std::span<const double> theta);

// w_j(theta) = (i / p_j) exp(i <theta, h_j>); for a uniform prefix the
// constant is i*t. `j` is zero-based.
Complex retrieval_query(const LatticePrefix& prefix, std::size_t j, std::span<const double> theta);

using SpectralQuery = std::function<Complex(std::span<const double> theta)>;

// Summary and characteristic function tabulated on the full lattice. Phases
// are computed from exact integer residues <m, h> mod N.
class SpectralTable {
public:
    explicit SpectralTable(const LatticePrefix& prefix);

    const LatticePrefix& prefix() const { return prefix_; }
    const FrequencyLattice& lattice() const { return lattice_; }
    const std::vector<std::vector<double>>& thetas() const { return thetas_; }
    // row p: S(theta_p), length d
    std::span<const Complex> summary(std::size_t p) const;
    Complex char_value(std::size_t p) const { return phi_[p]; }
    // exp(i <theta_p, h_k>)
    Complex phase(std::size_t p, std::size_t k) const { return phases_[p * prefix_.size() + k]; }

private:
    LatticePrefix prefix_;
    FrequencyLattice lattice_;
    std::vector<std::vector<double>> thetas_;
    std::vector<Complex> roots_;
    std::vector<Complex> phases_;
    std::vector<Complex> summary_;
    std::vector<Complex> phi_;
};

// Hermitian readout (1/N^d) sum_theta S(theta) conj(w(theta)), one real value
// per embedding axis. Throws NumericalError if any imaginary residual
// exceeds 1e-6.
std::vector<double> exact_readout(const SpectralTable& table, const SpectralQuery& query);
std::vector<double> exact_readout(const LatticePrefix& prefix, const SpectralQuery& query);

// Same pairing applied to the scalar characteristic function; the result
// has a single component.
double scalar_readout(const SpectralTable& table, const SpectralQuery& query);

// Readout of the composite query sum_k alpha_k w_k, which equals
// sum_k alpha_k h_k.
std::vector<double> attention_composite(const SpectralTable& table, std::span<const double> alphas);
std::vector<double> attention_composite(const LatticePrefix& prefix, std::span<const double> alphas);

// ---- verification suites ----------------------------------------------------

struct CheckResult {
    std::string check_name;
    std::size_t instances = 0;
    double max_abs_error = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct OracleSuiteConfig {
    std::uint64_t seed = 0;
    std::size_t instances = 500;
    std::size_t attention_instances = 100;
    std::size_t gradient_instances = 100;
    int max_dim = 3;
    int max_modulus = 16;
    int max_tokens = 20;
    unsigned threads = 1;
    // Test-mode fault injection: scale the retrieval query constant by this
    // factor (1 = correct).
    double query_constant_scale = 1.0;
};

// Random prefix with distinct tokens; d, N, t drawn within the config bounds.
LatticePrefix random_prefix(Rng& rng, const OracleSuiteConfig& cfg, bool uniform_weights);

std::vector<CheckResult> run_oracle_suite(const OracleSuiteConfig& cfg);

}  // namespace seqcond::oracle
