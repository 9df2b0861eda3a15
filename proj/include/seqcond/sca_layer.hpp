#pragma once

// SeqCond Attention layer.
//
// Forward pass per position t (memory heads K, query heads K', head dim H,
// spectral samples M):
//   1. u = W_in x, z = SiLU(causal depthwise conv(u)); z splits into keys k
//      [K,H], scores s [K] and spectral query coordinates q_re, q_im [K',H,M].
//   2. alpha = softplus(gamma*s + beta) * exp(-lambda * d(t)), d(t) = L-1-t.
//   3. phi = softsign(eta*k) * theta; r + i*i = alpha * k * exp(i*phi).
//   4. R, I, Z are prefix sums of r, i, alpha; R_hat = R/Z, I_hat = I/Z.
//   5. o_re = sum_m omega (R_hat q_re + I_hat q_im) / sqrt(H),
//      o_im = sum_m omega (I_hat q_re - R_hat q_im) / sqrt(H).
//   6. y = W_out SwiGLU_per_head(W_read GatedRMSNorm([o_re; o_im], W_gate x)).
//
// Streaming decode keeps (R, I, Z) and multiplies them by exp(-lambda) before
// adding each new contribution. After normalization by Z this equals the
// boundary-anchored parallel form, because a common factor on every alpha
// cancels in R/Z.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "seqcond/autograd.hpp"
#include "seqcond/rng.hpp"
#include "seqcond/tensor.hpp"

namespace seqcond {

struct SCAConfig {
    std::size_t model_dim = 32;        // D
    std::size_t mem_heads = 4;         // K
    std::size_t query_heads = 4;       // K'
    std::size_t head_dim = 8;          // H
    std::size_t spectral_samples = 2;  // M
    std::size_t conv_kernel = 4;       // c
    // When non-zero, the concatenated readout width 2*K'*H must equal
    // expand_factor * D.
    std::size_t expand_factor = 0;
    std::size_t swiglu_expansion = 3;  // per-head SwiGLU hidden = swiglu_expansion * H
    std::size_t seq_len_max = 256;
    Precision precision = Precision::kDouble;

    // initialization
    double init_decay = 0.99;  // exp(-lambda) at step 0
    double theta_min = 0.1;
    double theta_max = 3.141592653589793;

    void validate() const;

    std::size_t key_width() const { return mem_heads * head_dim; }
    std::size_t memory_width() const { return key_width() + mem_heads; }
    std::size_t query_width() const { return query_heads * head_dim * spectral_samples * 2; }
    std::size_t in_width() const { return memory_width() + query_width(); }
    std::size_t readout_width() const { return query_heads * 2 * head_dim; }
    std::size_t swiglu_hidden() const { return swiglu_expansion * head_dim; }
    // query head j reads memory head floor(j*K/K')
    std::size_t memory_head_for(std::size_t j) const { return j * mem_heads / query_heads; }

    std::size_t parameter_count() const;
};

template <class T>
struct SpectralGrid {
    Param<T> theta;  // [K, H, M]
    Param<T> omega;  // [K', H, M]
};

template <class T>
struct SCAParams {
    Param<T> w_in;        // [in_width, D]
    Param<T> conv;        // [in_width, c]
    Param<T> w_gate;      // [2K'H, D]
    Param<T> norm_scale;  // [2K'H]
    Param<T> w_read;      // [K', 2F, 2H], F = swiglu_hidden
    Param<T> w_out;       // [D, K'F]
    Param<T> gamma;       // [K]
    Param<T> beta;        // [K]
    Param<T> decay;       // [K], lambda = softplus(decay)
    Param<T> eta;         // [K]
};

template <class T>
struct SCAState {
    // accumulators are double for every element type
    Tensor<double> R;     // [K, H, M]
    Tensor<double> I;     // [K, H, M]
    Tensor<double> Z;     // [K]
    std::size_t t = 0;
    Tensor<T> conv_tail;  // [c-1, in_width], last projected inputs, oldest first

    std::size_t bytes() const {
        return (R.size() + I.size() + Z.size()) * sizeof(double) + conv_tail.size() * sizeof(T);
    }
};

template <class T>
struct SCAGradients {
    Tensor<T> dx;
    std::map<std::string, Tensor<T>> params;
};

template <class T>
class SCALayer {
public:
    struct Projections {
        Var<T> u;  // W_in x, before the convolution [L, in_width]
        Var<T> k;  // [L, K, H]
        Var<T> s;  // [L, K]
        Var<T> q_re, q_im;  // [L, K', H, M]
    };
    struct Complex {
        Var<T> re, im;
    };

    SCALayer(const SCAConfig& cfg, Rng& rng, const std::string& name = "sca");

    const SCAConfig& config() const { return cfg_; }
    SCAParams<T>& params() { return params_; }
    SpectralGrid<T>& grid() { return grid_; }
    const SCAParams<T>& params() const { return params_; }
    const SpectralGrid<T>& grid() const { return grid_; }
    std::vector<Param<T>*> parameters();

    // lambda_k = softplus(decay_k)
    std::vector<T> decay_rates() const;

    // ---- graph-level steps ----
    Projections project_and_mix(Var<T> x, const Tensor<T>* conv_history = nullptr);
    // distance [L, 1] holds d(t) for each row.
    Var<T> contribution_weights(Var<T> s, const Tensor<T>& distance);
    Complex encode_complex(Var<T> k, Var<T> alpha);
    Complex scan_accumulate(Var<T> r, Var<T> i, Var<T> alpha, ScanBackend backend = ScanBackend::kCumsum);
    Complex spectral_readout(Var<T> r_hat, Var<T> i_hat, Var<T> q_re, Var<T> q_im);
    Var<T> fuse_output(Var<T> o_re, Var<T> o_im, Var<T> x);
    Var<T> forward(Var<T> x, ScanBackend backend = ScanBackend::kCumsum);

    // d(t) = L-1-t as an [L, 1] tensor
    static Tensor<T> boundary_distances(std::size_t L);

    // ---- tensor-level entry points ----
    Tensor<T> forward_parallel(const Tensor<T>& x, ScanBackend backend = ScanBackend::kCumsum);
    SCAState<T> initial_state() const;
    // One decode step for x_t [D]; returns y_t [D] and advances the state.
    Tensor<T> step_streaming(const Tensor<T>& x_t, SCAState<T>& state);
    SCAGradients<T> backward(const Tensor<T>& x, const Tensor<T>& dy, ScanBackend backend = ScanBackend::kCumsum);

private:
    SCAConfig cfg_;
    SCAParams<T> params_;
    SpectralGrid<T> grid_;
};

extern template class SCALayer<float>;
extern template class SCALayer<double>;

}  // namespace seqcond
