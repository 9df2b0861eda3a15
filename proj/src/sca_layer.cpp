#include "seqcond/sca_layer.hpp"

#include <cmath>

#include "seqcond/errors.hpp"

namespace seqcond {

void SCAConfig::validate() const {
    if (!model_dim || !mem_heads || !query_heads || !head_dim || !spectral_samples || !conv_kernel ||
        !swiglu_expansion || !seq_len_max)
        throw InputError("SCA config: all dimensions must be positive");
    if (mem_heads % query_heads != 0 && query_heads % mem_heads != 0)
        throw InputError("SCA config: memory heads and query heads must divide one another");
    if (spectral_samples > 8) throw InputError("SCA config: spectral_samples must be <= 8");
    if (mem_heads > 32 || query_heads > 32) throw InputError("SCA config: head counts must be <= 32");
    if (expand_factor && readout_width() != expand_factor * model_dim)
        throw InputError("SCA config: 2*query_heads*head_dim must equal expand_factor*model_dim");
    if (!(init_decay > 0.0 && init_decay < 1.0)) throw InputError("SCA config: init_decay must lie in (0, 1)");
    if (!(theta_min > 0.0 && theta_max >= theta_min)) throw InputError("SCA config: bad theta range");
}

std::size_t SCAConfig::parameter_count() const {
    const std::size_t F = swiglu_hidden();
    return in_width() * model_dim          // w_in
           + in_width() * conv_kernel      // conv
           + readout_width() * model_dim   // w_gate
           + readout_width()               // norm scale
           + query_heads * 2 * F * 2 * head_dim  // w_read
           + model_dim * query_heads * F   // w_out
           + 4 * mem_heads                 // gamma, beta, decay, eta
           + mem_heads * head_dim * spectral_samples     // theta
           + query_heads * head_dim * spectral_samples;  // omega
}

namespace {

template <class T>
Tensor<T> gaussian(Shape s, Rng& rng, double stddev) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
    return t;
}

template <class T>
void require_finite(const Tensor<T>& t, const std::string& what) {
    for (T v : t.data)
        if (!std::isfinite(static_cast<double>(v))) throw NumericalError("non-finite gradient in " + what);
}

}  // namespace

template <class T>
SCALayer<T>::SCALayer(const SCAConfig& cfg, Rng& rng, const std::string& name) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t D = cfg_.model_dim, K = cfg_.mem_heads, Kq = cfg_.query_heads, H = cfg_.head_dim,
                      M = cfg_.spectral_samples, c = cfg_.conv_kernel, W = cfg_.in_width(),
                      F = cfg_.swiglu_hidden(), R = cfg_.readout_width();
    auto p = [&](const char* n, Tensor<T> v) { return Param<T>(name + "." + n, std::move(v)); };

    params_.w_in = p("w_in", gaussian<T>({W, D}, rng, 1.0 / std::sqrt(double(D))));
    Tensor<T> conv({W, c});
    for (std::size_t ch = 0; ch < W; ++ch) conv[ch * c + (c - 1)] = T(1);
    params_.conv = p("conv", std::move(conv));
    params_.w_gate = p("w_gate", gaussian<T>({R, D}, rng, 1.0 / std::sqrt(double(D))));
    params_.norm_scale = p("norm_scale", Tensor<T>({R}, T(1)));
    params_.w_read = p("w_read", gaussian<T>({Kq, 2 * F, 2 * H}, rng, 1.0 / std::sqrt(double(2 * H))));
    params_.w_out = p("w_out", gaussian<T>({D, Kq * F}, rng, 1.0 / std::sqrt(double(Kq * F))));
    params_.gamma = p("gamma", Tensor<T>({K}, T(1)));
    params_.beta = p("beta", Tensor<T>({K}, T(0)));
    // softplus(decay) = -log(init_decay)
    const double lambda0 = -std::log(cfg_.init_decay);
    params_.decay = p("decay", Tensor<T>({K}, static_cast<T>(std::log(std::expm1(lambda0)))));
    params_.eta = p("eta", Tensor<T>({K}, T(1)));

    // theta: magnitudes log-spaced over [theta_min, theta_max], alternating sign
    Tensor<T> theta({K, H, M});
    const std::size_t per_head = H * M;
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t n = 0; n < per_head; ++n) {
            const double frac = per_head > 1 ? double(n) / double(per_head - 1) : 0.0;
            const double mag = cfg_.theta_min * std::pow(cfg_.theta_max / cfg_.theta_min, frac);
            theta[k * per_head + n] = static_cast<T>(n % 2 == 0 ? mag : -mag);
        }
    grid_.theta = p("theta", std::move(theta));
    grid_.omega = p("omega", Tensor<T>({Kq, H, M}, static_cast<T>(1.0 / double(M))));
}

template <class T>
std::vector<Param<T>*> SCALayer<T>::parameters() {
    return {&params_.w_in,  &params_.conv, &params_.w_gate, &params_.norm_scale, &params_.w_read, &params_.w_out,
            &params_.gamma, &params_.beta, &params_.decay,  &params_.eta,        &grid_.theta,    &grid_.omega};
}

template <class T>
std::vector<T> SCALayer<T>::decay_rates() const {
    std::vector<T> out(cfg_.mem_heads);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = detail::softplus(params_.decay.value[k]);
    return out;
}

template <class T>
Tensor<T> SCALayer<T>::boundary_distances(std::size_t L) {
    Tensor<T> d({L, 1});
    for (std::size_t t = 0; t < L; ++t) d[t] = static_cast<T>(L - 1 - t);
    return d;
}

template <class T>
typename SCALayer<T>::Projections SCALayer<T>::project_and_mix(Var<T> x, const Tensor<T>* conv_history) {
    Graph<T>& g = *x.g;
    if (x.value().rank() != 2 || x.dim(1) != cfg_.model_dim)
        throw InputError("SCA input must be [L, " + std::to_string(cfg_.model_dim) + "], got " + shape_str(x.shape()));
    const std::size_t L = x.dim(0), K = cfg_.mem_heads, Kq = cfg_.query_heads, H = cfg_.head_dim,
                      M = cfg_.spectral_samples;
    if (L == 0) throw InputError("SCA input must have at least one position");
    Projections out;
    out.u = linear(x, g.param(params_.w_in));
    Var<T> z = silu(causal_dwconv(out.u, g.param(params_.conv), conv_history));
    out.k = reshape(slice_last(z, 0, K * H), {L, K, H});
    out.s = slice_last(z, K * H, K * H + K);
    Var<T> q = reshape(slice_last(z, cfg_.memory_width(), cfg_.in_width()), {L, Kq, H, M, 2});
    out.q_re = reshape(slice_last(q, 0, 1), {L, Kq, H, M});
    out.q_im = reshape(slice_last(q, 1, 2), {L, Kq, H, M});
    return out;
}

template <class T>
Var<T> SCALayer<T>::contribution_weights(Var<T> s, const Tensor<T>& distance) {
    Graph<T>& g = *s.g;
    Var<T> gate = softplus(s * g.param(params_.gamma) + g.param(params_.beta));
    Var<T> lambda = softplus(g.param(params_.decay));
    Var<T> damp = decay_factors(distance, lambda);
    return gate * damp;
}

template <class T>
typename SCALayer<T>::Complex SCALayer<T>::encode_complex(Var<T> k, Var<T> alpha) {
    Graph<T>& g = *k.g;
    const std::size_t L = k.dim(0), K = cfg_.mem_heads, H = cfg_.head_dim;
    Var<T> bounded = softsign(k * reshape(g.param(params_.eta), {K, 1}));
    Var<T> phase = reshape(bounded, {L, K, H, 1}) * g.param(grid_.theta);
    Var<T> amp = reshape(alpha, {L, K, 1, 1}) * reshape(k, {L, K, H, 1});
    return {amp * cos(phase), amp * sin(phase)};
}

template <class T>
typename SCALayer<T>::Complex SCALayer<T>::scan_accumulate(Var<T> r, Var<T> i, Var<T> alpha, ScanBackend backend) {
    try {
        return {normalized_prefix_sum(r, alpha, backend), normalized_prefix_sum(i, alpha, backend)};
    } catch (const NumericalError&) {
        throw NumericalError("SCA scan: accumulated alpha mass is not positive");
    }
}

template <class T>
typename SCALayer<T>::Complex SCALayer<T>::spectral_readout(Var<T> r_hat, Var<T> i_hat, Var<T> q_re, Var<T> q_im) {
    Graph<T>& g = *r_hat.g;
    const std::size_t K = cfg_.mem_heads, Kq = cfg_.query_heads;
    if (r_hat.value().rank() != 4 || q_re.value().rank() != 4 || r_hat.dim(1) != K || q_re.dim(1) != Kq ||
        r_hat.shape() != i_hat.shape() || q_re.shape() != q_im.shape())
        throw InputError("spectral_readout: shape mismatch");
    if (K != Kq) {
        std::vector<std::size_t> map(Kq);
        for (std::size_t j = 0; j < Kq; ++j) map[j] = cfg_.memory_head_for(j);
        r_hat = index_select(r_hat, 1, map);
        i_hat = index_select(i_hat, 1, map);
    }
    Var<T> omega = g.param(grid_.omega);
    const T inv = static_cast<T>(1.0 / std::sqrt(double(cfg_.head_dim)));
    Var<T> o_re = scale(sum((r_hat * q_re + i_hat * q_im) * omega, 3), inv);
    Var<T> o_im = scale(sum((i_hat * q_re - r_hat * q_im) * omega, 3), inv);
    return {o_re, o_im};
}

template <class T>
Var<T> SCALayer<T>::fuse_output(Var<T> o_re, Var<T> o_im, Var<T> x) {
    Graph<T>& g = *x.g;
    const std::size_t L = x.dim(0), Kq = cfg_.query_heads, H = cfg_.head_dim, F = cfg_.swiglu_hidden();
    Var<T> o = reshape(concat_last(o_re, o_im), {L, cfg_.readout_width()});
    Var<T> gate = silu(linear(x, g.param(params_.w_gate)));
    Var<T> normed = rms_norm(o, g.param(params_.norm_scale), static_cast<T>(1e-6)) * gate;
    Var<T> hr = grouped_linear(reshape(normed, {L, Kq, 2 * H}), g.param(params_.w_read));
    Var<T> h = silu(slice_last(hr, 0, F)) * slice_last(hr, F, 2 * F);
    return linear(reshape(h, {L, Kq * F}), g.param(params_.w_out));
}

template <class T>
Var<T> SCALayer<T>::forward(Var<T> x, ScanBackend backend) {
    Projections p = project_and_mix(x);
    const std::size_t L = x.dim(0);
    Var<T> alpha = contribution_weights(p.s, boundary_distances(L));
    Complex enc = encode_complex(p.k, alpha);
    Complex acc = scan_accumulate(enc.re, enc.im, alpha, backend);
    Complex o = spectral_readout(acc.re, acc.im, p.q_re, p.q_im);
    return fuse_output(o.re, o.im, x);
}

template <class T>
Tensor<T> SCALayer<T>::forward_parallel(const Tensor<T>& x, ScanBackend backend) {
    Graph<T> g(false);
    return forward(g.constant(x), backend).value();
}

template <class T>
SCAState<T> SCALayer<T>::initial_state() const {
    SCAState<T> st;
    const std::size_t K = cfg_.mem_heads, H = cfg_.head_dim, M = cfg_.spectral_samples;
    st.R = Tensor<double>({K, H, M});
    st.I = Tensor<double>({K, H, M});
    st.Z = Tensor<double>({K});
    st.conv_tail = Tensor<T>({cfg_.conv_kernel - 1, cfg_.in_width()});
    return st;
}

template <class T>
Tensor<T> SCALayer<T>::step_streaming(const Tensor<T>& x_t, SCAState<T>& state) {
    const std::size_t D = cfg_.model_dim, K = cfg_.mem_heads, H = cfg_.head_dim, M = cfg_.spectral_samples,
                      W = cfg_.in_width(), c = cfg_.conv_kernel;
    if (x_t.size() != D) throw InputError("step_streaming: input must have model_dim entries");
    if (state.R.shape != Shape{K, H, M} || state.I.shape != state.R.shape || state.Z.shape != Shape{K} ||
        state.conv_tail.shape != Shape{c - 1, W})
        throw InputError("step_streaming: state shape does not match the layer config");
    Graph<T> g(false);
    Var<T> x = g.constant(x_t.reshaped({1, D}));
    Projections p = project_and_mix(x, &state.conv_tail);
    Var<T> alpha = contribution_weights(p.s, Tensor<T>({1, 1}));
    Complex enc = encode_complex(p.k, alpha);

    const std::vector<T> lambda = decay_rates();
    const Tensor<T>& r = enc.re.value();
    const Tensor<T>& im = enc.im.value();
    const Tensor<T>& a = alpha.value();
    Tensor<T> r_hat({1, K, H, M}), i_hat({1, K, H, M});
    for (std::size_t k = 0; k < K; ++k) {
        const double f = std::exp(-static_cast<double>(lambda[k]));
        state.Z[k] = f * state.Z[k] + static_cast<double>(a[k]);
        if (!(state.Z[k] > 0.0)) throw NumericalError("SCA stream: accumulated alpha mass is not positive");
        for (std::size_t j = 0; j < H * M; ++j) {
            const std::size_t o = k * H * M + j;
            state.R[o] = f * state.R[o] + static_cast<double>(r[o]);
            state.I[o] = f * state.I[o] + static_cast<double>(im[o]);
            r_hat[o] = static_cast<T>(state.R[o] / state.Z[k]);
            i_hat[o] = static_cast<T>(state.I[o] / state.Z[k]);
        }
    }
    Complex o = spectral_readout(g.constant(std::move(r_hat)), g.constant(std::move(i_hat)), p.q_re, p.q_im);
    Tensor<T> y = fuse_output(o.re, o.im, x).value();

    if (c > 1) {
        Tensor<T>& tail = state.conv_tail;
        std::copy(tail.data.begin() + static_cast<std::ptrdiff_t>(W), tail.data.end(), tail.data.begin());
        std::copy_n(p.u.value().ptr(), W, tail.ptr() + (c - 2) * W);
    }
    ++state.t;
    return y.reshaped({D});
}

template <class T>
SCAGradients<T> SCALayer<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, ScanBackend backend) {
    for (Param<T>* p : parameters()) p->zero_grad();
    Graph<T> g(true);
    Var<T> xin = g.input(x);
    Var<T> y = forward(xin, backend);
    require_shape(dy, y.shape(), "SCA upstream gradient");
    g.backward(y, dy);
    SCAGradients<T> out;
    out.dx = g.grad(xin);
    require_finite(out.dx, "input");
    for (Param<T>* p : parameters()) {
        require_finite(p->grad, p->name);
        out.params[p->name] = p->grad;
    }
    return out;
}

template class SCALayer<float>;
template class SCALayer<double>;

}  // namespace seqcond
