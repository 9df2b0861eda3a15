#include "seqcond/hybrid_stack.hpp"

#include <cmath>

#include "seqcond/errors.hpp"

namespace seqcond {

SCAConfig ModelConfig::default_sca() {
    SCAConfig s;
    s.model_dim = 64;
    s.mem_heads = 4;
    s.query_heads = 4;
    s.head_dim = 16;
    s.spectral_samples = 2;
    s.conv_kernel = 4;
    s.expand_factor = 2;
    return s;
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::micro() {
    ModelConfig m;
    m.vocab_size = 16;
    m.model_dim = 16;
    m.n_blocks = 1;
    m.ffn_dim = 43;
    m.attn_heads = 2;
    m.kv_heads = 1;
    m.head_dim = 8;
    m.max_len = 64;
    m.sca.model_dim = 16;
    m.sca.mem_heads = 2;
    m.sca.query_heads = 2;
    m.sca.head_dim = 4;
    m.sca.spectral_samples = 2;
    m.sca.conv_kernel = 3;
    m.sca.expand_factor = 1;
    m.sca.seq_len_max = 64;
    return m;
}

ModelConfig ModelConfig::full_scale() {
    ModelConfig m;
    m.vocab_size = 100277;
    m.model_dim = 1024;
    m.n_blocks = 8;
    m.ffn_dim = 2730;
    m.attn_heads = 16;
    m.kv_heads = 4;
    m.head_dim = 64;
    m.max_len = 1024;
    m.sca.model_dim = 1024;
    m.sca.mem_heads = 16;
    m.sca.query_heads = 16;
    m.sca.head_dim = 64;
    m.sca.spectral_samples = 2;
    m.sca.conv_kernel = 4;
    m.sca.expand_factor = 2;
    m.sca.seq_len_max = 1024;
    return m;
}

void ModelConfig::validate() const {
    if (vocab_size == 0 || model_dim == 0 || n_blocks == 0 || ffn_dim == 0 || max_len == 0)
        throw InputError("model config: sizes must be positive");
    if (attn_heads == 0 || kv_heads == 0 || attn_heads % kv_heads != 0)
        throw InputError("model config: attn_heads must be a positive multiple of kv_heads");
    if (head_dim == 0 || head_dim % 2 != 0) throw InputError("model config: head_dim must be even for RoPE");
    if (attn_heads * head_dim != model_dim) throw InputError("model config: attn_heads * head_dim must equal model_dim");
    if (sca.model_dim != model_dim) throw InputError("model config: sca.model_dim must equal model_dim");
    if (!(rope_base > 1.0)) throw InputError("model config: rope_base must exceed 1");
    if (!(norm_eps > 0.0)) throw InputError("model config: norm_eps must be positive");
    sca.validate();
}

std::size_t ModelConfig::attention_parameter_count() const {
    const std::size_t D = model_dim, q = attn_heads * head_dim, kv = kv_heads * head_dim;
    return 2 * D + D * q + 2 * D * kv + q * D + 3 * D * ffn_dim;
}

std::size_t ModelConfig::sca_layer_parameter_count() const { return model_dim + sca.parameter_count(); }

std::size_t ModelConfig::parameter_count() const {
    const std::size_t sca_layers = use_attention ? 2 * n_blocks : 3 * n_blocks;
    const std::size_t attn_layers = use_attention ? n_blocks : 0;
    std::size_t n = vocab_size * model_dim + model_dim;
    if (!tie_embeddings) n += vocab_size * model_dim;
    return n + sca_layers * sca_layer_parameter_count() + attn_layers * attention_parameter_count();
}

namespace {

template <class T>
Param<T> gaussian_param(const std::string& name, Shape s, Rng& rng, std::size_t fan_in) {
    Tensor<T> t(std::move(s));
    const double sd = 1.0 / std::sqrt(double(fan_in));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * sd);
    return Param<T>(name, std::move(t));
}

template <class T>
double rms(const Tensor<T>& t) {
    long double acc = 0;
    for (T v : t.data) acc += static_cast<long double>(v) * v;
    return t.size() ? std::sqrt(double(acc / t.size())) : 0.0;
}

}  // namespace

template <class T>
AttentionLayer<T>::AttentionLayer(const ModelConfig& cfg, Rng& rng, const std::string& name) : cfg_(cfg) {
    const std::size_t D = cfg.model_dim, q = cfg.attn_heads * cfg.head_dim, kv = cfg.kv_heads * cfg.head_dim,
                      F = cfg.ffn_dim;
    p_.norm1 = Param<T>(name + ".norm1", Tensor<T>({D}, T(1)));
    p_.wq = gaussian_param<T>(name + ".wq", {q, D}, rng, D);
    p_.wk = gaussian_param<T>(name + ".wk", {kv, D}, rng, D);
    p_.wv = gaussian_param<T>(name + ".wv", {kv, D}, rng, D);
    p_.wo = gaussian_param<T>(name + ".wo", {D, q}, rng, q);
    p_.norm2 = Param<T>(name + ".norm2", Tensor<T>({D}, T(1)));
    p_.w_gate = gaussian_param<T>(name + ".w_gate", {F, D}, rng, D);
    p_.w_up = gaussian_param<T>(name + ".w_up", {F, D}, rng, D);
    p_.w_down = gaussian_param<T>(name + ".w_down", {D, F}, rng, F);
}

template <class T>
std::vector<Param<T>*> AttentionLayer<T>::parameters() {
    return {&p_.norm1, &p_.wq, &p_.wk, &p_.wv, &p_.wo, &p_.norm2, &p_.w_gate, &p_.w_up, &p_.w_down};
}

template <class T>
Var<T> AttentionLayer<T>::attend(Var<T> x, double position_offset) {
    Graph<T>& g = *x.g;
    const std::size_t L = x.dim(0), Hq = cfg_.attn_heads, Hk = cfg_.kv_heads, dh = cfg_.head_dim;
    if (L > cfg_.max_len)
        throw InputError("sequence length " + std::to_string(L) + " exceeds max_len " + std::to_string(cfg_.max_len));
    Var<T> q = reshape(linear(x, g.param(p_.wq)), {L, Hq, dh});
    Var<T> k = reshape(linear(x, g.param(p_.wk)), {L, Hk, dh});
    if (cfg_.use_rope) {
        q = rope(q, position_offset, cfg_.rope_base);
        k = rope(k, position_offset, cfg_.rope_base);
    }
    Var<T> v = reshape(linear(x, g.param(p_.wv)), {L, Hk, dh});
    Var<T> a = causal_attention(q, k, v, static_cast<T>(1.0 / std::sqrt(double(dh))));
    return linear(reshape(a, {L, Hq * dh}), g.param(p_.wo));
}

template <class T>
Var<T> AttentionLayer<T>::forward(Var<T> x, double position_offset) {
    Graph<T>& g = *x.g;
    const T eps = static_cast<T>(cfg_.norm_eps);
    Var<T> x1 = x + attend(rms_norm(x, g.param(p_.norm1), eps), position_offset);
    Var<T> h = rms_norm(x1, g.param(p_.norm2), eps);
    Var<T> ff = silu(linear(h, g.param(p_.w_gate))) * linear(h, g.param(p_.w_up));
    return x1 + linear(ff, g.param(p_.w_down));
}

template <class T>
SCABlockLayer<T>::SCABlockLayer(const ModelConfig& cfg, Rng& rng, const std::string& name)
    : cfg_(cfg), norm_(name + ".norm", Tensor<T>({cfg.model_dim}, T(1))), sca_(cfg.sca, rng, name) {}

template <class T>
std::vector<Param<T>*> SCABlockLayer<T>::parameters() {
    std::vector<Param<T>*> out{&norm_};
    for (Param<T>* p : sca_.parameters()) out.push_back(p);
    return out;
}

template <class T>
Var<T> SCABlockLayer<T>::forward(Var<T> x, ScanBackend backend) {
    Graph<T>& g = *x.g;
    if (x.dim(0) > cfg_.max_len)
        throw InputError("sequence length " + std::to_string(x.dim(0)) + " exceeds max_len " +
                         std::to_string(cfg_.max_len));
    return x + sca_.forward(rms_norm(x, g.param(norm_), static_cast<T>(cfg_.norm_eps)), backend);
}

template <class T>
HybridLM<T>::HybridLM(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t D = cfg_.model_dim, V = cfg_.vocab_size;
    embed_ = gaussian_param<T>("embed", {V, D}, rng, D);
    const std::size_t per_block = cfg_.use_attention ? 2 : 3;
    for (std::size_t b = 0; b < cfg_.n_blocks; ++b) {
        const std::string prefix = "block" + std::to_string(b);
        for (std::size_t s = 0; s < per_block; ++s)
            sca_.push_back(std::make_unique<SCABlockLayer<T>>(cfg_, rng, prefix + ".sca" + std::to_string(s)));
        if (cfg_.use_attention) attention_.push_back(std::make_unique<AttentionLayer<T>>(cfg_, rng, prefix + ".attn"));
    }
    final_norm_ = Param<T>("final_norm", Tensor<T>({D}, T(1)));
    if (!cfg_.tie_embeddings) unembed_ = gaussian_param<T>("unembed", {V, D}, rng, D);
}

template <class T>
std::vector<Param<T>*> HybridLM<T>::parameters() {
    std::vector<Param<T>*> out{&embed_};
    const std::size_t per_block = cfg_.use_attention ? 2 : 3;
    for (std::size_t b = 0; b < cfg_.n_blocks; ++b) {
        for (std::size_t s = 0; s < per_block; ++s)
            for (Param<T>* p : sca_[b * per_block + s]->parameters()) out.push_back(p);
        if (cfg_.use_attention)
            for (Param<T>* p : attention_[b]->parameters()) out.push_back(p);
    }
    out.push_back(&final_norm_);
    if (!cfg_.tie_embeddings) out.push_back(&unembed_);
    return out;
}

template <class T>
Param<T>* HybridLM<T>::find(const std::string& name) {
    for (Param<T>* p : parameters())
        if (p->name == name) return p;
    return nullptr;
}

template <class T>
std::size_t HybridLM<T>::parameter_count() {
    std::size_t n = 0;
    for (Param<T>* p : parameters()) n += p->value.size();
    return n;
}

template <class T>
SCABlockLayer<T>& HybridLM<T>::sca_layer(std::size_t block, std::size_t which) {
    const std::size_t per_block = cfg_.use_attention ? 2 : 3;
    if (block >= cfg_.n_blocks || which >= per_block) throw InputError("sca_layer: index out of range");
    return *sca_[block * per_block + which];
}

template <class T>
AttentionLayer<T>* HybridLM<T>::attention_layer(std::size_t block) {
    if (block >= cfg_.n_blocks) throw InputError("attention_layer: index out of range");
    return cfg_.use_attention ? attention_[block].get() : nullptr;
}

template <class T>
Var<T> HybridLM<T>::block_forward(Var<T> x, std::size_t block, ScanBackend backend) {
    x = sca_layer(block, 0).forward(x, backend);
    x = sca_layer(block, 1).forward(x, backend);
    if (cfg_.use_attention) return attention_[block]->forward(x);
    return sca_layer(block, 2).forward(x, backend);
}

template <class T>
Var<T> HybridLM<T>::forward(Graph<T>& g, const std::vector<int>& ids, std::vector<double>* layer_norms,
                            ScanBackend backend) {
    if (ids.empty()) throw InputError("forward: empty token sequence");
    if (ids.size() > cfg_.max_len)
        throw InputError("sequence length " + std::to_string(ids.size()) + " exceeds max_len " +
                         std::to_string(cfg_.max_len));
    Var<T> E = g.param(embed_);
    Var<T> x = seqcond::embedding(E, ids);
    if (layer_norms) {
        layer_norms->clear();
        layer_norms->push_back(rms(x.value()));
    }
    const std::size_t per_block = cfg_.use_attention ? 2 : 3;
    for (std::size_t b = 0; b < cfg_.n_blocks; ++b) {
        for (std::size_t s = 0; s < per_block; ++s) {
            x = sca_[b * per_block + s]->forward(x, backend);
            if (layer_norms) layer_norms->push_back(rms(x.value()));
        }
        if (cfg_.use_attention) {
            x = attention_[b]->forward(x);
            if (layer_norms) layer_norms->push_back(rms(x.value()));
        }
    }
    Var<T> h = rms_norm(x, g.param(final_norm_), static_cast<T>(cfg_.norm_eps));
    return linear(h, cfg_.tie_embeddings ? E : g.param(unembed_));
}

template <class T>
Tensor<T> HybridLM<T>::logits(const std::vector<int>& ids) {
    Graph<T> g(false);
    return forward(g, ids).value();
}

template class AttentionLayer<float>;
template class AttentionLayer<double>;
template class SCABlockLayer<float>;
template class SCABlockLayer<double>;
template class HybridLM<float>;
template class HybridLM<double>;

}  // namespace seqcond
