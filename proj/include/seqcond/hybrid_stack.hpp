#pragma once

// Decoder-only LM built from repeated (SCA, SCA, attention) blocks with
// pre-norm residuals, tied input/output embeddings and a final RMSNorm.

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "seqcond/autograd.hpp"
#include "seqcond/rng.hpp"
#include "seqcond/sca_layer.hpp"

namespace seqcond {

struct ModelConfig {
    std::size_t vocab_size = 64;
    std::size_t model_dim = 64;
    std::size_t n_blocks = 2;  // 3 layers per block
    std::size_t ffn_dim = 171;
    std::size_t attn_heads = 4;
    std::size_t kv_heads = 2;
    std::size_t head_dim = 16;
    std::size_t max_len = 256;
    double rope_base = 10000.0;
    bool use_rope = true;
    double norm_eps = 1e-6;
    bool tie_embeddings = true;
    // false replaces every attention layer by a third SCA layer
    bool use_attention = true;
    SCAConfig sca = default_sca();

    static SCAConfig default_sca();
    static ModelConfig toy();
    static ModelConfig micro();
    static ModelConfig full_scale();

    void validate() const;
    std::size_t n_layers() const { return 3 * n_blocks; }
    std::size_t attention_parameter_count() const;
    std::size_t sca_layer_parameter_count() const;
    std::size_t parameter_count() const;
};

template <class T>
struct AttentionParams {
    Param<T> norm1, wq, wk, wv, wo;
    Param<T> norm2, w_gate, w_up, w_down;
};

template <class T>
class AttentionLayer {
public:
    AttentionLayer(const ModelConfig& cfg, Rng& rng, const std::string& name);
    AttentionParams<T>& params() { return p_; }
    std::vector<Param<T>*> parameters();

    // attention sublayer only, without norm or residual: x [L, D] -> [L, D]
    Var<T> attend(Var<T> x, double position_offset = 0.0);
    // full pre-norm layer: attention then SwiGLU FFN, both residual
    Var<T> forward(Var<T> x, double position_offset = 0.0);

private:
    ModelConfig cfg_;
    AttentionParams<T> p_;
};

template <class T>
class SCABlockLayer {
public:
    SCABlockLayer(const ModelConfig& cfg, Rng& rng, const std::string& name);
    SCALayer<T>& sca() { return sca_; }
    Param<T>& norm() { return norm_; }
    std::vector<Param<T>*> parameters();
    // x + SCA(RMSNorm(x))
    Var<T> forward(Var<T> x, ScanBackend backend = ScanBackend::kCumsum);

private:
    ModelConfig cfg_;
    Param<T> norm_;
    SCALayer<T> sca_;
};

template <class T>
class HybridLM {
public:
    HybridLM(const ModelConfig& cfg, Rng& rng);
    HybridLM(const HybridLM&) = delete;
    HybridLM& operator=(const HybridLM&) = delete;

    const ModelConfig& config() const { return cfg_; }
    std::vector<Param<T>*> parameters();
    Param<T>* find(const std::string& name);
    std::size_t parameter_count();

    Param<T>& embedding() { return embed_; }
    SCABlockLayer<T>& sca_layer(std::size_t block, std::size_t which);
    AttentionLayer<T>* attention_layer(std::size_t block);

    Var<T> block_forward(Var<T> x, std::size_t block, ScanBackend backend = ScanBackend::kCumsum);
    // logits [L, V]; layer_norms (if given) receives the RMS of each layer output
    Var<T> forward(Graph<T>& g, const std::vector<int>& ids, std::vector<double>* layer_norms = nullptr,
                   ScanBackend backend = ScanBackend::kCumsum);
    Tensor<T> logits(const std::vector<int>& ids);

private:
    ModelConfig cfg_;
    Param<T> embed_;
    Param<T> unembed_;  // only when weights are untied
    Param<T> final_norm_;
    std::vector<std::unique_ptr<SCABlockLayer<T>>> sca_;        // 2 per block (3 without attention)
    std::vector<std::unique_ptr<AttentionLayer<T>>> attention_;  // 1 per block
};

extern template class AttentionLayer<float>;
extern template class AttentionLayer<double>;
extern template class SCABlockLayer<float>;
extern template class SCABlockLayer<double>;
extern template class HybridLM<float>;
extern template class HybridLM<double>;

}  // namespace seqcond
