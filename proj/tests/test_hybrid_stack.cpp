#include <cmath>

#include "doctest.h"
#include "seqcond/errors.hpp"
#include "seqcond/hybrid_stack.hpp"

using namespace seqcond;

namespace {

ModelConfig tiny() {
    ModelConfig m = ModelConfig::micro();
    m.vocab_size = 11;
    m.n_blocks = 2;
    return m;
}

Tensor<double> random_tensor(Shape s, Rng& rng, double sd = 1.0) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.data) v = rng.normal() * sd;
    return t;
}

std::vector<int> random_ids(std::size_t L, std::size_t V, Rng& rng) {
    std::vector<int> ids(L);
    for (auto& v : ids) v = static_cast<int>(rng.below(V));
    return ids;
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double e = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) e = std::max(e, std::abs(a[i] - b[i]));
    return e;
}

}  // namespace

TEST_CASE("parameter counts agree with allocation") {
    for (bool attn : {true, false})
        for (bool tie : {true, false}) {
            ModelConfig m = tiny();
            m.use_attention = attn;
            m.tie_embeddings = tie;
            Rng rng(1, RngStream::kInit);
            HybridLM<double> lm(m, rng);
            CHECK(lm.parameter_count() == m.parameter_count());
        }
    ModelConfig toy = ModelConfig::toy();
    CHECK(toy.ffn_dim == static_cast<std::size_t>(std::lround(8.0 / 3.0 * 64)));
    Rng rng(2, RngStream::kInit);
    HybridLM<float> lm(toy, rng);
    CHECK(lm.parameter_count() == toy.parameter_count());
    CHECK(lm.parameters().size() == 1 + 2 * (2 * 13 + 9) + 1);
}

TEST_CASE("full-scale configuration lands near 371M parameters") {
    const ModelConfig full = ModelConfig::full_scale();
    CHECK_NOTHROW(full.validate());
    CHECK(full.n_layers() == 24);
    const double n = double(full.parameter_count());
    CHECK(std::abs(n - 371e6) / 371e6 <= 0.05);
    CHECK(full.parameter_count() == 371826688u);
}

TEST_CASE("config validation") {
    ModelConfig m = tiny();
    m.kv_heads = 3;
    CHECK_THROWS_AS(m.validate(), InputError);
    m = tiny();
    m.sca.model_dim = 8;
    CHECK_THROWS_AS(m.validate(), InputError);
    m = tiny();
    m.head_dim = 7;
    CHECK_THROWS_AS(m.validate(), InputError);
}

TEST_CASE("attention sublayer") {
    ModelConfig m = tiny();
    Rng rng(3, RngStream::kInit);
    AttentionLayer<double> layer(m, rng, "attn");
    auto& p = layer.params();
    const std::size_t D = m.model_dim, Hq = m.attn_heads, Hk = m.kv_heads, dh = m.head_dim;

    SUBCASE("one position returns the projected value") {
        Rng r(4, RngStream::kVerify);
        auto x = random_tensor({1, D}, r);
        Graph<double> g(false);
        auto y = layer.attend(g.constant(x)).value();
        // v = Wv x per kv head, repeated to query heads, then Wo
        std::vector<double> v(Hk * dh);
        for (std::size_t o = 0; o < Hk * dh; ++o)
            for (std::size_t i = 0; i < D; ++i) v[o] += p.wv.value[o * D + i] * x[i];
        for (std::size_t d = 0; d < D; ++d) {
            double acc = 0.0;
            for (std::size_t h = 0; h < Hq; ++h)
                for (std::size_t e = 0; e < dh; ++e)
                    acc += p.wo.value[d * Hq * dh + h * dh + e] * v[(h / (Hq / Hk)) * dh + e];
            CHECK(y[d] == doctest::Approx(acc).epsilon(1e-13));
        }
    }
    SUBCASE("identical tokens without rope give identical outputs") {
        ModelConfig nr = m;
        nr.use_rope = false;
        Rng r0(3, RngStream::kInit);
        AttentionLayer<double> plain(nr, r0, "attn");
        Rng r(5, RngStream::kVerify);
        auto row = random_tensor({1, D}, r);
        Tensor<double> x({6, D});
        for (std::size_t t = 0; t < 6; ++t)
            for (std::size_t d = 0; d < D; ++d) x[t * D + d] = row[d];
        Graph<double> g(false);
        auto y = plain.attend(g.constant(x)).value();
        for (std::size_t t = 1; t < 6; ++t)
            for (std::size_t d = 0; d < D; ++d) CHECK(y[t * D + d] == doctest::Approx(y[d]).epsilon(1e-14));
    }
    SUBCASE("matches a naive loop with rope and grouped heads") {
        Rng r(6, RngStream::kVerify);
        const std::size_t L = 9;
        auto x = random_tensor({L, D}, r);
        Graph<double> g(false);
        auto y = layer.attend(g.constant(x)).value();
        auto proj = [&](const Tensor<double>& w, std::size_t rows) {
            std::vector<double> out(L * rows);
            for (std::size_t t = 0; t < L; ++t)
                for (std::size_t o = 0; o < rows; ++o)
                    for (std::size_t i = 0; i < D; ++i) out[t * rows + o] += w[o * D + i] * x[t * D + i];
            return out;
        };
        auto q = proj(p.wq.value, Hq * dh), k = proj(p.wk.value, Hk * dh), v = proj(p.wv.value, Hk * dh);
        auto rot = [&](std::vector<double>& a, std::size_t heads) {
            for (std::size_t t = 0; t < L; ++t)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < dh / 2; ++i) {
                        const double ang = double(t) / std::pow(m.rope_base, 2.0 * double(i) / double(dh));
                        double& a0 = a[(t * heads + h) * dh + 2 * i];
                        double& a1 = a[(t * heads + h) * dh + 2 * i + 1];
                        const double u = a0, w = a1;
                        a0 = u * std::cos(ang) - w * std::sin(ang);
                        a1 = u * std::sin(ang) + w * std::cos(ang);
                    }
        };
        rot(q, Hq);
        rot(k, Hk);
        std::vector<double> att(L * Hq * dh);
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t h = 0; h < Hq; ++h) {
                const std::size_t kh = h / (Hq / Hk);
                std::vector<double> sc(t + 1);
                double mx = -1e300;
                for (std::size_t s = 0; s <= t; ++s) {
                    double dot = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) dot += q[(t * Hq + h) * dh + e] * k[(s * Hk + kh) * dh + e];
                    sc[s] = dot / std::sqrt(double(dh));
                    mx = std::max(mx, sc[s]);
                }
                double z = 0.0;
                for (auto& s : sc) z += s = std::exp(s - mx);
                for (std::size_t s = 0; s <= t; ++s)
                    for (std::size_t e = 0; e < dh; ++e)
                        att[(t * Hq + h) * dh + e] += sc[s] / z * v[(s * Hk + kh) * dh + e];
            }
        double worst = 0.0;
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t d = 0; d < D; ++d) {
                double acc = 0.0;
                for (std::size_t j = 0; j < Hq * dh; ++j) acc += p.wo.value[d * Hq * dh + j] * att[t * Hq * dh + j];
                worst = std::max(worst, std::abs(acc - y[t * D + d]));
            }
        CHECK(worst <= 1e-12);
    }
    SUBCASE("too long") {
        Graph<double> g(false);
        CHECK_THROWS_AS(layer.attend(g.constant(Tensor<double>({m.max_len + 1, D}))), InputError);
    }
}

TEST_CASE("rope scores depend only on relative position") {
    Rng rng(7, RngStream::kVerify);
    const std::size_t L = 12, H = 2, dh = 8;
    auto q = random_tensor({L, H, dh}, rng), k = random_tensor({L, H, dh}, rng);
    auto scores = [&](double offset) {
        Graph<double> g(false);
        auto qr = rope(g.constant(q), offset).value();
        auto kr = rope(g.constant(k), offset).value();
        Tensor<double> s({H, L, L});
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t t = 0; t < L; ++t)
                for (std::size_t u = 0; u < L; ++u)
                    for (std::size_t e = 0; e < dh; ++e)
                        s[(h * L + t) * L + u] += qr[(t * H + h) * dh + e] * kr[(u * H + h) * dh + e];
        return s;
    };
    const auto base = scores(0.0);
    for (double shift : {1.0, 37.0, 500.0}) CHECK(max_diff(base, scores(shift)) <= 1e-10);
}

TEST_CASE("block wiring") {
    ModelConfig m = tiny();
    Rng rng(8, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    Rng r(9, RngStream::kVerify);
    const std::size_t L = 7, D = m.model_dim;
    auto x = random_tensor({L, D}, r);

    SUBCASE("block equals the manual composition of its three layers") {
        Graph<double> g(false);
        auto y = lm.block_forward(g.constant(x), 1).value();
        Graph<double> g2(false);
        auto h = lm.sca_layer(1, 0).forward(g2.constant(x));
        h = lm.sca_layer(1, 1).forward(h);
        h = lm.attention_layer(1)->forward(h);
        CHECK(max_diff(y, h.value()) == 0.0);
    }
    SUBCASE("zero output projections make the block an identity") {
        for (std::size_t s = 0; s < 2; ++s) lm.sca_layer(0, s).sca().params().w_out.value.fill(0.0);
        lm.attention_layer(0)->params().wo.value.fill(0.0);
        lm.attention_layer(0)->params().w_down.value.fill(0.0);
        Graph<double> g(false);
        CHECK(max_diff(lm.block_forward(g.constant(x), 0).value(), x) == 0.0);
    }
    SUBCASE("block is causal") {
        Graph<double> g(false);
        auto y = lm.block_forward(g.constant(x), 0).value();
        auto x2 = x;
        for (std::size_t i = 4 * D; i < L * D; ++i) x2[i] += 3.0;
        Graph<double> g2(false);
        auto y2 = lm.block_forward(g2.constant(x2), 0).value();
        for (std::size_t i = 0; i < 4 * D; ++i) CHECK(y[i] == y2[i]);
    }
}

TEST_CASE("language model logits") {
    ModelConfig m = tiny();
    Rng rng(10, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    Rng r(11, RngStream::kVerify);
    const auto ids = random_ids(15, m.vocab_size, r);
    const auto logits = lm.logits(ids);
    CHECK(logits.shape == Shape{15, m.vocab_size});
    for (double v : logits.data) CHECK(std::isfinite(v));

    SUBCASE("future ids do not move earlier logits") {
        auto ids2 = ids;
        for (std::size_t t = 9; t < ids2.size(); ++t) ids2[t] = (ids2[t] + 1) % int(m.vocab_size);
        const auto l2 = lm.logits(ids2);
        for (std::size_t i = 0; i < 9 * m.vocab_size; ++i) CHECK(logits[i] == l2[i]);
        bool changed = false;
        for (std::size_t i = 9 * m.vocab_size; i < l2.size(); ++i) changed |= logits[i] != l2[i];
        CHECK(changed);
    }
    SUBCASE("tied embedding row feeds both input and output") {
        // token 5 is absent from the input: only its logit column moves
        std::vector<int> ids3{1, 2, 3, 4};
        const auto before = lm.logits(ids3);
        for (std::size_t d = 0; d < m.model_dim; ++d) lm.embedding().value[5 * m.model_dim + d] += 0.5;
        const auto after = lm.logits(ids3);
        for (std::size_t t = 0; t < 4; ++t)
            for (std::size_t v = 0; v < m.vocab_size; ++v) {
                const std::size_t i = t * m.vocab_size + v;
                if (v == 5) CHECK(after[i] != before[i]);
                else CHECK(after[i] == before[i]);
            }
        // now it is present: every later logit changes
        ids3.push_back(5);
        ids3.push_back(1);
        const auto l = lm.logits(ids3);
        for (std::size_t d = 0; d < m.model_dim; ++d) lm.embedding().value[5 * m.model_dim + d] -= 0.5;
        const auto l0 = lm.logits(ids3);
        CHECK(l[5 * m.vocab_size] != l0[5 * m.vocab_size]);
    }
    SUBCASE("layer norms are reported per layer") {
        std::vector<double> norms;
        Graph<double> g(false);
        lm.forward(g, ids, &norms);
        CHECK(norms.size() == 1 + m.n_layers());
        for (double n : norms) CHECK(n > 0.0);
    }
    CHECK_THROWS_AS(lm.logits({0, int(m.vocab_size)}), InputError);
    CHECK_THROWS_AS(lm.logits({}), InputError);
    CHECK_THROWS_AS(lm.logits(std::vector<int>(m.max_len + 1, 0)), InputError);
}

TEST_CASE("pure-SCA ablation stacks three SCA layers per block") {
    ModelConfig m = tiny();
    m.use_attention = false;
    Rng rng(12, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    CHECK(lm.attention_layer(0) == nullptr);
    CHECK_NOTHROW(lm.sca_layer(1, 2));
    const auto l = lm.logits({1, 2, 3});
    for (double v : l.data) CHECK(std::isfinite(v));
}
