#include <cmath>

#include "doctest.h"
#include "seqcond/autograd.hpp"
#include "seqcond/gradcheck.hpp"
#include "seqcond/rng.hpp"

using namespace seqcond;

namespace {

Param<double> random_param(const std::string& name, Shape s, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.data) v = rng.normal() * scale;
    return Param<double>(name, std::move(t));
}

// Sum of out * fixed random weights, so every output element gets a
// distinct upstream gradient.
Var<double> project(Var<double> out, std::uint64_t seed) {
    Rng rng(seed, RngStream::kVerify, 99);
    Tensor<double> w(out.shape());
    for (auto& v : w.data) v = rng.normal();
    return sum_all(out * out.g->constant(std::move(w)));
}

void expect_grads_ok(std::vector<Param<double>*> params, const LossBuilder<double>& build, double tol = 1e-7) {
    const auto report = finite_difference_check<double>(params, build, 1e-6);
    for (const auto& e : report.entries) {
        INFO(e.param << " rel error " << e.rel_error);
        CHECK(e.rel_error < tol);
    }
}

}  // namespace

TEST_CASE("broadcast arithmetic matches hand-computed values") {
    Graph<double> g(false);
    auto a = g.constant(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
    auto b = g.constant(Tensor<double>({3}, {10, 20, 30}));
    auto c = g.constant(Tensor<double>({2, 1}, {2, 3}));
    auto s = a + b;
    CHECK(s.value().data == std::vector<double>{11, 22, 33, 14, 25, 36});
    auto m = a * c;
    CHECK(m.value().data == std::vector<double>{2, 4, 6, 12, 15, 18});
    auto r = sum(a, 1);
    CHECK(r.value().data == std::vector<double>{6, 15});
    CHECK_THROWS_AS(a + g.constant(Tensor<double>({2}, {1, 2})), InputError);
}

TEST_CASE("elementwise and broadcast gradients") {
    Rng rng(1, RngStream::kVerify);
    auto a = random_param("a", {3, 1, 4}, rng);
    auto b = random_param("b", {2, 4}, rng);
    expect_grads_ok({&a, &b}, [&](Graph<double>& g) {
        auto x = g.param(a), y = g.param(b);
        return project(x * y + x / (square(y) + y.g->constant(Tensor<double>({1}, {1.0}))) - y, 1);
    });
    expect_grads_ok({&a}, [&](Graph<double>& g) {
        auto x = g.param(a);
        return project(silu(x) + softplus(x) + softsign(x) + cos(x) * sin(x) + exp(scale(x, 0.3)), 2);
    });
    expect_grads_ok({&a}, [&](Graph<double>& g) {
        auto x = g.param(a);
        return project(rsqrt(add_scalar(square(x), 0.5)) + log(add_scalar(square(x), 1.0)), 3);
    });
}

TEST_CASE("shape op gradients") {
    Rng rng(2, RngStream::kVerify);
    auto a = random_param("a", {3, 4, 5}, rng);
    auto b = random_param("b", {3, 4, 2}, rng);
    expect_grads_ok({&a, &b}, [&](Graph<double>& g) {
        auto x = g.param(a), y = g.param(b);
        auto z = concat_last(slice_last(x, 1, 4), y);
        auto w = index_select(z, 1, {3, 0, 0, 2});
        return project(reshape(mean(w, 2, true), {3, 4}) + sum(w, 2), 4);
    });
}

TEST_CASE("prefix sum backends agree and differentiate") {
    Rng rng(3, RngStream::kVerify);
    auto a = random_param("a", {7, 2, 3}, rng);
    Graph<double> g(false);
    auto x = g.param(a);
    auto c1 = prefix_sum(x, ScanBackend::kCumsum);
    auto c2 = prefix_sum(x, ScanBackend::kMaskedMatmul);
    for (std::size_t i = 0; i < c1.value().size(); ++i) CHECK(c1.value()[i] == doctest::Approx(c2.value()[i]).epsilon(1e-14));
    // row 0 is the input itself
    for (std::size_t j = 0; j < 6; ++j) CHECK(c1.value()[j] == a.value[j]);
    expect_grads_ok({&a}, [&](Graph<double>& gr) { return project(prefix_sum(gr.param(a)), 5); });
    expect_grads_ok({&a}, [&](Graph<double>& gr) {
        return project(prefix_sum(gr.param(a), ScanBackend::kMaskedMatmul), 5);
    });
}

TEST_CASE("normalized prefix sum") {
    Rng rng(4, RngStream::kVerify);
    auto x = random_param("x", {6, 2, 3}, rng);
    auto a = random_param("a", {6, 2}, rng);
    for (auto& v : a.value.data) v = 0.2 + std::abs(v);
    Graph<double> g(false);
    auto fused = normalized_prefix_sum(g.param(x), g.param(a));
    auto plain = prefix_sum(g.param(x)) / reshape(prefix_sum(g.param(a)), {6, 2, 1});
    for (std::size_t i = 0; i < fused.value().size(); ++i)
        CHECK(std::abs(fused.value()[i] - plain.value()[i]) <= 1e-14);
    auto masked = normalized_prefix_sum(g.param(x), g.param(a), ScanBackend::kMaskedMatmul);
    for (std::size_t i = 0; i < fused.value().size(); ++i)
        CHECK(std::abs(fused.value()[i] - masked.value()[i]) <= 1e-14);
    expect_grads_ok({&x, &a}, [&](Graph<double>& gr) {
        return project(normalized_prefix_sum(gr.param(x), gr.param(a)), 6);
    });
    a.value[0] = -a.value[0];
    CHECK_THROWS_AS(normalized_prefix_sum(g.param(x), g.param(a)), NumericalError);
    CHECK_THROWS_AS(normalized_prefix_sum(g.param(a), g.param(x)), InputError);
}

TEST_CASE("decay factors") {
    Rng rng(5, RngStream::kVerify);
    auto lam = random_param("lambda", {3}, rng);
    Tensor<double> d({4, 1}, std::vector<double>{3, 2, 1, 0});
    Graph<double> g(false);
    auto f = decay_factors(d, g.param(lam));
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t k = 0; k < 3; ++k) CHECK(f.value()[t * 3 + k] == std::exp(-d[t] * lam.value[k]));
    expect_grads_ok({&lam}, [&](Graph<double>& gr) { return project(decay_factors(d, gr.param(lam)), 7); });
}

TEST_CASE("causal depthwise conv") {
    Rng rng(4, RngStream::kVerify);
    auto x = random_param("x", {6, 3}, rng);
    auto k = random_param("k", {3, 4}, rng);
    SUBCASE("single position uses only the last tap") {
        Graph<double> g(false);
        Tensor<double> one({1, 3}, {1.5, -2.0, 0.25});
        auto y = causal_dwconv(g.constant(one), g.param(k));
        for (std::size_t ch = 0; ch < 3; ++ch) CHECK(y.value()[ch] == doctest::Approx(k.value[ch * 4 + 3] * one[ch]));
    }
    SUBCASE("history rows feed the leading positions") {
        Graph<double> g(false);
        auto full = causal_dwconv(g.param(x), g.param(k));
        // last row recomputed from a history of the three preceding rows
        Tensor<double> hist({3, 3});
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t ch = 0; ch < 3; ++ch) hist[r * 3 + ch] = x.value[(2 + r) * 3 + ch];
        Tensor<double> last({1, 3});
        for (std::size_t ch = 0; ch < 3; ++ch) last[ch] = x.value[5 * 3 + ch];
        auto step = causal_dwconv(g.constant(last), g.param(k), &hist);
        for (std::size_t ch = 0; ch < 3; ++ch) CHECK(step.value()[ch] == doctest::Approx(full.value()[5 * 3 + ch]));
    }
    expect_grads_ok({&x, &k}, [&](Graph<double>& g) { return project(causal_dwconv(g.param(x), g.param(k)), 6); });
}

TEST_CASE("dense and grouped linear gradients") {
    Rng rng(5, RngStream::kVerify);
    auto x = random_param("x", {4, 3, 5}, rng);
    auto w = random_param("w", {6, 5}, rng);
    auto gw = random_param("gw", {3, 2, 5}, rng);
    expect_grads_ok({&x, &w}, [&](Graph<double>& g) { return project(linear(g.param(x), g.param(w)), 7); });
    expect_grads_ok({&x, &gw}, [&](Graph<double>& g) { return project(grouped_linear(g.param(x), g.param(gw)), 8); });
}

TEST_CASE("causal attention matches a naive loop and differentiates") {
    Rng rng(6, RngStream::kVerify);
    const std::size_t L = 5, Hq = 4, Hkv = 2, dh = 3;
    auto q = random_param("q", {L, Hq, dh}, rng);
    auto k = random_param("k", {L, Hkv, dh}, rng);
    auto v = random_param("v", {L, Hkv, dh}, rng);
    const double sc = 0.7;
    Graph<double> g(false);
    auto out = causal_attention(g.param(q), g.param(k), g.param(v), sc).value();
    double worst = 0.0;
    for (std::size_t h = 0; h < Hq; ++h) {
        const std::size_t hk = h / 2;
        for (std::size_t t = 0; t < L; ++t) {
            std::vector<double> s(t + 1);
            double z = 0.0;
            for (std::size_t u = 0; u <= t; ++u) {
                double d = 0.0;
                for (std::size_t i = 0; i < dh; ++i) d += q.value[(t * Hq + h) * dh + i] * k.value[(u * Hkv + hk) * dh + i];
                s[u] = std::exp(sc * d);
                z += s[u];
            }
            for (std::size_t i = 0; i < dh; ++i) {
                double o = 0.0;
                for (std::size_t u = 0; u <= t; ++u) o += s[u] / z * v.value[(u * Hkv + hk) * dh + i];
                worst = std::max(worst, std::abs(o - out[(t * Hq + h) * dh + i]));
            }
        }
    }
    CHECK(worst <= 1e-12);
    expect_grads_ok({&q, &k, &v}, [&](Graph<double>& gr) {
        return project(causal_attention(gr.param(q), gr.param(k), gr.param(v), sc), 9);
    });
}

TEST_CASE("rope is a rotation and differentiates") {
    Rng rng(7, RngStream::kVerify);
    auto x = random_param("x", {4, 2, 6}, rng);
    Graph<double> g(false);
    auto y = rope(g.param(x), 3.0).value();
    // norms of each rotated pair are preserved
    for (std::size_t i = 0; i < x.value.size(); i += 2) {
        const double a = std::hypot(x.value[i], x.value[i + 1]);
        const double b = std::hypot(y[i], y[i + 1]);
        CHECK(a == doctest::Approx(b).epsilon(1e-13));
    }
    expect_grads_ok({&x}, [&](Graph<double>& gr) { return project(rope(gr.param(x), 1.5), 10); });
}

TEST_CASE("log_softmax, pick, embedding") {
    Rng rng(8, RngStream::kVerify);
    auto x = random_param("x", {3, 5}, rng);
    auto e = random_param("e", {6, 4}, rng);
    Graph<double> g(false);
    auto ls = log_softmax(g.param(x)).value();
    for (std::size_t r = 0; r < 3; ++r) {
        double z = 0.0;
        for (std::size_t i = 0; i < 5; ++i) z += std::exp(ls[r * 5 + i]);
        CHECK(z == doctest::Approx(1.0).epsilon(1e-14));
    }
    CHECK_THROWS_AS(embedding(g.param(e), {0, 6}), InputError);
    expect_grads_ok({&x}, [&](Graph<double>& gr) { return project(pick(log_softmax(gr.param(x)), {4, 0, 2}), 11); });
    expect_grads_ok({&e}, [&](Graph<double>& gr) { return project(embedding(gr.param(e), {1, 5, 1}), 12); });
}

TEST_CASE("rms norm gradient") {
    Rng rng(9, RngStream::kVerify);
    auto x = random_param("x", {3, 6}, rng);
    auto w = random_param("w", {6}, rng);
    expect_grads_ok({&x, &w}, [&](Graph<double>& g) { return project(rms_norm(g.param(x), g.param(w), 1e-6), 13); });
}

TEST_CASE("non-recording graph stores no backward rules") {
    Param<double> p("p", Tensor<double>({2}, {1.0, 2.0}));
    Graph<double> g(false);
    auto y = sum_all(square(g.param(p)));
    CHECK(y.value()[0] == doctest::Approx(5.0));
    CHECK_THROWS_AS(g.backward(y), InputError);
}
