#include <cmath>

#include "doctest.h"
#include "seqcond/errors.hpp"
#include "seqcond/train_harness.hpp"

using namespace seqcond;

namespace {

Batch fixed_batch(const ModelConfig& m, std::size_t n, std::size_t L, std::uint64_t seed) {
    Rng rng(seed, RngStream::kData);
    Batch b;
    for (std::size_t i = 0; i < n; ++i) {
        Example ex;
        for (std::size_t t = 0; t < L; ++t) {
            ex.input.push_back(int(rng.below(m.vocab_size)));
            ex.target.push_back(int(rng.below(m.vocab_size)));
            ex.mask.push_back(1);
        }
        b.push_back(ex);
    }
    return b;
}

}  // namespace

TEST_CASE("copy task layout") {
    TaskSpec spec;
    spec.kind = TaskKind::kCopy;
    spec.seq_len = 8;
    spec.vocab_size = 20;
    spec.seed = 4;
    const Batch b = make_batch(spec, 3);
    for (const auto& ex : b) {
        REQUIRE(ex.input.size() == spec.input_length());
        CHECK(ex.input[0] == tokens::kBos);
        CHECK(ex.input[9] == tokens::kSep);
        for (std::size_t i = 0; i < 8; ++i) {
            // the symbol after SEP + i equals the i-th source symbol
            CHECK(ex.target[9 + i] == ex.input[1 + i]);
            CHECK(ex.mask[9 + i] == 1);
            CHECK(ex.mask[i] == 0);
            CHECK(ex.input[1 + i] >= tokens::kFirstSymbol);
            CHECK(ex.input[1 + i] < 20);
        }
    }
}

TEST_CASE("recall task layout") {
    TaskSpec spec;
    spec.kind = TaskKind::kRecall;
    spec.num_pairs = 5;
    spec.vocab_size = 30;
    spec.seed = 2;
    for (const auto& ex : make_batch(spec, 20)) {
        REQUIRE(ex.input.size() == 13);
        std::size_t scored = 0;
        for (auto m : ex.mask) scored += m;
        CHECK(scored == 1);
        CHECK(ex.mask.back() == 1);
        const int key = ex.input.back();
        int expected = -1;
        for (std::size_t i = 0; i < 5; ++i) {
            if (ex.input[1 + 2 * i] == key) expected = ex.input[2 + 2 * i];
            for (std::size_t j = 0; j < i; ++j) CHECK(ex.input[1 + 2 * i] != ex.input[1 + 2 * j]);
        }
        CHECK(ex.target.back() == expected);
    }
    spec.num_pairs = 13;
    CHECK_THROWS_AS(make_batch(spec, 1), InputError);
}

TEST_CASE("modular task layout") {
    TaskSpec spec;
    spec.kind = TaskKind::kModArith;
    spec.modulus = 5;
    spec.vocab_size = 16;
    for (const auto& ex : make_batch(spec, 30)) {
        REQUIRE(ex.input.size() == 6);
        const int a = ex.input[1] - tokens::kFirstSymbol, b = ex.input[3] - tokens::kFirstSymbol;
        CHECK(ex.input[2] == tokens::kPlus);
        CHECK(ex.input[4] == tokens::kEq);
        CHECK(ex.target[4] == tokens::kFirstSymbol + (a + b) % 5);
        CHECK(ex.target[5] == tokens::kEos);
        CHECK(ex.mask == std::vector<std::uint8_t>{0, 0, 0, 0, 1, 0});
    }
    spec.modulus = 11;
    CHECK_THROWS_AS(spec.validate(), InputError);
}

TEST_CASE("batches are deterministic in seed and index") {
    TaskSpec spec;
    spec.kind = TaskKind::kRecall;
    spec.seed = 9;
    const Batch a = make_batch(spec, 4, 7), b = make_batch(spec, 4, 7), c = make_batch(spec, 4, 8);
    for (std::size_t i = 0; i < 4; ++i) CHECK(a[i].input == b[i].input);
    bool differs = false;
    for (std::size_t i = 0; i < 4; ++i) differs |= a[i].input != c[i].input;
    CHECK(differs);
    CHECK(parse_task("modular") == TaskKind::kModArith);
    CHECK_THROWS_AS(parse_task("sort"), InputError);
}

TEST_CASE("AdamW update against a hand computation") {
    Param<double> p("w", Tensor<double>({2, 1}, {1.0, -2.0}));
    Param<double> b("b", Tensor<double>({1}, {0.5}));
    OptimConfig cfg;
    cfg.lr = 0.1;
    cfg.warmup_steps = 0;
    AdamW<double> opt(cfg, {&p, &b});
    p.grad = Tensor<double>({2, 1}, {0.3, 0.0});
    b.grad = Tensor<double>({1}, {-4.0});
    opt.step({&p, &b});
    // first step: m_hat = g, v_hat = g^2, so the step is lr * sign(g) (up to eps)
    CHECK(p.value[0] == doctest::Approx(1.0 - 0.1 * (0.3 / (0.3 + 1e-8) + 0.01 * 1.0)).epsilon(1e-14));
    CHECK(p.value[1] == doctest::Approx(-2.0 - 0.1 * 0.01 * -2.0).epsilon(1e-14));
    CHECK(b.value[0] == doctest::Approx(0.5 + 0.1 * 4.0 / (4.0 + 1e-8)).epsilon(1e-14));

    OptimConfig w;
    w.lr = 1.0;
    w.warmup_steps = 4;
    AdamW<double> o2(w, {});
    CHECK(o2.lr_at(0) == 0.25);
    CHECK(o2.lr_at(3) == 1.0);
    CHECK(o2.lr_at(100) == 1.0);
    w.beta2 = 1.0;
    CHECK_THROWS_AS(w.validate(), InputError);
}

TEST_CASE("learning rate zero leaves parameters unchanged") {
    ModelConfig m = ModelConfig::micro();
    Rng rng(1, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    std::vector<Tensor<double>> before;
    for (auto* p : lm.parameters()) before.push_back(p->value);
    OptimConfig cfg;
    cfg.lr = 0.0;
    Trainer<double> tr(lm, cfg);
    tr.train_step(fixed_batch(m, 2, 6, 1));
    const auto ps = lm.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) CHECK(ps[i]->value.data == before[i].data);
}

TEST_CASE("one step on a repeated batch lowers its loss") {
    ModelConfig m = ModelConfig::micro();
    Rng rng(2, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    OptimConfig cfg;
    cfg.lr = 1e-3;
    cfg.warmup_steps = 0;
    Trainer<double> tr(lm, cfg);
    const Batch b = fixed_batch(m, 2, 8, 2);
    const double l0 = evaluate(lm, b).loss;
    const StepResult r = tr.train_step(b);
    CHECK(r.loss == doctest::Approx(l0).epsilon(1e-12));
    CHECK(evaluate(lm, b).loss < l0);
}

TEST_CASE("gradient clipping caps the applied gradient norm") {
    ModelConfig m = ModelConfig::micro();
    Rng rng(3, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    const Batch b = fixed_batch(m, 1, 8, 3);
    const StepResult r = loss_and_grad(lm, b);
    CHECK(r.grad_norm == doctest::Approx(global_grad_norm(lm.parameters())));
    OptimConfig cfg;
    cfg.clip_norm = r.grad_norm / 4;
    Trainer<double> tr(lm, cfg);
    tr.train_step(b);
    CHECK(global_grad_norm(lm.parameters()) == doctest::Approx(r.grad_norm / 4).epsilon(1e-12));
}

TEST_CASE("full micro model gradient matches finite differences") {
    ModelConfig m = ModelConfig::micro();
    Rng rng(4, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    // move every tensor off its neutral initialization
    Rng pr(5, RngStream::kVerify);
    for (auto* p : lm.parameters())
        for (auto& v : p->value.data) v += 0.05 * pr.normal();
    const Batch b = fixed_batch(m, 1, 8, 5);
    const GradCheckReport rep = model_gradcheck(lm, b, 1e-5, 24, 6);
    CHECK(rep.entries.size() == lm.parameters().size());
    for (const auto& e : rep.entries) {
        INFO(e.param << " rel " << e.rel_error);
        CHECK(e.rel_error <= 1e-3);
    }
}

TEST_CASE("non-finite loss aborts with layer diagnostics") {
    ModelConfig m = ModelConfig::micro();
    Rng rng(6, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    lm.find("block0.attn.wv")->value[0] = std::nan("");
    try {
        loss_and_grad(lm, fixed_batch(m, 1, 6, 6));
        FAIL("expected a numerical error");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("layer activation RMS") != std::string::npos);
    }
}

TEST_CASE("training is bit-reproducible") {
    auto run = [] {
        ModelConfig m = ModelConfig::micro();
        Rng rng(7, RngStream::kInit);
        HybridLM<double> lm(m, rng);
        OptimConfig cfg;
        cfg.lr = 3e-3;
        Trainer<double> tr(lm, cfg);
        TaskSpec spec;
        spec.kind = TaskKind::kCopy;
        spec.seq_len = 3;
        spec.vocab_size = m.vocab_size;
        spec.seed = 1;
        std::vector<double> losses;
        for (std::size_t s = 0; s < 5; ++s) losses.push_back(tr.train_step(make_batch(spec, 2, s)).loss);
        return losses;
    };
    CHECK(run() == run());
}

TEST_CASE("micro model overfits a fixed batch") {
    ModelConfig m = ModelConfig::micro();
    Rng rng(8, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    OptimConfig cfg;
    cfg.lr = 1e-2;
    cfg.warmup_steps = 20;
    cfg.weight_decay = 0.0;
    Trainer<double> tr(lm, cfg);
    TaskSpec spec;
    spec.kind = TaskKind::kCopy;
    spec.seq_len = 4;
    spec.vocab_size = m.vocab_size;
    spec.seed = 3;
    const Batch b = make_batch(spec, 4);
    double loss = 1e9;
    std::size_t steps = 0;
    while (steps < 2000 && loss >= 0.01) {
        tr.train_step(b);
        ++steps;
        if (steps % 25 == 0) loss = evaluate(lm, b).loss;
    }
    INFO("steps " << steps << " loss " << loss);
    CHECK(loss < 0.01);
}

TEST_CASE("scaling bench bookkeeping") {
    BenchConfig cfg;
    cfg.lengths = {16, 32, 64};
    cfg.min_measure_seconds = 0.002;
    cfg.trials = 1;
    const BenchResult s = scaling_bench(BenchKind::kSCA, cfg);
    REQUIRE(s.points.size() == 3);
    for (const auto& p : s.points) {
        CHECK(p.seconds > 0.0);
        CHECK(p.repetitions >= 1);
        CHECK(p.state_bytes == s.points[0].state_bytes);
    }
    const BenchResult a = scaling_bench(BenchKind::kAttention, cfg);
    CHECK(a.points[2].state_bytes == 4 * a.points[0].state_bytes);
    cfg.lengths = {};
    CHECK_THROWS_AS(scaling_bench(BenchKind::kSCA, cfg), InputError);
    cfg.lengths = {64, 32};
    CHECK_THROWS_AS(scaling_bench(BenchKind::kSCA, cfg), InputError);

    // slope over the largest decade only
    std::vector<BenchPoint> pts;
    for (std::size_t L : {1u, 10u, 100u, 1000u}) pts.push_back({L, L <= 10 ? 1.0 : double(L) * double(L), 1, 0});
    CHECK(loglog_slope(pts) == doctest::Approx(2.0).epsilon(1e-12));
}
