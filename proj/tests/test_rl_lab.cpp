#include <cmath>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "seqcond/errors.hpp"
#include "seqcond/rl_lab.hpp"

using namespace seqcond;

namespace {

JudgeScore score(double r, double a, double f, double o, bool overlong = false) {
    JudgeScore s;
    s.s_reason = r;
    s.s_answer = a;
    s.s_follow = f;
    s.s_overall = o;
    s.overlong = overlong;
    return s;
}

std::string fake_judge(const std::string& mode) { return std::string(FAKE_JUDGE_PATH) + " " + mode; }

JudgeRequest request(const std::string& id, const std::string& completion = "3 </s>") {
    JudgeRequest r;
    r.id = id;
    r.prompt = "<s> 1 + 2 =";
    r.completion = completion;
    r.rubric = "sum";
    return r;
}

ModelConfig micro_rl() {
    ModelConfig m = ModelConfig::micro();
    m.vocab_size = 12;
    return m;
}

}  // namespace

TEST_CASE("mix_reward extremes and bounds") {
    CHECK(std::abs(mix_reward(score(5, 5, 5, 100), 0.25) - 1.0) <= 1e-12);
    CHECK(std::abs(mix_reward(score(1, 1, 1, 0), 0.25) - 0.1) <= 1e-12);
    CHECK(std::abs(mix_reward(score(5, 5, 5, 100, true), 0.25) - 0.75) <= 1e-12);
    CHECK(std::abs(mix_reward(score(2, 4, 3, 50), 0.0) - (0.5 * (0.6 + 2.2 + 0.45) / 5 + 0.25)) <= 1e-12);
    CHECK_THROWS_AS(mix_reward(score(0.5, 1, 1, 0), 0.25), InputError);
    CHECK_THROWS_AS(mix_reward(score(1, 1, 1, 101), 0.25), InputError);
    Rng rng(1, RngStream::kVerify);
    for (int i = 0; i < 1000; ++i) {
        const double pen = rng.uniform(0, 1);
        const double r = mix_reward(score(rng.uniform(1, 5), rng.uniform(1, 5), rng.uniform(1, 5),
                                          rng.uniform(0, 100), rng.below(2) == 1),
                                    pen);
        CHECK(r >= -pen);
        CHECK(r <= 1.0);
    }
}

TEST_CASE("advantages are mean-centred without std scaling") {
    const auto a = compute_advantages({1, 0, 0, 0});
    const std::vector<double> want{0.75, -0.25, -0.25, -0.25};
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(a[i] - want[i]) <= 1e-12);
    for (double v : compute_advantages({0.3, 0.3, 0.3})) CHECK(v == 0.0);
    Rng rng(2, RngStream::kVerify);
    for (int rep = 0; rep < 200; ++rep) {
        std::vector<double> r(2 + rng.below(10));
        for (auto& v : r) v = rng.uniform(-1, 1);
        const auto x = compute_advantages(r);
        double s = 0.0;
        for (double v : x) s += v;
        CHECK(std::abs(s) <= 1e-10);
        auto shifted = r;
        for (auto& v : shifted) v += 3.5;
        const auto y = compute_advantages(shifted);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(x[i] - y[i]) <= 1e-12);
    }
    CHECK_THROWS_AS(compute_advantages({1.0}), InputError);
}

TEST_CASE("skip rule") {
    auto group = [](std::vector<double> o) {
        std::vector<JudgeScore> g;
        for (double v : o) g.push_back(score(5, 5, 5, v));
        return g;
    };
    CHECK(skip_mastered(group({95, 96, 92, 99})));
    CHECK_FALSE(skip_mastered(group({95, 95, 95, 80})));
    CHECK(skip_mastered(group({91, 91, 91, 91})));
    CHECK_FALSE(skip_mastered(group({90, 90, 90, 90})));
    CHECK_THROWS_AS(skip_mastered({}), InputError);
}

TEST_CASE("token-level weights") {
    const auto w = token_weights({10, 30});
    CHECK(w[0] == 0.25);
    CHECK(w[1] == 0.75);
    const auto u = token_weights({3, 1, 4, 1, 5});
    double s = 0.0;
    for (double v : u) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-12);
}

TEST_CASE("balanced gradient algebra") {
    const std::vector<double> gp{2, 0, 0}, gm{0, 0, -8};
    const auto b = balanced_gradient(gp, gm, 1e-300);
    CHECK(b.scale == 0.25);
    CHECK(b.scaled_minus_norm == 2.0);
    CHECK(b.g == std::vector<double>{2, 0, -2});
    const auto z = balanced_gradient(gp, {0, 0, 0}, 1e-8);
    CHECK(z.g == gp);
    const auto zp = balanced_gradient({0, 0, 0}, gm, 1e-8);
    CHECK(zp.scale == 0.0);
    CHECK(zp.g == std::vector<double>{0, 0, 0});
    CHECK_THROWS_AS(balanced_gradient(gp, {1, 2}, 1e-8), InputError);
    CHECK_THROWS_AS(balanced_gradient(gp, gm, 0.0), InputError);
    Rng rng(3, RngStream::kVerify);
    for (int rep = 0; rep < 200; ++rep) {
        std::vector<double> a(7), c(7);
        for (auto& v : a) v = rng.normal() * rng.uniform(0, 5);
        for (auto& v : c) v = rng.normal() * rng.uniform(0, 5);
        const auto r = balanced_gradient(a, c, 1e-8);
        CHECK(r.scaled_minus_norm <= r.norm_plus);
        CHECK(std::abs(r.scaled_minus_norm - r.norm_plus) <= 1.001e-8 * r.norm_plus / std::max(r.norm_minus, 1e-300) + 1e-15);
    }
}

TEST_CASE("grpo loss on a three-symbol vocabulary") {
    Rng rng(4, RngStream::kVerify);
    Param<double> z1("z1", Tensor<double>({2, 3})), z2("z2", Tensor<double>({3, 3}));
    for (auto* p : {&z1, &z2})
        for (auto& v : p->value.data) v = rng.normal();
    const std::vector<int> t1{0, 2}, t2{1, 1, 0};
    const double a1 = 0.6, a2 = -0.6;

    SUBCASE("policy-gradient term matches the analytic softmax gradient") {
        Graph<double> g(true);
        std::vector<CompletionTerm<double>> terms{{g.param(z1), t1, nullptr, a1}, {g.param(z2), t2, nullptr, a2}};
        const auto gl = grpo_loss(g, terms, 0.0);
        CHECK(gl.weights == std::vector<double>{0.4, 0.6});
        g.backward(gl.loss);
        auto check = [&](const Param<double>& z, const std::vector<int>& toks, double w, double a) {
            for (std::size_t t = 0; t < toks.size(); ++t) {
                double mx = -1e300, s = 0.0;
                for (std::size_t v = 0; v < 3; ++v) mx = std::max(mx, z.value[t * 3 + v]);
                for (std::size_t v = 0; v < 3; ++v) s += std::exp(z.value[t * 3 + v] - mx);
                for (std::size_t v = 0; v < 3; ++v) {
                    const double p = std::exp(z.value[t * 3 + v] - mx) / s;
                    const double want = -w * a / double(toks.size()) * ((int(v) == toks[t] ? 1.0 : 0.0) - p);
                    CHECK(std::abs(z.grad[t * 3 + v] - want) <= 1e-12);
                }
            }
        };
        check(z1, t1, 0.4, a1);
        check(z2, t2, 0.6, a2);
    }
    SUBCASE("identical policy and reference give zero KL") {
        Graph<double> g(false);
        Tensor<double> r1({2, 3}), r2({3, 3});
        r1 = log_softmax(g.constant(z1.value)).value();
        r2 = log_softmax(g.constant(z2.value)).value();
        std::vector<CompletionTerm<double>> terms{{g.constant(z1.value), t1, &r1, 0.0},
                                                  {g.constant(z2.value), t2, &r2, 0.0}};
        const auto gl = grpo_loss(g, terms, 0.02);
        CHECK(std::abs(gl.kl.value()[0]) <= 1e-12);
        CHECK(gl.pg.value()[0] == 0.0);
        CHECK(gl.loss.value()[0] == doctest::Approx(0.02 * gl.kl.value()[0]));
    }
    SUBCASE("zero advantages leave the pure KL term") {
        Graph<double> g(false);
        Tensor<double> r1({2, 3}, -std::log(3.0)), r2({3, 3}, -std::log(3.0));
        std::vector<CompletionTerm<double>> terms{{g.constant(z1.value), t1, &r1, 0.0},
                                                  {g.constant(z2.value), t2, &r2, 0.0}};
        const auto gl = grpo_loss(g, terms, 0.5);
        // exact categorical KL against the uniform reference
        double kl = 0.0;
        auto add = [&](const Tensor<double>& z, std::size_t len, double w) {
            for (std::size_t t = 0; t < len; ++t) {
                double s = 0.0;
                for (std::size_t v = 0; v < 3; ++v) s += std::exp(z[t * 3 + v]);
                for (std::size_t v = 0; v < 3; ++v) {
                    const double p = std::exp(z[t * 3 + v]) / s;
                    kl += w / double(len) * p * (std::log(p) + std::log(3.0));
                }
            }
        };
        add(z1.value, 2, 0.4);
        add(z2.value, 3, 0.6);
        CHECK(gl.pg.value()[0] == 0.0);
        CHECK(std::abs(gl.kl.value()[0] - kl) <= 1e-12);
        CHECK(std::abs(gl.loss.value()[0] - 0.5 * kl) <= 1e-12);
    }
    SUBCASE("KL gradient matches finite differences") {
        Tensor<double> r1({2, 3}), r2({3, 3});
        for (auto& v : r1.data) v = rng.normal();
        for (auto& v : r2.data) v = rng.normal();
        Graph<double> g0(false);
        r1 = log_softmax(g0.constant(r1)).value();
        r2 = log_softmax(g0.constant(r2)).value();
        const auto rep = finite_difference_check<double>({&z1, &z2}, [&](Graph<double>& g) {
            std::vector<CompletionTerm<double>> terms{{g.param(z1), t1, &r1, a1}, {g.param(z2), t2, &r2, a2}};
            return grpo_loss(g, terms, 0.3).loss;
        });
        CHECK(rep.worst_rel_error() <= 1e-7);
    }
    Graph<double> g(false);
    std::vector<CompletionTerm<double>> missing{{g.constant(z1.value), t1, nullptr, 1.0}};
    CHECK_THROWS_AS(grpo_loss(g, missing, 0.02), InputError);
}

TEST_CASE("self-distillation trace weights up-weight hard problems") {
    const auto hard = distill_weights(compute_advantages({1, 0, 0, 0}));
    CHECK(std::abs(hard[0] - 0.75) <= 1e-12);
    for (std::size_t i = 1; i < 4; ++i) CHECK(hard[i] == 0.0);
    const auto easy = distill_weights(compute_advantages({1, 1, 1, 0}));
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(easy[i] - 0.25) <= 1e-12);
    CHECK(easy[3] == 0.0);
    for (double v : distill_weights(compute_advantages({1, 1, 1, 1}))) CHECK(v == 0.0);
}

TEST_CASE("stub judge") {
    StubJudge j;
    JudgeRequest r = request("a");
    r.correct = true;
    r.well_formatted = true;
    const auto s = j.score(r);
    REQUIRE(s);
    CHECK(s->s_answer == 5.0);
    CHECK(mix_reward(*s, 0.25) == doctest::Approx(1.0));
    r.correct = false;
    CHECK(j.score(r)->s_answer <= 2.0);
    r.overlong = true;
    CHECK(j.score(r)->overlong);
}

TEST_CASE("reply parsing") {
    CHECK(parse_judge_reply(R"({"id":"q","s_reason":2,"s_answer":3,"s_follow":4.5,"s_overall":70})", "q"));
    std::string why;
    CHECK_FALSE(parse_judge_reply(R"({"id":"q","s_reason":2,"s_answer":3,"s_follow":4.5})", "q", &why));
    CHECK(why.find("s_overall") != std::string::npos);
    CHECK_FALSE(parse_judge_reply(R"({"id":"q","s_reason":0,"s_answer":3,"s_follow":4,"s_overall":1})", "q"));
    CHECK_FALSE(parse_judge_reply(R"({"id":"r","s_reason":2,"s_answer":3,"s_follow":4,"s_overall":1})", "q"));
    CHECK_FALSE(parse_judge_reply("[]", "q"));
    const auto req = nlohmann::json::parse(format_judge_request(request("z")));
    CHECK(req["id"] == "z");
    CHECK(req.size() == 4);
}

TEST_CASE("subprocess judge") {
    SUBCASE("good replies") {
        SubprocessJudge j(fake_judge("good"));
        const auto a = j.score(request("1"));
        REQUIRE(a);
        CHECK(a->s_answer == 5.0);
        CHECK(a->s_overall == 88.0);
        const auto b = j.score(request("2", "7 7 7"));
        REQUIRE(b);
        CHECK(b->s_answer == 1.5);
        CHECK(j.restarts() == 0);
    }
    SUBCASE("malformed replies exhaust the retries") {
        SubprocessJudge j(fake_judge("malformed"));
        CHECK_FALSE(j.score(request("1")));
        CHECK(j.log().size() == 3);
    }
    SUBCASE("a flaky judge succeeds on retry") {
        SubprocessJudge j(fake_judge("flaky"));
        CHECK(j.score(request("1")));
        CHECK(j.log().size() == 1);
    }
    SUBCASE("timeouts restart the process") {
        ExternalJudgeOptions o;
        o.timeout_seconds = 0.1;
        o.retries = 1;
        SubprocessJudge j(fake_judge("slow"), o);
        CHECK_FALSE(j.score(request("1")));
        CHECK(j.restarts() == 2);
    }
    SUBCASE("mismatched ids and dead processes fail cleanly") {
        SubprocessJudge w(fake_judge("wrongid"));
        CHECK_FALSE(w.score(request("1")));
        SubprocessJudge e(fake_judge("exit"));
        CHECK_FALSE(e.score(request("1")));
    }
}

TEST_CASE("http judge") {
    httplib::Server svr;
    int hits = 0;
    svr.Post("/judge", [&](const httplib::Request& req, httplib::Response& res) {
        ++hits;
        auto j = nlohmann::json::parse(req.body);
        if (hits == 1) {
            res.status = 500;
            return;
        }
        nlohmann::json r{{"id", j["id"]}, {"s_reason", 3}, {"s_answer", 5}, {"s_follow", 4}, {"s_overall", 90}};
        res.set_content(r.dump(), "application/json");
    });
    const int port = svr.bind_to_any_port("127.0.0.1");
    std::thread th([&] { svr.listen_after_bind(); });
    svr.wait_until_ready();
    auto judge = make_judge("http://127.0.0.1:" + std::to_string(port) + "/judge");
    const auto s = judge->score(request("h1"));
    svr.stop();
    th.join();
    REQUIRE(s);
    CHECK(s->s_overall == 90.0);
    CHECK(hits == 2);
    CHECK(judge->log().size() == 1);
    CHECK_THROWS_AS(make_judge("carrier-pigeon"), InputError);
}

TEST_CASE("modular task and sampling") {
    ModularTask task;
    task.modulus = 5;
    task.vocab_size = 12;
    const auto p = task.prompt(3, 4);
    CHECK(task.answer_token(p) == tokens::kFirstSymbol + 2);
    CHECK(task.exact_match(p, {tokens::kFirstSymbol + 2, tokens::kEos}));
    CHECK_FALSE(task.exact_match(p, {tokens::kFirstSymbol + 2}));
    CHECK(task.correct(p, {tokens::kFirstSymbol + 2, 7, 7}));
    CHECK(task.all_prompts().size() == 25);
    CHECK(detokenize(p) == "<s> 3 + 4 =");

    Rng rng(5, RngStream::kInit);
    HybridLM<double> lm(micro_rl(), rng);
    Rng s1(6, RngStream::kSample), s2(6, RngStream::kSample);
    const auto c1 = sample_completion(lm, p, 1.0, 0, 3, s1);
    CHECK(c1 == sample_completion(lm, p, 1.0, 0, 3, s2));
    CHECK(c1.size() <= 3);
    // top-1 sampling is greedy decoding
    Rng s3(7, RngStream::kSample);
    CHECK(sample_completion(lm, p, 1.0, 1, 3, s3) == greedy_completion(lm, p, 3));
}

TEST_CASE("malformed external replies skip the group and the run continues") {
    Rng rng(8, RngStream::kInit);
    HybridLM<double> lm(micro_rl(), rng);
    ModularTask task{5, 12};
    RLConfig cfg;
    cfg.stage = RLStage::kFormat;
    SubprocessJudge bad(fake_judge("malformed"));
    Rng s(9, RngStream::kSample);
    const auto g1 = rollout_group(lm, task, task.prompt(1, 1), cfg, bad, s, "g1");
    CHECK(g1.skipped);
    CHECK(g1.skip_reason.find("judge failure") != std::string::npos);
    StubJudge stub;
    const auto g2 = rollout_group(lm, task, task.prompt(1, 2), cfg, stub, s, "g2");
    CHECK_FALSE(g2.skipped);
    RLTrainer<double> tr(lm, cfg, task, stub, 1);
    const auto m = tr.update({g1, g2});
    CHECK(m.skipped_groups == 1);
    CHECK(m.groups == 2);
    CHECK(m.lr > 0.0);
}

TEST_CASE("Dr. GRPO with equal rewards and no KL makes no update") {
    Rng rng(10, RngStream::kInit);
    HybridLM<double> lm(micro_rl(), rng);
    ModularTask task{5, 12};
    RLConfig cfg;
    cfg.stage = RLStage::kFormat;
    cfg.kl_coef = 0.0;
    StubJudge stub;
    RLTrainer<double> tr(lm, cfg, task, stub, 2);
    RolloutGroup grp;
    grp.prompt = task.prompt(0, 1);
    grp.completions = {{7, 3}, {8, 3}, {9, 9, 9}};
    grp.rewards = {0.5, 0.5, 0.5};
    grp.advantages = compute_advantages(grp.rewards);
    grp.correct = {true, false, false};
    std::vector<Tensor<double>> before;
    for (auto* p : lm.parameters()) before.push_back(p->value);
    tr.update({grp});
    const auto ps = lm.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) CHECK(ps[i]->value.data == before[i].data);
}

TEST_CASE("balanced update keeps the negative mass below the positive mass") {
    Rng rng(11, RngStream::kInit);
    HybridLM<double> lm(micro_rl(), rng);
    ModularTask task{5, 12};
    RLConfig cfg;
    cfg.stage = RLStage::kBalanced;
    StubJudge stub;
    RLTrainer<double> tr(lm, cfg, task, stub, 3);
    RolloutGroup grp;
    grp.prompt = task.prompt(2, 2);
    grp.completions = {{10, 3}, {7, 3}, {8, 3}, {9, 3}};
    grp.rewards = {1, 0, 0, 0};
    grp.advantages = compute_advantages(grp.rewards);
    grp.correct = {true, false, false, false};
    for (int step = 0; step < 5; ++step) {
        const auto m = tr.update({grp});
        CHECK(m.g_plus_norm > 0.0);
        CHECK(m.g_minus_norm > 0.0);
        CHECK(m.scaled_minus_norm <= m.g_plus_norm);
        CHECK(m.scaled_minus_norm == doctest::Approx(m.g_plus_norm).epsilon(1e-6));
        CHECK(m.kl >= 0.0);
    }
}

TEST_CASE("self-distillation ignores negative-advantage traces") {
    ModularTask task{5, 12};
    RLConfig cfg;
    cfg.stage = RLStage::kDistill;
    StubJudge stub;
    RolloutGroup full;
    full.prompt = task.prompt(1, 3);
    full.completions = {{10, 3}, {7, 3}, {10, 3}, {9, 9}};
    full.rewards = {1, 0, 1, 0};
    full.advantages = compute_advantages(full.rewards);
    full.correct = {true, false, true, false};
    RolloutGroup kept = full;
    kept.completions = {{10, 3}, {10, 3}};
    kept.rewards = {1, 1};
    kept.advantages = {0.5, 0.5};
    kept.correct = {true, true};

    auto run = [&](const RolloutGroup& g) {
        Rng rng(12, RngStream::kInit);
        HybridLM<double> lm(micro_rl(), rng);
        RLTrainer<double> tr(lm, cfg, task, stub, 4);
        const auto m = tr.update({g});
        std::vector<double> flat;
        for (auto* p : lm.parameters())
            for (double v : p->value.data) flat.push_back(v);
        return std::pair{m.retained_traces, flat};
    };
    const auto a = run(full), b = run(kept);
    CHECK(a.first == 2);
    CHECK(b.first == 2);
    CHECK(a.second == b.second);

    RolloutGroup solved = full;
    solved.rewards = {1, 1, 1, 1};
    solved.advantages = compute_advantages(solved.rewards);
    Rng rng(13, RngStream::kInit);
    HybridLM<double> lm(micro_rl(), rng);
    RLTrainer<double> tr(lm, cfg, task, stub, 5);
    const auto m = tr.update({solved});
    CHECK(m.retained_traces == 0);
    CHECK(m.lr == 0.0);
}

TEST_CASE("config validation") {
    RLConfig c;
    c.group_size = 1;
    CHECK_THROWS_AS(c.validate(), InputError);
    c = RLConfig{};
    c.balance_eps = 0.0;
    CHECK_THROWS_AS(c.validate(), InputError);
    c = RLConfig{};
    c.kl_coef = -1;
    CHECK_THROWS_AS(c.validate(), InputError);
    CHECK(parse_stage("distill") == RLStage::kDistill);
    CHECK_THROWS_AS(parse_stage("ppo"), InputError);
}
