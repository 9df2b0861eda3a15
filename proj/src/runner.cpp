#include "seqcond/runner.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "seqcond/checkpoint.hpp"
#include "seqcond/judge.hpp"
#include "seqcond/rl_lab.hpp"
#include "seqcond/spectral_oracle.hpp"
#include "seqcond/verify_suite.hpp"

namespace seqcond {

namespace fs = std::filesystem;

Status status_of(const std::exception& e) {
    if (dynamic_cast<const CheckFailure*>(&e)) return Status::kCheckFailed;
    if (dynamic_cast<const InputError*>(&e)) return Status::kInputError;
    if (dynamic_cast<const IoError*>(&e)) return Status::kInputError;
    if (dynamic_cast<const NumericalError*>(&e)) return Status::kNumericalAbort;
    return Status::kInternal;
}

const char* status_name(Status s) {
    switch (s) {
        case Status::kOk: return "pass";
        case Status::kCheckFailed: return "check_failed";
        case Status::kInputError: return "input_error";
        case Status::kNumericalAbort: return "numerical_abort";
        case Status::kIoError: return "io_error";
        case Status::kInternal: return "internal_error";
    }
    return "?";
}

std::vector<std::string> report_schema_keys() {
    return {"schema_version", "command", "status", "exit_code", "seed", "precision", "threads",
            "checks",         "metrics", "artifacts", "warnings", "error"};
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

Json check_json(const std::string& name, std::size_t instances, double value, double bound, const char* relation) {
    const bool pass = std::string(relation) == "<=" ? value <= bound : value >= bound;
    return Json{{"name", name}, {"instances", instances}, {"value", value}, {"bound", bound}, {"relation", relation}, {"pass", pass}};
}

Json check_json(const oracle::CheckResult& c) {
    Json j = check_json(c.check_name, c.instances, c.max_abs_error, c.tolerance, "<=");
    j["pass"] = c.pass;
    return j;
}

struct Context {
    const RunConfig& cfg;
    Json& report;

    std::string report_path(const std::string& file) const { return (fs::path(cfg.report_dir) / file).string(); }
    void artifact(const std::string& path) { report["artifacts"].push_back(path); }
    void warn(const std::string& w) { report["warnings"].push_back(w); }
    void check(Json c) { report["checks"].push_back(std::move(c)); }
};

void run_oracle(Context& ctx) {
    for (const auto& c : oracle::run_oracle_suite(ctx.cfg.oracle)) ctx.check(check_json(c));
    const auto& o = ctx.cfg.oracle;
    ctx.report["metrics"] = Json{{"instances", o.instances},
                                 {"attention_instances", o.attention_instances},
                                 {"gradient_instances", o.gradient_instances},
                                 {"max_dim", o.max_dim},
                                 {"max_modulus", o.max_modulus},
                                 {"max_tokens", o.max_tokens},
                                 {"query_constant_scale", o.query_constant_scale}};
}

template <class T>
void verify_checkpoint(Context& ctx) {
    Rng rng(ctx.cfg.seed, RngStream::kInit);
    HybridLM<T> lm(ctx.cfg.model, rng);
    const auto m = load_checkpoint(ctx.cfg.verify_checkpoint, lm, static_cast<AdamW<T>*>(nullptr), ctx.cfg.model,
                                   ctx.cfg.force);
    double worst = 0.0;
    for (auto* p : lm.parameters())
        for (T v : p->value.data)
            if (!std::isfinite(double(v))) worst = INFINITY;
    ctx.check(check_json("checkpoint_finite", 1, worst, 0.0, "<="));
    ctx.report["metrics"]["checkpoint_step"] = m.step;
    ctx.report["metrics"]["checkpoint_hash"] = m.config_hash;
}

void run_verify(Context& ctx) {
    const auto& v = ctx.cfg.verify;
    ctx.report["metrics"] = Json{{"configs", v.configs}, {"max_len", v.max_len},
                                 {"streaming_tolerance", streaming_tolerance(v.precision)}};
    if (!ctx.cfg.verify_checkpoint.empty()) {
        if (ctx.cfg.precision == Precision::kSingle) verify_checkpoint<float>(ctx);
        else verify_checkpoint<double>(ctx);
    }
    for (const auto& c : run_verify_suite(v)) ctx.check(check_json(c));
}

std::string ckpt_name(std::size_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%06zu.ckpt", step);
    return buf;
}

template <class T>
void run_train(Context& ctx) {
    const RunConfig& cfg = ctx.cfg;
    Rng rng(cfg.seed, RngStream::kInit);
    HybridLM<T> lm(cfg.model, rng);
    Trainer<T> tr(lm, cfg.optim);
    std::size_t start = 0;
    if (!cfg.train.resume.empty()) {
        start = load_checkpoint(cfg.train.resume, lm, &tr.optimizer(), cfg.model, cfg.force).step;
        if (start > cfg.train.steps) throw InputError("train: checkpoint step exceeds train.steps");
    }
    const std::string ckdir = cfg.resolved_checkpoint_dir();
    std::string csv = "step,loss,accuracy,lr,wall_ms\n";
    const auto t0 = std::chrono::steady_clock::now();
    StepResult last;
    std::string current_step;
    try {
        for (std::size_t s = start; s < cfg.train.steps; ++s) {
            current_step = std::to_string(s);
            const Batch b = make_batch(cfg.task, cfg.train.batch_size, cfg.train.fixed_batch ? 0 : s);
            last = tr.train_step(b);
            const double ms = cfg.train.wall_clock
                                  ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()
                                  : 0.0;
            csv += std::to_string(s) + "," + fmt(last.loss) + "," + fmt(last.accuracy) + "," + fmt(last.lr) + "," +
                   fmt(std::round(ms)) + "\n";
            if (cfg.train.checkpoint_every && (s + 1) % cfg.train.checkpoint_every == 0 && s + 1 < cfg.train.steps) {
                const std::string p = (fs::path(ckdir) / ckpt_name(s + 1)).string();
                save_checkpoint(p, lm, cfg.model, &tr.optimizer(), s + 1);
                ctx.artifact(p);
            }
        }
    } catch (const NumericalError& e) {
        const Json diag{{"step", current_step}, {"error", e.what()}};
        const std::string dp = ctx.report_path("train_diagnostics.json");
        write_file_atomic(dp, diag.dump(2) + "\n");
        ctx.artifact(dp);
        const std::string cp = ctx.report_path("train_metrics.csv");
        write_file_atomic(cp, csv);
        ctx.artifact(cp);
        throw;
    }
    const std::string cp = ctx.report_path("train_metrics.csv");
    write_file_atomic(cp, csv);
    ctx.artifact(cp);
    const std::string fp = (fs::path(ckdir) / ckpt_name(cfg.train.steps)).string();
    save_checkpoint(fp, lm, cfg.model, &tr.optimizer(), cfg.train.steps);
    ctx.artifact(fp);

    Batch held;
    for (std::size_t i = 0; i < cfg.train.eval_batches; ++i) {
        TaskSpec spec = cfg.task;
        spec.seed = cfg.seed ^ 0x5eed0ff5e7ull;
        const Batch b = make_batch(spec, cfg.train.batch_size, i);
        held.insert(held.end(), b.begin(), b.end());
    }
    const EvalResult ev = held.empty() ? EvalResult{} : evaluate(lm, held);
    Json& m = ctx.report["metrics"];
    m = Json{{"start_step", start},
             {"steps", cfg.train.steps},
             {"parameter_count", lm.parameter_count()},
             {"task", task_name(cfg.task.kind)},
             {"final_loss", last.loss},
             {"final_accuracy", last.accuracy},
             {"eval_loss", ev.loss},
             {"eval_accuracy", ev.accuracy},
             {"config_hash", config_hash(cfg.model)}};
}

}  // namespace

template <class T>
RLPipelineResult run_rl_pipeline(HybridLM<T>& policy, const RLConfig& rl, const RLSetup& setup, std::uint64_t seed,
                                 const std::function<void(RLStage, const RLStepMetrics&)>& on_step) {
    RLPipelineResult out;
    const ModularTask& task = setup.task;
    task.validate();
    Trainer<T> warm(policy, setup.warm_start_optim);
    Rng dr(seed, RngStream::kData, 0xa000);
    for (std::size_t i = 0; i < setup.warm_start_steps; ++i) warm.train_step(task.warm_start_batch(setup.warm_start_batch, dr));
    const auto prompts = task.all_prompts();
    out.warm_accuracy = greedy_accuracy(policy, task, prompts, rl.max_new_tokens);
    for (RLStage stage : setup.stages) {
        RLConfig rc = rl;
        rc.stage = stage;
        auto judge = make_judge(setup.judge, setup.judge_options);
        RLTrainer<T> tr(policy, rc, task, *judge, seed);
        out.stages.push_back(tr.run(prompts, [&](const RLStepMetrics& m) {
            if (on_step) on_step(stage, m);
        }));
    }
    return out;
}

template RLPipelineResult run_rl_pipeline(HybridLM<float>&, const RLConfig&, const RLSetup&, std::uint64_t,
                                          const std::function<void(RLStage, const RLStepMetrics&)>&);
template RLPipelineResult run_rl_pipeline(HybridLM<double>&, const RLConfig&, const RLSetup&, std::uint64_t,
                                          const std::function<void(RLStage, const RLStepMetrics&)>&);

namespace {

template <class T>
void run_rl(Context& ctx) {
    const RunConfig& cfg = ctx.cfg;
    Rng rng(cfg.seed, RngStream::kInit);
    HybridLM<T> lm(cfg.model, rng);
    std::string csv =
        "stage,step,success_rate,mean_reward,kl,g_plus_norm,g_minus_norm,balance_scale,scaled_minus_norm,groups,"
        "skipped_groups,retained_traces,lr,eval_accuracy\n";
    double worst_excess = 0.0;
    std::size_t balanced_updates = 0;
    const auto res = run_rl_pipeline(lm, cfg.rl, cfg.rl_setup, cfg.seed, [&](RLStage st, const RLStepMetrics& m) {
        csv += stage_name(st) + "," + std::to_string(m.step) + "," + fmt(m.success_rate) + "," + fmt(m.mean_reward) +
               "," + fmt(m.kl) + "," + fmt(m.g_plus_norm) + "," + fmt(m.g_minus_norm) + "," + fmt(m.balance_scale) +
               "," + fmt(m.scaled_minus_norm) + "," + std::to_string(m.groups) + "," +
               std::to_string(m.skipped_groups) + "," + std::to_string(m.retained_traces) + "," + fmt(m.lr) + "," +
               fmt(m.eval_accuracy) + "\n";
        if (st == RLStage::kBalanced && m.g_plus_norm > 0.0) {
            ++balanced_updates;
            worst_excess = std::max(worst_excess, m.scaled_minus_norm - m.g_plus_norm * (1.0 + 1e-12));
        }
    });
    const std::string cp = ctx.report_path("rl_metrics.csv");
    write_file_atomic(cp, csv);
    ctx.artifact(cp);
    const std::string fp = (fs::path(cfg.resolved_checkpoint_dir()) / "rl_policy.ckpt").string();
    save_checkpoint(fp, lm, cfg.model, static_cast<AdamW<T>*>(nullptr), 0);
    ctx.artifact(fp);
    Json stages = Json::array();
    for (const auto& r : res.stages) {
        stages.push_back(Json{{"stage", stage_name(r.stage)},
                              {"accuracy_before", r.accuracy_before},
                              {"accuracy_after", r.accuracy_after},
                              {"steps", r.steps.size()}});
        for (const auto& w : r.warnings) ctx.warn(stage_name(r.stage) + ": " + w);
        if (r.stage == RLStage::kBalanced)
            ctx.check(check_json("balanced_negative_norm_bound", balanced_updates, std::max(worst_excess, 0.0), 0.0, "<="));
    }
    ctx.report["metrics"] = Json{{"warm_start_accuracy", res.warm_accuracy},
                                 {"modulus", cfg.rl_setup.task.modulus},
                                 {"judge", cfg.rl_setup.judge},
                                 {"stages", stages}};
}

void run_bench(Context& ctx) {
    const RunConfig& cfg = ctx.cfg;
    std::string csv = "kind,length,seconds,repetitions,state_bytes\n";
    Json results = Json::object();
    for (BenchKind k : cfg.bench_kinds) {
        const BenchResult r = scaling_bench(k, cfg.bench);
        Json pts = Json::array();
        bool constant = true;
        for (const auto& p : r.points) {
            csv += bench_name(k) + "," + std::to_string(p.length) + "," + fmt(p.seconds) + "," +
                   std::to_string(p.repetitions) + "," + std::to_string(p.state_bytes) + "\n";
            pts.push_back(Json{{"length", p.length}, {"seconds", p.seconds}, {"repetitions", p.repetitions},
                               {"state_bytes", p.state_bytes}});
            constant = constant && p.state_bytes == r.points.front().state_bytes;
        }
        results[bench_name(k)] = Json{{"slope", r.slope}, {"points", pts}};
        if (k == BenchKind::kSCA) {
            ctx.check(check_json("sca_loglog_slope", r.points.size(), r.slope, 1.3, "<="));
            ctx.check(check_json("sca_state_bytes_constant", r.points.size(), constant ? 0.0 : 1.0, 0.0, "<="));
        } else {
            ctx.check(check_json("attention_loglog_slope", r.points.size(), r.slope, 1.7, ">="));
        }
    }
    const std::string cp = ctx.report_path("bench_scaling.csv");
    write_file_atomic(cp, csv);
    ctx.artifact(cp);
    ctx.report["metrics"] = results;
}

Json base_report(Command cmd, std::uint64_t seed, const std::string& precision, unsigned threads) {
    return Json{{"schema_version", 1},
                {"command", command_name(cmd)},
                {"status", "pass"},
                {"exit_code", 0},
                {"seed", seed},
                {"precision", precision},
                {"threads", threads},
                {"checks", Json::array()},
                {"metrics", Json::object()},
                {"artifacts", Json::array()},
                {"warnings", Json::array()},
                {"error", nullptr}};
}

void finish(RunOutcome& out, Status s, const std::string& error) {
    out.status = s;
    out.report["status"] = status_name(s);
    out.report["exit_code"] = static_cast<int>(s);
    if (!error.empty()) out.report["error"] = error;
}

}  // namespace

RunOutcome execute(const RunConfig& cfg) {
    RunOutcome out;
    out.report = base_report(cfg.command, cfg.seed, precision_name(cfg.precision), cfg.threads);
    Context ctx{cfg, out.report};
    const bool single = cfg.precision == Precision::kSingle;
    try {
        switch (cfg.command) {
            case Command::kOracle: run_oracle(ctx); break;
            case Command::kVerify: run_verify(ctx); break;
            case Command::kTrain: single ? run_train<float>(ctx) : run_train<double>(ctx); break;
            case Command::kRL: single ? run_rl<float>(ctx) : run_rl<double>(ctx); break;
            case Command::kBench: run_bench(ctx); break;
        }
        Status s = Status::kOk;
        std::string failed;
        for (const auto& c : out.report["checks"])
            if (!c["pass"].get<bool>()) {
                s = Status::kCheckFailed;
                failed += (failed.empty() ? "" : ", ") + c["name"].get<std::string>();
            }
        finish(out, s, failed.empty() ? "" : "failed checks: " + failed);
    } catch (const std::exception& e) {
        finish(out, status_of(e), e.what());
    }
    const std::string path = (fs::path(cfg.report_dir) / (command_name(cfg.command) + "_report.json")).string();
    try {
        out.report["artifacts"].push_back(path);
        write_file_atomic(path, out.report.dump(2) + "\n");
    } catch (const std::exception& e) {
        out.report["artifacts"].erase(out.report["artifacts"].size() - 1);
        if (out.status == Status::kOk) finish(out, Status::kInputError, e.what());
    }
    return out;
}

RunOutcome execute(Command cmd, const Json& config, const Overrides& ov) {
    RunConfig cfg;
    try {
        cfg = parse_run_config(cmd, config, ov);
    } catch (const std::exception& e) {
        RunOutcome out;
        out.report = base_report(cmd, ov.seed, ov.precision.empty() ? "f64" : ov.precision, 1);
        finish(out, status_of(e), e.what());
        std::string dir = ov.report_dir;
        if (dir.empty()) {
            dir = "reports";
            if (config.is_object() && config.contains("report_dir") && config["report_dir"].is_string())
                dir = config["report_dir"].get<std::string>();
        }
        const std::string path = (fs::path(dir) / (command_name(cmd) + "_report.json")).string();
        try {
            out.report["artifacts"].push_back(path);
            write_file_atomic(path, out.report.dump(2) + "\n");
        } catch (const std::exception&) {
            out.report["artifacts"] = Json::array();
        }
        return out;
    }
    return execute(cfg);
}

}  // namespace seqcond
