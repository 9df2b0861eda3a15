#include "seqcond/config.hpp"

#include <cstdio>
#include <set>

#include "seqcond/errors.hpp"

namespace seqcond {

std::string command_name(Command c) {
    switch (c) {
        case Command::kOracle: return "oracle";
        case Command::kVerify: return "verify";
        case Command::kTrain: return "train";
        case Command::kRL: return "rl";
        case Command::kBench: return "bench";
    }
    return "?";
}

Command parse_command(const std::string& s) {
    for (Command c : {Command::kOracle, Command::kVerify, Command::kTrain, Command::kRL, Command::kBench})
        if (command_name(c) == s) return c;
    throw InputError("unknown command '" + s + "' (expected oracle, verify, train, rl or bench)");
}

std::string RunConfig::resolved_checkpoint_dir() const {
    return checkpoint_dir.empty() ? report_dir + "/checkpoints" : checkpoint_dir;
}

namespace {

class Reader {
public:
    Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw InputError(where() + "expected a JSON object");
    }

    bool has(const char* key) const { return j_.contains(key); }

    const Json* child(const char* key) {
        if (!j_.contains(key)) return nullptr;
        used_.insert(key);
        return &j_.at(key);
    }

    void get(const char* key, std::size_t& dst) {
        if (const Json* v = child(key)) {
            if (!v->is_number_integer() || v->get<long long>() < 0) throw bad(key, "a non-negative integer");
            dst = v->get<std::size_t>();
        }
    }
    void get(const char* key, std::uint64_t& dst, bool) {
        if (const Json* v = child(key)) {
            if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0))
                throw bad(key, "a non-negative integer");
            dst = v->get<std::uint64_t>();
        }
    }
    void get(const char* key, int& dst) {
        if (const Json* v = child(key)) {
            if (!v->is_number_integer()) throw bad(key, "an integer");
            dst = v->get<int>();
        }
    }
    void get(const char* key, unsigned& dst) {
        if (const Json* v = child(key)) {
            if (!v->is_number_integer() || v->get<long long>() < 0) throw bad(key, "a non-negative integer");
            dst = v->get<unsigned>();
        }
    }
    void get(const char* key, double& dst) {
        if (const Json* v = child(key)) {
            if (!v->is_number()) throw bad(key, "a number");
            dst = v->get<double>();
        }
    }
    void get(const char* key, bool& dst) {
        if (const Json* v = child(key)) {
            if (!v->is_boolean()) throw bad(key, "a boolean");
            dst = v->get<bool>();
        }
    }
    void get(const char* key, std::string& dst) {
        if (const Json* v = child(key)) {
            if (!v->is_string()) throw bad(key, "a string");
            dst = v->get<std::string>();
        }
    }
    void get(const char* key, std::vector<std::size_t>& dst) {
        if (const Json* v = child(key)) {
            if (!v->is_array()) throw bad(key, "an array of non-negative integers");
            dst.clear();
            for (const auto& e : *v) {
                if (!e.is_number_integer() || e.get<long long>() < 0) throw bad(key, "an array of non-negative integers");
                dst.push_back(e.get<std::size_t>());
            }
        }
    }
    std::vector<std::string> strings(const char* key) {
        std::vector<std::string> out;
        if (const Json* v = child(key)) {
            if (v->is_string()) return {v->get<std::string>()};
            if (!v->is_array()) throw bad(key, "a string or an array of strings");
            for (const auto& e : *v) {
                if (!e.is_string()) throw bad(key, "a string or an array of strings");
                out.push_back(e.get<std::string>());
            }
        }
        return out;
    }

    std::string sub(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void done() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw InputError("config: unknown key '" + sub(it.key().c_str()) + "'");
    }

private:
    std::string where() const { return "config" + (path_.empty() ? std::string() : " '" + path_ + "'") + ": "; }
    InputError bad(const char* key, const char* what) const {
        return InputError("config: '" + sub(key) + "' must be " + what);
    }

    const Json& j_;
    std::string path_;
    std::set<std::string> used_;
};

void read_sca(const Json& j, const std::string& path, SCAConfig& c, bool& dim_set, bool& len_set) {
    Reader r(j, path);
    dim_set = r.has("model_dim");
    len_set = r.has("seq_len_max");
    r.get("model_dim", c.model_dim);
    r.get("mem_heads", c.mem_heads);
    r.get("query_heads", c.query_heads);
    r.get("head_dim", c.head_dim);
    r.get("spectral_samples", c.spectral_samples);
    r.get("conv_kernel", c.conv_kernel);
    r.get("expand_factor", c.expand_factor);
    r.get("swiglu_expansion", c.swiglu_expansion);
    r.get("seq_len_max", c.seq_len_max);
    r.get("init_decay", c.init_decay);
    r.get("theta_min", c.theta_min);
    r.get("theta_max", c.theta_max);
    r.done();
}

ModelConfig read_model(const Json& j, const std::string& path, const ModelConfig& fallback) {
    Reader r(j, path);
    ModelConfig m = fallback;
    std::string preset;
    r.get("preset", preset);
    if (preset == "toy") m = ModelConfig::toy();
    else if (preset == "micro") m = ModelConfig::micro();
    else if (preset == "full_scale") m = ModelConfig::full_scale();
    else if (!preset.empty())
        throw InputError("config: '" + r.sub("preset") + "' must be toy, micro or full_scale");
    r.get("vocab_size", m.vocab_size);
    r.get("model_dim", m.model_dim);
    r.get("n_blocks", m.n_blocks);
    r.get("ffn_dim", m.ffn_dim);
    r.get("attn_heads", m.attn_heads);
    r.get("kv_heads", m.kv_heads);
    r.get("head_dim", m.head_dim);
    r.get("max_len", m.max_len);
    r.get("rope_base", m.rope_base);
    r.get("use_rope", m.use_rope);
    r.get("norm_eps", m.norm_eps);
    r.get("tie_embeddings", m.tie_embeddings);
    r.get("use_attention", m.use_attention);
    bool dim_set = false, len_set = false;
    if (const Json* s = r.child("sca")) read_sca(*s, r.sub("sca"), m.sca, dim_set, len_set);
    if (!dim_set) m.sca.model_dim = m.model_dim;
    if (!len_set) m.sca.seq_len_max = m.max_len;
    r.done();
    m.validate();
    return m;
}

void read_optim(const Json& j, const std::string& path, OptimConfig& o) {
    Reader r(j, path);
    r.get("lr", o.lr);
    r.get("beta1", o.beta1);
    r.get("beta2", o.beta2);
    r.get("eps", o.eps);
    r.get("weight_decay", o.weight_decay);
    r.get("warmup_steps", o.warmup_steps);
    r.get("clip_norm", o.clip_norm);
    r.done();
    o.validate();
}

void read_task(const Json& j, const std::string& path, TaskSpec& t) {
    Reader r(j, path);
    std::string kind = task_name(t.kind);
    r.get("kind", kind);
    t.kind = parse_task(kind);
    r.get("seq_len", t.seq_len);
    r.get("vocab_size", t.vocab_size);
    r.get("num_pairs", t.num_pairs);
    r.get("modulus", t.modulus);
    r.done();
}

void read_oracle(const Json& j, const std::string& path, oracle::OracleSuiteConfig& o) {
    Reader r(j, path);
    r.get("instances", o.instances);
    r.get("attention_instances", o.attention_instances);
    r.get("gradient_instances", o.gradient_instances);
    r.get("max_dim", o.max_dim);
    r.get("max_modulus", o.max_modulus);
    r.get("max_tokens", o.max_tokens);
    r.get("query_constant_scale", o.query_constant_scale);
    r.done();
}

void read_verify(const Json& j, const std::string& path, VerifySuiteConfig& v, std::string& checkpoint) {
    Reader r(j, path);
    r.get("configs", v.configs);
    r.get("max_len", v.max_len);
    r.get("gradcheck_layers", v.gradcheck_layers);
    r.get("gradcheck_len", v.gradcheck_len);
    r.get("model_gradcheck_entries", v.model_gradcheck_entries);
    r.get("rescale_instances", v.rescale_instances);
    r.get("checkpoint", checkpoint);
    r.done();
}

void read_train(const Json& j, const std::string& path, TrainLoop& t) {
    Reader r(j, path);
    r.get("steps", t.steps);
    r.get("batch_size", t.batch_size);
    r.get("eval_batches", t.eval_batches);
    r.get("checkpoint_every", t.checkpoint_every);
    r.get("fixed_batch", t.fixed_batch);
    r.get("wall_clock", t.wall_clock);
    r.get("resume", t.resume);
    r.done();
    if (t.batch_size == 0) throw InputError("config: 'train.batch_size' must be positive");
}

void read_rl(const Json& j, const std::string& path, RLConfig& c, RLSetup& s) {
    Reader r(j, path);
    std::vector<std::string> stages = r.strings("stages");
    if (r.has("stages")) {
        if (stages.empty()) throw InputError("config: '" + r.sub("stages") + "' must not be empty");
        s.stages.clear();
        for (const auto& n : stages) s.stages.push_back(parse_stage(n));
    }
    r.get("group_size", c.group_size);
    r.get("kl_coef", c.kl_coef);
    r.get("overlong_penalty", c.overlong_penalty);
    r.get("balance_eps", c.balance_eps);
    r.get("skip_mean_above", c.skip.mean_above);
    r.get("skip_min_above", c.skip.min_above);
    r.get("temperature", c.temperature);
    r.get("top_k", c.top_k);
    r.get("max_new_tokens", c.max_new_tokens);
    r.get("steps", c.steps);
    r.get("prompts_per_step", c.prompts_per_step);
    r.get("eval_every", c.eval_every);
    if (const Json* o = r.child("optim")) read_optim(*o, r.sub("optim"), c.optim);
    r.get("modulus", s.task.modulus);
    r.get("warm_start_steps", s.warm_start_steps);
    r.get("warm_start_batch", s.warm_start_batch);
    if (const Json* o = r.child("warm_start_optim")) read_optim(*o, r.sub("warm_start_optim"), s.warm_start_optim);
    r.get("judge", s.judge);
    r.get("judge_timeout_seconds", s.judge_options.timeout_seconds);
    r.get("judge_retries", s.judge_options.retries);
    r.done();
}

void read_bench(const Json& j, const std::string& path, BenchConfig& b, std::vector<BenchKind>& kinds) {
    Reader r(j, path);
    r.get("lengths", b.lengths);
    r.get("min_measure_seconds", b.min_measure_seconds);
    r.get("trials", b.trials);
    const auto names = r.strings("kinds");
    if (r.has("kinds")) {
        kinds.clear();
        for (const auto& n : names) {
            if (n == "sca") kinds.push_back(BenchKind::kSCA);
            else if (n == "attention") kinds.push_back(BenchKind::kAttention);
            else throw InputError("config: '" + r.sub("kinds") + "' entries must be sca or attention");
        }
        if (kinds.empty()) throw InputError("config: '" + r.sub("kinds") + "' must not be empty");
    }
    if (const Json* m = r.child("model")) b.model = read_model(*m, r.sub("model"), b.model);
    r.done();
    if (b.lengths.empty()) throw InputError("config: 'bench.lengths' must not be empty");
    if (!std::is_sorted(b.lengths.begin(), b.lengths.end()) || b.lengths.front() == 0)
        throw InputError("config: 'bench.lengths' must be positive and ascending");
    if (b.trials == 0) throw InputError("config: 'bench.trials' must be positive");
}

Precision parse_precision(const std::string& s) {
    if (s == "f64") return Precision::kDouble;
    if (s == "f32") return Precision::kSingle;
    throw InputError("precision must be f32 or f64, got '" + s + "'");
}

}  // namespace

RunConfig parse_run_config(Command cmd, const Json& j, const Overrides& ov) {
    RunConfig c;
    c.command = cmd;
    c.optim = OptimConfig{};
    c.rl_setup.warm_start_optim.lr = 3e-3;
    c.rl_setup.warm_start_optim.warmup_steps = 0;
    Reader r(j, "");
    bool has_seed = r.has("seed");
    r.get("seed", c.seed, true);
    if (ov.has_seed) {
        c.seed = ov.seed;
        has_seed = true;
    }
    if (!has_seed) throw InputError("config: 'seed' is mandatory (set it in the file or pass --seed)");
    std::string precision = "f64";
    r.get("precision", precision);
    if (!ov.precision.empty()) precision = ov.precision;
    c.precision = parse_precision(precision);
    r.get("threads", c.threads);
    if (ov.threads >= 0) c.threads = unsigned(ov.threads);
    if (c.threads == 0) throw InputError("threads must be at least 1");
    r.get("report_dir", c.report_dir);
    if (!ov.report_dir.empty()) c.report_dir = ov.report_dir;
    r.get("checkpoint_dir", c.checkpoint_dir);
    if (!ov.checkpoint_dir.empty()) c.checkpoint_dir = ov.checkpoint_dir;
    r.get("force", c.force);
    c.force = c.force || ov.force;

    auto section = [&](const char* key, bool allowed) -> const Json* {
        if (!r.has(key)) return nullptr;
        if (!allowed) throw InputError("config: section '" + std::string(key) + "' does not apply to '" + command_name(cmd) + "'");
        return r.child(key);
    };
    const bool model_cmd = cmd == Command::kTrain || cmd == Command::kRL || cmd == Command::kVerify;
    if (const Json* s = section("oracle", cmd == Command::kOracle)) read_oracle(*s, "oracle", c.oracle);
    if (const Json* s = section("verify", cmd == Command::kVerify)) read_verify(*s, "verify", c.verify, c.verify_checkpoint);
    if (const Json* s = section("model", model_cmd)) c.model = read_model(*s, "model", c.model);
    if (const Json* s = section("task", cmd == Command::kTrain)) read_task(*s, "task", c.task);
    if (const Json* s = section("optim", cmd == Command::kTrain)) read_optim(*s, "optim", c.optim);
    if (const Json* s = section("train", cmd == Command::kTrain)) read_train(*s, "train", c.train);
    if (const Json* s = section("rl", cmd == Command::kRL)) read_rl(*s, "rl", c.rl, c.rl_setup);
    if (const Json* s = section("bench", cmd == Command::kBench)) read_bench(*s, "bench", c.bench, c.bench_kinds);
    r.done();

    if (ov.instances >= 0) {
        if (cmd != Command::kOracle) throw InputError("--instances applies only to oracle");
        c.oracle.instances = std::size_t(ov.instances);
    }
    if (!ov.stage.empty()) {
        if (cmd != Command::kRL) throw InputError("--stage applies only to rl");
        c.rl_setup.stages.clear();
        if (ov.stage == "all") c.rl_setup.stages = {RLStage::kFormat, RLStage::kBalanced, RLStage::kDistill};
        else c.rl_setup.stages.push_back(parse_stage(ov.stage));
    }

    c.oracle.seed = c.seed;
    c.oracle.threads = c.threads;
    if (cmd == Command::kOracle && c.oracle.instances == 0) throw InputError("oracle: instances must be positive");
    c.verify.seed = c.seed;
    c.verify.precision = c.precision;
    c.task.seed = c.seed;
    c.bench.seed = c.seed;
    if (cmd == Command::kTrain) {
        c.task.vocab_size = c.model.vocab_size;
        c.task.validate();
        if (c.task.input_length() > c.model.max_len)
            throw InputError("config: task sequences are longer than model.max_len");
    }
    if (cmd == Command::kRL) {
        c.rl_setup.task.vocab_size = c.model.vocab_size;
        c.rl_setup.task.validate();
        c.rl.validate();
        if (c.rl_setup.warm_start_batch == 0) throw InputError("config: 'rl.warm_start_batch' must be positive");
    }
    return c;
}

Json to_json(const SCAConfig& c) {
    return Json{{"model_dim", c.model_dim},
                {"mem_heads", c.mem_heads},
                {"query_heads", c.query_heads},
                {"head_dim", c.head_dim},
                {"spectral_samples", c.spectral_samples},
                {"conv_kernel", c.conv_kernel},
                {"expand_factor", c.expand_factor},
                {"swiglu_expansion", c.swiglu_expansion},
                {"seq_len_max", c.seq_len_max},
                {"init_decay", c.init_decay},
                {"theta_min", c.theta_min},
                {"theta_max", c.theta_max}};
}

Json to_json(const ModelConfig& c) {
    return Json{{"vocab_size", c.vocab_size},
                {"model_dim", c.model_dim},
                {"n_blocks", c.n_blocks},
                {"ffn_dim", c.ffn_dim},
                {"attn_heads", c.attn_heads},
                {"kv_heads", c.kv_heads},
                {"head_dim", c.head_dim},
                {"max_len", c.max_len},
                {"rope_base", c.rope_base},
                {"use_rope", c.use_rope},
                {"norm_eps", c.norm_eps},
                {"tie_embeddings", c.tie_embeddings},
                {"use_attention", c.use_attention},
                {"sca", to_json(c.sca)}};
}

ModelConfig model_config_from_json(const Json& j) { return read_model(j, "model", ModelConfig::micro()); }

std::string config_hash(const ModelConfig& c) {
    const std::string s = to_json(c).dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace seqcond
