#include "seqcond/seqcond_c.h"

#include <memory>
#include <string>
#include <variant>

#include "seqcond/checkpoint.hpp"
#include "seqcond/runner.hpp"

using namespace seqcond;

struct seqcond_run {
    Command command = Command::kOracle;
    Json config;
    Overrides overrides;
    std::string report = "{}";
};

struct seqcond_model {
    std::variant<std::unique_ptr<HybridLM<float>>, std::unique_ptr<HybridLM<double>>> lm;
    ModelConfig config;
};

namespace {

thread_local std::string g_last_error;

seqcond_status fail(seqcond_status s, const std::string& msg) {
    g_last_error = msg;
    return s;
}

seqcond_status to_c(Status s) { return static_cast<seqcond_status>(static_cast<int>(s)); }

template <class F>
seqcond_status guarded(F&& f) {
    try {
        g_last_error.clear();
        return f();
    } catch (const std::exception& e) {
        return fail(to_c(status_of(e)), e.what());
    } catch (...) {
        return fail(SEQCOND_INTERNAL_ERROR, "unknown exception");
    }
}

long long parse_int(const std::string& key, const char* value) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(value, &used);
        if (used != std::string(value).size() || v < 0) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw InputError(key + " must be a non-negative integer, got '" + value + "'");
    }
}

}  // namespace

extern "C" {

const char* seqcond_version(void) { return "0.1.0"; }

const char* seqcond_status_name(seqcond_status status) { return status_name(static_cast<Status>(status)); }

const char* seqcond_last_error(void) { return g_last_error.c_str(); }

seqcond_status seqcond_run_create(const char* command, const char* config_json, seqcond_run** out) {
    return guarded([&] {
        if (!command || !out) return fail(SEQCOND_INPUT_ERROR, "null argument");
        *out = nullptr;
        auto run = std::make_unique<seqcond_run>();
        run->command = parse_command(command);
        const std::string text = config_json ? config_json : "{}";
        run->config = Json::parse(text, nullptr, false);
        if (run->config.is_discarded()) return fail(SEQCOND_INPUT_ERROR, "config is not valid JSON");
        *out = run.release();
        return SEQCOND_OK;
    });
}

seqcond_status seqcond_run_set(seqcond_run* run, const char* key, const char* value) {
    return guarded([&] {
        if (!run || !key || !value) return fail(SEQCOND_INPUT_ERROR, "null argument");
        const std::string k = key;
        Overrides& o = run->overrides;
        if (k == "seed") {
            o.seed = std::uint64_t(parse_int(k, value));
            o.has_seed = true;
        } else if (k == "precision") o.precision = value;
        else if (k == "report_dir") o.report_dir = value;
        else if (k == "checkpoint_dir") o.checkpoint_dir = value;
        else if (k == "threads") o.threads = parse_int(k, value);
        else if (k == "stage") o.stage = value;
        else if (k == "instances") o.instances = parse_int(k, value);
        else if (k == "force") o.force = std::string(value) != "0" && std::string(value) != "false";
        else return fail(SEQCOND_INPUT_ERROR, "unknown option '" + k + "'");
        return SEQCOND_OK;
    });
}

seqcond_status seqcond_run_execute(seqcond_run* run) {
    return guarded([&] {
        if (!run) return fail(SEQCOND_INPUT_ERROR, "null run handle");
        RunOutcome res = execute(run->command, run->config, run->overrides);
        run->report = res.report.dump(2);
        if (res.status != Status::kOk) {
            const Json& e = res.report["error"];
            g_last_error = e.is_string() ? e.get<std::string>() : status_name(res.status);
        }
        return to_c(res.status);
    });
}

const char* seqcond_run_report(const seqcond_run* run) { return run ? run->report.c_str() : ""; }

void seqcond_run_destroy(seqcond_run* run) { delete run; }

seqcond_status seqcond_model_load(const char* path, const char* config_json, int force, seqcond_model** out) {
    return guarded([&] {
        if (!path || !out) return fail(SEQCOND_INPUT_ERROR, "null argument");
        *out = nullptr;
        const CheckpointManifest man = read_checkpoint_manifest(path);
        auto m = std::make_unique<seqcond_model>();
        m->config = model_config_from_json(man.config);
        ModelConfig expected = m->config;
        if (config_json) {
            const Json j = Json::parse(config_json, nullptr, false);
            if (j.is_discarded() || !j.is_object()) return fail(SEQCOND_INPUT_ERROR, "config is not a JSON object");
            expected = model_config_from_json(j.contains("model") ? j.at("model") : Json::object());
        }
        Rng rng(0, RngStream::kInit);
        if (man.dtype == "f32") {
            auto lm = std::make_unique<HybridLM<float>>(m->config, rng);
            load_checkpoint(path, *lm, static_cast<AdamW<float>*>(nullptr), expected, force != 0);
            m->lm = std::move(lm);
        } else {
            auto lm = std::make_unique<HybridLM<double>>(m->config, rng);
            load_checkpoint(path, *lm, static_cast<AdamW<double>*>(nullptr), expected, force != 0);
            m->lm = std::move(lm);
        }
        *out = m.release();
        return SEQCOND_OK;
    });
}

size_t seqcond_model_vocab_size(const seqcond_model* model) { return model ? model->config.vocab_size : 0; }

size_t seqcond_model_parameter_count(const seqcond_model* model) {
    return model ? model->config.parameter_count() : 0;
}

seqcond_status seqcond_model_logits(seqcond_model* model, const int32_t* ids, size_t n, double* out, size_t out_len) {
    return guarded([&] {
        if (!model || (!ids && n) || !out) return fail(SEQCOND_INPUT_ERROR, "null argument");
        const std::size_t V = model->config.vocab_size;
        if (out_len < n * V) return fail(SEQCOND_INPUT_ERROR, "output buffer too small");
        std::vector<int> seq(ids, ids + n);
        std::visit(
            [&](auto& lm) {
                const auto logits = lm->logits(seq);
                for (std::size_t i = 0; i < n * V; ++i) out[i] = static_cast<double>(logits[i]);
            },
            model->lm);
        return SEQCOND_OK;
    });
}

void seqcond_model_destroy(seqcond_model* model) { delete model; }

}  // extern "C"
