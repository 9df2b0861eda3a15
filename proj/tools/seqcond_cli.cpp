#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "seqcond/seqcond_c.h"

namespace {

struct Options {
    std::string config;
    long long seed = -1;
    std::string precision;
    std::string report_dir;
    std::string checkpoint_dir;
    long long threads = -1;
    std::string stage;
    long long instances = -1;
    bool force = false;
};

void add_common(CLI::App* sub, Options& o) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--seed", o.seed, "RNG seed (overrides the config)")->check(CLI::NonNegativeNumber);
    sub->add_option("--precision", o.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--report-dir", o.report_dir, "directory for reports and metrics");
    sub->add_option("--checkpoint-dir", o.checkpoint_dir, "directory for checkpoints");
    sub->add_option("--threads", o.threads, "worker threads (default 1)")->check(CLI::PositiveNumber);
    sub->add_flag("--force", o.force, "load checkpoints whose config hash differs");
}

int report_error(const std::string& msg) {
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    return SEQCOND_INPUT_ERROR;
}

void print_summary(const char* report_text) {
    const auto r = nlohmann::json::parse(report_text, nullptr, false);
    if (r.is_discarded()) return;
    for (const auto& c : r["checks"]) {
        std::printf("%-5s %-32s %-12.6g %s %-10.4g (%zu instances)\n", c["pass"].get<bool>() ? "PASS" : "FAIL",
                    c["name"].get<std::string>().c_str(), c["value"].get<double>(),
                    c["relation"].get<std::string>().c_str(), c["bound"].get<double>(), c["instances"].get<std::size_t>());
    }
    for (const auto& w : r["warnings"]) std::printf("warning: %s\n", w.get<std::string>().c_str());
    for (const auto& a : r["artifacts"]) std::printf("wrote %s\n", a.get<std::string>().c_str());
    std::printf("status: %s\n", r["status"].get<std::string>().c_str());
    if (r["error"].is_string()) std::fprintf(stderr, "error: %s\n", r["error"].get<std::string>().c_str());
}

int run(const std::string& command, const Options& o) {
    std::string text = "{}";
    if (!o.config.empty()) {
        std::ifstream in(o.config);
        if (!in) return report_error("cannot read config " + o.config);
        std::ostringstream ss;
        ss << in.rdbuf();
        text = ss.str();
    }
    seqcond_run* handle = nullptr;
    if (seqcond_run_create(command.c_str(), text.c_str(), &handle) != SEQCOND_OK)
        return report_error(seqcond_last_error());
    auto set = [&](const char* key, const std::string& value) {
        if (seqcond_run_set(handle, key, value.c_str()) != SEQCOND_OK) throw std::runtime_error(seqcond_last_error());
    };
    try {
        if (o.seed >= 0) set("seed", std::to_string(o.seed));
        if (!o.precision.empty()) set("precision", o.precision);
        if (!o.report_dir.empty()) set("report_dir", o.report_dir);
        if (!o.checkpoint_dir.empty()) set("checkpoint_dir", o.checkpoint_dir);
        if (o.threads >= 0) set("threads", std::to_string(o.threads));
        if (!o.stage.empty()) set("stage", o.stage);
        if (o.instances >= 0) set("instances", std::to_string(o.instances));
        if (o.force) set("force", "1");
    } catch (const std::exception& e) {
        seqcond_run_destroy(handle);
        return report_error(e.what());
    }
    const seqcond_status st = seqcond_run_execute(handle);
    print_summary(seqcond_run_report(handle));
    seqcond_run_destroy(handle);
    return static_cast<int>(st);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SeqCond attention lab: oracle checks, layer verification, training, RL stages, scaling bench"};
    app.require_subcommand(1);
    app.set_version_flag("--version", seqcond_version());
    Options o;
    CLI::App* oracle = app.add_subcommand("oracle", "spectral retrieval identities on the integer torus");
    CLI::App* verify = app.add_subcommand("verify", "scan/streaming equivalence and gradient checks");
    CLI::App* train = app.add_subcommand("train", "train the hybrid model on a synthetic task");
    CLI::App* rl = app.add_subcommand("rl", "warm start plus RL post-training stages");
    CLI::App* bench = app.add_subcommand("bench", "sequence-length scaling benchmark");
    for (CLI::App* s : {oracle, verify, train, rl, bench}) add_common(s, o);
    oracle->add_option("--instances", o.instances, "random prefixes for the retrieval checks");
    rl->add_option("--stage", o.stage, "format, balanced, distill or all")
        ->check(CLI::IsMember({"format", "balanced", "distill", "all"}));
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : SEQCOND_INPUT_ERROR;
    }
    for (CLI::App* s : app.get_subcommands()) return run(s->get_name(), o);
    return SEQCOND_INPUT_ERROR;
}
