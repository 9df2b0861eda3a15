#pragma once

// Strict JSON run configuration. Every object rejects unknown keys, and the
// seed is mandatory.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqcond/rl_lab.hpp"
#include "seqcond/spectral_oracle.hpp"
#include "seqcond/train_harness.hpp"
#include "seqcond/verify_suite.hpp"

namespace seqcond {

using Json = nlohmann::json;

enum class Command { kOracle, kVerify, kTrain, kRL, kBench };
std::string command_name(Command c);
Command parse_command(const std::string& s);

struct TrainLoop {
    std::size_t steps = 200;
    std::size_t batch_size = 8;
    std::size_t eval_batches = 4;
    std::size_t checkpoint_every = 0;  // 0 = only the final checkpoint
    bool fixed_batch = false;          // reuse batch 0 every step
    bool wall_clock = false;           // false writes wall_ms = 0 so reruns are byte-identical
    std::string resume;                // checkpoint path
};

struct RLSetup {
    ModularTask task{5, 12};
    std::size_t warm_start_steps = 40;
    std::size_t warm_start_batch = 16;
    OptimConfig warm_start_optim;
    std::vector<RLStage> stages{RLStage::kBalanced, RLStage::kDistill};
    std::string judge = "stub";
    ExternalJudgeOptions judge_options;
};

struct RunConfig {
    Command command = Command::kOracle;
    std::uint64_t seed = 0;
    Precision precision = Precision::kDouble;
    unsigned threads = 1;
    std::string report_dir = "reports";
    std::string checkpoint_dir;  // defaults to <report_dir>/checkpoints
    bool force = false;

    oracle::OracleSuiteConfig oracle;
    VerifySuiteConfig verify;
    std::string verify_checkpoint;
    ModelConfig model = ModelConfig::micro();
    TaskSpec task;
    OptimConfig optim;
    TrainLoop train;
    RLConfig rl;
    RLSetup rl_setup;
    BenchConfig bench;
    std::vector<BenchKind> bench_kinds{BenchKind::kSCA, BenchKind::kAttention};

    std::string resolved_checkpoint_dir() const;
};

// Command-line overrides applied on top of the file, all optional.
struct Overrides {
    bool has_seed = false;
    std::uint64_t seed = 0;
    std::string precision;
    std::string report_dir;
    std::string checkpoint_dir;
    long long threads = -1;
    std::string stage;
    long long instances = -1;
    bool force = false;
};

// Throws InputError naming the offending key path.
RunConfig parse_run_config(Command cmd, const Json& j, const Overrides& ov = {});

Json to_json(const SCAConfig& c);
Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);

// FNV-1a over the canonical dump of the model configuration.
std::string config_hash(const ModelConfig& c);

}  // namespace seqcond
