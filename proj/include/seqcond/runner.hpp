#pragma once

// Command runners behind the CLI: each writes a JSON report (and CSV metrics
// where applicable) into the report directory and returns an exit status.

#include <functional>
#include <string>
#include <vector>

#include "seqcond/config.hpp"
#include "seqcond/errors.hpp"

namespace seqcond {

struct RunOutcome {
    Status status = Status::kOk;
    Json report;
};

// Never throws; failures become the status and the report's "error" field.
RunOutcome execute(const RunConfig& cfg);
RunOutcome execute(Command cmd, const Json& config, const Overrides& ov);

Status status_of(const std::exception& e);
const char* status_name(Status s);

// Report keys every command emits, in schema order.
std::vector<std::string> report_schema_keys();

// Warm start followed by the configured RL stages on one policy.
struct RLPipelineResult {
    double warm_accuracy = 0.0;
    std::vector<RLReport> stages;
};

template <class T>
RLPipelineResult run_rl_pipeline(HybridLM<T>& policy, const RLConfig& rl, const RLSetup& setup, std::uint64_t seed,
                                 const std::function<void(RLStage, const RLStepMetrics&)>& on_step = {});

}  // namespace seqcond
