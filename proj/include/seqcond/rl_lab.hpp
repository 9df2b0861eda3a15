#pragma once

// Post-training on verifiable toy tasks: Dr. GRPO with a judge reward mix,
// gradient-balanced GRPO, and advantage-scored self-distillation.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "seqcond/hybrid_stack.hpp"
#include "seqcond/judge.hpp"
#include "seqcond/train_harness.hpp"

namespace seqcond {

// 0.5 * (0.30 s_reason + 0.55 s_answer + 0.15 s_follow) / 5 + 0.5 * s_overall / 100,
// minus the penalty when overlong.
double mix_reward(const JudgeScore& s, double overlong_penalty);

// A_i = r_i - mean(r); no standard-deviation scaling.
std::vector<double> compute_advantages(const std::vector<double>& rewards);

struct SkipRule {
    double mean_above = 90.0;
    double min_above = 85.0;
};
bool skip_mastered(const std::vector<JudgeScore>& scores, const SkipRule& rule = {});

// len_i / sum(len)
std::vector<double> token_weights(const std::vector<std::size_t>& lengths);

// Self-distillation trace weights: the advantage where it is positive, else 0.
std::vector<double> distill_weights(const std::vector<double>& advantages);

struct BalancedGradient {
    std::vector<double> g;
    double norm_plus = 0.0;
    double norm_minus = 0.0;
    double scale = 0.0;               // ||g+|| / (||g-|| + eps)
    double scaled_minus_norm = 0.0;   // scale * ||g-||
};
// g = g+ + (||g+|| / (||g-|| + eps)) g-
BalancedGradient balanced_gradient(const std::vector<double>& g_plus, const std::vector<double>& g_minus, double eps);

// One completion inside a group loss. logits are the policy logits at the
// positions that predict `tokens` ([len, V]); ref_logprobs are the frozen
// reference log-probabilities at the same positions.
template <class T>
struct CompletionTerm {
    Var<T> logits;
    std::vector<int> tokens;
    const Tensor<T>* ref_logprobs = nullptr;
    double advantage = 0.0;
};

template <class T>
struct GroupLoss {
    Var<T> loss;  // pg + kl_coef * kl
    Var<T> pg;    // -sum_i w_i A_i mean_t log pi(y_it)
    Var<T> kl;    // sum_i w_i mean_t KL(pi || ref)_t, exact over the vocabulary
    std::vector<Var<T>> pg_terms;  // per completion, already weighted
    std::vector<Var<T>> kl_terms;  // per completion, already weighted
    std::vector<double> weights;   // len_i / sum(len)
};

template <class T>
GroupLoss<T> grpo_loss(Graph<T>& g, const std::vector<CompletionTerm<T>>& terms, double kl_coef);

enum class RLStage { kFormat, kBalanced, kDistill };
std::string stage_name(RLStage s);
RLStage parse_stage(const std::string& s);

struct RLConfig {
    RLStage stage = RLStage::kBalanced;
    std::size_t group_size = 4;
    double kl_coef = 0.02;
    double overlong_penalty = 0.25;
    double balance_eps = 1e-8;
    SkipRule skip;
    double temperature = 1.0;
    std::size_t top_k = 0;  // 0 = full vocabulary
    std::size_t max_new_tokens = 3;
    std::size_t steps = 200;
    std::size_t prompts_per_step = 4;
    std::size_t eval_every = 50;
    OptimConfig optim = default_optim();

    static OptimConfig default_optim();
    void validate() const;
};

struct RolloutGroup {
    std::vector<int> prompt;
    std::vector<std::vector<int>> completions;
    std::vector<JudgeScore> scores;
    std::vector<double> rewards;
    std::vector<double> advantages;
    std::vector<bool> correct;
    std::vector<bool> overlong;
    bool skipped = false;
    std::string skip_reason;
};

// Verifiable modular-arithmetic prompts: [BOS a + b =], answer [c EOS].
struct ModularTask {
    std::size_t modulus = 5;
    std::size_t vocab_size = 16;

    void validate() const;
    std::vector<int> prompt(std::size_t a, std::size_t b) const;
    int answer_token(const std::vector<int>& prompt) const;
    // first generated token is the right answer
    bool correct(const std::vector<int>& prompt, const std::vector<int>& completion) const;
    // exactly one symbol followed by EOS
    bool well_formatted(const std::vector<int>& completion) const;
    bool exact_match(const std::vector<int>& prompt, const std::vector<int>& completion) const {
        return correct(prompt, completion) && well_formatted(completion);
    }
    // every (a, b) pair, in order
    std::vector<std::vector<int>> all_prompts() const;
    // supervised warm-start batch scoring both the answer and EOS
    Batch warm_start_batch(std::size_t n, Rng& rng) const;
};

std::string detokenize(const std::vector<int>& ids);

template <class T>
std::vector<int> sample_completion(HybridLM<T>& model, const std::vector<int>& prompt, double temperature,
                                   std::size_t top_k, std::size_t max_new, Rng& rng);
template <class T>
std::vector<int> greedy_completion(HybridLM<T>& model, const std::vector<int>& prompt, std::size_t max_new);

// Fraction of prompts whose greedy completion is correct.
template <class T>
double greedy_accuracy(HybridLM<T>& model, const ModularTask& task, const std::vector<std::vector<int>>& prompts,
                       std::size_t max_new);

struct RLStepMetrics {
    std::size_t step = 0;
    double success_rate = 0.0;
    double mean_reward = 0.0;
    double kl = 0.0;
    double g_plus_norm = 0.0;
    double g_minus_norm = 0.0;
    double balance_scale = 0.0;
    double scaled_minus_norm = 0.0;
    std::size_t groups = 0;
    std::size_t skipped_groups = 0;
    std::size_t retained_traces = 0;
    double lr = 0.0;
    double eval_accuracy = -1.0;  // only on evaluation steps
};

struct RLReport {
    RLStage stage = RLStage::kBalanced;
    double accuracy_before = 0.0;
    double accuracy_after = 0.0;
    std::vector<RLStepMetrics> steps;
    std::vector<std::string> warnings;
};

using RLStepCallback = std::function<void(const RLStepMetrics&)>;

// Samples and scores one group. Reward: judge mix for the format stage,
// verifier correctness (0/1) otherwise. A failed judge call skips the group.
template <class T>
RolloutGroup rollout_group(HybridLM<T>& policy, const ModularTask& task, const std::vector<int>& prompt,
                           const RLConfig& cfg, Judge& judge, Rng& rng, const std::string& id_prefix);

template <class T>
class RLTrainer {
public:
    RLTrainer(HybridLM<T>& policy, const RLConfig& cfg, const ModularTask& task, Judge& judge, std::uint64_t seed);

    // One update from prepared groups; returns the step metrics.
    RLStepMetrics update(const std::vector<RolloutGroup>& groups);
    RLReport run(const std::vector<std::vector<int>>& eval_prompts, const RLStepCallback& on_step = {});

    HybridLM<T>& reference() { return *ref_; }
    AdamW<T>& optimizer() { return opt_; }

private:
    std::vector<CompletionTerm<T>> build_terms(Graph<T>& g, const RolloutGroup& grp, std::deque<Tensor<T>>& ref_store);
    void flat_grad(std::vector<double>& out);

    HybridLM<T>& policy_;
    RLConfig cfg_;
    ModularTask task_;
    Judge& judge_;
    std::uint64_t seed_;
    std::unique_ptr<HybridLM<T>> ref_;
    AdamW<T> opt_;
    std::size_t step_ = 0;
};

extern template class RLTrainer<float>;
extern template class RLTrainer<double>;

}  // namespace seqcond
