#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "seqcond/gradcheck.hpp"
#include "seqcond/hybrid_stack.hpp"

namespace seqcond {

namespace tokens {
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kSep = 2;
constexpr int kEos = 3;
constexpr int kPlus = 4;
constexpr int kEq = 5;
constexpr int kFirstSymbol = 6;
}  // namespace tokens

enum class TaskKind { kCopy, kRecall, kModArith };

std::string task_name(TaskKind k);
TaskKind parse_task(const std::string& s);

struct TaskSpec {
    TaskKind kind = TaskKind::kCopy;
    std::size_t seq_len = 8;  // copy: symbols to copy
    std::size_t vocab_size = 64;
    std::size_t num_pairs = 4;  // recall
    std::size_t modulus = 7;    // modular arithmetic
    std::uint64_t seed = 0;

    void validate() const;
    // length of the model input (the full sequence minus its last token)
    std::size_t input_length() const;
};

// input[t] predicts target[t]; only positions with mask = 1 are scored.
struct Example {
    std::vector<int> input;
    std::vector<int> target;
    std::vector<std::uint8_t> mask;
};
using Batch = std::vector<Example>;

Example make_example(const TaskSpec& spec, Rng& rng);
// Deterministic in (spec.seed, batch_index).
Batch make_batch(const TaskSpec& spec, std::size_t batch_size, std::uint64_t batch_index = 0);

struct OptimConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t warmup_steps = 100;
    double clip_norm = 1.0;

    void validate() const;
};

// AdamW with linear warmup; weight decay applies to tensors of rank >= 2.
template <class T>
class AdamW {
public:
    AdamW(const OptimConfig& cfg, const std::vector<Param<T>*>& params);

    const OptimConfig& config() const { return cfg_; }
    double lr_at(std::size_t step) const;
    std::size_t step_count() const { return step_; }
    void set_step_count(std::size_t s) { step_ = s; }
    std::vector<Tensor<T>>& first_moments() { return m_; }
    std::vector<Tensor<T>>& second_moments() { return v_; }

    // applies one update from p->grad; returns the learning rate used
    double step(const std::vector<Param<T>*>& params);

private:
    OptimConfig cfg_;
    std::size_t step_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

// Sum over masked positions of -log p(target); scored receives their count.
template <class T>
Var<T> masked_cross_entropy_from_logits(Var<T> logits, const Example& ex, std::size_t& scored);
template <class T>
Var<T> masked_cross_entropy_sum(HybridLM<T>& model, Graph<T>& g, const Example& ex, std::size_t& scored,
                                std::vector<double>* layer_norms = nullptr);

struct StepResult {
    double loss = 0.0;
    double accuracy = 0.0;
    double grad_norm = 0.0;  // before clipping
    double lr = 0.0;
};

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::size_t scored = 0;
};

// Masked mean cross-entropy; leaves d loss / d param in every p->grad.
// Non-finite loss or gradient throws NumericalError carrying layer RMS norms.
template <class T>
StepResult loss_and_grad(HybridLM<T>& model, const Batch& batch);

template <class T>
EvalResult evaluate(HybridLM<T>& model, const Batch& batch);

template <class T>
class Trainer {
public:
    Trainer(HybridLM<T>& model, const OptimConfig& cfg);
    HybridLM<T>& model() { return model_; }
    AdamW<T>& optimizer() { return opt_; }
    StepResult train_step(const Batch& batch);

private:
    HybridLM<T>& model_;
    AdamW<T> opt_;
};

template <class T>
double global_grad_norm(const std::vector<Param<T>*>& params);

// Central finite differences of the batch loss against the analytic gradient.
GradCheckReport model_gradcheck(HybridLM<double>& model, const Batch& batch, double step = 1e-5,
                                std::size_t max_entries_per_tensor = 0, std::uint64_t seed = 0);

enum class BenchKind { kSCA, kAttention };

std::string bench_name(BenchKind k);

struct BenchConfig {
    std::vector<std::size_t> lengths{256, 512, 1024, 2048, 4096};
    ModelConfig model = ModelConfig::toy();
    double min_measure_seconds = 0.02;
    std::size_t trials = 3;
    std::uint64_t seed = 0;
};

struct BenchPoint {
    std::size_t length = 0;
    double seconds = 0.0;  // best trial, per forward pass
    std::size_t repetitions = 0;
    std::size_t state_bytes = 0;
};

struct BenchResult {
    BenchKind kind = BenchKind::kSCA;
    std::vector<BenchPoint> points;
    double slope = 0.0;
};

// Least-squares slope of log time against log L over points with L >= L_max/10.
double loglog_slope(const std::vector<BenchPoint>& points);

BenchResult scaling_bench(BenchKind kind, const BenchConfig& cfg);

extern template class AdamW<float>;
extern template class AdamW<double>;
extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace seqcond
