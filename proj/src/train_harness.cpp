#include "seqcond/train_harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "seqcond/errors.hpp"

namespace seqcond {

std::string task_name(TaskKind k) {
    switch (k) {
        case TaskKind::kCopy: return "copy";
        case TaskKind::kRecall: return "recall";
        case TaskKind::kModArith: return "modular";
    }
    return "?";
}

TaskKind parse_task(const std::string& s) {
    if (s == "copy") return TaskKind::kCopy;
    if (s == "recall") return TaskKind::kRecall;
    if (s == "modular") return TaskKind::kModArith;
    throw InputError("unknown task '" + s + "' (expected copy, recall or modular)");
}

void TaskSpec::validate() const {
    if (vocab_size <= std::size_t(tokens::kFirstSymbol) + 1) throw InputError("task: vocab_size too small");
    const std::size_t symbols = vocab_size - tokens::kFirstSymbol;
    switch (kind) {
        case TaskKind::kCopy:
            if (seq_len == 0) throw InputError("copy task: seq_len must be positive");
            break;
        case TaskKind::kRecall:
            if (num_pairs == 0) throw InputError("recall task: num_pairs must be positive");
            if (num_pairs > symbols / 2) throw InputError("recall task: not enough distinct key symbols for num_pairs");
            break;
        case TaskKind::kModArith:
            if (modulus < 2) throw InputError("modular task: modulus must be at least 2");
            if (modulus > symbols) throw InputError("modular task: vocab_size too small for modulus");
            break;
    }
}

std::size_t TaskSpec::input_length() const {
    switch (kind) {
        case TaskKind::kCopy: return 2 * seq_len + 1;  // BOS s.. SEP s.. minus last
        case TaskKind::kRecall: return 2 * num_pairs + 3;  // BOS (k v)* SEP k v minus last
        case TaskKind::kModArith: return 6;  // BOS a + b = c EOS minus last
    }
    return 0;
}

Example make_example(const TaskSpec& spec, Rng& rng) {
    const std::size_t symbols = spec.vocab_size - tokens::kFirstSymbol;
    std::vector<int> seq{tokens::kBos};
    std::vector<std::uint8_t> scored{0};  // scored[i] = 1 when seq[i] is a scored prediction target
    auto sym = [](std::size_t v) { return tokens::kFirstSymbol + static_cast<int>(v); };
    switch (spec.kind) {
        case TaskKind::kCopy: {
            std::vector<int> s(spec.seq_len);
            for (auto& v : s) v = sym(rng.below(symbols));
            for (int v : s) seq.push_back(v), scored.push_back(0);
            seq.push_back(tokens::kSep), scored.push_back(0);
            for (int v : s) seq.push_back(v), scored.push_back(1);
            break;
        }
        case TaskKind::kRecall: {
            const std::size_t nk = symbols / 2, nv = symbols - nk;
            std::vector<std::size_t> keys(nk);
            std::iota(keys.begin(), keys.end(), std::size_t(0));
            for (std::size_t i = 0; i < spec.num_pairs; ++i) std::swap(keys[i], keys[i + rng.below(nk - i)]);
            std::vector<int> vals(spec.num_pairs);
            for (std::size_t i = 0; i < spec.num_pairs; ++i) {
                vals[i] = sym(nk + rng.below(nv));
                seq.push_back(sym(keys[i])), scored.push_back(0);
                seq.push_back(vals[i]), scored.push_back(0);
            }
            const std::size_t q = rng.below(spec.num_pairs);
            seq.push_back(tokens::kSep), scored.push_back(0);
            seq.push_back(sym(keys[q])), scored.push_back(0);
            seq.push_back(vals[q]), scored.push_back(1);
            break;
        }
        case TaskKind::kModArith: {
            const std::size_t a = rng.below(spec.modulus), b = rng.below(spec.modulus);
            for (int v : {sym(a), tokens::kPlus, sym(b), tokens::kEq}) seq.push_back(v), scored.push_back(0);
            seq.push_back(sym((a + b) % spec.modulus)), scored.push_back(1);
            seq.push_back(tokens::kEos), scored.push_back(0);
            break;
        }
    }
    Example ex;
    ex.input.assign(seq.begin(), seq.end() - 1);
    ex.target.assign(seq.begin() + 1, seq.end());
    ex.mask.assign(scored.begin() + 1, scored.end());
    return ex;
}

Batch make_batch(const TaskSpec& spec, std::size_t batch_size, std::uint64_t batch_index) {
    spec.validate();
    if (batch_size == 0) throw InputError("batch size must be positive");
    Rng rng(spec.seed, RngStream::kData, batch_index);
    Batch b;
    b.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) b.push_back(make_example(spec, rng));
    return b;
}

void OptimConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw InputError("optimizer: lr must be finite and >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw InputError("optimizer: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw InputError("optimizer: eps must be positive");
    if (!(weight_decay >= 0.0)) throw InputError("optimizer: weight_decay must be >= 0");
    if (!(clip_norm >= 0.0)) throw InputError("optimizer: clip_norm must be >= 0 (0 disables clipping)");
}

template <class T>
AdamW<T>::AdamW(const OptimConfig& cfg, const std::vector<Param<T>*>& params) : cfg_(cfg) {
    cfg_.validate();
    for (Param<T>* p : params) {
        m_.emplace_back(p->value.shape);
        v_.emplace_back(p->value.shape);
    }
}

template <class T>
double AdamW<T>::lr_at(std::size_t step) const {
    if (cfg_.warmup_steps == 0 || step >= cfg_.warmup_steps) return cfg_.lr;
    return cfg_.lr * double(step + 1) / double(cfg_.warmup_steps);
}

template <class T>
double AdamW<T>::step(const std::vector<Param<T>*>& params) {
    if (params.size() != m_.size()) throw InputError("AdamW: parameter list changed size");
    const double lr = lr_at(step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Param<T>& p = *params[k];
        if (p.grad.shape != p.value.shape) p.grad = Tensor<T>(p.value.shape);
        const double wd = p.value.rank() >= 2 ? cfg_.weight_decay : 0.0;
        Tensor<T>& m = m_[k];
        Tensor<T>& v = v_[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double upd = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps) + wd * double(p.value[i]);
            p.value[i] = static_cast<T>(double(p.value[i]) - lr * upd);
        }
    }
    return lr;
}

template <class T>
Var<T> masked_cross_entropy_from_logits(Var<T> logits, const Example& ex, std::size_t& scored) {
    Graph<T>& g = *logits.g;
    std::vector<std::size_t> rows;
    std::vector<int> tgt;
    for (std::size_t t = 0; t < ex.mask.size(); ++t)
        if (ex.mask[t]) rows.push_back(t), tgt.push_back(ex.target[t]);
    scored = rows.size();
    if (rows.empty()) return g.constant(Tensor<T>({1}));
    Var<T> lp = log_softmax(index_select(logits, 0, rows));
    return reshape(-sum_all(pick(lp, tgt)), {1});
}

template <class T>
Var<T> masked_cross_entropy_sum(HybridLM<T>& model, Graph<T>& g, const Example& ex, std::size_t& scored,
                                std::vector<double>* layer_norms) {
    if (ex.input.size() != ex.target.size() || ex.mask.size() != ex.target.size())
        throw InputError("example: input, target and mask lengths differ");
    return masked_cross_entropy_from_logits(model.forward(g, ex.input, layer_norms), ex, scored);
}

namespace {

std::string describe_norms(const std::vector<double>& norms) {
    std::ostringstream os;
    os << "layer activation RMS [embed";
    for (std::size_t i = 1; i < norms.size(); ++i) os << ", L" << i - 1;
    os << "] = [";
    for (std::size_t i = 0; i < norms.size(); ++i) os << (i ? ", " : "") << norms[i];
    os << "]";
    return os.str();
}

template <class T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t row) {
    const std::size_t V = logits.shape.back();
    const T* r = logits.ptr() + row * V;
    return static_cast<std::size_t>(std::max_element(r, r + V) - r);
}

}  // namespace

template <class T>
double global_grad_norm(const std::vector<Param<T>*>& params) {
    long double acc = 0;
    for (Param<T>* p : params)
        for (T v : p->grad.data) acc += static_cast<long double>(v) * v;
    return std::sqrt(double(acc));
}

template <class T>
StepResult loss_and_grad(HybridLM<T>& model, const Batch& batch) {
    const auto params = model.parameters();
    for (Param<T>* p : params) p->zero_grad();
    std::size_t total = 0;
    for (const Example& ex : batch)
        for (auto m : ex.mask) total += m;
    if (total == 0) throw InputError("batch has no scored positions");
    StepResult r;
    std::size_t correct = 0;
    for (const Example& ex : batch) {
        Graph<T> g(true);
        std::size_t n = 0;
        std::vector<double> norms;
        if (ex.input.size() != ex.target.size() || ex.mask.size() != ex.target.size())
            throw InputError("example: input, target and mask lengths differ");
        Var<T> logits = model.forward(g, ex.input, &norms);
        Var<T> ce = masked_cross_entropy_from_logits(logits, ex, n);
        for (std::size_t t = 0; t < ex.mask.size(); ++t)
            if (ex.mask[t] && int(argmax_row(logits.value(), t)) == ex.target[t]) ++correct;
        const double v = double(ce.value()[0]);
        if (!std::isfinite(v)) throw NumericalError("non-finite loss; " + describe_norms(norms));
        r.loss += v / double(total);
        if (n == 0) continue;
        g.backward(ce, Tensor<T>({1}, static_cast<T>(1.0 / double(total))));
    }
    r.accuracy = double(correct) / double(total);
    r.grad_norm = global_grad_norm(params);
    if (!std::isfinite(r.grad_norm)) {
        Graph<T> g(false);
        std::vector<double> norms;
        model.forward(g, batch.front().input, &norms);
        throw NumericalError("non-finite gradient; " + describe_norms(norms));
    }
    return r;
}

template <class T>
EvalResult evaluate(HybridLM<T>& model, const Batch& batch) {
    EvalResult r;
    std::size_t correct = 0;
    double loss = 0.0;
    for (const Example& ex : batch) {
        Graph<T> g(false);
        Var<T> logits = model.forward(g, ex.input);
        Var<T> lp = log_softmax(logits);
        for (std::size_t t = 0; t < ex.mask.size(); ++t) {
            if (!ex.mask[t]) continue;
            ++r.scored;
            loss -= double(lp.value()[t * model.config().vocab_size + std::size_t(ex.target[t])]);
            if (int(argmax_row(logits.value(), t)) == ex.target[t]) ++correct;
        }
    }
    if (r.scored) {
        r.loss = loss / double(r.scored);
        r.accuracy = double(correct) / double(r.scored);
    }
    return r;
}

template <class T>
Trainer<T>::Trainer(HybridLM<T>& model, const OptimConfig& cfg) : model_(model), opt_(cfg, model.parameters()) {}

template <class T>
StepResult Trainer<T>::train_step(const Batch& batch) {
    const auto params = model_.parameters();
    StepResult r = loss_and_grad(model_, batch);
    const double clip = opt_.config().clip_norm;
    if (clip > 0.0 && r.grad_norm > clip) {
        const T s = static_cast<T>(clip / r.grad_norm);
        for (Param<T>* p : params)
            for (auto& v : p->grad.data) v *= s;
    }
    r.lr = opt_.step(params);
    for (Param<T>* p : params)
        for (T v : p->value.data)
            if (!std::isfinite(double(v))) {
                Graph<T> g(false);
                std::vector<double> norms;
                model_.forward(g, batch.front().input, &norms);
                throw NumericalError("non-finite parameter " + p->name + " after update; " + describe_norms(norms));
            }
    return r;
}

GradCheckReport model_gradcheck(HybridLM<double>& model, const Batch& batch, double step,
                                std::size_t max_entries_per_tensor, std::uint64_t seed) {
    std::size_t total = 0;
    for (const Example& ex : batch)
        for (auto m : ex.mask) total += m;
    if (total == 0) throw InputError("gradcheck batch has no scored positions");
    return finite_difference_check<double>(
        model.parameters(),
        [&](Graph<double>& g) {
            Var<double> acc = g.constant(Tensor<double>({1}));
            for (const Example& ex : batch) {
                std::size_t n = 0;
                acc = acc + masked_cross_entropy_sum(model, g, ex, n);
            }
            return scale(acc, 1.0 / double(total));
        },
        step, max_entries_per_tensor, seed);
}

std::string bench_name(BenchKind k) { return k == BenchKind::kSCA ? "sca" : "attention"; }

double loglog_slope(const std::vector<BenchPoint>& points) {
    if (points.size() < 2) throw InputError("slope needs at least two lengths");
    const double top = double(points.back().length);
    std::vector<double> xs, ys;
    for (const auto& p : points)
        if (double(p.length) >= top / 10.0 - 1e-9) {
            xs.push_back(std::log(double(p.length)));
            ys.push_back(std::log(p.seconds));
        }
    if (xs.size() < 2) throw InputError("slope needs at least two lengths within the largest decade");
    const double n = double(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    return sxy / sxx;
}

BenchResult scaling_bench(BenchKind kind, const BenchConfig& cfg) {
    if (cfg.lengths.empty()) throw InputError("bench: lengths list is empty");
    for (std::size_t i = 0; i < cfg.lengths.size(); ++i) {
        if (cfg.lengths[i] == 0) throw InputError("bench: lengths must be positive");
        if (i && cfg.lengths[i] <= cfg.lengths[i - 1]) throw InputError("bench: lengths must be strictly ascending");
    }
    if (cfg.trials == 0 || !(cfg.min_measure_seconds > 0.0)) throw InputError("bench: trials and min time must be positive");
    ModelConfig mc = cfg.model;
    mc.max_len = std::max(mc.max_len, cfg.lengths.back());
    mc.validate();
    Rng rng(cfg.seed, RngStream::kBench);
    SCALayer<double> sca(mc.sca, rng, "bench.sca");
    AttentionLayer<double> attn(mc, rng, "bench.attn");

    BenchResult res;
    res.kind = kind;
    using clock = std::chrono::steady_clock;
    for (std::size_t L : cfg.lengths) {
        Tensor<double> x({L, mc.model_dim});
        Rng xr(cfg.seed, RngStream::kBench, L);
        for (auto& v : x.data) v = xr.normal();
        auto run = [&] {
            Graph<double> g(false);
            if (kind == BenchKind::kSCA) return sca.forward(g.constant(x)).value()[0];
            return attn.attend(g.constant(x)).value()[0];
        };
        run();  // warm-up
        std::size_t reps = 1;
        double per = 0.0;
        // grow repetitions until one measurement spans the timer threshold
        for (;;) {
            const auto t0 = clock::now();
            for (std::size_t r = 0; r < reps; ++r) run();
            const double s = std::chrono::duration<double>(clock::now() - t0).count();
            if (s >= cfg.min_measure_seconds || reps >= (std::size_t(1) << 20)) {
                per = s / double(reps);
                break;
            }
            reps *= 2;
        }
        for (std::size_t t = 1; t < cfg.trials; ++t) {
            const auto t0 = clock::now();
            for (std::size_t r = 0; r < reps; ++r) run();
            per = std::min(per, std::chrono::duration<double>(clock::now() - t0).count() / double(reps));
        }
        BenchPoint pt;
        pt.length = L;
        pt.seconds = per;
        pt.repetitions = reps;
        if (kind == BenchKind::kSCA) {
            pt.state_bytes = sca.initial_state().bytes();
        } else {
            // KV cache needed to decode the next token
            pt.state_bytes = 2 * L * mc.kv_heads * mc.head_dim * sizeof(double);
        }
        res.points.push_back(pt);
    }
    res.slope = res.points.size() >= 2 ? loglog_slope(res.points) : 0.0;
    return res;
}

template class AdamW<float>;
template class AdamW<double>;
template class Trainer<float>;
template class Trainer<double>;
template Var<float> masked_cross_entropy_sum(HybridLM<float>&, Graph<float>&, const Example&, std::size_t&,
                                             std::vector<double>*);
template Var<double> masked_cross_entropy_sum(HybridLM<double>&, Graph<double>&, const Example&, std::size_t&,
                                              std::vector<double>*);
template Var<float> masked_cross_entropy_from_logits(Var<float>, const Example&, std::size_t&);
template Var<double> masked_cross_entropy_from_logits(Var<double>, const Example&, std::size_t&);
template StepResult loss_and_grad(HybridLM<float>&, const Batch&);
template StepResult loss_and_grad(HybridLM<double>&, const Batch&);
template EvalResult evaluate(HybridLM<float>&, const Batch&);
template EvalResult evaluate(HybridLM<double>&, const Batch&);
template double global_grad_norm(const std::vector<Param<float>*>&);
template double global_grad_norm(const std::vector<Param<double>*>&);

}  // namespace seqcond
