#include "seqcond/rl_lab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "seqcond/errors.hpp"

namespace seqcond {

double mix_reward(const JudgeScore& s, double overlong_penalty) {
    s.validate();
    if (!(overlong_penalty >= 0.0)) throw InputError("overlong penalty must be >= 0");
    const double crit = 0.30 * s.s_reason + 0.55 * s.s_answer + 0.15 * s.s_follow;
    const double r = 0.5 * crit / 5.0 + 0.5 * s.s_overall / 100.0;
    return s.overlong ? r - overlong_penalty : r;
}

std::vector<double> compute_advantages(const std::vector<double>& rewards) {
    if (rewards.size() < 2) throw InputError("advantages need a group of at least two rewards");
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / double(rewards.size());
    std::vector<double> a(rewards.size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rewards[i] - mean;
    return a;
}

bool skip_mastered(const std::vector<JudgeScore>& scores, const SkipRule& rule) {
    if (scores.empty()) throw InputError("skip rule needs a non-empty group");
    double sum = 0.0, mn = scores.front().s_overall;
    for (const auto& s : scores) {
        sum += s.s_overall;
        mn = std::min(mn, s.s_overall);
    }
    return sum / double(scores.size()) > rule.mean_above && mn > rule.min_above;
}

std::vector<double> token_weights(const std::vector<std::size_t>& lengths) {
    const std::size_t total = std::accumulate(lengths.begin(), lengths.end(), std::size_t(0));
    if (lengths.empty() || total == 0) throw InputError("token weights need a non-empty group with tokens");
    std::vector<double> w(lengths.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = double(lengths[i]) / double(total);
    return w;
}

std::vector<double> distill_weights(const std::vector<double>& advantages) {
    std::vector<double> w(advantages.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i)
        if (advantages[i] > 0.0) w[i] = advantages[i];
    return w;
}

BalancedGradient balanced_gradient(const std::vector<double>& g_plus, const std::vector<double>& g_minus, double eps) {
    if (g_plus.size() != g_minus.size()) throw InputError("balanced gradient: length mismatch");
    if (!(eps > 0.0)) throw InputError("balanced gradient: eps must be positive");
    BalancedGradient b;
    long double sp = 0, sm = 0;
    for (double v : g_plus) sp += static_cast<long double>(v) * v;
    for (double v : g_minus) sm += static_cast<long double>(v) * v;
    b.norm_plus = std::sqrt(double(sp));
    b.norm_minus = std::sqrt(double(sm));
    b.scale = b.norm_plus / (b.norm_minus + eps);
    b.scaled_minus_norm = b.scale * b.norm_minus;
    b.g.resize(g_plus.size());
    for (std::size_t i = 0; i < b.g.size(); ++i) b.g[i] = g_plus[i] + b.scale * g_minus[i];
    return b;
}

template <class T>
GroupLoss<T> grpo_loss(Graph<T>& g, const std::vector<CompletionTerm<T>>& terms, double kl_coef) {
    if (terms.empty()) throw InputError("grpo_loss: empty group");
    if (!(kl_coef >= 0.0)) throw InputError("grpo_loss: kl_coef must be >= 0");
    std::vector<std::size_t> lengths;
    for (const auto& t : terms) lengths.push_back(t.tokens.size());
    GroupLoss<T> out;
    out.weights = token_weights(lengths);
    Var<T> pg = g.constant(Tensor<T>({1}));
    Var<T> kl = g.constant(Tensor<T>({1}));
    for (std::size_t i = 0; i < terms.size(); ++i) {
        const auto& t = terms[i];
        const std::size_t len = t.tokens.size();
        if (len == 0) throw InputError("grpo_loss: empty completion");
        if (t.logits.value().rank() != 2 || t.logits.dim(0) != len)
            throw InputError("grpo_loss: logits must be [len, V] for each completion");
        if (kl_coef > 0.0 && !t.ref_logprobs) throw InputError("grpo_loss: reference log-probs required when kl_coef > 0");
        Var<T> lp = log_softmax(t.logits);
        Var<T> mean_lp = scale(sum_all(pick(lp, t.tokens)), static_cast<T>(1.0 / double(len)));
        Var<T> pg_i = scale(mean_lp, static_cast<T>(-out.weights[i] * t.advantage));
        Var<T> kl_i = g.constant(Tensor<T>({1}));
        if (t.ref_logprobs) {
            require_shape(*t.ref_logprobs, t.logits.shape(), "reference log-probs");
            Var<T> per = exp(lp) * (lp - g.constant(*t.ref_logprobs));
            kl_i = scale(sum_all(per), static_cast<T>(out.weights[i] / double(len)));
        }
        out.pg_terms.push_back(pg_i);
        out.kl_terms.push_back(kl_i);
        pg = pg + pg_i;
        kl = kl + kl_i;
    }
    out.pg = pg;
    out.kl = kl;
    out.loss = pg + scale(kl, static_cast<T>(kl_coef));
    return out;
}

std::string stage_name(RLStage s) {
    switch (s) {
        case RLStage::kFormat: return "format";
        case RLStage::kBalanced: return "balanced";
        case RLStage::kDistill: return "distill";
    }
    return "?";
}

RLStage parse_stage(const std::string& s) {
    if (s == "format") return RLStage::kFormat;
    if (s == "balanced") return RLStage::kBalanced;
    if (s == "distill") return RLStage::kDistill;
    throw InputError("unknown rl stage '" + s + "' (expected format, balanced or distill)");
}

OptimConfig RLConfig::default_optim() {
    OptimConfig o;
    o.lr = 3e-4;
    o.warmup_steps = 0;
    o.weight_decay = 0.0;
    o.clip_norm = 1.0;
    return o;
}

void RLConfig::validate() const {
    if (group_size < 2) throw InputError("rl: group_size must be at least 2");
    if (!(kl_coef >= 0.0)) throw InputError("rl: kl_coef must be >= 0");
    if (!(balance_eps > 0.0)) throw InputError("rl: balance_eps must be positive");
    if (!(overlong_penalty >= 0.0)) throw InputError("rl: overlong_penalty must be >= 0");
    if (!(temperature > 0.0)) throw InputError("rl: temperature must be positive");
    if (max_new_tokens == 0 || prompts_per_step == 0) throw InputError("rl: max_new_tokens and prompts_per_step must be positive");
    optim.validate();
}

void ModularTask::validate() const {
    if (modulus < 2) throw InputError("modular task: modulus must be at least 2");
    if (vocab_size < std::size_t(tokens::kFirstSymbol) + modulus) throw InputError("modular task: vocab too small");
}

std::vector<int> ModularTask::prompt(std::size_t a, std::size_t b) const {
    if (a >= modulus || b >= modulus) throw InputError("modular task: operand out of range");
    return {tokens::kBos, tokens::kFirstSymbol + int(a), tokens::kPlus, tokens::kFirstSymbol + int(b), tokens::kEq};
}

int ModularTask::answer_token(const std::vector<int>& p) const {
    if (p.size() != 5) throw InputError("modular task: malformed prompt");
    const int a = p[1] - tokens::kFirstSymbol, b = p[3] - tokens::kFirstSymbol;
    return tokens::kFirstSymbol + (a + b) % int(modulus);
}

bool ModularTask::correct(const std::vector<int>& p, const std::vector<int>& completion) const {
    return !completion.empty() && completion[0] == answer_token(p);
}

bool ModularTask::well_formatted(const std::vector<int>& c) const {
    return c.size() == 2 && c[0] >= tokens::kFirstSymbol && c[1] == tokens::kEos;
}

std::vector<std::vector<int>> ModularTask::all_prompts() const {
    std::vector<std::vector<int>> out;
    for (std::size_t a = 0; a < modulus; ++a)
        for (std::size_t b = 0; b < modulus; ++b) out.push_back(prompt(a, b));
    return out;
}

Batch ModularTask::warm_start_batch(std::size_t n, Rng& rng) const {
    Batch batch;
    for (std::size_t i = 0; i < n; ++i) {
        auto p = prompt(rng.below(modulus), rng.below(modulus));
        std::vector<int> seq = p;
        seq.push_back(answer_token(p));
        seq.push_back(tokens::kEos);
        Example ex;
        ex.input.assign(seq.begin(), seq.end() - 1);
        ex.target.assign(seq.begin() + 1, seq.end());
        ex.mask = {0, 0, 0, 0, 1, 1};
        batch.push_back(ex);
    }
    return batch;
}

std::string detokenize(const std::vector<int>& ids) {
    std::string s;
    for (int id : ids) {
        if (!s.empty()) s += ' ';
        switch (id) {
            case tokens::kPad: s += "<pad>"; break;
            case tokens::kBos: s += "<s>"; break;
            case tokens::kSep: s += "|"; break;
            case tokens::kEos: s += "</s>"; break;
            case tokens::kPlus: s += "+"; break;
            case tokens::kEq: s += "="; break;
            default: s += std::to_string(id - tokens::kFirstSymbol);
        }
    }
    return s;
}

template <class T>
std::vector<int> sample_completion(HybridLM<T>& model, const std::vector<int>& prompt, double temperature,
                                   std::size_t top_k, std::size_t max_new, Rng& rng) {
    if (!(temperature > 0.0)) throw InputError("sampling temperature must be positive");
    const std::size_t V = model.config().vocab_size;
    std::vector<int> seq = prompt, out;
    std::vector<double> p(V);
    std::vector<std::size_t> order(V);
    for (std::size_t n = 0; n < max_new; ++n) {
        const Tensor<T> logits = model.logits(seq);
        const T* row = logits.ptr() + (seq.size() - 1) * V;
        double mx = -1e300;
        for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, double(row[v]) / temperature);
        for (std::size_t v = 0; v < V; ++v) p[v] = std::exp(double(row[v]) / temperature - mx);
        if (top_k > 0 && top_k < V) {
            std::iota(order.begin(), order.end(), std::size_t(0));
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
            for (std::size_t i = top_k; i < V; ++i) p[order[i]] = 0.0;
        }
        const double z = std::accumulate(p.begin(), p.end(), 0.0);
        double u = rng.uniform() * z;
        std::size_t pick = V - 1;
        for (std::size_t v = 0; v < V; ++v) {
            if (u < p[v]) {
                pick = v;
                break;
            }
            u -= p[v];
        }
        while (p[pick] == 0.0 && pick > 0) --pick;
        out.push_back(int(pick));
        seq.push_back(int(pick));
        if (int(pick) == tokens::kEos) break;
    }
    return out;
}

template <class T>
std::vector<int> greedy_completion(HybridLM<T>& model, const std::vector<int>& prompt, std::size_t max_new) {
    const std::size_t V = model.config().vocab_size;
    std::vector<int> seq = prompt, out;
    for (std::size_t n = 0; n < max_new; ++n) {
        const Tensor<T> logits = model.logits(seq);
        const T* row = logits.ptr() + (seq.size() - 1) * V;
        const int pick = int(std::max_element(row, row + V) - row);
        out.push_back(pick);
        seq.push_back(pick);
        if (pick == tokens::kEos) break;
    }
    return out;
}

template <class T>
double greedy_accuracy(HybridLM<T>& model, const ModularTask& task, const std::vector<std::vector<int>>& prompts,
                       std::size_t max_new) {
    if (prompts.empty()) return 0.0;
    std::size_t ok = 0;
    for (const auto& p : prompts) ok += task.exact_match(p, greedy_completion(model, p, max_new));
    return double(ok) / double(prompts.size());
}

template <class T>
RolloutGroup rollout_group(HybridLM<T>& policy, const ModularTask& task, const std::vector<int>& prompt,
                           const RLConfig& cfg, Judge& judge, Rng& rng, const std::string& id_prefix) {
    RolloutGroup grp;
    grp.prompt = prompt;
    for (std::size_t i = 0; i < cfg.group_size; ++i) {
        auto c = sample_completion(policy, prompt, cfg.temperature, cfg.top_k, cfg.max_new_tokens, rng);
        const bool overlong = c.empty() || c.back() != tokens::kEos;
        grp.correct.push_back(task.exact_match(prompt, c));
        grp.overlong.push_back(overlong);
        JudgeRequest req;
        req.id = id_prefix + "-" + std::to_string(i);
        req.prompt = detokenize(prompt);
        req.completion = detokenize(c);
        req.rubric = "modular arithmetic: answer the sum modulo " + std::to_string(task.modulus) +
                     " as a single number followed by </s>";
        req.correct = task.correct(prompt, c);
        req.well_formatted = task.well_formatted(c);
        req.overlong = overlong;
        grp.completions.push_back(std::move(c));
        if (grp.skipped) continue;
        auto s = judge.score(req);
        if (!s) {
            grp.skipped = true;
            grp.skip_reason = "judge failure on " + req.id;
            continue;
        }
        grp.scores.push_back(*s);
    }
    if (grp.skipped) return grp;
    if (skip_mastered(grp.scores, cfg.skip)) {
        grp.skipped = true;
        grp.skip_reason = "mastered";
    }
    for (std::size_t i = 0; i < cfg.group_size; ++i)
        grp.rewards.push_back(cfg.stage == RLStage::kFormat ? mix_reward(grp.scores[i], cfg.overlong_penalty)
                                                            : (grp.correct[i] ? 1.0 : 0.0));
    grp.advantages = compute_advantages(grp.rewards);
    return grp;
}

template <class T>
RLTrainer<T>::RLTrainer(HybridLM<T>& policy, const RLConfig& cfg, const ModularTask& task, Judge& judge,
                        std::uint64_t seed)
    : policy_(policy), cfg_(cfg), task_(task), judge_(judge), seed_(seed), opt_(cfg.optim, policy.parameters()) {
    cfg_.validate();
    task_.validate();
    if (policy.config().vocab_size < task_.vocab_size) throw InputError("rl: model vocab smaller than task vocab");
    Rng unused(seed, RngStream::kInit, 0x7ef);
    ref_ = std::make_unique<HybridLM<T>>(policy.config(), unused);
    auto src = policy_.parameters();
    auto dst = ref_->parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
}

template <class T>
std::vector<CompletionTerm<T>> RLTrainer<T>::build_terms(Graph<T>& g, const RolloutGroup& grp,
                                                         std::deque<Tensor<T>>& ref_store) {
    std::vector<CompletionTerm<T>> terms;
    const std::size_t P = grp.prompt.size();
    for (std::size_t i = 0; i < grp.completions.size(); ++i) {
        const auto& c = grp.completions[i];
        std::vector<int> input = grp.prompt;
        input.insert(input.end(), c.begin(), c.end() - 1);
        std::vector<std::size_t> rows(c.size());
        std::iota(rows.begin(), rows.end(), P - 1);
        CompletionTerm<T> t;
        t.logits = index_select(policy_.forward(g, input), 0, rows);
        t.tokens = c;
        t.advantage = grp.advantages[i];
        if (cfg_.kl_coef > 0.0) {
            Graph<T> rg(false);
            ref_store.push_back(log_softmax(index_select(ref_->forward(rg, input), 0, rows)).value());
            t.ref_logprobs = &ref_store.back();
        }
        terms.push_back(std::move(t));
    }
    return terms;
}

template <class T>
void RLTrainer<T>::flat_grad(std::vector<double>& out) {
    out.clear();
    for (Param<T>* p : policy_.parameters()) {
        if (p->grad.shape != p->value.shape) p->grad = Tensor<T>(p->value.shape);
        for (T v : p->grad.data) out.push_back(double(v));
    }
}

template <class T>
RLStepMetrics RLTrainer<T>::update(const std::vector<RolloutGroup>& groups) {
    RLStepMetrics m;
    m.step = step_++;
    m.groups = groups.size();
    std::vector<const RolloutGroup*> active;
    std::size_t completions = 0, ok = 0;
    double reward = 0.0;
    for (const auto& grp : groups) {
        if (grp.skipped) {
            ++m.skipped_groups;
            continue;
        }
        active.push_back(&grp);
        for (std::size_t i = 0; i < grp.completions.size(); ++i) {
            ++completions;
            ok += grp.correct[i];
            reward += grp.rewards[i];
        }
    }
    const auto params = policy_.parameters();
    m.lr = opt_.lr_at(opt_.step_count());
    if (active.empty()) {
        m.lr = 0.0;
        return m;
    }
    m.success_rate = double(ok) / double(completions);
    m.mean_reward = reward / double(completions);
    const T inv_n = static_cast<T>(1.0 / double(active.size()));

    // gradient of a selection of per-completion terms, summed over groups
    enum class Part { kAll, kPositive, kNegative, kKL, kDistill };
    auto gradient = [&](Part part, std::vector<double>& flat, double* kl_value) -> std::size_t {
        for (Param<T>* p : params) p->zero_grad();
        Graph<T> g(true);
        std::deque<Tensor<T>> refs;
        Var<T> total = g.constant(Tensor<T>({1}));
        std::size_t used = 0;
        double kl_sum = 0.0;
        for (const RolloutGroup* grp : active) {
            if (part == Part::kDistill) {
                const auto w = distill_weights(grp->advantages);
                for (std::size_t i = 0; i < grp->completions.size(); ++i) {
                    if (w[i] == 0.0) continue;
                    const auto& c = grp->completions[i];
                    std::vector<int> input = grp->prompt;
                    input.insert(input.end(), c.begin(), c.end() - 1);
                    std::vector<std::size_t> rows(c.size());
                    std::iota(rows.begin(), rows.end(), grp->prompt.size() - 1);
                    Var<T> lp = log_softmax(index_select(policy_.forward(g, input), 0, rows));
                    Var<T> ce = scale(sum_all(pick(lp, c)), static_cast<T>(-1.0 / double(c.size())));
                    total = total + scale(ce, static_cast<T>(w[i]));
                    ++used;
                }
                continue;
            }
            const auto terms = build_terms(g, *grp, refs);
            GroupLoss<T> gl = grpo_loss(g, terms, cfg_.kl_coef);
            kl_sum += double(gl.kl.value()[0]);
            switch (part) {
                case Part::kAll:
                    total = total + gl.loss;
                    used += terms.size();
                    break;
                case Part::kPositive:
                case Part::kNegative:
                    for (std::size_t i = 0; i < terms.size(); ++i) {
                        const double a = terms[i].advantage;
                        if ((part == Part::kPositive && a > 0.0) || (part == Part::kNegative && a < 0.0)) {
                            total = total + gl.pg_terms[i];
                            ++used;
                        }
                    }
                    break;
                case Part::kKL:
                    total = total + scale(gl.kl, static_cast<T>(cfg_.kl_coef));
                    used += terms.size();
                    break;
                case Part::kDistill: break;
            }
        }
        if (kl_value) *kl_value = kl_sum / double(active.size());
        g.backward(scale(total, inv_n));
        flat_grad(flat);
        return used;
    };

    std::vector<double> flat;
    switch (cfg_.stage) {
        case RLStage::kFormat:
            gradient(Part::kAll, flat, &m.kl);
            break;
        case RLStage::kBalanced: {
            std::vector<double> gp, gm, gk;
            gradient(Part::kPositive, gp, &m.kl);
            gradient(Part::kNegative, gm, nullptr);
            gradient(Part::kKL, gk, nullptr);
            const BalancedGradient b = balanced_gradient(gp, gm, cfg_.balance_eps);
            m.g_plus_norm = b.norm_plus;
            m.g_minus_norm = b.norm_minus;
            m.balance_scale = b.scale;
            m.scaled_minus_norm = b.scaled_minus_norm;
            if (b.scaled_minus_norm > b.norm_plus * (1.0 + 1e-12))
                throw CheckFailure("balanced update: scaled negative norm exceeds positive norm");
            flat = b.g;
            for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += gk[i];
            break;
        }
        case RLStage::kDistill:
            m.retained_traces = gradient(Part::kDistill, flat, nullptr);
            if (m.retained_traces == 0) {
                m.lr = 0.0;
                return m;
            }
            break;
    }
    std::size_t k = 0;
    for (Param<T>* p : params)
        for (auto& v : p->grad.data) v = static_cast<T>(flat[k++]);
    const double norm = global_grad_norm(params);
    if (!std::isfinite(norm)) throw NumericalError("non-finite RL gradient");
    const double clip = opt_.config().clip_norm;
    if (clip > 0.0 && norm > clip)
        for (Param<T>* p : params)
            for (auto& v : p->grad.data) v = static_cast<T>(double(v) * clip / norm);
    m.lr = opt_.step(params);
    return m;
}

template <class T>
RLReport RLTrainer<T>::run(const std::vector<std::vector<int>>& eval_prompts, const RLStepCallback& on_step) {
    RLReport rep;
    rep.stage = cfg_.stage;
    rep.accuracy_before = greedy_accuracy(policy_, task_, eval_prompts, cfg_.max_new_tokens);
    for (std::size_t s = 0; s < cfg_.steps; ++s) {
        Rng prompt_rng(seed_, RngStream::kData, s);
        Rng sample_rng(seed_, RngStream::kSample, s);
        std::vector<RolloutGroup> groups;
        for (std::size_t i = 0; i < cfg_.prompts_per_step; ++i) {
            const auto p = task_.prompt(prompt_rng.below(task_.modulus), prompt_rng.below(task_.modulus));
            groups.push_back(rollout_group(policy_, task_, p, cfg_, judge_, sample_rng,
                                           "s" + std::to_string(s) + "p" + std::to_string(i)));
        }
        RLStepMetrics m = update(groups);
        if (m.skipped_groups == m.groups)
            rep.warnings.push_back("step " + std::to_string(s) + ": every group skipped, no update");
        else if (cfg_.stage == RLStage::kDistill && m.retained_traces == 0)
            rep.warnings.push_back("step " + std::to_string(s) + ": no positive-advantage traces, no update");
        if (cfg_.eval_every && (s + 1) % cfg_.eval_every == 0)
            m.eval_accuracy = greedy_accuracy(policy_, task_, eval_prompts, cfg_.max_new_tokens);
        if (on_step) on_step(m);
        rep.steps.push_back(m);
    }
    rep.accuracy_after = greedy_accuracy(policy_, task_, eval_prompts, cfg_.max_new_tokens);
    for (const auto& line : judge_.log()) rep.warnings.push_back(line);
    return rep;
}

template GroupLoss<float> grpo_loss(Graph<float>&, const std::vector<CompletionTerm<float>>&, double);
template GroupLoss<double> grpo_loss(Graph<double>&, const std::vector<CompletionTerm<double>>&, double);
template std::vector<int> sample_completion(HybridLM<float>&, const std::vector<int>&, double, std::size_t,
                                            std::size_t, Rng&);
template std::vector<int> sample_completion(HybridLM<double>&, const std::vector<int>&, double, std::size_t,
                                            std::size_t, Rng&);
template std::vector<int> greedy_completion(HybridLM<float>&, const std::vector<int>&, std::size_t);
template std::vector<int> greedy_completion(HybridLM<double>&, const std::vector<int>&, std::size_t);
template double greedy_accuracy(HybridLM<float>&, const ModularTask&, const std::vector<std::vector<int>>&,
                                std::size_t);
template double greedy_accuracy(HybridLM<double>&, const ModularTask&, const std::vector<std::vector<int>>&,
                                std::size_t);
template RolloutGroup rollout_group(HybridLM<float>&, const ModularTask&, const std::vector<int>&, const RLConfig&,
                                    Judge&, Rng&, const std::string&);
template RolloutGroup rollout_group(HybridLM<double>&, const ModularTask&, const std::vector<int>&, const RLConfig&,
                                    Judge&, Rng&, const std::string&);
template class RLTrainer<float>;
template class RLTrainer<double>;

}  // namespace seqcond
