#pragma once

// Central finite-difference verification of graph gradients. The numerical
// side only evaluates the loss forward (non-recording graphs), so it is
// independent of every backward rule it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "seqcond/autograd.hpp"
#include "seqcond/rng.hpp"

namespace seqcond {

struct GradCheckEntry {
    std::string param;
    std::size_t checked = 0;
    double analytic_norm = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst_rel_error() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.rel_error);
        return w;
    }
    const GradCheckEntry* worst() const {
        const GradCheckEntry* w = nullptr;
        for (const auto& e : entries)
            if (!w || e.rel_error > w->rel_error) w = &e;
        return w;
    }
};

template <class T>
using LossBuilder = std::function<Var<T>(Graph<T>&)>;

// Relative error ||a - n|| / max(||a||, ||n||, floor) per parameter tensor.
// At most `max_entries` coordinates per tensor are perturbed (a seeded random
// subset when the tensor is larger).
template <class T>
GradCheckReport finite_difference_check(const std::vector<Param<T>*>& params, const LossBuilder<T>& build,
                                        double step = 1e-5, std::size_t max_entries = 0, std::uint64_t seed = 0,
                                        double floor = 1e-6) {
    for (Param<T>* p : params) p->zero_grad();
    {
        Graph<T> g(true);
        Var<T> loss = build(g);
        g.backward(loss);
    }
    auto eval = [&]() {
        Graph<T> g(false);
        return static_cast<double>(build(g).value()[0]);
    };
    GradCheckReport report;
    Rng rng(seed, RngStream::kVerify, 0xfd);
    for (Param<T>* p : params) {
        GradCheckEntry e;
        e.param = p->name;
        const std::size_t n = p->value.size();
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        if (max_entries && n > max_entries) {
            for (std::size_t i = 0; i < max_entries; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
            idx.resize(max_entries);
        }
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t i : idx) {
            const T orig = p->value[i];
            p->value[i] = static_cast<T>(orig + step);
            const double up = eval();
            p->value[i] = static_cast<T>(orig - step);
            const double down = eval();
            p->value[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = static_cast<double>(p->grad[i]);
            diff2 += (numeric - analytic) * (numeric - analytic);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
        e.checked = idx.size();
        e.analytic_norm = std::sqrt(a2);
        e.rel_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), floor});
        report.entries.push_back(e);
    }
    return report;
}

}  // namespace seqcond
