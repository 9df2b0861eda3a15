#include "seqcond/spectral_oracle.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <set>
#include <thread>

#include "seqcond/errors.hpp"

namespace seqcond::oracle {

namespace {

constexpr Complex kI{0.0, 1.0};

std::size_t ipow(int base, int exp) {
    std::size_t r = 1;
    for (int i = 0; i < exp; ++i) r *= static_cast<std::size_t>(base);
    return r;
}

double dot(std::span<const double> theta, const LatticePoint& h) {
    double acc = 0.0;
    for (std::size_t a = 0; a < h.size(); ++a) acc += theta[a] * static_cast<double>(h[a]);
    return acc;
}

void check_dim(const LatticePrefix& prefix, std::span<const double> theta) {
    if (theta.size() != static_cast<std::size_t>(prefix.dim()))
        throw InputError("frequency vector has dimension " + std::to_string(theta.size()) + ", prefix has " +
                         std::to_string(prefix.dim()));
}

}  // namespace

LatticePrefix::LatticePrefix(int dim, int modulus, std::vector<LatticePoint> tokens, std::vector<double> weights)
    : dim_(dim), modulus_(modulus), tokens_(std::move(tokens)), weights_(std::move(weights)) {
    if (dim_ < 1 || modulus_ < 1) throw InputError("lattice prefix needs dim >= 1 and modulus >= 1");
    if (tokens_.empty()) throw InputError("lattice prefix needs at least one token");
    if (tokens_.size() != weights_.size()) throw InputError("token and weight counts differ");
    if (tokens_.size() > ipow(modulus_, dim_)) throw InputError("more tokens than lattice points");
    std::set<LatticePoint> seen;
    for (const auto& h : tokens_) {
        if (h.size() != static_cast<std::size_t>(dim_)) throw InputError("token dimension mismatch");
        for (int c : h)
            if (c < 0 || c >= modulus_) throw InputError("token coordinate outside {0..N-1}");
        if (!seen.insert(h).second) throw InputError("duplicate token in lattice prefix");
    }
    double total = 0.0;
    for (double p : weights_) {
        if (!(p > 0.0)) throw InputError("lattice prefix weights must be positive");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) throw InputError("lattice prefix weights must sum to 1");
}

LatticePrefix LatticePrefix::uniform(int dim, int modulus, std::vector<LatticePoint> tokens) {
    const std::size_t t = tokens.size();
    std::vector<double> w(t, t ? 1.0 / static_cast<double>(t) : 0.0);
    return LatticePrefix(dim, modulus, std::move(tokens), std::move(w));
}

FrequencyLattice::FrequencyLattice(int dim, int modulus)
    : dim_(dim), modulus_(modulus), count_(ipow(modulus, dim)) {
    if (dim < 1 || modulus < 1) throw InputError("frequency lattice needs dim >= 1 and modulus >= 1");
}

LatticePoint FrequencyLattice::index(std::size_t p) const {
    LatticePoint m(static_cast<std::size_t>(dim_));
    for (int a = dim_ - 1; a >= 0; --a) {
        m[static_cast<std::size_t>(a)] = static_cast<int>(p % static_cast<std::size_t>(modulus_));
        p /= static_cast<std::size_t>(modulus_);
    }
    return m;
}

std::vector<double> FrequencyLattice::point(std::size_t p) const {
    const LatticePoint m = index(p);
    std::vector<double> theta(m.size());
    for (std::size_t a = 0; a < m.size(); ++a)
        theta[a] = 2.0 * std::numbers::pi * static_cast<double>(m[a]) / static_cast<double>(modulus_);
    return theta;
}

std::vector<std::vector<double>> FrequencyLattice::points() const {
    std::vector<std::vector<double>> out;
    out.reserve(count_);
    for (std::size_t p = 0; p < count_; ++p) out.push_back(point(p));
    return out;
}

Complex char_fn(const LatticePrefix& prefix, std::span<const double> theta) {
    check_dim(prefix, theta);
    Complex acc{0.0, 0.0};
    for (std::size_t k = 0; k < prefix.size(); ++k)
        acc += prefix.weights()[k] * std::exp(kI * dot(theta, prefix.tokens()[k]));
    return acc;
}

std::vector<Complex> deriv_summary(const LatticePrefix& prefix, std::span<const double> theta) {
    check_dim(prefix, theta);
    std::vector<Complex> out(static_cast<std::size_t>(prefix.dim()));
    for (std::size_t k = 0; k < prefix.size(); ++k) {
        const Complex ph = prefix.weights()[k] * std::exp(kI * dot(theta, prefix.tokens()[k]));
        for (std::size_t a = 0; a < out.size(); ++a) out[a] += static_cast<double>(prefix.tokens()[k][a]) * ph;
    }
    for (auto& v : out) v *= kI;
    return out;
}

Complex retrieval_query(const LatticePrefix& prefix, std::size_t j, std::span<const double> theta) {
    check_dim(prefix, theta);
    if (j >= prefix.size()) throw InputError("retrieval index out of range");
    return kI / prefix.weights()[j] * std::exp(kI * dot(theta, prefix.tokens()[j]));
}

SpectralTable::SpectralTable(const LatticePrefix& prefix)
    : prefix_(prefix), lattice_(prefix.dim(), prefix.modulus()), thetas_(lattice_.points()) {
    const int N = prefix_.modulus();
    const std::size_t t = prefix_.size(), d = static_cast<std::size_t>(prefix_.dim()), P = lattice_.size();
    roots_.resize(static_cast<std::size_t>(N));
    for (int r = 0; r < N; ++r)
        roots_[static_cast<std::size_t>(r)] =
            std::polar(1.0, 2.0 * std::numbers::pi * static_cast<double>(r) / static_cast<double>(N));
    phases_.resize(P * t);
    summary_.assign(P * d, Complex{});
    phi_.assign(P, Complex{});
    for (std::size_t p = 0; p < P; ++p) {
        const LatticePoint m = lattice_.index(p);
        for (std::size_t k = 0; k < t; ++k) {
            const LatticePoint& h = prefix_.tokens()[k];
            long residue = 0;
            for (std::size_t a = 0; a < d; ++a) residue += static_cast<long>(m[a]) * h[a];
            const Complex ph = roots_[static_cast<std::size_t>(residue % N)];
            phases_[p * t + k] = ph;
            const double w = prefix_.weights()[k];
            phi_[p] += w * ph;
            for (std::size_t a = 0; a < d; ++a) summary_[p * d + a] += w * static_cast<double>(h[a]) * ph;
        }
        for (std::size_t a = 0; a < d; ++a) summary_[p * d + a] *= kI;
    }
}

std::span<const Complex> SpectralTable::summary(std::size_t p) const {
    const std::size_t d = static_cast<std::size_t>(prefix_.dim());
    return std::span<const Complex>(summary_).subspan(p * d, d);
}

namespace {

double real_part_checked(Complex v, const char* what) {
    if (std::abs(v.imag()) > 1e-6)
        throw NumericalError(std::string(what) + ": imaginary residual " + std::to_string(std::abs(v.imag())) +
                             " exceeds 1e-6");
    return v.real();
}

}  // namespace

std::vector<double> exact_readout(const SpectralTable& table, const SpectralQuery& query) {
    const std::size_t d = static_cast<std::size_t>(table.prefix().dim());
    std::vector<Complex> acc(d);
    for (std::size_t p = 0; p < table.lattice().size(); ++p) {
        const Complex wq = std::conj(query(table.thetas()[p]));
        const auto s = table.summary(p);
        for (std::size_t a = 0; a < d; ++a) acc[a] += s[a] * wq;
    }
    std::vector<double> out(d);
    const double qw = table.lattice().quadrature_weight();
    for (std::size_t a = 0; a < d; ++a) out[a] = real_part_checked(acc[a] * qw, "exact_readout");
    return out;
}

std::vector<double> exact_readout(const LatticePrefix& prefix, const SpectralQuery& query) {
    return exact_readout(SpectralTable(prefix), query);
}

double scalar_readout(const SpectralTable& table, const SpectralQuery& query) {
    Complex acc{};
    for (std::size_t p = 0; p < table.lattice().size(); ++p)
        acc += table.char_value(p) * std::conj(query(table.thetas()[p]));
    return real_part_checked(acc * table.lattice().quadrature_weight(), "scalar_readout");
}

std::vector<double> attention_composite(const SpectralTable& table, std::span<const double> alphas) {
    const LatticePrefix& prefix = table.prefix();
    if (alphas.size() != prefix.size())
        throw InputError("attention_composite: " + std::to_string(alphas.size()) + " coefficients for " +
                         std::to_string(prefix.size()) + " tokens");
    // Evaluate the composite query from the tabulated phases; the lambda is
    // handed lattice points in table order.
    std::size_t cursor = 0;
    const std::size_t t = prefix.size();
    std::vector<Complex> consts(t);
    for (std::size_t k = 0; k < t; ++k) consts[k] = alphas[k] * kI / prefix.weights()[k];
    SpectralQuery composite = [&](std::span<const double>) {
        Complex w{};
        for (std::size_t k = 0; k < t; ++k) w += consts[k] * table.phase(cursor, k);
        ++cursor;
        return w;
    };
    return exact_readout(table, composite);
}

std::vector<double> attention_composite(const LatticePrefix& prefix, std::span<const double> alphas) {
    return attention_composite(SpectralTable(prefix), alphas);
}

// ---- suites -------------------------------------------------------------------

LatticePrefix random_prefix(Rng& rng, const OracleSuiteConfig& cfg, bool uniform_weights) {
    const int d = rng.range(1, cfg.max_dim);
    const int N = rng.range(2, cfg.max_modulus);
    const std::size_t cap = std::min<std::size_t>(static_cast<std::size_t>(cfg.max_tokens), ipow(N, d));
    const std::size_t t = static_cast<std::size_t>(rng.range(1, static_cast<int>(cap)));
    const std::size_t P = ipow(N, d);
    // distinct lattice indices by rejection (t <= 20 and P >= t)
    std::set<std::size_t> picked;
    std::vector<std::size_t> order;
    while (order.size() < t) {
        const std::size_t idx = rng.below(P);
        if (picked.insert(idx).second) order.push_back(idx);
    }
    const FrequencyLattice grid(d, N);
    std::vector<LatticePoint> tokens;
    for (std::size_t idx : order) tokens.push_back(grid.index(idx));
    if (uniform_weights) return LatticePrefix::uniform(d, N, std::move(tokens));
    std::vector<double> w(t);
    double total = 0.0;
    for (auto& v : w) total += (v = rng.uniform(0.05, 1.0));
    for (auto& v : w) v /= total;
    // fold the rounding remainder into the largest weight
    double s = 0.0;
    for (double v : w) s += v;
    *std::max_element(w.begin(), w.end()) += 1.0 - s;
    return LatticePrefix(d, N, std::move(tokens), std::move(w));
}

namespace {

struct Accum {
    std::size_t instances = 0;
    double max_err = 0.0;
    bool failed = false;  // exception inside a check
    void add(double e) {
        if (!std::isfinite(e)) failed = true;
        max_err = std::max(max_err, e);
    }
    void merge(const Accum& o) {
        instances += o.instances;
        max_err = std::max(max_err, o.max_err);
        failed = failed || o.failed;
    }
};

enum CheckId { kNormalization, kGradient, kRetrieval, kRecovery, kScalarLimit, kLinearity, kAttention, kNumChecks };

const char* kCheckNames[kNumChecks] = {
    "normalization",     "gradient_consistency", "exact_retrieval",       "distribution_recovery",
    "scalar_summary_limit", "linearity",          "attention_subsumption",
};

const double kTolerances[kNumChecks] = {1e-12, 1e-8, 1e-9, 1e-9, 1e-9, 1e-9, 1e-9};

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double e = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) e = std::max(e, std::abs(a[i] - b[i]));
    return e;
}

std::vector<double> as_real(const LatticePoint& h) { return std::vector<double>(h.begin(), h.end()); }

// One instance of each applicable check, drawn from its own substream.
void run_instance(const OracleSuiteConfig& cfg, std::size_t i, std::array<Accum, kNumChecks>& acc) {
    auto guarded = [&](CheckId id, auto&& body) {
        try {
            body();
        } catch (const Error&) {
            acc[id].failed = true;
        }
        ++acc[id].instances;
    };
    const double fault = cfg.query_constant_scale;
    if (i < cfg.instances) {
        Rng rng(cfg.seed, RngStream::kOracle, 4 * i);
        const LatticePrefix uni = random_prefix(rng, cfg, true);
        const SpectralTable table(uni);
        guarded(kNormalization, [&] {
            const std::vector<double> zero(static_cast<std::size_t>(uni.dim()), 0.0);
            acc[kNormalization].add(std::abs(char_fn(uni, zero) - Complex{1.0, 0.0}));
        });
        guarded(kRetrieval, [&] {
            for (std::size_t j = 0; j < uni.size(); ++j) {
                const auto got = exact_readout(table, [&](std::span<const double> th) {
                    return fault * retrieval_query(uni, j, th);
                });
                acc[kRetrieval].add(max_abs_diff(got, as_real(uni.tokens()[j])));
            }
        });

        Rng wrng(cfg.seed, RngStream::kOracle, 4 * i + 1);
        const LatticePrefix weighted = random_prefix(wrng, cfg, false);
        const SpectralTable wtable(weighted);
        guarded(kRecovery, [&] {
            for (std::size_t j = 0; j < weighted.size(); ++j) {
                const LatticePoint& hj = weighted.tokens()[j];
                const double pj = weighted.weights()[j];
                // weighted embedding p_j h_j from the derivative summary
                const auto ph = exact_readout(wtable, [&](std::span<const double> th) {
                    return fault * kI * std::exp(kI * dot(th, hj));
                });
                // weight p_j from the characteristic function
                const double p = scalar_readout(wtable, [&](std::span<const double> th) {
                    return fault * std::exp(kI * dot(th, hj));
                });
                std::vector<double> expect = as_real(hj);
                for (auto& v : expect) v *= pj;
                acc[kRecovery].add(max_abs_diff(ph, expect));
                acc[kRecovery].add(std::abs(p - pj));
                if (p >= 1e-6) {
                    std::vector<double> h = ph;
                    for (auto& v : h) v /= p;
                    acc[kRecovery].add(max_abs_diff(h, as_real(hj)));
                }
            }
        });
        guarded(kScalarLimit, [&] {
            // The scalar pairing yields one number (the weight), never the embedding.
            for (std::size_t j = 0; j < weighted.size(); ++j) {
                const LatticePoint& hj = weighted.tokens()[j];
                const double p = scalar_readout(wtable, [&](std::span<const double> th) {
                    return std::exp(kI * dot(th, hj));
                });
                acc[kScalarLimit].add(std::abs(p - weighted.weights()[j]));
            }
        });
        guarded(kLinearity, [&] {
            Rng lr(cfg.seed, RngStream::kOracle, 4 * i + 2);
            const std::size_t t = weighted.size();
            const std::size_t a = lr.below(t), b = lr.below(t);
            const double ca = lr.uniform(-2.0, 2.0), cb = lr.uniform(-2.0, 2.0);
            const auto ra = exact_readout(wtable, [&](std::span<const double> th) {
                return fault * retrieval_query(weighted, a, th);
            });
            const auto rb = exact_readout(wtable, [&](std::span<const double> th) {
                return fault * retrieval_query(weighted, b, th);
            });
            const auto rab = exact_readout(wtable, [&](std::span<const double> th) {
                return fault * (ca * retrieval_query(weighted, a, th) + cb * retrieval_query(weighted, b, th));
            });
            std::vector<double> combo(ra.size());
            for (std::size_t x = 0; x < ra.size(); ++x) combo[x] = ca * ra[x] + cb * rb[x];
            acc[kLinearity].add(max_abs_diff(rab, combo));
            // and against the token values themselves
            std::vector<double> direct(ra.size());
            for (std::size_t x = 0; x < ra.size(); ++x)
                direct[x] = ca * weighted.tokens()[a][x] + cb * weighted.tokens()[b][x];
            acc[kLinearity].add(max_abs_diff(rab, direct));
        });
    }
    if (i < cfg.gradient_instances) {
        Rng rng(cfg.seed, RngStream::kOracle, 4 * i + 3);
        const LatticePrefix prefix = random_prefix(rng, cfg, rng.below(2) == 0);
        guarded(kGradient, [&] {
            const std::size_t d = static_cast<std::size_t>(prefix.dim());
            std::vector<double> theta(d);
            for (auto& v : theta) v = rng.uniform(-std::numbers::pi, std::numbers::pi);
            const auto s = deriv_summary(prefix, theta);
            const double h = 1e-6;
            for (std::size_t a = 0; a < d; ++a) {
                auto tp = theta, tm = theta;
                tp[a] += h;
                tm[a] -= h;
                const Complex fd = (char_fn(prefix, tp) - char_fn(prefix, tm)) / (2.0 * h);
                acc[kGradient].add(std::max(std::abs(fd.real() - s[a].real()), std::abs(fd.imag() - s[a].imag())));
            }
        });
    }
    if (i < cfg.attention_instances) {
        Rng rng(cfg.seed ^ 0x5a5a5a5aULL, RngStream::kOracle, i);
        const LatticePrefix prefix = random_prefix(rng, cfg, rng.below(2) == 0);
        const SpectralTable table(prefix);
        guarded(kAttention, [&] {
            const std::size_t d = static_cast<std::size_t>(prefix.dim()), t = prefix.size();
            std::vector<double> q(d);
            for (auto& v : q) v = rng.normal() * 0.3;
            std::vector<double> alphas(t);
            double mx = -1e300;
            for (std::size_t k = 0; k < t; ++k) {
                alphas[k] = dot(q, prefix.tokens()[k]);
                mx = std::max(mx, alphas[k]);
            }
            double z = 0.0;
            for (auto& a : alphas) z += (a = std::exp(a - mx));
            for (auto& a : alphas) a = fault * a / z;
            std::vector<double> expect(d, 0.0);
            for (std::size_t k = 0; k < t; ++k)
                for (std::size_t a = 0; a < d; ++a) expect[a] += alphas[k] / fault * prefix.tokens()[k][a];
            acc[kAttention].add(max_abs_diff(attention_composite(table, alphas), expect));
        });
    }
}

}  // namespace

std::vector<CheckResult> run_oracle_suite(const OracleSuiteConfig& cfg) {
    if (cfg.instances == 0) throw InputError("oracle suite needs at least one instance");
    if (cfg.max_dim < 1 || cfg.max_modulus < 2 || cfg.max_tokens < 1)
        throw InputError("oracle suite bounds must be positive (modulus >= 2)");
    const std::size_t total = std::max({cfg.instances, cfg.attention_instances, cfg.gradient_instances});
    const unsigned nthreads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(total)));
    std::vector<std::array<Accum, kNumChecks>> partial(nthreads);
    auto worker = [&](unsigned w) {
        for (std::size_t i = w; i < total; i += nthreads) run_instance(cfg, i, partial[w]);
    };
    if (nthreads == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < nthreads; ++w) pool.emplace_back(worker, w);
        for (auto& th : pool) th.join();
    }
    std::array<Accum, kNumChecks> acc{};
    for (const auto& p : partial)
        for (int c = 0; c < kNumChecks; ++c) acc[c].merge(p[c]);
    std::vector<CheckResult> out;
    for (int c = 0; c < kNumChecks; ++c) {
        CheckResult r;
        r.check_name = kCheckNames[c];
        r.instances = acc[c].instances;
        r.max_abs_error = acc[c].max_err;
        r.tolerance = kTolerances[c];
        r.pass = !acc[c].failed && r.instances > 0 && r.max_abs_error <= r.tolerance;
        out.push_back(r);
    }
    return out;
}

}  // namespace seqcond::oracle
