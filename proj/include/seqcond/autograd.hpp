#pragma once

// Tensor-level reverse-mode differentiation. A Graph records every op applied
// to its Vars together with a backward rule; Graph::backward walks the tape in
// reverse and accumulates gradients into Param storage.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include "seqcond/errors.hpp"
#include "seqcond/tensor.hpp"

namespace seqcond {

template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

    void zero_grad() {
        if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
        else grad.fill(T(0));
    }
};

template <class T>
class Graph;

template <class T>
struct Var {
    Graph<T>* g = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return g->value(*this); }
    const Shape& shape() const { return g->value(*this).shape; }
    std::size_t dim(std::size_t axis) const { return shape().at(axis); }
};

template <class T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    explicit Graph(bool record = true) : record_(record) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return record_; }
    std::size_t size() const { return nodes_.size(); }

    Var<T> constant(Tensor<T> v) { return push_leaf(std::move(v), false, nullptr); }

    // Leaf whose gradient is kept on the node (read back with grad()).
    Var<T> input(Tensor<T> v) { return push_leaf(std::move(v), record_, nullptr); }

    Var<T> param(Param<T>& p) { return push_leaf(p.value, record_, &p); }

    // Node computed from parents. The backward rule is only stored if some
    // parent needs a gradient.
    Var<T> push(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
        bool needs = false;
        if (record_)
            for (const auto& p : parents) needs = needs || nodes_[p.id].needs_grad;
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs;
        if (needs) n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

    // Gradient buffer of a node, allocated on first use; nullptr if the node
    // does not participate in differentiation.
    Tensor<T>* grad_buffer(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.needs_grad) return nullptr;
        if (n.grad.shape != n.value.shape) n.grad = Tensor<T>(n.value.shape);
        return &n.grad;
    }
    const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }

    // Gradient of an input() leaf after backward(); zeros if untouched.
    Tensor<T> grad(Var<T> v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.shape == n.value.shape) return n.grad;
        return Tensor<T>(n.value.shape);
    }

    void backward(Var<T> out, const Tensor<T>& seed) {
        if (!record_) throw InputError("backward on a non-recording graph");
        require_shape(seed, value(out).shape, "backward seed");
        Tensor<T>* g = grad_buffer(out.id);
        if (!g) return;
        for (std::size_t i = 0; i < seed.size(); ++i) (*g)[i] += seed[i];
        for (std::size_t id = out.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.needs_grad || n.grad.shape != n.value.shape) continue;
            if (n.backward) n.backward(*this, id);
            if (n.param) {
                Param<T>& p = *n.param;
                if (p.grad.shape != p.value.shape) p.grad = Tensor<T>(p.value.shape);
                for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
            }
        }
    }

    void backward(Var<T> scalar_out) {
        if (value(scalar_out).size() != 1) throw InputError("backward without seed needs a scalar output");
        backward(scalar_out, Tensor<T>(value(scalar_out).shape, T(1)));
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool needs_grad = false;
        BackwardFn backward;
        Param<T>* param = nullptr;
    };

    Var<T> push_leaf(Tensor<T> v, bool needs, Param<T>* p) {
        Node n;
        n.value = std::move(v);
        n.needs_grad = needs;
        n.param = needs ? p : nullptr;
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    bool record_;
    std::vector<Node> nodes_;
};

namespace detail {

struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> sa, sb;  // per-output-dim strides, 0 where broadcast
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
    BroadcastPlan p;
    p.out.resize(r);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    for (std::size_t i = 0; i < r; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
            throw InputError("shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
        p.out[i] = std::max(pa[i], pb[i]);
    }
    std::size_t stride_a = 1, stride_b = 1;
    for (std::size_t i = r; i-- > 0;) {
        p.sa[i] = pa[i] == 1 ? 0 : stride_a;
        p.sb[i] = pb[i] == 1 ? 0 : stride_b;
        stride_a *= pa[i];
        stride_b *= pb[i];
    }
    return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
    const std::size_t r = p.out.size();
    if (r == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    const std::size_t inner = p.out[r - 1];
    const std::size_t ia_step = p.sa[r - 1], ib_step = p.sb[r - 1];
    const std::size_t total = numel(p.out);
    if (total == 0) return;
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < total; o += inner) {
        std::size_t a = ia, b = ib;
        for (std::size_t j = 0; j < inner; ++j, a += ia_step, b += ib_step) f(o + j, a, b);
        // advance the outer counters
        for (std::size_t d = r - 1; d-- > 0;) {
            ++idx[d];
            ia += p.sa[d];
            ib += p.sb[d];
            if (idx[d] < p.out[d]) break;
            ia -= p.sa[d] * idx[d];
            ib -= p.sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

template <class T, class Fwd, class DA, class DB>
Var<T> binary(Var<T> a, Var<T> b, Fwd fwd, DA da, DB db) {
    Graph<T>& g = *a.g;
    const auto plan = plan_broadcast(a.shape(), b.shape());
    Tensor<T> out(plan.out);
    {
        const T* av = a.value().ptr();
        const T* bv = b.value().ptr();
        T* ov = out.ptr();
        for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = fwd(av[i], bv[j]); });
    }
    const std::size_t ida = a.id, idb = b.id;
    return g.push(std::move(out), {a, b}, [ida, idb, plan, da, db](Graph<T>& gr, std::size_t self) {
        const T* go = gr.grad_of(self).ptr();
        const T* av = gr.value(ida).ptr();
        const T* bv = gr.value(idb).ptr();
        const T* ov = gr.value(self).ptr();
        Tensor<T>* ga = gr.grad_buffer(ida);
        Tensor<T>* gb = gr.grad_buffer(idb);
        if (ga) {
            T* gp = ga->ptr();
            for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                gp[i] += go[o] * da(av[i], bv[j], ov[o]);
            });
        }
        if (gb) {
            T* gp = gb->ptr();
            for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                gp[j] += go[o] * db(av[i], bv[j], ov[o]);
            });
        }
    });
}

// y = f(x); dx = dy * df(x, y)
template <class T, class Fwd, class Df>
Var<T> unary(Var<T> x, Fwd fwd, Df df) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    Tensor<T> out(xv.shape);
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    const std::size_t idx = x.id;
    return g.push(std::move(out), {x}, [idx, df](Graph<T>& gr, std::size_t self) {
        Tensor<T>* gx = gr.grad_buffer(idx);
        if (!gx) return;
        const Tensor<T>& go = gr.grad_of(self);
        const Tensor<T>& xv = gr.value(idx);
        const Tensor<T>& yv = gr.value(self);
        for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += go[i] * df(xv[i], yv[i]);
    });
}

template <class T>
T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
T softplus(T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) {
    return detail::binary(
        a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Var<T> operator-(Var<T> a, Var<T> b) {
    return detail::binary(
        a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Var<T> operator*(Var<T> a, Var<T> b) {
    return detail::binary(
        a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
Var<T> operator/(Var<T> a, Var<T> b) {
    return detail::binary(
        a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T, T y, T o) { return -o / y; });
}

template <class T>
Var<T> scale(Var<T> x, T c) {
    return detail::unary(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add_scalar(Var<T> x, T c) {
    return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> operator-(Var<T> x) {
    return scale(x, T(-1));
}

template <class T>
Var<T> exp(Var<T> x) {
    return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(Var<T> x) {
    return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Var<T> cos(Var<T> x) {
    return detail::unary(x, [](T v) { return std::cos(v); }, [](T v, T) { return -std::sin(v); });
}

template <class T>
Var<T> sin(Var<T> x) {
    return detail::unary(x, [](T v) { return std::sin(v); }, [](T v, T) { return std::cos(v); });
}

template <class T>
Var<T> square(Var<T> x) {
    return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// x^(-1/2)
template <class T>
Var<T> rsqrt(Var<T> x) {
    return detail::unary(
        x, [](T v) { return T(1) / std::sqrt(v); }, [](T v, T y) { return T(-0.5) * y / v; });
}

template <class T>
Var<T> silu(Var<T> x) {
    return detail::unary(
        x, [](T v) { return v * detail::sigmoid(v); },
        [](T v, T) {
            const T s = detail::sigmoid(v);
            return s * (T(1) + v * (T(1) - s));
        });
}

template <class T>
Var<T> softplus(Var<T> x) {
    return detail::unary(
        x, [](T v) { return detail::softplus(v); }, [](T v, T) { return detail::sigmoid(v); });
}

// x / (1 + |x|)
template <class T>
Var<T> softsign(Var<T> x) {
    return detail::unary(
        x, [](T v) { return v / (T(1) + std::abs(v)); },
        [](T v, T) {
            const T d = T(1) + std::abs(v);
            return T(1) / (d * d);
        });
}

// ---- shape ------------------------------------------------------------------

template <class T>
Var<T> reshape(Var<T> x, Shape s) {
    Graph<T>& g = *x.g;
    Tensor<T> out = x.value().reshaped(std::move(s));
    const std::size_t idx = x.id;
    return g.push(std::move(out), {x}, [idx](Graph<T>& gr, std::size_t self) {
        Tensor<T>* gx = gr.grad_buffer(idx);
        if (!gx) return;
        const Tensor<T>& go = gr.grad_of(self);
        for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
    });
}

// Columns [begin, end) of the last axis.
template <class T>
Var<T> slice_last(Var<T> x, std::size_t begin, std::size_t end) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    const std::size_t n = xv.shape.back();
    if (begin > end || end > n) throw InputError("slice_last out of range");
    const std::size_t rows = xv.size() / n, w = end - begin;
    Shape s = xv.shape;
    s.back() = w;
    Tensor<T> out(s);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(xv.ptr() + r * n + begin, w, out.ptr() + r * w);
    const std::size_t idx = x.id;
    return g.push(std::move(out), {x}, [idx, rows, n, w, begin](Graph<T>& gr, std::size_t self) {
        Tensor<T>* gx = gr.grad_buffer(idx);
        if (!gx) return;
        const Tensor<T>& go = gr.grad_of(self);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) (*gx)[r * n + begin + j] += go[r * w + j];
    });
}

template <class T>
Var<T> concat_last(Var<T> a, Var<T> b) {
    Graph<T>& g = *a.g;
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    Shape sa = av.shape, sb = bv.shape;
    const std::size_t na = sa.back(), nb = sb.back();
    sa.pop_back();
    sb.pop_back();
    if (sa != sb) throw InputError("concat_last: leading shapes differ");
    const std::size_t rows = numel(sa);
    Shape s = av.shape;
    s.back() = na + nb;
    Tensor<T> out(s);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(av.ptr() + r * na, na, out.ptr() + r * (na + nb));
        std::copy_n(bv.ptr() + r * nb, nb, out.ptr() + r * (na + nb) + na);
    }
    const std::size_t ida = a.id, idb = b.id;
    return g.push(std::move(out), {a, b}, [ida, idb, rows, na, nb](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& go = gr.grad_of(self);
        if (Tensor<T>* ga = gr.grad_buffer(ida))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < na; ++j) (*ga)[r * na + j] += go[r * (na + nb) + j];
        if (Tensor<T>* gb = gr.grad_buffer(idb))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < nb; ++j) (*gb)[r * nb + j] += go[r * (na + nb) + na + j];
    });
}

// out[..., i, ...] = x[..., index[i], ...] along `axis`.
template <class T>
Var<T> index_select(Var<T> x, std::size_t axis, std::vector<std::size_t> index) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    if (axis >= xv.rank()) throw InputError("index_select axis out of range");
    const std::size_t n = xv.shape[axis];
    for (auto i : index)
        if (i >= n) throw InputError("index_select index out of range");
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= xv.shape[d];
    for (std::size_t d = axis + 1; d < xv.rank(); ++d) inner *= xv.shape[d];
    Shape s = xv.shape;
    s[axis] = index.size();
    Tensor<T> out(s);
    const std::size_t m = index.size();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(xv.ptr() + (o * n + index[i]) * inner, inner, out.ptr() + (o * m + i) * inner);
    const std::size_t idx = x.id;
    return g.push(std::move(out), {x}, [idx, outer, inner, n, index](Graph<T>& gr, std::size_t self) {
        Tensor<T>* gx = gr.grad_buffer(idx);
        if (!gx) return;
        const Tensor<T>& go = gr.grad_of(self);
        const std::size_t m = index.size();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < inner; ++j)
                    (*gx)[(o * n + index[i]) * inner + j] += go[(o * m + i) * inner + j];
    });
}

// ---- reductions -------------------------------------------------------------

template <class T>
Var<T> sum(Var<T> x, std::size_t axis, bool keepdim = false) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    if (axis >= xv.rank()) throw InputError("sum axis out of range");
    std::size_t outer = 1, inner = 1;
    const std::size_t n = xv.shape[axis];
    for (std::size_t d = 0; d < axis; ++d) outer *= xv.shape[d];
    for (std::size_t d = axis + 1; d < xv.rank(); ++d) inner *= xv.shape[d];
    Shape s = xv.shape;
    if (keepdim) s[axis] = 1;
    else s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor<T> out(s);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] += xv[(o * n + k) * inner + j];
    const std::size_t idx = x.id;
    return g.push(std::move(out), {x}, [idx, outer, n, inner](Graph<T>& gr, std::size_t self) {
        Tensor<T>* gx = gr.grad_buffer(idx);
        if (!gx) return;
        const Tensor<T>& go = gr.grad_of(self);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t j = 0; j < inner; ++j) (*gx)[(o * n + k) * inner + j] += go[o * inner + j];
    });
}

template <class T>
Var<T> mean(Var<T> x, std::size_t axis, bool keepdim = false) {
    const T n = static_cast<T>(x.shape().at(axis));
    return scale(sum(x, axis, keepdim), T(1) / n);
}

template <class T>
Var<T> sum_all(Var<T> x) {
    return sum(reshape(x, Shape{x.value().size()}), 0, true);
}

// ---- sequence ops -----------------------------------------------------------

enum class ScanBackend {
    kCumsum,        // sequential running sum, O(L)
    kMaskedMatmul,  // lower-triangular mask times the sequence, O(L^2)
};

// Inclusive prefix sum along axis 0.
template <class T>
Var<T> prefix_sum(Var<T> x, ScanBackend backend = ScanBackend::kCumsum) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    const std::size_t L = xv.dim(0), w = xv.size() / L;
    Tensor<T> out(xv.shape);
    // running sums are carried in double for every element type
    if (backend == ScanBackend::kCumsum) {
        std::vector<double> acc(w, 0.0);
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t j = 0; j < w; ++j) {
                acc[j] += static_cast<double>(xv[t * w + j]);
                out[t * w + j] = static_cast<T>(acc[j]);
            }
    } else {
        std::vector<double> acc(w);
        for (std::size_t t = 0; t < L; ++t) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t s = 0; s < L; ++s) {
                const double mask = s <= t ? 1.0 : 0.0;
                for (std::size_t j = 0; j < w; ++j) acc[j] += mask * static_cast<double>(xv[s * w + j]);
            }
            for (std::size_t j = 0; j < w; ++j) out[t * w + j] = static_cast<T>(acc[j]);
        }
    }
    const std::size_t idx = x.id;
    return g.push(std::move(out), {x}, [idx, L, w](Graph<T>& gr, std::size_t self) {
        Tensor<T>* gx = gr.grad_buffer(idx);
        if (!gx) return;
        const Tensor<T>& go = gr.grad_of(self);
        std::vector<double> acc(w, 0.0);
        for (std::size_t t = L; t-- > 0;)
            for (std::size_t j = 0; j < w; ++j) {
                acc[j] += static_cast<double>(go[t * w + j]);
                (*gx)[t * w + j] += static_cast<T>(acc[j]);
            }
    });
}

// out[t, k] = exp(-d[t] * lambda[k]) for a constant column d [L, 1], evaluated
// in double so long distances keep full relative precision.
template <class T>
Var<T> decay_factors(const Tensor<T>& d, Var<T> lambda) {
    Graph<T>& g = *lambda.g;
    const Tensor<T>& lv = lambda.value();
    if (d.rank() != 2 || d.dim(1) != 1 || lv.rank() != 1)
        throw InputError("decay_factors: shape mismatch " + shape_str(d.shape) + " vs " + shape_str(lv.shape));
    const std::size_t L = d.dim(0), K = lv.size();
    Tensor<T> out({L, K});
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t k = 0; k < K; ++k)
            out[t * K + k] = static_cast<T>(std::exp(-static_cast<double>(d[t]) * static_cast<double>(lv[k])));
    const std::size_t idl = lambda.id;
    return g.push(std::move(out), {lambda}, [idl, L, K, d](Graph<T>& gr, std::size_t self) {
        Tensor<T>* gl = gr.grad_buffer(idl);
        if (!gl) return;
        const Tensor<T>& go = gr.grad_of(self);
        const Tensor<T>& ov = gr.value(self);
        for (std::size_t k = 0; k < K; ++k) {
            double acc = 0.0;
            for (std::size_t t = 0; t < L; ++t)
                acc -= static_cast<double>(d[t]) * static_cast<double>(ov[t * K + k]) * static_cast<double>(go[t * K + k]);
            (*gl)[k] += static_cast<T>(acc);
        }
    });
}

// out[t, k, j] = sum_{s<=t} x[s, k, j] / sum_{s<=t} a[s, k] with x [L, K, ...]
// and a [L, K]. Sums and the ratio are formed in double before rounding.
template <class T>
Var<T> normalized_prefix_sum(Var<T> x, Var<T> a, ScanBackend backend = ScanBackend::kCumsum) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    const Tensor<T>& av = a.value();
    if (av.rank() != 2 || xv.rank() < 2 || xv.dim(0) != av.dim(0) || xv.dim(1) != av.dim(1))
        throw InputError("normalized_prefix_sum: shape mismatch " + shape_str(xv.shape) + " vs " + shape_str(av.shape));
    const std::size_t L = av.dim(0), K = av.dim(1), J = L ? xv.size() / (L * K) : 0;
    auto z = std::make_shared<std::vector<double>>(L * K);
    auto ratio = std::make_shared<std::vector<double>>(L * K * J);
    if (backend == ScanBackend::kCumsum) {
        std::vector<double> zacc(K, 0.0), nacc(K * J, 0.0);
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t k = 0; k < K; ++k) {
                zacc[k] += static_cast<double>(av[t * K + k]);
                (*z)[t * K + k] = zacc[k];
                for (std::size_t j = 0; j < J; ++j) {
                    nacc[k * J + j] += static_cast<double>(xv[(t * K + k) * J + j]);
                    (*ratio)[(t * K + k) * J + j] = nacc[k * J + j];
                }
            }
    } else {
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t s = 0; s < L; ++s) {
                const double mask = s <= t ? 1.0 : 0.0;
                for (std::size_t k = 0; k < K; ++k) {
                    (*z)[t * K + k] += mask * static_cast<double>(av[s * K + k]);
                    for (std::size_t j = 0; j < J; ++j)
                        (*ratio)[(t * K + k) * J + j] += mask * static_cast<double>(xv[(s * K + k) * J + j]);
                }
            }
    }
    Tensor<T> out(xv.shape);
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t k = 0; k < K; ++k) {
            const double zk = (*z)[t * K + k];
            if (!(zk > 0.0)) throw NumericalError("normalized_prefix_sum: accumulated mass is not positive");
            for (std::size_t j = 0; j < J; ++j) {
                double& r = (*ratio)[(t * K + k) * J + j];
                r /= zk;
                out[(t * K + k) * J + j] = static_cast<T>(r);
            }
        }
    const std::size_t idx = x.id, ida = a.id;
    return g.push(std::move(out), {x, a}, [idx, ida, L, K, J, z, ratio](Graph<T>& gr, std::size_t self) {
        Tensor<T>* gx = gr.grad_buffer(idx);
        Tensor<T>* ga = gr.grad_buffer(ida);
        const Tensor<T>& go = gr.grad_of(self);
        std::vector<double> xacc(K * J, 0.0), aacc(K, 0.0);
        for (std::size_t t = L; t-- > 0;)
            for (std::size_t k = 0; k < K; ++k) {
                const double zk = (*z)[t * K + k];
                double da = 0.0;
                for (std::size_t j = 0; j < J; ++j) {
                    const std::size_t o = (t * K + k) * J + j;
                    const double gz = static_cast<double>(go[o]) / zk;
                    xacc[k * J + j] += gz;
                    da -= gz * (*ratio)[o];
                    if (gx) (*gx)[o] += static_cast<T>(xacc[k * J + j]);
                }
                aacc[k] += da;
                if (ga) (*ga)[t * K + k] += static_cast<T>(aacc[k]);
            }
    });
}

// Depthwise causal convolution along axis 0 of x [L, C] with kernel [C, c]:
// y[t, ch] = sum_j kernel[ch, j] * x[t - (c-1) + j, ch]. Positions before the
// start read from `history` ([c-1, C], oldest first) or zero if absent.
template <class T>
Var<T> causal_dwconv(Var<T> x, Var<T> kernel, const Tensor<T>* history = nullptr) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    const Tensor<T>& kv = kernel.value();
    if (xv.rank() != 2 || kv.rank() != 2 || kv.dim(0) != xv.dim(1))
        throw InputError("causal_dwconv: shape mismatch " + shape_str(xv.shape) + " vs kernel " + shape_str(kv.shape));
    const std::size_t L = xv.dim(0), C = xv.dim(1), c = kv.dim(1);
    Tensor<T> hist(Shape{c - 1, C});
    if (history) {
        require_shape(*history, Shape{c - 1, C}, "causal_dwconv history");
        hist = *history;
    }
    // source row for tap j at time t: t - (c-1) + j, negative -> history
    auto src = [C, c](const Tensor<T>& xs, const Tensor<T>& hs, std::ptrdiff_t row, std::size_t ch) -> T {
        if (row >= 0) return xs[static_cast<std::size_t>(row) * C + ch];
        const std::ptrdiff_t hrow = static_cast<std::ptrdiff_t>(c - 1) + row;
        return hrow >= 0 ? hs[static_cast<std::size_t>(hrow) * C + ch] : T(0);
    };
    Tensor<T> out(xv.shape);
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t j = 0; j < c; ++j) {
            const std::ptrdiff_t row = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(c - 1);
            for (std::size_t ch = 0; ch < C; ++ch) out[t * C + ch] += kv[ch * c + j] * src(xv, hist, row, ch);
        }
    const std::size_t idx = x.id, idk = kernel.id;
    return g.push(std::move(out), {x, kernel}, [idx, idk, L, C, c, hist, src](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& go = gr.grad_of(self);
        const Tensor<T>& xs = gr.value(idx);
        const Tensor<T>& ks = gr.value(idk);
        Tensor<T>* gx = gr.grad_buffer(idx);
        Tensor<T>* gk = gr.grad_buffer(idk);
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t j = 0; j < c; ++j) {
                const std::ptrdiff_t row = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(c - 1);
                for (std::size_t ch = 0; ch < C; ++ch) {
                    const T gv = go[t * C + ch];
                    if (gk) (*gk)[ch * c + j] += gv * src(xs, hist, row, ch);
                    if (gx && row >= 0) (*gx)[static_cast<std::size_t>(row) * C + ch] += gv * ks[ch * c + j];
                }
            }
    });
}

// ---- dense ------------------------------------------------------------------

// x [..., in] times W[out, in]^T -> [..., out]
template <class T>
Var<T> linear(Var<T> x, Var<T> w) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    if (wv.rank() != 2 || xv.shape.back() != wv.dim(1))
        throw InputError("linear: input " + shape_str(xv.shape) + " vs weight " + shape_str(wv.shape));
    const std::size_t in = wv.dim(1), outd = wv.dim(0), rows = xv.size() / in;
    Shape s = xv.shape;
    s.back() = outd;
    Tensor<T> out(s);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.ptr() + r * in;
        T* orow = out.ptr() + r * outd;
        for (std::size_t o = 0; o < outd; ++o) {
            const T* wr = wv.ptr() + o * in;
            T acc = T(0);
            for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
            orow[o] = acc;
        }
    }
    const std::size_t idx = x.id, idw = w.id;
    return g.push(std::move(out), {x, w}, [idx, idw, rows, in, outd](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& go = gr.grad_of(self);
        const Tensor<T>& xs = gr.value(idx);
        const Tensor<T>& ws = gr.value(idw);
        if (Tensor<T>* gx = gr.grad_buffer(idx))
            for (std::size_t r = 0; r < rows; ++r) {
                T* gxr = gx->ptr() + r * in;
                for (std::size_t o = 0; o < outd; ++o) {
                    const T gv = go[r * outd + o];
                    if (gv == T(0)) continue;
                    const T* wr = ws.ptr() + o * in;
                    for (std::size_t i = 0; i < in; ++i) gxr[i] += gv * wr[i];
                }
            }
        if (Tensor<T>* gw = gr.grad_buffer(idw))
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xr = xs.ptr() + r * in;
                for (std::size_t o = 0; o < outd; ++o) {
                    const T gv = go[r * outd + o];
                    if (gv == T(0)) continue;
                    T* gwr = gw->ptr() + o * in;
                    for (std::size_t i = 0; i < in; ++i) gwr[i] += gv * xr[i];
                }
            }
    });
}

// Per-group dense map: x [N, G, in], W [G, out, in] -> [N, G, out].
template <class T>
Var<T> grouped_linear(Var<T> x, Var<T> w) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    if (xv.rank() != 3 || wv.rank() != 3 || xv.dim(1) != wv.dim(0) || xv.dim(2) != wv.dim(2))
        throw InputError("grouped_linear: input " + shape_str(xv.shape) + " vs weight " + shape_str(wv.shape));
    const std::size_t N = xv.dim(0), G = xv.dim(1), in = xv.dim(2), outd = wv.dim(1);
    Tensor<T> out(Shape{N, G, outd});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t gi = 0; gi < G; ++gi) {
            const T* xr = xv.ptr() + (n * G + gi) * in;
            for (std::size_t o = 0; o < outd; ++o) {
                const T* wr = wv.ptr() + (gi * outd + o) * in;
                T acc = T(0);
                for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
                out[(n * G + gi) * outd + o] = acc;
            }
        }
    const std::size_t idx = x.id, idw = w.id;
    return g.push(std::move(out), {x, w}, [idx, idw, N, G, in, outd](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& go = gr.grad_of(self);
        const Tensor<T>& xs = gr.value(idx);
        const Tensor<T>& ws = gr.value(idw);
        Tensor<T>* gx = gr.grad_buffer(idx);
        Tensor<T>* gw = gr.grad_buffer(idw);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t gi = 0; gi < G; ++gi)
                for (std::size_t o = 0; o < outd; ++o) {
                    const T gv = go[(n * G + gi) * outd + o];
                    if (gv == T(0)) continue;
                    const std::size_t xo = (n * G + gi) * in, wo = (gi * outd + o) * in;
                    for (std::size_t i = 0; i < in; ++i) {
                        if (gx) (*gx)[xo + i] += gv * ws[wo + i];
                        if (gw) (*gw)[wo + i] += gv * xs[xo + i];
                    }
                }
    });
}

// Row lookup: table [V, D], ids -> [len, D].
template <class T>
Var<T> embedding(Var<T> table, const std::vector<int>& ids) {
    std::vector<std::size_t> index;
    index.reserve(ids.size());
    const std::size_t V = table.dim(0);
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= V)
            throw InputError("token id " + std::to_string(id) + " out of range for vocab " + std::to_string(V));
        index.push_back(static_cast<std::size_t>(id));
    }
    return index_select(table, 0, std::move(index));
}

// ---- attention --------------------------------------------------------------

// Rotary embedding over x [L, heads, dh] with interleaved pairs (2i, 2i+1);
// position of row t is t + offset.
template <class T>
Var<T> rope(Var<T> x, double offset = 0.0, double base = 10000.0) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 3 || xv.dim(2) % 2 != 0) throw InputError("rope expects [L, heads, even dh]");
    const std::size_t L = xv.dim(0), Hn = xv.dim(1), dh = xv.dim(2);
    std::vector<T> cs(L * dh / 2), sn(L * dh / 2);
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t i = 0; i < dh / 2; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
            const double ang = (static_cast<double>(t) + offset) * freq;
            cs[t * dh / 2 + i] = static_cast<T>(std::cos(ang));
            sn[t * dh / 2 + i] = static_cast<T>(std::sin(ang));
        }
    Tensor<T> out(xv.shape);
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t h = 0; h < Hn; ++h)
            for (std::size_t i = 0; i < dh / 2; ++i) {
                const std::size_t o = (t * Hn + h) * dh + 2 * i;
                const T c = cs[t * dh / 2 + i], s = sn[t * dh / 2 + i];
                out[o] = xv[o] * c - xv[o + 1] * s;
                out[o + 1] = xv[o] * s + xv[o + 1] * c;
            }
    const std::size_t idx = x.id;
    return g.push(std::move(out), {x}, [idx, L, Hn, dh, cs, sn](Graph<T>& gr, std::size_t self) {
        Tensor<T>* gx = gr.grad_buffer(idx);
        if (!gx) return;
        const Tensor<T>& go = gr.grad_of(self);
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t h = 0; h < Hn; ++h)
                for (std::size_t i = 0; i < dh / 2; ++i) {
                    const std::size_t o = (t * Hn + h) * dh + 2 * i;
                    const T c = cs[t * dh / 2 + i], s = sn[t * dh / 2 + i];
                    (*gx)[o] += go[o] * c + go[o + 1] * s;
                    (*gx)[o + 1] += -go[o] * s + go[o + 1] * c;
                }
    });
}

// Causal softmax attention. q [L, Hq, dh]; k, v [L, Hkv, dh] with Hq % Hkv == 0;
// query head h reads kv head h / (Hq / Hkv).
template <class T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, T score_scale) {
    Graph<T>& g = *q.g;
    const Tensor<T>& qv = q.value();
    const Tensor<T>& kv = k.value();
    const Tensor<T>& vv = v.value();
    if (qv.rank() != 3 || kv.shape != vv.shape || kv.rank() != 3 || kv.dim(0) != qv.dim(0) ||
        kv.dim(2) != qv.dim(2) || qv.dim(1) % kv.dim(1) != 0)
        throw InputError("causal_attention: incompatible q/k/v shapes");
    const std::size_t L = qv.dim(0), Hq = qv.dim(1), Hkv = kv.dim(1), dh = qv.dim(2), rep = Hq / Hkv;
    // probabilities [Hq, L, L] (lower triangle used), kept only for backward
    const bool keep = g.recording();
    std::vector<T> prob(keep ? Hq * L * L : 0, T(0));
    Tensor<T> out(qv.shape);
    std::vector<T> row(L);
    for (std::size_t h = 0; h < Hq; ++h) {
        const std::size_t hk = h / rep;
        for (std::size_t t = 0; t < L; ++t) {
            const T* qr = qv.ptr() + (t * Hq + h) * dh;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t s = 0; s <= t; ++s) {
                const T* kr = kv.ptr() + (s * Hkv + hk) * dh;
                T acc = T(0);
                for (std::size_t i = 0; i < dh; ++i) acc += qr[i] * kr[i];
                row[s] = acc * score_scale;
                mx = std::max(mx, row[s]);
            }
            T z = T(0);
            for (std::size_t s = 0; s <= t; ++s) {
                row[s] = std::exp(row[s] - mx);
                z += row[s];
            }
            T* orow = out.ptr() + (t * Hq + h) * dh;
            T* prow = keep ? prob.data() + (h * L + t) * L : nullptr;
            for (std::size_t s = 0; s <= t; ++s) {
                const T p = row[s] / z;
                if (prow) prow[s] = p;
                const T* vr = vv.ptr() + (s * Hkv + hk) * dh;
                for (std::size_t i = 0; i < dh; ++i) orow[i] += p * vr[i];
            }
        }
    }
    const std::size_t iq = q.id, ik = k.id, iv = v.id;
    return g.push(std::move(out), {q, k, v},
                  [iq, ik, iv, L, Hq, Hkv, dh, rep, score_scale, prob = std::move(prob)](Graph<T>& gr, std::size_t self) {
                      const Tensor<T>& go = gr.grad_of(self);
                      const Tensor<T>& qs = gr.value(iq);
                      const Tensor<T>& ks = gr.value(ik);
                      const Tensor<T>& vs = gr.value(iv);
                      Tensor<T>* gq = gr.grad_buffer(iq);
                      Tensor<T>* gk = gr.grad_buffer(ik);
                      Tensor<T>* gv = gr.grad_buffer(iv);
                      std::vector<T> dp(L);
                      for (std::size_t h = 0; h < Hq; ++h) {
                          const std::size_t hk = h / rep;
                          for (std::size_t t = 0; t < L; ++t) {
                              const T* gor = go.ptr() + (t * Hq + h) * dh;
                              const T* prow = prob.data() + (h * L + t) * L;
                              T dot = T(0);
                              for (std::size_t s = 0; s <= t; ++s) {
                                  const T* vr = vs.ptr() + (s * Hkv + hk) * dh;
                                  T acc = T(0);
                                  for (std::size_t i = 0; i < dh; ++i) acc += gor[i] * vr[i];
                                  dp[s] = acc;
                                  dot += prow[s] * acc;
                                  if (gv) {
                                      T* gvr = gv->ptr() + (s * Hkv + hk) * dh;
                                      for (std::size_t i = 0; i < dh; ++i) gvr[i] += prow[s] * gor[i];
                                  }
                              }
                              const T* qr = qs.ptr() + (t * Hq + h) * dh;
                              for (std::size_t s = 0; s <= t; ++s) {
                                  const T ds = prow[s] * (dp[s] - dot) * score_scale;
                                  if (ds == T(0)) continue;
                                  const T* kr = ks.ptr() + (s * Hkv + hk) * dh;
                                  if (gq) {
                                      T* gqr = gq->ptr() + (t * Hq + h) * dh;
                                      for (std::size_t i = 0; i < dh; ++i) gqr[i] += ds * kr[i];
                                  }
                                  if (gk) {
                                      T* gkr = gk->ptr() + (s * Hkv + hk) * dh;
                                      for (std::size_t i = 0; i < dh; ++i) gkr[i] += ds * qr[i];
                                  }
                              }
                          }
                      }
                  });
}

// ---- distributions ----------------------------------------------------------

template <class T>
Var<T> log_softmax(Var<T> x) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    const std::size_t n = xv.shape.back(), rows = xv.size() / n;
    Tensor<T> out(xv.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.ptr() + r * n;
        const T mx = *std::max_element(xr, xr + n);
        T z = T(0);
        for (std::size_t i = 0; i < n; ++i) z += std::exp(xr[i] - mx);
        const T lz = mx + std::log(z);
        for (std::size_t i = 0; i < n; ++i) out[r * n + i] = xr[i] - lz;
    }
    const std::size_t idx = x.id;
    return g.push(std::move(out), {x}, [idx, rows, n](Graph<T>& gr, std::size_t self) {
        Tensor<T>* gx = gr.grad_buffer(idx);
        if (!gx) return;
        const Tensor<T>& go = gr.grad_of(self);
        const Tensor<T>& y = gr.value(self);
        for (std::size_t r = 0; r < rows; ++r) {
            T gs = T(0);
            for (std::size_t i = 0; i < n; ++i) gs += go[r * n + i];
            for (std::size_t i = 0; i < n; ++i) (*gx)[r * n + i] += go[r * n + i] - std::exp(y[r * n + i]) * gs;
        }
    });
}

// out[r] = x[r, ids[r]] for x [rows, V].
template <class T>
Var<T> pick(Var<T> x, const std::vector<int>& ids) {
    Graph<T>& g = *x.g;
    const Tensor<T>& xv = x.value();
    const std::size_t V = xv.shape.back(), rows = xv.size() / V;
    if (ids.size() != rows) throw InputError("pick: need one id per row");
    Tensor<T> out(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= V) throw InputError("pick: id out of range");
        out[r] = xv[r * V + static_cast<std::size_t>(ids[r])];
    }
    const std::size_t idx = x.id;
    return g.push(std::move(out), {x}, [idx, V, ids](Graph<T>& gr, std::size_t self) {
        Tensor<T>* gx = gr.grad_buffer(idx);
        if (!gx) return;
        const Tensor<T>& go = gr.grad_of(self);
        for (std::size_t r = 0; r < ids.size(); ++r) (*gx)[r * V + static_cast<std::size_t>(ids[r])] += go[r];
    });
}

// ---- helpers ----------------------------------------------------------------

// RMSNorm over the last axis with learned per-feature scale.
template <class T>
Var<T> rms_norm(Var<T> x, Var<T> weight, T eps) {
    const std::size_t last = x.value().rank() - 1;
    Var<T> ms = mean(square(x), last, true);
    return x * rsqrt(add_scalar(ms, eps)) * weight;
}

template <class T>
T l2_norm(const Tensor<T>& t) {
    long double acc = 0;
    for (T v : t.data) acc += static_cast<long double>(v) * v;
    return static_cast<T>(std::sqrt(acc));
}

}  // namespace seqcond
