#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// Tensors are immutable values. Ops are free functions that compute the
// forward result eagerly; when any input is tracked on a Tape, the op also
// records a node whose closure holds the saved forward values needed for
// the backward pass. A Tape is single-threaded and lives for one training
// step; creation order of nodes is a topological order of the DAG, so
// backward is a reverse scan over reachable nodes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace wegen {
namespace nd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
    std::size_t p = 1;
    for (std::size_t d : s) p *= d;
    return p;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

class Tape;

struct Tensor {
    Shape shape;
    std::shared_ptr<const std::vector<double>> data;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> values)
        : shape(std::move(s)),
          data(std::make_shared<const std::vector<double>>(std::move(values))) {
        if (numel_of(shape) != data->size())
            throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                        " does not match buffer of " +
                                        std::to_string(data->size()) + " values");
    }

    std::size_t numel() const { return data ? data->size() : 0; }
    std::size_t rank() const { return shape.size(); }
    bool defined() const { return static_cast<bool>(data); }
    bool grad_enabled() const { return node >= 0; }

    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 0 : shape[1]; }

    const std::vector<double>& values() const { return *data; }
    double at(std::size_t i) const { return (*data)[i]; }
    double at(std::size_t r, std::size_t c) const { return (*data)[r * shape[1] + c]; }
    double item() const {
        if (numel() != 1)
            throw std::invalid_argument("item: tensor " + shape_str(shape) + " is not scalar");
        return (*data)[0];
    }
};

inline Tensor tensor(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v)); }
inline Tensor zeros(Shape s) {
    const std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
}
inline Tensor full(Shape s, double v) {
    const std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
}
inline Tensor scalar(double v) { return Tensor({1}, {v}); }

inline Tensor rand_uniform(Shape s, double lo, double hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(numel_of(s));
    for (double& x : v) x = dist(rng);
    return Tensor(std::move(s), std::move(v));
}

inline bool all_finite(const Tensor& t) {
    for (double v : t.values())
        if (!std::isfinite(v)) return false;
    return true;
}

// A named trainable value. Models own Params; a Tape watches them to make
// them differentiable leaves. Updating a Param replaces its value tensor.
struct Param {
    std::string name;
    Tensor value;

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}
};

// Gradients keyed by parameter name, shapes mirroring the parameters.
using GradMap = std::map<std::string, Tensor>;

class Tape {
public:
    using BackFn = std::function<void(Tape&, const std::vector<double>&)>;

    int record(const char* op, Shape shape, std::vector<int> inputs, BackFn back) {
        nodes_.push_back(Node{op, std::move(shape), std::move(inputs), std::move(back), {}});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Registers a parameter as a differentiable leaf. Watching the same
    // Param twice returns the same node, so shared weights accumulate
    // gradients from every use site.
    Tensor use(Param& p) {
        auto it = watched_.find(&p);
        int id;
        if (it != watched_.end()) {
            id = it->second;
        } else {
            id = record("leaf", p.value.shape, {}, nullptr);
            watched_.emplace(&p, id);
            order_.push_back(&p);
        }
        Tensor t = p.value;
        t.tape = this;
        t.node = id;
        return t;
    }

    std::size_t size() const { return nodes_.size(); }
    const Shape& node_shape(int id) const { return nodes_[static_cast<std::size_t>(id)].shape; }

    std::vector<double>& grad_buffer(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.empty()) n.grad.assign(numel_of(n.shape), 0.0);
        return n.grad;
    }

    // Reverse-mode sweep from a scalar loss. Returns gradients for every
    // watched parameter reachable from the loss; unreachable parameters get
    // zero gradients of the right shape.
    GradMap backward(const Tensor& loss) {
        if (loss.tape != this || loss.node < 0)
            throw std::invalid_argument("backward: loss is not tracked on this tape");
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape));

        std::vector<char> reach(nodes_.size(), 0);
        std::vector<int> stack{loss.node};
        reach[static_cast<std::size_t>(loss.node)] = 1;
        while (!stack.empty()) {
            int id = stack.back();
            stack.pop_back();
            for (int in : nodes_[static_cast<std::size_t>(id)].inputs) {
                if (in >= 0 && !reach[static_cast<std::size_t>(in)]) {
                    reach[static_cast<std::size_t>(in)] = 1;
                    stack.push_back(in);
                }
            }
        }

        grad_buffer(loss.node)[0] = 1.0;
        for (int id = loss.node; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!reach[static_cast<std::size_t>(id)] || !n.back) continue;
            if (n.grad.empty()) continue;
            n.back(*this, n.grad);
        }

        GradMap grads;
        for (Param* p : order_) {
            int id = watched_.at(p);
            Node& n = nodes_[static_cast<std::size_t>(id)];
            std::vector<double> g = n.grad.empty() ? std::vector<double>(numel_of(n.shape), 0.0) : n.grad;
            grads.emplace(p->name, Tensor(n.shape, std::move(g)));
        }
        return grads;
    }

private:
    struct Node {
        const char* op;
        Shape shape;
        std::vector<int> inputs;
        BackFn back;
        std::vector<double> grad;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const Param*, int> watched_;
    std::vector<Param*> order_;
};

namespace detail {

inline Tape* tape_of(std::initializer_list<const Tensor*> ts) {
    Tape* t = nullptr;
    for (const Tensor* x : ts) {
        if (x->node < 0) continue;
        if (t && x->tape != t)
            throw std::invalid_argument("op: inputs tracked on different tapes");
        t = x->tape;
    }
    return t;
}

inline Tensor make_out(Shape shape, std::vector<double> values, Tape* t, const char* op,
                       std::vector<int> inputs, Tape::BackFn back) {
    Tensor out(std::move(shape), std::move(values));
    if (t) {
        out.tape = t;
        out.node = t->record(op, out.shape, std::move(inputs), std::move(back));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: 2D x 2D, 1D x 2D (row vector), 2D x 1D (column vector)
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const bool a_vec = a.rank() == 1;
    const bool b_vec = b.rank() == 1;
    if (a.rank() > 2 || b.rank() > 2 || a.rank() == 0 || b.rank() == 0)
        throw std::invalid_argument("matmul: unsupported ranks " + shape_str(a.shape) + " x " +
                                    shape_str(b.shape));
    const std::size_t m = a_vec ? 1 : a.shape[0];
    const std::size_t k = a_vec ? a.shape[0] : a.shape[1];
    const std::size_t k2 = b_vec ? b.shape[0] : b.shape[0];
    const std::size_t n = b_vec ? 1 : b.shape[1];
    if (k != k2)
        throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape) +
                                    " x " + shape_str(b.shape));

    std::vector<double> out(m * n, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
        }

    Shape out_shape;
    if (a_vec && b_vec) out_shape = {1};
    else if (a_vec) out_shape = {n};
    else if (b_vec) out_shape = {m};
    else out_shape = {m, n};

    Tape* t = detail::tape_of({&a, &b});
    Tape::BackFn back;
    if (t) {
        int ia = a.node, ib = b.node;
        auto ad = a.data, bd = b.data;
        back = [ia, ib, ad, bd, m, k, n](Tape& tp, const std::vector<double>& go) {
            if (ia >= 0) {
                auto& ga = tp.grad_buffer(ia);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double g = go[i * n + j];
                        if (g == 0.0) continue;
                        for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += g * (*bd)[p * n + j];
                    }
            }
            if (ib >= 0) {
                auto& gb = tp.grad_buffer(ib);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av_ip = (*ad)[i * k + p];
                        if (av_ip == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av_ip * go[i * n + j];
                    }
            }
        };
    }
    return detail::make_out(std::move(out_shape), std::move(out), t, "matmul", {a.node, b.node},
                            std::move(back));
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2)
        throw std::invalid_argument("transpose: expected matrix, got " + shape_str(x.shape));
    const std::size_t n = x.shape[0], m = x.shape[1];
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[j * n + i] = x.at(i, j);
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        back = [ix, n, m](Tape& tp, const std::vector<double>& go) {
            auto& gx = tp.grad_buffer(ix);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) gx[i * m + j] += go[j * n + i];
        };
    }
    return detail::make_out({m, n}, std::move(out), t, "transpose", {x.node}, std::move(back));
}

// ---------------------------------------------------------------------------
// elementwise binary ops (same shape)
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    Tape* t = detail::tape_of({&a, &b});
    Tape::BackFn back;
    if (t) {
        int ia = a.node, ib = b.node;
        back = [ia, ib](Tape& tp, const std::vector<double>& go) {
            if (ia >= 0) {
                auto& g = tp.grad_buffer(ia);
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
            }
            if (ib >= 0) {
                auto& g = tp.grad_buffer(ib);
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
            }
        };
    }
    return detail::make_out(a.shape, std::move(out), t, "add", {a.node, b.node}, std::move(back));
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    Tape* t = detail::tape_of({&a, &b});
    Tape::BackFn back;
    if (t) {
        int ia = a.node, ib = b.node;
        back = [ia, ib](Tape& tp, const std::vector<double>& go) {
            if (ia >= 0) {
                auto& g = tp.grad_buffer(ia);
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
            }
            if (ib >= 0) {
                auto& g = tp.grad_buffer(ib);
                for (std::size_t i = 0; i < go.size(); ++i) g[i] -= go[i];
            }
        };
    }
    return detail::make_out(a.shape, std::move(out), t, "sub", {a.node, b.node}, std::move(back));
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    Tape* t = detail::tape_of({&a, &b});
    Tape::BackFn back;
    if (t) {
        int ia = a.node, ib = b.node;
        auto ad = a.data, bd = b.data;
        back = [ia, ib, ad, bd](Tape& tp, const std::vector<double>& go) {
            if (ia >= 0) {
                auto& g = tp.grad_buffer(ia);
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * (*bd)[i];
            }
            if (ib >= 0) {
                auto& g = tp.grad_buffer(ib);
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * (*ad)[i];
            }
        };
    }
    return detail::make_out(a.shape, std::move(out), t, "mul", {a.node, b.node}, std::move(back));
}

inline Tensor add_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) + c;
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        back = [ix](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ix);
            for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
        };
    }
    return detail::make_out(x.shape, std::move(out), t, "add_scalar", {x.node}, std::move(back));
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * c;
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        back = [ix, c](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ix);
            for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * c;
        };
    }
    return detail::make_out(x.shape, std::move(out), t, "scale", {x.node}, std::move(back));
}

// Scalar-tensor times tensor; the scalar stays differentiable.
inline Tensor smul(const Tensor& s, const Tensor& x) {
    if (s.numel() != 1)
        throw std::invalid_argument("smul: first argument must be scalar, got " + shape_str(s.shape));
    const double sv = s.at(0);
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * x.at(i);
    Tape* t = detail::tape_of({&s, &x});
    Tape::BackFn back;
    if (t) {
        int is = s.node, ix = x.node;
        auto xd = x.data;
        back = [is, ix, sv, xd](Tape& tp, const std::vector<double>& go) {
            if (ix >= 0) {
                auto& g = tp.grad_buffer(ix);
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * sv;
            }
            if (is >= 0) {
                double acc = 0.0;
                for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * (*xd)[i];
                tp.grad_buffer(is)[0] += acc;
            }
        };
    }
    return detail::make_out(x.shape, std::move(out), t, "smul", {s.node, x.node}, std::move(back));
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

enum class Unary { Sigmoid, Tanh, Relu, Exp, Log };

inline Tensor unary(Unary kind, const Tensor& x) {
    std::vector<double> out(x.numel());
    const char* name = "";
    switch (kind) {
        case Unary::Sigmoid:
            name = "sigmoid";
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x.at(i)));
            break;
        case Unary::Tanh:
            name = "tanh";
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.at(i));
            break;
        case Unary::Relu:
            name = "relu";
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) > 0.0 ? x.at(i) : 0.0;
            break;
        case Unary::Exp:
            name = "exp";
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.at(i));
            break;
        case Unary::Log:
            name = "log";
            for (std::size_t i = 0; i < out.size(); ++i) {
                if (x.at(i) <= 0.0)
                    throw std::domain_error("log: nonpositive input " + std::to_string(x.at(i)));
                out[i] = std::log(x.at(i));
            }
            break;
    }
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        auto xd = x.data;
        auto yd = std::make_shared<const std::vector<double>>(out);
        back = [kind, ix, xd, yd](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ix);
            for (std::size_t i = 0; i < go.size(); ++i) {
                double d = 0.0;
                switch (kind) {
                    case Unary::Sigmoid: d = (*yd)[i] * (1.0 - (*yd)[i]); break;
                    case Unary::Tanh: d = 1.0 - (*yd)[i] * (*yd)[i]; break;
                    case Unary::Relu: d = (*xd)[i] > 0.0 ? 1.0 : 0.0; break;  // subgradient 0 at 0
                    case Unary::Exp: d = (*yd)[i]; break;
                    case Unary::Log: d = 1.0 / (*xd)[i]; break;
                }
                g[i] += go[i] * d;
            }
        };
    }
    return detail::make_out(x.shape, std::move(out), t, name, {x.node}, std::move(back));
}

inline Tensor sigmoid(const Tensor& x) { return unary(Unary::Sigmoid, x); }
inline Tensor tanh(const Tensor& x) { return unary(Unary::Tanh, x); }
inline Tensor relu(const Tensor& x) { return unary(Unary::Relu, x); }
inline Tensor exp(const Tensor& x) { return unary(Unary::Exp, x); }
inline Tensor log(const Tensor& x) { return unary(Unary::Log, x); }

// ---------------------------------------------------------------------------
// softmax along an axis, shift-stable
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (x.rank() == 0 || x.rank() > 2 || axis >= x.rank())
        throw std::invalid_argument("softmax: invalid axis " + std::to_string(axis) + " for " +
                                    shape_str(x.shape));
    const std::size_t n = x.rank() == 1 ? 1 : x.shape[0];
    const std::size_t m = x.rank() == 1 ? x.shape[0] : x.shape[1];
    // slices run along `axis`; stride/extent describe one slice
    const bool along_cols = (x.rank() == 1) || axis == 1;
    const std::size_t n_slices = along_cols ? n : m;
    const std::size_t extent = along_cols ? m : n;
    const std::size_t stride = along_cols ? 1 : m;

    std::vector<double> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t s = 0; s < n_slices; ++s) {
        const std::size_t base = along_cols ? s * m : s;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < extent; ++i) mx = std::max(mx, xv[base + i * stride]);
        double z = 0.0;
        for (std::size_t i = 0; i < extent; ++i) z += std::exp(xv[base + i * stride] - mx);
        for (std::size_t i = 0; i < extent; ++i)
            out[base + i * stride] = std::exp(xv[base + i * stride] - mx) / z;
    }

    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        auto yd = std::make_shared<const std::vector<double>>(out);
        back = [ix, yd, n_slices, extent, stride, along_cols, m](Tape& tp,
                                                                 const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ix);
            for (std::size_t s = 0; s < n_slices; ++s) {
                const std::size_t base = along_cols ? s * m : s;
                double dot = 0.0;
                for (std::size_t i = 0; i < extent; ++i) {
                    const std::size_t idx = base + i * stride;
                    dot += go[idx] * (*yd)[idx];
                }
                for (std::size_t i = 0; i < extent; ++i) {
                    const std::size_t idx = base + i * stride;
                    g[idx] += (go[idx] - dot) * (*yd)[idx];
                }
            }
        };
    }
    return detail::make_out(x.shape, std::move(out), t, "softmax", {x.node}, std::move(back));
}

// ---------------------------------------------------------------------------
// layer normalization over the last dimension, with affine gain/bias
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (x.rank() == 0 || x.rank() > 2)
        throw std::invalid_argument("layer_norm: expected vector or matrix, got " + shape_str(x.shape));
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
    const std::size_t n = x.rank() == 1 ? 1 : x.shape[0];
    const std::size_t d = x.rank() == 1 ? x.shape[0] : x.shape[1];
    if (gain.shape != Shape{d} || bias.shape != Shape{d})
        throw std::invalid_argument("layer_norm: gain/bias " + shape_str(gain.shape) + "/" +
                                    shape_str(bias.shape) + " do not match last dim " +
                                    std::to_string(d));

    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(n);
    const auto& xv = x.values();
    for (std::size_t r = 0; r < n; ++r) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xv[r * d + j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xv[r * d + j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xv[r * d + j] - mean) * inv_std[r];
            out[r * d + j] = gain.at(j) * xhat[r * d + j] + bias.at(j);
        }
    }

    Tape* t = detail::tape_of({&x, &gain, &bias});
    Tape::BackFn back;
    if (t) {
        int ix = x.node, ig = gain.node, ib = bias.node;
        auto gv = gain.data;
        auto xh = std::make_shared<const std::vector<double>>(std::move(xhat));
        auto is = std::make_shared<const std::vector<double>>(std::move(inv_std));
        back = [ix, ig, ib, gv, xh, is, n, d](Tape& tp, const std::vector<double>& go) {
            if (ig >= 0) {
                auto& g = tp.grad_buffer(ig);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < d; ++j) g[j] += go[r * d + j] * (*xh)[r * d + j];
            }
            if (ib >= 0) {
                auto& g = tp.grad_buffer(ib);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < d; ++j) g[j] += go[r * d + j];
            }
            if (ix >= 0) {
                auto& g = tp.grad_buffer(ix);
                const double dn = static_cast<double>(d);
                for (std::size_t r = 0; r < n; ++r) {
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dy = go[r * d + j] * (*gv)[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * (*xh)[r * d + j];
                    }
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dy = go[r * d + j] * (*gv)[j];
                        g[r * d + j] += (*is)[r] * (dy - sum_dy / dn -
                                                    (*xh)[r * d + j] * sum_dy_xhat / dn);
                    }
                }
            }
        };
    }
    return detail::make_out(x.shape, std::move(out), t, "layer_norm",
                            {x.node, gain.node, bias.node}, std::move(back));
}

// ---------------------------------------------------------------------------
// length-preserving 1-D convolution, zero same-padding, odd kernel width
// x: [len x d_in], kernels: [k x d_in x d_out]
// ---------------------------------------------------------------------------

inline Tensor conv1d(const Tensor& x, const Tensor& kernels) {
    if (x.rank() != 2 || kernels.rank() != 3)
        throw std::invalid_argument("conv1d: expected [len x d_in] and [k x d_in x d_out], got " +
                                    shape_str(x.shape) + " and " + shape_str(kernels.shape));
    const std::size_t len = x.shape[0], din = x.shape[1];
    const std::size_t k = kernels.shape[0], kin = kernels.shape[1], dout = kernels.shape[2];
    if (k % 2 == 0)
        throw std::invalid_argument("conv1d: kernel width must be odd, got " + std::to_string(k));
    if (kin != din)
        throw std::invalid_argument("conv1d: input width " + std::to_string(din) +
                                    " does not match kernel width " + std::to_string(kin));
    const std::size_t half = (k - 1) / 2;

    std::vector<double> out(len * dout, 0.0);
    const auto& xv = x.values();
    const auto& kv = kernels.values();
    for (std::size_t tpos = 0; tpos < len; ++tpos)
        for (std::size_t j = 0; j < k; ++j) {
            const long src = static_cast<long>(tpos) + static_cast<long>(j) - static_cast<long>(half);
            if (src < 0 || src >= static_cast<long>(len)) continue;
            for (std::size_t c = 0; c < din; ++c) {
                const double xval = xv[static_cast<std::size_t>(src) * din + c];
                if (xval == 0.0) continue;
                const std::size_t kbase = (j * din + c) * dout;
                for (std::size_t o = 0; o < dout; ++o) out[tpos * dout + o] += xval * kv[kbase + o];
            }
        }

    Tape* t = detail::tape_of({&x, &kernels});
    Tape::BackFn back;
    if (t) {
        int ix = x.node, ik = kernels.node;
        auto xd = x.data, kd = kernels.data;
        back = [ix, ik, xd, kd, len, din, k, dout, half](Tape& tp, const std::vector<double>& go) {
            for (std::size_t tpos = 0; tpos < len; ++tpos)
                for (std::size_t j = 0; j < k; ++j) {
                    const long src =
                        static_cast<long>(tpos) + static_cast<long>(j) - static_cast<long>(half);
                    if (src < 0 || src >= static_cast<long>(len)) continue;
                    for (std::size_t c = 0; c < din; ++c) {
                        const std::size_t xi = static_cast<std::size_t>(src) * din + c;
                        const std::size_t kbase = (j * din + c) * dout;
                        if (ix >= 0) {
                            auto& gx = tp.grad_buffer(ix);
                            double acc = 0.0;
                            for (std::size_t o = 0; o < dout; ++o)
                                acc += go[tpos * dout + o] * (*kd)[kbase + o];
                            gx[xi] += acc;
                        }
                        if (ik >= 0) {
                            auto& gk = tp.grad_buffer(ik);
                            const double xval = (*xd)[xi];
                            if (xval == 0.0) continue;
                            for (std::size_t o = 0; o < dout; ++o)
                                gk[kbase + o] += xval * go[tpos * dout + o];
                        }
                    }
                }
        };
    }
    return detail::make_out({len, dout}, std::move(out), t, "conv1d", {x.node, kernels.node},
                            std::move(back));
}

// ---------------------------------------------------------------------------
// concat / slicing / reshape / reductions
// ---------------------------------------------------------------------------

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no parts");
    const std::size_t rank = parts[0].rank();
    if (axis >= rank) throw std::invalid_argument("concat: invalid axis");
    for (const Tensor& p : parts) {
        if (p.rank() != rank) throw std::invalid_argument("concat: rank mismatch");
        for (std::size_t d = 0; d < rank; ++d)
            if (d != axis && p.shape[d] != parts[0].shape[d])
                throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape) +
                                            " vs " + shape_str(parts[0].shape));
    }
    if (rank > 2) throw std::invalid_argument("concat: only rank 1 or 2 supported");

    Shape out_shape = parts[0].shape;
    out_shape[axis] = 0;
    for (const Tensor& p : parts) out_shape[axis] += p.shape[axis];

    std::vector<double> out(numel_of(out_shape));
    std::vector<std::size_t> offsets(parts.size());
    if (rank == 1 || axis == 0) {
        std::size_t pos = 0;
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            offsets[pi] = pos;
            const auto& v = parts[pi].values();
            std::copy(v.begin(), v.end(), out.begin() + static_cast<long>(pos));
            pos += v.size();
        }
    } else {  // rank 2, axis 1
        const std::size_t n = out_shape[0], m = out_shape[1];
        std::size_t col = 0;
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            offsets[pi] = col;
            const std::size_t pc = parts[pi].shape[1];
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < pc; ++c)
                    out[r * m + col + c] = parts[pi].at(r, c);
            col += pc;
        }
    }

    std::vector<const Tensor*> ptrs;
    for (const Tensor& p : parts) ptrs.push_back(&p);
    Tape* t = nullptr;
    for (const Tensor* p : ptrs) {
        if (p->node < 0) continue;
        if (t && p->tape != t) throw std::invalid_argument("concat: inputs on different tapes");
        t = p->tape;
    }

    std::vector<int> inputs;
    for (const Tensor& p : parts) inputs.push_back(p.node);
    Tape::BackFn back;
    if (t) {
        std::vector<Shape> shapes;
        for (const Tensor& p : parts) shapes.push_back(p.shape);
        const std::size_t n = rank == 2 ? out_shape[0] : 1;
        const std::size_t m = rank == 2 ? out_shape[1] : out_shape[0];
        const bool col_axis = (rank == 2 && axis == 1);
        auto ins = inputs;
        back = [ins, shapes, offsets, n, m, col_axis](Tape& tp, const std::vector<double>& go) {
            for (std::size_t pi = 0; pi < ins.size(); ++pi) {
                if (ins[pi] < 0) continue;
                auto& g = tp.grad_buffer(ins[pi]);
                if (!col_axis) {
                    const std::size_t count = numel_of(shapes[pi]);
                    for (std::size_t i = 0; i < count; ++i) g[i] += go[offsets[pi] + i];
                } else {
                    const std::size_t pc = shapes[pi][1];
                    for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < pc; ++c)
                            g[r * pc + c] += go[r * m + offsets[pi] + c];
                }
            }
        };
    }
    return detail::make_out(std::move(out_shape), std::move(out), t, "concat", std::move(inputs),
                            std::move(back));
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t count) {
    if (x.rank() != 2) throw std::invalid_argument("slice_rows: expected matrix");
    const std::size_t n = x.shape[0], m = x.shape[1];
    if (r0 + count > n) throw std::invalid_argument("slice_rows: range out of bounds");
    std::vector<double> out(count * m);
    std::copy(x.values().begin() + static_cast<long>(r0 * m),
              x.values().begin() + static_cast<long>((r0 + count) * m), out.begin());
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        back = [ix, r0, m](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ix);
            for (std::size_t i = 0; i < go.size(); ++i) g[r0 * m + i] += go[i];
        };
    }
    return detail::make_out({count, m}, std::move(out), t, "slice_rows", {x.node}, std::move(back));
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t count) {
    if (x.rank() != 2) throw std::invalid_argument("slice_cols: expected matrix");
    const std::size_t n = x.shape[0], m = x.shape[1];
    if (c0 + count > m) throw std::invalid_argument("slice_cols: range out of bounds");
    std::vector<double> out(n * count);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < count; ++c) out[r * count + c] = x.at(r, c0 + c);
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        back = [ix, c0, count, m](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ix);
            const std::size_t n_rows = go.size() / count;
            for (std::size_t r = 0; r < n_rows; ++r)
                for (std::size_t c = 0; c < count; ++c) g[r * m + c0 + c] += go[r * count + c];
        };
    }
    return detail::make_out({n, count}, std::move(out), t, "slice_cols", {x.node}, std::move(back));
}

// 1-D slice
inline Tensor slice(const Tensor& x, std::size_t i0, std::size_t count) {
    if (x.rank() != 1) throw std::invalid_argument("slice: expected vector");
    if (i0 + count > x.shape[0]) throw std::invalid_argument("slice: range out of bounds");
    std::vector<double> out(x.values().begin() + static_cast<long>(i0),
                            x.values().begin() + static_cast<long>(i0 + count));
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        back = [ix, i0](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ix);
            for (std::size_t i = 0; i < go.size(); ++i) g[i0 + i] += go[i];
        };
    }
    return detail::make_out({count}, std::move(out), t, "slice", {x.node}, std::move(back));
}

// Row i of a matrix as a vector.
inline Tensor row(const Tensor& x, std::size_t i) {
    if (x.rank() != 2) throw std::invalid_argument("row: expected matrix");
    const std::size_t m = x.shape[1];
    if (i >= x.shape[0]) throw std::invalid_argument("row: index out of bounds");
    std::vector<double> out(x.values().begin() + static_cast<long>(i * m),
                            x.values().begin() + static_cast<long>((i + 1) * m));
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        back = [ix, i, m](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ix);
            for (std::size_t j = 0; j < m; ++j) g[i * m + j] += go[j];
        };
    }
    return detail::make_out({m}, std::move(out), t, "row", {x.node}, std::move(back));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw std::invalid_argument("reshape: " + shape_str(x.shape) + " to " + shape_str(shape) +
                                    " changes element count");
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        back = [ix](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ix);
            for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
        };
    }
    return detail::make_out(std::move(shape), std::vector<double>(x.values()), t, "reshape",
                            {x.node}, std::move(back));
}

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        back = [ix](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ix);
            for (double& gi : g) gi += go[0];
        };
    }
    return detail::make_out({1}, {acc}, t, "sum", {x.node}, std::move(back));
}

// Mean over rows of a matrix: [n x d] -> [d].
inline Tensor mean_rows(const Tensor& x) {
    if (x.rank() != 2) throw std::invalid_argument("mean_rows: expected matrix");
    const std::size_t n = x.shape[0], d = x.shape[1];
    if (n == 0) throw std::invalid_argument("mean_rows: empty matrix");
    std::vector<double> out(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) out[j] += x.at(r, j);
    for (double& v : out) v /= static_cast<double>(n);
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        back = [ix, n, d](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ix);
            const double inv = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < d; ++j) g[r * d + j] += go[j] * inv;
        };
    }
    return detail::make_out({d}, std::move(out), t, "mean_rows", {x.node}, std::move(back));
}

// Adds vector v to every row of M.
inline Tensor add_rowwise(const Tensor& M, const Tensor& v) {
    if (M.rank() != 2 || v.rank() != 1 || M.shape[1] != v.shape[0])
        throw std::invalid_argument("add_rowwise: " + shape_str(M.shape) + " + " +
                                    shape_str(v.shape));
    const std::size_t n = M.shape[0], m = M.shape[1];
    std::vector<double> out(n * m);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) out[r * m + c] = M.at(r, c) + v.at(c);
    Tape* t = detail::tape_of({&M, &v});
    Tape::BackFn back;
    if (t) {
        int im = M.node, iv = v.node;
        back = [im, iv, n, m](Tape& tp, const std::vector<double>& go) {
            if (im >= 0) {
                auto& g = tp.grad_buffer(im);
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
            }
            if (iv >= 0) {
                auto& g = tp.grad_buffer(iv);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < m; ++c) g[c] += go[r * m + c];
            }
        };
    }
    return detail::make_out(M.shape, std::move(out), t, "add_rowwise", {M.node, v.node},
                            std::move(back));
}

// Multiplies every row of M elementwise by v.
inline Tensor mul_rowwise(const Tensor& M, const Tensor& v) {
    if (M.rank() != 2 || v.rank() != 1 || M.shape[1] != v.shape[0])
        throw std::invalid_argument("mul_rowwise: " + shape_str(M.shape) + " * " +
                                    shape_str(v.shape));
    const std::size_t n = M.shape[0], m = M.shape[1];
    std::vector<double> out(n * m);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) out[r * m + c] = M.at(r, c) * v.at(c);
    Tape* t = detail::tape_of({&M, &v});
    Tape::BackFn back;
    if (t) {
        int im = M.node, iv = v.node;
        auto md = M.data, vd = v.data;
        back = [im, iv, md, vd, n, m](Tape& tp, const std::vector<double>& go) {
            if (im >= 0) {
                auto& g = tp.grad_buffer(im);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < m; ++c) g[r * m + c] += go[r * m + c] * (*vd)[c];
            }
            if (iv >= 0) {
                auto& g = tp.grad_buffer(iv);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < m; ++c) g[c] += go[r * m + c] * (*md)[r * m + c];
            }
        };
    }
    return detail::make_out(M.shape, std::move(out), t, "mul_rowwise", {M.node, v.node},
                            std::move(back));
}

// Adds u[r] to every entry of row r.
inline Tensor add_colwise(const Tensor& M, const Tensor& u) {
    if (M.rank() != 2 || u.rank() != 1 || M.shape[0] != u.shape[0])
        throw std::invalid_argument("add_colwise: " + shape_str(M.shape) + " + " +
                                    shape_str(u.shape));
    const std::size_t n = M.shape[0], m = M.shape[1];
    std::vector<double> out(n * m);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) out[r * m + c] = M.at(r, c) + u.at(r);
    Tape* t = detail::tape_of({&M, &u});
    Tape::BackFn back;
    if (t) {
        int im = M.node, iu = u.node;
        back = [im, iu, n, m](Tape& tp, const std::vector<double>& go) {
            if (im >= 0) {
                auto& g = tp.grad_buffer(im);
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
            }
            if (iu >= 0) {
                auto& g = tp.grad_buffer(iu);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < m; ++c) g[r] += go[r * m + c];
            }
        };
    }
    return detail::make_out(M.shape, std::move(out), t, "add_colwise", {M.node, u.node},
                            std::move(back));
}

// Single element by flat index, as a scalar tensor.
inline Tensor pick(const Tensor& x, std::size_t index) {
    if (index >= x.numel()) throw std::invalid_argument("pick: index out of bounds");
    Tape* t = detail::tape_of({&x});
    Tape::BackFn back;
    if (t) {
        int ix = x.node;
        back = [ix, index](Tape& tp, const std::vector<double>& go) {
            tp.grad_buffer(ix)[index] += go[0];
        };
    }
    return detail::make_out({1}, {x.at(index)}, t, "pick", {x.node}, std::move(back));
}

// Gathers rows of `table` by id: out[t, :] = table[ids[t], :].
inline Tensor rows_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
    if (table.rank() != 2) throw std::invalid_argument("rows_lookup: expected matrix table");
    const std::size_t V = table.shape[0], d = table.shape[1];
    for (std::size_t id : ids)
        if (id >= V)
            throw std::out_of_range("rows_lookup: id " + std::to_string(id) +
                                    " out of range for table with " + std::to_string(V) + " rows");
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = table.at(ids[i], j);
    Tape* t = detail::tape_of({&table});
    Tape::BackFn back;
    if (t) {
        int it = table.node;
        auto idc = ids;
        back = [it, idc, d](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(it);
            for (std::size_t i = 0; i < idc.size(); ++i)
                for (std::size_t j = 0; j < d; ++j) g[idc[i] * d + j] += go[i * d + j];
        };
    }
    return detail::make_out({ids.size(), d}, std::move(out), t, "rows_lookup", {table.node},
                            std::move(back));
}

// Sums entries of alpha into bins: out[bins[i]] += alpha[i].
inline Tensor scatter_sum(const Tensor& alpha, const std::vector<std::size_t>& bins,
                          std::size_t out_size) {
    if (alpha.rank() != 1 || alpha.shape[0] != bins.size())
        throw std::invalid_argument("scatter_sum: alpha " + shape_str(alpha.shape) +
                                    " does not match " + std::to_string(bins.size()) + " bins");
    for (std::size_t b : bins)
        if (b >= out_size) throw std::out_of_range("scatter_sum: bin out of range");
    std::vector<double> out(out_size, 0.0);
    for (std::size_t i = 0; i < bins.size(); ++i) out[bins[i]] += alpha.at(i);
    Tape* t = detail::tape_of({&alpha});
    Tape::BackFn back;
    if (t) {
        int ia = alpha.node;
        auto bc = bins;
        back = [ia, bc](Tape& tp, const std::vector<double>& go) {
            auto& g = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < bc.size(); ++i) g[i] += go[bc[i]];
        };
    }
    return detail::make_out({out_size}, std::move(out), t, "scatter_sum", {alpha.node},
                            std::move(back));
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(|analytic|, |fd|, 1e-8)
// for a scalar-valued function of one tensor.
template <class F>
double grad_check(F f, const Tensor& x, double eps = 1e-5) {
    Param px("x", x);
    Tape tape;
    Tensor y = f(tape.use(px));
    if (y.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
    GradMap grads = tape.backward(y);
    const Tensor& analytic = grads.at("x");

    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        std::vector<double> bumped(x.values());
        bumped[i] += eps;
        const double up = f(Tensor(x.shape, bumped)).item();
        bumped[i] = x.at(i) - eps;
        const double down = f(Tensor(x.shape, bumped)).item();
        const double fd = (up - down) / (2.0 * eps);
        const double a = analytic.at(i);
        const double denom = std::max({std::fabs(a), std::fabs(fd), 1e-8});
        worst = std::max(worst, std::fabs(a - fd) / denom);
    }
    return worst;
}

}  // namespace nd
}  // namespace wegen
