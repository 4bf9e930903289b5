#pragma once

// Reusable neural blocks: embeddings with sinusoidal positions, gated CNN,
// multi-head self-attention, bidirectional LSTM, residual/norm wrappers.
//
// Every block owns named Params and exposes forward(Tape*, ...). Passing a
// null tape runs the block in inference mode: parameters enter the graph as
// constants and nothing is recorded.

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "wegen/tensor.hpp"

namespace wegen {
namespace nn {

using nd::Param;
using nd::Shape;
using nd::Tape;
using nd::Tensor;

inline Tensor use(Tape* tape, Param& p) { return tape ? tape->use(p) : p.value; }

inline Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out,
                             std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return nd::rand_uniform(std::move(shape), -limit, limit, rng);
}

// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(pos / 10000^(2i/d))
inline Tensor positional_encoding(std::size_t seq_len, std::size_t d_model) {
    if (d_model % 2 != 0)
        throw std::invalid_argument("positional_encoding: d_model must be even, got " +
                                    std::to_string(d_model));
    std::vector<double> pe(seq_len * d_model);
    for (std::size_t pos = 0; pos < seq_len; ++pos)
        for (std::size_t i = 0; i < d_model; i += 2) {
            const double freq =
                std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
            const double angle = static_cast<double>(pos) / freq;
            pe[pos * d_model + i] = std::sin(angle);
            pe[pos * d_model + i + 1] = std::cos(angle);
        }
    return Tensor({seq_len, d_model}, std::move(pe));
}

// ---------------------------------------------------------------------------

struct EmbeddingTable {
    std::size_t vocab_size = 0;
    std::size_t dim = 0;
    Param matrix;  // [vocab_size x dim]
    bool trainable = false;

    EmbeddingTable() = default;
    EmbeddingTable(std::string name, Tensor values, bool trainable_)
        : vocab_size(values.shape.at(0)),
          dim(values.shape.at(1)),
          matrix(std::move(name), std::move(values)),
          trainable(trainable_) {}

    static EmbeddingTable random(std::string name, std::size_t vocab, std::size_t dim,
                                 std::mt19937_64& rng, bool trainable = false) {
        return EmbeddingTable(std::move(name), nd::rand_uniform({vocab, dim}, -0.1, 0.1, rng),
                              trainable);
    }
};

inline Tensor embed_sequence(Tape* tape, const std::vector<std::size_t>& tokens,
                             EmbeddingTable& table, bool add_position) {
    for (std::size_t id : tokens)
        if (id >= table.vocab_size)
            throw std::out_of_range("embed_sequence: token id " + std::to_string(id) +
                                    " out of range for vocab of " +
                                    std::to_string(table.vocab_size));
    Tensor rows = table.trainable ? nd::rows_lookup(use(tape, table.matrix), tokens)
                                  : nd::rows_lookup(table.matrix.value, tokens);
    if (!add_position || tokens.empty()) return rows;
    return nd::add(rows, positional_encoding(tokens.size(), table.dim));
}

// ---------------------------------------------------------------------------

struct Linear {
    Param w;  // [in x out]
    Param b;  // [out]

    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng)
        : w(name + "/w", xavier_uniform({in, out}, in, out, rng)),
          b(name + "/b", nd::zeros({out})) {}

    Tensor forward(Tape* tape, const Tensor& x) {
        Tensor y = nd::matmul(x, use(tape, w));
        if (y.rank() == 1) return nd::add(y, use(tape, b));
        return nd::add_rowwise(y, use(tape, b));
    }

    void collect(std::vector<Param*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct LayerNorm {
    Param gain;
    Param bias;
    double eps = 1e-5;

    LayerNorm() = default;
    LayerNorm(const std::string& name, std::size_t dim)
        : gain(name + "/gain", nd::full({dim}, 1.0)), bias(name + "/bias", nd::zeros({dim})) {}

    Tensor forward(Tape* tape, const Tensor& x) {
        return nd::layer_norm(x, use(tape, gain), use(tape, bias), eps);
    }

    void collect(std::vector<Param*>& out) {
        out.push_back(&gain);
        out.push_back(&bias);
    }
};

// layer_norm(x + f(x))
template <class F>
Tensor residual_block(Tape* tape, LayerNorm& norm, const Tensor& x, F f) {
    Tensor fx = f(x);
    if (fx.shape != x.shape)
        throw std::invalid_argument("residual_block: inner block changed shape " +
                                    nd::shape_str(x.shape) + " to " + nd::shape_str(fx.shape));
    return norm.forward(tape, nd::add(x, fx));
}

// ---------------------------------------------------------------------------
// Gated linear unit over two parallel convolutions:
//   (conv1d(x; W) + b) * sigmoid(conv1d(x; V) + c)
// ---------------------------------------------------------------------------

struct GatedCnnBlock {
    Param conv_w;     // [k x d x d]
    Param conv_b;     // [d]
    Param gate_w;     // [k x d x d]
    Param gate_b;     // [d]

    GatedCnnBlock() = default;
    GatedCnnBlock(const std::string& name, std::size_t dim, std::size_t kernel,
                  std::mt19937_64& rng)
        : conv_w(name + "/conv_w", xavier_uniform({kernel, dim, dim}, kernel * dim, kernel * dim, rng)),
          conv_b(name + "/conv_b", nd::zeros({dim})),
          gate_w(name + "/gate_w", xavier_uniform({kernel, dim, dim}, kernel * dim, kernel * dim, rng)),
          gate_b(name + "/gate_b", nd::zeros({dim})) {}

    Tensor forward(Tape* tape, const Tensor& x) {
        Tensor lin = nd::add_rowwise(nd::conv1d(x, use(tape, conv_w)), use(tape, conv_b));
        Tensor gate = nd::sigmoid(
            nd::add_rowwise(nd::conv1d(x, use(tape, gate_w)), use(tape, gate_b)));
        return nd::mul(lin, gate);
    }

    void collect(std::vector<Param*>& out) {
        out.push_back(&conv_w);
        out.push_back(&conv_b);
        out.push_back(&gate_w);
        out.push_back(&gate_b);
    }
};

// ---------------------------------------------------------------------------
// Multi-head self-attention with scaled dot-product scores.
// ---------------------------------------------------------------------------

struct MultiHeadSelfAttention {
    std::size_t heads = 1;
    Param wq, wk, wv, wo;  // all [d x d]

    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(const std::string& name, std::size_t dim, std::size_t heads_,
                           std::mt19937_64& rng)
        : heads(heads_),
          wq(name + "/wq", xavier_uniform({dim, dim}, dim, dim, rng)),
          wk(name + "/wk", xavier_uniform({dim, dim}, dim, dim, rng)),
          wv(name + "/wv", xavier_uniform({dim, dim}, dim, dim, rng)),
          wo(name + "/wo", xavier_uniform({dim, dim}, dim, dim, rng)) {
        if (heads_ == 0 || dim % heads_ != 0)
            throw std::invalid_argument("attention: model dim " + std::to_string(dim) +
                                        " not divisible by " + std::to_string(heads_) + " heads");
    }

    Tensor forward(Tape* tape, const Tensor& x) {
        const std::size_t d = x.shape.at(1);
        if (d != wq.value.shape[0])
            throw std::invalid_argument("attention: input width " + std::to_string(d) +
                                        " does not match parameters");
        const std::size_t dh = d / heads;
        Tensor q = nd::matmul(x, use(tape, wq));
        Tensor k = nd::matmul(x, use(tape, wk));
        Tensor v = nd::matmul(x, use(tape, wv));
        std::vector<Tensor> outs;
        for (std::size_t h = 0; h < heads; ++h) {
            Tensor qh = slice_cols(q, h * dh, dh);
            Tensor kh = slice_cols(k, h * dh, dh);
            Tensor vh = slice_cols(v, h * dh, dh);
            Tensor scores = nd::scale(nd::matmul(qh, nd::transpose(kh)),
                                      1.0 / std::sqrt(static_cast<double>(dh)));
            Tensor weights = nd::softmax(scores, 1);
            outs.push_back(nd::matmul(weights, vh));
        }
        return nd::matmul(nd::concat(outs, 1), use(tape, wo));
    }

    // Row-stochastic attention weights of one head, for tests.
    Tensor head_weights(const Tensor& x, std::size_t h) {
        const std::size_t d = x.shape.at(1);
        const std::size_t dh = d / heads;
        Tensor q = nd::matmul(x, wq.value);
        Tensor k = nd::matmul(x, wk.value);
        Tensor scores = nd::scale(nd::matmul(slice_cols(q, h * dh, dh),
                                             nd::transpose(slice_cols(k, h * dh, dh))),
                                  1.0 / std::sqrt(static_cast<double>(dh)));
        return nd::softmax(scores, 1);
    }

    void collect(std::vector<Param*>& out) {
        out.push_back(&wq);
        out.push_back(&wk);
        out.push_back(&wv);
        out.push_back(&wo);
    }

private:
    static Tensor slice_cols(const Tensor& m, std::size_t c0, std::size_t count) {
        // column slice via transpose-free row copies
        const std::size_t n = m.shape[0], w = m.shape[1];
        if (c0 + count > w) throw std::invalid_argument("slice_cols: out of bounds");
        std::vector<Tensor> rows;
        (void)n;
        // a dedicated op keeps the tape small
        return nd::slice_cols_op(m, c0, count);
    }
};

}  // namespace nn
}  // namespace wegen
