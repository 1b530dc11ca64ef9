// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvib/matrix.hpp"
#include "nvib/rng.hpp"

namespace nvib {

// Raised for numerical failures that the caller is expected to surface
// (degenerate softmax rows, non-finite projections, invalid pseudo-counts).
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Reverse-mode autodiff over Matrix values. Nodes are appended in
// topological order; backward() walks them in reverse. A tape built with
// grad_enabled = false records no pullbacks and acts as a plain evaluator.
class Tape {
public:
    using Var = int;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Var leaf(Matrix value, bool requires_grad = false);
    Var constant(Matrix value) { return leaf(std::move(value), false); }
    Var scalar(double v) { return constant(Matrix(1, 1, v)); }

    const Matrix& value(Var v) const { return nodes_[check(v)].val; }
    const Matrix& grad(Var v) const;
    // nullptr when no gradient reached v (or backward was never run).
    const Matrix* maybe_grad(Var v) const {
        const Node& n = nodes_[check(v)];
        return n.grad.empty() ? nullptr : &n.grad;
    }
    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(root)/d(root) = 1 and accumulates gradients into every
    // requires_grad node reachable from the root. root must be 1x1.
    void backward(Var root);

    // elementwise
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var neg(Var a);
    Var scale(Var a, double c);
    Var add_scalar(Var a, double c);
    Var exp(Var a);
    Var log(Var a);
    Var sqrt(Var a);
    Var relu(Var a);
    Var lgamma(Var a);
    Var digamma(Var a);

    // linear algebra
    Var matmul(Var a, Var b);     // a * b
    Var matmul_nt(Var a, Var b);  // a * b^T
    Var matmul_tn(Var a, Var b);  // a^T * b
    Var transpose(Var a);

    // broadcasts / reductions
    Var add_row_vector(Var a, Var v);  // v: 1 x cols
    Var add_col_vector(Var a, Var v);  // v: rows x 1
    Var mul_row_vector(Var a, Var v);
    Var mul_col_vector(Var a, Var v);
    Var row_sum(Var a);  // rows x 1
    Var col_sum(Var a);  // 1 x cols
    Var sum_all(Var a);  // 1 x 1

    // structure
    Var concat_rows(Var a, Var b);
    Var slice_rows(Var a, int row0, int nrows);
    Var gather_rows(Var table, std::vector<int> ids);

    // neural-net blocks
    // mask: empty, cols() long (column mask) or rows()*cols() long (full).
    // Masked entries receive weight exactly 0. Throws NumericalError if a
    // row has no unmasked entry.
    Var softmax_rows(Var logits, std::vector<std::uint8_t> mask = {});
    Var layer_norm_rows(Var a, Var gain, Var bias, double eps = 1e-5);
    Var dropout(Var a, double prob, Rng& rng);
    // Mean cross-entropy (natural log) of row-wise logits against targets.
    Var cross_entropy_rows(Var logits, std::vector<int> targets);

    // Gamma(alpha_i, 1) samples via the smooth inverse-CDF transform with
    // implicit-reparameterisation pullback. alpha must be a column vector
    // with strictly positive entries.
    Var gamma_sample(Var alpha, Rng& rng);

private:
    struct Node {
        Matrix val;
        Matrix grad;
        std::function<void(Tape&, int)> back;
        bool requires_grad = false;
    };

    int check(Var v) const {
        if (v < 0 || v >= static_cast<int>(nodes_.size())) throw std::out_of_range("tape var");
        return v;
    }
    bool rg(Var v) const { return nodes_[v].requires_grad; }
    Var push(Matrix val, bool requires_grad, std::function<void(Tape&, int)> back);
    void accum(Var target, const Matrix& g);
    const Matrix& g(int self) const { return nodes_[self].grad; }

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

}  // namespace nvib
