// SPDX-License-Identifier: Apache-2.0
#include "nvib/tape.hpp"

#include <cassert>
#include <cmath>

#include "nvib/kernels.hpp"
#include "nvib/special.hpp"

namespace nvib {

Tape::Var Tape::leaf(Matrix value, bool requires_grad) {
    return push(std::move(value), grad_enabled_ && requires_grad, nullptr);
}

const Matrix& Tape::grad(Var v) const {
    const Node& n = nodes_[check(v)];
    if (n.grad.empty())
        throw std::logic_error("gradient not available; call backward() on a reachable root");
    return n.grad;
}

Tape::Var Tape::push(Matrix val, bool requires_grad, std::function<void(Tape&, int)> back) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = requires_grad;
    if (requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

void Tape::accum(Var target, const Matrix& g) {
    Node& n = nodes_[target];
    if (!n.requires_grad) return;
    if (n.grad.empty()) n.grad = Matrix(n.val.rows(), n.val.cols());
    kernels::axpy(1.0, g, n.grad);
}

void Tape::backward(Var root) {
    Node& r = nodes_[check(root)];
    if (r.val.rows() != 1 || r.val.cols() != 1)
        throw std::logic_error("backward() root must be a 1x1 scalar");
    if (!r.requires_grad) return;
    if (r.grad.empty()) r.grad = Matrix(1, 1);
    r.grad(0, 0) += 1.0;
    for (int i = root; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.back && !n.grad.empty()) n.back(*this, i);
    }
}

// ---------------------------------------------------------------------------
// elementwise

Tape::Var Tape::add(Var a, Var b) {
    check(a);
    check(b);
    assert(value(a).same_shape(value(b)));
    Matrix out;
    kernels::add(value(a), value(b), out);
    return push(std::move(out), rg(a) || rg(b), [a, b](Tape& t, int self) {
        t.accum(a, t.g(self));
        t.accum(b, t.g(self));
    });
}

Tape::Var Tape::sub(Var a, Var b) {
    check(a);
    check(b);
    assert(value(a).same_shape(value(b)));
    const Matrix& va = value(a);
    const Matrix& vb = value(b);
    Matrix out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) out.data()[i] = va.data()[i] - vb.data()[i];
    return push(std::move(out), rg(a) || rg(b), [a, b](Tape& t, int self) {
        t.accum(a, t.g(self));
        Matrix gb = t.g(self);
        for (std::size_t i = 0; i < gb.size(); ++i) gb.data()[i] = -gb.data()[i];
        t.accum(b, gb);
    });
}

Tape::Var Tape::mul(Var a, Var b) {
    check(a);
    check(b);
    assert(value(a).same_shape(value(b)));
    Matrix out;
    kernels::hadamard(value(a), value(b), out);
    return push(std::move(out), rg(a) || rg(b), [a, b](Tape& t, int self) {
        Matrix tmp;
        kernels::hadamard(t.g(self), t.value(b), tmp);
        t.accum(a, tmp);
        kernels::hadamard(t.g(self), t.value(a), tmp);
        t.accum(b, tmp);
    });
}

Tape::Var Tape::div(Var a, Var b) {
    check(a);
    check(b);
    assert(value(a).same_shape(value(b)));
    const Matrix& va = value(a);
    const Matrix& vb = value(b);
    Matrix out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) out.data()[i] = va.data()[i] / vb.data()[i];
    return push(std::move(out), rg(a) || rg(b), [a, b](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& vb2 = t.value(b);
        const Matrix& vo = t.nodes_[self].val;
        Matrix ga(gs.rows(), gs.cols());
        Matrix gb(gs.rows(), gs.cols());
        for (std::size_t i = 0; i < gs.size(); ++i) {
            ga.data()[i] = gs.data()[i] / vb2.data()[i];
            gb.data()[i] = -gs.data()[i] * vo.data()[i] / vb2.data()[i];
        }
        t.accum(a, ga);
        t.accum(b, gb);
    });
}

Tape::Var Tape::neg(Var a) { return scale(a, -1.0); }

Tape::Var Tape::scale(Var a, double c) {
    check(a);
    const Matrix& va = value(a);
    Matrix out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) out.data()[i] = c * va.data()[i];
    return push(std::move(out), rg(a), [a, c](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        Matrix ga(gs.rows(), gs.cols());
        for (std::size_t i = 0; i < gs.size(); ++i) ga.data()[i] = c * gs.data()[i];
        t.accum(a, ga);
    });
}

Tape::Var Tape::add_scalar(Var a, double c) {
    check(a);
    const Matrix& va = value(a);
    Matrix out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) out.data()[i] = va.data()[i] + c;
    return push(std::move(out), rg(a), [a](Tape& t, int self) { t.accum(a, t.g(self)); });
}

Tape::Var Tape::exp(Var a) {
    check(a);
    Matrix out;
    kernels::map_exp(value(a), out);
    return push(std::move(out), rg(a), [a](Tape& t, int self) {
        Matrix ga;
        kernels::hadamard(t.g(self), t.nodes_[self].val, ga);
        t.accum(a, ga);
    });
}

Tape::Var Tape::log(Var a) {
    check(a);
    Matrix out;
    kernels::map_log(value(a), out);
    return push(std::move(out), rg(a), [a](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& va = t.value(a);
        Matrix ga(gs.rows(), gs.cols());
        for (std::size_t i = 0; i < gs.size(); ++i) ga.data()[i] = gs.data()[i] / va.data()[i];
        t.accum(a, ga);
    });
}

Tape::Var Tape::sqrt(Var a) {
    check(a);
    const Matrix& va = value(a);
    Matrix out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) out.data()[i] = std::sqrt(va.data()[i]);
    return push(std::move(out), rg(a), [a](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& vo = t.nodes_[self].val;
        Matrix ga(gs.rows(), gs.cols());
        for (std::size_t i = 0; i < gs.size(); ++i)
            ga.data()[i] = 0.5 * gs.data()[i] / vo.data()[i];
        t.accum(a, ga);
    });
}

Tape::Var Tape::relu(Var a) {
    check(a);
    const Matrix& va = value(a);
    Matrix out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) out.data()[i] = va.data()[i] > 0 ? va.data()[i] : 0;
    return push(std::move(out), rg(a), [a](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& va2 = t.value(a);
        Matrix ga(gs.rows(), gs.cols());
        for (std::size_t i = 0; i < gs.size(); ++i)
            ga.data()[i] = va2.data()[i] > 0 ? gs.data()[i] : 0.0;
        t.accum(a, ga);
    });
}

Tape::Var Tape::lgamma(Var a) {
    check(a);
    const Matrix& va = value(a);
    Matrix out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) out.data()[i] = special::lgamma(va.data()[i]);
    return push(std::move(out), rg(a), [a](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& va2 = t.value(a);
        Matrix ga(gs.rows(), gs.cols());
        for (std::size_t i = 0; i < gs.size(); ++i)
            ga.data()[i] = gs.data()[i] * special::digamma(va2.data()[i]);
        t.accum(a, ga);
    });
}

Tape::Var Tape::digamma(Var a) {
    check(a);
    const Matrix& va = value(a);
    Matrix out(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i) out.data()[i] = special::digamma(va.data()[i]);
    return push(std::move(out), rg(a), [a](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& va2 = t.value(a);
        Matrix ga(gs.rows(), gs.cols());
        for (std::size_t i = 0; i < gs.size(); ++i)
            ga.data()[i] = gs.data()[i] * special::trigamma(va2.data()[i]);
        t.accum(a, ga);
    });
}

// ---------------------------------------------------------------------------
// linear algebra

Tape::Var Tape::matmul(Var a, Var b) {
    check(a);
    check(b);
    Matrix out;
    kernels::matmul(value(a), value(b), out);
    return push(std::move(out), rg(a) || rg(b), [a, b](Tape& t, int self) {
        Matrix tmp;
        kernels::matmul_nt(t.g(self), t.value(b), tmp);  // dA = G B^T
        t.accum(a, tmp);
        kernels::matmul_tn(t.value(a), t.g(self), tmp);  // dB = A^T G
        t.accum(b, tmp);
    });
}

Tape::Var Tape::matmul_nt(Var a, Var b) {
    check(a);
    check(b);
    Matrix out;
    kernels::matmul_nt(value(a), value(b), out);
    return push(std::move(out), rg(a) || rg(b), [a, b](Tape& t, int self) {
        Matrix tmp;
        kernels::matmul(t.g(self), t.value(b), tmp);  // dA = G B
        t.accum(a, tmp);
        kernels::matmul_tn(t.g(self), t.value(a), tmp);  // dB = G^T A
        t.accum(b, tmp);
    });
}

Tape::Var Tape::matmul_tn(Var a, Var b) {
    check(a);
    check(b);
    Matrix out;
    kernels::matmul_tn(value(a), value(b), out);
    return push(std::move(out), rg(a) || rg(b), [a, b](Tape& t, int self) {
        Matrix tmp;
        kernels::matmul_nt(t.value(b), t.g(self), tmp);  // dA = B G^T
        t.accum(a, tmp);
        kernels::matmul(t.value(a), t.g(self), tmp);  // dB = A G
        t.accum(b, tmp);
    });
}

Tape::Var Tape::transpose(Var a) {
    check(a);
    const Matrix& va = value(a);
    Matrix out(va.cols(), va.rows());
    for (int i = 0; i < va.rows(); ++i)
        for (int j = 0; j < va.cols(); ++j) out(j, i) = va(i, j);
    return push(std::move(out), rg(a), [a](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        Matrix ga(gs.cols(), gs.rows());
        for (int i = 0; i < gs.rows(); ++i)
            for (int j = 0; j < gs.cols(); ++j) ga(j, i) = gs(i, j);
        t.accum(a, ga);
    });
}

// ---------------------------------------------------------------------------
// broadcasts / reductions

Tape::Var Tape::add_row_vector(Var a, Var v) {
    check(a);
    check(v);
    const Matrix& va = value(a);
    const Matrix& vv = value(v);
    assert(vv.rows() == 1 && vv.cols() == va.cols());
    Matrix out(va.rows(), va.cols());
    for (int i = 0; i < va.rows(); ++i)
        for (int j = 0; j < va.cols(); ++j) out(i, j) = va(i, j) + vv(0, j);
    return push(std::move(out), rg(a) || rg(v), [a, v](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        t.accum(a, gs);
        Matrix gv(1, gs.cols());
        for (int i = 0; i < gs.rows(); ++i)
            for (int j = 0; j < gs.cols(); ++j) gv(0, j) += gs(i, j);
        t.accum(v, gv);
    });
}

Tape::Var Tape::add_col_vector(Var a, Var v) {
    check(a);
    check(v);
    const Matrix& va = value(a);
    const Matrix& vv = value(v);
    assert(vv.cols() == 1 && vv.rows() == va.rows());
    Matrix out(va.rows(), va.cols());
    for (int i = 0; i < va.rows(); ++i)
        for (int j = 0; j < va.cols(); ++j) out(i, j) = va(i, j) + vv(i, 0);
    return push(std::move(out), rg(a) || rg(v), [a, v](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        t.accum(a, gs);
        Matrix gv(gs.rows(), 1);
        for (int i = 0; i < gs.rows(); ++i)
            for (int j = 0; j < gs.cols(); ++j) gv(i, 0) += gs(i, j);
        t.accum(v, gv);
    });
}

Tape::Var Tape::mul_row_vector(Var a, Var v) {
    check(a);
    check(v);
    const Matrix& va = value(a);
    const Matrix& vv = value(v);
    assert(vv.rows() == 1 && vv.cols() == va.cols());
    Matrix out(va.rows(), va.cols());
    for (int i = 0; i < va.rows(); ++i)
        for (int j = 0; j < va.cols(); ++j) out(i, j) = va(i, j) * vv(0, j);
    return push(std::move(out), rg(a) || rg(v), [a, v](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& va2 = t.value(a);
        const Matrix& vv2 = t.value(v);
        Matrix ga(gs.rows(), gs.cols());
        Matrix gv(1, gs.cols());
        for (int i = 0; i < gs.rows(); ++i)
            for (int j = 0; j < gs.cols(); ++j) {
                ga(i, j) = gs(i, j) * vv2(0, j);
                gv(0, j) += gs(i, j) * va2(i, j);
            }
        t.accum(a, ga);
        t.accum(v, gv);
    });
}

Tape::Var Tape::mul_col_vector(Var a, Var v) {
    check(a);
    check(v);
    const Matrix& va = value(a);
    const Matrix& vv = value(v);
    assert(vv.cols() == 1 && vv.rows() == va.rows());
    Matrix out(va.rows(), va.cols());
    for (int i = 0; i < va.rows(); ++i)
        for (int j = 0; j < va.cols(); ++j) out(i, j) = va(i, j) * vv(i, 0);
    return push(std::move(out), rg(a) || rg(v), [a, v](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& va2 = t.value(a);
        const Matrix& vv2 = t.value(v);
        Matrix ga(gs.rows(), gs.cols());
        Matrix gv(gs.rows(), 1);
        for (int i = 0; i < gs.rows(); ++i)
            for (int j = 0; j < gs.cols(); ++j) {
                ga(i, j) = gs(i, j) * vv2(i, 0);
                gv(i, 0) += gs(i, j) * va2(i, j);
            }
        t.accum(a, ga);
        t.accum(v, gv);
    });
}

Tape::Var Tape::row_sum(Var a) {
    check(a);
    const Matrix& va = value(a);
    Matrix out(va.rows(), 1);
    for (int i = 0; i < va.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < va.cols(); ++j) s += va(i, j);
        out(i, 0) = s;
    }
    return push(std::move(out), rg(a), [a](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& va2 = t.value(a);
        Matrix ga(va2.rows(), va2.cols());
        for (int i = 0; i < va2.rows(); ++i)
            for (int j = 0; j < va2.cols(); ++j) ga(i, j) = gs(i, 0);
        t.accum(a, ga);
    });
}

Tape::Var Tape::col_sum(Var a) {
    check(a);
    const Matrix& va = value(a);
    Matrix out(1, va.cols());
    for (int i = 0; i < va.rows(); ++i)
        for (int j = 0; j < va.cols(); ++j) out(0, j) += va(i, j);
    return push(std::move(out), rg(a), [a](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& va2 = t.value(a);
        Matrix ga(va2.rows(), va2.cols());
        for (int i = 0; i < va2.rows(); ++i)
            for (int j = 0; j < va2.cols(); ++j) ga(i, j) = gs(0, j);
        t.accum(a, ga);
    });
}

Tape::Var Tape::sum_all(Var a) {
    check(a);
    const Matrix& va = value(a);
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) s += va.data()[i];
    return push(Matrix(1, 1, s), rg(a), [a](Tape& t, int self) {
        const double gv = t.g(self)(0, 0);
        const Matrix& va2 = t.value(a);
        Matrix ga(va2.rows(), va2.cols(), gv);
        t.accum(a, ga);
    });
}

// ---------------------------------------------------------------------------
// structure

Tape::Var Tape::concat_rows(Var a, Var b) {
    check(a);
    check(b);
    const Matrix& va = value(a);
    const Matrix& vb = value(b);
    assert(va.cols() == vb.cols());
    Matrix out(va.rows() + vb.rows(), va.cols());
    for (int i = 0; i < va.rows(); ++i)
        for (int j = 0; j < va.cols(); ++j) out(i, j) = va(i, j);
    for (int i = 0; i < vb.rows(); ++i)
        for (int j = 0; j < vb.cols(); ++j) out(va.rows() + i, j) = vb(i, j);
    const int ra = va.rows();
    return push(std::move(out), rg(a) || rg(b), [a, b, ra](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& va2 = t.value(a);
        const Matrix& vb2 = t.value(b);
        Matrix ga(va2.rows(), va2.cols());
        Matrix gb(vb2.rows(), vb2.cols());
        for (int i = 0; i < ga.rows(); ++i)
            for (int j = 0; j < ga.cols(); ++j) ga(i, j) = gs(i, j);
        for (int i = 0; i < gb.rows(); ++i)
            for (int j = 0; j < gb.cols(); ++j) gb(i, j) = gs(ra + i, j);
        t.accum(a, ga);
        t.accum(b, gb);
    });
}

Tape::Var Tape::slice_rows(Var a, int row0, int nrows) {
    check(a);
    const Matrix& va = value(a);
    assert(row0 >= 0 && row0 + nrows <= va.rows());
    Matrix out(nrows, va.cols());
    for (int i = 0; i < nrows; ++i)
        for (int j = 0; j < va.cols(); ++j) out(i, j) = va(row0 + i, j);
    return push(std::move(out), rg(a), [a, row0, nrows](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& va2 = t.value(a);
        Matrix ga(va2.rows(), va2.cols());
        for (int i = 0; i < nrows; ++i)
            for (int j = 0; j < ga.cols(); ++j) ga(row0 + i, j) = gs(i, j);
        t.accum(a, ga);
    });
}

Tape::Var Tape::gather_rows(Var table, std::vector<int> ids) {
    check(table);
    const Matrix& vt = value(table);
    Matrix out(static_cast<int>(ids.size()), vt.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        assert(ids[i] >= 0 && ids[i] < vt.rows());
        for (int j = 0; j < vt.cols(); ++j) out(static_cast<int>(i), j) = vt(ids[i], j);
    }
    auto shared_ids = std::make_shared<std::vector<int>>(std::move(ids));
    return push(std::move(out), rg(table), [table, shared_ids](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        const Matrix& vt2 = t.value(table);
        Matrix gt(vt2.rows(), vt2.cols());
        for (std::size_t i = 0; i < shared_ids->size(); ++i)
            for (int j = 0; j < gs.cols(); ++j)
                gt((*shared_ids)[i], j) += gs(static_cast<int>(i), j);
        t.accum(table, gt);
    });
}

// ---------------------------------------------------------------------------
// neural-net blocks

Tape::Var Tape::softmax_rows(Var logits, std::vector<std::uint8_t> mask) {
    check(logits);
    Matrix out;
    const int bad = kernels::softmax_rows(value(logits), mask, out);
    if (bad >= 0)
        throw NumericalError("softmax row " + std::to_string(bad) +
                             " has no finite unmasked logits (degenerate mixture)");
    return push(std::move(out), rg(logits), [logits](Tape& t, int self) {
        // da = s .* (g - rowsum(g .* s)); masked entries have s = 0.
        const Matrix& gs = t.g(self);
        const Matrix& s = t.nodes_[self].val;
        Matrix ga(gs.rows(), gs.cols());
        for (int i = 0; i < gs.rows(); ++i) {
            double dot = 0.0;
            for (int j = 0; j < gs.cols(); ++j) dot += gs(i, j) * s(i, j);
            for (int j = 0; j < gs.cols(); ++j) ga(i, j) = s(i, j) * (gs(i, j) - dot);
        }
        t.accum(logits, ga);
    });
}

Tape::Var Tape::layer_norm_rows(Var a, Var gain, Var bias, double eps) {
    check(a);
    check(gain);
    check(bias);
    Matrix out;
    auto xhat = std::make_shared<Matrix>();
    auto istd = std::make_shared<Matrix>();
    kernels::layer_norm_rows(value(a), value(gain), value(bias), eps, out, xhat.get(), istd.get());
    return push(std::move(out), rg(a) || rg(gain) || rg(bias),
                [a, gain, bias, xhat, istd](Tape& t, int self) {
                    const Matrix& gs = t.g(self);
                    const Matrix& gn = t.value(gain);
                    const int m = gs.rows(), n = gs.cols();
                    Matrix ga(m, n);
                    Matrix ggain(1, n);
                    Matrix gbias(1, n);
                    for (int i = 0; i < m; ++i) {
                        double mg = 0.0, mgx = 0.0;
                        for (int j = 0; j < n; ++j) {
                            const double gh = gs(i, j) * gn(0, j);
                            mg += gh;
                            mgx += gh * (*xhat)(i, j);
                            ggain(0, j) += gs(i, j) * (*xhat)(i, j);
                            gbias(0, j) += gs(i, j);
                        }
                        mg /= n;
                        mgx /= n;
                        const double is = (*istd)(i, 0);
                        for (int j = 0; j < n; ++j) {
                            const double gh = gs(i, j) * gn(0, j);
                            ga(i, j) = is * (gh - mg - (*xhat)(i, j) * mgx);
                        }
                    }
                    t.accum(a, ga);
                    t.accum(gain, ggain);
                    t.accum(bias, gbias);
                });
}

Tape::Var Tape::dropout(Var a, double prob, Rng& rng) {
    check(a);
    if (prob <= 0.0) return a;
    const Matrix& va = value(a);
    const double keep = 1.0 - prob;
    auto mask = std::make_shared<Matrix>(va.rows(), va.cols());
    for (std::size_t i = 0; i < va.size(); ++i)
        mask->data()[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    Matrix out;
    kernels::hadamard(va, *mask, out);
    return push(std::move(out), rg(a), [a, mask](Tape& t, int self) {
        Matrix ga;
        kernels::hadamard(t.g(self), *mask, ga);
        t.accum(a, ga);
    });
}

Tape::Var Tape::cross_entropy_rows(Var logits, std::vector<int> targets) {
    check(logits);
    const Matrix& x = value(logits);
    const int m = x.rows(), n = x.cols();
    assert(static_cast<int>(targets.size()) == m);
    auto probs = std::make_shared<Matrix>(m, n);
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        assert(targets[i] >= 0 && targets[i] < n);
        double mx = x(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, x(i, j));
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            (*probs)(i, j) = std::exp(x(i, j) - mx);
            denom += (*probs)(i, j);
        }
        for (int j = 0; j < n; ++j) (*probs)(i, j) /= denom;
        loss += std::log(denom) + mx - x(i, targets[i]);
    }
    loss /= m;
    auto shared_targets = std::make_shared<std::vector<int>>(std::move(targets));
    return push(Matrix(1, 1, loss), rg(logits),
                [logits, probs, shared_targets, m](Tape& t, int self) {
                    const double gv = t.g(self)(0, 0);
                    Matrix ga = *probs;
                    for (int i = 0; i < ga.rows(); ++i) {
                        ga(i, (*shared_targets)[i]) -= 1.0;
                        for (int j = 0; j < ga.cols(); ++j) ga(i, j) *= gv / m;
                    }
                    t.accum(logits, ga);
                });
}

Tape::Var Tape::gamma_sample(Var alpha, Rng& rng) {
    check(alpha);
    const Matrix& va = value(alpha);
    assert(va.cols() == 1);
    const bool want_grad = rg(alpha);
    Matrix out(va.rows(), 1);
    auto dz = std::make_shared<Matrix>(va.rows(), 1);
    for (int i = 0; i < va.rows(); ++i) {
        const double a = va(i, 0);
        if (!(a > 0.0) || !std::isfinite(a))
            throw NumericalError("gamma_sample: pseudo-count " + std::to_string(i) +
                                 " is not strictly positive");
        const double u = rng.uniform_open();
        const double z = special::gamma_sample_smooth(a, u);
        if (!std::isfinite(z)) throw NumericalError("gamma_sample: sampler failure");
        out(i, 0) = z;
        if (want_grad) (*dz)(i, 0) = special::gamma_sample_dalpha(a, z);
    }
    return push(std::move(out), rg(alpha), [alpha, dz](Tape& t, int self) {
        const Matrix& gs = t.g(self);
        Matrix ga(gs.rows(), 1);
        for (int i = 0; i < gs.rows(); ++i) ga(i, 0) = gs(i, 0) * (*dz)(i, 0);
        t.accum(alpha, ga);
    });
}

}  // namespace nvib
