// SPDX-License-Identifier: Apache-2.0
#include "nvib/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "nvib/nvib_math.hpp"
#include "nvib/rng.hpp"
#include "nvib/special.hpp"

namespace nvib::gradcheck {

CheckResult check(const std::string& name, const std::vector<Matrix>& inputs, const BuildFn& f,
                  double h, double tol) {
    CheckResult res;
    res.name = name;

    // Analytic pass.
    std::vector<Matrix> grads;
    {
        Tape tape;
        std::vector<Tape::Var> vars;
        vars.reserve(inputs.size());
        for (const Matrix& m : inputs) vars.push_back(tape.leaf(m, true));
        const Tape::Var root = f(tape, vars);
        tape.backward(root);
        for (Tape::Var v : vars) {
            // Unreached leaves keep a zero gradient.
            Matrix g(tape.value(v).rows(), tape.value(v).cols());
            try {
                g = tape.grad(v);
            } catch (const std::logic_error&) {
            }
            grads.push_back(std::move(g));
        }
    }

    const auto eval = [&](const std::vector<Matrix>& xs) {
        Tape tape(false);
        std::vector<Tape::Var> vars;
        vars.reserve(xs.size());
        for (const Matrix& m : xs) vars.push_back(tape.leaf(m, false));
        return tape.value(f(tape, vars))(0, 0);
    };

    std::vector<Matrix> work = inputs;
    res.ok = true;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double x0 = inputs[k].data()[i];
            const double step = h * std::max(1.0, std::fabs(x0));
            work[k].data()[i] = x0 + step;
            const double fp = eval(work);
            work[k].data()[i] = x0 - step;
            const double fm = eval(work);
            work[k].data()[i] = x0;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = grads[k].data()[i];
            const double abs_err = std::fabs(an - fd);
            const double denom = std::max({0.01, std::fabs(an), std::fabs(fd)});
            const double rel_err = abs_err / denom;
            res.n_checked += 1;
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
            res.max_rel_err = std::max(res.max_rel_err, rel_err);
            if (!(rel_err <= tol) || !std::isfinite(abs_err)) res.ok = false;
        }
    }
    return res;
}

namespace {

Matrix rand_mat(Rng& rng, int r, int c, double lo, double hi) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = lo + (hi - lo) * rng.uniform();
    return m;
}

// Runs `instances` random cases of one composite op and folds them into a
// single result (worst errors, summed element count).
template <typename MakeCase>
CheckResult repeat_check(const std::string& name, int instances, Rng& rng, MakeCase&& make) {
    CheckResult agg;
    agg.name = name;
    agg.ok = true;
    for (int it = 0; it < instances; ++it) {
        const CheckResult r = make(rng);
        agg.n_checked += r.n_checked;
        agg.max_abs_err = std::max(agg.max_abs_err, r.max_abs_err);
        agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
        agg.ok = agg.ok && r.ok;
    }
    return agg;
}

}  // namespace

std::vector<CheckResult> run_suite(std::uint64_t seed, int nvib_instances) {
    std::vector<CheckResult> out;
    Rng rng(seed);
    const auto scalarise = [](Tape& t, Tape::Var v) {
        // Weighted sum keeps per-element sensitivity distinguishable.
        const Matrix& m = t.value(v);
        Matrix w(m.rows(), m.cols());
        for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = 0.25 + 0.1 * (i % 7);
        return t.sum_all(t.mul(v, t.constant(w)));
    };

    {
        Matrix a = rand_mat(rng, 3, 4, -2, 2), b = rand_mat(rng, 3, 4, -2, 2);
        out.push_back(check("add", {a, b}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.add(v[0], v[1]));
        }));
        out.push_back(check("sub", {a, b}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.sub(v[0], v[1]));
        }));
        out.push_back(check("mul", {a, b}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.mul(v[0], v[1]));
        }));
        Matrix bp = rand_mat(rng, 3, 4, 0.5, 2.5);
        out.push_back(check("div", {a, bp}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.div(v[0], v[1]));
        }));
        out.push_back(check("neg_scale", {a}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.scale(t.neg(v[0]), 1.7));
        }));
        out.push_back(check("add_scalar", {a}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.add_scalar(v[0], 0.37));
        }));
        out.push_back(check("exp", {a}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.exp(v[0]));
        }));
        Matrix pos = rand_mat(rng, 3, 4, 0.2, 3.0);
        out.push_back(check("log", {pos}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.log(v[0]));
        }));
        out.push_back(check("sqrt", {pos}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.sqrt(v[0]));
        }));
        // keep relu inputs away from the kink
        Matrix ar = a;
        for (std::size_t i = 0; i < ar.size(); ++i)
            if (std::fabs(ar.data()[i]) < 0.05) ar.data()[i] = 0.3;
        out.push_back(check("relu", {ar}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.relu(v[0]));
        }));
        Matrix ag = rand_mat(rng, 3, 4, 0.3, 3.0);
        out.push_back(check("lgamma", {ag}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.lgamma(v[0]));
        }));
        out.push_back(check("digamma", {ag}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.digamma(v[0]));
        }));
    }

    {
        Matrix a = rand_mat(rng, 3, 5, -1, 1), b = rand_mat(rng, 5, 4, -1, 1);
        out.push_back(check("matmul", {a, b}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.matmul(v[0], v[1]));
        }));
        Matrix bt = rand_mat(rng, 4, 5, -1, 1);
        out.push_back(check("matmul_nt", {a, bt}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.matmul_nt(v[0], v[1]));
        }));
        Matrix at = rand_mat(rng, 5, 3, -1, 1);
        out.push_back(check("matmul_tn", {at, b}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.matmul_tn(v[0], v[1]));
        }));
        out.push_back(check("transpose", {a}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.transpose(v[0]));
        }));
    }

    {
        Matrix a = rand_mat(rng, 4, 3, -1, 1);
        Matrix rv = rand_mat(rng, 1, 3, -1, 1);
        Matrix cv = rand_mat(rng, 4, 1, -1, 1);
        out.push_back(
            check("add_row_vector", {a, rv}, [&](Tape& t, const std::vector<Tape::Var>& v) {
                return scalarise(t, t.add_row_vector(v[0], v[1]));
            }));
        out.push_back(
            check("add_col_vector", {a, cv}, [&](Tape& t, const std::vector<Tape::Var>& v) {
                return scalarise(t, t.add_col_vector(v[0], v[1]));
            }));
        out.push_back(
            check("mul_row_vector", {a, rv}, [&](Tape& t, const std::vector<Tape::Var>& v) {
                return scalarise(t, t.mul_row_vector(v[0], v[1]));
            }));
        out.push_back(
            check("mul_col_vector", {a, cv}, [&](Tape& t, const std::vector<Tape::Var>& v) {
                return scalarise(t, t.mul_col_vector(v[0], v[1]));
            }));
        out.push_back(check("row_sum", {a}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.row_sum(v[0]));
        }));
        out.push_back(check("col_sum", {a}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.col_sum(v[0]));
        }));
        out.push_back(check("sum_all", {a}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return t.sum_all(v[0]);
        }));
    }

    {
        Matrix a = rand_mat(rng, 2, 3, -1, 1), b = rand_mat(rng, 3, 3, -1, 1);
        out.push_back(check("concat_rows", {a, b}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.concat_rows(v[0], v[1]));
        }));
        Matrix c = rand_mat(rng, 5, 3, -1, 1);
        out.push_back(check("slice_rows", {c}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.slice_rows(v[0], 1, 3));
        }));
        Matrix table = rand_mat(rng, 6, 3, -1, 1);
        out.push_back(check("gather_rows", {table}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return scalarise(t, t.gather_rows(v[0], {4, 0, 4, 2}));
        }));
    }

    {
        Matrix logits = rand_mat(rng, 3, 5, -2, 2);
        out.push_back(check("softmax_rows", {logits},
                            [&](Tape& t, const std::vector<Tape::Var>& v) {
                                return scalarise(t, t.softmax_rows(v[0]));
                            }));
        std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0};
        out.push_back(check("softmax_rows_masked", {logits},
                            [&](Tape& t, const std::vector<Tape::Var>& v) {
                                return scalarise(t, t.softmax_rows(v[0], mask));
                            }));
        Matrix x = rand_mat(rng, 3, 6, -2, 2);
        Matrix gain = rand_mat(rng, 1, 6, 0.5, 1.5);
        Matrix bias = rand_mat(rng, 1, 6, -0.5, 0.5);
        out.push_back(check("layer_norm_rows", {x, gain, bias},
                            [&](Tape& t, const std::vector<Tape::Var>& v) {
                                return scalarise(t, t.layer_norm_rows(v[0], v[1], v[2]));
                            }));
        out.push_back(check("cross_entropy_rows", {logits},
                            [&](Tape& t, const std::vector<Tape::Var>& v) {
                                return t.cross_entropy_rows(v[0], {4, 0, 2});
                            }));
        const std::uint64_t drop_seed = Rng::derive(seed, 101);
        out.push_back(check("dropout", {x}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            Rng r(drop_seed);
            return scalarise(t, t.dropout(v[0], 0.4, r));
        }));
    }

    {
        Matrix alpha = rand_mat(rng, 5, 1, 0.4, 3.0);
        const std::uint64_t gamma_seed = Rng::derive(seed, 202);
        // Looser tolerance: the pullback itself uses a finite difference of
        // the incomplete gamma in alpha, so agreement is to ~1e-5, not 1e-8.
        out.push_back(check(
            "gamma_sample", {alpha},
            [&](Tape& t, const std::vector<Tape::Var>& v) {
                Rng r(gamma_seed);
                return scalarise(t, t.gamma_sample(v[0], r));
            },
            1e-5, 5e-4));
    }

    // --- composite DP operations, many random instances each -------------

    out.push_back(repeat_check("project_dp_params", nvib_instances, rng, [&](Rng& r) {
        const int n = 1 + static_cast<int>(r.integer(5));
        const int p = 2 + static_cast<int>(r.integer(5));
        std::vector<Matrix> ins = {
            rand_mat(r, n, p, -1, 1),        // hidden
            rand_mat(r, n, 1, -1, 1),        // log_alpha_prev
            rand_mat(r, 1, p, -0.5, 0.5),    // w_alpha
            rand_mat(r, 1, 1, -0.5, 0.5),    // b_alpha
            rand_mat(r, p, p, -0.5, 0.5),    // w_mu
            rand_mat(r, 1, p, -0.5, 0.5),    // b_mu
            rand_mat(r, p, p, -0.3, 0.3),    // w_sigma
            rand_mat(r, 1, p, -0.5, 0.5),    // b_sigma
        };
        return check("project_dp_params", ins, [&](Tape& t, const std::vector<Tape::Var>& v) {
            NvibProjectionVars proj;
            proj.w_alpha = v[2];
            proj.b_alpha = v[3];
            proj.w_mu = v[4];
            proj.b_mu = v[5];
            proj.w_sigma = v[6];
            proj.b_sigma = v[7];
            const DpParamsVars dp = project_dp_params(t, v[0], v[1], proj, 0);
            return t.add(scalarise(t, t.concat_rows(dp.mu, dp.sigma)),
                         scalarise(t, dp.alpha));
        });
    }));

    out.push_back(repeat_check("denoising_attention_train", nvib_instances, rng, [&](Rng& r) {
        const int m = 1 + static_cast<int>(r.integer(4));
        const int n = 1 + static_cast<int>(r.integer(4));
        const int p = 2 + static_cast<int>(r.integer(4));
        const int d = 1 + static_cast<int>(r.integer(7));
        std::vector<Matrix> ins = {
            rand_mat(r, m, p, -1, 1),          // queries_raw
            rand_mat(r, n + 1, p, -1, 1),      // z
            rand_mat(r, n + 1, 1, -1.5, 0.0),  // log_pi (unnormalised is fine)
            rand_mat(r, p, d, -0.7, 0.7),      // w_q
            rand_mat(r, p, d, -0.7, 0.7),      // w_k
        };
        return check("denoising_attention_train", ins,
                     [&](Tape& t, const std::vector<Tape::Var>& v) {
                         NvibProjectionVars proj;
                         proj.w_q = v[3];
                         proj.w_k = v[4];
                         proj.d = d;
                         SampledMixtureVars mix{v[1], v[2]};
                         return scalarise(
                             t, denoising_attention_train(t, v[0], mix, proj));
                     });
    }));

    out.push_back(repeat_check("denoising_attention_test", nvib_instances, rng, [&](Rng& r) {
        const int m = 1 + static_cast<int>(r.integer(4));
        const int n = 1 + static_cast<int>(r.integer(4));
        const int p = 2 + static_cast<int>(r.integer(4));
        const int d = 1 + static_cast<int>(r.integer(7));
        std::vector<std::uint8_t> keep(n + 1, 1);
        for (int i = 0; i < n; ++i) keep[i] = r.uniform() < 0.75 ? 1 : 0;  // prior always kept
        std::vector<Matrix> ins = {
            rand_mat(r, m, p, -1, 1),        // queries_raw
            rand_mat(r, n + 1, 1, 0.3, 3),   // alpha
            rand_mat(r, n + 1, p, -1, 1),    // mu
            rand_mat(r, n + 1, p, 0.5, 2),   // sigma
            rand_mat(r, p, d, -0.7, 0.7),    // w_q
            rand_mat(r, p, d, -0.7, 0.7),    // w_k
        };
        return check("denoising_attention_test", ins,
                     [&, keep](Tape& t, const std::vector<Tape::Var>& v) {
                         NvibProjectionVars proj;
                         proj.w_q = v[4];
                         proj.w_k = v[5];
                         proj.d = d;
                         DpParamsVars dp;
                         dp.alpha = v[1];
                         dp.mu = v[2];
                         dp.sigma = v[3];
                         dp.n = n;
                         dp.p = p;
                         return scalarise(
                             t, denoising_attention_test(t, v[0], dp, proj, keep));
                     });
    }));

    out.push_back(repeat_check("kl_dirichlet", nvib_instances, rng, [&](Rng& r) {
        const double b = 0.3 + 3.7 * r.uniform();
        Matrix a = rand_mat(r, 1, 1, 0.3, 4.0);
        return check("kl_dirichlet", {a}, [&](Tape& t, const std::vector<Tape::Var>& v) {
            return kl_dirichlet(t, v[0], b);
        });
    }));

    out.push_back(repeat_check("kl_gaussian", nvib_instances, rng, [&](Rng& r) {
        const int n = 1 + static_cast<int>(r.integer(5));
        const int p = 2 + static_cast<int>(r.integer(5));
        std::vector<Matrix> ins = {
            rand_mat(r, n + 1, 1, 0.3, 3),  // alpha
            rand_mat(r, n + 1, p, -1, 1),   // mu
            rand_mat(r, n + 1, p, 0.5, 2),  // sigma
        };
        return check("kl_gaussian", ins, [&](Tape& t, const std::vector<Tape::Var>& v) {
            DpParamsVars dp;
            dp.alpha = v[0];
            dp.mu = v[1];
            dp.sigma = v[2];
            dp.n = n;
            dp.p = p;
            return kl_gaussian(t, dp);
        });
    }));

    return out;
}

std::vector<SamplingCheckResult> check_sampling_gradients(std::uint64_t seed, int n_samples) {
    // Dirichlet parameters under test; the last entry plays the prior's role
    // but nothing in the check depends on that.
    const std::vector<double> alpha = {0.8, 2.0, 1.3};
    const int k = static_cast<int>(alpha.size());
    Matrix alpha_m(k, 1);
    for (int i = 0; i < k; ++i) alpha_m(i, 0) = alpha[i];
    double alpha0 = 0.0;
    for (double a : alpha) alpha0 += a;

    enum { kSqNorm = 0, kEntropy = 1 };
    const auto build_f = [&](Tape& t, Tape::Var pi, int which) {
        if (which == kSqNorm) return t.sum_all(t.mul(pi, pi));
        return t.neg(t.sum_all(t.mul(pi, t.log(pi))));
    };
    const auto build_pi = [&](Tape& t, Tape::Var av, Rng& r) {
        Tape::Var z = t.gamma_sample(av, r);
        Tape::Var inv_total = t.div(t.scalar(1.0), t.sum_all(z));
        return t.mul_row_vector(z, inv_total);
    };

    std::vector<SamplingCheckResult> out(2);
    out[kSqNorm].name = "squared_norm";
    out[kEntropy].name = "entropy";
    // Closed forms: E[sum pi^2] = sum a_i(a_i+1) / (a0(a0+1));
    // E[-sum pi log pi] = psi(a0+1) - sum (a_i/a0) psi(a_i+1).
    for (double a : alpha)
        out[kSqNorm].closed_form_mean += a * (a + 1.0) / (alpha0 * (alpha0 + 1.0));
    out[kEntropy].closed_form_mean = special::digamma(alpha0 + 1.0);
    for (double a : alpha)
        out[kEntropy].closed_form_mean -= (a / alpha0) * special::digamma(a + 1.0);

    for (int w = 0; w < 2; ++w) {
        out[w].analytic.assign(k, 0.0);
        out[w].fd.assign(k, 0.0);
        out[w].se.assign(k, 0.0);
    }
    std::vector<std::vector<double>> fd_sq(2, std::vector<double>(k, 0.0));  // E[fd^2]
    std::vector<double> f_sum(2, 0.0), f_sq(2, 0.0);

    const double h = 1e-3;
    for (int s = 0; s < n_samples; ++s) {
        const std::uint64_t sample_seed = Rng::derive(seed, static_cast<std::uint64_t>(s));
        // Pathwise gradients, one backward per f.
        for (int w = 0; w < 2; ++w) {
            Tape t;
            Rng r(sample_seed);
            Tape::Var av = t.leaf(alpha_m, true);
            Tape::Var f = build_f(t, build_pi(t, av, r), w);
            const double fv = t.value(f)(0, 0);
            f_sum[w] += fv;
            f_sq[w] += fv * fv;
            t.backward(f);
            for (int j = 0; j < k; ++j) out[w].analytic[j] += t.grad(av)(j, 0);
        }
        // Central FD of f under common random numbers.
        for (int j = 0; j < k; ++j) {
            double fp[2], fm[2];
            for (int sgn = 0; sgn < 2; ++sgn) {
                Matrix am = alpha_m;
                am(j, 0) += sgn == 0 ? h : -h;
                Tape t(false);
                Rng r(sample_seed);
                Tape::Var pi = build_pi(t, t.leaf(am, false), r);
                for (int w = 0; w < 2; ++w)
                    (sgn == 0 ? fp : fm)[w] = t.value(build_f(t, pi, w))(0, 0);
            }
            for (int w = 0; w < 2; ++w) {
                const double g = (fp[w] - fm[w]) / (2.0 * h);
                out[w].fd[j] += g;
                fd_sq[w][j] += g * g;
            }
        }
    }

    for (int w = 0; w < 2; ++w) {
        out[w].ok = true;
        out[w].mc_mean = f_sum[w] / n_samples;
        const double fvar = f_sq[w] / n_samples - out[w].mc_mean * out[w].mc_mean;
        out[w].mean_se = std::sqrt(std::max(fvar, 0.0) / n_samples);
        if (std::fabs(out[w].mc_mean - out[w].closed_form_mean) > 3.0 * out[w].mean_se)
            out[w].ok = false;
        for (int j = 0; j < k; ++j) {
            out[w].analytic[j] /= n_samples;
            out[w].fd[j] /= n_samples;
            const double var = fd_sq[w][j] / n_samples - out[w].fd[j] * out[w].fd[j];
            out[w].se[j] = std::sqrt(std::max(var, 0.0) / n_samples);
            if (std::fabs(out[w].analytic[j] - out[w].fd[j]) > 3.0 * out[w].se[j])
                out[w].ok = false;
        }
    }
    return out;
}

}  // namespace nvib::gradcheck
