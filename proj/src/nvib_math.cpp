// SPDX-License-Identifier: Apache-2.0
#include "nvib/nvib_math.hpp"

#include <cassert>
#include <cmath>
#include <string>

#include "nvib/special.hpp"

namespace nvib {

DpParamsVars project_dp_params(Tape& t, Tape::Var hidden, Tape::Var log_alpha_prev,
                               const NvibProjectionVars& proj, int layer_index) {
    const int n = t.value(hidden).rows();
    const int p = t.value(hidden).cols();
    assert(t.value(log_alpha_prev).rows() == n && t.value(log_alpha_prev).cols() == 1);

    Tape::Var la = t.matmul_nt(hidden, proj.w_alpha);  // n x 1
    la = t.add_row_vector(la, proj.b_alpha);
    la = t.add(la, log_alpha_prev);  // multiplicative skip, kept in log space
    Tape::Var alpha_data = t.exp(la);
    Tape::Var mu_data = t.add_row_vector(t.matmul(hidden, proj.w_mu), proj.b_mu);
    Tape::Var sigma_data = t.exp(t.add_row_vector(t.matmul(hidden, proj.w_sigma), proj.b_sigma));

    if (!all_finite(t.value(alpha_data)) || !all_finite(t.value(mu_data)) ||
        !all_finite(t.value(sigma_data)))
        throw NumericalError("nvib layer " + std::to_string(layer_index) +
                             ": projection produced non-finite DP parameters");

    DpParamsVars out;
    out.alpha = t.concat_rows(alpha_data, t.constant(Matrix(1, 1, 1.0)));
    out.mu = t.concat_rows(mu_data, t.constant(Matrix(1, p, 0.0)));
    out.sigma = t.concat_rows(sigma_data, t.constant(Matrix(1, p, 1.0)));
    out.log_alpha = la;
    out.n = n;
    out.p = p;
    return out;
}

SampledMixtureVars sample_dp(Tape& t, const DpParamsVars& params, Rng& rng) {
    const int ncomp = params.n + 1;
    Tape::Var gamma = t.gamma_sample(params.alpha, rng);  // validates alpha > 0
    Tape::Var log_total = t.log(t.sum_all(gamma));
    SampledMixtureVars mix;
    mix.log_pi = t.add_row_vector(t.log(gamma), t.neg(log_total));

    Matrix eps(ncomp, params.p);
    for (std::size_t i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
    mix.z = t.add(params.mu, t.mul(params.sigma, t.constant(eps)));
    return mix;
}

Tape::Var denoising_attention_train(Tape& t, Tape::Var queries_raw, const SampledMixtureVars& mix,
                                    const NvibProjectionVars& proj,
                                    const std::vector<std::uint8_t>& mask, Tape::Var* attn_out) {
    assert(proj.d > 0);
    const double sd = std::sqrt(static_cast<double>(proj.d));
    Tape::Var u = t.matmul_nt(t.matmul(queries_raw, proj.w_q), proj.w_k);  // m x p
    Tape::Var logits = t.scale(t.matmul_nt(u, mix.z), 1.0 / sd);           // m x (n+1)
    Tape::Var z_sqnorm = t.row_sum(t.mul(mix.z, mix.z));                   // (n+1) x 1
    Tape::Var bias = t.sub(mix.log_pi, t.scale(z_sqnorm, 1.0 / (2.0 * sd)));
    logits = t.add_row_vector(logits, t.transpose(bias));
    Tape::Var attn = t.softmax_rows(logits, mask);
    if (attn_out) *attn_out = attn;
    return t.matmul(attn, mix.z);
}

Tape::Var denoising_attention_test(Tape& t, Tape::Var queries_raw, const DpParamsVars& params,
                                   const NvibProjectionVars& proj,
                                   const std::vector<std::uint8_t>& retained,
                                   Tape::Var* attn_out) {
    assert(proj.d > 0);
    const int ncomp = params.n + 1;
    std::vector<std::uint8_t> keep =
        retained.empty() ? std::vector<std::uint8_t>(ncomp, 1) : retained;
    assert(static_cast<int>(keep.size()) == ncomp);

    const Matrix& alpha_val = t.value(params.alpha);
    double alpha0_val = 0.0;
    for (int i = 0; i < ncomp; ++i)
        if (keep[i]) alpha0_val += alpha_val(i, 0);
    if (!(alpha0_val > 0.0))
        throw NumericalError("test-time attention: representation fully pruned (alpha_0 = 0)");

    const double sd = std::sqrt(static_cast<double>(proj.d));
    Tape::Var u = t.matmul_nt(t.matmul(queries_raw, proj.w_q), proj.w_k);  // m x p

    // alpha_safe substitutes 1 for dropped components so log() stays finite;
    // their logits are excluded by the softmax mask, so the value is inert.
    Matrix keep_col(ncomp, 1), dropped_col(ncomp, 1);
    for (int i = 0; i < ncomp; ++i) {
        keep_col(i, 0) = keep[i] ? 1.0 : 0.0;
        dropped_col(i, 0) = keep[i] ? 0.0 : 1.0;
    }
    Tape::Var keep_v = t.constant(keep_col);
    Tape::Var alpha_safe = t.add(t.mul(params.alpha, keep_v), t.constant(dropped_col));
    Tape::Var alpha0 = t.sum_all(t.mul(params.alpha, keep_v));

    Tape::Var sr2 = t.add_scalar(t.mul(params.sigma, params.sigma), sd);  // (sigma^r)^2
    Tape::Var logits = t.matmul_nt(u, t.div(params.mu, sr2));             // m x (n+1)
    Tape::Var mu_sq = t.scale(t.row_sum(t.div(t.mul(params.mu, params.mu), sr2)), 0.5);
    Tape::Var log_sr = t.scale(t.row_sum(t.log(sr2)), 0.5);  // sum_h log sigma^r
    Tape::Var bias = t.sub(t.log(alpha_safe), t.add(mu_sq, log_sr));
    bias = t.add_row_vector(bias, t.neg(t.log(alpha0)));
    logits = t.add_row_vector(logits, t.transpose(bias));
    Tape::Var attn = t.softmax_rows(logits, keep);
    if (attn_out) *attn_out = attn;

    Tape::Var w1 = t.div(t.mul(params.sigma, params.sigma), sr2);
    Tape::Var w2_mu = t.scale(t.div(params.mu, sr2), sd);
    return t.add(t.mul(t.matmul(attn, w1), u), t.matmul(attn, w2_mu));
}

Tape::Var kl_dirichlet(Tape& t, Tape::Var alpha_q0, double alpha_p0_prime) {
    const Matrix& a = t.value(alpha_q0);
    assert(a.rows() == 1 && a.cols() == 1);
    if (!(a(0, 0) > 0.0) || !(alpha_p0_prime > 0.0))
        throw NumericalError("kl_dirichlet: total pseudo-counts must be strictly positive");
    Tape::Var gap = t.add_scalar(alpha_q0, -alpha_p0_prime);
    Tape::Var res = t.add(t.mul(gap, t.digamma(alpha_q0)),
                          t.sub(t.scalar(special::lgamma(alpha_p0_prime)), t.lgamma(alpha_q0)));
    return res;
}

Tape::Var kl_gaussian(Tape& t, const DpParamsVars& params) {
    Tape::Var mu_sq = t.mul(params.mu, params.mu);
    Tape::Var sig_sq = t.mul(params.sigma, params.sigma);
    Tape::Var log_sig_sq = t.scale(t.log(params.sigma), 2.0);
    // mu^2 - 1 + sigma^2 - log sigma^2, summed over dimensions
    Tape::Var term = t.sub(t.add(mu_sq, sig_sq), t.add_scalar(log_sig_sq, 1.0));
    Tape::Var weighted = t.sum_all(t.mul(params.alpha, t.row_sum(term)));
    return t.div(t.scale(weighted, 0.5), t.sum_all(params.alpha));
}

std::vector<std::uint8_t> retained_mask(const Tape& t, const DpParamsVars& params,
                                        double threshold) {
    const Matrix& a = t.value(params.alpha);
    std::vector<std::uint8_t> keep(params.n + 1, 1);
    for (int i = 0; i < params.n; ++i) keep[i] = a(i, 0) > threshold ? 1 : 0;
    return keep;
}

std::vector<std::uint8_t> threshold_alpha(Tape& t, DpParamsVars& params, double threshold,
                                          const std::vector<std::uint8_t>* carry) {
    std::vector<std::uint8_t> keep = retained_mask(t, params, threshold);
    if (carry) {
        assert(carry->size() == keep.size());
        for (int i = 0; i < params.n; ++i) keep[i] = keep[i] && (*carry)[i];
    }
    Matrix m(params.n + 1, 1);
    for (int i = 0; i <= params.n; ++i) m(i, 0) = keep[i] ? 1.0 : 0.0;
    params.alpha = t.mul(params.alpha, t.constant(m));
    return keep;
}

}  // namespace nvib
