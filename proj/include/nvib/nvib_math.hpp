// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "nvib/matrix.hpp"
#include "nvib/rng.hpp"
#include "nvib/tape.hpp"

// Dirichlet-process machinery for denoising self-attention: projection of
// hidden states to DP parameters, sampling with reparameterised gradients,
// the train- and test-time attention forms, and both KL regularisers.
// Everything is expressed with tape variables so gradients flow end to end.
namespace nvib {

// Learned projections of one NVIB layer.
struct NvibProjectionVars {
    Tape::Var w_alpha = -1;  // 1 x p, pseudo-count head
    Tape::Var b_alpha = -1;  // 1 x 1
    Tape::Var w_mu = -1;     // p x p, mean head
    Tape::Var b_mu = -1;     // 1 x p
    Tape::Var w_sigma = -1;  // p x p, std-dev head (exponential activation)
    Tape::Var b_sigma = -1;  // 1 x p
    Tape::Var w_q = -1;      // p x d, query map
    Tape::Var w_k = -1;      // p x d, key map
    int d = 0;          // key width used for scaling
};

// DP parameters: n data components followed by the prior component, which
// is exactly (alpha=1, mu=0, sigma=1) at construction.
struct DpParamsVars {
    Tape::Var alpha = -1;      // (n+1) x 1
    Tape::Var mu = -1;         // (n+1) x p
    Tape::Var sigma = -1;      // (n+1) x p
    Tape::Var log_alpha = -1;  // n x 1, data components only; skip input for
                               // the next NVIB layer (kept in log space)
    int n = 0;
    int p = 0;
};

// One sample from the DP: per-component Gaussian draws and log Dirichlet
// weights (kappa = 1, a single draw per component).
struct SampledMixtureVars {
    Tape::Var z = -1;       // (n+1) x p
    Tape::Var log_pi = -1;  // (n+1) x 1
};

// alpha_i = exp(w.hidden_i + b + log_alpha_prev_i), the log-space
// multiplicative skip connection; mu/sigma from their affine heads; prior
// component appended. log_alpha_prev must be all zeros for the first NVIB
// layer (unit pseudo-counts below). Throws NumericalError naming
// layer_index if any head output is non-finite.
DpParamsVars project_dp_params(Tape& t, Tape::Var hidden, Tape::Var log_alpha_prev,
                               const NvibProjectionVars& proj, int layer_index);

// pi ~ Dirichlet(alpha) via normalised Gamma draws (gradients by implicit
// reparameterisation), z_i = mu_i + sigma_i * eps. Draw order: all Gamma
// variates, then the (n+1) x p normal table.
SampledMixtureVars sample_dp(Tape& t, const DpParamsVars& params, Rng& rng);

// softmax( u Z^T / sqrt(d) + log pi - |Z|^2 / (2 sqrt(d)) ) Z with
// u = queries_raw W^Q (W^K)^T. `mask` has one entry per component (1 =
// keep, empty = keep all); masked components receive weight exactly zero.
// Throws NumericalError when a query row has no component left.
Tape::Var denoising_attention_train(Tape& t, Tape::Var queries_raw, const SampledMixtureVars& mix,
                                    const NvibProjectionVars& proj,
                                    const std::vector<std::uint8_t>& mask = {},
                                    Tape::Var* attn_out = nullptr);

// Posterior-mean attention with (sigma^r)^2 = sqrt(d) + sigma^2:
//   logits  = u (mu/(sigma^r)^2)^T + log(alpha/alpha_0)
//             - 1/2 |mu/sigma^r|^2 - sum_h log sigma^r
//   output  = (A W1) . u + A (W2 . mu),  W1 = sigma^2/(sigma^r)^2,
//             W2 = sqrt(d)/(sigma^r)^2
// `retained` marks surviving components (empty = all); alpha_0 sums the
// surviving ones. Throws NumericalError when alpha_0 = 0 (fully pruned).
Tape::Var denoising_attention_test(Tape& t, Tape::Var queries_raw, const DpParamsVars& params,
                                   const NvibProjectionVars& proj,
                                   const std::vector<std::uint8_t>& retained = {},
                                   Tape::Var* attn_out = nullptr);

// KL( Gamma(alpha_q0, 1) || Gamma(alpha_p0_prime, 1) )
//   = logG(alpha_p0_prime) - logG(alpha_q0)
//     + (alpha_q0 - alpha_p0_prime) psi(alpha_q0)
// alpha_q0 is the total pseudo-count of the posterior (all n+1 components);
// the conditional prior total is alpha_p0_prime = 1 + n * alpha_delta.
// Throws NumericalError on non-positive arguments.
Tape::Var kl_dirichlet(Tape& t, Tape::Var alpha_q0, double alpha_p0_prime);

// 1/2 sum_i (alpha_i / alpha_0) sum_h ( mu_ih^2 - 1 + sigma_ih^2
//                                       - log sigma_ih^2 )
// over all n+1 components against the standard-normal prior.
Tape::Var kl_gaussian(Tape& t, const DpParamsVars& params);

// Keep mask, one entry per component (data first, prior last and always
// kept): data component i survives iff alpha_i > threshold. Pure query; no
// tape mutation.
std::vector<std::uint8_t> retained_mask(const Tape& t, const DpParamsVars& params,
                                        double threshold);

// Test-time sparsification: zeroes the pseudo-counts of data components at
// or below the threshold (prior untouched) and returns the keep mask.
// `carry` intersects drops propagated from the previous NVIB layer, the
// value-level equivalent of multiplying by an exactly-zero skip factor.
std::vector<std::uint8_t> threshold_alpha(Tape& t, DpParamsVars& params, double threshold,
                                          const std::vector<std::uint8_t>* carry = nullptr);

}  // namespace nvib
