// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nvib/matrix.hpp"
#include "nvib/tape.hpp"

namespace nvib::gradcheck {

// Builds a scalar expression from leaf variables. Called repeatedly with
// fresh tapes, so any randomness inside must be replayed identically
// (take an Rng seeded outside and reconstruct it per call).
using BuildFn = std::function<Tape::Var(Tape&, const std::vector<Tape::Var>&)>;

struct CheckResult {
    std::string name;
    int n_checked = 0;
    double max_abs_err = 0.0;
    // max over elements of |analytic - fd| / max(floor, |analytic|, |fd|)
    double max_rel_err = 0.0;
    bool ok = false;
};

// Central-difference certification of reverse-mode gradients. Every element
// of every input is perturbed by +-h * max(1, |x|); the check passes when
// |analytic - fd| <= tol * max(0.01, |analytic|, |fd|) everywhere.
CheckResult check(const std::string& name, const std::vector<Matrix>& inputs, const BuildFn& f,
                  double h = 1e-5, double tol = 1e-4);

// Certification suite covering every differentiable tape operation and the
// composite DP operations (projection, both attention forms, both KL
// terms), the latter over `nvib_instances` random instances each.
// Deterministic given the seed.
std::vector<CheckResult> run_suite(std::uint64_t seed, int nvib_instances = 100);

// Monte-Carlo certification of the implicit-reparameterisation gradient:
// d/dalpha E[f(pi)] estimated pathwise must match a central finite
// difference of the Monte-Carlo expectation under common random numbers,
// within 3 standard errors per coordinate, for f = squared norm and
// f = entropy. The sample mean of f is also compared against the
// closed-form Dirichlet expectation as an independent oracle.
struct SamplingCheckResult {
    std::string name;
    std::vector<double> analytic;  // pathwise estimate of dE/dalpha_j
    std::vector<double> fd;        // central FD of the MC expectation
    std::vector<double> se;        // standard error of the FD estimate
    double mc_mean = 0.0;
    double closed_form_mean = 0.0;
    double mean_se = 0.0;
    bool ok = false;
};

std::vector<SamplingCheckResult> check_sampling_gradients(std::uint64_t seed, int n_samples);

}  // namespace nvib::gradcheck
