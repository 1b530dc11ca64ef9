// SPDX-License-Identifier: Apache-2.0
#pragma once

// Special functions used by the Dirichlet/Gamma machinery. Thin wrappers so
// the rest of the code does not include Boost headers directly.
namespace nvib::special {

double lgamma(double x);
double digamma(double x);
double trigamma(double x);

// Regularised lower incomplete gamma P(a, x), its inverse in x, and the
// density dP/dx (the Gamma(a, 1) pdf).
double gamma_p(double a, double x);
double gamma_p_inv(double a, double p);
double gamma_p_derivative(double a, double x);

// Smooth inverse-CDF Gamma(alpha, 1) sampler: for a fixed uniform draw u the
// sample is a differentiable function of alpha.
double gamma_sample_smooth(double alpha, double u);

// Implicit-reparameterisation derivative d z / d alpha at a sample z drawn
// from Gamma(alpha, 1): -(dF/dalpha) / (dF/dz), with dF/dalpha estimated by
// a central finite difference of gamma_p (step 1e-4 * max(1, alpha)) and
// dF/dz the Gamma density. Returns 0 when the ratio is not finite.
double gamma_sample_dalpha(double alpha, double z);

}  // namespace nvib::special
