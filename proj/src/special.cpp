// SPDX-License-Identifier: Apache-2.0
#include "nvib/special.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

namespace nvib::special {

double lgamma(double x) { return std::lgamma(x); }

double digamma(double x) { return boost::math::digamma(x); }

double trigamma(double x) { return boost::math::trigamma(x); }

double gamma_p(double a, double x) {
    if (x <= 0.0) return 0.0;
    return boost::math::gamma_p(a, x);
}

double gamma_p_inv(double a, double p) { return boost::math::gamma_p_inv(a, p); }

double gamma_p_derivative(double a, double x) {
    if (x <= 0.0) return 0.0;
    return boost::math::gamma_p_derivative(a, x);
}

double gamma_sample_smooth(double alpha, double u) {
    const double z = gamma_p_inv(alpha, u);
    // Guard against underflow to exactly zero for very small shapes; the
    // sample only ever enters logs and ratios.
    return std::max(z, std::numeric_limits<double>::min());
}

double gamma_sample_dalpha(double alpha, double z) {
    double h = 1e-4 * std::max(1.0, alpha);
    h = std::min(h, 0.5 * alpha);  // keep alpha - h positive
    const double f_hi = gamma_p(alpha + h, z);
    const double f_lo = gamma_p(alpha - h, z);
    const double dF_dalpha = (f_hi - f_lo) / (2.0 * h);
    const double density = gamma_p_derivative(alpha, z);
    if (!(density > 0.0) || !std::isfinite(density)) return 0.0;
    const double d = -dF_dalpha / density;
    return std::isfinite(d) ? d : 0.0;
}

}  // namespace nvib::special
