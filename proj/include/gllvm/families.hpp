#pragma once

#include <cmath>

#include "gllvm/model.hpp"

namespace gllvm {

/// Log conditional density and its first three derivatives in the linear
/// predictor eta. d2 is the curvature multiplier of lambda_j lambda_j^T in
/// the per-response Hessian with respect to the latent scores; d3 feeds the
/// analytic gradients of the curvature term.
struct FamilyEval {
  double logf = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
  double d3 = 0.0;
};

/// Evaluate log f(y | eta, phi, nu) and eta-derivatives for one observation.
/// Throws DomainError when y is outside the family support or phi/nu are
/// invalid. Extreme eta may drive logf to -inf; NaN is never returned
/// silently (overflow-prone expressions use log1p/expm1-style identities).
FamilyEval family_eval(Family family, double y, double eta, double phi = 1.0,
                       double nu = 1.5);

/// Checks that y lies in the family support; throws DomainError otherwise.
void validate_support(Family family, double y);

/// CDF F(y | eta, phi, nu) and its left limit F(y-). The two coincide for
/// continuous families; the Tweedie has an atom at zero.
struct CdfPair {
  double F = 0.0;
  double F_left = 0.0;
};
CdfPair family_cdf(Family family, double y, double eta, double phi = 1.0,
                   double nu = 1.5);

/// Family-implied conditional mean and variance at eta.
double family_mean(Family family, double eta);
double family_variance(Family family, double eta, double phi, double nu);

/// Central finite differences of (logf, d1, d2) with respect to log phi at
/// fixed eta. Dispersion derivatives are obtained numerically by design;
/// the eta-derivatives above stay analytic.
struct DispersionDerivs {
  double dlogf = 0.0;
  double dd1 = 0.0;
  double dd2 = 0.0;
};
DispersionDerivs family_logphi_derivs(Family family, double y, double eta,
                                      double phi, double nu = 1.5);

/// log of the Tweedie series normalizer W(y, phi, nu) for y > 0. The sum is
/// located at its dominant index and extended in both directions until the
/// relative contribution drops below 1e-12 (in log space). Throws
/// NumericError with diagnostics if 1e6 terms do not suffice.
double tweedie_log_w(double y, double phi, double nu);

// Numerically safe scalar helpers shared across the library.
double log1pexp(double x);
double logaddexp(double a, double b);
double norm_pdf(double x);
double norm_cdf(double x);
double norm_logcdf(double x);
double norm_quantile(double prob);
/// Lower Mills ratio Phi(t)/phi(t); asymptotic series for t < -8.
double mills_lower(double t);

}  // namespace gllvm
