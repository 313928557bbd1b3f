#include "gllvm/families.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/erf.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/polygamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include <cmath>
#include <limits>

namespace gllvm {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178032973640562;
constexpr double kInf = std::numeric_limits<double>::infinity();

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// mu(1-mu) for mu = sigmoid(eta), stable in both tails.
inline double sigmoid_deriv(double eta) {
  const double e = std::exp(-std::fabs(eta));
  const double denom = 1.0 + e;
  return e / (denom * denom);
}

bool is_count(double y) { return y >= 0.0 && std::floor(y) == y; }

}  // namespace

double log1pexp(double x) {
  if (x > 33.0) return x;
  if (x < -37.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double logaddexp(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double hi = a > b ? a : b;
  const double lo = a > b ? b : a;
  return hi + log1pexp(lo - hi);
}

double norm_pdf(double x) { return std::exp(-0.5 * x * x - kLogSqrt2Pi); }

double norm_cdf(double x) { return 0.5 * std::erfc(-x * 0.70710678118654752440); }

double mills_lower(double t) {
  if (t >= -8.0) {
    return norm_cdf(t) / norm_pdf(t);
  }
  // Asymptotic tail series: Phi(t)/phi(t) = (-1/t) * sum_k (-1)^k (2k-1)!!/t^{2k}.
  const double inv_t2 = 1.0 / (t * t);
  double term = 1.0, sum = 1.0, prev = kInf;
  for (int k = 1; k <= 40; ++k) {
    term *= -(2.0 * k - 1.0) * inv_t2;
    if (std::fabs(term) >= prev) break;  // asymptotic truncation
    sum += term;
    prev = std::fabs(term);
    if (prev < 1e-17 * std::fabs(sum)) break;
  }
  return sum / (-t);
}

double norm_logcdf(double x) {
  if (x >= -8.0) return std::log(norm_cdf(x));
  return -0.5 * x * x - kLogSqrt2Pi + std::log(mills_lower(x));
}

double norm_quantile(double prob) {
  return -boost::math::erfc_inv(2.0 * prob) * 1.4142135623730950488;
}

void validate_support(Family family, double y) {
  switch (family) {
    case Family::GaussianIdentity:
      if (!std::isfinite(y)) throw DomainError("gaussian response must be finite");
      return;
    case Family::PoissonLog:
    case Family::NegBinomialLog:
      if (!is_count(y)) throw DomainError("count response must be a non-negative integer");
      return;
    case Family::BernoulliLogit:
    case Family::BernoulliProbit:
      if (y != 0.0 && y != 1.0) throw DomainError("bernoulli response must be 0 or 1");
      return;
    case Family::TweedieLog:
      if (!(y >= 0.0) || !std::isfinite(y)) {
        throw DomainError("tweedie response must be a non-negative real");
      }
      return;
    case Family::BetaLogit:
      if (!(y > 0.0 && y < 1.0)) {
        throw DomainError("beta response must lie strictly inside (0, 1)");
      }
      return;
  }
}

namespace {

void check_nuisance(Family family, double phi, double nu) {
  if (family_has_dispersion(family) && !(phi > 0.0)) {
    throw DomainError("dispersion phi must be positive");
  }
  if (family == Family::TweedieLog && !(nu > 1.0 && nu < 2.0)) {
    throw DomainError("tweedie power nu must lie in (1, 2)");
  }
}

FamilyEval eval_gaussian(double y, double eta, double sigma) {
  const double r = (y - eta) / sigma;
  FamilyEval ev;
  ev.logf = -kLogSqrt2Pi - std::log(sigma) - 0.5 * r * r;
  ev.d1 = r / sigma;
  ev.d2 = -1.0 / (sigma * sigma);
  ev.d3 = 0.0;
  return ev;
}

FamilyEval eval_poisson(double y, double eta) {
  const double mu = std::exp(eta);
  FamilyEval ev;
  ev.logf = y * eta - mu - std::lgamma(y + 1.0);
  ev.d1 = y - mu;
  ev.d2 = -mu;
  ev.d3 = -mu;
  return ev;
}

FamilyEval eval_negbinomial(double y, double eta, double phi) {
  // log(1 + phi*mu) and its companions, stable for any eta.
  const double log_phimu = std::log(phi) + eta;
  const double log1p_phimu = logaddexp(0.0, log_phimu);
  const double w = std::exp(-log1p_phimu);        // 1 / (1 + phi mu)
  const double r = std::exp(eta - log1p_phimu);   // mu / (1 + phi mu)
  const double inv_phi = 1.0 / phi;
  FamilyEval ev;
  ev.logf = std::lgamma(y + inv_phi) - std::lgamma(inv_phi) - std::lgamma(y + 1.0) +
            y * (log_phimu - log1p_phimu) - inv_phi * log1p_phimu;
  const double a = 1.0 + phi * y;
  ev.d1 = y - r * a;
  ev.d2 = -a * r * w;
  ev.d3 = ev.d2 * (2.0 * w - 1.0);
  return ev;
}

FamilyEval eval_bernoulli_logit(double y, double eta) {
  const double mu = sigmoid(eta);
  const double v = sigmoid_deriv(eta);  // mu (1 - mu)
  FamilyEval ev;
  ev.logf = y * eta - log1pexp(eta);
  ev.d1 = y - mu;
  ev.d2 = -v;
  ev.d3 = -v * (1.0 - 2.0 * mu);
  return ev;
}

FamilyEval eval_bernoulli_probit(double y, double eta) {
  // With t = eta for y = 1 and t = -eta for y = 0, everything reduces to the
  // lower Mills ratio R(t) = Phi(t)/phi(t):
  //   logf = log Phi(t),  d/dt logf = 1/R,  d2/dt2 = -t/R - 1/R^2.
  const double sign = y > 0.5 ? 1.0 : -1.0;
  const double t = sign * eta;
  const double R = mills_lower(t);
  const double invR = 1.0 / R;
  const double dR = 1.0 + t * R;  // R'(t)
  FamilyEval ev;
  ev.logf = norm_logcdf(t);
  ev.d1 = sign * invR;
  ev.d2 = -t * invR - invR * invR;
  const double d3_t = -invR + t * dR * invR * invR + 2.0 * dR * invR * invR * invR;
  ev.d3 = sign * d3_t;
  return ev;
}

FamilyEval eval_tweedie(double y, double eta, double phi, double nu) {
  FamilyEval ev;
  const double e2 = std::exp((2.0 - nu) * eta);
  if (y == 0.0) {
    ev.logf = -e2 / (phi * (2.0 - nu));
    ev.d1 = -e2 / phi;
    ev.d2 = -(2.0 - nu) * e2 / phi;
    ev.d3 = -(2.0 - nu) * (2.0 - nu) * e2 / phi;
    return ev;
  }
  const double e1 = std::exp((1.0 - nu) * eta);
  ev.logf = tweedie_log_w(y, phi, nu) +
            (y * e1 / (1.0 - nu) - e2 / (2.0 - nu)) / phi - std::log(y);
  ev.d1 = (y * e1 - e2) / phi;
  ev.d2 = (y * (1.0 - nu) * e1 - (2.0 - nu) * e2) / phi;
  ev.d3 = (y * (1.0 - nu) * (1.0 - nu) * e1 - (2.0 - nu) * (2.0 - nu) * e2) / phi;
  return ev;
}

FamilyEval eval_beta(double y, double eta, double phi) {
  using boost::math::digamma;
  using boost::math::trigamma;
  const double mu = sigmoid(eta);
  if (!(mu > 0.0 && mu < 1.0)) {
    // sigmoid saturated in double precision; no information left in eta.
    FamilyEval ev;
    ev.logf = -kInf;
    ev.d1 = ev.d2 = ev.d3 = -kInf;
    return ev;
  }
  const double a = mu * phi, b = (1.0 - mu) * phi;
  const double logit_y = std::log(y) - std::log1p(-y);
  const double mu1 = sigmoid_deriv(eta);            // mu'
  const double mu2 = mu1 * (1.0 - 2.0 * mu);        // mu''
  const double mu3 = mu1 * ((1.0 - 2.0 * mu) * (1.0 - 2.0 * mu) - 2.0 * mu1);
  const double S = digamma(b) - digamma(a) + logit_y;
  const double T = trigamma(a) + trigamma(b);
  const double U = boost::math::polygamma(2, a) - boost::math::polygamma(2, b);

  FamilyEval ev;
  ev.logf = std::lgamma(phi) - std::lgamma(a) - std::lgamma(b) +
            (a - 1.0) * std::log(y) + (b - 1.0) * std::log1p(-y);
  ev.d1 = phi * mu1 * S;
  ev.d2 = phi * mu2 * S - phi * phi * mu1 * mu1 * T;
  ev.d3 = phi * mu3 * S - 3.0 * phi * phi * mu1 * mu2 * T -
          phi * phi * phi * mu1 * mu1 * mu1 * U;
  return ev;
}

}  // namespace

FamilyEval family_eval(Family family, double y, double eta, double phi, double nu) {
  validate_support(family, y);
  check_nuisance(family, phi, nu);
  switch (family) {
    case Family::GaussianIdentity: return eval_gaussian(y, eta, phi);
    case Family::PoissonLog: return eval_poisson(y, eta);
    case Family::NegBinomialLog: return eval_negbinomial(y, eta, phi);
    case Family::BernoulliLogit: return eval_bernoulli_logit(y, eta);
    case Family::BernoulliProbit: return eval_bernoulli_probit(y, eta);
    case Family::TweedieLog: return eval_tweedie(y, eta, phi, nu);
    case Family::BetaLogit: return eval_beta(y, eta, phi);
  }
  throw ConfigError("unknown family");
}

double family_mean(Family family, double eta) {
  switch (family) {
    case Family::GaussianIdentity: return eta;
    case Family::PoissonLog:
    case Family::NegBinomialLog:
    case Family::TweedieLog: return std::exp(eta);
    case Family::BernoulliLogit:
    case Family::BetaLogit: return sigmoid(eta);
    case Family::BernoulliProbit: return norm_cdf(eta);
  }
  throw ConfigError("unknown family");
}

double family_variance(Family family, double eta, double phi, double nu) {
  const double mu = family_mean(family, eta);
  switch (family) {
    case Family::GaussianIdentity: return phi * phi;
    case Family::PoissonLog: return mu;
    case Family::NegBinomialLog: return mu + phi * mu * mu;
    case Family::BernoulliLogit:
    case Family::BernoulliProbit: return mu * (1.0 - mu);
    case Family::TweedieLog: return phi * std::pow(mu, nu);
    case Family::BetaLogit: return mu * (1.0 - mu) / (1.0 + phi);
  }
  throw ConfigError("unknown family");
}

DispersionDerivs family_logphi_derivs(Family family, double y, double eta,
                                      double phi, double nu) {
  DispersionDerivs out;
  if (!family_has_dispersion(family)) return out;
  const double h = 1e-6;
  const double t = std::log(phi);
  const FamilyEval hi = family_eval(family, y, eta, std::exp(t + h), nu);
  const FamilyEval lo = family_eval(family, y, eta, std::exp(t - h), nu);
  out.dlogf = (hi.logf - lo.logf) / (2.0 * h);
  out.dd1 = (hi.d1 - lo.d1) / (2.0 * h);
  out.dd2 = (hi.d2 - lo.d2) / (2.0 * h);
  return out;
}

namespace {

double tweedie_cdf_positive(double y, double mu, double phi, double nu) {
  // Atom at zero plus numeric integral of the series density over (0, y].
  const double atom = std::exp(-std::pow(mu, 2.0 - nu) / (phi * (2.0 - nu)));
  const double eta = std::log(mu);
  auto density = [&](double t) {
    return std::exp(family_eval(Family::TweedieLog, t, eta, phi, nu).logf);
  };
  boost::math::quadrature::tanh_sinh<double> integrator;
  const double integral = integrator.integrate(density, 0.0, y, 1e-9);
  return std::min(1.0, atom + integral);
}

}  // namespace

CdfPair family_cdf(Family family, double y, double eta, double phi, double nu) {
  validate_support(family, y);
  check_nuisance(family, phi, nu);
  const double mu = family_mean(family, eta);
  CdfPair out;
  switch (family) {
    case Family::GaussianIdentity:
      out.F = norm_cdf((y - mu) / phi);
      out.F_left = out.F;
      return out;
    case Family::PoissonLog:
      // P(Y <= k) = Q(k+1, mu), the regularized upper incomplete gamma.
      out.F = boost::math::gamma_q(y + 1.0, mu);
      out.F_left = y > 0.0 ? boost::math::gamma_q(y, mu) : 0.0;
      return out;
    case Family::NegBinomialLog: {
      const double r = 1.0 / phi;
      const double pr = 1.0 / (1.0 + phi * mu);
      out.F = boost::math::ibeta(r, y + 1.0, pr);
      out.F_left = y > 0.0 ? boost::math::ibeta(r, y, pr) : 0.0;
      return out;
    }
    case Family::BernoulliLogit:
    case Family::BernoulliProbit:
      out.F = y < 0.5 ? 1.0 - mu : 1.0;
      out.F_left = y < 0.5 ? 0.0 : 1.0 - mu;
      return out;
    case Family::TweedieLog: {
      const double atom = std::exp(-std::pow(mu, 2.0 - nu) / (phi * (2.0 - nu)));
      if (y == 0.0) {
        out.F = atom;
        out.F_left = 0.0;
      } else {
        out.F = tweedie_cdf_positive(y, mu, phi, nu);
        out.F_left = out.F;
      }
      return out;
    }
    case Family::BetaLogit:
      out.F = boost::math::ibeta(mu * phi, (1.0 - mu) * phi, y);
      out.F_left = out.F;
      return out;
  }
  throw ConfigError("unknown family");
}

double tweedie_log_w(double y, double phi, double nu) {
  if (!(y > 0.0)) throw DomainError("tweedie_log_w requires y > 0");
  check_nuisance(Family::TweedieLog, phi, nu);
  // term_k = z^k / (k! Gamma(k a0)) with a0 = (2-nu)/(nu-1) and the
  // mu-independent base z below; see the compound Poisson-Gamma form.
  const double a0 = (2.0 - nu) / (nu - 1.0);
  const double log_z = a0 * std::log(y) - a0 * std::log(nu - 1.0) -
                       (1.0 + a0) * std::log(phi) - std::log(2.0 - nu);
  auto log_term = [&](double k) {
    return k * log_z - std::lgamma(k + 1.0) - std::lgamma(k * a0);
  };
  // Dominant index (Dunn & Smyth 2005).
  const double k_peak = std::pow(y, 2.0 - nu) / (phi * (2.0 - nu));
  const long k0 = std::max(1L, std::lround(k_peak));

  constexpr long kMaxTerms = 1000000;
  constexpr double kRelTol = 1e-12;
  double max_log = log_term(static_cast<double>(k0));
  double sum = 1.0;  // scaled by exp(-max_log)
  long terms = 1;

  auto add = [&](double lt) {
    sum += std::exp(lt - max_log);
    ++terms;
  };
  // Expand upward, then downward, until contributions are negligible.
  const double log_tol = std::log(kRelTol);
  for (long k = k0 + 1;; ++k) {
    const double lt = log_term(static_cast<double>(k));
    if (lt - max_log < log_tol && k > k0 + 1) break;
    if (lt > max_log) {  // rescale around the new peak
      sum *= std::exp(max_log - lt);
      max_log = lt;
    }
    add(lt);
    if (terms > kMaxTerms) {
      throw NumericError("tweedie_log_w: series did not converge after 1e6 terms "
                         "(y=" + std::to_string(y) + ", phi=" + std::to_string(phi) +
                         ", nu=" + std::to_string(nu) + ")");
    }
  }
  for (long k = k0 - 1; k >= 1; --k) {
    const double lt = log_term(static_cast<double>(k));
    if (lt - max_log < log_tol) break;
    add(lt);
  }
  return max_log + std::log(sum);
}

}  // namespace gllvm
