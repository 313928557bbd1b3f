#include <cmath>
#include <limits>
#include <vector>

#include "gllvm/objectives.hpp"
#include "gllvm/parallel.hpp"
#include "gllvm/rng.hpp"

namespace gllvm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kInf = std::numeric_limits<double>::infinity();

// log of the joint density of unit i: sum_j log f(y_ij | eta(u)) + log N(u; 0, I).
double joint_logdensity(const ModelSpec& spec, const ResponseData& data,
                        const Parameters& params, int i,
                        const Eigen::VectorXd& base, const Eigen::VectorXd& u) {
  const Eigen::VectorXd eta = base + params.Gamma * u;
  double acc = -0.5 * u.squaredNorm() - 0.5 * spec.p * kLog2Pi;
  for (int j = 0; j < spec.m; ++j) {
    const double phi = spec.has_dispersion() ? params.phi[j] : 1.0;
    acc += family_eval(spec.family, data.Y(i, j), eta[j], phi, params.nu).logf;
    if (!std::isfinite(acc)) return -kInf;
  }
  return acc;
}

Eigen::VectorXd unit_base(const ModelSpec& spec, const ResponseData& data,
                          const Parameters& params, int i) {
  Eigen::VectorXd base = params.beta0;
  if (spec.q > 0) base.noalias() += params.B * data.X.row(i).transpose();
  if (spec.row_effects) base.array() += params.alpha[i];
  return base;
}

double logsumexp_acc(const std::vector<double>& v) {
  double hi = -kInf;
  for (double x : v) hi = std::max(hi, x);
  if (hi == -kInf) return -kInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - hi);
  return hi + std::log(s);
}

double aghq_unit(const ModelSpec& spec, const ResponseData& data,
                 const Parameters& params, int i, const Eigen::VectorXd& nodes,
                 const Eigen::VectorXd& log_weights) {
  const LaplaceOptions opts;
  const detail::InnerMode mode =
      detail::solve_inner_mode(spec, data, params, i, opts, nullptr);
  if (!mode.ok) throw ConvergenceError("aghq: inner mode search failed", i);
  const Eigen::MatrixXd cov = mode.neg_hess.ldlt().solve(
      Eigen::MatrixXd::Identity(spec.p, spec.p));
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) {
    throw NumericError("aghq: mode curvature is not positive definite", i, -1, 0.0);
  }
  const Eigen::MatrixXd Lc = llt.matrixL();
  double logdet = 0.0;
  for (int d = 0; d < spec.p; ++d) logdet += std::log(Lc(d, d));

  const Eigen::VectorXd base = unit_base(spec, data, params, i);
  const int nq = static_cast<int>(nodes.size());
  const double sqrt2 = 1.4142135623730950488;
  std::vector<double> terms;
  if (spec.p == 1) {
    terms.reserve(nq);
    Eigen::VectorXd u(1);
    for (int k = 0; k < nq; ++k) {
      u[0] = mode.u[0] + sqrt2 * Lc(0, 0) * nodes[k];
      terms.push_back(log_weights[k] + nodes[k] * nodes[k] +
                      joint_logdensity(spec, data, params, i, base, u));
    }
  } else {  // p == 2, tensor rule in lexicographic order
    terms.reserve(nq * nq);
    Eigen::VectorXd z(2), u(2);
    for (int k1 = 0; k1 < nq; ++k1) {
      for (int k2 = 0; k2 < nq; ++k2) {
        z << nodes[k1], nodes[k2];
        u = mode.u + sqrt2 * (Lc * z);
        terms.push_back(log_weights[k1] + log_weights[k2] + z.squaredNorm() +
                        joint_logdensity(spec, data, params, i, base, u));
      }
    }
  }
  return 0.5 * spec.p * std::log(2.0) + logdet + logsumexp_acc(terms);
}

struct McUnit {
  double log_integral = -kInf;
  double se = 0.0;
};

McUnit mc_unit(const ModelSpec& spec, const ResponseData& data,
               const Parameters& params, int i, const OracleSettings& settings) {
  Rng rng(settings.seed, 0x6D63u, static_cast<std::uint64_t>(i));
  const long pairs = std::max(1L, settings.draws / 2);
  const Eigen::VectorXd base = unit_base(spec, data, params, i);
  std::vector<double> logs(2 * pairs);
  Eigen::VectorXd u(spec.p);
  for (long k = 0; k < pairs; ++k) {
    for (int d = 0; d < spec.p; ++d) u[d] = rng.normal();
    // Antithetic pair; the prior factor cancels against the sampler.
    Eigen::VectorXd eta = base + params.Gamma * u;
    double acc = 0.0;
    for (int j = 0; j < spec.m; ++j) {
      const double phi = spec.has_dispersion() ? params.phi[j] : 1.0;
      acc += family_eval(spec.family, data.Y(i, j), eta[j], phi, params.nu).logf;
    }
    logs[2 * k] = acc;
    eta = base - params.Gamma * u;
    acc = 0.0;
    for (int j = 0; j < spec.m; ++j) {
      const double phi = spec.has_dispersion() ? params.phi[j] : 1.0;
      acc += family_eval(spec.family, data.Y(i, j), eta[j], phi, params.nu).logf;
    }
    logs[2 * k + 1] = acc;
  }
  double hi = -kInf;
  for (double x : logs) hi = std::max(hi, x);
  McUnit out;
  if (hi == -kInf) return out;
  // Scaled weights; pair means feed the delta-method standard error of the log.
  double sum = 0.0;
  for (double x : logs) sum += std::exp(x - hi);
  const double mean_w = sum / static_cast<double>(logs.size());
  double ssq = 0.0;
  for (long k = 0; k < pairs; ++k) {
    const double t =
        0.5 * (std::exp(logs[2 * k] - hi) + std::exp(logs[2 * k + 1] - hi));
    ssq += (t - mean_w) * (t - mean_w);
  }
  const double var_pairs = pairs > 1 ? ssq / (pairs * (pairs - 1.0)) : 0.0;
  out.log_integral = hi + std::log(mean_w);
  out.se = std::sqrt(var_pairs) / mean_w;
  return out;
}

}  // namespace

namespace detail {

void gauss_hermite(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights) {
  // Golub-Welsch on the Hermite Jacobi matrix (weight exp(-x^2)).
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    const double b = std::sqrt(0.5 * k);
    J(k, k - 1) = b;
    J(k - 1, k) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  nodes = es.eigenvalues();
  weights.resize(n);
  const double sqrt_pi = 1.7724538509055160273;
  for (int k = 0; k < n; ++k) {
    const double v = es.eigenvectors()(0, k);
    weights[k] = sqrt_pi * v * v;
  }
}

}  // namespace detail

OracleValue oracle_marginal(const ModelSpec& spec, const ResponseData& data,
                            const Parameters& params, OracleMethod method,
                            const OracleSettings& settings) {
  spec.validate();
  validate_data(spec, data);
  validate_parameters(spec, params);
  OracleValue out;
  out.per_unit.resize(spec.n);

  if (method == OracleMethod::Aghq) {
    if (spec.p > 2) {
      throw ConfigError("aghq oracle supports p <= 2; use the mc oracle");
    }
    Eigen::VectorXd nodes, weights;
    detail::gauss_hermite(settings.nodes, nodes, weights);
    const Eigen::VectorXd log_weights = weights.array().log();
    parallel_for(spec.n, [&](int i) {
      out.per_unit[i] = aghq_unit(spec, data, params, i, nodes, log_weights);
    }, 2);
    out.value = pairwise_sum(out.per_unit.data(), spec.n);
    out.se = 0.0;
    return out;
  }

  std::vector<double> ses(spec.n, 0.0);
  parallel_for(spec.n, [&](int i) {
    const McUnit u = mc_unit(spec, data, params, i, settings);
    out.per_unit[i] = u.log_integral;
    ses[i] = u.se;
  }, 1);
  out.value = pairwise_sum(out.per_unit.data(), spec.n);
  double var = 0.0;
  for (double s : ses) var += s * s;
  out.se = std::sqrt(var);
  return out;
}

}  // namespace gllvm
