#include "gllvm/objectives.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "gllvm/parallel.hpp"

namespace gllvm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Entropy bracket plus the p/2 constant omitted from the usual bound; with
// this constant the bracket vanishes exactly at a = 0, A = I.
double entropy_term(const Eigen::VectorXd& a_row, const Eigen::MatrixXd& L) {
  double logdet = 0.0;
  for (int d = 0; d < L.rows(); ++d) logdet += std::log(L(d, d));
  const double tr = L.squaredNorm();
  return 0.5 * (2.0 * logdet - a_row.squaredNorm() - tr) + 0.5 * L.rows();
}

void require_va_family(Family family) {
  if (family != Family::GaussianIdentity && family != Family::PoissonLog) {
    throw ConfigError("no closed-form VA for family '" + family_name(family) +
                      "'; supported: gaussian-identity, poisson-log");
  }
}

}  // namespace

namespace detail {

bool unit_value(VariationalKind kind, const ModelSpec& spec,
                const ResponseData& data, const Parameters& params,
                const VariationalParams& varparams, int i, double& value,
                int* bad_response, double* bad_eta) {
  const int m = spec.m, p = spec.p;
  const Eigen::VectorXd a_i = varparams.a.row(i);
  const Eigen::MatrixXd& L = varparams.L[i];

  Eigen::VectorXd eta = params.beta0;
  if (spec.q > 0) eta.noalias() += params.B * data.X.row(i).transpose();
  eta.noalias() += params.Gamma * a_i;
  if (spec.row_effects) eta.array() += params.alpha[i];

  const Eigen::MatrixXd T = params.Gamma * L;  // row j = lambda_j' L
  double acc = 0.0;
  const bool poisson_va =
      kind == VariationalKind::Va && spec.family == Family::PoissonLog;
  for (int j = 0; j < m; ++j) {
    const double s = T.row(j).squaredNorm();  // lambda_j' A_i lambda_j
    const double phi = spec.has_dispersion() ? params.phi[j] : 1.0;
    double term;
    if (poisson_va) {
      // E_q[y eta - e^eta] has the closed form y*eta - exp(eta + s/2).
      term = data.Y(i, j) * eta[j] - std::exp(eta[j] + 0.5 * s) -
             std::lgamma(data.Y(i, j) + 1.0);
    } else {
      const FamilyEval ev =
          family_eval(spec.family, data.Y(i, j), eta[j], phi, params.nu);
      term = ev.logf + 0.5 * ev.d2 * s;
    }
    if (!std::isfinite(term)) {
      if (bad_response) *bad_response = j;
      if (bad_eta) *bad_eta = eta[j];
      return false;
    }
    acc += term;
  }
  value = acc + entropy_term(a_i, L);
  return std::isfinite(value);
}

bool unit_gradient(VariationalKind kind, const ParamLayout& layout,
                   const ResponseData& data, const Parameters& params,
                   const VariationalParams& varparams, int i,
                   Eigen::Ref<Eigen::VectorXd> psi_grad,
                   Eigen::Ref<Eigen::VectorXd> xi_grad) {
  const ModelSpec& spec = layout.spec;
  const int m = spec.m, p = spec.p, q = spec.q;
  const Eigen::VectorXd a_i = varparams.a.row(i);
  const Eigen::MatrixXd& L = varparams.L[i];

  Eigen::VectorXd eta = params.beta0;
  if (q > 0) eta.noalias() += params.B * data.X.row(i).transpose();
  eta.noalias() += params.Gamma * a_i;
  if (spec.row_effects) eta.array() += params.alpha[i];

  const Eigen::MatrixXd T = params.Gamma * L;
  Eigen::VectorXd g(m), c(m), phi_term;
  const bool with_phi = spec.has_dispersion();
  if (with_phi) phi_term.resize(m);

  const bool poisson_va =
      kind == VariationalKind::Va && spec.family == Family::PoissonLog;
  for (int j = 0; j < m; ++j) {
    const double s = T.row(j).squaredNorm();
    const double phi = with_phi ? params.phi[j] : 1.0;
    if (poisson_va) {
      const double M = std::exp(eta[j] + 0.5 * s);
      g[j] = data.Y(i, j) - M;
      c[j] = -M;
    } else {
      const FamilyEval ev =
          family_eval(spec.family, data.Y(i, j), eta[j], phi, params.nu);
      g[j] = ev.d1 + 0.5 * ev.d3 * s;
      c[j] = ev.d2;
      if (with_phi) {
        const DispersionDerivs dd =
            family_logphi_derivs(spec.family, data.Y(i, j), eta[j], phi, params.nu);
        phi_term[j] = dd.dlogf + 0.5 * dd.dd2 * s;
      }
    }
    if (!std::isfinite(g[j]) || !std::isfinite(c[j])) return false;
  }

  // Model-parameter block.
  psi_grad.segment(layout.off_beta0, m) += g;
  for (int k = 0; k < q; ++k) {
    psi_grad.segment(layout.off_B + k * m, m) += g * data.X(i, k);
  }
  // dl/dGamma = g a_i' + diag(c) T L'.
  Eigen::MatrixXd gamma_grad = g * a_i.transpose();
  gamma_grad.noalias() += c.asDiagonal() * T * L.transpose();
  int idx = layout.off_gamma;
  for (int k = 0; k < p; ++k) {
    psi_grad[idx++] += gamma_grad(k, k) * params.Gamma(k, k);  // log-diag chain
    for (int j = k + 1; j < m; ++j) psi_grad[idx++] += gamma_grad(j, k);
  }
  if (with_phi) psi_grad.segment(layout.off_phi, m) += phi_term;
  if (spec.row_effects && i > 0) psi_grad[layout.off_alpha + i - 1] += g.sum();

  // Variational block (owned by this unit).
  xi_grad.head(p) = params.Gamma.transpose() * g - a_i;
  // dl/dL = Gamma' diag(c) T + diag(1/L_dd) - L.
  Eigen::MatrixXd L_grad = params.Gamma.transpose() * (c.asDiagonal() * T);
  L_grad -= L;
  for (int d = 0; d < p; ++d) L_grad(d, d) += 1.0 / L(d, d);
  int z = p;
  if (layout.a_structure == CovStructure::Full) {
    for (int col = 0; col < p; ++col) {
      xi_grad[z++] = L_grad(col, col) * L(col, col);
      for (int r = col + 1; r < p; ++r) xi_grad[z++] = L_grad(r, col);
    }
  } else {
    for (int d = 0; d < p; ++d) xi_grad[z++] = L_grad(d, d) * L(d, d);
  }
  return xi_grad.allFinite() && psi_grad.allFinite();
}

}  // namespace detail

namespace {

ObjectiveValue variational_objective(detail::VariationalKind kind,
                                     const ModelSpec& spec,
                                     const ResponseData& data,
                                     const Parameters& params,
                                     const VariationalParams& varparams) {
  spec.validate();
  validate_data(spec, data);
  validate_parameters(spec, params);
  validate_varparams(spec, varparams);

  ObjectiveValue out;
  out.per_unit.resize(spec.n);
  std::vector<int> bad_j(spec.n, -1);
  std::vector<double> bad_eta(spec.n, 0.0);
  std::vector<char> ok(spec.n, 1);
  parallel_for(spec.n, [&](int i) {
    double v = 0.0;
    ok[i] = detail::unit_value(kind, spec, data, params, varparams, i, v,
                               &bad_j[i], &bad_eta[i]);
    out.per_unit[i] = v;
  }, 8);
  for (int i = 0; i < spec.n; ++i) {
    if (!ok[i]) {
      throw NumericError("objective evaluation is non-finite", i, bad_j[i],
                         bad_eta[i]);
    }
  }
  out.value = pairwise_sum(out.per_unit.data(), spec.n);
  return out;
}

Eigen::VectorXd variational_gradient(detail::VariationalKind kind,
                                     const ModelSpec& spec,
                                     const ResponseData& data,
                                     const Parameters& params,
                                     const VariationalParams& varparams,
                                     CovStructure a_structure) {
  spec.validate();
  validate_data(spec, data);
  validate_parameters(spec, params);
  validate_varparams(spec, varparams);

  const ParamLayout layout = ParamLayout::make(spec, a_structure, true);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(layout.dim());
  // Per-unit psi contributions are reduced over a fixed tree so the result
  // does not depend on the thread count.
  Eigen::MatrixXd psi_buf = Eigen::MatrixXd::Zero(layout.dim_psi, spec.n);
  std::vector<char> ok(spec.n, 1);
  const int per_xi = layout.per_unit_xi();
  parallel_for(spec.n, [&](int i) {
    Eigen::VectorXd xi(per_xi);
    ok[i] = detail::unit_gradient(kind, layout, data, params, varparams, i,
                                  psi_buf.col(i), xi);
    grad.segment(layout.unit_offset(i), per_xi) = xi;
  }, 8);
  for (int i = 0; i < spec.n; ++i) {
    if (!ok[i]) throw NumericError("gradient evaluation is non-finite", i, -1, 0.0);
  }
  for (int k = 0; k < layout.dim_psi; ++k) {
    Eigen::VectorXd row = psi_buf.row(k);
    grad[k] = pairwise_sum(row.data(), spec.n);
  }
  return grad;
}

}  // namespace

ObjectiveValue eva_objective(const ModelSpec& spec, const ResponseData& data,
                             const Parameters& params,
                             const VariationalParams& varparams) {
  return variational_objective(detail::VariationalKind::Eva, spec, data, params,
                               varparams);
}

Eigen::VectorXd eva_gradient(const ModelSpec& spec, const ResponseData& data,
                             const Parameters& params,
                             const VariationalParams& varparams,
                             CovStructure a_structure) {
  return variational_gradient(detail::VariationalKind::Eva, spec, data, params,
                              varparams, a_structure);
}

ObjectiveValue va_objective(const ModelSpec& spec, const ResponseData& data,
                            const Parameters& params,
                            const VariationalParams& varparams) {
  require_va_family(spec.family);
  return variational_objective(detail::VariationalKind::Va, spec, data, params,
                               varparams);
}

Eigen::VectorXd va_gradient(const ModelSpec& spec, const ResponseData& data,
                            const Parameters& params,
                            const VariationalParams& varparams,
                            CovStructure a_structure) {
  require_va_family(spec.family);
  return variational_gradient(detail::VariationalKind::Va, spec, data, params,
                              varparams, a_structure);
}

}  // namespace gllvm
