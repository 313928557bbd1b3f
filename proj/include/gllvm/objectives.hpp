#pragma once

#include <optional>

#include "gllvm/families.hpp"
#include "gllvm/model.hpp"

namespace gllvm {

/// An approximate marginal log-likelihood with per-unit contributions.
/// value equals the pairwise sum of per_unit by construction.
struct ObjectiveValue {
  double value = 0.0;
  Eigen::VectorXd per_unit;
};

/// Extended variational objective: per unit i,
///   sum_j log f(y_ij | eta_ij) + 1/2 sum_j d2_ij lambda_j' A_i lambda_j
///   + 1/2 (log det A_i - a_i'a_i - tr A_i) + p/2.
/// All additive constants are retained so the value is directly comparable
/// to the other objectives; the Gaussian case equals the exact marginal at
/// the optimal variational parameters.
ObjectiveValue eva_objective(const ModelSpec& spec, const ResponseData& data,
                             const Parameters& params,
                             const VariationalParams& varparams);

/// Analytic gradient of eva_objective, aligned with the packed layout
/// (dispersion coordinates use finite differences in log phi by design).
Eigen::VectorXd eva_gradient(const ModelSpec& spec, const ResponseData& data,
                             const Parameters& params,
                             const VariationalParams& varparams,
                             CovStructure a_structure = CovStructure::Full);

/// Exact variational lower bound. Closed forms exist for gaussian-identity
/// (where it coincides with EVA) and poisson-log only; other families throw
/// ConfigError("no closed-form VA ...").
ObjectiveValue va_objective(const ModelSpec& spec, const ResponseData& data,
                            const Parameters& params,
                            const VariationalParams& varparams);

Eigen::VectorXd va_gradient(const ModelSpec& spec, const ResponseData& data,
                            const Parameters& params,
                            const VariationalParams& varparams,
                            CovStructure a_structure = CovStructure::Full);

struct LaplaceOptions {
  int max_iter = 100;
  double grad_tol = 1e-8;
  int max_halvings = 50;
};

/// Laplace approximation: per unit, the inner mode
///   u_hat = argmax_u { sum_j log f(y_ij | u) - u'u/2 }
/// is found by damped Newton, and the contribution is
///   sum_j log f(y_ij | u_hat) - u_hat'u_hat/2 - 1/2 log det(I - H(u_hat)).
/// Throws ConvergenceError naming the unit if the inner solve fails.
ObjectiveValue laplace_objective(const ModelSpec& spec, const ResponseData& data,
                                 const Parameters& params,
                                 const LaplaceOptions& options = {});

/// Analytic gradient of the Laplace objective over the model-parameter
/// block (layout with include_variational = false). Uses the implicit
/// function theorem for the dependence of the inner modes on parameters.
Eigen::VectorXd laplace_gradient(const ModelSpec& spec, const ResponseData& data,
                                 const Parameters& params,
                                 const LaplaceOptions& options = {});

/// Predicted inner modes and curvatures from a Laplace evaluation:
/// scores u_hat (n x p) and per-unit covariances (I - H)^{-1}.
struct LaplaceModes {
  Eigen::MatrixXd scores;
  std::vector<Eigen::MatrixXd> cov;
};
LaplaceModes laplace_modes(const ModelSpec& spec, const ResponseData& data,
                           const Parameters& params,
                           const LaplaceOptions& options = {});

enum class OracleMethod { Aghq, Mc };

struct OracleSettings {
  int nodes = 21;          ///< quadrature nodes per dimension (aghq)
  long draws = 100000;     ///< Monte Carlo draws per unit (mc), antithetic
  std::uint64_t seed = 0;  ///< mc stream seed; unit i uses stream (seed, i)
};

struct OracleValue {
  double value = 0.0;
  Eigen::VectorXd per_unit;
  double se = 0.0;  ///< standard error of value (mc only; 0 for aghq)
};

/// Reference evaluation of the exact marginal log-likelihood. aghq is a
/// tensor adaptive Gauss-Hermite rule centered at the Laplace mode and
/// curvature (deterministic, p <= 2); mc is antithetic Monte Carlo with a
/// per-unit counter-based stream and a reported standard error.
OracleValue oracle_marginal(const ModelSpec& spec, const ResponseData& data,
                            const Parameters& params, OracleMethod method,
                            const OracleSettings& settings = {});

namespace detail {

/// Non-throwing per-unit inner mode solve shared by Laplace and aghq.
struct InnerMode {
  Eigen::VectorXd u;       ///< mode
  Eigen::MatrixXd neg_hess;///< I - H at the mode
  bool ok = false;
  int iterations = 0;
};
InnerMode solve_inner_mode(const ModelSpec& spec, const ResponseData& data,
                           const Parameters& params, int unit,
                           const LaplaceOptions& options,
                           const Eigen::VectorXd* warm_start);

/// Gauss-Hermite nodes/weights for weight exp(-x^2) via Golub-Welsch.
void gauss_hermite(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights);

enum class VariationalKind { Eva, Va };

/// Non-throwing unit evaluation; returns false on non-finite terms and
/// records the offending response index and predictor for diagnostics.
bool unit_value(VariationalKind kind, const ModelSpec& spec,
                const ResponseData& data, const Parameters& params,
                const VariationalParams& varparams, int unit, double& value,
                int* bad_response = nullptr, double* bad_eta = nullptr);

/// Unit contribution to the gradient. psi_grad must be sized dim_psi and is
/// accumulated into; xi_grad must be sized p + per_unit_L and is overwritten.
bool unit_gradient(VariationalKind kind, const ParamLayout& layout,
                   const ResponseData& data, const Parameters& params,
                   const VariationalParams& varparams, int unit,
                   Eigen::Ref<Eigen::VectorXd> psi_grad,
                   Eigen::Ref<Eigen::VectorXd> xi_grad);

}  // namespace detail

}  // namespace gllvm
