#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "gllvm/optimizer.hpp"

namespace gllvm {

/// Observed information I = -Hessian of the fitted objective, stored in its
/// natural block structure: the model-parameter block P, the cross block C
/// (model x variational) and one small block per unit (the variational part
/// is block diagonal across units because the objective is separable).
/// All second derivatives come from central finite differences of the
/// analytic gradient with per-coordinate step 1e-5 (1 + |theta|).
struct ObservedInformation {
  ParamLayout layout;
  Eigen::MatrixXd psi_block;
  Eigen::MatrixXd cross;                    ///< dim_psi x (n * per_unit_xi); empty for Laplace fits
  std::vector<Eigen::MatrixXd> unit_blocks; ///< per-unit xi blocks; empty for Laplace fits
  Eigen::MatrixXd psi_inv;                  ///< model-parameter block of the full inverse
  bool psi_inv_psd = true;
  double condition = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> notes;

  /// Dense assembly of the full matrix (model block first, then units).
  Eigen::MatrixXd full() const;
};

/// Computes the observed information of the fit's own objective at the
/// estimates. Singular or indefinite information falls back to a
/// pseudo-inverse and records a note; it never fails silently.
ObservedInformation observed_information(const FitResult& fit,
                                         const ResponseData& data,
                                         bool with_condition = false);

/// Conditional mean squared errors of prediction for the latent scores:
/// CMSEP_i = A_i + Q_i IpsiInv Q_i' with Q_i built from the a_i blocks of
/// the information. Requires a variational fit. Results are projected onto
/// the PSD cone (eigenvalue floor 0) with a note when needed.
std::vector<Eigen::MatrixXd> cmsep(const FitResult& fit, const ResponseData& data,
                                   const ObservedInformation& info,
                                   std::vector<std::string>* notes = nullptr);

struct ParamEstimate {
  std::string name;
  double estimate = 0.0;
  double se = 0.0;        ///< natural scale (delta method for log-scale coords)
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  bool log_scale = false; ///< interval built on the log scale and mapped back
};

struct InferenceReport {
  std::vector<ParamEstimate> estimates;
  double info_condition = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> notes;
};

/// Wald estimates and level-confidence intervals for the model parameters.
InferenceReport wald(const FitResult& fit, const ObservedInformation& info,
                     double level = 0.95);

/// Randomized quantile residuals r = Phi^{-1}(c), c ~ Unif(F(y-), F(y)).
/// Continuous families are deterministic; discrete/atomic families use one
/// stream per (seed, i, j). CDF values are clamped to [1e-12, 1 - 1e-12].
Eigen::MatrixXd dunn_smyth_residuals(const FitResult& fit,
                                     const ResponseData& data,
                                     std::uint64_t seed);

/// 1 - tr(Sigma_cov) / tr(Sigma_null) for two fits of the same family and p
/// on the same responses.
double variance_explained(const FitResult& fit_null, const FitResult& fit_cov);

struct OrdinationOutput {
  Eigen::MatrixXd scores;                  ///< n x p predicted latent means
  Eigen::MatrixXd loadings;                ///< m x p
  std::vector<Eigen::MatrixXd> region_cov; ///< n prediction-region covariances
  double ellipse_radius2 = 0.0;            ///< chi-square(p) 0.95 quantile
  std::vector<std::string> notes;
};

/// Ordination exports. With a variational fit and an information matrix the
/// prediction regions use CMSEP; otherwise they fall back to the fitted
/// covariances A_i with a note.
OrdinationOutput ordination(const FitResult& fit, const ResponseData& data,
                            const ObservedInformation* info);

/// Central finite differences of a gradient field; symmetrized. Step for
/// coordinate k is rel_step * (1 + |theta_k|).
Eigen::MatrixXd fd_hessian_of_gradient(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& grad_fn,
    const Eigen::VectorXd& theta, double rel_step = 1e-5);

}  // namespace gllvm
