#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "gllvm/errors.hpp"

namespace gllvm {

enum class Family {
  GaussianIdentity,
  PoissonLog,
  NegBinomialLog,
  BernoulliLogit,
  BernoulliProbit,
  TweedieLog,
  BetaLogit,
};

/// Canonical CLI/file spelling of a family ("gaussian-identity", ...).
std::string family_name(Family f);
Family family_from_name(const std::string& name);

/// True when the family carries a per-response dispersion parameter.
bool family_has_dispersion(Family f);

/// Model shape: family, dimensions, and fixed options.
struct ModelSpec {
  Family family = Family::GaussianIdentity;
  int n = 0;  ///< observational units
  int m = 0;  ///< responses
  int p = 1;  ///< latent variables
  int q = 0;  ///< covariates
  bool row_effects = false;
  double tweedie_power = 1.5;  ///< nu in (1,2); used only by tweedie-log

  bool has_dispersion() const { return family_has_dispersion(family); }

  /// Throws ConfigError/DomainError when any invariant is broken.
  void validate() const;
};

/// Observed responses and covariates. No missing entries are allowed.
struct ResponseData {
  Eigen::MatrixXd Y;  ///< n x m
  Eigen::MatrixXd X;  ///< n x q (0 columns when q = 0)
};

/// All model parameters. Gamma is m x p with zero strict upper triangle and
/// positive diagonal on its first p rows; phi is positive where present;
/// alpha, when present, has alpha[0] fixed to zero (reference cell).
struct Parameters {
  Eigen::VectorXd beta0;  ///< m intercepts
  Eigen::MatrixXd B;      ///< m x q slopes (row j = beta_j)
  Eigen::MatrixXd Gamma;  ///< m x p loadings
  Eigen::VectorXd phi;    ///< m dispersions, or empty
  Eigen::VectorXd alpha;  ///< n fixed row effects, or empty
  double nu = 1.5;        ///< tweedie power (fixed in v1)
};

/// Per-unit variational parameters: means a_i and Cholesky factors L_i with
/// positive diagonal, so A_i = L_i L_i^T is symmetric positive definite.
struct VariationalParams {
  Eigen::MatrixXd a;               ///< n x p means
  std::vector<Eigen::MatrixXd> L;  ///< n lower-triangular p x p factors

  Eigen::MatrixXd cov(int i) const { return L[i] * L[i].transpose(); }
};

enum class CovStructure { Full, Diagonal };

/// Flat layout of the free (unconstrained) optimization variables.
///
/// Order: [beta0 | vec(B) column-major | Gamma free entries column-major
/// with log diagonal | log phi (if any) | alpha_2..alpha_n (if any) |
/// a row-major | per-unit Cholesky column-major with log diagonal].
/// Setting include_variational = false drops the last two blocks (used for
/// objectives without variational parameters).
struct ParamLayout {
  ModelSpec spec;
  CovStructure a_structure = CovStructure::Full;
  bool include_variational = true;

  int off_beta0 = 0, off_B = 0, off_gamma = 0, off_phi = 0, off_alpha = 0;
  int off_a = 0, off_L = 0;
  int dim_psi = 0;    ///< model-parameter block length
  int dim_total = 0;  ///< full vector length
  int per_unit_L = 0; ///< packed Cholesky entries per unit

  static ParamLayout make(const ModelSpec& spec,
                          CovStructure a_structure = CovStructure::Full,
                          bool include_variational = true);

  int dim() const { return dim_total; }
  int gamma_free_count() const;

  /// Offset of unit i's variational block [a_i | L_i] inside theta.
  int unit_offset(int i) const { return off_a + i * (spec.p + per_unit_L); }
  int per_unit_xi() const { return spec.p + per_unit_L; }

  Eigen::VectorXd pack(const Parameters& params,
                       const VariationalParams& varparams) const;
  void unpack(const Eigen::VectorXd& theta, Parameters& params,
              VariationalParams& varparams) const;

  /// Human-readable name of coordinate k ("beta0[2]", "Gamma[3,1]", ...).
  std::string coord_name(int k) const;
};

/// Validates that params satisfies every structural invariant for spec.
void validate_parameters(const ModelSpec& spec, const Parameters& params);
void validate_varparams(const ModelSpec& spec, const VariationalParams& vp);
void validate_data(const ModelSpec& spec, const ResponseData& data);

/// eta_ij = alpha_i + beta0_j + x_i' beta_j + a_i' lambda_j, as an n x m
/// matrix. `a` may be the variational means or any score matrix.
Eigen::MatrixXd linear_predictor(const ModelSpec& spec, const Parameters& params,
                                 const Eigen::MatrixXd& X,
                                 const Eigen::MatrixXd& a);

/// Sigma = Gamma Gamma^T, the m x m residual covariance on the link scale.
Eigen::MatrixXd residual_covariance(const Parameters& params);

}  // namespace gllvm
