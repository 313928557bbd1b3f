#include "gllvm/model.hpp"

#include <cmath>

namespace gllvm {

std::string family_name(Family f) {
  switch (f) {
    case Family::GaussianIdentity: return "gaussian-identity";
    case Family::PoissonLog: return "poisson-log";
    case Family::NegBinomialLog: return "negbinomial-log";
    case Family::BernoulliLogit: return "bernoulli-logit";
    case Family::BernoulliProbit: return "bernoulli-probit";
    case Family::TweedieLog: return "tweedie-log";
    case Family::BetaLogit: return "beta-logit";
  }
  throw ConfigError("unknown family enum value");
}

Family family_from_name(const std::string& name) {
  if (name == "gaussian-identity") return Family::GaussianIdentity;
  if (name == "poisson-log") return Family::PoissonLog;
  if (name == "negbinomial-log") return Family::NegBinomialLog;
  if (name == "bernoulli-logit") return Family::BernoulliLogit;
  if (name == "bernoulli-probit") return Family::BernoulliProbit;
  if (name == "tweedie-log") return Family::TweedieLog;
  if (name == "beta-logit") return Family::BetaLogit;
  throw ConfigError(
      "unknown family '" + name +
      "'; expected one of gaussian-identity, poisson-log, negbinomial-log, "
      "bernoulli-logit, bernoulli-probit, tweedie-log, beta-logit");
}

bool family_has_dispersion(Family f) {
  switch (f) {
    case Family::PoissonLog:
    case Family::BernoulliLogit:
    case Family::BernoulliProbit:
      return false;
    default:
      return true;
  }
}

void ModelSpec::validate() const {
  if (n <= 0) throw ConfigError("ModelSpec: n must be positive");
  if (m <= 0) throw ConfigError("ModelSpec: m must be positive");
  if (p < 1) throw ConfigError("ModelSpec: p must be at least 1");
  if (q < 0) throw ConfigError("ModelSpec: q must be non-negative");
  if (p > m) throw ConfigError("ModelSpec: p must not exceed m");
  if (family == Family::TweedieLog &&
      !(tweedie_power > 1.0 && tweedie_power < 2.0)) {
    throw DomainError("ModelSpec: tweedie power must lie in (1, 2)");
  }
}

namespace {

void check_finite(const Eigen::Ref<const Eigen::MatrixXd>& M, const char* name) {
  if (!M.allFinite()) {
    throw NumericError(std::string("non-finite entries in ") + name);
  }
}

}  // namespace

void validate_parameters(const ModelSpec& spec, const Parameters& params) {
  if (params.beta0.size() != spec.m) throw DimensionError("Parameters: beta0 must have length m");
  if (params.B.rows() != spec.m || params.B.cols() != spec.q) {
    throw DimensionError("Parameters: B must be m x q");
  }
  if (params.Gamma.rows() != spec.m || params.Gamma.cols() != spec.p) {
    throw DimensionError("Parameters: Gamma must be m x p");
  }
  check_finite(params.beta0, "beta0");
  check_finite(params.B, "B");
  check_finite(params.Gamma, "Gamma");
  for (int k = 0; k < spec.p; ++k) {
    if (!(params.Gamma(k, k) > 0.0)) {
      throw DomainError("Parameters: Gamma diagonal must be positive");
    }
    for (int j = 0; j < k; ++j) {
      if (params.Gamma(j, k) != 0.0) {
        throw DomainError("Parameters: Gamma strict upper triangle must be zero");
      }
    }
  }
  if (spec.has_dispersion()) {
    if (params.phi.size() != spec.m) throw DimensionError("Parameters: phi must have length m");
    check_finite(params.phi, "phi");
    if (!(params.phi.array() > 0.0).all()) {
      throw DomainError("Parameters: all dispersions must be positive");
    }
  } else if (params.phi.size() != 0) {
    throw DimensionError("Parameters: phi must be empty for this family");
  }
  if (spec.row_effects) {
    if (params.alpha.size() != spec.n) throw DimensionError("Parameters: alpha must have length n");
    check_finite(params.alpha, "alpha");
    if (params.alpha[0] != 0.0) {
      throw DomainError("Parameters: alpha[0] is the reference cell and must be zero");
    }
  } else if (params.alpha.size() != 0) {
    throw DimensionError("Parameters: alpha must be empty without row effects");
  }
}

void validate_varparams(const ModelSpec& spec, const VariationalParams& vp) {
  if (vp.a.rows() != spec.n || vp.a.cols() != spec.p) {
    throw DimensionError("VariationalParams: a must be n x p");
  }
  check_finite(vp.a, "a");
  if (static_cast<int>(vp.L.size()) != spec.n) {
    throw DimensionError("VariationalParams: need one Cholesky factor per unit");
  }
  for (int i = 0; i < spec.n; ++i) {
    const auto& L = vp.L[i];
    if (L.rows() != spec.p || L.cols() != spec.p) {
      throw DimensionError("VariationalParams: L factors must be p x p");
    }
    check_finite(L, "L");
    for (int c = 0; c < spec.p; ++c) {
      if (!(L(c, c) > 0.0)) {
        throw DomainError("VariationalParams: Cholesky diagonals must be positive");
      }
      for (int r = 0; r < c; ++r) {
        if (L(r, c) != 0.0) {
          throw DomainError("VariationalParams: L factors must be lower triangular");
        }
      }
    }
  }
}

void validate_data(const ModelSpec& spec, const ResponseData& data) {
  if (data.Y.rows() != spec.n || data.Y.cols() != spec.m) {
    throw DimensionError("ResponseData: Y must be n x m (got " +
                         std::to_string(data.Y.rows()) + " x " +
                         std::to_string(data.Y.cols()) + ")");
  }
  if (data.X.rows() != spec.n && spec.q > 0) {
    throw DimensionError("ResponseData: X must have n rows");
  }
  if (data.X.cols() != spec.q) {
    throw DimensionError("ResponseData: X must have q columns (got " +
                         std::to_string(data.X.cols()) + ", expected " +
                         std::to_string(spec.q) + ")");
  }
  if (!data.Y.allFinite()) throw DomainError("ResponseData: Y contains missing or non-finite entries");
  if (spec.q > 0 && !data.X.allFinite()) {
    throw DomainError("ResponseData: X contains missing or non-finite entries");
  }
}

ParamLayout ParamLayout::make(const ModelSpec& spec, CovStructure a_structure,
                              bool include_variational) {
  spec.validate();
  ParamLayout lay;
  lay.spec = spec;
  lay.a_structure = a_structure;
  lay.include_variational = include_variational;

  const int m = spec.m, p = spec.p, q = spec.q, n = spec.n;
  int off = 0;
  lay.off_beta0 = off;
  off += m;
  lay.off_B = off;
  off += m * q;
  lay.off_gamma = off;
  off += lay.gamma_free_count();
  lay.off_phi = off;
  if (spec.has_dispersion()) off += m;
  lay.off_alpha = off;
  if (spec.row_effects) off += n - 1;
  lay.dim_psi = off;

  lay.per_unit_L = a_structure == CovStructure::Full ? p * (p + 1) / 2 : p;
  lay.off_a = off;
  if (include_variational) off += n * (p + lay.per_unit_L);
  lay.off_L = lay.off_a + p;  // within-unit offset convention; see unit_offset
  lay.dim_total = off;
  return lay;
}

int ParamLayout::gamma_free_count() const {
  return spec.m * spec.p - spec.p * (spec.p - 1) / 2;
}

Eigen::VectorXd ParamLayout::pack(const Parameters& params,
                                  const VariationalParams& varparams) const {
  validate_parameters(spec, params);
  if (include_variational) validate_varparams(spec, varparams);

  Eigen::VectorXd theta(dim_total);
  const int m = spec.m, p = spec.p, q = spec.q, n = spec.n;

  theta.segment(off_beta0, m) = params.beta0;
  for (int k = 0; k < q; ++k) {
    theta.segment(off_B + k * m, m) = params.B.col(k);
  }
  int idx = off_gamma;
  for (int k = 0; k < p; ++k) {
    theta[idx++] = std::log(params.Gamma(k, k));
    for (int j = k + 1; j < m; ++j) theta[idx++] = params.Gamma(j, k);
  }
  if (spec.has_dispersion()) {
    theta.segment(off_phi, m) = params.phi.array().log();
  }
  if (spec.row_effects) {
    theta.segment(off_alpha, n - 1) = params.alpha.tail(n - 1);
  }
  if (include_variational) {
    for (int i = 0; i < n; ++i) {
      const int base = unit_offset(i);
      theta.segment(base, p) = varparams.a.row(i);
      int z = base + p;
      const auto& L = varparams.L[i];
      if (a_structure == CovStructure::Full) {
        for (int c = 0; c < p; ++c) {
          theta[z++] = std::log(L(c, c));
          for (int r = c + 1; r < p; ++r) theta[z++] = L(r, c);
        }
      } else {
        for (int d = 0; d < p; ++d) {
          theta[z++] = std::log(L(d, d));
          for (int r = d + 1; r < p; ++r) {
            if (L(r, d) != 0.0) {
              throw DomainError(
                  "pack: diagonal covariance structure requires diagonal L factors");
            }
          }
        }
      }
    }
  }
  if (!theta.allFinite()) throw NumericError("pack: produced non-finite entries");
  return theta;
}

void ParamLayout::unpack(const Eigen::VectorXd& theta, Parameters& params,
                         VariationalParams& varparams) const {
  if (theta.size() != dim_total) {
    throw DimensionError("unpack: theta has length " + std::to_string(theta.size()) +
                         ", layout expects " + std::to_string(dim_total));
  }
  if (!theta.allFinite()) throw NumericError("unpack: theta contains non-finite entries");

  const int m = spec.m, p = spec.p, q = spec.q, n = spec.n;
  params.beta0 = theta.segment(off_beta0, m);
  params.B.resize(m, q);
  for (int k = 0; k < q; ++k) params.B.col(k) = theta.segment(off_B + k * m, m);
  params.Gamma = Eigen::MatrixXd::Zero(m, p);
  int idx = off_gamma;
  for (int k = 0; k < p; ++k) {
    params.Gamma(k, k) = std::exp(theta[idx++]);
    for (int j = k + 1; j < m; ++j) params.Gamma(j, k) = theta[idx++];
  }
  if (spec.has_dispersion()) {
    params.phi = theta.segment(off_phi, m).array().exp();
  } else {
    params.phi.resize(0);
  }
  if (spec.row_effects) {
    params.alpha.resize(n);
    params.alpha[0] = 0.0;
    params.alpha.tail(n - 1) = theta.segment(off_alpha, n - 1);
  } else {
    params.alpha.resize(0);
  }
  params.nu = spec.tweedie_power;

  if (include_variational) {
    varparams.a.resize(n, p);
    varparams.L.assign(n, Eigen::MatrixXd::Zero(p, p));
    for (int i = 0; i < n; ++i) {
      const int base = unit_offset(i);
      varparams.a.row(i) = theta.segment(base, p);
      int z = base + p;
      auto& L = varparams.L[i];
      if (a_structure == CovStructure::Full) {
        for (int c = 0; c < p; ++c) {
          L(c, c) = std::exp(theta[z++]);
          for (int r = c + 1; r < p; ++r) L(r, c) = theta[z++];
        }
      } else {
        for (int d = 0; d < p; ++d) L(d, d) = std::exp(theta[z++]);
      }
    }
  } else {
    varparams.a.resize(0, 0);
    varparams.L.clear();
  }
}

std::string ParamLayout::coord_name(int k) const {
  const int m = spec.m, p = spec.p;
  if (k < 0 || k >= dim_total) throw DimensionError("coord_name: index out of range");
  if (k < off_B) return "beta0[" + std::to_string(k - off_beta0) + "]";
  if (k < off_gamma) {
    const int rel = k - off_B;
    return "B[" + std::to_string(rel % m) + "," + std::to_string(rel / m) + "]";
  }
  if (k < off_phi) {
    int rel = k - off_gamma;
    for (int c = 0; c < p; ++c) {
      const int len = m - c;
      if (rel < len) {
        const int row = c + rel;
        return std::string(row == c ? "log " : "") + "Gamma[" + std::to_string(row) +
               "," + std::to_string(c) + "]";
      }
      rel -= len;
    }
  }
  if (k < off_alpha) return "log phi[" + std::to_string(k - off_phi) + "]";
  if (k < off_a) return "alpha[" + std::to_string(k - off_alpha + 1) + "]";
  const int per = per_unit_xi();
  const int unit = (k - off_a) / per;
  const int rel = (k - off_a) % per;
  if (rel < p) return "a[" + std::to_string(unit) + "," + std::to_string(rel) + "]";
  return "L[" + std::to_string(unit) + "][" + std::to_string(rel - p) + "]";
}

Eigen::MatrixXd linear_predictor(const ModelSpec& spec, const Parameters& params,
                                 const Eigen::MatrixXd& X,
                                 const Eigen::MatrixXd& a) {
  validate_parameters(spec, params);
  if (X.cols() != spec.q) {
    throw DimensionError("linear_predictor: X must have q columns");
  }
  if (spec.q > 0 && X.rows() != spec.n) {
    throw DimensionError("linear_predictor: X must have n rows");
  }
  if (a.rows() != spec.n || a.cols() != spec.p) {
    throw DimensionError("linear_predictor: score matrix a must be n x p");
  }
  Eigen::MatrixXd eta = a * params.Gamma.transpose();
  eta.rowwise() += params.beta0.transpose();
  if (spec.q > 0) eta.noalias() += X * params.B.transpose();
  if (spec.row_effects) eta.colwise() += params.alpha;
  return eta;
}

Eigen::MatrixXd residual_covariance(const Parameters& params) {
  return params.Gamma * params.Gamma.transpose();
}

}  // namespace gllvm
