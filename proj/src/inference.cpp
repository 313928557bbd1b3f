#include "gllvm/inference.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>

#include "gllvm/parallel.hpp"
#include "gllvm/rng.hpp"

namespace gllvm {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& M) {
  return 0.5 * (M + M.transpose());
}

// Inverse with a pseudo-inverse fallback for (near-)singular symmetric
// matrices. Returns whether the matrix was PD and, through min_eig, how
// indefinite it was.
Eigen::MatrixXd robust_sym_inverse(const Eigen::MatrixXd& M, bool& pd,
                                   double& min_eig) {
  Eigen::LLT<Eigen::MatrixXd> llt(symmetrize(M));
  if (llt.info() == Eigen::Success) {
    pd = true;
    min_eig = kNan;
    return llt.solve(Eigen::MatrixXd::Identity(M.rows(), M.cols()));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(M));
  const Eigen::VectorXd& ev = es.eigenvalues();
  min_eig = ev.minCoeff();
  const double floor = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  Eigen::VectorXd inv_ev(ev.size());
  for (int k = 0; k < ev.size(); ++k) {
    inv_ev[k] = std::fabs(ev[k]) > floor ? 1.0 / ev[k] : 0.0;
  }
  pd = false;
  return es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

Eigen::MatrixXd fd_hessian_of_gradient(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& grad_fn,
    const Eigen::VectorXd& theta, double rel_step) {
  const int d = static_cast<int>(theta.size());
  Eigen::MatrixXd H(d, d);
  Eigen::VectorXd t = theta;
  for (int k = 0; k < d; ++k) {
    const double h = rel_step * (1.0 + std::fabs(theta[k]));
    t[k] = theta[k] + h;
    const Eigen::VectorXd up = grad_fn(t);
    t[k] = theta[k] - h;
    const Eigen::VectorXd dn = grad_fn(t);
    t[k] = theta[k];
    H.col(k) = (up - dn) / (2.0 * h);
  }
  return symmetrize(H);
}

Eigen::MatrixXd ObservedInformation::full() const {
  const int d_psi = static_cast<int>(psi_block.rows());
  const int n_units = static_cast<int>(unit_blocks.size());
  const int per = n_units > 0 ? static_cast<int>(unit_blocks[0].rows()) : 0;
  const int d = d_psi + n_units * per;
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(d, d);
  M.topLeftCorner(d_psi, d_psi) = psi_block;
  for (int i = 0; i < n_units; ++i) {
    const int off = d_psi + i * per;
    M.block(off, off, per, per) = unit_blocks[i];
    M.block(0, off, d_psi, per) = cross.middleCols(i * per, per);
    M.block(off, 0, per, d_psi) = cross.middleCols(i * per, per).transpose();
  }
  return M;
}

ObservedInformation observed_information(const FitResult& fit,
                                         const ResponseData& data,
                                         bool with_condition) {
  const ModelSpec& spec = fit.spec;
  ObservedInformation info;
  info.notes = {};

  const bool variational = fit.method != Method::Laplace;
  info.layout = ParamLayout::make(spec, fit.a_structure, variational);
  const ParamLayout& layout = info.layout;
  const double step = 1e-5;

  if (!variational) {
    // Model-parameter block only: FD of the analytic Laplace gradient.
    VariationalParams dummy;
    const Eigen::VectorXd theta = layout.pack(fit.params, dummy);
    auto grad_fn = [&](const Eigen::VectorXd& t) {
      Parameters p;
      VariationalParams v;
      layout.unpack(t, p, v);
      return Eigen::VectorXd(-laplace_gradient(spec, data, p));
    };
    info.psi_block = fd_hessian_of_gradient(grad_fn, theta, step);
    bool pd = true;
    double min_eig = kNan;
    info.psi_inv = robust_sym_inverse(info.psi_block, pd, min_eig);
    info.psi_inv_psd = pd || min_eig > -1e-10;
    if (!pd) {
      info.notes.push_back("information not positive definite; pseudo-inverse used");
    }
    if (with_condition) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(info.psi_block,
                                                        Eigen::EigenvaluesOnly);
      info.condition = es.eigenvalues().cwiseAbs().maxCoeff() /
                       std::max(es.eigenvalues().cwiseAbs().minCoeff(), 1e-300);
    }
    return info;
  }

  const detail::VariationalKind kind = fit.method == Method::Eva
                                           ? detail::VariationalKind::Eva
                                           : detail::VariationalKind::Va;
  const Eigen::VectorXd theta = layout.pack(fit.params, fit.varparams);
  const int d_psi = layout.dim_psi;
  const int per = layout.per_unit_xi();
  const int n = spec.n;

  auto full_gradient = [&](const Eigen::VectorXd& t) {
    Parameters p;
    VariationalParams v;
    layout.unpack(t, p, v);
    if (fit.method == Method::Eva) {
      return Eigen::VectorXd(-eva_gradient(spec, data, p, v, fit.a_structure));
    }
    return Eigen::VectorXd(-va_gradient(spec, data, p, v, fit.a_structure));
  };

  // Psi columns from full-gradient differences.
  Eigen::MatrixXd psi_cols(layout.dim(), d_psi);
  {
    Eigen::VectorXd t = theta;
    for (int k = 0; k < d_psi; ++k) {
      const double h = step * (1.0 + std::fabs(theta[k]));
      t[k] = theta[k] + h;
      const Eigen::VectorXd up = full_gradient(t);
      t[k] = theta[k] - h;
      const Eigen::VectorXd dn = full_gradient(t);
      t[k] = theta[k];
      psi_cols.col(k) = (up - dn) / (2.0 * h);
    }
  }

  // Unit columns: perturbing a coordinate of unit i only changes unit i's
  // contribution, so only that unit's restricted gradient is recomputed.
  Parameters params0;
  VariationalParams vp0;
  layout.unpack(theta, params0, vp0);
  info.cross.resize(d_psi, n * per);
  info.unit_blocks.assign(n, Eigen::MatrixXd(per, per));

  parallel_for(n, [&](int i) {
    VariationalParams vp_local = vp0;  // worker-local mutable copy
    Eigen::VectorXd psi_up(d_psi), psi_dn(d_psi), xi_up(per), xi_dn(per);
    Eigen::VectorXd unit_theta = theta.segment(layout.unit_offset(i), per);
    for (int z = 0; z < per; ++z) {
      const double base = unit_theta[z];
      const double h = step * (1.0 + std::fabs(base));
      auto eval_at = [&](double v, Eigen::VectorXd& psi_out, Eigen::VectorXd& xi_out) {
        unit_theta[z] = v;
        // Rebuild this unit's variational slice from the perturbed block.
        vp_local.a.row(i) = unit_theta.head(spec.p);
        Eigen::MatrixXd& L = vp_local.L[i];
        L.setZero();
        int w = spec.p;
        if (layout.a_structure == CovStructure::Full) {
          for (int c = 0; c < spec.p; ++c) {
            L(c, c) = std::exp(unit_theta[w++]);
            for (int r = c + 1; r < spec.p; ++r) L(r, c) = unit_theta[w++];
          }
        } else {
          for (int dd = 0; dd < spec.p; ++dd) L(dd, dd) = std::exp(unit_theta[w++]);
        }
        psi_out.setZero();
        detail::unit_gradient(kind, layout, data, params0, vp_local, i, psi_out,
                              xi_out);
        psi_out = -psi_out;
        xi_out = -xi_out;
      };
      eval_at(base + h, psi_up, xi_up);
      eval_at(base - h, psi_dn, xi_dn);
      unit_theta[z] = base;
      info.cross.col(i * per + z) = (psi_up - psi_dn) / (2.0 * h);
      info.unit_blocks[i].col(z) = (xi_up - xi_dn) / (2.0 * h);
    }
  }, 4);

  // Average the two cross estimates and symmetrize the diagonal blocks.
  info.psi_block = symmetrize(psi_cols.topRows(d_psi));
  for (int i = 0; i < n; ++i) {
    info.unit_blocks[i] = symmetrize(info.unit_blocks[i]);
    info.cross.middleCols(i * per, per) =
        0.5 * (info.cross.middleCols(i * per, per) +
               psi_cols.middleRows(layout.unit_offset(i), per).transpose());
  }

  // Schur complement S = P - sum_i C_i D_i^{-1} C_i'.
  Eigen::MatrixXd S = info.psi_block;
  bool any_unit_singular = false;
  for (int i = 0; i < n; ++i) {
    bool pd = true;
    double min_eig = kNan;
    const Eigen::MatrixXd Dinv = robust_sym_inverse(info.unit_blocks[i], pd, min_eig);
    if (!pd) any_unit_singular = true;
    const Eigen::MatrixXd Ci = info.cross.middleCols(i * per, per);
    S.noalias() -= Ci * Dinv * Ci.transpose();
  }
  if (any_unit_singular) {
    info.notes.push_back("variational information blocks singular for some units");
  }
  bool pd = true;
  double min_eig = kNan;
  info.psi_inv = robust_sym_inverse(S, pd, min_eig);
  info.psi_inv_psd = pd || min_eig > -1e-8 * std::max(1.0, S.cwiseAbs().maxCoeff());
  if (!pd) {
    info.notes.push_back("information not positive definite; pseudo-inverse used");
  }

  if (with_condition) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(info.full(),
                                                      Eigen::EigenvaluesOnly);
    info.condition = es.eigenvalues().cwiseAbs().maxCoeff() /
                     std::max(es.eigenvalues().cwiseAbs().minCoeff(), 1e-300);
  }
  return info;
}

std::vector<Eigen::MatrixXd> cmsep(const FitResult& fit, const ResponseData& data,
                                   const ObservedInformation& info,
                                   std::vector<std::string>* notes) {
  (void)data;
  if (fit.method == Method::Laplace) {
    throw ConfigError("cmsep requires a variational fit (eva or va)");
  }
  const ModelSpec& spec = fit.spec;
  const int p = spec.p;
  const int per = info.layout.per_unit_xi();
  std::vector<Eigen::MatrixXd> out(spec.n);
  bool floored = false;
  for (int i = 0; i < spec.n; ++i) {
    const Eigen::MatrixXd A = fit.varparams.cov(i);
    // a_i rows of the unit block and of the cross block.
    const Eigen::MatrixXd Iaa = info.unit_blocks[i].topLeftCorner(p, p);
    const Eigen::MatrixXd IaPsi =
        info.cross.middleCols(i * per, per).leftCols(p).transpose();
    bool pd = true;
    double min_eig = kNan;
    const Eigen::MatrixXd Iaa_inv = robust_sym_inverse(Iaa, pd, min_eig);
    const Eigen::MatrixXd Q = Iaa_inv * IaPsi;  // p x dim_psi
    Eigen::MatrixXd C = A + Q * info.psi_inv * Q.transpose();
    C = symmetrize(C);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    if (es.eigenvalues().minCoeff() < 0.0) {
      floored = true;
      Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
      C = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    }
    out[i] = C;
  }
  if (floored && notes) {
    notes->push_back("cmsep: projected non-PSD prediction covariances to the PSD cone");
  }
  return out;
}

InferenceReport wald(const FitResult& fit, const ObservedInformation& info,
                     double level) {
  if (!(level > 0.0 && level < 1.0)) {
    throw ConfigError("wald: level must lie in (0,1)");
  }
  const double z = norm_quantile(0.5 + 0.5 * level);
  const ModelSpec& spec = fit.spec;
  const ParamLayout& layout = info.layout;
  InferenceReport report;
  report.notes = info.notes;
  report.info_condition = info.condition;

  const Eigen::VectorXd se_packed = info.psi_inv.diagonal().cwiseMax(0.0).cwiseSqrt();
  bool bad_se = (info.psi_inv.diagonal().array() < 0.0).any();
  if (bad_se) {
    report.notes.push_back("negative variance estimates encountered; affected "
                           "standard errors reported as nan");
  }

  auto packed_se = [&](int k) {
    return info.psi_inv(k, k) < 0.0 ? kNan : se_packed[k];
  };
  auto natural = [&](const std::string& name, double est, int k) {
    ParamEstimate e;
    e.name = name;
    e.estimate = est;
    e.se = packed_se(k);
    e.ci_lower = est - z * e.se;
    e.ci_upper = est + z * e.se;
    report.estimates.push_back(e);
  };
  auto log_scale = [&](const std::string& name, double est, int k) {
    ParamEstimate e;
    e.name = name;
    e.estimate = est;
    e.log_scale = true;
    const double s = packed_se(k);
    e.se = est * s;  // delta method
    e.ci_lower = est * std::exp(-z * s);
    e.ci_upper = est * std::exp(z * s);
    report.estimates.push_back(e);
  };

  const int m = spec.m, p = spec.p, q = spec.q;
  for (int j = 0; j < m; ++j) {
    natural("beta0[" + std::to_string(j) + "]", fit.params.beta0[j],
            layout.off_beta0 + j);
  }
  for (int k = 0; k < q; ++k) {
    for (int j = 0; j < m; ++j) {
      natural("B[" + std::to_string(j) + "," + std::to_string(k) + "]",
              fit.params.B(j, k), layout.off_B + k * m + j);
    }
  }
  int idx = layout.off_gamma;
  for (int k = 0; k < p; ++k) {
    log_scale("Gamma[" + std::to_string(k) + "," + std::to_string(k) + "]",
              fit.params.Gamma(k, k), idx++);
    for (int j = k + 1; j < m; ++j) {
      natural("Gamma[" + std::to_string(j) + "," + std::to_string(k) + "]",
              fit.params.Gamma(j, k), idx++);
    }
  }
  if (spec.has_dispersion()) {
    for (int j = 0; j < m; ++j) {
      log_scale("phi[" + std::to_string(j) + "]", fit.params.phi[j],
                layout.off_phi + j);
    }
  }
  if (spec.row_effects) {
    for (int i = 1; i < spec.n; ++i) {
      natural("alpha[" + std::to_string(i) + "]", fit.params.alpha[i],
              layout.off_alpha + i - 1);
    }
  }
  return report;
}

Eigen::MatrixXd dunn_smyth_residuals(const FitResult& fit,
                                     const ResponseData& data,
                                     std::uint64_t seed) {
  const ModelSpec& spec = fit.spec;
  validate_data(spec, data);
  const Eigen::MatrixXd eta =
      linear_predictor(spec, fit.params, data.X, fit.varparams.a);
  Eigen::MatrixXd res(spec.n, spec.m);
  const bool discrete = spec.family == Family::PoissonLog ||
                        spec.family == Family::NegBinomialLog ||
                        spec.family == Family::BernoulliLogit ||
                        spec.family == Family::BernoulliProbit;
  parallel_for(spec.n, [&](int i) {
    for (int j = 0; j < spec.m; ++j) {
      const double phi = spec.has_dispersion() ? fit.params.phi[j] : 1.0;
      const CdfPair F = family_cdf(spec.family, data.Y(i, j), eta(i, j), phi,
                                   fit.params.nu);
      double c;
      const bool randomized =
          discrete || (spec.family == Family::TweedieLog && data.Y(i, j) == 0.0);
      if (randomized) {
        Rng rng(seed, 0x6473u, static_cast<std::uint64_t>(i),
                static_cast<std::uint64_t>(j));
        c = F.F_left + rng.uniform() * (F.F - F.F_left);
      } else {
        c = F.F;
      }
      c = std::min(1.0 - 1e-12, std::max(1e-12, c));
      res(i, j) = norm_quantile(c);
    }
  }, 8);
  return res;
}

double variance_explained(const FitResult& fit_null, const FitResult& fit_cov) {
  if (fit_null.spec.family != fit_cov.spec.family ||
      fit_null.spec.p != fit_cov.spec.p || fit_null.spec.m != fit_cov.spec.m) {
    throw ConfigError("variance_explained: fits must share family, m and p");
  }
  const double tr_null = residual_covariance(fit_null.params).trace();
  const double tr_cov = residual_covariance(fit_cov.params).trace();
  if (!(tr_null > 0.0)) {
    throw DomainError("variance_explained: null fit has zero residual covariance trace");
  }
  return 1.0 - tr_cov / tr_null;
}

OrdinationOutput ordination(const FitResult& fit, const ResponseData& data,
                            const ObservedInformation* info) {
  OrdinationOutput out;
  out.scores = fit.varparams.a;
  out.loadings = fit.params.Gamma;
  boost::math::chi_squared chi2(fit.spec.p);
  out.ellipse_radius2 = boost::math::quantile(chi2, 0.95);
  if (info != nullptr && fit.method != Method::Laplace) {
    out.region_cov = cmsep(fit, data, *info, &out.notes);
  } else {
    out.region_cov.resize(fit.spec.n);
    for (int i = 0; i < fit.spec.n; ++i) out.region_cov[i] = fit.varparams.cov(i);
    out.notes.push_back(
        fit.method == Method::Laplace
            ? "laplace fit: prediction regions use the mode curvature only"
            : "no information matrix supplied: prediction regions use A_i only");
  }
  return out;
}

}  // namespace gllvm
