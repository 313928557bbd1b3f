#include <cmath>
#include <limits>
#include <vector>

#include "gllvm/objectives.hpp"
#include "gllvm/parallel.hpp"

namespace gllvm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Joint log-density of unit i's responses and latent vector, up to the
// N(0, I) normalizing constant: sum_j log f(y_ij | eta_ij(u)) - u'u/2.
double inner_value(const ModelSpec& spec, const ResponseData& data,
                   const Parameters& params, int i, const Eigen::VectorXd& u) {
  Eigen::VectorXd eta = params.beta0;
  if (spec.q > 0) eta.noalias() += params.B * data.X.row(i).transpose();
  eta.noalias() += params.Gamma * u;
  if (spec.row_effects) eta.array() += params.alpha[i];
  double acc = 0.0;
  for (int j = 0; j < spec.m; ++j) {
    const double phi = spec.has_dispersion() ? params.phi[j] : 1.0;
    acc += family_eval(spec.family, data.Y(i, j), eta[j], phi, params.nu).logf;
    if (!std::isfinite(acc)) return -kInf;
  }
  return acc - 0.5 * u.squaredNorm();
}

}  // namespace

namespace detail {

InnerMode solve_inner_mode(const ModelSpec& spec, const ResponseData& data,
                           const Parameters& params, int i,
                           const LaplaceOptions& options,
                           const Eigen::VectorXd* warm_start) {
  const int p = spec.p, m = spec.m;
  InnerMode mode;
  Eigen::VectorXd u = warm_start && warm_start->size() == p
                          ? *warm_start
                          : Eigen::VectorXd::Zero(p);
  double value = inner_value(spec, data, params, i, u);
  if (!std::isfinite(value)) {
    u.setZero();
    value = inner_value(spec, data, params, i, u);
    if (!std::isfinite(value)) return mode;
  }

  Eigen::VectorXd base = params.beta0;
  if (spec.q > 0) base.noalias() += params.B * data.X.row(i).transpose();
  if (spec.row_effects) base.array() += params.alpha[i];

  Eigen::VectorXd grad(p), d1(m), d2(m);
  Eigen::MatrixXd M(p, p);
  for (int iter = 0; iter < options.max_iter; ++iter) {
    const Eigen::VectorXd eta = base + params.Gamma * u;
    for (int j = 0; j < m; ++j) {
      const double phi = spec.has_dispersion() ? params.phi[j] : 1.0;
      const FamilyEval ev =
          family_eval(spec.family, data.Y(i, j), eta[j], phi, params.nu);
      d1[j] = ev.d1;
      d2[j] = ev.d2;
    }
    grad.noalias() = params.Gamma.transpose() * d1;
    grad -= u;
    if (grad.lpNorm<Eigen::Infinity>() <= options.grad_tol) {
      M.noalias() = -params.Gamma.transpose() * d2.asDiagonal() * params.Gamma;
      M.diagonal().array() += 1.0;
      mode.u = u;
      mode.neg_hess = M;
      mode.ok = true;
      mode.iterations = iter;
      return mode;
    }
    M.noalias() = -params.Gamma.transpose() * d2.asDiagonal() * params.Gamma;
    M.diagonal().array() += 1.0;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
    Eigen::VectorXd step;
    if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
      step = ldlt.solve(grad);
    } else {
      step = grad;  // ascent fallback for indefinite curvature (beta family)
    }
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= options.max_halvings; ++h) {
      const Eigen::VectorXd cand = u + t * step;
      const double cand_value = inner_value(spec, data, params, i, cand);
      if (std::isfinite(cand_value) && cand_value > value) {
        u = cand;
        value = cand_value;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;
  }
  // Declare success if the final gradient is small enough anyway.
  const Eigen::VectorXd eta = base + params.Gamma * u;
  for (int j = 0; j < m; ++j) {
    const double phi = spec.has_dispersion() ? params.phi[j] : 1.0;
    const FamilyEval ev =
        family_eval(spec.family, data.Y(i, j), eta[j], phi, params.nu);
    d1[j] = ev.d1;
    d2[j] = ev.d2;
  }
  grad.noalias() = params.Gamma.transpose() * d1;
  grad -= u;
  if (grad.lpNorm<Eigen::Infinity>() <= options.grad_tol) {
    M.noalias() = -params.Gamma.transpose() * d2.asDiagonal() * params.Gamma;
    M.diagonal().array() += 1.0;
    mode.u = u;
    mode.neg_hess = M;
    mode.ok = true;
    mode.iterations = options.max_iter;
  }
  return mode;
}

}  // namespace detail

namespace {

struct LaplaceUnit {
  double value = -kInf;
  bool ok = false;
  detail::InnerMode mode;
};

LaplaceUnit laplace_unit(const ModelSpec& spec, const ResponseData& data,
                         const Parameters& params, int i,
                         const LaplaceOptions& options,
                         const Eigen::VectorXd* warm) {
  LaplaceUnit out;
  out.mode = detail::solve_inner_mode(spec, data, params, i, options, warm);
  if (!out.mode.ok) return out;
  Eigen::LLT<Eigen::MatrixXd> llt(out.mode.neg_hess);
  if (llt.info() != Eigen::Success) return out;
  double half_logdet = 0.0;
  for (int d = 0; d < spec.p; ++d) {
    half_logdet += std::log(llt.matrixL()(d, d));
  }
  out.value = inner_value(spec, data, params, i, out.mode.u) - half_logdet;
  out.ok = std::isfinite(out.value);
  return out;
}

}  // namespace

ObjectiveValue laplace_objective(const ModelSpec& spec, const ResponseData& data,
                                 const Parameters& params,
                                 const LaplaceOptions& options) {
  spec.validate();
  validate_data(spec, data);
  validate_parameters(spec, params);
  ObjectiveValue out;
  out.per_unit.resize(spec.n);
  std::vector<char> ok(spec.n, 1);
  parallel_for(spec.n, [&](int i) {
    const LaplaceUnit u = laplace_unit(spec, data, params, i, options, nullptr);
    ok[i] = u.ok;
    out.per_unit[i] = u.value;
  }, 4);
  for (int i = 0; i < spec.n; ++i) {
    if (!ok[i]) {
      throw ConvergenceError("laplace inner Newton failed to converge", i);
    }
  }
  out.value = pairwise_sum(out.per_unit.data(), spec.n);
  return out;
}

LaplaceModes laplace_modes(const ModelSpec& spec, const ResponseData& data,
                           const Parameters& params,
                           const LaplaceOptions& options) {
  spec.validate();
  validate_data(spec, data);
  validate_parameters(spec, params);
  LaplaceModes out;
  out.scores.resize(spec.n, spec.p);
  out.cov.assign(spec.n, Eigen::MatrixXd());
  std::vector<char> ok(spec.n, 1);
  parallel_for(spec.n, [&](int i) {
    const detail::InnerMode mode =
        detail::solve_inner_mode(spec, data, params, i, options, nullptr);
    if (!mode.ok) {
      ok[i] = 0;
      return;
    }
    out.scores.row(i) = mode.u;
    out.cov[i] = mode.neg_hess.ldlt().solve(
        Eigen::MatrixXd::Identity(spec.p, spec.p));
  }, 4);
  for (int i = 0; i < spec.n; ++i) {
    if (!ok[i]) throw ConvergenceError("laplace inner Newton failed to converge", i);
  }
  return out;
}

Eigen::VectorXd laplace_gradient(const ModelSpec& spec, const ResponseData& data,
                                 const Parameters& params,
                                 const LaplaceOptions& options) {
  spec.validate();
  validate_data(spec, data);
  validate_parameters(spec, params);
  const ParamLayout layout = ParamLayout::make(spec, CovStructure::Full, false);
  const int m = spec.m, p = spec.p, q = spec.q;

  Eigen::MatrixXd psi_buf = Eigen::MatrixXd::Zero(layout.dim_psi, spec.n);
  std::vector<char> ok(spec.n, 1);

  parallel_for(spec.n, [&](int i) {
    const detail::InnerMode mode =
        detail::solve_inner_mode(spec, data, params, i, options, nullptr);
    if (!mode.ok) {
      ok[i] = 0;
      return;
    }
    const Eigen::VectorXd& u = mode.u;
    Eigen::VectorXd eta = params.beta0;
    if (q > 0) eta.noalias() += params.B * data.X.row(i).transpose();
    eta.noalias() += params.Gamma * u;
    if (spec.row_effects) eta.array() += params.alpha[i];

    Eigen::VectorXd d1(m), d2(m), d3(m);
    for (int j = 0; j < m; ++j) {
      const double phi = spec.has_dispersion() ? params.phi[j] : 1.0;
      const FamilyEval ev =
          family_eval(spec.family, data.Y(i, j), eta[j], phi, params.nu);
      d1[j] = ev.d1;
      d2[j] = ev.d2;
      d3[j] = ev.d3;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(mode.neg_hess);
    // V = M^{-1} Gamma', c_j = lambda_j' M^{-1} lambda_j.
    const Eigen::MatrixXd V = ldlt.solve(params.Gamma.transpose());
    Eigen::VectorXd c(m);
    for (int j = 0; j < m; ++j) c[j] = params.Gamma.row(j).dot(V.col(j));
    // dF/du at the mode comes only from the log-determinant correction.
    const Eigen::VectorXd w =
        0.5 * params.Gamma.transpose() * (d3.array() * c.array()).matrix();
    const Eigen::VectorXd r = ldlt.solve(w);
    Eigen::VectorXd lr(m);
    for (int j = 0; j < m; ++j) lr[j] = params.Gamma.row(j).dot(r);

    const Eigen::VectorXd e =
        d1.array() + 0.5 * d3.array() * c.array();  // eta-weight
    const Eigen::VectorXd t = e.array() + d2.array() * lr.array();

    auto col = psi_buf.col(i);
    col.segment(layout.off_beta0, m) = t;
    for (int k = 0; k < q; ++k) {
      col.segment(layout.off_B + k * m, m) = t * data.X(i, k);
    }
    int idx = layout.off_gamma;
    for (int k = 0; k < p; ++k) {
      for (int j = k; j < m; ++j) {
        double gjk = e[j] * u[k] + d2[j] * V(k, j) + d2[j] * u[k] * lr[j] +
                     d1[j] * r[k];
        if (j == k) gjk *= params.Gamma(k, k);  // log-diag chain
        col[idx++] = gjk;
      }
    }
    if (spec.has_dispersion()) {
      for (int j = 0; j < m; ++j) {
        const DispersionDerivs dd = family_logphi_derivs(
            spec.family, data.Y(i, j), eta[j], params.phi[j], params.nu);
        col[layout.off_phi + j] = dd.dlogf + 0.5 * c[j] * dd.dd2 + dd.dd1 * lr[j];
      }
    }
    if (spec.row_effects && i > 0) col[layout.off_alpha + i - 1] = t.sum();
    if (!col.allFinite()) ok[i] = 0;
  }, 4);

  for (int i = 0; i < spec.n; ++i) {
    if (!ok[i]) throw ConvergenceError("laplace gradient failed", i);
  }
  Eigen::VectorXd grad(layout.dim_psi);
  for (int k = 0; k < layout.dim_psi; ++k) {
    Eigen::VectorXd row = psi_buf.row(k);
    grad[k] = pairwise_sum(row.data(), spec.n);
  }
  return grad;
}

}  // namespace gllvm
