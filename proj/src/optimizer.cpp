#include "gllvm/optimizer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <deque>
#include <limits>

#include "gllvm/parallel.hpp"
#include "gllvm/rng.hpp"

namespace gllvm {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

std::string method_name(Method m) {
  switch (m) {
    case Method::Eva: return "eva";
    case Method::Va: return "va";
    case Method::Laplace: return "laplace";
  }
  throw ConfigError("unknown method enum value");
}

Method method_from_name(const std::string& name) {
  if (name == "eva") return Method::Eva;
  if (name == "va") return Method::Va;
  if (name == "laplace") return Method::Laplace;
  throw ConfigError("unknown method '" + name + "'; expected eva, va or laplace");
}

void FitConfig::validate() const {
  if (max_iter < 1) throw ConfigError("FitConfig: max_iter must be positive");
  if (!(grad_tol > 0.0)) throw ConfigError("FitConfig: grad_tol must be positive");
  if (n_starts < 1) throw ConfigError("FitConfig: n_starts must be at least 1");
}

CovStructure FitConfig::resolve_structure(int p) const {
  switch (a_structure) {
    case AStructure::Full: return CovStructure::Full;
    case AStructure::Diagonal: return CovStructure::Diagonal;
    case AStructure::Auto: return p <= 5 ? CovStructure::Full : CovStructure::Diagonal;
  }
  return CovStructure::Full;
}

// ---------------------------------------------------------------------------
// L-BFGS with strong Wolfe line search (Nocedal & Wright, Algorithms 3.5/3.6).
// ---------------------------------------------------------------------------

namespace detail {

namespace {

struct LinePoint {
  double alpha;
  double f;
  double deriv;
};

// Cubic interpolation of a step inside [lo, hi] from two evaluated points;
// falls back to bisection when the interpolant is poorly conditioned.
double interpolate(const LinePoint& lo, const LinePoint& hi) {
  const double d1 = lo.deriv + hi.deriv - 3.0 * (lo.f - hi.f) / (lo.alpha - hi.alpha);
  const double disc = d1 * d1 - lo.deriv * hi.deriv;
  if (disc >= 0.0) {
    const double d2 = std::sqrt(disc) * (hi.alpha > lo.alpha ? 1.0 : -1.0);
    const double denom = hi.deriv - lo.deriv + 2.0 * d2;
    if (denom != 0.0) {
      double cand = hi.alpha - (hi.alpha - lo.alpha) * (hi.deriv + d2 - d1) / denom;
      const double a = std::min(lo.alpha, hi.alpha);
      const double b = std::max(lo.alpha, hi.alpha);
      const double margin = 0.1 * (b - a);
      if (std::isfinite(cand) && cand > a + margin && cand < b - margin) return cand;
    }
  }
  return 0.5 * (lo.alpha + hi.alpha);
}

class LineSearch {
 public:
  LineSearch(PackedObjective& obj, const Eigen::VectorXd& x,
             const Eigen::VectorXd& dir, double f0, double deriv0)
      : obj_(obj), x_(x), dir_(dir), f0_(f0), d0_(deriv0) {}

  // Returns the accepted step, or 0 on failure. On success, fills f/grad at
  // the accepted point.
  double run(double alpha_init, int max_evals, double& f_out,
             Eigen::VectorXd& grad_out) {
    const double c1 = 1e-4, c2 = 0.9;
    LinePoint prev{0.0, f0_, d0_};
    double alpha = alpha_init;
    int evals = 0;
    for (;;) {
      const double f = eval(alpha, grad_out);
      ++evals;
      const double deriv = std::isfinite(f) ? grad_out.dot(dir_) : kInf;
      if (!std::isfinite(f) || f > f0_ + c1 * alpha * d0_ ||
          (evals > 1 && f >= prev.f)) {
        return zoom(prev, {alpha, f, deriv}, c1, c2, max_evals - evals, f_out,
                    grad_out);
      }
      if (std::fabs(deriv) <= -c2 * d0_) {
        f_out = f;
        return alpha;
      }
      if (deriv >= 0.0) {
        return zoom({alpha, f, deriv}, prev, c1, c2, max_evals - evals, f_out,
                    grad_out);
      }
      prev = {alpha, f, deriv};
      alpha *= 2.0;
      if (evals >= max_evals || alpha > 1e10) return 0.0;
    }
  }

 private:
  double eval(double alpha, Eigen::VectorXd& grad) {
    return obj_.value_and_gradient(x_ + alpha * dir_, grad);
  }

  double zoom(LinePoint lo, LinePoint hi, double c1, double c2, int budget,
              double& f_out, Eigen::VectorXd& grad_out) {
    for (int k = 0; k < budget; ++k) {
      // When the high end is non-finite, bisect toward the finite low end.
      const double alpha = std::isfinite(hi.f) ? interpolate(lo, hi)
                                               : 0.5 * (lo.alpha + hi.alpha);
      const double f = eval(alpha, grad_out);
      const double deriv = std::isfinite(f) ? grad_out.dot(dir_) : kInf;
      if (!std::isfinite(f) || f > f0_ + c1 * alpha * d0_ || f >= lo.f) {
        hi = {alpha, f, deriv};
      } else {
        if (std::fabs(deriv) <= -c2 * d0_) {
          f_out = f;
          return alpha;
        }
        if (deriv * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
        lo = {alpha, f, deriv};
      }
      if (std::fabs(hi.alpha - lo.alpha) < 1e-18) break;
    }
    // Accept a plain decrease if the Wolfe pair never materialized.
    if (lo.alpha > 0.0 && lo.f < f0_) {
      const double f = eval(lo.alpha, grad_out);
      f_out = f;
      return lo.alpha;
    }
    return 0.0;
  }

  PackedObjective& obj_;
  const Eigen::VectorXd& x_;
  const Eigen::VectorXd& dir_;
  double f0_, d0_;
};

}  // namespace

LbfgsResult lbfgs_minimize(PackedObjective& objective, const Eigen::VectorXd& x0,
                           const LbfgsOptions& options) {
  const int n = objective.dim();
  LbfgsResult res;
  res.x = x0;
  Eigen::VectorXd grad(n);
  res.f = objective.value_and_gradient(res.x, grad);
  if (!std::isfinite(res.f)) {
    throw NumericError("objective is non-finite at the starting point");
  }
  res.grad_norm = grad.lpNorm<Eigen::Infinity>();

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  Eigen::VectorXd q(n), dir(n), x_new(n), grad_new(n);
  int flat_count = 0;

  for (int iter = 0; iter < options.max_iter; ++iter) {
    if (res.grad_norm <= options.grad_tol) {
      res.grad_converged = true;
      res.iterations = iter;
      return res;
    }
    // Two-loop recursion.
    q = grad;
    std::vector<double> alpha_store(s_hist.size());
    for (int k = static_cast<int>(s_hist.size()) - 1; k >= 0; --k) {
      alpha_store[k] = rho_hist[k] * s_hist[k].dot(q);
      q -= alpha_store[k] * y_hist[k];
    }
    if (!s_hist.empty()) {
      const double gamma =
          s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      q *= gamma;
    }
    for (std::size_t k = 0; k < s_hist.size(); ++k) {
      const double beta = rho_hist[k] * y_hist[k].dot(q);
      q += (alpha_store[k] - beta) * s_hist[k];
    }
    dir = -q;
    double deriv0 = grad.dot(dir);
    if (!(deriv0 < 0.0)) {  // not a descent direction; reset memory
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      dir = -grad;
      deriv0 = grad.dot(dir);
    }

    const double alpha_init =
        s_hist.empty() && iter == 0
            ? std::min(1.0, 1.0 / std::max(1e-12, grad.lpNorm<1>()))
            : 1.0;
    LineSearch search(objective, res.x, dir, res.f, deriv0);
    double f_new = res.f;
    const double step =
        search.run(alpha_init, options.max_line_search, f_new, grad_new);
    if (step == 0.0) {  // line search failed; stop here
      res.iterations = iter;
      res.grad_converged = res.grad_norm <= options.grad_tol;
      return res;
    }
    x_new = res.x + step * dir;

    const Eigen::VectorXd s = x_new - res.x;
    const Eigen::VectorXd y = grad_new - grad;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (static_cast<int>(s_hist.size()) == options.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
    }

    const double rel_change =
        std::fabs(res.f - f_new) / std::max(1.0, std::fabs(res.f));
    flat_count = rel_change < options.rel_change_tol ? flat_count + 1 : 0;
    res.x.swap(x_new);
    res.f = f_new;
    grad.swap(grad_new);
    res.grad_norm = grad.lpNorm<Eigen::Infinity>();
    res.iterations = iter + 1;
    if (flat_count >= options.rel_change_window) break;
  }
  res.grad_converged = res.grad_norm <= options.grad_tol;
  return res;
}

// ---------------------------------------------------------------------------
// Packed objectives (negated for minimization).
// ---------------------------------------------------------------------------

namespace {

class VariationalPacked final : public PackedObjective {
 public:
  VariationalPacked(VariationalKind kind, const ModelSpec& spec,
                    const ResponseData& data, CovStructure structure)
      : kind_(kind),
        spec_(spec),
        data_(data),
        layout_(ParamLayout::make(spec, structure, true)),
        per_unit_(spec.n),
        ok_(spec.n, 1) {}

  int dim() const override { return layout_.dim(); }

  double value(const Eigen::VectorXd& x) override {
    Parameters params;
    VariationalParams vp;
    if (!try_unpack(x, params, vp)) return kInf;
    std::atomic<bool> bad{false};
    parallel_for(spec_.n, [&](int i) {
      if (bad.load(std::memory_order_relaxed)) return;
      double v = 0.0;
      if (!unit_value(kind_, spec_, data_, params, vp, i, v)) {
        bad.store(true, std::memory_order_relaxed);
        return;
      }
      per_unit_[i] = v;
    }, 16);
    if (bad.load()) return kInf;
    return -pairwise_sum(per_unit_.data(), spec_.n);
  }

  double value_and_gradient(const Eigen::VectorXd& x,
                            Eigen::VectorXd& grad) override {
    Parameters params;
    VariationalParams vp;
    if (!try_unpack(x, params, vp)) return kInf;
    grad.resize(layout_.dim());
    if (psi_buf_.rows() != layout_.dim_psi) {
      psi_buf_.resize(layout_.dim_psi, spec_.n);
    }
    std::atomic<bool> bad{false};
    parallel_for(spec_.n, [&](int i) {
      if (bad.load(std::memory_order_relaxed)) return;
      double v = 0.0;
      Eigen::VectorXd xi(layout_.per_unit_xi());
      psi_buf_.col(i).setZero();
      if (!unit_value(kind_, spec_, data_, params, vp, i, v) ||
          !unit_gradient(kind_, layout_, data_, params, vp, i, psi_buf_.col(i), xi)) {
        bad.store(true, std::memory_order_relaxed);
        return;
      }
      per_unit_[i] = v;
      grad.segment(layout_.unit_offset(i), layout_.per_unit_xi()) = -xi;
    }, 16);
    if (bad.load()) return kInf;
    for (int k = 0; k < layout_.dim_psi; ++k) {
      row_tmp_ = psi_buf_.row(k);
      grad[k] = -pairwise_sum(row_tmp_.data(), spec_.n);
    }
    return -pairwise_sum(per_unit_.data(), spec_.n);
  }

  const ParamLayout& layout() const { return layout_; }

 private:
  bool try_unpack(const Eigen::VectorXd& x, Parameters& params,
                  VariationalParams& vp) {
    if (!x.allFinite()) return false;
    layout_.unpack(x, params, vp);
    return true;
  }

  VariationalKind kind_;
  ModelSpec spec_;
  const ResponseData& data_;
  ParamLayout layout_;
  Eigen::VectorXd per_unit_;
  Eigen::MatrixXd psi_buf_;
  Eigen::VectorXd row_tmp_;
  std::vector<char> ok_;
};

class LaplacePacked final : public PackedObjective {
 public:
  LaplacePacked(const ModelSpec& spec, const ResponseData& data)
      : spec_(spec),
        data_(data),
        layout_(ParamLayout::make(spec, CovStructure::Full, false)),
        warm_(Eigen::MatrixXd::Zero(spec.n, spec.p)),
        per_unit_(spec.n) {}

  int dim() const override { return layout_.dim(); }

  double value(const Eigen::VectorXd& x) override {
    Parameters params;
    VariationalParams vp;
    if (!x.allFinite()) return kInf;
    layout_.unpack(x, params, vp);
    std::atomic<bool> bad{false};
    parallel_for(spec_.n, [&](int i) {
      if (bad.load(std::memory_order_relaxed)) return;
      const Eigen::VectorXd w = warm_.row(i);
      const InnerMode mode =
          solve_inner_mode(spec_, data_, params, i, options_, &w);
      if (!mode.ok) {
        bad.store(true, std::memory_order_relaxed);
        return;
      }
      warm_.row(i) = mode.u;
      Eigen::LLT<Eigen::MatrixXd> llt(mode.neg_hess);
      if (llt.info() != Eigen::Success) {
        bad.store(true, std::memory_order_relaxed);
        return;
      }
      double half_logdet = 0.0;
      for (int d = 0; d < spec_.p; ++d) half_logdet += std::log(llt.matrixL()(d, d));
      double v = -0.5 * mode.u.squaredNorm() - half_logdet;
      Eigen::VectorXd eta = params.beta0;
      if (spec_.q > 0) eta.noalias() += params.B * data_.X.row(i).transpose();
      eta.noalias() += params.Gamma * mode.u;
      if (spec_.row_effects) eta.array() += params.alpha[i];
      for (int j = 0; j < spec_.m; ++j) {
        const double phi = spec_.has_dispersion() ? params.phi[j] : 1.0;
        v += family_eval(spec_.family, data_.Y(i, j), eta[j], phi, params.nu).logf;
      }
      if (!std::isfinite(v)) {
        bad.store(true, std::memory_order_relaxed);
        return;
      }
      per_unit_[i] = v;
    }, 4);
    if (bad.load()) return kInf;
    return -pairwise_sum(per_unit_.data(), spec_.n);
  }

  double value_and_gradient(const Eigen::VectorXd& x,
                            Eigen::VectorXd& grad) override {
    const double f = value(x);
    if (!std::isfinite(f)) return kInf;
    Parameters params;
    VariationalParams vp;
    layout_.unpack(x, params, vp);
    try {
      grad = -laplace_gradient(spec_, data_, params, options_);
    } catch (const Error&) {
      return kInf;
    }
    return f;
  }

 private:
  ModelSpec spec_;
  const ResponseData& data_;
  ParamLayout layout_;
  LaplaceOptions options_;
  Eigen::MatrixXd warm_;
  Eigen::VectorXd per_unit_;
};

}  // namespace

std::unique_ptr<PackedObjective> make_packed_objective(Method method,
                                                       const ModelSpec& spec,
                                                       const ResponseData& data,
                                                       CovStructure a_structure) {
  switch (method) {
    case Method::Eva:
      return std::make_unique<VariationalPacked>(VariationalKind::Eva, spec, data,
                                                 a_structure);
    case Method::Va:
      if (spec.family != Family::GaussianIdentity &&
          spec.family != Family::PoissonLog) {
        throw ConfigError("no closed-form VA for family '" +
                          family_name(spec.family) + "'");
      }
      return std::make_unique<VariationalPacked>(VariationalKind::Va, spec, data,
                                                 a_structure);
    case Method::Laplace:
      return std::make_unique<LaplacePacked>(spec, data);
  }
  throw ConfigError("unknown method");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Initialization.
// ---------------------------------------------------------------------------

namespace {

// Newton fit of a single-response GLM (intercept + q covariates). Returns
// false on divergence; coef is left at the best point seen.
bool glm_newton(Family family, const Eigen::VectorXd& y, const Eigen::MatrixXd& X,
                double phi, double nu, Eigen::VectorXd& coef) {
  const int n = static_cast<int>(y.size());
  const int d = 1 + static_cast<int>(X.cols());
  coef = Eigen::VectorXd::Zero(d);

  auto loglik = [&](const Eigen::VectorXd& b, Eigen::VectorXd* grad,
                    Eigen::MatrixXd* hess) {
    double ll = 0.0;
    if (grad) grad->setZero(d);
    if (hess) hess->setZero(d, d);
    Eigen::VectorXd xrow(d);
    for (int i = 0; i < n; ++i) {
      xrow[0] = 1.0;
      for (int k = 1; k < d; ++k) xrow[k] = X(i, k - 1);
      const double eta = xrow.dot(b);
      const FamilyEval ev = family_eval(family, y[i], eta, phi, nu);
      ll += ev.logf;
      if (!std::isfinite(ll)) return -kInf;
      if (grad) *grad += ev.d1 * xrow;
      if (hess) hess->noalias() += ev.d2 * xrow * xrow.transpose();
    }
    return ll;
  };

  double ll = loglik(coef, nullptr, nullptr);
  if (!std::isfinite(ll)) return false;
  Eigen::VectorXd grad(d);
  Eigen::MatrixXd hess(d, d);
  for (int iter = 0; iter < 25; ++iter) {
    loglik(coef, &grad, &hess);
    if (grad.lpNorm<Eigen::Infinity>() < 1e-8) return true;
    Eigen::MatrixXd neg_h = -hess;
    neg_h.diagonal().array() += 1e-8;  // ridge for non-concave corners
    Eigen::LDLT<Eigen::MatrixXd> ldlt(neg_h);
    Eigen::VectorXd step = ldlt.info() == Eigen::Success && ldlt.isPositive()
                               ? ldlt.solve(grad).eval()
                               : grad;
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h < 30; ++h) {
      const Eigen::VectorXd cand = coef + t * step;
      const double cand_ll = loglik(cand, nullptr, nullptr);
      if (std::isfinite(cand_ll) && cand_ll >= ll) {
        coef = cand;
        ll = cand_ll;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) return coef.allFinite();
    if (coef.lpNorm<Eigen::Infinity>() > 50.0) return false;  // separation
  }
  return true;
}

double clamp(double x, double lo, double hi) { return std::min(hi, std::max(lo, x)); }

}  // namespace

Initialization initialize(const ModelSpec& spec, const ResponseData& data,
                          std::uint64_t seed, int start_index) {
  spec.validate();
  validate_data(spec, data);
  const int n = spec.n, m = spec.m, p = spec.p, q = spec.q;

  Initialization out;
  Parameters& params = out.params;
  params.beta0.setZero(m);
  params.B.setZero(m, q);
  params.Gamma.setZero(m, p);
  params.nu = spec.tweedie_power;
  if (spec.has_dispersion()) params.phi = Eigen::VectorXd::Ones(m);
  if (spec.row_effects) params.alpha = Eigen::VectorXd::Zero(n);

  Eigen::MatrixXd resid(n, m);  // GLM working residuals
  const Family glm_family =
      spec.family == Family::NegBinomialLog ? Family::PoissonLog : spec.family;

  for (int j = 0; j < m; ++j) {
    const Eigen::VectorXd y = data.Y.col(j);
    const double ymin = y.minCoeff(), ymax = y.maxCoeff();
    bool degenerate = false;
    if ((spec.family == Family::BernoulliLogit ||
         spec.family == Family::BernoulliProbit) &&
        ymin == ymax) {
      params.beta0[j] = ymin < 0.5 ? -5.0 : 5.0;  // logit-capped fallback
      degenerate = true;
      out.warnings.push_back("response " + std::to_string(j) +
                             ": constant binary column; intercept capped");
    } else if (ymin == ymax &&
               (spec.family == Family::PoissonLog ||
                spec.family == Family::NegBinomialLog ||
                spec.family == Family::TweedieLog) &&
               ymax == 0.0) {
      params.beta0[j] = -5.0;
      degenerate = true;
      out.warnings.push_back("response " + std::to_string(j) +
                             ": all-zero column; intercept capped");
    }

    Eigen::VectorXd coef = Eigen::VectorXd::Zero(1 + q);
    if (!degenerate) {
      const double phi0 = spec.family == Family::BetaLogit ? 5.0 : 1.0;
      if (!glm_newton(glm_family, y, data.X, phi0, spec.tweedie_power, coef)) {
        coef.setZero();
        // keep a usable intercept for count-type data
        if (glm_family == Family::PoissonLog || glm_family == Family::TweedieLog) {
          coef[0] = std::log(std::max(y.mean(), 1e-2));
        }
        out.warnings.push_back("response " + std::to_string(j) +
                               ": GLM initialization diverged; using fallback");
      }
      params.beta0[j] = clamp(coef[0], -5.0, 5.0);
      for (int k = 0; k < q; ++k) params.B(j, k) = clamp(coef[k + 1], -5.0, 5.0);
    }

    // Working residuals (y - mu) * g'(mu) and moment-based dispersions.
    double ssq = 0.0, smu = 0.0, smu2 = 0.0, svar = 0.0, smuv = 0.0;
    for (int i = 0; i < n; ++i) {
      double eta = params.beta0[j];
      for (int k = 0; k < q; ++k) eta += data.X(i, k) * params.B(j, k);
      const double mu = family_mean(spec.family, eta);
      double r;
      switch (spec.family) {
        case Family::GaussianIdentity: r = y[i] - mu; break;
        case Family::PoissonLog:
        case Family::NegBinomialLog:
        case Family::TweedieLog: r = (y[i] - mu) / std::max(mu, 1e-8); break;
        case Family::BernoulliLogit:
        case Family::BetaLogit: r = (y[i] - mu) / std::max(mu * (1.0 - mu), 1e-8); break;
        case Family::BernoulliProbit: r = (y[i] - mu) / std::max(norm_pdf(eta), 1e-8); break;
        default: r = y[i] - mu;
      }
      resid(i, j) = r;
      const double e = y[i] - mu;
      ssq += e * e;
      smu += mu;
      smu2 += mu * mu;
      svar += mu * (1.0 - mu);
      smuv += std::pow(mu, spec.tweedie_power);
    }
    switch (spec.family) {
      case Family::GaussianIdentity:
        params.phi[j] = std::sqrt(std::max(ssq / std::max(n - 1, 1), 1e-4));
        break;
      case Family::NegBinomialLog:
        params.phi[j] = clamp((ssq - smu) / std::max(smu2, 1e-8), 1e-2, 1e2);
        break;
      case Family::TweedieLog:
        params.phi[j] = clamp(ssq / std::max(smuv, 1e-8), 1e-2, 1e2);
        break;
      case Family::BetaLogit:
        params.phi[j] = clamp(svar / std::max(ssq, 1e-8) - 1.0, 1e-1, 1e3);
        break;
      default:
        break;
    }
  }

  // Loadings: top-p eigenpairs of the residual correlation matrix, rotated
  // onto the constraint set (zero upper triangle, positive diagonal).
  Eigen::MatrixXd centered = resid.rowwise() - resid.colwise().mean();
  Eigen::VectorXd sd = (centered.array().square().colwise().sum() /
                        std::max(n - 1, 1)).sqrt();
  for (int j = 0; j < m; ++j) {
    if (sd[j] < 1e-10) sd[j] = 1.0;
  }
  Eigen::MatrixXd corr =
      (centered.transpose() * centered) / std::max(n - 1, 1);
  corr = sd.cwiseInverse().asDiagonal() * corr * sd.cwiseInverse().asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(corr);
  Eigen::MatrixXd G0(m, p);
  for (int k = 0; k < p; ++k) {
    const int src = m - 1 - k;  // eigenvalues ascend
    const double ev = std::max(es.eigenvalues()[src], 1e-4);
    G0.col(k) = es.eigenvectors().col(src) * std::sqrt(ev);
  }
  // LQ-style rotation: make the leading p x p block lower triangular.
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(G0.topRows(p).transpose());
  Eigen::MatrixXd Q = qr.householderQ();
  G0 = G0 * Q;
  for (int k = 0; k < p; ++k) {
    if (G0(k, k) < 0.0) G0.col(k) = -G0.col(k);
  }
  G0 *= 0.5;
  for (int k = 0; k < p; ++k) {
    G0(k, k) = std::max(G0(k, k), 1e-3);
    for (int j = 0; j < k; ++j) G0(j, k) = 0.0;  // clear rounding residue
  }
  params.Gamma = G0;

  out.varparams.a = Eigen::MatrixXd::Zero(n, p);
  out.varparams.L.assign(
      n, Eigen::MatrixXd(std::sqrt(0.5) * Eigen::MatrixXd::Identity(p, p)));

  if (start_index > 0) {
    Rng rng(seed, 0x737461u, static_cast<std::uint64_t>(start_index));
    auto jitter = [&](double& v) { v += 0.05 * rng.normal(); };
    for (int j = 0; j < m; ++j) {
      jitter(params.beta0[j]);
      for (int k = 0; k < q; ++k) jitter(params.B(j, k));
    }
    for (int k = 0; k < p; ++k) {
      double t = std::log(params.Gamma(k, k));
      jitter(t);
      params.Gamma(k, k) = std::exp(t);
      for (int j = k + 1; j < m; ++j) jitter(params.Gamma(j, k));
    }
    if (spec.has_dispersion()) {
      for (int j = 0; j < m; ++j) {
        double t = std::log(params.phi[j]);
        jitter(t);
        params.phi[j] = std::exp(t);
      }
    }
  }
  validate_parameters(spec, params);
  return out;
}

// ---------------------------------------------------------------------------
// fit: multi-start quasi-Newton ascent.
// ---------------------------------------------------------------------------

FitResult fit(const ModelSpec& spec, const ResponseData& data,
              const FitConfig& config) {
  spec.validate();
  config.validate();
  validate_data(spec, data);
  const auto t0 = std::chrono::steady_clock::now();

  const CovStructure structure = config.resolve_structure(spec.p);
  auto objective = detail::make_packed_objective(config.method, spec, data, structure);
  const ParamLayout full_layout = ParamLayout::make(spec, structure, true);
  const ParamLayout psi_layout = ParamLayout::make(spec, structure, false);
  const bool variational = config.method != Method::Laplace;

  detail::LbfgsOptions opts;
  opts.max_iter = config.max_iter;
  opts.grad_tol = config.grad_tol;

  struct StartOutcome {
    detail::LbfgsResult lbfgs;
    bool ok = false;
  };
  std::vector<StartOutcome> outcomes(config.n_starts);
  std::vector<std::string> warnings;

  for (int s = 0; s < config.n_starts; ++s) {
    Initialization init = initialize(spec, data, config.seed, s);
    if (s == 0) warnings = init.warnings;
    Eigen::VectorXd theta0 = variational
                                 ? full_layout.pack(init.params, init.varparams)
                                 : psi_layout.pack(init.params, init.varparams);
    try {
      outcomes[s].lbfgs = detail::lbfgs_minimize(*objective, theta0, opts);
      outcomes[s].ok = true;
    } catch (const NumericError&) {
      outcomes[s].ok = false;
    }
  }

  int best = -1;
  for (int s = 0; s < config.n_starts; ++s) {
    if (!outcomes[s].ok) continue;
    if (best < 0) {
      best = s;
      continue;
    }
    const auto& a = outcomes[s].lbfgs;
    const auto& b = outcomes[best].lbfgs;
    if (a.f < b.f || (a.f == b.f && a.grad_norm < b.grad_norm)) best = s;
  }
  if (best < 0) {
    throw NumericError("fit: every start had a non-finite objective");
  }

  const detail::LbfgsResult& win = outcomes[best].lbfgs;
  FitResult result;
  result.spec = spec;
  result.method = config.method;
  result.a_structure = structure;
  result.objective = -win.f;
  result.iterations = win.iterations;
  result.grad_norm = win.grad_norm;
  result.converged = win.grad_norm <= config.grad_tol;
  result.warnings = std::move(warnings);

  if (variational) {
    full_layout.unpack(win.x, result.params, result.varparams);
  } else {
    psi_layout.unpack(win.x, result.params, result.varparams);
    // Report the Laplace modes and curvatures in the variational slots.
    const LaplaceModes modes = laplace_modes(spec, data, result.params);
    result.varparams.a = modes.scores;
    result.varparams.L.assign(spec.n, Eigen::MatrixXd::Zero(spec.p, spec.p));
    for (int i = 0; i < spec.n; ++i) {
      Eigen::LLT<Eigen::MatrixXd> llt(modes.cov[i]);
      result.varparams.L[i] =
          llt.info() == Eigen::Success
              ? Eigen::MatrixXd(llt.matrixL())
              : Eigen::MatrixXd(Eigen::MatrixXd::Identity(spec.p, spec.p));
    }
  }
  result.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace gllvm
