#include "gllvm/simulation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "gllvm/inference.hpp"
#include "gllvm/io.hpp"
#include "gllvm/parallel.hpp"
#include "gllvm/rng.hpp"

namespace gllvm {

namespace {

double sample_response(Rng& rng, Family family, double mu, double phi, double nu) {
  switch (family) {
    case Family::GaussianIdentity:
      return mu + phi * rng.normal();
    case Family::PoissonLog:
      return static_cast<double>(rng.poisson(mu));
    case Family::NegBinomialLog: {
      const double lambda = rng.gamma(1.0 / phi, 1.0 / (phi * mu));
      return static_cast<double>(rng.poisson(lambda));
    }
    case Family::BernoulliLogit:
    case Family::BernoulliProbit:
      return rng.bernoulli(mu) ? 1.0 : 0.0;
    case Family::TweedieLog: {
      const double lambda0 = std::pow(mu, 2.0 - nu) / (phi * (2.0 - nu));
      const double shape = (2.0 - nu) / (nu - 1.0);
      const double rate = 1.0 / (phi * (nu - 1.0) * std::pow(mu, nu - 1.0));
      const long N = rng.poisson(lambda0);
      return N == 0 ? 0.0 : rng.gamma(N * shape, rate);
    }
    case Family::BetaLogit: {
      double y = rng.beta(mu * phi, (1.0 - mu) * phi);
      // keep strictly inside the open interval in double precision
      return std::min(1.0 - 1e-12, std::max(1e-12, y));
    }
  }
  throw ConfigError("unknown family");
}

}  // namespace

ResponseData simulate_dataset(const ModelSpec& spec, const Parameters& params,
                              std::uint64_t seed, const Eigen::MatrixXd* X,
                              const Eigen::MatrixXd* scores,
                              Eigen::MatrixXd* out_scores) {
  spec.validate();
  validate_parameters(spec, params);
  Rng rng(seed, 0x73696Du);

  ResponseData data;
  if (spec.q > 0) {
    if (X != nullptr) {
      if (X->rows() != spec.n || X->cols() != spec.q) {
        throw DimensionError("simulate_dataset: X must be n x q");
      }
      data.X = *X;
    } else {
      data.X.resize(spec.n, spec.q);
      for (int i = 0; i < spec.n; ++i) {
        for (int k = 0; k < spec.q; ++k) data.X(i, k) = rng.normal();
      }
    }
  } else {
    data.X.resize(spec.n, 0);
  }

  Eigen::MatrixXd u(spec.n, spec.p);
  if (scores != nullptr) {
    if (scores->rows() != spec.n || scores->cols() != spec.p) {
      throw DimensionError("simulate_dataset: scores must be n x p");
    }
    u = *scores;
  } else {
    for (int i = 0; i < spec.n; ++i) {
      for (int d = 0; d < spec.p; ++d) u(i, d) = rng.normal();
    }
  }
  if (out_scores != nullptr) *out_scores = u;

  const Eigen::MatrixXd eta = linear_predictor(spec, params, data.X, u);
  data.Y.resize(spec.n, spec.m);
  for (int i = 0; i < spec.n; ++i) {
    for (int j = 0; j < spec.m; ++j) {
      const double mu = family_mean(spec.family, eta(i, j));
      const double phi = spec.has_dispersion() ? params.phi[j] : 1.0;
      data.Y(i, j) = sample_response(rng, spec.family, mu, phi, params.nu);
    }
  }
  return data;
}

Parameters synthetic_truth(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed, 0x747275u);
  Parameters params;
  params.beta0.resize(spec.m);
  params.B.resize(spec.m, spec.q);
  params.Gamma = Eigen::MatrixXd::Zero(spec.m, spec.p);
  params.nu = spec.tweedie_power;
  for (int j = 0; j < spec.m; ++j) {
    params.beta0[j] = rng.uniform(-1.0, 1.0);
    for (int k = 0; k < spec.q; ++k) params.B(j, k) = rng.uniform(-1.0, 1.0);
  }
  for (int k = 0; k < spec.p; ++k) {
    params.Gamma(k, k) = rng.uniform(0.7, 1.3);
    for (int j = k + 1; j < spec.m; ++j) {
      params.Gamma(j, k) = rng.uniform(-0.5, 0.5);
    }
  }
  if (spec.has_dispersion()) {
    params.phi.resize(spec.m);
    const bool beta = spec.family == Family::BetaLogit;
    for (int j = 0; j < spec.m; ++j) {
      params.phi[j] = beta ? rng.uniform(1.0, 3.0) : rng.uniform(0.5, 1.5);
    }
  }
  if (spec.row_effects) params.alpha = Eigen::VectorXd::Zero(spec.n);
  return params;
}

double procrustes_error(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& est) {
  if (truth.rows() != est.rows() || truth.cols() != est.cols()) {
    throw DimensionError("procrustes_error: configurations must have equal shape");
  }
  Eigen::MatrixXd T = truth.rowwise() - truth.colwise().mean();
  Eigen::MatrixXd E = est.rowwise() - est.colwise().mean();
  const double t_norm2 = T.squaredNorm();
  const double e_norm2 = E.squaredNorm();
  if (!(t_norm2 > 0.0) || !(e_norm2 > 0.0)) {
    throw DomainError("procrustes_error: zero-norm configuration after centering");
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(E.transpose() * T,
                                        Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::MatrixXd R = svd.matrixU() * svd.matrixV().transpose();
  const double scale = svd.singularValues().sum() / e_norm2;
  return (T - scale * E * R).squaredNorm() / t_norm2;
}

void StudyConfig::validate() const {
  if (n_grid.empty() || m_grid.empty()) {
    throw ConfigError("StudyConfig: n_grid and m_grid must be non-empty");
  }
  if (n_grid.size() > 1 && m_grid.size() > 1) {
    throw ConfigError("StudyConfig: exactly one of n_grid/m_grid may vary");
  }
  if (n_replicates < 1) throw ConfigError("StudyConfig: n_replicates must be positive");
  if (methods.empty()) throw ConfigError("StudyConfig: at least one method required");
  for (int v : n_grid) {
    if (v < 1) throw ConfigError("StudyConfig: grid entries must be positive");
  }
  for (int v : m_grid) {
    if (v < 1) throw ConfigError("StudyConfig: grid entries must be positive");
  }
  if (truth == TruthSource::File && truth_file.empty()) {
    throw ConfigError("StudyConfig: truth_file required when truth source is file");
  }
}

namespace {

struct ReplicateMetrics {
  bool failed = false;
  bool not_converged = false;
  double slope_bias_sum = 0.0, slope_sq_sum = 0.0;
  int slope_count = 0;
  double intercept_bias_sum = 0.0, intercept_sq_sum = 0.0;
  int intercept_count = 0;
  double dispersion_bias_sum = 0.0, dispersion_sq_sum = 0.0;
  int dispersion_count = 0;
  int covered = 0, cover_total = 0;
  double proc_scores = 0.0, proc_loadings = 0.0;
  double time_s = 0.0;
};

Parameters subsample_truth(const Parameters& full, const ModelSpec& spec_small,
                           const std::vector<int>& keep) {
  Parameters out;
  const int m = static_cast<int>(keep.size());
  out.beta0.resize(m);
  out.B.resize(m, full.B.cols());
  out.Gamma.resize(m, full.Gamma.cols());
  if (full.phi.size() > 0) out.phi.resize(m);
  out.nu = full.nu;
  for (int j = 0; j < m; ++j) {
    out.beta0[j] = full.beta0[keep[j]];
    out.B.row(j) = full.B.row(keep[j]);
    out.Gamma.row(j) = full.Gamma.row(keep[j]);
    if (full.phi.size() > 0) out.phi[j] = full.phi[keep[j]];
  }
  // Restore the constraint pattern: rotate so the leading block is lower
  // triangular with a positive diagonal (the induced model is unchanged).
  const int p = static_cast<int>(out.Gamma.cols());
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(out.Gamma.topRows(p).transpose());
  Eigen::MatrixXd Q = qr.householderQ();
  out.Gamma = out.Gamma * Q;
  for (int k = 0; k < p; ++k) {
    if (out.Gamma(k, k) < 0.0) out.Gamma.col(k) = -out.Gamma.col(k);
    out.Gamma(k, k) = std::max(out.Gamma(k, k), 1e-3);
    for (int j = 0; j < k; ++j) out.Gamma(j, k) = 0.0;
  }
  (void)spec_small;
  return out;
}

}  // namespace

StudyReport run_study(const StudyConfig& config) {
  config.validate();
  StudyReport report;
  report.config = config;

  const bool vary_n = config.varies_n();
  const std::vector<int>& grid = vary_n ? config.n_grid : config.m_grid;
  const int fixed_n = config.n_grid[0];
  const int fixed_m = config.m_grid[0];
  const int m_max = vary_n ? fixed_m : *std::max_element(grid.begin(), grid.end());

  ModelSpec truth_spec;
  truth_spec.family = config.family;
  truth_spec.p = config.p;
  truth_spec.q = config.q;
  truth_spec.tweedie_power = config.tweedie_power;
  truth_spec.n = std::max(fixed_n, 2);
  truth_spec.m = m_max;

  Parameters truth_full;
  if (config.truth == TruthSource::Synthetic) {
    truth_full = synthetic_truth(truth_spec, config.seed);
  } else {
    truth_full =
        parameters_from_json(Json::parse(read_text_file(config.truth_file)));
    truth_full.nu = config.tweedie_power;
    if (truth_full.beta0.size() != m_max || truth_full.Gamma.cols() != config.p ||
        truth_full.B.cols() != config.q) {
      throw ConfigError("run_study: truth file dimensions do not match the study");
    }
  }

  for (std::size_t gi = 0; gi < grid.size(); ++gi) {
    ModelSpec spec = truth_spec;
    spec.n = vary_n ? grid[gi] : fixed_n;
    spec.m = vary_n ? fixed_m : grid[gi];
    spec.validate();

    Parameters truth = truth_full;
    if (!vary_n && spec.m < m_max) {
      // Subsample responses, mirroring the protocol of keeping a random
      // subset of the full parameter set.
      Rng pick(config.seed, 0x6D73u, static_cast<std::uint64_t>(gi));
      std::vector<int> keep(m_max);
      for (int j = 0; j < m_max; ++j) keep[j] = j;
      for (int j = m_max - 1; j > 0; --j) {
        const int k = static_cast<int>(pick.next_u64() % (j + 1));
        std::swap(keep[j], keep[k]);
      }
      keep.resize(spec.m);
      std::sort(keep.begin(), keep.end());
      truth = subsample_truth(truth_full, spec, keep);
    }

    const int n_methods = static_cast<int>(config.methods.size());
    std::vector<std::vector<ReplicateMetrics>> metrics(
        n_methods, std::vector<ReplicateMetrics>(config.n_replicates));

    parallel_for(config.n_replicates, [&](int r) {
      Eigen::MatrixXd u_true;
      const std::uint64_t rep_seed =
          Rng(config.seed, static_cast<std::uint64_t>(gi),
              static_cast<std::uint64_t>(r))
              .next_u64();
      const ResponseData data =
          simulate_dataset(spec, truth, rep_seed, nullptr, nullptr, &u_true);

      for (int mi = 0; mi < n_methods; ++mi) {
        ReplicateMetrics& rm = metrics[mi][r];
        FitConfig fc = config.fit_config;
        fc.method = config.methods[mi];
        fc.seed = Rng(config.seed, static_cast<std::uint64_t>(gi),
                      static_cast<std::uint64_t>(r), 1000u + mi)
                      .next_u64();
        FitResult fit_result;
        try {
          const auto t0 = std::chrono::steady_clock::now();
          fit_result = fit(spec, data, fc);
          rm.time_s = std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        } catch (const Error&) {
          rm.failed = true;
          continue;
        }
        if (!std::isfinite(fit_result.objective)) {
          // Paper-style failure: no finite objective value.
          rm.failed = true;
          continue;
        }
        rm.not_converged = !fit_result.converged;

        for (int j = 0; j < spec.m; ++j) {
          for (int k = 0; k < spec.q; ++k) {
            const double d = fit_result.params.B(j, k) - truth.B(j, k);
            rm.slope_bias_sum += d;
            rm.slope_sq_sum += d * d;
            ++rm.slope_count;
          }
          const double di = fit_result.params.beta0[j] - truth.beta0[j];
          rm.intercept_bias_sum += di;
          rm.intercept_sq_sum += di * di;
          ++rm.intercept_count;
          if (spec.has_dispersion()) {
            const double dd = fit_result.params.phi[j] - truth.phi[j];
            rm.dispersion_bias_sum += dd;
            rm.dispersion_sq_sum += dd * dd;
            ++rm.dispersion_count;
          }
        }
        try {
          rm.proc_scores = procrustes_error(u_true, fit_result.varparams.a);
          rm.proc_loadings = procrustes_error(truth.Gamma, fit_result.params.Gamma);
        } catch (const Error&) {
          rm.proc_scores = rm.proc_loadings = std::numeric_limits<double>::quiet_NaN();
        }

        if (config.coverage && spec.q > 0) {
          try {
            const ObservedInformation info = observed_information(fit_result, data);
            const InferenceReport rep = wald(fit_result, info);
            for (const ParamEstimate& e : rep.estimates) {
              if (e.name.rfind("B[", 0) != 0) continue;
              // name B[j,k]
              const auto comma = e.name.find(',');
              const int j = std::stoi(e.name.substr(2, comma - 2));
              const int k = std::stoi(
                  e.name.substr(comma + 1, e.name.size() - comma - 2));
              if (std::isfinite(e.se)) {
                ++rm.cover_total;
                if (truth.B(j, k) >= e.ci_lower && truth.B(j, k) <= e.ci_upper) {
                  ++rm.covered;
                }
              }
            }
          } catch (const Error&) {
            // leave coverage counts empty for this replicate
          }
        }
      }
    }, 1);

    for (int mi = 0; mi < n_methods; ++mi) {
      StudyCell cell;
      cell.method = config.methods[mi];
      cell.grid_value = grid[gi];
      cell.vary_n = vary_n;
      double sb = 0.0, ss = 0.0, ib = 0.0, is = 0.0, db = 0.0, ds = 0.0;
      long nsl = 0, nin = 0, ndi = 0;
      long covered = 0, cover_total = 0;
      double ps = 0.0, pl = 0.0, time_sum = 0.0;
      int n_proc = 0;
      for (const ReplicateMetrics& rm : metrics[mi]) {
        if (rm.failed) {
          ++cell.n_failed;
          continue;
        }
        ++cell.n_ok;
        if (rm.not_converged) ++cell.n_not_converged;
        sb += rm.slope_bias_sum;
        ss += rm.slope_sq_sum;
        nsl += rm.slope_count;
        ib += rm.intercept_bias_sum;
        is += rm.intercept_sq_sum;
        nin += rm.intercept_count;
        db += rm.dispersion_bias_sum;
        ds += rm.dispersion_sq_sum;
        ndi += rm.dispersion_count;
        covered += rm.covered;
        cover_total += rm.cover_total;
        if (std::isfinite(rm.proc_scores)) {
          ps += rm.proc_scores;
          pl += rm.proc_loadings;
          ++n_proc;
        }
        time_sum += rm.time_s;
      }
      const double nan = std::numeric_limits<double>::quiet_NaN();
      cell.slope_bias = nsl > 0 ? sb / nsl : nan;
      cell.slope_rmse = nsl > 0 ? std::sqrt(ss / nsl) : nan;
      cell.intercept_bias = nin > 0 ? ib / nin : nan;
      cell.intercept_rmse = nin > 0 ? std::sqrt(is / nin) : nan;
      cell.dispersion_bias = ndi > 0 ? db / ndi : nan;
      cell.dispersion_rmse = ndi > 0 ? std::sqrt(ds / ndi) : nan;
      cell.coverage_slopes = cover_total > 0
                                 ? static_cast<double>(covered) / cover_total
                                 : nan;
      cell.procrustes_scores = n_proc > 0 ? ps / n_proc : nan;
      cell.procrustes_loadings = n_proc > 0 ? pl / n_proc : nan;
      cell.mean_time_s = cell.n_ok > 0 ? time_sum / cell.n_ok : nan;
      report.cells.push_back(cell);
    }
  }
  return report;
}

}  // namespace gllvm
