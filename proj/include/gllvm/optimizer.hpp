#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "gllvm/model.hpp"
#include "gllvm/objectives.hpp"

namespace gllvm {

enum class Method { Eva, Va, Laplace };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

/// How the variational covariance factors are structured during
/// optimization. Auto resolves to Full for p <= 5, Diagonal otherwise.
enum class AStructure { Auto, Full, Diagonal };

struct FitConfig {
  Method method = Method::Eva;
  int max_iter = 2000;
  double grad_tol = 1e-6;  ///< infinity norm of the packed gradient
  int n_starts = 3;
  std::uint64_t seed = 0;
  AStructure a_structure = AStructure::Auto;

  void validate() const;
  CovStructure resolve_structure(int p) const;
};

struct FitResult {
  Parameters params;
  VariationalParams varparams;  ///< for Laplace: mode scores and curvatures
  double objective = 0.0;
  bool converged = false;
  int iterations = 0;
  double grad_norm = 0.0;
  double wall_time_s = 0.0;
  std::vector<std::string> warnings;

  // Context needed downstream (inference, serialization).
  ModelSpec spec;
  Method method = Method::Eva;
  CovStructure a_structure = CovStructure::Full;
};

/// Starting values: per-response GLM fits for beta0/B/phi, loadings from the
/// top-p eigendecomposition of the correlation of GLM working residuals
/// (rotated onto the constraint set and scaled by 0.5), a = 0, A = 0.5 I.
/// Starts beyond the first are jittered with N(0, 0.05^2) noise keyed by
/// (seed, start index).
struct Initialization {
  Parameters params;
  VariationalParams varparams;
  std::vector<std::string> warnings;
};
Initialization initialize(const ModelSpec& spec, const ResponseData& data,
                          std::uint64_t seed, int start_index = 0);

/// Joint maximization of the selected objective over the packed free
/// parameters, best of n_starts. Non-convergence is reported through the
/// result, not an error; an error is raised only if every start has a
/// non-finite objective at its initial point.
FitResult fit(const ModelSpec& spec, const ResponseData& data,
              const FitConfig& config);

namespace detail {

/// Minimization interface used by the L-BFGS driver. Implementations
/// return +inf for infeasible/non-finite points instead of throwing.
class PackedObjective {
 public:
  virtual ~PackedObjective() = default;
  virtual int dim() const = 0;
  virtual double value(const Eigen::VectorXd& x) = 0;
  virtual double value_and_gradient(const Eigen::VectorXd& x,
                                    Eigen::VectorXd& grad) = 0;
};

struct LbfgsOptions {
  int max_iter = 2000;
  double grad_tol = 1e-6;
  int memory = 10;
  double rel_change_tol = 1e-10;  ///< over rel_change_window iterations
  int rel_change_window = 5;
  int max_line_search = 40;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool grad_converged = false;
};

LbfgsResult lbfgs_minimize(PackedObjective& objective, const Eigen::VectorXd& x0,
                           const LbfgsOptions& options);

/// Factory for the packed view of each supported objective (negated, for
/// minimization). Laplace objectives carry a warm-start cache of the inner
/// modes.
std::unique_ptr<PackedObjective> make_packed_objective(
    Method method, const ModelSpec& spec, const ResponseData& data,
    CovStructure a_structure);

}  // namespace detail

}  // namespace gllvm
