#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "gllvm/inference.hpp"
#include "gllvm/simulation.hpp"

namespace gllvm {

using Json = nlohmann::ordered_json;

/// A parsed CSV: one header row, one observational unit per data row.
struct CsvTable {
  std::vector<std::string> header;
  Eigen::MatrixXd values;
};

/// RFC-4180-style reader (quoted fields, escaped quotes). Errors carry the
/// path and 1-based line number.
CsvTable read_csv(const std::string& path);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const Eigen::MatrixXd& values);

/// JSON round-trip of the core value types with explicit field names.
Json to_json(const Parameters& params);
Parameters parameters_from_json(const Json& j);
Json to_json(const VariationalParams& vp);
VariationalParams varparams_from_json(const Json& j);
Json to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const Json& j);

/// FitConfig keys: method, max_iter, grad_tol, n_starts, seed, a_structure
/// ("auto" | "full" | "diagonal").
Json to_json(const FitConfig& config);
FitConfig fit_config_from_json(const Json& j);

/// StudyConfig keys: family, p, q, tweedie_power, n_grid, m_grid,
/// n_replicates, methods, seed, truth ("synthetic" | "file"), truth_file,
/// coverage, fit (nested FitConfig).
Json to_json(const StudyConfig& config);
StudyConfig study_config_from_json(const Json& j);

/// fit.json payload: spec, estimates, variational parameters, objective and
/// convergence diagnostics. Wall time is deliberately excluded so reruns
/// are byte-identical; it is recorded in the manifest instead.
Json fit_to_json(const FitResult& fit);
FitResult fit_from_json(const Json& j);

Json to_json(const InferenceReport& report);
Json to_json(const StudyReport& report);

/// study.csv: one row per method x grid point.
void write_study_csv(const std::string& path, const StudyReport& report);

/// Reads a config file as JSON; files ending in .toml go through the
/// bundled TOML subset reader (tables, strings, numbers, booleans, arrays).
Json read_config_file(const std::string& path);
Json parse_toml(const std::string& text, const std::string& origin);

/// FNV-1a 64-bit digest of a file's bytes, as 16 hex characters.
std::string file_digest(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

/// Serialize with a trailing newline, 2-space indent, stable key order.
void write_json_file(const std::string& path, const Json& j);

}  // namespace gllvm
