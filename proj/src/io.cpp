#include "gllvm/io.hpp"

#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace gllvm {

namespace {

Json matrix_to_json(const Eigen::MatrixXd& M) {
  Json rows = Json::array();
  for (int i = 0; i < M.rows(); ++i) {
    Json row = Json::array();
    for (int j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const Json& j, int expect_cols = -1) {
  if (!j.is_array()) throw IoError("expected a JSON array of rows");
  const int rows = static_cast<int>(j.size());
  int cols = expect_cols;
  if (rows > 0) cols = static_cast<int>(j[0].size());
  if (cols < 0) cols = 0;
  Eigen::MatrixXd M(rows, cols);
  for (int i = 0; i < rows; ++i) {
    if (static_cast<int>(j[i].size()) != cols) {
      throw IoError("ragged JSON matrix at row " + std::to_string(i));
    }
    for (int k = 0; k < cols; ++k) M(i, k) = j[i][k].get<double>();
  }
  return M;
}

Json vector_to_json(const Eigen::VectorXd& v) {
  Json arr = Json::array();
  for (int i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

Eigen::VectorXd vector_from_json(const Json& j) {
  Eigen::VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<int>(i)] = j[i].get<double>();
  return v;
}

}  // namespace

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

void write_json_file(const std::string& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line,
                                        const std::string& path, int lineno) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c == '\r') {
      // tolerate CRLF
    } else {
      cur += c;
    }
  }
  if (quoted) {
    throw IoError(path + ":" + std::to_string(lineno) + ": unterminated quote");
  }
  fields.push_back(cur);
  return fields;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open CSV file: " + path);
  CsvTable table;
  std::string line;
  int lineno = 0;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() && in.eof()) break;
    const std::vector<std::string> fields = split_csv_line(line, path, lineno);
    if (lineno == 1) {
      table.header = fields;
      continue;
    }
    if (fields.size() == 1 && fields[0].empty()) continue;  // blank line
    if (fields.size() != table.header.size()) {
      throw IoError(path + ":" + std::to_string(lineno) + ": expected " +
                    std::to_string(table.header.size()) + " fields, found " +
                    std::to_string(fields.size()));
    }
    std::vector<double> row(fields.size());
    for (std::size_t k = 0; k < fields.size(); ++k) {
      try {
        std::size_t pos = 0;
        row[k] = std::stod(fields[k], &pos);
        while (pos < fields[k].size() && std::isspace(static_cast<unsigned char>(fields[k][pos]))) ++pos;
        if (pos != fields[k].size()) throw std::invalid_argument("trailing junk");
      } catch (const std::exception&) {
        throw IoError(path + ":" + std::to_string(lineno) + ": field " +
                      std::to_string(k + 1) + " ('" + fields[k] +
                      "') is not a number");
      }
    }
    rows.push_back(std::move(row));
  }
  if (table.header.empty()) throw IoError(path + ": missing header row");
  table.values.resize(static_cast<int>(rows.size()),
                      static_cast<int>(table.header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t k = 0; k < rows[i].size(); ++k) {
      table.values(static_cast<int>(i), static_cast<int>(k)) = rows[i][k];
    }
  }
  return table;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const Eigen::MatrixXd& values) {
  if (static_cast<int>(header.size()) != values.cols()) {
    throw DimensionError("write_csv: header length must match column count");
  }
  std::ostringstream out;
  for (std::size_t k = 0; k < header.size(); ++k) {
    if (k) out << ',';
    out << csv_escape(header[k]);
  }
  out << '\n';
  for (int i = 0; i < values.rows(); ++i) {
    for (int k = 0; k < values.cols(); ++k) {
      if (k) out << ',';
      out << format_double(values(i, k));
    }
    out << '\n';
  }
  write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------
// JSON round trips
// ---------------------------------------------------------------------------

Json to_json(const Parameters& params) {
  Json j;
  j["beta0"] = vector_to_json(params.beta0);
  j["B"] = matrix_to_json(params.B);
  j["Gamma"] = matrix_to_json(params.Gamma);
  j["phi"] = vector_to_json(params.phi);
  j["alpha"] = vector_to_json(params.alpha);
  j["nu"] = params.nu;
  return j;
}

Parameters parameters_from_json(const Json& j) {
  Parameters p;
  p.beta0 = vector_from_json(j.at("beta0"));
  p.B = matrix_from_json(j.at("B"));
  p.Gamma = matrix_from_json(j.at("Gamma"));
  p.phi = vector_from_json(j.at("phi"));
  p.alpha = vector_from_json(j.at("alpha"));
  p.nu = j.value("nu", 1.5);
  if (p.B.rows() == 0 && p.beta0.size() > 0) p.B.resize(p.beta0.size(), 0);
  return p;
}

Json to_json(const VariationalParams& vp) {
  Json j;
  j["a"] = matrix_to_json(vp.a);
  Json L = Json::array();
  for (const auto& Li : vp.L) L.push_back(matrix_to_json(Li));
  j["L"] = std::move(L);
  return j;
}

VariationalParams varparams_from_json(const Json& j) {
  VariationalParams vp;
  vp.a = matrix_from_json(j.at("a"));
  for (const auto& Lj : j.at("L")) vp.L.push_back(matrix_from_json(Lj));
  return vp;
}

Json to_json(const ModelSpec& spec) {
  Json j;
  j["family"] = family_name(spec.family);
  j["n"] = spec.n;
  j["m"] = spec.m;
  j["p"] = spec.p;
  j["q"] = spec.q;
  j["row_effects"] = spec.row_effects;
  if (spec.family == Family::TweedieLog) j["tweedie_power"] = spec.tweedie_power;
  return j;
}

ModelSpec spec_from_json(const Json& j) {
  ModelSpec s;
  s.family = family_from_name(j.at("family").get<std::string>());
  s.n = j.at("n").get<int>();
  s.m = j.at("m").get<int>();
  s.p = j.at("p").get<int>();
  s.q = j.at("q").get<int>();
  s.row_effects = j.value("row_effects", false);
  s.tweedie_power = j.value("tweedie_power", 1.5);
  s.validate();
  return s;
}

namespace {

std::string a_structure_name(AStructure s) {
  switch (s) {
    case AStructure::Auto: return "auto";
    case AStructure::Full: return "full";
    case AStructure::Diagonal: return "diagonal";
  }
  return "auto";
}

AStructure a_structure_from_name(const std::string& s) {
  if (s == "auto") return AStructure::Auto;
  if (s == "full") return AStructure::Full;
  if (s == "diagonal") return AStructure::Diagonal;
  throw ConfigError("unknown a_structure '" + s + "'; expected auto, full or diagonal");
}

}  // namespace

Json to_json(const FitConfig& config) {
  Json j;
  j["method"] = method_name(config.method);
  j["max_iter"] = config.max_iter;
  j["grad_tol"] = config.grad_tol;
  j["n_starts"] = config.n_starts;
  j["seed"] = config.seed;
  j["a_structure"] = a_structure_name(config.a_structure);
  return j;
}

FitConfig fit_config_from_json(const Json& j) {
  FitConfig c;
  if (j.contains("method")) c.method = method_from_name(j.at("method").get<std::string>());
  c.max_iter = j.value("max_iter", c.max_iter);
  c.grad_tol = j.value("grad_tol", c.grad_tol);
  c.n_starts = j.value("n_starts", c.n_starts);
  c.seed = j.value("seed", c.seed);
  if (j.contains("a_structure")) {
    c.a_structure = a_structure_from_name(j.at("a_structure").get<std::string>());
  }
  c.validate();
  return c;
}

Json to_json(const StudyConfig& config) {
  Json j;
  j["family"] = family_name(config.family);
  j["p"] = config.p;
  j["q"] = config.q;
  if (config.family == Family::TweedieLog) j["tweedie_power"] = config.tweedie_power;
  j["n_grid"] = config.n_grid;
  j["m_grid"] = config.m_grid;
  j["n_replicates"] = config.n_replicates;
  Json methods = Json::array();
  for (Method m : config.methods) methods.push_back(method_name(m));
  j["methods"] = std::move(methods);
  j["seed"] = config.seed;
  j["truth"] = config.truth == TruthSource::Synthetic ? "synthetic" : "file";
  if (config.truth == TruthSource::File) j["truth_file"] = config.truth_file;
  j["coverage"] = config.coverage;
  j["fit"] = to_json(config.fit_config);
  return j;
}

StudyConfig study_config_from_json(const Json& j) {
  StudyConfig c;
  c.family = family_from_name(j.at("family").get<std::string>());
  c.p = j.value("p", c.p);
  c.q = j.value("q", c.q);
  c.tweedie_power = j.value("tweedie_power", c.tweedie_power);
  if (j.contains("n_grid")) c.n_grid = j.at("n_grid").get<std::vector<int>>();
  if (j.contains("m_grid")) c.m_grid = j.at("m_grid").get<std::vector<int>>();
  c.n_replicates = j.value("n_replicates", c.n_replicates);
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& mj : j.at("methods")) {
      c.methods.push_back(method_from_name(mj.get<std::string>()));
    }
  }
  c.seed = j.value("seed", c.seed);
  if (j.contains("truth")) {
    const std::string t = j.at("truth").get<std::string>();
    if (t == "synthetic") c.truth = TruthSource::Synthetic;
    else if (t == "file") c.truth = TruthSource::File;
    else throw ConfigError("unknown truth source '" + t + "'");
  }
  c.truth_file = j.value("truth_file", std::string());
  c.coverage = j.value("coverage", c.coverage);
  if (j.contains("fit")) c.fit_config = fit_config_from_json(j.at("fit"));
  c.validate();
  return c;
}

Json fit_to_json(const FitResult& fit) {
  Json j;
  j["spec"] = to_json(fit.spec);
  j["method"] = method_name(fit.method);
  j["a_structure"] = fit.a_structure == CovStructure::Full ? "full" : "diagonal";
  j["parameters"] = to_json(fit.params);
  j["variational"] = to_json(fit.varparams);
  j["objective"] = fit.objective;
  j["converged"] = fit.converged;
  j["iterations"] = fit.iterations;
  j["grad_norm"] = fit.grad_norm;
  j["warnings"] = fit.warnings;
  return j;
}

FitResult fit_from_json(const Json& j) {
  FitResult fit;
  fit.spec = spec_from_json(j.at("spec"));
  fit.method = method_from_name(j.at("method").get<std::string>());
  fit.a_structure = j.at("a_structure").get<std::string>() == "full"
                        ? CovStructure::Full
                        : CovStructure::Diagonal;
  fit.params = parameters_from_json(j.at("parameters"));
  fit.varparams = varparams_from_json(j.at("variational"));
  fit.objective = j.at("objective").get<double>();
  fit.converged = j.at("converged").get<bool>();
  fit.iterations = j.at("iterations").get<int>();
  fit.grad_norm = j.at("grad_norm").get<double>();
  fit.warnings = j.value("warnings", std::vector<std::string>{});
  return fit;
}

Json to_json(const InferenceReport& report) {
  Json j;
  Json estimates = Json::array();
  for (const ParamEstimate& e : report.estimates) {
    Json ej;
    ej["name"] = e.name;
    ej["estimate"] = e.estimate;
    ej["se"] = e.se;
    ej["ci_lower"] = e.ci_lower;
    ej["ci_upper"] = e.ci_upper;
    ej["log_scale"] = e.log_scale;
    estimates.push_back(std::move(ej));
  }
  j["estimates"] = std::move(estimates);
  j["info_condition"] = report.info_condition;
  j["notes"] = report.notes;
  return j;
}

namespace {

Json cell_to_json(const StudyCell& cell) {
  Json j;
  j["method"] = method_name(cell.method);
  j[cell.vary_n ? "n" : "m"] = cell.grid_value;
  j["n_ok"] = cell.n_ok;
  j["n_failed"] = cell.n_failed;
  j["n_not_converged"] = cell.n_not_converged;
  j["slope_bias"] = cell.slope_bias;
  j["slope_rmse"] = cell.slope_rmse;
  j["intercept_bias"] = cell.intercept_bias;
  j["intercept_rmse"] = cell.intercept_rmse;
  j["dispersion_bias"] = cell.dispersion_bias;
  j["dispersion_rmse"] = cell.dispersion_rmse;
  j["coverage_slopes"] = cell.coverage_slopes;
  j["procrustes_scores"] = cell.procrustes_scores;
  j["procrustes_loadings"] = cell.procrustes_loadings;
  j["mean_time_s"] = cell.mean_time_s;
  return j;
}

}  // namespace

Json to_json(const StudyReport& report) {
  Json j;
  j["config"] = to_json(report.config);
  Json cells = Json::array();
  for (const StudyCell& c : report.cells) cells.push_back(cell_to_json(c));
  j["cells"] = std::move(cells);
  return j;
}

void write_study_csv(const std::string& path, const StudyReport& report) {
  const bool vary_n = report.config.varies_n();
  std::vector<std::string> header = {
      "method", vary_n ? "n" : "m", "n_ok", "n_failed", "n_not_converged",
      "slope_bias", "slope_rmse", "intercept_bias", "intercept_rmse",
      "dispersion_bias", "dispersion_rmse", "coverage_slopes",
      "procrustes_scores", "procrustes_loadings", "mean_time_s"};
  std::ostringstream out;
  for (std::size_t k = 0; k < header.size(); ++k) {
    if (k) out << ',';
    out << header[k];
  }
  out << '\n';
  for (const StudyCell& c : report.cells) {
    out << method_name(c.method) << ',' << c.grid_value << ',' << c.n_ok << ','
        << c.n_failed << ',' << c.n_not_converged << ',' << format_double(c.slope_bias)
        << ',' << format_double(c.slope_rmse) << ',' << format_double(c.intercept_bias)
        << ',' << format_double(c.intercept_rmse) << ','
        << format_double(c.dispersion_bias) << ',' << format_double(c.dispersion_rmse)
        << ',' << format_double(c.coverage_slopes) << ','
        << format_double(c.procrustes_scores) << ','
        << format_double(c.procrustes_loadings) << ','
        << format_double(c.mean_time_s) << '\n';
  }
  write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------
// TOML subset
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

Json parse_toml_scalar(const std::string& raw, const std::string& origin, int lineno) {
  const std::string v = trim(raw);
  if (v.empty()) throw IoError(origin + ":" + std::to_string(lineno) + ": empty value");
  if (v.front() == '"' && v.back() == '"' && v.size() >= 2) {
    return Json(v.substr(1, v.size() - 2));
  }
  if (v == "true") return Json(true);
  if (v == "false") return Json(false);
  try {
    std::size_t pos = 0;
    if (v.find_first_of(".eE") != std::string::npos) {
      const double d = std::stod(v, &pos);
      if (pos == v.size()) return Json(d);
    } else {
      const long long n = std::stoll(v, &pos);
      if (pos == v.size()) return Json(n);
    }
  } catch (const std::exception&) {
  }
  throw IoError(origin + ":" + std::to_string(lineno) + ": cannot parse value '" + v + "'");
}

}  // namespace

Json parse_toml(const std::string& text, const std::string& origin) {
  Json root = Json::object();
  Json* current = &root;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw IoError(origin + ":" + std::to_string(lineno) + ": malformed table header");
      }
      const std::string name = trim(line.substr(1, line.size() - 2));
      root[name] = Json::object();
      current = &root[name];
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw IoError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (!value.empty() && value.front() == '[') {
      if (value.back() != ']') {
        throw IoError(origin + ":" + std::to_string(lineno) + ": unterminated array");
      }
      Json arr = Json::array();
      std::string body = value.substr(1, value.size() - 2);
      std::string item;
      std::istringstream items(body);
      while (std::getline(items, item, ',')) {
        if (trim(item).empty()) continue;
        arr.push_back(parse_toml_scalar(item, origin, lineno));
      }
      (*current)[key] = std::move(arr);
    } else {
      (*current)[key] = parse_toml_scalar(value, origin, lineno);
    }
  }
  return root;
}

Json read_config_file(const std::string& path) {
  const std::string text = read_text_file(path);
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".toml") {
    return parse_toml(text, path);
  }
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path + ": " + e.what());
  }
}

std::string file_digest(const std::string& path) {
  const std::string bytes = read_text_file(path);
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace gllvm
