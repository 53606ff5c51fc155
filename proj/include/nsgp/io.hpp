#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nsgp/error.hpp"
#include "nsgp/grid.hpp"
#include "nsgp/model.hpp"
#include "nsgp/optimizer.hpp"

namespace nsgp::io {

using json = nlohmann::json;

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const char* begin = s.data();
  if (begin != end && *begin == '+') ++begin;
  const auto res = std::from_chars(begin, end, v);
  if (res.ec != std::errc() || res.ptr != end) return std::nullopt;
  return v;
}

/// n1 x n2 values in row-major order; NaN marks an `NA` token.
struct GridFile {
  int n1 = 0;
  int n2 = 0;
  std::vector<double> values;
};

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("file-not-found", "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw validation_error("file-write", "cannot write " + path);
  out << text;
  if (!out) throw validation_error("file-write", "write failed for " + path);
}

inline GridFile parse_grid(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  GridFile g;
  std::string a, b;
  if (!(in >> a >> b)) throw validation_error("file-parse", source + ": missing `n1 n2` header");
  try {
    std::size_t pa = 0, pb = 0;
    g.n1 = std::stoi(a, &pa);
    g.n2 = std::stoi(b, &pb);
    if (pa != a.size() || pb != b.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw validation_error("file-parse", source + ": header must be two integers, got `" + a + " " + b + "`");
  }
  if (g.n1 < 1 || g.n2 < 1) throw validation_error("file-parse", source + ": grid dimensions must be >= 1");
  const std::size_t total = static_cast<std::size_t>(g.n1) * g.n2;
  g.values.reserve(total);
  std::string tok;
  while (in >> tok) {
    if (g.values.size() == total) throw validation_error("file-parse", source + ": more than n1*n2 values");
    if (tok == "NA") {
      g.values.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const auto v = parse_double(tok);
    if (!v || !std::isfinite(*v)) {
      throw validation_error("file-parse", source + ": bad value `" + tok + "` at position " +
                                               std::to_string(g.values.size()));
    }
    g.values.push_back(*v);
  }
  if (g.values.size() != total) {
    throw validation_error("file-parse", source + ": expected " + std::to_string(total) + " values, found " +
                                             std::to_string(g.values.size()));
  }
  return g;
}

inline GridFile read_grid(const std::string& path) { return parse_grid(read_text(path), path); }

inline std::string format_grid(int n1, int n2, const std::vector<double>& values) {
  if (values.size() != static_cast<std::size_t>(n1) * n2) {
    throw validation_error("dimension-mismatch", "grid values do not match n1*n2");
  }
  std::string out = std::to_string(n1) + " " + std::to_string(n2) + "\n";
  for (int r = 0; r < n1; ++r) {
    for (int c = 0; c < n2; ++c) {
      const double v = values[static_cast<std::size_t>(r) * n2 + c];
      if (c) out += ' ';
      out += std::isnan(v) ? std::string("NA") : format_double(v);
    }
    out += '\n';
  }
  return out;
}

inline void write_grid(const std::string& path, int n1, int n2, const std::vector<double>& values) {
  write_text(path, format_grid(n1, n2, values));
}

/// Data field plus covariates. The mask comes from the data file; every
/// covariate must carry NA on exactly the same pixels.
inline DataField read_data(const std::string& data_path, const std::vector<std::string>& covariate_paths = {}) {
  const GridFile g = read_grid(data_path);
  std::vector<std::uint8_t> mask(g.values.size());
  for (std::size_t p = 0; p < mask.size(); ++p) mask[p] = std::isnan(g.values[p]) ? 0 : 1;
  DataField d{GridGeometry(g.n1, g.n2, mask), g.values, {}};
  for (const auto& path : covariate_paths) {
    const GridFile c = read_grid(path);
    if (c.n1 != g.n1 || c.n2 != g.n2) throw validation_error("grid-mismatch", path + ": dimensions differ from data");
    for (std::size_t p = 0; p < mask.size(); ++p) {
      if (std::isnan(c.values[p]) != !mask[p]) {
        throw validation_error("grid-mismatch", path + ": mask differs from data at pixel " + std::to_string(p));
      }
    }
    d.covariates.push_back(c.values);
  }
  d.validate();
  return d;
}

inline Partition parse_partition(const std::string& text, const std::string& source, const GridGeometry& grid) {
  const GridFile g = parse_grid(text, source);
  if (g.n1 != grid.n1() || g.n2 != grid.n2()) {
    throw validation_error("grid-mismatch", source + ": partition dimensions differ from data");
  }
  std::vector<int> labels(g.values.size());
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const double v = g.values[p];
    if (std::isnan(v) || v != std::floor(v) || v < 0) {
      throw validation_error("file-parse", source + ": label at pixel " + std::to_string(p) +
                                               " is not a non-negative integer");
    }
    labels[p] = static_cast<int>(v);
    if ((labels[p] == 0) == grid.observed(p)) {
      throw validation_error("grid-mismatch", source + ": label 0 must mark exactly the unobserved pixels (pixel " +
                                                  std::to_string(p) + ")");
    }
  }
  return Partition::from_labels(grid, labels);
}

inline Partition read_partition(const std::string& path, const GridGeometry& grid) {
  return parse_partition(read_text(path), path, grid);
}

inline std::string format_partition(const Partition& part) {
  std::string out = std::to_string(part.n1) + " " + std::to_string(part.n2) + "\n";
  for (int r = 0; r < part.n1; ++r) {
    for (int c = 0; c < part.n2; ++c) {
      if (c) out += ' ';
      out += std::to_string(part.labels[static_cast<std::size_t>(r) * part.n2 + c]);
    }
    out += '\n';
  }
  return out;
}

inline void write_partition(const std::string& path, const Partition& part) {
  write_text(path, format_partition(part));
}

/// Flat `key = value` settings with `#` comments. Every lookup marks its key
/// as used so leftovers can be reported as typos.
class Config {
 public:
  struct Entry {
    std::string value;
    int line = 0;
  };

  static Config parse(const std::string& text, const std::string& source = "config") {
    Config cfg;
    cfg.source_ = source;
    std::istringstream in(text);
    std::string line;
    int no = 0;
    while (std::getline(in, line)) {
      ++no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string body = trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) cfg.fail(no, "expected `key = value`");
      const std::string key = trim(body.substr(0, eq));
      const std::string value = trim(body.substr(eq + 1));
      if (key.empty()) cfg.fail(no, "empty key");
      for (char ch : key) {
        if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '_')) {
          cfg.fail(no, "invalid character in key `" + key + "`");
        }
      }
      if (value.empty()) cfg.fail(no, "key `" + key + "` has no value");
      if (cfg.entries_.count(key)) {
        cfg.fail(no, "duplicate key `" + key + "` (first set on line " + std::to_string(cfg.entries_[key].line) + ")");
      }
      cfg.entries_[key] = {value, no};
    }
    return cfg;
  }

  static Config load(const std::string& path) { return parse(read_text(path), path); }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto* e = find(key);
    return e ? e->value : fallback;
  }
  std::string require_string(const std::string& key) const { return need(key).value; }

  double get_double(const std::string& key, double fallback) const {
    const auto* e = find(key);
    return e ? to_double(key, *e) : fallback;
  }
  double require_double(const std::string& key) const { return to_double(key, need(key)); }

  long get_int(const std::string& key, long fallback) const {
    const auto* e = find(key);
    return e ? to_int(key, *e) : fallback;
  }
  long require_int(const std::string& key) const { return to_int(key, need(key)); }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
    if (e->value == "false" || e->value == "0" || e->value == "no") return false;
    fail(e->line, "key `" + key + "`: expected true/false, got `" + e->value + "`");
  }

  /// A file name; relative names resolve against the config file's directory.
  std::string require_path(const std::string& key) const {
    const std::string v = require_string(key);
    const std::filesystem::path p(v);
    if (p.is_absolute() || source_ == "config") return v;
    return (std::filesystem::path(source_).parent_path() / p).string();
  }

  /// Comma-separated list of numbers.
  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
    const auto* e = find(key);
    return e ? to_doubles(key, *e) : fallback;
  }
  std::vector<double> require_doubles(const std::string& key) const { return to_doubles(key, need(key)); }

  /// Keys present in the file that no lookup has touched.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, e] : entries_) {
      if (!used_.count(k)) out.push_back(k + " (line " + std::to_string(e.line) + ")");
    }
    return out;
  }

  void reject_unused() const {
    const auto left = unused();
    if (left.empty()) return;
    std::string msg = source_ + ": unknown key";
    for (std::size_t i = 0; i < left.size(); ++i) msg += (i ? ", " : " ") + left[i];
    throw validation_error("config-parse", msg);
  }

  const std::string& source() const { return source_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  [[noreturn]] void fail(int line, const std::string& what) const {
    throw validation_error("config-parse", source_ + ":" + std::to_string(line) + ": " + what);
  }

  const Entry* find(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    used_[key] = true;
    return &it->second;
  }

  const Entry& need(const std::string& key) const {
    const auto* e = find(key);
    if (!e) throw validation_error("config-parse", source_ + ": missing required key `" + key + "`");
    return *e;
  }

  double to_double(const std::string& key, const Entry& e) const {
    const auto v = parse_double(e.value);
    if (!v || !std::isfinite(*v)) fail(e.line, "key `" + key + "`: expected a number, got `" + e.value + "`");
    return *v;
  }

  long to_int(const std::string& key, const Entry& e) const {
    long v = 0;
    const auto res = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
    if (res.ec != std::errc() || res.ptr != e.value.data() + e.value.size()) {
      fail(e.line, "key `" + key + "`: expected an integer, got `" + e.value + "`");
    }
    return v;
  }

  std::vector<double> to_doubles(const std::string& key, const Entry& e) const {
    std::vector<double> out;
    std::istringstream in(e.value);
    std::string tok;
    while (std::getline(in, tok, ',')) {
      const auto v = parse_double(trim(tok));
      if (!v || !std::isfinite(*v)) fail(e.line, "key `" + key + "`: bad list element `" + trim(tok) + "`");
      out.push_back(*v);
    }
    return out;
  }

  std::string source_;
  std::map<std::string, Entry> entries_;
  mutable std::map<std::string, bool> used_;
};

/// `sigma2, alpha, nu, tau` as a config list.
inline QuasiMaternParams params_from_config(const Config& cfg, const std::string& key) {
  const auto v = cfg.require_doubles(key);
  if (v.size() != 4) {
    throw validation_error("config-parse", cfg.source() + ": key `" + key + "` needs 4 values (sigma2, alpha, nu, tau)");
  }
  QuasiMaternParams p{v[0], v[1], v[2], v[3]};
  p.validate(key);
  return p;
}

inline json params_to_json(const QuasiMaternParams& p) {
  return {{"sigma2", p.sigma2}, {"alpha", p.alpha}, {"nu", p.nu}, {"tau", p.tau}};
}

inline QuasiMaternParams params_from_json(const json& j) {
  QuasiMaternParams p{j.at("sigma2").get<double>(), j.at("alpha").get<double>(), j.at("nu").get<double>(),
                      j.at("tau").get<double>()};
  p.validate("json parameters");
  return p;
}

inline json vector_to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Eigen::VectorXd vector_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// Complete model: grid, labels (0 = unobserved, so they carry the mask),
/// embedding, parameters on the natural scale and beta.
inline json model_to_json(const NonStatModel& m) {
  json segs = json::array();
  for (const auto& t : m.theta) segs.push_back(params_to_json(t));
  return {{"grid", {{"n1", m.grid.n1()}, {"n2", m.grid.n2()}}},
          {"embedding", {{"m1", m.embed.m1}, {"m2", m.embed.m2}, {"expansion_factor", m.embed.expansion_factor}}},
          {"labels", m.partition.labels},
          {"segments", m.partition.q},
          {"global", params_to_json(m.theta0)},
          {"local", segs},
          {"beta", vector_to_json(m.beta)},
          {"n_covariates", m.n_covariates},
          {"has_mean", m.has_mean},
          {"sigma0_link", m.sigma0_link}};
}

inline NonStatModel model_from_json(const json& j) {
  try {
    const int n1 = j.at("grid").at("n1").get<int>(), n2 = j.at("grid").at("n2").get<int>();
    auto labels = j.at("labels").get<std::vector<int>>();
    if (labels.size() != static_cast<std::size_t>(n1) * n2) {
      throw validation_error("file-parse", "model json: label count does not match grid");
    }
    std::vector<std::uint8_t> mask(labels.size());
    for (std::size_t p = 0; p < labels.size(); ++p) mask[p] = labels[p] != 0;
    NonStatModel m;
    m.grid = GridGeometry(n1, n2, mask);
    m.partition = Partition::from_labels(m.grid, labels);
    const auto& e = j.at("embedding");
    m.embed = {e.at("m1").get<int>(), e.at("m2").get<int>(), e.at("expansion_factor").get<double>()};
    m.theta0 = params_from_json(j.at("global"));
    for (const auto& t : j.at("local")) m.theta.push_back(params_from_json(t));
    m.beta = vector_from_json(j.at("beta"));
    m.n_covariates = j.at("n_covariates").get<int>();
    m.has_mean = j.at("has_mean").get<bool>();
    m.sigma0_link = j.at("sigma0_link").get<bool>();
    m.validate();
    return m;
  } catch (const json::exception& ex) {
    throw validation_error("file-parse", std::string("model json: ") + ex.what());
  }
}

/// FitResult document. `extra` fields (likelihood gain, method, input
/// paths) are merged in by the caller.
inline json fit_result_to_json(const FitResult& r) {
  auto params_of = [](const NonStatModel& m) {
    json out = {{"global", params_to_json(m.theta0)}, {"segments", json::array()}};
    for (const auto& t : m.theta) out["segments"].push_back(params_to_json(t));
    return out;
  };
  json names = json::array();
  for (int i = 0; i < r.layout.size(); ++i) names.push_back(r.layout.name(i));
  return {{"method", "score"},
          {"parameters", params_of(r.model)},
          {"beta", vector_to_json(r.model.beta)},
          {"termination", termination_name(r.termination)},
          {"diagnostics",
           {{"iterations", r.iterations},
            {"accepted", r.accepted},
            {"rejected", r.rejected},
            {"g0", r.g0},
            {"stop_level", r.stop_level},
            {"score_norms", r.score_norms},
            {"final_score", vector_to_json(r.final_score)},
            {"score_names", names},
            {"pcg_solves", r.solves},
            {"pcg_iterations", r.pcg_iterations},
            {"probes", r.probes},
            {"seed", r.seed}}},
          {"initial", params_of(r.initial)},
          {"model", model_to_json(r.model)}};
}

inline json read_json(const std::string& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& ex) {
    throw validation_error("file-parse", path + ": " + ex.what());
  }
}

inline void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Model stored either bare or under a "model" key (FitResult documents).
inline NonStatModel read_model(const std::string& path) {
  const json j = read_json(path);
  return model_from_json(j.contains("model") ? j.at("model") : j);
}

}  // namespace nsgp::io
