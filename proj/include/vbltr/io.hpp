#pragma once

// Files: the VTNS binary dataset container, JSON models and reports, CSV scores.
//
// VTNS layout (all integers little-endian):
//   "VTNS" | u16 version | u16 order M | M x u32 dims | u32 n |
//   n * prod(dims) f64 values (first index fastest) | n x i8 labels

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "vbltr/eval.hpp"

namespace vbltr {

using json = nlohmann::json;

inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr int kModelSchemaVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

namespace detail {

template <class T>
void put_le(std::vector<unsigned char>& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                                                     std::uint8_t>>>;
  const U u = std::bit_cast<U>(v);
  for (std::size_t b = 0; b < sizeof(T); ++b) {
    out.push_back(static_cast<unsigned char>((u >> (8 * b)) & 0xff));
  }
}

template <class T>
T get_le(const unsigned char* p) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                                                     std::uint8_t>>>;
  U u = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b) u |= static_cast<U>(U{p[b]} << (8 * b));
  return std::bit_cast<T>(u);
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto b = read_bytes(path);
  return {b.begin(), b.end()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Datasets.

inline std::vector<unsigned char> encode_dataset(const Dataset& data) {
  data.validate();
  std::vector<unsigned char> out{'V', 'T', 'N', 'S'};
  detail::put_le<std::uint16_t>(out, kDatasetVersion);
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(data.dims.size()));
  for (auto d : data.dims) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.size()));
  for (const auto& x : data.covariates) {
    for (double v : x.values()) detail::put_le<double>(out, v);
  }
  for (int y : data.labels) detail::put_le<std::int8_t>(out, static_cast<std::int8_t>(y));
  return out;
}

inline Dataset decode_dataset(const std::vector<unsigned char>& bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t count, const char* what) {
    if (bytes.size() - pos < count) {
      throw TruncationError(std::string("dataset file truncated in ") + what);
    }
  };
  need(4, "magic");
  if (std::memcmp(bytes.data(), "VTNS", 4) != 0) throw MagicError("not a VTNS dataset file");
  pos = 4;
  need(4, "header");
  const auto version = detail::get_le<std::uint16_t>(bytes.data() + pos);
  const auto order = detail::get_le<std::uint16_t>(bytes.data() + pos + 2);
  pos += 4;
  if (version != kDatasetVersion) {
    throw SchemaError("unsupported dataset version " + std::to_string(version));
  }
  if (order < 2) throw DataError("dataset order must be at least 2");
  need(4ull * order + 4, "dims");
  Dataset data;
  for (std::size_t k = 0; k < order; ++k, pos += 4) {
    data.dims.push_back(detail::get_le<std::uint32_t>(bytes.data() + pos));
    if (data.dims.back() == 0) throw DataError("dataset has a zero dimension");
  }
  const std::size_t n = detail::get_le<std::uint32_t>(bytes.data() + pos);
  pos += 4;
  const std::size_t size = product(data.dims);
  const std::size_t expected = pos + n * size * 8 + n;
  if (bytes.size() < expected) throw TruncationError("dataset file truncated in the body");
  if (bytes.size() > expected) throw DataError("dataset file has trailing bytes");
  data.covariates.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(size);
    for (auto& e : v) {
      e = detail::get_le<double>(bytes.data() + pos);
      pos += 8;
    }
    data.covariates.emplace_back(data.dims, std::move(v));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const int y = detail::get_le<std::int8_t>(bytes.data() + pos++);
    if (y != 1 && y != -1) {
      throw LabelError("label " + std::to_string(y) + " at sample " + std::to_string(i));
    }
    data.labels.push_back(y);
  }
  return data;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  const auto bytes = encode_dataset(data);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(detail::read_bytes(path));
}

// ---------------------------------------------------------------------------
// JSON helpers.

inline json to_json_vec(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector vec_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline json to_json_mat(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(i, c);
    rows.push_back(row);
  }
  return rows;
}

inline Matrix mat_from_json(const json& j, Eigen::Index rows, Eigen::Index cols) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw SchemaError("matrix has the wrong number of rows");
  }
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto row = j[static_cast<std::size_t>(i)].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != cols) {
      throw SchemaError("matrix has the wrong number of columns");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)];
  }
  return m;
}

inline const char* to_string(FormulaMode m) { return m == FormulaMode::printed ? "printed" : "derived"; }
inline const char* to_string(LogPhiFormula m) { return m == LogPhiFormula::printed ? "printed" : "digamma"; }
inline const char* to_string(MomentStrategy m) {
  return m == MomentStrategy::analytic ? "analytic" : "monte_carlo";
}
inline const char* to_string(ConvergenceRule m) {
  return m == ConvergenceRule::absolute ? "absolute" : "relative";
}

inline FormulaMode parse_formula_mode(const std::string& s) {
  if (s == "printed") return FormulaMode::printed;
  if (s == "derived") return FormulaMode::derived;
  throw HyperparamError("formula mode must be printed or derived, got " + s);
}
inline LogPhiFormula parse_log_phi(const std::string& s) {
  if (s == "printed") return LogPhiFormula::printed;
  if (s == "digamma") return LogPhiFormula::digamma;
  throw HyperparamError("log-phi formula must be printed or digamma, got " + s);
}
inline MomentStrategy parse_moments(const std::string& s) {
  if (s == "analytic") return MomentStrategy::analytic;
  if (s == "monte_carlo" || s == "mc") return MomentStrategy::monte_carlo;
  throw HyperparamError("moment strategy must be analytic or monte_carlo, got " + s);
}
inline ConvergenceRule parse_convergence(const std::string& s) {
  if (s == "absolute") return ConvergenceRule::absolute;
  if (s == "relative") return ConvergenceRule::relative;
  throw HyperparamError("convergence rule must be absolute or relative, got " + s);
}

inline json to_json(const Hyperparams& hp) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"rank", hp.rank},
          {"alpha", opt(hp.alpha)},
          {"a_tau", opt(hp.a_tau)},
          {"b_tau", opt(hp.b_tau)},
          {"a_lambda", hp.a_lambda},
          {"b_lambda", opt(hp.b_lambda)},
          {"epsilon", hp.epsilon},
          {"max_iters", hp.max_iters},
          {"convergence", to_string(hp.convergence)},
          {"seed", hp.seed},
          {"mode", hp.mode},
          {"formula_mode", to_string(hp.formula)},
          {"log_phi", to_string(hp.log_phi)},
          {"moments", to_string(hp.moments)},
          {"mc_draws", hp.mc_draws},
          {"init_scale", hp.init_scale},
          {"restarts", hp.restarts},
          {"dense_budget", hp.dense_budget}};
}

inline Hyperparams hyperparams_from_json(const json& j) {
  auto opt = [&](const char* k) -> std::optional<double> {
    if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
    return j.at(k).get<double>();
  };
  Hyperparams hp;
  hp.rank = j.at("rank").get<std::size_t>();
  hp.alpha = opt("alpha");
  hp.a_tau = opt("a_tau");
  hp.b_tau = opt("b_tau");
  hp.a_lambda = j.at("a_lambda").get<double>();
  hp.b_lambda = opt("b_lambda");
  hp.epsilon = j.at("epsilon").get<double>();
  hp.max_iters = j.at("max_iters").get<int>();
  hp.convergence = parse_convergence(j.at("convergence").get<std::string>());
  hp.seed = j.at("seed").get<std::uint64_t>();
  hp.mode = j.at("mode").get<std::size_t>();
  hp.formula = parse_formula_mode(j.at("formula_mode").get<std::string>());
  hp.log_phi = parse_log_phi(j.at("log_phi").get<std::string>());
  hp.moments = parse_moments(j.at("moments").get<std::string>());
  hp.mc_draws = j.at("mc_draws").get<int>();
  hp.init_scale = j.at("init_scale").get<double>();
  hp.restarts = j.at("restarts").get<int>();
  hp.dense_budget = j.at("dense_budget").get<std::size_t>();
  return hp;
}

inline json to_json(const Priors& p) {
  return {{"alpha", p.alpha}, {"a_tau", p.a_tau}, {"b_tau", p.b_tau},
          {"a_lambda", p.a_lambda}, {"b_lambda", p.b_lambda}};
}

inline json to_json(const GiGParams& g) { return {{"p", g.p}, {"a", g.a}, {"b", g.b}}; }

inline GiGParams gig_from_json(const json& j) {
  GiGParams g{j.at("p").get<double>(), j.at("a").get<double>(), j.at("b").get<double>()};
  g.validate();
  return g;
}

inline json to_json(const LambdaPosterior& q) {
  if (const auto* g = std::get_if<GiGParams>(&q)) {
    json j = to_json(*g);
    j["family"] = "gig";
    return j;
  }
  const auto& h = std::get<QuadGammaParams>(q);
  return {{"family", "quad_gamma"}, {"shape", h.shape}, {"rate", h.rate}, {"quad", h.quad}};
}

inline LambdaPosterior lambda_from_json(const json& j) {
  const auto family = j.at("family").get<std::string>();
  if (family == "gig") return gig_from_json(j);
  if (family == "quad_gamma") {
    QuadGammaParams q{j.at("shape").get<double>(), j.at("rate").get<double>(),
                      j.at("quad").get<double>()};
    q.validate();
    return q;
  }
  throw SchemaError("unknown lambda family " + family);
}

// ---------------------------------------------------------------------------
// Models.

inline json to_json(const FittedModel& m) {
  const auto& s = m.state;
  json margins = json::array();
  json sigma = json::array();
  json lambda = json::array();
  for (std::size_t j = 0; j < s.order(); ++j) {
    json mj = json::array();
    json sj = json::array();
    json lj = json::array();
    for (std::size_t r = 0; r < s.rank; ++r) {
      mj.push_back({{"mean", to_json_vec(s.margins[j][r].mean)},
                    {"cov_chol", to_json_mat(s.margins[j][r].cov_chol)}});
      json sk = json::array();
      for (const auto& g : s.scales.sigma[j][r]) sk.push_back(to_json(g));
      sj.push_back(sk);
      lj.push_back(to_json(s.scales.lambda[j][r]));
    }
    margins.push_back(mj);
    sigma.push_back(sj);
    lambda.push_back(lj);
  }
  json phi_moments = json::array();
  for (const auto& p : s.phi) {
    phi_moments.push_back({{"inv_mean", p.inv_mean},
                           {"sqrt_mean", p.sqrt_mean},
                           {"log_mean", p.log_mean},
                           {"inv_mean_monte_carlo", p.inv_mean_monte_carlo}});
  }
  return {{"schema_version", kModelSchemaVersion},
          {"dims", s.dims},
          {"rank", s.rank},
          {"hyperparams", to_json(m.hp)},
          {"priors", to_json(s.priors)},
          {"threshold", m.threshold},
          {"draws", m.draws},
          {"seed", m.seed},
          {"margins", margins},
          {"tau", to_json(s.scales.tau)},
          {"sigma", sigma},
          {"lambda", lambda},
          {"phi", {{"weights", s.scales.phi_weights},
                   {"rates", s.scales.phi_rates},
                   {"moments", phi_moments}}},
          {"xi", to_json_vec(s.xi)},
          {"sweep", s.sweep},
          {"diagnostics", {{"sigma_floor_clamps", s.diagnostics.sigma_floor_clamps},
                           {"lambda_floor_clamps", s.diagnostics.lambda_floor_clamps},
                           {"phi_monte_carlo", s.diagnostics.phi_monte_carlo}}},
          {"elbo_trace", m.elbo_trace}};
}

inline FittedModel model_from_json(const json& j) {
  try {
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kModelSchemaVersion) {
      throw SchemaError("model schema version missing or unsupported");
    }
    FittedModel m;
    auto& s = m.state;
    s.dims = j.at("dims").get<Dims>();
    s.rank = j.at("rank").get<std::size_t>();
    m.hp = hyperparams_from_json(j.at("hyperparams"));
    if (s.dims.size() < 2) throw SchemaError("model needs at least two modes");
    if (s.rank < 1 || m.hp.rank != s.rank) throw SchemaError("rank field disagrees with hyperparams");
    const json& pr = j.at("priors");
    s.priors = {pr.at("alpha").get<double>(), pr.at("a_tau").get<double>(),
                pr.at("b_tau").get<double>(), pr.at("a_lambda").get<double>(),
                pr.at("b_lambda").get<double>()};
    m.threshold = j.at("threshold").get<double>();
    m.draws = j.at("draws").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.elbo_trace = j.at("elbo_trace").get<std::vector<double>>();

    const json& margins = j.at("margins");
    const json& sigma = j.at("sigma");
    const json& lambda = j.at("lambda");
    const std::size_t order = s.dims.size();
    if (margins.size() != order || sigma.size() != order || lambda.size() != order) {
      throw SchemaError("per-mode arrays do not match the order");
    }
    s.margins.resize(order);
    s.scales.sigma.resize(order);
    s.sigma.resize(order);
    s.scales.lambda.resize(order);
    s.lambda.resize(order);
    for (std::size_t jj = 0; jj < order; ++jj) {
      const auto ij = static_cast<Eigen::Index>(s.dims[jj]);
      if (margins[jj].size() != s.rank || sigma[jj].size() != s.rank ||
          lambda[jj].size() != s.rank) {
        throw SchemaError("mode " + std::to_string(jj) + " does not hold rank-many components");
      }
      for (std::size_t r = 0; r < s.rank; ++r) {
        const Vector mean = vec_from_json(margins[jj][r].at("mean"));
        if (mean.size() != ij) throw SchemaError("margin mean length does not match dims");
        const Matrix chol = mat_from_json(margins[jj][r].at("cov_chol"), ij, ij);
        auto mp = MarginPosterior::make(mean, chol * chol.transpose());
        mp.cov_chol = chol;  // keep the stored factor so draws are reproduced exactly
        s.margins[jj].push_back(std::move(mp));

        if (sigma[jj][r].size() != s.dims[jj]) throw SchemaError("sigma length does not match dims");
        std::vector<GiGParams> sg;
        std::vector<PositiveMoments> sm;
        for (const auto& g : sigma[jj][r]) {
          sg.push_back(gig_from_json(g));
          sm.push_back(gig_moments(sg.back()));
        }
        s.scales.sigma[jj].push_back(std::move(sg));
        s.sigma[jj].push_back(std::move(sm));
        s.scales.lambda[jj].push_back(lambda_from_json(lambda[jj][r]));
        s.lambda[jj].push_back(lambda_moments(s.scales.lambda[jj][r]));
      }
    }
    s.set_tau(gig_from_json(j.at("tau")));
    const json& phi = j.at("phi");
    s.scales.phi_weights = phi.at("weights").get<std::vector<double>>();
    s.scales.phi_rates = phi.at("rates").get<std::vector<double>>();
    if (s.scales.phi_weights.size() != s.rank || phi.at("moments").size() != s.rank) {
      throw SchemaError("phi arrays do not match the rank");
    }
    for (const auto& pm : phi.at("moments")) {
      s.phi.push_back({pm.at("inv_mean").get<double>(), pm.at("sqrt_mean").get<double>(),
                       pm.at("log_mean").get<double>(), pm.at("inv_mean_monte_carlo").get<bool>()});
    }
    s.phi_entropy = dirichlet_entropy(s.scales.phi_weights);
    s.xi = vec_from_json(j.at("xi"));
    s.sweep = j.at("sweep").get<std::size_t>();
    const json& d = j.at("diagnostics");
    s.diagnostics = {d.at("sigma_floor_clamps").get<std::size_t>(),
                     d.at("lambda_floor_clamps").get<std::size_t>(),
                     d.at("phi_monte_carlo").get<std::size_t>()};
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed model file: ") + e.what());
  } catch (const DomainError& e) {
    throw SchemaError(std::string("invalid model contents: ") + e.what());
  }
}

inline void save_model(const std::filesystem::path& path, const FittedModel& m) {
  detail::write_text(path, to_json(m).dump(1) + "\n");
}

inline FittedModel load_model(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(detail::read_text(path));
  } catch (const json::exception& e) {
    throw SchemaError(std::string("model file is not JSON: ") + e.what());
  }
  return model_from_json(j);
}

// ---------------------------------------------------------------------------
// Tensors, reports and scores.

inline json to_json(const DenseTensor& t) {
  return {{"dims", t.dims()}, {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

inline DenseTensor tensor_from_json(const json& j) {
  try {
    return DenseTensor(j.at("dims").get<Dims>(), j.at("values").get<std::vector<double>>());
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed tensor: ") + e.what());
  }
}

inline json metrics_json(const ClassMetrics& m, const json& auc_value) {
  return {{"sensitivity", m.sensitivity}, {"specificity", m.specificity},
          {"auc", auc_value},             {"accuracy", m.accuracy},
          {"precision", m.precision},     {"f1", m.f1}};
}

inline json to_json(const SimConfig& s) {
  json support = json::array();
  for (const auto& [a, b] : s.support) support.push_back({a, b});
  return {{"n1", s.n1},           {"n2", s.n2},   {"dims", s.dims},
          {"mu1", s.mu1},         {"mu2", s.mu2}, {"support", support},
          {"train_fraction", s.train_fraction}, {"seed", s.seed}};
}

/// Deterministic report; timings only when asked for.
inline json to_json(const MetricsReport& r, bool with_timing = false) {
  json reps = json::array();
  for (const auto& p : r.replications) {
    json e = {{"index", p.index}, {"ok", p.ok}};
    if (!p.ok) {
      e["error"] = p.error;
    } else {
      json elbos = json::array();
      for (const auto& [rank, l] : p.rank_elbos) elbos.push_back({{"rank", rank}, {"elbo", l}});
      e["rank"] = p.rank;
      e["rank_elbos"] = elbos;
      e["iterations"] = p.iterations;
      e["converged"] = p.converged;
      e["threshold"] = p.threshold;
      e["coef"] = {{"mae", p.coef.mae}, {"rmse", p.coef.rmse}, {"tar", p.coef.tar},
                   {"far", p.coef.far}, {"rate", p.coef.rate}};
      e["classification"] = metrics_json(p.cls, p.auc_defined ? json(p.auc) : json(nullptr));
      e["undefined_ratio"] = p.cls.undefined;
    }
    if (with_timing) e["ctime"] = p.ctime;
    reps.push_back(e);
  }
  json summary = json::object();
  for (const auto& [k, v] : r.summary) summary[k] = {{"mean", v.mean}, {"sd", v.sd}};
  std::vector<std::size_t> ranks = r.options.ranks;
  return {{"schema_version", kReportSchemaVersion},
          {"sim", to_json(r.sim)},
          {"hyperparams", to_json(r.hp)},
          {"replications_requested", r.options.replications},
          {"ranks", ranks},
          {"activity_threshold", r.options.activity_threshold},
          {"draws", r.options.draws},
          {"failures", r.failures},
          {"summary", summary},
          {"replications", reps}};
}

/// Shortest representation that reads back to the same double.
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return {buf.data(), res.ptr};
}

inline std::string scores_csv(const Vector& probs, std::span<const int> labels) {
  std::string out = "id,probability,label\n";
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    out += std::to_string(i) + "," + format_double(probs(i)) + "," +
           std::to_string(labels[static_cast<std::size_t>(i)]) + "\n";
  }
  return out;
}

}  // namespace vbltr
