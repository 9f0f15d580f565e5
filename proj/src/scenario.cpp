#include "voltctrl/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "voltctrl/conic.hpp"
#include "voltctrl/error.hpp"

namespace voltctrl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string where(const std::filesystem::path& file, int line) {
  return file.string() + ":" + std::to_string(line) + ": ";
}

double parse_double(const std::string& s, const std::string& context) {
  const std::string t = trim(s);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || !std::isfinite(v))
    throw InputError(context + "not a number: '" + s + "'");
  return v;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

bool all_integers(const std::vector<std::string>& labels) {
  for (const std::string& l : labels) {
    if (l.empty()) return false;
    const std::size_t start = l[0] == '-' ? 1 : 0;
    if (start == l.size() || l.find_first_not_of("0123456789", start) != std::string::npos) return false;
  }
  return true;
}

}  // namespace

CaseConfig parse_config(const std::string& text, const CaseConfig& base) {
  CaseConfig c = base;
  const std::vector<std::string> lines = lines_of(text);
  for (std::size_t k = 0; k < lines.size(); ++k) {
    std::string line = lines[k];
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string ctx = "config line " + std::to_string(k + 1) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError(ctx + "expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    auto num = [&] { return parse_double(value, ctx); };
    if (key == "v0_kv2") c.v0_kv2 = num();
    else if (key == "vmin_pu") c.vmin_pu = num();
    else if (key == "vmax_pu") c.vmax_pu = num();
    else if (key == "qmin_mvar") c.qmin_mvar = num();
    else if (key == "qmax_mvar") c.qmax_mvar = num();
    else if (key == "pv_weight") c.pv_weight = num();
    else if (key == "pu_weight") c.pu_weight = num();
    else if (key == "beta") c.beta = num();
    else if (key == "delta") c.delta = num();
    else if (key == "epsilon") c.epsilon = num();
    else if (key == "eta_bar") c.eta_bar = num();
    else if (key == "alpha") c.alpha = num();
    else if (key == "prior_mode") {
      parse_prior_mode(value);  // validates
      c.prior_mode = value;
    } else if (key == "seed") {
      char* end = nullptr;
      const unsigned long long s = std::strtoull(value.c_str(), &end, 10);
      if (value.empty() || *end != '\0' || value[0] == '-') throw InputError(ctx + "seed must be a nonnegative integer");
      c.seed = s;
    } else {
      throw InputError(ctx + "unknown key '" + key + "'");
    }
  }
  if (!(c.v0_kv2 > 0)) throw InputError("config: v0_kv2 must be positive");
  if (!(c.vmin_pu < c.vmax_pu)) throw InputError("config: vmin_pu must be below vmax_pu");
  if (!(c.qmin_mvar <= c.qmax_mvar)) throw InputError("config: qmin_mvar exceeds qmax_mvar");
  if (!(c.alpha >= 0)) throw InputError("config: alpha must be >= 0");
  return c;
}

std::string format_config(const CaseConfig& c) {
  std::ostringstream out;
  out << "v0_kv2 = " << fmt(c.v0_kv2) << "\n"
      << "vmin_pu = " << fmt(c.vmin_pu) << "\n"
      << "vmax_pu = " << fmt(c.vmax_pu) << "\n"
      << "qmin_mvar = " << fmt(c.qmin_mvar) << "\n"
      << "qmax_mvar = " << fmt(c.qmax_mvar) << "\n"
      << "pv_weight = " << fmt(c.pv_weight) << "\n"
      << "pu_weight = " << fmt(c.pu_weight) << "\n"
      << "beta = " << fmt(c.beta) << "\n"
      << "delta = " << fmt(c.delta) << "\n"
      << "epsilon = " << fmt(c.epsilon) << "\n"
      << "eta_bar = " << fmt(c.eta_bar) << "\n"
      << "alpha = " << fmt(c.alpha) << "\n"
      << "prior_mode = " << c.prior_mode << "\n"
      << "seed = " << c.seed << "\n";
  return out.str();
}

int CaseBundle::bus(const std::string& label) const {
  const auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) throw InputError("unknown bus label '" + label + "'");
  return static_cast<int>(it - labels.begin());
}

std::pair<PriorMode, int> parse_prior_mode(const std::string& text) {
  if (text == "unknown") return {PriorMode::Unknown, 0};
  if (text == "known") return {PriorMode::Known, 0};
  for (auto [prefix, mode] : {std::pair{"topo-", PriorMode::TopoK}, std::pair{"lines-", PriorMode::LinesK}}) {
    const std::string p = prefix;
    if (text.rfind(p, 0) == 0) {
      const std::string k = text.substr(p.size());
      if (k.empty() || k.find_first_not_of("0123456789") != std::string::npos)
        throw InputError("prior mode '" + text + "': K must be a nonnegative integer");
      return {mode, std::stoi(k)};
    }
  }
  throw InputError("unknown prior mode '" + text + "' (expected unknown, topo-K, lines-K or known)");
}

std::string format_prior_mode(PriorMode mode, int k) {
  switch (mode) {
    case PriorMode::Unknown: return "unknown";
    case PriorMode::Known: return "known";
    case PriorMode::TopoK: return "topo-" + std::to_string(k);
    case PriorMode::LinesK: return "lines-" + std::to_string(k);
  }
  return "unknown";
}

CaseBundle load_case(const std::filesystem::path& edge_csv, const std::filesystem::path& series_csv,
                     const std::filesystem::path& config_file) {
  CaseBundle b;
  if (!config_file.empty()) b.config = parse_config(read_file(config_file));

  // Edges.
  struct RawEdge {
    std::string from, to;
    double r, x;
    bool control;
  };
  std::vector<RawEdge> raw;
  {
    const std::vector<std::string> lines = lines_of(read_file(edge_csv));
    if (lines.empty() || split(trim(lines[0]), ',') != std::vector<std::string>{"from", "to", "r_ohm", "x_ohm", "controllable"})
      throw InputError(where(edge_csv, 1) + "expected header from,to,r_ohm,x_ohm,controllable");
    for (std::size_t k = 1; k < lines.size(); ++k) {
      if (trim(lines[k]).empty()) continue;
      const std::string ctx = where(edge_csv, static_cast<int>(k + 1));
      const std::vector<std::string> f = split(trim(lines[k]), ',');
      if (f.size() != 5) throw InputError(ctx + "expected 5 fields, got " + std::to_string(f.size()));
      if (f[0].empty() || f[1].empty()) throw InputError(ctx + "empty bus label");
      if (f[4] != "0" && f[4] != "1") throw InputError(ctx + "controllable must be 0 or 1");
      raw.push_back({f[0], f[1], parse_double(f[2], ctx), parse_double(f[3], ctx), f[4] == "1"});
    }
  }
  if (raw.empty()) throw InputError(edge_csv.string() + ": no edges");

  std::set<std::string> targets, all;
  for (const RawEdge& e : raw) {
    targets.insert(e.to);
    all.insert(e.from);
    all.insert(e.to);
  }
  std::vector<std::string> roots;
  for (const std::string& l : all)
    if (!targets.count(l)) roots.push_back(l);
  if (roots.size() != 1)
    throw InputError(edge_csv.string() + ": expected exactly one substation (bus never appearing in 'to'), found " +
                     std::to_string(roots.size()));
  std::vector<std::string> others;
  for (const std::string& l : all)
    if (l != roots[0]) others.push_back(l);
  if (all_integers(others))
    std::sort(others.begin(), others.end(), [](const std::string& a, const std::string& c) {
      return std::stoll(a) < std::stoll(c);
    });
  b.labels.push_back(roots[0]);
  b.labels.insert(b.labels.end(), others.begin(), others.end());
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < b.labels.size(); ++i) index[b.labels[i]] = static_cast<int>(i);

  std::vector<Edge> edges;
  std::vector<double> r, x;
  std::vector<int> control;
  for (const RawEdge& e : raw) {
    edges.push_back({index.at(e.from), index.at(e.to)});
    r.push_back(e.r);
    x.push_back(e.x);
    if (e.control) control.push_back(index.at(e.to));
  }
  b.network = build_network(edges, r, x, control);
  const int n = b.network.size();

  // Series.
  const std::vector<std::string> lines = lines_of(read_file(series_csv));
  if (lines.empty()) throw InputError(series_csv.string() + ": empty file");
  const std::vector<std::string> header = split(trim(lines[0]), ',');
  std::vector<int> p_col(n + 1, -1), q_col(n + 1, -1);
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string& h = header[c];
    std::vector<int>* target = nullptr;
    std::string label;
    if (h.rfind("p_", 0) == 0) {
      target = &p_col;
      label = h.substr(2);
    } else if (h.rfind("qe_", 0) == 0) {
      target = &q_col;
      label = h.substr(3);
    } else {
      throw InputError(where(series_csv, 1) + "unexpected column '" + h + "'");
    }
    const auto it = index.find(label);
    if (it == index.end() || it->second == 0) throw InputError(where(series_csv, 1) + "column '" + h + "' names no load bus");
    if ((*target)[it->second] >= 0) throw InputError(where(series_csv, 1) + "duplicate column '" + h + "'");
    (*target)[it->second] = static_cast<int>(c);
  }
  for (int i = 1; i <= n; ++i) {
    if (p_col[i] < 0) throw InputError(where(series_csv, 1) + "missing column 'p_" + b.labels[i] + "'");
    if (q_col[i] < 0) throw InputError(where(series_csv, 1) + "missing column 'qe_" + b.labels[i] + "'");
  }
  std::vector<std::vector<double>> rows;
  for (std::size_t k = 1; k < lines.size(); ++k) {
    if (trim(lines[k]).empty()) continue;
    const std::string ctx = where(series_csv, static_cast<int>(k + 1));
    const std::vector<std::string> f = split(trim(lines[k]), ',');
    if (f.size() != header.size())
      throw InputError(ctx + "expected " + std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    std::vector<double> row;
    for (const std::string& s : f) row.push_back(parse_double(s, ctx));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InputError(series_csv.string() + ": no data rows");
  const int T = static_cast<int>(rows.size());
  b.series.p.resize(T, n);
  b.series.q_e.resize(T, n);
  for (int t = 0; t < T; ++t)
    for (int i = 1; i <= n; ++i) {
      b.series.p(t, i - 1) = rows[t][p_col[i]];
      b.series.q_e(t, i - 1) = rows[t][q_col[i]];
    }
  return b;
}

CaseBundle load_case_dir(const std::filesystem::path& dir) {
  const std::filesystem::path cfg = dir / "config.txt";
  return load_case(dir / "edges.csv", dir / "series.csv", std::filesystem::exists(cfg) ? cfg : std::filesystem::path{});
}

void save_case(const CaseBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const RadialNetwork& net = b.network;
  const int n = net.size();
  if (static_cast<int>(b.labels.size()) != n + 1) throw InputError("save_case: label count does not match the network");
  {
    std::ofstream out(dir / "edges.csv");
    out << "from,to,r_ohm,x_ohm,controllable\n";
    for (int j = 1; j <= n; ++j)
      out << b.labels[net.parent(j)] << ',' << b.labels[j] << ',' << fmt(net.r(j)) << ',' << fmt(net.x(j)) << ','
          << (net.controllable(j) ? 1 : 0) << '\n';
    if (!out) throw InputError("cannot write " + (dir / "edges.csv").string());
  }
  {
    std::ofstream out(dir / "series.csv");
    for (int i = 1; i <= n; ++i) out << (i > 1 ? "," : "") << "p_" << b.labels[i];
    for (int i = 1; i <= n; ++i) out << ",qe_" << b.labels[i];
    out << '\n';
    for (int t = 0; t < b.series.steps(); ++t) {
      for (int i = 0; i < n; ++i) out << (i ? "," : "") << fmt(b.series.p(t, i));
      for (int i = 0; i < n; ++i) out << ',' << fmt(b.series.q_e(t, i));
      out << '\n';
    }
    if (!out) throw InputError("cannot write " + (dir / "series.csv").string());
  }
  std::ofstream out(dir / "config.txt");
  out << format_config(b.config);
  if (!out) throw InputError("cannot write " + (dir / "config.txt").string());
}

ControllerConfig controller_config(const CaseBundle& b, const VparBox& vpar_box, const std::vector<int>& withheld) {
  const CaseConfig& c = b.config;
  const int n = b.network.size();
  ControllerConfig cfg;
  cfg.v_nom = Eigen::VectorXd::Constant(n, c.v0_kv2);
  cfg.v_min = Eigen::VectorXd::Constant(n, c.vmin_pu * c.vmin_pu * c.v0_kv2);
  cfg.v_max = Eigen::VectorXd::Constant(n, c.vmax_pu * c.vmax_pu * c.v0_kv2);
  cfg.q_min = Eigen::VectorXd::Zero(n);
  cfg.q_max = Eigen::VectorXd::Zero(n);
  for (int i = 1; i <= n; ++i) {
    if (!b.network.controllable(i)) continue;
    if (std::find(withheld.begin(), withheld.end(), i) != withheld.end()) continue;
    cfg.q_min(i - 1) = c.qmin_mvar;
    cfg.q_max(i - 1) = c.qmax_mvar;
  }
  cfg.P_v = c.pv_weight * Eigen::MatrixXd::Identity(n, n);
  cfg.P_u = c.pu_weight * Eigen::MatrixXd::Identity(n, n);
  cfg.beta = c.beta;
  cfg.delta = c.delta;
  cfg.epsilon = c.epsilon;
  cfg.eta_bar = c.eta_bar;
  cfg.vpar_box = vpar_box;
  return cfg;
}

bool assumption3_holds(const Eigen::MatrixXd& x, const VparBox& box, const ControllerConfig& cfg,
                       const Eigen::MatrixXd& points, int* corners_checked) {
  const int n = static_cast<int>(x.rows());
  const double pad = cfg.eta_bar + cfg.epsilon;
  const Eigen::VectorXd lo = cfg.v_min.array() + pad, hi = cfg.v_max.array() - pad;
  if ((lo.array() > hi.array()).any()) return false;

  auto corner_ok = [&](const Eigen::VectorXd& c) {
    ConicProgram prog(n);
    prog.set_objective(1e-6 * Eigen::MatrixXd::Identity(n, n), Eigen::VectorXd::Zero(n));
    for (int i = 0; i < n; ++i) {
      if (cfg.q_min(i) < cfg.q_max(i)) prog.set_bounds(i, cfg.q_min(i), cfg.q_max(i));
      else prog.add_equality(LinearRow{{i}, {1.0}, cfg.q_min(i)});
      LinearRow up, down;
      for (int j = 0; j < n; ++j) {
        up.add(j, x(i, j));
        down.add(j, -x(i, j));
      }
      up.rhs = hi(i) - c(i);
      down.rhs = c(i) - lo(i);
      prog.add_inequality(std::move(up));
      prog.add_inequality(std::move(down));
    }
    const SolveReport r = solve(prog);
    return r.status == SolveStatus::Optimal && r.primal_residual <= 1e-7;
  };

  int checked = 0;
  bool ok = true;
  auto check = [&](const Eigen::VectorXd& c) {
    ++checked;
    if (!corner_ok(c)) ok = false;
  };
  check(box.lower);
  if (ok) check(box.upper);
  // Points already inside the shrunk limits need no control when q = 0 is
  // allowed; the rest are solved worst first.
  const bool zero_ok = (cfg.q_min.array() <= 0.0).all() && (cfg.q_max.array() >= 0.0).all();
  std::vector<std::pair<double, int>> order;
  for (int t = 0; t < points.rows(); ++t) {
    const Eigen::VectorXd c = points.row(t).transpose();
    const double excess = std::max((c - hi).maxCoeff(), (lo - c).maxCoeff());
    if (!zero_ok || excess > 0.0) order.emplace_back(-excess, t);
  }
  std::sort(order.begin(), order.end());
  for (std::size_t k = 0; k < order.size() && ok; ++k) check(points.row(order[k].second).transpose());
  if (corners_checked) *corners_checked = checked;
  return ok;
}

CaseBundle synth_case(int n, std::uint64_t seed, double noise_target, int steps, SynthReport* report) {
  if (n < 1) throw InputError("synth_case: n must be >= 1");
  if (!(noise_target > 0)) throw InputError("synth_case: noise target must be positive");
  if (steps < 2) throw InputError("synth_case: need at least two steps");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> imp(0.05, 0.5);
  std::uniform_real_distribution<double> unit;
  std::normal_distribution<double> normal;

  CaseBundle b;
  std::vector<Edge> edges;
  std::vector<double> r, x;
  std::vector<int> control;
  for (int j = 1; j <= n; ++j) {
    std::uniform_int_distribution<int> pick(0, j - 1);
    edges.push_back({pick(rng), j});
    r.push_back(imp(rng));
    x.push_back(imp(rng));
    control.push_back(j);
  }
  b.network = build_network(edges, r, x, control);
  for (int i = 0; i <= n; ++i) b.labels.push_back(std::to_string(i));
  const SensitivityModel m = compute_sensitivity(b.network);

  // Daily shapes: loads peak in the evening, PV around noon.
  Eigen::VectorXd load_w(n), pv_w(n), pf(n);
  for (int i = 0; i < n; ++i) {
    load_w(i) = 0.5 + unit(rng);
    pv_w(i) = 1.5 * unit(rng);
    pf(i) = 0.2 + 0.3 * unit(rng);
  }
  Eigen::MatrixXd load(steps, n), pv(steps, n), walk(steps, n);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
  // One simulated day spans the series, but never fewer than 2000 steps so
  // that short series stay smooth.
  const double day = std::max(steps - 1, 2000);
  for (int t = 0; t < steps; ++t) {
    const double phase = std::fmod(t / day, 1.0);
    const double l = 0.7 + 0.3 * std::pow(std::sin(M_PI * (phase + 0.1)), 2);
    const double s = phase > 0.25 && phase < 0.75 ? std::sin(M_PI * (phase - 0.25) / 0.5) : 0.0;
    for (int i = 0; i < n; ++i) {
      load(t, i) = load_w(i) * l;
      pv(t, i) = pv_w(i) * s;
      w(i) = std::clamp(w(i) + 0.1 * normal(rng), -1.0, 1.0);
      walk(t, i) = w(i);
    }
  }
  // Voltage contributions per unit scale (rows are time).
  const Eigen::MatrixXd v_load = -(load * m.R + (load.array().rowwise() * pf.transpose().array()).matrix() * m.X);
  const Eigen::MatrixXd v_pv = pv * m.R;
  const Eigen::MatrixXd v_walk = walk * m.R;

  CaseConfig& cfg = b.config;
  cfg.seed = seed;
  cfg.eta_bar = 2.0 * noise_target;
  const double v_min = cfg.vmin_pu * cfg.vmin_pu * cfg.v0_kv2;
  const double v_max = cfg.vmax_pu * cfg.vmax_pu * cfg.v0_kv2;
  // Without control the deepest sag undershoots v_min and the PV peak
  // overshoots v_max by a few kV^2.
  const double a = (cfg.v0_kv2 - v_min + 3.0) / (-v_load.minCoeff());
  double b_pv = 0.0;
  if (v_pv.maxCoeff() > 0.0) {
    double lo = 0.0, hi = 1.0;
    while ((a * v_load + hi * v_pv).maxCoeff() < v_max - cfg.v0_kv2 + 3.0 && hi < 1e9) hi *= 2.0;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      ((a * v_load + mid * v_pv).maxCoeff() < v_max - cfg.v0_kv2 + 3.0 ? lo : hi) = mid;
    }
    b_pv = hi;
  }
  const Eigen::MatrixXd smooth = a * v_load + b_pv * v_pv;
  auto eta_of = [&](double s) {
    const Eigen::MatrixXd v = smooth + s * v_walk;
    return (v.bottomRows(steps - 1) - v.topRows(steps - 1)).cwiseAbs().maxCoeff();
  };
  if (eta_of(0.0) > 1.2 * noise_target)
    throw InputError("synth_case: the load profile alone exceeds the noise target; use more steps");
  double lo = 0.0, hi = 1.0;
  while (eta_of(hi) < noise_target && hi < 1e9) hi *= 2.0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (eta_of(mid) < noise_target ? lo : hi) = mid;
  }
  const double s = 0.5 * (lo + hi);

  b.series.p = -a * load + b_pv * pv + s * walk;
  b.series.q_e = -a * (load.array().rowwise() * pf.transpose().array()).matrix();

  SynthReport rep;
  rep.eta_star = eta_of(s);
  if (std::abs(rep.eta_star - noise_target) > 0.2 * noise_target)
    throw InputError("synth_case: could not reach the noise target");

  // Widen the control range until the box condition holds for X*.
  const VparBox box = vpar_box_linear(m, b.series, cfg.v0_kv2);
  const Eigen::MatrixXd vpar = vpar_trace(m, b.series, cfg.v0_kv2);
  double q = cfg.qmax_mvar;
  const int cap = 60;
  for (;; ++rep.widenings) {
    cfg.qmin_mvar = -q;
    cfg.qmax_mvar = q;
    const ControllerConfig cc = controller_config(b, box);
    if (assumption3_holds(m.X, box, cc, vpar, &rep.corners_checked)) break;
    if (rep.widenings == cap) throw InputError("synth_case: box condition unsatisfiable within the widening cap");
    q *= 1.25;
  }
  rep.q_limit = q;
  if (report) *report = rep;
  return b;
}

TopologyChange parse_topology_change(const std::string& text) {
  TopologyChange ch;
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw InputError("topology change: expected 'step: edits'");
  const std::string step = trim(text.substr(0, colon));
  if (step.empty() || step.find_first_not_of("0123456789") != std::string::npos)
    throw InputError("topology change: step must be a nonnegative integer");
  ch.at_step = std::stoi(step);
  for (const std::string& item : split(text.substr(colon + 1), ',')) {
    if (item.size() < 4 || (item[0] != '+' && item[0] != '-'))
      throw InputError("topology change: bad edit '" + item + "' (expected -a>b or +a>b)");
    std::string body = item.substr(1);
    double r = 0.0, x = 0.0;
    if (const auto at = body.find('@'); at != std::string::npos) {
      if (item[0] == '-') throw InputError("topology change: impedance given on a removal: '" + item + "'");
      const std::vector<std::string> rx = split(body.substr(at + 1), '/');
      if (rx.size() != 2) throw InputError("topology change: expected @r/x in '" + item + "'");
      r = parse_double(rx[0], "topology change: ");
      x = parse_double(rx[1], "topology change: ");
      if (!(r > 0 && x > 0)) throw InputError("topology change: impedances must be positive in '" + item + "'");
      body.resize(at);
    }
    const auto gt = body.find('>');
    if (gt == std::string::npos || gt == 0 || gt + 1 == body.size())
      throw InputError("topology change: bad edit '" + item + "'");
    const std::string from = trim(body.substr(0, gt)), to = trim(body.substr(gt + 1));
    if (item[0] == '-') ch.removed.emplace_back(from, to);
    else ch.added.push_back({from, to, r, x});
  }
  return ch;
}

CaseBundle apply_topology_change(const CaseBundle& bundle, const TopologyChange& change) {
  const RadialNetwork& net = bundle.network;
  const int n = net.size();
  std::vector<int> parent(n + 1, -1);
  std::vector<double> r(n + 1, 0.0), x(n + 1, 0.0), removed_r(n + 1, 0.0), removed_x(n + 1, 0.0);
  for (int j = 1; j <= n; ++j) {
    parent[j] = net.parent(j);
    r[j] = net.r(j);
    x[j] = net.x(j);
  }
  for (const auto& [from, to] : change.removed) {
    const int a = bundle.bus(from), c = bundle.bus(to);
    if (c == 0 || parent[c] != a) throw InputError("topology change: no line " + from + ">" + to + " to remove");
    parent[c] = -1;
    removed_r[c] = r[c];
    removed_x[c] = x[c];
  }
  for (const TopologyChange::Added& e : change.added) {
    const int a = bundle.bus(e.from), c = bundle.bus(e.to);
    if (c == 0) throw InputError("topology change: the substation cannot gain a parent");
    if (parent[c] != -1) throw InputError("topology change: bus " + e.to + " already has a feeding line");
    parent[c] = a;
    if (e.r > 0) {
      r[c] = e.r;
      x[c] = e.x;
    } else if (removed_r[c] > 0) {
      r[c] = removed_r[c];
      x[c] = removed_x[c];
    } else {
      throw InputError("topology change: line " + e.from + ">" + e.to + " needs an impedance (@r/x)");
    }
  }
  std::vector<Edge> edges;
  std::vector<double> rr, xx;
  for (int j = 1; j <= n; ++j) {
    if (parent[j] < 0) throw InputError("topology change leaves bus " + bundle.labels[j] + " disconnected");
    edges.push_back({parent[j], j});
    rr.push_back(r[j]);
    xx.push_back(x[j]);
  }
  CaseBundle out = bundle;
  out.network = build_network(edges, rr, xx, net.control_set());
  return out;
}

}  // namespace voltctrl
