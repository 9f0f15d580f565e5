#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "voltctrl/controller.hpp"
#include "voltctrl/error.hpp"
#include "voltctrl/norms.hpp"
#include "voltctrl/scenario.hpp"

#ifndef VOLTCTRL_VERSION
#define VOLTCTRL_VERSION "unknown"
#endif

namespace voltctrl::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || !std::isfinite(v)) throw InputError(what + ": not a number: '" + s + "'");
  return v;
}

std::uint64_t to_uint(const std::string& s, const std::string& what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw InputError(what + ": expected a nonnegative integer, got '" + s + "'");
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw InputError(what + ": integer out of range: '" + s + "'");
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// JSON has no infinity; unbounded values become null.
json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// ---------------------------------------------------------------------------
// Case resolution shared by run and sweep.

struct CaseFlags {
  std::string case_spec;
  std::string config_file;
  std::string dynamics = "linear";
  std::optional<int> steps;
  std::string topology_change;
  std::string partial_control;
};

struct ResolvedCase {
  CaseBundle bundle;
  std::string source;
  Dynamics dynamics = Dynamics::Linear;
  int steps = 0;
  std::optional<TopologyChange> change;
  std::vector<PlantPhase> plant;
  std::vector<int> withheld;  // internal bus indices
  std::vector<std::string> withheld_labels;
  VparBox box;
  std::optional<SynthReport> synth;
};

Dynamics parse_dynamics(const std::string& s) {
  if (s == "linear") return Dynamics::Linear;
  if (s == "distflow") return Dynamics::DistFlow;
  throw InputError("--dynamics must be linear or distflow, got '" + s + "'");
}

// "synth:n=8,seed=1,noise=0.5" or a case directory.
ResolvedCase resolve_case(const CaseFlags& f) {
  ResolvedCase rc;
  rc.source = f.case_spec;
  rc.dynamics = parse_dynamics(f.dynamics);
  if (f.steps && *f.steps < 1) throw InputError("--steps must be >= 1");

  if (f.case_spec.rfind("synth:", 0) == 0 || f.case_spec == "synth") {
    int n = 8;
    std::uint64_t seed = 1;
    double noise = 0.5;
    const std::string body = f.case_spec.size() > 6 ? f.case_spec.substr(6) : "";
    for (const std::string& kv : split_list(body)) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw InputError("--case synth: expected key=value, got '" + kv + "'");
      const std::string key = trim(kv.substr(0, eq)), value = trim(kv.substr(eq + 1));
      if (key == "n") n = static_cast<int>(to_uint(value, "--case synth n"));
      else if (key == "seed") seed = to_uint(value, "--case synth seed");
      else if (key == "noise") noise = to_double(value, "--case synth noise");
      else throw InputError("--case synth: unknown key '" + key + "' (n, seed, noise)");
    }
    const int steps = f.steps.value_or(2000);
    SynthReport rep;
    rc.bundle = synth_case(n, seed, noise, steps + 1, &rep);
    rc.synth = rep;
    rc.steps = steps;
  } else {
    if (f.case_spec.empty()) throw InputError("--case is required");
    if (!fs::is_directory(f.case_spec))
      throw InputError("--case: '" + f.case_spec + "' is neither synth:... nor a case directory");
    rc.bundle = load_case_dir(f.case_spec);
    const int available = rc.bundle.series.steps() - 1;
    if (available < 1) throw InputError("case series needs at least two rows");
    rc.steps = f.steps.value_or(available);
    if (rc.steps > available)
      throw InputError("--steps " + std::to_string(rc.steps) + " exceeds the " + std::to_string(available) +
                       " steps the series supports");
  }
  if (!f.config_file.empty()) {
    std::ifstream in(f.config_file);
    if (!in) throw InputError("cannot open config file " + f.config_file);
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
      rc.bundle.config = parse_config(ss.str(), rc.bundle.config);
    } catch (const InputError& e) {
      throw InputError(f.config_file + ": " + e.what());
    }
  }

  rc.plant = {PlantPhase{0, rc.bundle.network}};
  if (!trim(f.topology_change).empty()) {
    rc.change = parse_topology_change(f.topology_change);
    if (rc.change->at_step < 1 || rc.change->at_step >= rc.steps)
      throw InputError("--topology-change: step must lie in [1, " + std::to_string(rc.steps - 1) + "]");
    rc.plant.push_back(PlantPhase{rc.change->at_step, apply_topology_change(rc.bundle, *rc.change).network});
  }
  for (const std::string& label : split_list(f.partial_control)) {
    const int b = rc.bundle.bus(label);
    if (b == 0) throw InputError("--partial-control: the substation has no control");
    rc.withheld.push_back(b);
    rc.withheld_labels.push_back(label);
  }
  bool any_control = false;
  for (int b : rc.bundle.network.control_set())
    any_control |= std::find(rc.withheld.begin(), rc.withheld.end(), b) == rc.withheld.end();
  if (!any_control) throw InputError("no controllable bus left (case control set minus --partial-control)");

  // v_par box over the episode's rows, covering every topology in play.
  Series used = rc.bundle.series;
  used.p = used.p.topRows(rc.steps + 1).eval();
  used.q_e = used.q_e.topRows(rc.steps + 1).eval();
  const double v0 = rc.bundle.config.v0_kv2;
  bool first = true;
  for (const PlantPhase& ph : rc.plant) {
    const VparBox b = rc.dynamics == Dynamics::Linear ? vpar_box_linear(compute_sensitivity(ph.net), used, v0)
                                                      : vpar_box_distflow(ph.net, used, v0);
    if (first) {
      rc.box = b;
      first = false;
    } else {
      rc.box.lower = rc.box.lower.cwiseMin(b.lower);
      rc.box.upper = rc.box.upper.cwiseMax(b.upper);
    }
  }
  return rc;
}

struct CellSpec {
  double delta = 20.0;
  std::string prior = "unknown";
  std::uint64_t seed = 0;
};

struct CellOutcome {
  int code = kOk;
  std::string error;
  EpisodeResult result;
  ControllerConfig cfg;
  EpisodeConfig ep;
};

CellOutcome run_cell(const ResolvedCase& rc, const CellSpec& cell) {
  CellOutcome out;
  try {
    // Validated per cell: a bad value fails its cells, not the whole sweep.
    if (!(cell.delta > 0)) throw InputError("delta must be positive, got " + fmt(cell.delta));
    CaseBundle bundle = rc.bundle;
    bundle.config.delta = cell.delta;
    out.cfg = controller_config(bundle, rc.box, rc.withheld);
    const auto [mode, k] = parse_prior_mode(cell.prior);
    out.ep.dynamics = rc.dynamics;
    out.ep.horizon = rc.steps;
    out.ep.seed = cell.seed;
    out.ep.prior = mode;
    out.ep.prior_k = k;
    out.ep.alpha = bundle.config.alpha;
    out.ep.v0 = bundle.config.v0_kv2;
    // The full-trajectory audit is quadratic in the horizon; keep it for
    // moderate runs.
    out.ep.track_full_membership = rc.steps <= 5000;
    out.result = run_episode(rc.plant, bundle.series, out.cfg, out.ep);
  } catch (const InputError& e) {
    out.code = kInputError;
    out.error = e.what();
  } catch (const SolverError& e) {
    out.code = kSolverAbort;
    out.error = e.what();
  }
  return out;
}

json config_json(const CaseConfig& c) {
  return json{{"v0_kv2", c.v0_kv2},       {"vmin_pu", c.vmin_pu},     {"vmax_pu", c.vmax_pu},
              {"qmin_mvar", c.qmin_mvar}, {"qmax_mvar", c.qmax_mvar}, {"pv_weight", c.pv_weight},
              {"pu_weight", c.pu_weight}, {"beta", c.beta},           {"delta", c.delta},
              {"epsilon", c.epsilon},     {"eta_bar", c.eta_bar},     {"alpha", c.alpha},
              {"prior_mode", c.prior_mode}, {"seed", c.seed}};
}

json results_json(const ResolvedCase& rc, const CellOutcome& o) {
  const EpisodeResult& r = o.result;
  int last = -1;
  for (int t = 0; t < static_cast<int>(r.mistake.size()); ++t)
    if (r.mistake[t]) last = t;
  const int n = rc.bundle.network.size();
  const PriorSpec prior = make_mode_prior(rc.bundle.network, compute_sensitivity(rc.bundle.network), o.ep.prior,
                                          o.ep.prior_k, o.ep.alpha, o.ep.enforce_psd);
  const double rho = robustness_margin(o.cfg);
  const int m = parameter_dimension(n, false);
  const double diam = parameter_diameter(prior, o.cfg.eta_bar, o.cfg.delta, false);
  double bound = std::numeric_limits<double>::infinity();
  if (diam > 0.0) bound = mistake_bound(diam, rho, m);

  json j;
  j["mistakes"] = r.mistakes;
  j["last_mistake_step"] = last >= 0 ? json(last) : json(nullptr);
  j["avg_violation"] = r.avg_violation;
  j["max_violation"] = r.max_violation;
  j["slack_steps"] = r.slack_steps;
  j["reset_events"] = r.reset_steps.size();
  j["reset_steps"] = r.reset_steps;
  j["infeasible_steps"] = r.infeasible_steps;
  j["eta_star"] = r.eta_star;
  j["final_eta_hat"] = r.eta_hat.empty() ? 0.0 : r.eta_hat.back();
  j["initial_model_error"] = r.model_error.empty() ? 0.0 : r.model_error.front();
  j["final_model_error"] = r.model_error.empty() ? 0.0 : r.model_error.back();
  j["movement_sum"] = r.movement_sum;
  j["full_set_checks"] = r.full_set_checks;
  j["full_set_violations"] = r.full_set_violations;
  j["max_powerflow_residual"] = r.max_powerflow_residual;
  j["projection_solves"] = r.projection_solves;
  json theory;
  theory["rho"] = rho;
  theory["parameter_dimension"] = m;
  theory["parameter_diameter"] = diam;
  theory["mistake_bound"] = number(bound);
  j["theory"] = theory;
  return j;
}

void write_trace(const fs::path& file, const ResolvedCase& rc, const EpisodeResult& r) {
  std::ofstream out(file);
  if (!out) throw InputError("cannot write " + file.string());
  const auto& labels = rc.bundle.labels;
  const int n = rc.bundle.network.size();
  out << "t";
  for (const char* kind : {"v_", "u_", "q_"})
    for (int i = 1; i <= n; ++i) out << ',' << kind << labels[i];
  out << ",xi,mistake,model_error,eta_hat,movement,reset,infeasible\n";
  std::vector<char> reset(r.v.rows(), 0), infeasible(r.v.rows(), 0);
  for (int t : r.reset_steps) reset[t] = 1;
  for (int t : r.infeasible_steps) infeasible[t] = 1;
  for (Eigen::Index t = 0; t < r.v.rows(); ++t) {
    out << t;
    for (const Eigen::MatrixXd* m : {&r.v, &r.u, &r.q_c})
      for (int i = 0; i < n; ++i) out << ',' << fmt((*m)(t, i));
    out << ',' << fmt(r.xi[t]) << ',' << (r.mistake[t] ? 1 : 0) << ',' << fmt(r.model_error[t]) << ','
        << fmt(r.eta_hat[t]) << ',' << fmt(r.movement[t]) << ',' << int(reset[t]) << ',' << int(infeasible[t])
        << '\n';
  }
  if (!out) throw InputError("cannot write " + file.string());
}

void write_json(const fs::path& file, const json& j) {
  std::ofstream out(file);
  out << j.dump(2) << '\n';
  if (!out) throw InputError("cannot write " + file.string());
}

json case_json(const ResolvedCase& rc) {
  json j;
  j["source"] = rc.source;
  j["buses"] = rc.bundle.network.size();
  j["series_rows"] = rc.bundle.series.steps();
  if (rc.synth) {
    j["synth_eta_star"] = rc.synth->eta_star;
    j["synth_q_limit"] = rc.synth->q_limit;
    j["synth_widenings"] = rc.synth->widenings;
  }
  return j;
}

json run_json(const ResolvedCase& rc, const CaseFlags& f) {
  json j;
  j["dynamics"] = f.dynamics;
  j["steps"] = rc.steps;
  j["topology_change"] = rc.change ? json(trim(f.topology_change)) : json(nullptr);
  j["partial_control"] = rc.withheld_labels;
  return j;
}

void add_case_flags(CLI::App* app, CaseFlags& f) {
  app->add_option("--case", f.case_spec, "Case directory or synth:n=..,seed=..,noise=..")->required();
  app->add_option("--config", f.config_file, "Config file overriding the case's settings");
  app->add_option("--dynamics", f.dynamics, "linear | distflow");
  app->add_option("--steps", f.steps, "Horizon T (default: series length - 1, or 2000 for synth)");
  app->add_option("--topology-change", f.topology_change, "\"step: -a>b,...,+c>d[@r/x],...\"");
  app->add_option("--partial-control", f.partial_control, "Comma list of bus labels whose control is withheld");
}

// ---------------------------------------------------------------------------

struct RunFlags {
  CaseFlags c;
  std::optional<std::string> prior;
  std::optional<double> delta;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_run(const RunFlags& f, std::ostream& err) {
  const auto start = std::chrono::steady_clock::now();
  const ResolvedCase rc = resolve_case(f.c);
  CellSpec cell;
  cell.delta = f.delta.value_or(rc.bundle.config.delta);
  cell.prior = f.prior.value_or(rc.bundle.config.prior_mode);
  cell.seed = f.seed.value_or(rc.bundle.config.seed);
  parse_prior_mode(cell.prior);
  const CellOutcome o = run_cell(rc, cell);
  if (o.code != kOk) {
    err << "voltctrl run: " << o.error << '\n';
    return o.code;
  }

  const fs::path out(f.out);
  fs::create_directories(out);
  write_trace(out / "trace.csv", rc, o.result);

  CaseConfig resolved = rc.bundle.config;
  resolved.delta = cell.delta;
  resolved.prior_mode = cell.prior;
  resolved.seed = cell.seed;
  json summary;
  summary["case"] = case_json(rc);
  summary["config"] = config_json(resolved);
  summary["run"] = run_json(rc, f.c);
  summary["results"] = results_json(rc, o);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_json(out / "summary.json", summary);

  json manifest;
  manifest["version"] = VOLTCTRL_VERSION;
  manifest["command"] = "run";
  manifest["config"] = config_json(resolved);
  manifest["seeds"] = json::array({cell.seed});
  manifest["outputs"] = {(out / "trace.csv").string(), (out / "summary.json").string(),
                         (out / "manifest.json").string()};
  manifest["wall_time_s"] = wall;
  write_json(out / "manifest.json", manifest);
  return kOk;
}

// ---------------------------------------------------------------------------

struct SweepFlags {
  CaseFlags c;
  std::string priors;
  std::string deltas;
  std::string seeds;
  int num_seeds = 0;
  int threads = 0;
  std::string out;
};

int prior_rank(const std::string& prior) {
  switch (parse_prior_mode(prior).first) {
    case PriorMode::Unknown: return 0;
    case PriorMode::TopoK: return 1;
    case PriorMode::LinesK: return 2;
    case PriorMode::Known: return 3;
  }
  return 4;
}

struct Stats {
  double mean = 0.0, std = 0.0;
};

// Mean and sample standard deviation (0 for a single value).
Stats stats(const std::vector<double>& v) {
  Stats s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

int cmd_sweep(const SweepFlags& f, std::ostream& err) {
  const auto start = std::chrono::steady_clock::now();
  const ResolvedCase rc = resolve_case(f.c);

  std::vector<double> deltas;
  for (const std::string& d : split_list(f.deltas)) deltas.push_back(to_double(d, "--delta"));
  if (deltas.empty()) deltas.push_back(rc.bundle.config.delta);

  std::vector<std::string> priors = split_list(f.priors);
  if (priors.empty()) priors.push_back(rc.bundle.config.prior_mode);
  for (const std::string& p : priors) parse_prior_mode(p);
  std::stable_sort(priors.begin(), priors.end(),
                   [](const std::string& a, const std::string& b) { return prior_rank(a) < prior_rank(b); });

  std::vector<std::uint64_t> seeds;
  for (const std::string& s : split_list(f.seeds)) seeds.push_back(to_uint(s, "--seeds"));
  if (f.num_seeds < 0) throw InputError("--num-seeds must be >= 0");
  for (int k = 1; k <= f.num_seeds; ++k) seeds.push_back(static_cast<std::uint64_t>(k));
  if (seeds.empty()) seeds.push_back(rc.bundle.config.seed);

  std::vector<CellSpec> cells;
  for (double d : deltas)
    for (const std::string& p : priors)
      for (std::uint64_t s : seeds) cells.push_back({d, p, s});

  // Worker pool over isolated episodes; results land in their own slots.
  std::vector<CellOutcome> outcomes(cells.size());
  const int workers = std::max(
      1, std::min<int>(f.threads > 0 ? f.threads : static_cast<int>(std::thread::hardware_concurrency()),
                       static_cast<int>(cells.size())));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t k = next++; k < cells.size(); k = next++) outcomes[k] = run_cell(rc, cells[k]);
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (std::thread& t : pool) t.join();

  const fs::path out(f.out);
  fs::create_directories(out);
  int worst = kOk;
  {
    std::ofstream csv(out / "cells.csv");
    csv << "delta,prior,seed,status,mistakes,avg_violation,max_violation,reset_events,final_model_error,"
           "final_eta_hat,slack_steps,error\n";
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const CellOutcome& o = outcomes[k];
      csv << fmt(cells[k].delta) << ',' << cells[k].prior << ',' << cells[k].seed << ',';
      if (o.code == kOk) {
        const EpisodeResult& r = o.result;
        csv << "ok," << r.mistakes << ',' << fmt(r.avg_violation) << ',' << fmt(r.max_violation) << ','
            << r.reset_steps.size() << ',' << fmt(r.model_error.back()) << ',' << fmt(r.eta_hat.back()) << ','
            << r.slack_steps << ",\n";
      } else {
        csv << (o.code == kSolverAbort ? "solver_error" : "input_error") << ",,,,,,,," << csv_field(o.error)
            << '\n';
        err << "voltctrl sweep: delta=" << fmt(cells[k].delta) << " prior=" << cells[k].prior
            << " seed=" << cells[k].seed << ": " << o.error << '\n';
        worst = std::max(worst, o.code);
      }
    }
    if (!csv) throw InputError("cannot write " + (out / "cells.csv").string());
  }
  json rows = json::array();
  {
    std::ofstream csv(out / "aggregate.csv");
    csv << "delta,prior,runs,failed,mistakes_mean,mistakes_std,avg_violation_mean,avg_violation_std,"
           "max_violation_mean,max_violation_std,final_model_error_mean,final_model_error_std\n";
    for (double d : deltas)
      for (const std::string& p : priors) {
        std::vector<double> mis, avg, mx, err_final;
        int failed = 0;
        for (std::size_t k = 0; k < cells.size(); ++k) {
          if (cells[k].delta != d || cells[k].prior != p) continue;
          if (outcomes[k].code != kOk) {
            ++failed;
            continue;
          }
          const EpisodeResult& r = outcomes[k].result;
          mis.push_back(r.mistakes);
          avg.push_back(r.avg_violation);
          mx.push_back(r.max_violation);
          err_final.push_back(r.model_error.back());
        }
        // No successful run: statistics are left empty rather than zero.
        const bool any = !mis.empty();
        const auto cell = [&](const std::vector<double>& v) {
          const Stats st = stats(v);
          return any ? fmt(st.mean) + ',' + fmt(st.std) : std::string(",");
        };
        const auto entry = [&](const std::vector<double>& v) {
          const Stats st = stats(v);
          return any ? json{{"mean", st.mean}, {"std", st.std}} : json(nullptr);
        };
        csv << fmt(d) << ',' << p << ',' << mis.size() << ',' << failed << ',' << cell(mis) << ',' << cell(avg)
            << ',' << cell(mx) << ',' << cell(err_final) << '\n';
        rows.push_back(json{{"delta", d},
                            {"prior", p},
                            {"runs", mis.size()},
                            {"failed", failed},
                            {"mistakes", entry(mis)},
                            {"avg_violation", entry(avg)},
                            {"max_violation", entry(mx)},
                            {"final_model_error", entry(err_final)}});
      }
    if (!csv) throw InputError("cannot write " + (out / "aggregate.csv").string());
  }
  json summary;
  summary["case"] = case_json(rc);
  summary["config"] = config_json(rc.bundle.config);
  summary["run"] = run_json(rc, f.c);
  summary["seeds"] = seeds;
  summary["aggregate"] = rows;
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_json(out / "summary.json", summary);

  json manifest;
  manifest["version"] = VOLTCTRL_VERSION;
  manifest["command"] = "sweep";
  manifest["config"] = config_json(rc.bundle.config);
  manifest["seeds"] = seeds;
  manifest["deltas"] = deltas;
  manifest["priors"] = priors;
  manifest["threads"] = workers;
  manifest["outputs"] = {(out / "cells.csv").string(), (out / "aggregate.csv").string(),
                         (out / "summary.json").string(), (out / "manifest.json").string()};
  manifest["wall_time_s"] = wall;
  write_json(out / "manifest.json", manifest);
  return worst;
}

// ---------------------------------------------------------------------------

struct Trace {
  std::string name;
  std::vector<std::string> buses;  // labels, in column order
  std::vector<int> t;
  std::vector<std::vector<double>> v;  // per row, per bus
  std::vector<std::map<std::string, double>> extra;
};

Trace read_trace(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw InputError("cannot open trace " + file.string());
  Trace tr;
  std::string line;
  if (!std::getline(in, line)) throw InputError(file.string() + ": empty trace");
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string h;
    while (std::getline(hs, h, ',')) header.push_back(trim(h));
  }
  const std::vector<std::string> needed = {"model_error", "eta_hat", "movement", "xi", "mistake", "reset"};
  if (header.empty() || header[0] != "t") throw InputError(file.string() + ": not a trace (first column must be t)");
  std::vector<int> v_cols;
  std::map<std::string, int> col;
  for (std::size_t c = 0; c < header.size(); ++c) {
    col[header[c]] = static_cast<int>(c);
    if (header[c].rfind("v_", 0) == 0) {
      v_cols.push_back(static_cast<int>(c));
      tr.buses.push_back(header[c].substr(2));
    }
  }
  if (v_cols.empty()) throw InputError(file.string() + ": trace has no voltage columns");
  for (const std::string& k : needed)
    if (!col.count(k)) throw InputError(file.string() + ": trace lacks column '" + k + "'");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    const std::string ctx = file.string() + ":" + std::to_string(lineno);
    if (f.size() != header.size()) throw InputError(ctx + ": expected " + std::to_string(header.size()) + " fields");
    tr.t.push_back(static_cast<int>(to_uint(trim(f[0]), ctx)));
    std::vector<double> v;
    for (int c : v_cols) v.push_back(to_double(trim(f[c]), ctx));
    tr.v.push_back(std::move(v));
    std::map<std::string, double> extra;
    for (const std::string& k : needed) extra[k] = to_double(trim(f[col[k]]), ctx);
    tr.extra.push_back(std::move(extra));
  }
  if (tr.t.empty()) throw InputError(file.string() + ": trace has no rows");
  return tr;
}

struct ReportFlags {
  std::vector<std::string> traces;
  std::vector<std::string> names;
  std::string out;
};

int cmd_report(const ReportFlags& f) {
  if (f.traces.empty()) throw InputError("report: at least one --trace is required");
  if (!f.names.empty() && f.names.size() != f.traces.size())
    throw InputError("report: give one --name per --trace");
  std::vector<Trace> traces;
  for (std::size_t k = 0; k < f.traces.size(); ++k) {
    Trace tr = read_trace(f.traces[k]);
    tr.name = f.names.empty() ? "run" + std::to_string(k + 1) : f.names[k];
    traces.push_back(std::move(tr));
  }
  const fs::path out(f.out);
  fs::create_directories(out);
  std::vector<std::string> outputs;
  {
    std::ofstream csv(out / "voltages_long.csv");
    csv << "run,bus,t,v\n";
    for (const Trace& tr : traces)
      for (std::size_t b = 0; b < tr.buses.size(); ++b)
        for (std::size_t r = 0; r < tr.t.size(); ++r)
          csv << csv_field(tr.name) << ',' << csv_field(tr.buses[b]) << ',' << tr.t[r] << ',' << fmt(tr.v[r][b])
              << '\n';
    outputs.push_back((out / "voltages_long.csv").string());
  }
  {
    std::ofstream csv(out / "estimates_long.csv");
    csv << "run,t,model_error,eta_hat,movement,xi,mistake,reset\n";
    for (const Trace& tr : traces)
      for (std::size_t r = 0; r < tr.t.size(); ++r) {
        const auto& e = tr.extra[r];
        csv << csv_field(tr.name) << ',' << tr.t[r] << ',' << fmt(e.at("model_error")) << ','
            << fmt(e.at("eta_hat")) << ',' << fmt(e.at("movement")) << ',' << fmt(e.at("xi")) << ','
            << static_cast<int>(e.at("mistake")) << ',' << static_cast<int>(e.at("reset")) << '\n';
      }
    outputs.push_back((out / "estimates_long.csv").string());
  }
  if (traces.size() > 1) {
    // Joined on (t, bus) over the steps and buses all traces share.
    std::ofstream csv(out / "comparison.csv");
    csv << "t,bus";
    for (const Trace& tr : traces) csv << ",v_" << csv_field(tr.name);
    for (const Trace& tr : traces) csv << ",model_error_" << csv_field(tr.name);
    csv << '\n';
    const Trace& base = traces.front();
    std::vector<std::map<int, int>> row_of(traces.size());
    for (std::size_t k = 0; k < traces.size(); ++k)
      for (std::size_t r = 0; r < traces[k].t.size(); ++r) row_of[k].emplace(traces[k].t[r], static_cast<int>(r));
    for (std::size_t b = 0; b < base.buses.size(); ++b) {
      std::vector<int> bus_idx;
      for (const Trace& tr : traces) {
        const auto it = std::find(tr.buses.begin(), tr.buses.end(), base.buses[b]);
        bus_idx.push_back(it == tr.buses.end() ? -1 : static_cast<int>(it - tr.buses.begin()));
      }
      if (std::find(bus_idx.begin(), bus_idx.end(), -1) != bus_idx.end()) continue;
      for (std::size_t r = 0; r < base.t.size(); ++r) {
        std::vector<int> rows;
        for (const auto& idx : row_of) {
          const auto it = idx.find(base.t[r]);
          rows.push_back(it == idx.end() ? -1 : it->second);
        }
        if (std::find(rows.begin(), rows.end(), -1) != rows.end()) continue;
        csv << base.t[r] << ',' << csv_field(base.buses[b]);
        for (std::size_t k = 0; k < traces.size(); ++k) csv << ',' << fmt(traces[k].v[rows[k]][bus_idx[k]]);
        for (std::size_t k = 0; k < traces.size(); ++k) csv << ',' << fmt(traces[k].extra[rows[k]].at("model_error"));
        csv << '\n';
      }
    }
    outputs.push_back((out / "comparison.csv").string());
  }
  json manifest;
  manifest["version"] = VOLTCTRL_VERSION;
  manifest["command"] = "report";
  manifest["traces"] = f.traces;
  manifest["outputs"] = outputs;
  write_json(out / "manifest.json", manifest);
  return kOk;
}

}  // namespace

int main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Online robust voltage control under unknown topology", "voltctrl"};
  app.set_version_flag("--version", std::string(VOLTCTRL_VERSION));
  app.require_subcommand(1);

  RunFlags run;
  CLI::App* run_cmd = app.add_subcommand("run", "Run one closed-loop episode");
  add_case_flags(run_cmd, run.c);
  run_cmd->add_option("--prior", run.prior, "unknown | topo-K | lines-K | known (default: config)");
  run_cmd->add_option("--delta", run.delta, "Scale delta of the parameter norm (default: config)");
  run_cmd->add_option("--seed", run.seed, "Seed of the initial estimate and subsampling (default: config)");
  run_cmd->add_option("--out", run.out, "Output directory")->required();

  SweepFlags sweep;
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "Sweep delta and prior modes over seeds");
  add_case_flags(sweep_cmd, sweep.c);
  sweep_cmd->add_option("--prior", sweep.priors, "Comma list of prior modes");
  sweep_cmd->add_option("--delta", sweep.deltas, "Comma list of delta values");
  sweep_cmd->add_option("--seeds", sweep.seeds, "Comma list of seeds");
  sweep_cmd->add_option("--num-seeds", sweep.num_seeds, "Seeds 1..N (added to --seeds)");
  sweep_cmd->add_option("--threads", sweep.threads, "Worker threads (default: hardware concurrency)");
  sweep_cmd->add_option("--out", sweep.out, "Output directory")->required();

  ReportFlags report;
  CLI::App* report_cmd = app.add_subcommand("report", "Turn traces into long-format CSV for plotting");
  report_cmd->add_option("--trace", report.traces, "trace.csv written by run (repeatable)")->required();
  report_cmd->add_option("--name", report.names, "Run name per trace (repeatable)");
  report_cmd->add_option("--out", report.out, "Output directory")->required();

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion& e) {
    out << VOLTCTRL_VERSION << '\n';
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "voltctrl: " << e.what() << '\n';
    return kInputError;
  }

  try {
    if (run_cmd->parsed()) return cmd_run(run, err);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep, err);
    return cmd_report(report);
  } catch (const InputError& e) {
    err << "voltctrl: " << e.what() << '\n';
    return kInputError;
  } catch (const SolverError& e) {
    err << "voltctrl: " << e.what() << '\n';
    return kSolverAbort;
  } catch (const fs::filesystem_error& e) {
    err << "voltctrl: " << e.what() << '\n';
    return kInputError;
  }
}

}  // namespace voltctrl::cli
