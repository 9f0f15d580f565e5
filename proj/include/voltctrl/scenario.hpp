#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "voltctrl/controller.hpp"
#include "voltctrl/grid.hpp"
#include "voltctrl/oracle.hpp"

namespace voltctrl {

// Flat key = value settings of a case. Units: kV^2, per unit, MVar.
struct CaseConfig {
  double v0_kv2 = 144.0;
  double vmin_pu = 0.95;
  double vmax_pu = 1.05;
  double qmin_mvar = -0.24;
  double qmax_mvar = 0.24;
  double pv_weight = 0.1;
  double pu_weight = 10.0;
  double beta = 100.0;
  double delta = 20.0;
  double epsilon = 0.1;
  double eta_bar = 10.0;
  double alpha = 1.0;
  std::string prior_mode = "unknown";  // unknown | topo-K | lines-K | known
  std::uint64_t seed = 0;
};

// Parses a config file; unknown keys and malformed values are InputErrors
// naming the line. Missing keys keep their value from `base`.
CaseConfig parse_config(const std::string& text, const CaseConfig& base = {});
std::string format_config(const CaseConfig& cfg);

struct CaseBundle {
  RadialNetwork network;
  std::vector<std::string> labels;  // original label of internal bus b at labels[b]
  Series series;
  CaseConfig config;

  // Internal index of a label; throws InputError when unknown.
  int bus(const std::string& label) const;
};

// Edge CSV `from,to,r_ohm,x_ohm,controllable`, series CSV with columns
// p_<label> and qe_<label> for every non-substation bus. An empty config path
// keeps the defaults. The substation is the only bus never appearing in `to`;
// it becomes bus 0 and the others are numbered by label (numerically when all
// labels are integers).
CaseBundle load_case(const std::filesystem::path& edge_csv, const std::filesystem::path& series_csv,
                     const std::filesystem::path& config_file = {});
// edges.csv, series.csv and (if present) config.txt inside dir.
CaseBundle load_case_dir(const std::filesystem::path& dir);
void save_case(const CaseBundle& bundle, const std::filesystem::path& dir);

// Prior mode string: "unknown", "known", "topo-K", "lines-K".
std::pair<PriorMode, int> parse_prior_mode(const std::string& text);
std::string format_prior_mode(PriorMode mode, int k);

// Oracle settings of a case. Buses outside the control set get q_min = q_max = 0;
// buses in `withheld` lose control as well.
ControllerConfig controller_config(const CaseBundle& bundle, const VparBox& vpar_box,
                                   const std::vector<int>& withheld = {});

struct SynthReport {
  double eta_star = 0.0;      // realized max_t ||R dp + X dq_e||_inf
  double q_limit = 0.0;       // symmetric control limit after widening
  int widenings = 0;
  int corners_checked = 0;
};

// Random feeder with smooth load / PV profiles. The walk component is scaled
// so the realized noise level lands within 20% of noise_target, eta_bar is
// set to twice the target, and the control limit is widened until the box
// condition holds at the extreme corners of the exact v_par box and along
// the realized v_par trace (for X*). Throws
// InputError when that fails within the widening cap.
CaseBundle synth_case(int n, std::uint64_t seed, double noise_target, int steps = 2001,
                      SynthReport* report = nullptr);

// Box condition: every checked point c admits q in the control box with
// X q + c inside the limits shrunk by eta_bar + epsilon. Checked are the two
// extreme corners of the box (all lower, all upper bounds) and every row of
// `points` (typically the realized v_par trace).
bool assumption3_holds(const Eigen::MatrixXd& x, const VparBox& box, const ControllerConfig& cfg,
                       const Eigen::MatrixXd& points = {}, int* corners_checked = nullptr);

struct TopologyChange {
  int at_step = 0;
  std::vector<std::pair<std::string, std::string>> removed;  // (from, to) labels
  struct Added {
    std::string from, to;
    double r = 0.0, x = 0.0;  // <= 0: inherit the removed line feeding `to`
  };
  std::vector<Added> added;
};

// "1000: -33>40,-46>48,+1>40,+10>48", optionally "+a>b@r/x".
TopologyChange parse_topology_change(const std::string& text);

// Rewires the network; the series and config are unchanged.
CaseBundle apply_topology_change(const CaseBundle& bundle, const TopologyChange& change);

}  // namespace voltctrl
