#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "mflab/pde.hpp"

namespace mflab {

// Flat key = value configuration with typed dotted paths. '#' starts a
// comment; values are scalars, or space/semicolon-separated lists.
class ConfigMap {
public:
  static ConfigMap parse_file(const std::string& path);
  static ConfigMap parse_string(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_string(const std::string& key) const;
  std::string get_string_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  int get_int(const std::string& key) const;
  int get_int_or(const std::string& key, int fallback) const;
  uint64_t get_seed(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<double> get_doubles_or(const std::string& key,
                                     const std::vector<double>& fallback) const;
  // unknown keys are config mistakes; call after reading everything
  void require_all_consumed() const;

private:
  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> consumed_;
};

struct FunctionalSpec {
  std::string family;  // lq | cylindrical | interaction | zero | linear
  // lq
  double q = 0.0, q_bar = 0.0;
  // cylindrical
  Mat a;
  Vec b, l;
  Mat Q;
  // interaction
  double amp = 0.0, rho = 1.0;
  // linear
  Vec lin;

  FunctionalPtr build(int dim) const;
};

struct ExperimentConfig {
  uint64_t seed = 0;
  int dim = 1;
  FunctionalSpec running;
  FunctionalSpec terminal;
  SolverConfig solver;
  TimeGrid grid;
  std::optional<std::string> measure_path;
  Mat measure_atoms;  // used when no path given
  Vec measure_weights;
  std::vector<double> probe_x;      // flattened probe atoms, dim entries each
  std::vector<double> probe_t;      // evaluation times
  std::vector<int> probe_h_steps;   // horizon splits, in grid steps
  int replications = 1;
  int dpp_cap_atoms = 4096;
  std::string out_dir = "out";

  EmpiricalMeasure load_measure() const;
  // admissibility of the lambda margins; throws on a first-order violation,
  // returns false when only the equation-level margin fails
  bool validate() const;
};

ExperimentConfig load_experiment(const std::string& path);

// exit codes: 0 ok, 2 config error, 3 solver non-convergence, 4 internal error
int run_subcommand(const std::string& name, const std::string& config_path,
                   const std::optional<std::string>& out_override,
                   std::optional<int> replications_override,
                   std::optional<int> threads_override);

}  // namespace mflab
