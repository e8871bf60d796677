#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "axmul/calib.hpp"
#include "axmul/dataset.hpp"
#include "axmul/net.hpp"
#include "axmul/select.hpp"
#include "axmul/sensitivity.hpp"

namespace axmul {

// Workflow configuration, read from a JSON file and overridable by CLI
// flags. The seed is mandatory: every stage derives its randomness from it.
struct PipelineConfig {
  std::string model;
  std::string library;
  std::string dataset;
  std::string out_dir = "out";
  DatasetFormat dataset_format = DatasetFormat::MnistIdx;

  int uniform_bits = 4;
  std::map<int, int> bits_by_layer;  // per mult-layer ordinal, overrides uniform

  int est_batch = 256;     // samples for the impact-table estimate
  int calib_samples = 1024;
  int calib_epochs = 5;
  double calib_lr = 0.1;
  int calib_batch = 64;

  double r_energy = 1.0;   // allowed approx/exact energy ratio, in (0, 1]
  HessianMode hessian = HessianMode::Auto;

  bool has_seed = false;
  uint64_t seed = 0;
  int threads = 0;         // 0 = hardware concurrency
};

// Parses a JSON config; unknown keys are rejected so typos surface early.
// An empty path yields the defaults.
PipelineConfig load_config(const std::string& path);

// Range checks; `need_seed` additionally requires an explicit seed.
void validate_config(const PipelineConfig& c, bool need_seed);

// Per-ordinal bitwidths for the model's multiplicative layers.
std::vector<int> resolve_bits(const PipelineConfig& c, const ModelGraph& m);

// Folds batch norm, then fits per-layer quantization from a float-path run
// over the sample batch: full-range weight fit and full-range input fit.
// Stamps bitwidths and clears any stale calibration state.
void prepare_model(ModelGraph& m, const Tensor& sample, const std::vector<int>& bits);

// Stage-specific deterministic sample picks. Distinct salts give every stage
// an independent stream, so running stages one by one matches `run`.
inline constexpr uint64_t kSaltEstimate = 0x9e3779b97f4a7c15ull;
inline constexpr uint64_t kSaltCalibrate = 0x6a09e667f3bcc909ull;

std::vector<int> stage_sample(int total, int want, uint64_t seed, uint64_t salt);

// Output mean relative error of each multiplicative layer under the
// assignment, against the all-exact execution of the same prepared model.
std::vector<double> per_layer_output_mre(const ModelGraph& m, const Tensor& probe,
                                         const Assignment& a, const MultiplierLibrary& lib);

struct LayerReport {
  int ordinal = 0;
  int model_layer = 0;
  std::string kind;
  int bits = 0;
  std::string multiplier;
  double dloss = 0.0;         // estimated loss change of the chosen candidate
  double energy = 0.0;        // pJ per sample under the choice
  double exact_energy = 0.0;  // pJ per sample with the exact multiplier
  double mre_pre = 0.0;
  double mre_post = 0.0;
  double q_star = 0.0;
  double clip_gamma = 0.0;
  double clip_beta = 0.0;
};

struct RunReport {
  std::vector<LayerReport> layers;
  double objective = 0.0;     // solver objective (summed estimated dloss)
  double energy_ratio = 0.0;  // solver's achieved ratio
  double budget_ratio = 0.0;  // configured R
  bool optimal = true;
  std::optional<double> acc_float;  // only when run prepared a float model
  double acc_exact = 0.0;
  double acc_pre = 0.0;
  double acc_post = 0.0;
  CalibState calib;
  std::vector<std::pair<std::string, double>> stage_seconds;
};

// prepare (if the model is unprepared) -> estimate -> select -> calibrate ->
// evaluate. Writes table.tsv, solution.txt, calibrated.axm, report.json,
// summary.txt, layer_mre.csv, and timings.json under out_dir. Everything but
// timings.json is byte-stable under (config, seed) and thread count.
RunReport run_pipeline(const PipelineConfig& cfg);

// Report emission (also used by run_pipeline): report.json, summary.txt,
// layer_mre.csv.
void write_report(const RunReport& r, const PipelineConfig& cfg, const std::string& dir);

}  // namespace axmul
