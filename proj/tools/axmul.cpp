// Command-line front end: dataset synthesis, float training, quantization
// preparation, impact estimation, budgeted multiplier selection, calibration,
// and evaluation, plus the end-to-end `run` workflow.
//
// Exit codes: 0 success, 2 configuration error, 3 infeasible energy budget,
// 4 runtime failure (I/O, malformed data).

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "axmul/arch.hpp"
#include "axmul/calib.hpp"
#include "axmul/dataset.hpp"
#include "axmul/errors.hpp"
#include "axmul/model_io.hpp"
#include "axmul/mullib.hpp"
#include "axmul/parallel.hpp"
#include "axmul/pipeline.hpp"
#include "axmul/select.hpp"
#include "axmul/sensitivity.hpp"

namespace {

using namespace axmul;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitRuntime = 4;

// Every command accepts --config plus flag overrides; flags win.
struct CommonFlags {
  std::string config_path;
  std::optional<std::string> model, library, dataset, out_dir, dataset_format, hessian;
  std::optional<int> est_batch, calib_samples, calib_epochs, calib_batch, threads, bits;
  std::optional<double> calib_lr, r_energy;
  std::optional<uint64_t> seed;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--config", config_path, "JSON config file");
    cmd.add_option("--model", model, "model file");
    cmd.add_option("--library", library, "multiplier library file");
    cmd.add_option("--dataset", dataset, "dataset directory (relative paths resolve under AXMUL_DATA_ROOT)");
    cmd.add_option("--out-dir", out_dir, "output directory");
    cmd.add_option("--dataset-format", dataset_format, "mnist or cifar10");
    cmd.add_option("--bits", bits, "uniform bitwidth for multiplicative layers");
    cmd.add_option("--est-batch", est_batch, "sample count for impact estimation");
    cmd.add_option("--calib-samples", calib_samples, "calibration sample count");
    cmd.add_option("--calib-epochs", calib_epochs, "calibration epochs");
    cmd.add_option("--calib-lr", calib_lr, "calibration learning rate");
    cmd.add_option("--calib-batch", calib_batch, "calibration mini-batch size");
    cmd.add_option("--r-energy", r_energy, "energy budget ratio in (0, 1]");
    cmd.add_option("--hessian", hessian, "curvature mode: auto, full, or rank1");
    cmd.add_option("--seed", seed, "seed for all stage randomness");
    cmd.add_option("--threads", threads, "worker cap (0 = hardware)");
  }

  PipelineConfig resolve() const {
    PipelineConfig c = load_config(config_path);
    if (model) c.model = *model;
    if (library) c.library = *library;
    if (dataset) c.dataset = *dataset;
    if (out_dir) c.out_dir = *out_dir;
    if (dataset_format) c.dataset_format = dataset_format_from_name(*dataset_format);
    if (bits) {
      c.uniform_bits = *bits;
      c.bits_by_layer.clear();
    }
    if (est_batch) c.est_batch = *est_batch;
    if (calib_samples) c.calib_samples = *calib_samples;
    if (calib_epochs) c.calib_epochs = *calib_epochs;
    if (calib_batch) c.calib_batch = *calib_batch;
    if (calib_lr) c.calib_lr = *calib_lr;
    if (r_energy) c.r_energy = *r_energy;
    if (hessian) c.hessian = hessian_mode_from_name(*hessian);
    if (seed) {
      c.seed = *seed;
      c.has_seed = true;
    }
    if (threads) c.threads = *threads;
    return c;
  }
};

void need(const std::string& value, const char* what) {
  if (value.empty()) throw ConfigError(std::string("missing ") + what);
}

Dataset load_train(const PipelineConfig& c) {
  need(c.dataset, "--dataset");
  return load_split(c.dataset_format, resolve_dataset_dir(c.dataset), true);
}

Dataset load_test(const PipelineConfig& c) {
  need(c.dataset, "--dataset");
  return load_split(c.dataset_format, resolve_dataset_dir(c.dataset), false);
}

int cmd_gen_lib(const CommonFlags& f, const std::vector<int>& bitwidths, int count,
                double mred_cap, const std::string& out) {
  PipelineConfig c = f.resolve();
  validate_config(c, true);
  MultiplierLibrary lib = make_candidate_library(bitwidths, count, c.seed, mred_cap);
  write_library(lib, out);
  std::printf("wrote %zu multipliers to %s\n", lib.entries.size(), out.c_str());
  return kExitOk;
}

int cmd_gen_data(const CommonFlags& f, int n_train, int n_test) {
  PipelineConfig c = f.resolve();
  validate_config(c, true);
  need(c.dataset, "--dataset");
  const std::string dir = resolve_dataset_dir(c.dataset);
  write_synthetic_dataset(c.dataset_format, dir, n_train, n_test, c.seed);
  std::printf("wrote %d train / %d test %s images to %s\n", n_train, n_test,
              dataset_format_name(c.dataset_format), dir.c_str());
  return kExitOk;
}

int cmd_train(const CommonFlags& f, const std::string& arch, int epochs, double lr,
              double momentum, int batch, const std::string& out) {
  PipelineConfig c = f.resolve();
  validate_config(c, true);
  set_max_threads(c.threads);
  Dataset train = load_train(c);
  Dataset test = load_test(c);
  ModelGraph m = make_arch(arch, train.images.dim(1), train.images.dim(2), train.images.dim(3),
                           train.n_classes);
  init_he(m, c.seed);
  std::vector<int> stats_idx(static_cast<size_t>(std::min(256, train.count())));
  for (size_t i = 0; i < stats_idx.size(); ++i) stats_idx[i] = static_cast<int>(i);
  set_batchnorm_stats(m, take(train, stats_idx).images);

  TrainOptions to;
  to.epochs = epochs;
  to.lr = lr;
  to.momentum = momentum;
  to.batch = batch;
  to.seed = c.seed;
  TrainStats st = train_float(m, train, to);
  for (size_t e = 0; e < st.epoch_loss.size(); ++e)
    std::printf("epoch %zu loss %.6f\n", e + 1, st.epoch_loss[e]);

  write_model(m, out);
  ForwardOptions fo;
  std::printf("train_accuracy_percent %.4f\n", evaluate_accuracy(m, train, fo));
  std::printf("test_accuracy_percent %.4f\n", evaluate_accuracy(m, test, fo));
  std::printf("wrote %s\n", out.c_str());
  return kExitOk;
}

int cmd_prepare(const CommonFlags& f, int sample_count, const std::string& out) {
  PipelineConfig c = f.resolve();
  validate_config(c, true);
  set_max_threads(c.threads);
  need(c.model, "--model");
  ModelGraph m = read_model(c.model);
  Dataset train = load_train(c);
  Dataset test = load_test(c);

  const Dataset sample =
      take(train, stage_sample(train.count(), sample_count, c.seed, kSaltEstimate));
  prepare_model(m, sample.images, resolve_bits(c, m));
  write_model(m, out);

  const Assignment exact = Assignment::all_exact(m);
  ForwardOptions fo;
  fo.assignment = &exact;
  std::printf("quantized_exact_accuracy_percent %.4f\n", evaluate_accuracy(m, test, fo));
  std::printf("wrote %s\n", out.c_str());
  return kExitOk;
}

int cmd_estimate(const CommonFlags& f, const std::string& out) {
  PipelineConfig c = f.resolve();
  validate_config(c, true);
  set_max_threads(c.threads);
  need(c.model, "--model");
  need(c.library, "--library");
  ModelGraph m = read_model(c.model);
  MultiplierLibrary lib = read_library(c.library);
  Dataset train = load_train(c);
  const Dataset est = take(train, stage_sample(train.count(), c.est_batch, c.seed, kSaltEstimate));

  EstimationOptions eo;
  eo.mode = c.hessian;
  eo.seed = c.seed;
  LossImpactTable t = build_table(m, est.images, est.labels, lib, eo);
  write_table(t, out);
  std::printf("wrote impact table for %zu layers to %s\n", t.rows.size(), out.c_str());
  return kExitOk;
}

int cmd_select(const CommonFlags& f, const std::string& table_path, const std::string& out) {
  PipelineConfig c = f.resolve();
  validate_config(c, false);  // solving is deterministic; no seed involved
  need(c.model, "--model");
  need(c.library, "--library");
  ModelGraph m = read_model(c.model);
  MultiplierLibrary lib = read_library(c.library);
  LossImpactTable t = read_table(table_path);
  SelectionSolution sol = solve(make_problem(m, lib, t, c.r_energy));
  write_solution(sol, out);
  std::printf("objective %.17g\n", sol.objective);
  std::printf("energy_ratio %.17g\n", sol.achieved_ratio);
  std::printf("wrote %s\n", out.c_str());
  return kExitOk;
}

int cmd_calibrate(const CommonFlags& f, const std::string& solution_path, const std::string& out) {
  PipelineConfig c = f.resolve();
  validate_config(c, true);
  set_max_threads(c.threads);
  need(c.model, "--model");
  need(c.library, "--library");
  ModelGraph m = read_model(c.model);
  MultiplierLibrary lib = read_library(c.library);
  Dataset train = load_train(c);
  const Assignment a = to_assignment(read_solution(solution_path));
  const Dataset cd = take(train, stage_sample(train.count(), c.calib_samples, c.seed, kSaltCalibrate));

  CalibOptions co;
  co.epochs = c.calib_epochs;
  co.lr = c.calib_lr;
  co.batch = c.calib_batch;
  CalibState st = calibrate(m, a, &lib, cd.images, cd.labels, co);
  write_model(m, out);
  for (size_t e = 0; e < st.epoch_loss.size(); ++e)
    std::printf("epoch %zu loss %.6f\n", e + 1, st.epoch_loss[e]);
  if (st.diverged) std::printf("warning: calibration diverged after %d halvings\n", st.lr_halvings);
  std::printf("wrote %s\n", out.c_str());
  return kExitOk;
}

int cmd_evaluate(const CommonFlags& f, const std::string& solution_path, bool train_split) {
  PipelineConfig c = f.resolve();
  validate_config(c, false);  // a fixed model and split need no seed
  set_max_threads(c.threads);
  need(c.model, "--model");
  ModelGraph m = read_model(c.model);
  Dataset d = train_split ? load_train(c) : load_test(c);

  MultiplierLibrary lib;
  Assignment a;
  ForwardOptions fo;
  if (!solution_path.empty()) {
    need(c.library, "--library");
    lib = read_library(c.library);
    a = to_assignment(read_solution(solution_path));
    fo.assignment = &a;
    fo.library = &lib;
  } else if (m.prepared()) {
    a = Assignment::all_exact(m);
    fo.assignment = &a;
    if (!c.library.empty()) {
      lib = read_library(c.library);
      fo.library = &lib;
    }
  }
  std::printf("accuracy_percent %.4f\n", evaluate_accuracy(m, d, fo));
  return kExitOk;
}

int cmd_run(const CommonFlags& f) {
  const PipelineConfig c = f.resolve();
  RunReport r = run_pipeline(c);
  std::printf("energy_ratio %.6g (budget %.6g)\n", r.energy_ratio, r.budget_ratio);
  if (r.acc_float) std::printf("float_accuracy_percent %.4f\n", *r.acc_float);
  std::printf("quantized_exact_accuracy_percent %.4f\n", r.acc_exact);
  std::printf("approx_pre_calibration_percent %.4f\n", r.acc_pre);
  std::printf("approx_post_calibration_percent %.4f\n", r.acc_post);
  std::printf("report written to %s\n", c.out_dir.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"approximate-multiplier substitution toolkit"};
  app.require_subcommand(1);

  // gen-lib
  auto* gen_lib = app.add_subcommand("gen-lib", "generate a candidate multiplier library");
  CommonFlags gl_flags;
  gl_flags.add_to(*gen_lib);
  std::vector<int> gl_bits{4};
  int gl_count = 8;
  double gl_cap = 0.2;
  std::string gl_out = "library.mul";
  gen_lib->add_option("--bitwidths", gl_bits, "operand bitwidths (repeatable)");
  gen_lib->add_option("--count", gl_count, "generated candidates per bitwidth");
  gen_lib->add_option("--mred-cap", gl_cap, "max mean relative error of candidates");
  gen_lib->add_option("--out", gl_out, "output library file");

  // gen-data
  auto* gen_data = app.add_subcommand("gen-data", "write a synthetic glyph dataset");
  CommonFlags gd_flags;
  gd_flags.add_to(*gen_data);
  int gd_train = 2000, gd_test = 500;
  gen_data->add_option("--train", gd_train, "training split size");
  gen_data->add_option("--test", gd_test, "test split size");

  // train
  auto* train = app.add_subcommand("train", "train a float model (one-off utility)");
  CommonFlags tr_flags;
  tr_flags.add_to(*train);
  std::string tr_arch = "lenet-small", tr_out = "model.axm";
  int tr_epochs = 10, tr_batch = 64;
  double tr_lr = 0.05, tr_momentum = 0.9;
  train->add_option("--arch", tr_arch, "lenet-small or toy-resnet");
  train->add_option("--epochs", tr_epochs, "training epochs");
  train->add_option("--lr", tr_lr, "learning rate");
  train->add_option("--momentum", tr_momentum, "SGD momentum");
  train->add_option("--batch", tr_batch, "mini-batch size");
  train->add_option("--out", tr_out, "output model file");

  // prepare
  auto* prepare = app.add_subcommand("prepare", "quantize a float model");
  CommonFlags pp_flags;
  pp_flags.add_to(*prepare);
  int pp_sample = 256;
  std::string pp_out = "prepared.axm";
  prepare->add_option("--sample", pp_sample, "sample count for the activation fit");
  prepare->add_option("--out", pp_out, "output model file");

  // estimate
  auto* estimate = app.add_subcommand("estimate", "build the loss-impact table");
  CommonFlags es_flags;
  es_flags.add_to(*estimate);
  std::string es_out = "table.tsv";
  estimate->add_option("--out", es_out, "output table file");

  // select
  auto* select = app.add_subcommand("select", "solve the budgeted selection");
  CommonFlags se_flags;
  se_flags.add_to(*select);
  std::string se_table = "table.tsv", se_out = "solution.txt";
  select->add_option("--table", se_table, "impact table file");
  select->add_option("--out", se_out, "output solution file");

  // calibrate
  auto* calibrate = app.add_subcommand("calibrate", "recover accuracy without retraining");
  CommonFlags ca_flags;
  ca_flags.add_to(*calibrate);
  std::string ca_solution = "solution.txt", ca_out = "calibrated.axm";
  calibrate->add_option("--solution", ca_solution, "selection solution file");
  calibrate->add_option("--out", ca_out, "output model file");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "measure accuracy");
  CommonFlags ev_flags;
  ev_flags.add_to(*evaluate);
  std::string ev_solution;
  bool ev_train = false;
  evaluate->add_option("--solution", ev_solution, "optional solution file (approximate mode)");
  evaluate->add_flag("--train-split", ev_train, "evaluate the training split instead of test");

  // run
  auto* run = app.add_subcommand("run", "full workflow: estimate, select, calibrate, evaluate");
  CommonFlags rn_flags;
  rn_flags.add_to(*run);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_lib->parsed()) return cmd_gen_lib(gl_flags, gl_bits, gl_count, gl_cap, gl_out);
    if (gen_data->parsed()) return cmd_gen_data(gd_flags, gd_train, gd_test);
    if (train->parsed())
      return cmd_train(tr_flags, tr_arch, tr_epochs, tr_lr, tr_momentum, tr_batch, tr_out);
    if (prepare->parsed()) return cmd_prepare(pp_flags, pp_sample, pp_out);
    if (estimate->parsed()) return cmd_estimate(es_flags, es_out);
    if (select->parsed()) return cmd_select(se_flags, se_table, se_out);
    if (calibrate->parsed()) return cmd_calibrate(ca_flags, ca_solution, ca_out);
    if (evaluate->parsed()) return cmd_evaluate(ev_flags, ev_solution, ev_train);
    if (run->parsed()) return cmd_run(rn_flags);
  } catch (const InfeasibleBudget& e) {
    std::fprintf(stderr, "error: %s\nminimum achievable ratio: %.17g\n", e.what(),
                 e.min_achievable_ratio);
    return kExitInfeasible;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitConfig;
}
