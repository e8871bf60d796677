#include "axmul/pipeline.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>

#include "axmul/arch.hpp"
#include "axmul/errors.hpp"
#include "axmul/model_io.hpp"
#include "axmul/parallel.hpp"
#include "axmul/quant.hpp"
#include "json.hpp"

namespace axmul {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr int kChunk = 256;

Tensor slice_samples(const Tensor& t, int begin, int end) {
  std::vector<int> shape = t.shape;
  shape[0] = end - begin;
  const size_t per = static_cast<size_t>(t.numel() / t.dim(0));
  Tensor out(std::move(shape));
  std::copy_n(t.data.begin() + static_cast<int64_t>(begin) * static_cast<int64_t>(per),
              static_cast<size_t>(end - begin) * per, out.data.begin());
  return out;
}

int json_int(const ordered_json& v, const std::string& key) {
  if (!v.is_number_integer())
    throw ConfigError("config key '" + key + "' must be an integer");
  return v.get<int>();
}

double json_num(const ordered_json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return v.get<double>();
}

std::string json_str(const ordered_json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
  return v.get<std::string>();
}

void parse_bits(PipelineConfig& c, const ordered_json& v) {
  if (v.is_number_integer()) {
    c.uniform_bits = v.get<int>();
    c.bits_by_layer.clear();
    return;
  }
  if (!v.is_object())
    throw ConfigError("config key 'bits' must be an integer or an object of layer ordinals");
  c.bits_by_layer.clear();
  for (const auto& [key, val] : v.items()) {
    if (key == "default") {
      c.uniform_bits = json_int(val, "bits.default");
      continue;
    }
    size_t used = 0;
    int ordinal = -1;
    try {
      ordinal = std::stoi(key, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != key.size() || ordinal < 0)
      throw ConfigError("config key 'bits': '" + key +
                        "' is neither a layer ordinal nor 'default'");
    c.bits_by_layer[ordinal] = json_int(val, "bits." + key);
  }
}

}  // namespace

PipelineConfig load_config(const std::string& path) {
  PipelineConfig c;
  if (path.empty()) return c;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + ": config root must be a JSON object");

  for (const auto& [key, v] : j.items()) {
    if (key == "model") c.model = json_str(v, key);
    else if (key == "library") c.library = json_str(v, key);
    else if (key == "dataset") c.dataset = json_str(v, key);
    else if (key == "out_dir") c.out_dir = json_str(v, key);
    else if (key == "dataset_format") c.dataset_format = dataset_format_from_name(json_str(v, key));
    else if (key == "bits") parse_bits(c, v);
    else if (key == "est_batch") c.est_batch = json_int(v, key);
    else if (key == "calib_samples") c.calib_samples = json_int(v, key);
    else if (key == "calib_epochs") c.calib_epochs = json_int(v, key);
    else if (key == "calib_lr") c.calib_lr = json_num(v, key);
    else if (key == "calib_batch") c.calib_batch = json_int(v, key);
    else if (key == "r_energy") c.r_energy = json_num(v, key);
    else if (key == "hessian") c.hessian = hessian_mode_from_name(json_str(v, key));
    else if (key == "threads") c.threads = json_int(v, key);
    else if (key == "seed") {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<int64_t>() < 0))
        throw ConfigError("config key 'seed' must be a non-negative integer");
      c.seed = v.get<uint64_t>();
      c.has_seed = true;
    } else {
      throw ConfigError(path + ": unknown config key '" + key + "'");
    }
  }
  return c;
}

void validate_config(const PipelineConfig& c, bool need_seed) {
  auto bits_ok = [](int b) { return b >= 2 && b <= 8; };
  if (!bits_ok(c.uniform_bits))
    throw ConfigError("bitwidth " + std::to_string(c.uniform_bits) + " out of range [2,8]");
  for (const auto& [k, b] : c.bits_by_layer)
    if (!bits_ok(b))
      throw ConfigError("bitwidth " + std::to_string(b) + " for layer " + std::to_string(k) +
                        " out of range [2,8]");
  if (c.est_batch <= 0) throw ConfigError("est_batch must be > 0");
  if (c.calib_samples <= 0) throw ConfigError("calib_samples must be > 0");
  if (c.calib_epochs < 0) throw ConfigError("calib_epochs must be >= 0");
  if (c.calib_lr <= 0.0) throw ConfigError("calib_lr must be > 0");
  if (c.calib_batch <= 0) throw ConfigError("calib_batch must be > 0");
  if (!(c.r_energy > 0.0 && c.r_energy <= 1.0)) throw ConfigError("r_energy must lie in (0, 1]");
  if (c.threads < 0) throw ConfigError("threads must be >= 0");
  if (need_seed && !c.has_seed)
    throw ConfigError("a seed is required (config key 'seed' or --seed)");
}

std::vector<int> resolve_bits(const PipelineConfig& c, const ModelGraph& m) {
  const int k = static_cast<int>(m.mult_layers().size());
  std::vector<int> bits(static_cast<size_t>(k), c.uniform_bits);
  for (const auto& [ordinal, b] : c.bits_by_layer) {
    if (ordinal >= k)
      throw ConfigError("bitwidth map names layer " + std::to_string(ordinal) + " but the model has " +
                        std::to_string(k) + " multiplicative layers");
    bits[static_cast<size_t>(ordinal)] = b;
  }
  return bits;
}

void prepare_model(ModelGraph& m, const Tensor& sample, const std::vector<int>& bits) {
  m = fold_batchnorm(std::move(m));
  const std::vector<int> mult = m.mult_layers();
  if (bits.size() != mult.size())
    throw ConfigError("got " + std::to_string(bits.size()) + " bitwidths for " +
                      std::to_string(mult.size()) + " multiplicative layers");
  if (sample.shape.size() != 4 || sample.dim(0) <= 0)
    throw ConfigError("preparation sample must be a non-empty NCHW batch");

  // Stale clip state must not leak into the weight fit.
  for (int li : mult) {
    Layer& l = m.layers[static_cast<size_t>(li)];
    l.calibrated = false;
    l.clip_gamma = 0.0;
    l.clip_beta = 0.0;
    l.q_star = 0.0;
  }

  // Full-range input fit needs only per-layer min/max, so chunked float
  // passes accumulate those.
  std::vector<double> mn(mult.size(), std::numeric_limits<double>::infinity());
  std::vector<double> mx(mult.size(), -std::numeric_limits<double>::infinity());
  ForwardOptions fo;
  fo.retain_trace = true;
  for (int begin = 0; begin < sample.dim(0); begin += kChunk) {
    const int end = std::min(begin + kChunk, sample.dim(0));
    const Tensor chunk = slice_samples(sample, begin, end);
    const ForwardTrace tr = forward(m, chunk, fo);
    for (size_t k = 0; k < mult.size(); ++k) {
      const Tensor& x = input_of(tr, mult[k]);
      for (double v : x.data) {
        mn[k] = std::min(mn[k], v);
        mx[k] = std::max(mx[k], v);
      }
    }
  }

  for (size_t k = 0; k < mult.size(); ++k) {
    Layer& l = m.layers[static_cast<size_t>(mult[k])];
    const std::array<double, 2> range{mn[k], mx[k]};
    l.qx = fit_params(std::span<const double>(range), bits[k], 0.0);
    l.qw = fit_params(std::span<const double>(l.weight.data), bits[k], 0.0);
    l.bits = bits[k];
    l.prepared = true;
  }
  m.validate();
}

std::vector<int> stage_sample(int total, int want, uint64_t seed, uint64_t salt) {
  Rng rng(seed ^ salt);
  return sample_indices(total, want, rng);
}

std::vector<double> per_layer_output_mre(const ModelGraph& m, const Tensor& probe,
                                         const Assignment& a, const MultiplierLibrary& lib) {
  const std::vector<int> mult = m.mult_layers();
  std::vector<double> num(mult.size(), 0.0);
  std::vector<int64_t> den(mult.size(), 0);

  const Assignment exact = Assignment::all_exact(m);
  ForwardOptions fe, fa;
  fe.assignment = &exact;
  fe.library = &lib;
  fe.retain_trace = true;
  fa.assignment = &a;
  fa.library = &lib;
  fa.retain_trace = true;

  for (int begin = 0; begin < probe.dim(0); begin += kChunk) {
    const int end = std::min(begin + kChunk, probe.dim(0));
    const Tensor chunk = slice_samples(probe, begin, end);
    const ForwardTrace te = forward(m, chunk, fe);
    const ForwardTrace ta = forward(m, chunk, fa);
    for (size_t k = 0; k < mult.size(); ++k) {
      const Tensor& ye = te.layers[static_cast<size_t>(mult[k])].y;
      const Tensor& ya = ta.layers[static_cast<size_t>(mult[k])].y;
      num[k] += mean_relative_error(ya, ye) * static_cast<double>(ya.numel());
      den[k] += ya.numel();
    }
  }
  std::vector<double> out(mult.size());
  for (size_t k = 0; k < mult.size(); ++k) out[k] = num[k] / static_cast<double>(den[k]);
  return out;
}

namespace {

struct StageClock {
  std::vector<std::pair<std::string, double>>& sink;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

  void lap(const std::string& name) {
    const auto t1 = std::chrono::steady_clock::now();
    sink.emplace_back(name, std::chrono::duration<double>(t1 - t0).count());
    t0 = t1;
  }
};

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw DataError("write failed for '" + path + "'");
}

ordered_json config_echo(const PipelineConfig& cfg, const RunReport& r) {
  ordered_json j;
  j["model"] = cfg.model;
  j["library"] = cfg.library;
  j["dataset"] = cfg.dataset;
  j["dataset_format"] = dataset_format_name(cfg.dataset_format);
  j["out_dir"] = cfg.out_dir;
  std::vector<int> bits;
  for (const LayerReport& l : r.layers) bits.push_back(l.bits);
  j["bits"] = bits;
  j["est_batch"] = cfg.est_batch;
  j["calib_samples"] = cfg.calib_samples;
  j["calib_epochs"] = cfg.calib_epochs;
  j["calib_lr"] = cfg.calib_lr;
  j["calib_batch"] = cfg.calib_batch;
  j["r_energy"] = cfg.r_energy;
  j["hessian"] = hessian_mode_name(cfg.hessian);
  j["seed"] = cfg.seed;
  return j;
}

}  // namespace

void write_report(const RunReport& r, const PipelineConfig& cfg, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());

  double exact_total = 0.0, chosen_total = 0.0;
  for (const LayerReport& l : r.layers) {
    exact_total += l.exact_energy;
    chosen_total += l.energy;
  }

  ordered_json j;
  j["config"] = config_echo(cfg, r);
  ordered_json acc;
  if (r.acc_float.has_value()) acc["float"] = *r.acc_float;
  else acc["float"] = nullptr;
  acc["quantized_exact"] = r.acc_exact;
  acc["approx_pre_calibration"] = r.acc_pre;
  acc["approx_post_calibration"] = r.acc_post;
  j["accuracy"] = acc;

  ordered_json sel;
  sel["objective"] = r.objective;
  sel["energy_ratio"] = r.energy_ratio;
  sel["budget_ratio"] = r.budget_ratio;
  sel["optimal"] = r.optimal;
  sel["exact_energy_pj"] = exact_total;
  sel["chosen_energy_pj"] = chosen_total;
  j["selection"] = sel;

  ordered_json cal;
  cal["epochs"] = r.calib.epochs;
  cal["final_lr"] = r.calib.lr;
  cal["batch"] = r.calib.batch;
  cal["lr_halvings"] = r.calib.lr_halvings;
  cal["diverged"] = r.calib.diverged;
  cal["epoch_loss"] = r.calib.epoch_loss;
  j["calibration"] = cal;

  ordered_json layers = ordered_json::array();
  for (const LayerReport& l : r.layers) {
    ordered_json row;
    row["ordinal"] = l.ordinal;
    row["model_layer"] = l.model_layer;
    row["kind"] = l.kind;
    row["bits"] = l.bits;
    row["multiplier"] = l.multiplier;
    row["estimated_dloss"] = l.dloss;
    row["energy_pj"] = l.energy;
    row["exact_energy_pj"] = l.exact_energy;
    row["output_mre_pre"] = l.mre_pre;
    row["output_mre_post"] = l.mre_post;
    row["q_star"] = l.q_star;
    row["clip_gamma"] = l.clip_gamma;
    row["clip_beta"] = l.clip_beta;
    layers.push_back(row);
  }
  j["layers"] = layers;
  write_text((fs::path(dir) / "report.json").string(), j.dump(2) + "\n");

  std::string csv = "ordinal,model_layer,kind,multiplier,mre_pre,mre_post\n";
  for (const LayerReport& l : r.layers)
    csv += std::to_string(l.ordinal) + "," + std::to_string(l.model_layer) + "," + l.kind + "," +
           l.multiplier + "," + fmt_double(l.mre_pre) + "," + fmt_double(l.mre_post) + "\n";
  write_text((fs::path(dir) / "layer_mre.csv").string(), csv);

  char line[256];
  std::string s;
  s += "approximate-multiplier substitution report\n";
  s += "===========================================\n\n";
  std::snprintf(line, sizeof line, "energy budget R        %.6g\n", r.budget_ratio);
  s += line;
  std::snprintf(line, sizeof line, "achieved energy ratio  %.6g\n", r.energy_ratio);
  s += line;
  std::snprintf(line, sizeof line, "estimated loss change  %.6g\n", r.objective);
  s += line;
  std::snprintf(line, sizeof line, "solver optimal         %s\n\n", r.optimal ? "yes" : "no");
  s += line;
  if (r.acc_float.has_value()) {
    std::snprintf(line, sizeof line, "float accuracy         %.2f%%\n", *r.acc_float);
    s += line;
  }
  std::snprintf(line, sizeof line, "quantized-exact        %.2f%%\n", r.acc_exact);
  s += line;
  std::snprintf(line, sizeof line, "approx pre-calibration %.2f%%\n", r.acc_pre);
  s += line;
  std::snprintf(line, sizeof line, "approx post-calib      %.2f%%\n\n", r.acc_post);
  s += line;
  s += "layer  bits  multiplier        dloss_est     energy_pj     mre_pre -> mre_post\n";
  for (const LayerReport& l : r.layers) {
    std::snprintf(line, sizeof line, "%5d  %4d  %-16s  %-12.5g  %-12.5g  %.5g -> %.5g\n",
                  l.ordinal, l.bits, l.multiplier.c_str(), l.dloss, l.energy, l.mre_pre,
                  l.mre_post);
    s += line;
  }
  write_text((fs::path(dir) / "summary.txt").string(), s);
}

RunReport run_pipeline(const PipelineConfig& cfg) {
  validate_config(cfg, true);
  if (cfg.model.empty() || cfg.library.empty() || cfg.dataset.empty())
    throw ConfigError("run needs model, library, and dataset paths");
  set_max_threads(cfg.threads);

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw DataError("cannot create output directory '" + cfg.out_dir + "': " + ec.message());

  RunReport r;
  r.budget_ratio = cfg.r_energy;
  StageClock clock{r.stage_seconds};

  MultiplierLibrary lib = read_library(cfg.library);
  ModelGraph m = read_model(cfg.model);
  const std::string data_dir = resolve_dataset_dir(cfg.dataset);
  Dataset train = load_split(cfg.dataset_format, data_dir, true);
  Dataset test = load_split(cfg.dataset_format, data_dir, false);
  if (train.images.dim(1) != m.in_ch || train.images.dim(2) != m.in_h ||
      train.images.dim(3) != m.in_w)
    throw ConfigError("dataset shape does not match model input");
  clock.lap("load");

  const std::vector<int> est_idx =
      stage_sample(train.count(), cfg.est_batch, cfg.seed, kSaltEstimate);
  const Dataset est = take(train, est_idx);
  if (!m.prepared()) {
    ForwardOptions float_fo;
    r.acc_float = evaluate_accuracy(m, test, float_fo);
    prepare_model(m, est.images, resolve_bits(cfg, m));
  }
  clock.lap("prepare");

  const Assignment exact = Assignment::all_exact(m);
  ForwardOptions exact_fo;
  exact_fo.assignment = &exact;
  exact_fo.library = &lib;
  r.acc_exact = evaluate_accuracy(m, test, exact_fo);
  clock.lap("evaluate-exact");

  EstimationOptions eo;
  eo.mode = cfg.hessian;
  eo.seed = cfg.seed;
  const LossImpactTable table = build_table(m, est.images, est.labels, lib, eo);
  write_table(table, (fs::path(cfg.out_dir) / "table.tsv").string());
  clock.lap("estimate");

  const SelectionProblem problem = make_problem(m, lib, table, cfg.r_energy);
  const SelectionSolution sol = solve(problem);
  write_solution(sol, (fs::path(cfg.out_dir) / "solution.txt").string());
  const Assignment chosen = to_assignment(sol);
  r.objective = sol.objective;
  r.energy_ratio = sol.achieved_ratio;
  r.optimal = sol.optimal;
  clock.lap("select");

  ForwardOptions approx_fo;
  approx_fo.assignment = &chosen;
  approx_fo.library = &lib;
  r.acc_pre = evaluate_accuracy(m, test, approx_fo);
  const std::vector<double> mre_pre = per_layer_output_mre(m, est.images, chosen, lib);
  clock.lap("evaluate-pre");

  const std::vector<int> calib_idx =
      stage_sample(train.count(), cfg.calib_samples, cfg.seed, kSaltCalibrate);
  const Dataset cd = take(train, calib_idx);
  CalibOptions co;
  co.epochs = cfg.calib_epochs;
  co.lr = cfg.calib_lr;
  co.batch = cfg.calib_batch;
  r.calib = calibrate(m, chosen, &lib, cd.images, cd.labels, co);
  clock.lap("calibrate");

  const std::vector<double> mre_post = per_layer_output_mre(m, est.images, chosen, lib);
  const std::string model_out = (fs::path(cfg.out_dir) / "calibrated.axm").string();
  write_model(m, model_out);
  // The report describes the shipped artifact, so accuracy is measured on
  // the reloaded file, not the in-memory twin.
  const ModelGraph reloaded = read_model(model_out);
  r.acc_post = evaluate_accuracy(reloaded, test, approx_fo);
  clock.lap("evaluate-post");

  const std::vector<int> mult = m.mult_layers();
  const std::vector<ConvGeom> geoms = mult_geometries(m);
  for (size_t k = 0; k < mult.size(); ++k) {
    const Layer& l = m.layers[static_cast<size_t>(mult[k])];
    LayerReport row;
    row.ordinal = static_cast<int>(k);
    row.model_layer = mult[k];
    row.kind = layer_kind_name(l.kind);
    row.bits = l.bits;
    row.multiplier = sol.names[k];
    const LutMultiplier* mul = lib.find(sol.names[k]);
    const LutMultiplier* ex = lib.exact_for(l.bits, l.bits);
    row.energy = layer_energy(geoms[k], mul->pdp);
    row.exact_energy = layer_energy(geoms[k], ex->pdp);
    const auto it = table.rows.find(static_cast<int>(k));
    for (const ImpactEntry& e : it->second)
      if (e.mul == sol.names[k]) row.dloss = e.dloss;
    row.mre_pre = mre_pre[k];
    row.mre_post = mre_post[k];
    row.q_star = l.q_star;
    row.clip_gamma = l.clip_gamma;
    row.clip_beta = l.clip_beta;
    r.layers.push_back(row);
  }

  write_report(r, cfg, cfg.out_dir);

  ordered_json t;
  ordered_json stages = ordered_json::array();
  double total = 0.0;
  for (const auto& [name, sec] : r.stage_seconds) {
    ordered_json row;
    row["name"] = name;
    row["seconds"] = sec;
    stages.push_back(row);
    total += sec;
  }
  t["stages"] = stages;
  t["total_seconds"] = total;
  write_text((fs::path(cfg.out_dir) / "timings.json").string(), t.dump(2) + "\n");

  return r;
}

}  // namespace axmul
