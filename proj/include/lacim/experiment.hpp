#pragma once

// Config-driven pipelines behind the command-line tool: the simulation suite,
// the toy OOD comparison and the theory checks.

#include "lacim/evaluation.hpp"
#include "lacim/inference.hpp"
#include "lacim/model.hpp"
#include "lacim/scm.hpp"
#include "lacim/theory.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

namespace lacim {

/// Widths of the learned networks; latent sizes come from the SCM section.
struct ModelShape {
  int prior_hidden = 16;
  int trunk_width = 64;
  int head_width = 64;
  int decoder_width = 32;
  double slope = 0.2;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  int n_repeats = 5;
  int workers = 1;
  std::string output_dir = "out";
  std::string mode = "lacim";  // lacim | pooled | erm, for the single-model stages

  ScmDims scm_dims;
  ScmOptions scm_options;
  int m = 5;
  Index samples_per_env = 1000;
  /// Environment count of the second LaCIM run of the suite; it keeps the
  /// total sample count m * samples_per_env.
  int m_small = 3;

  ModelShape model;
  TrainConfig train;
  InferConfig infer;
  ErmConfig erm;
  ToyConfig toy;
  InferConfig toy_infer;
  int toy_repeats = 3;

  int stein_mixtures = 10;
  int bound_pairs = 1000;
  int diversity_grid_points = 8;
};

namespace detail {

/// Reads the known keys of one JSON object and rejects everything else.
class ConfigSection {
 public:
  ConfigSection(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j.is_object(), "config: '" + where() + "' must be an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw Error("config: bad value for '" + name(key) + "'");
    }
  }

  void get(const std::string& key, Index& out) {
    long long v = out;
    get(key, v);
    out = static_cast<Index>(v);
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  ConfigSection section(const std::string& key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return ConfigSection(j_.contains(key) ? j_.at(key) : empty, name(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw Error("config: unknown key '" + name(it.key()) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }
  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_infer(ConfigSection s, InferConfig& c) {
  s.get("k_starts", c.k_starts);
  s.get("iterations", c.iterations);
  s.get("lr", c.lr);
  s.get("weight_decay", c.weight_decay);
  s.get("lambda_s", c.lambda_s);
  s.get("lambda_z", c.lambda_z);
  s.get("penalty_sign", c.penalty_sign);
  std::string init = c.init == InitMode::posterior ? "posterior" : "standard_normal";
  s.get("init", init);
  require(init == "standard_normal" || init == "posterior", "config: infer init must be standard_normal or posterior");
  c.init = init == "posterior" ? InitMode::posterior : InitMode::standard_normal;
  s.finish();
}

inline nlohmann::json infer_json(const InferConfig& c) {
  return {{"k_starts", c.k_starts},
          {"iterations", c.iterations},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"lambda_s", c.lambda_s},
          {"lambda_z", c.lambda_z},
          {"penalty_sign", c.penalty_sign},
          {"init", c.init == InitMode::posterior ? "posterior" : "standard_normal"}};
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  require(c.n_repeats >= 1, "config: n_repeats must be >= 1");
  require(c.workers >= 1, "config: workers must be >= 1");
  require(c.m >= 1 && c.m_small >= 1, "config: environment counts must be >= 1");
  require(c.samples_per_env >= 1, "config: samples_per_env must be >= 1");
  require(c.toy_repeats >= 1, "config: toy repeats must be >= 1");
  validate_dims(c.scm_dims);
  parse_mode(c.mode);
  validate(c.infer);
  validate(c.toy_infer);
  require(c.train.iterations >= 0 && c.erm.iterations >= 0, "config: iterations must be >= 0");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::ConfigSection root(j, "");
  long long seed = static_cast<long long>(c.seed);
  root.get("seed", seed);
  require(seed >= 0, "config: seed must be non-negative");
  c.seed = static_cast<std::uint64_t>(seed);
  root.get("n_repeats", c.n_repeats);
  root.get("workers", c.workers);
  root.get("output_dir", c.output_dir);
  root.get("mode", c.mode);

  {
    auto s = root.section("scm");
    s.get("m", c.m);
    s.get("m_small", c.m_small);
    s.get("samples_per_env", c.samples_per_env);
    s.get("q_d", c.scm_dims.q_d);
    s.get("q_c", c.scm_dims.q_c);
    s.get("q_s", c.scm_dims.q_s);
    s.get("q_z", c.scm_dims.q_z);
    s.get("q_x", c.scm_dims.q_x);
    s.get("q_y", c.scm_dims.q_y);
    s.get("hidden", c.scm_options.hidden);
    s.get("slope", c.scm_options.slope);
    s.get("latent_mean_scale", c.scm_options.latent_mean_scale);
    s.get("latent_logstd_scale", c.scm_options.latent_logstd_scale);
    s.get("x_mean_gain", c.scm_options.x_mean_gain);
    s.get("x_logstd_gain", c.scm_options.x_logstd_gain);
    s.get("y_mean_gain", c.scm_options.y_mean_gain);
    s.get("y_logstd_gain", c.scm_options.y_logstd_gain);
    s.get("x_noise_scale", c.scm_options.x_noise_scale);
    s.get("y_noise_scale", c.scm_options.y_noise_scale);
    s.get("noiseless", c.scm_options.noiseless);
    s.finish();
  }
  {
    auto s = root.section("model");
    s.get("prior_hidden", c.model.prior_hidden);
    s.get("trunk_width", c.model.trunk_width);
    s.get("head_width", c.model.head_width);
    s.get("decoder_width", c.model.decoder_width);
    s.get("slope", c.model.slope);
    s.finish();
  }
  {
    auto s = root.section("train");
    s.get("lr", c.train.lr);
    s.get("weight_decay", c.train.weight_decay);
    s.get("batch_size", c.train.batch_size);
    s.get("iterations", c.train.iterations);
    s.get("elbo_mc_samples", c.train.elbo_mc_samples);
    s.get("clamp_ratio", c.train.clamp_ratio);
    s.finish();
  }
  detail::read_infer(root.section("infer"), c.infer);
  {
    auto s = root.section("erm");
    s.get("lr", c.erm.lr);
    s.get("weight_decay", c.erm.weight_decay);
    s.get("batch_size", c.erm.batch_size);
    s.get("iterations", c.erm.iterations);
    s.get("hidden", c.erm.hidden);
    s.finish();
  }
  {
    auto s = root.section("toy");
    s.get("train_strengths", c.toy.train_strengths);
    s.get("test_strength", c.toy.test_strength);
    s.get("samples_per_env", c.toy.samples_per_env);
    s.get("test_samples", c.toy.test_samples);
    s.get("q_s", c.toy.q_s);
    s.get("q_z", c.toy.q_z);
    s.get("q_x", c.toy.q_x);
    s.get("hidden", c.toy.hidden);
    s.get("class_mean", c.toy.class_mean);
    s.get("latent_std", c.toy.latent_std);
    s.get("x_noise_std", c.toy.x_noise_std);
    s.get("repeats", c.toy_repeats);
    if (s.has("infer")) {
      detail::read_infer(s.section("infer"), c.toy_infer);
    } else {
      s.section("infer");
      c.toy_infer = c.infer;
    }
    s.finish();
  }
  {
    auto s = root.section("theory");
    s.get("stein_mixtures", c.stein_mixtures);
    s.get("bound_pairs", c.bound_pairs);
    s.get("diversity_grid_points", c.diversity_grid_points);
    s.finish();
  }
  root.finish();
  validate(c);
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& o = c.scm_options;
  return {
      {"seed", c.seed},
      {"n_repeats", c.n_repeats},
      {"workers", c.workers},
      {"output_dir", c.output_dir},
      {"mode", c.mode},
      {"scm",
       {{"m", c.m},
        {"m_small", c.m_small},
        {"samples_per_env", c.samples_per_env},
        {"q_d", c.scm_dims.q_d},
        {"q_c", c.scm_dims.q_c},
        {"q_s", c.scm_dims.q_s},
        {"q_z", c.scm_dims.q_z},
        {"q_x", c.scm_dims.q_x},
        {"q_y", c.scm_dims.q_y},
        {"hidden", o.hidden},
        {"slope", o.slope},
        {"latent_mean_scale", o.latent_mean_scale},
        {"latent_logstd_scale", o.latent_logstd_scale},
        {"x_mean_gain", o.x_mean_gain},
        {"x_logstd_gain", o.x_logstd_gain},
        {"y_mean_gain", o.y_mean_gain},
        {"y_logstd_gain", o.y_logstd_gain},
        {"x_noise_scale", o.x_noise_scale},
        {"y_noise_scale", o.y_noise_scale},
        {"noiseless", o.noiseless}}},
      {"model",
       {{"prior_hidden", c.model.prior_hidden},
        {"trunk_width", c.model.trunk_width},
        {"head_width", c.model.head_width},
        {"decoder_width", c.model.decoder_width},
        {"slope", c.model.slope}}},
      {"train",
       {{"lr", c.train.lr},
        {"weight_decay", c.train.weight_decay},
        {"batch_size", c.train.batch_size},
        {"iterations", c.train.iterations},
        {"elbo_mc_samples", c.train.elbo_mc_samples},
        {"clamp_ratio", c.train.clamp_ratio}}},
      {"infer", detail::infer_json(c.infer)},
      {"erm",
       {{"lr", c.erm.lr},
        {"weight_decay", c.erm.weight_decay},
        {"batch_size", c.erm.batch_size},
        {"iterations", c.erm.iterations},
        {"hidden", c.erm.hidden}}},
      {"toy",
       {{"train_strengths", c.toy.train_strengths},
        {"test_strength", c.toy.test_strength},
        {"samples_per_env", c.toy.samples_per_env},
        {"test_samples", c.toy.test_samples},
        {"q_s", c.toy.q_s},
        {"q_z", c.toy.q_z},
        {"q_x", c.toy.q_x},
        {"hidden", c.toy.hidden},
        {"class_mean", c.toy.class_mean},
        {"latent_std", c.toy.latent_std},
        {"x_noise_std", c.toy.x_noise_std},
        {"repeats", c.toy_repeats},
        {"infer", detail::infer_json(c.toy_infer)}}},
      {"theory",
       {{"stein_mixtures", c.stein_mixtures},
        {"bound_pairs", c.bound_pairs},
        {"diversity_grid_points", c.diversity_grid_points}}},
  };
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "config: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), "cannot open " + path.string());
  out << j.dump(2) << '\n';
  require(out.good(), "write failed for " + path.string());
}

/// Learned-model dims for data drawn from the configured SCM or toy preset.
inline ModelDims model_dims(const ExperimentConfig& c, const std::vector<ObservedData>& data, int q_s, int q_z,
                            TrainMode mode) {
  ModelDims d = model_dims_for(data, q_s, q_z, mode);
  d.prior_hidden = c.model.prior_hidden;
  d.trunk_width = c.model.trunk_width;
  d.head_width = c.model.head_width;
  d.decoder_width = c.model.decoder_width;
  d.slope = c.model.slope;
  return d;
}

// ---- aggregation ----------------------------------------------------------

struct AggregateRow {
  std::string mode;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
  int n = 0;
};

inline AggregateRow aggregate(const std::string& mode, const std::string& metric, const std::vector<double>& v) {
  AggregateRow r{mode, metric, 0.0, 0.0, static_cast<int>(v.size())};
  if (v.empty()) return r;
  double total = 0.0;
  for (double x : v) total += x;
  r.mean = total / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

inline void write_aggregate_csv(const std::filesystem::path& path, const std::vector<AggregateRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), "cannot open " + path.string());
  out << "mode,metric,mean,std,n\n";
  for (const auto& r : rows)
    out << r.mode << ',' << r.metric << ',' << csv::format_double(r.mean) << ',' << csv::format_double(r.std) << ','
        << r.n << '\n';
  require(out.good(), "write failed for " + path.string());
}

inline const AggregateRow& find_row(const std::vector<AggregateRow>& rows, const std::string& mode,
                                    const std::string& metric) {
  for (const auto& r : rows)
    if (r.mode == mode && r.metric == metric) return r;
  throw Error("no aggregate row for " + mode + "/" + metric);
}

/// Runs f(0..count-1) on `workers` threads. Each task writes only its own
/// slot, so results never depend on scheduling.
template <class F>
void run_tasks(int count, int workers, F&& f) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < count; i += workers) f(i);
    });
  for (auto& t : pool) t.join();
}

// ---- simulation suite -----------------------------------------------------

struct SuiteRun {
  std::string mode;  // lacim_m<m>, lacim_m<m_small> or pooled
  int repeat = 0;
  std::uint64_t seed = 0;
  int m = 0;
  Index samples_per_env = 0;
  bool ok = false;
  std::string error;
  double mcc_s = 0.0;
  double mcc_z = 0.0;
  IdentifiabilityReport report;
  double final_loss = 0.0;
};

struct SuiteResult {
  std::vector<SuiteRun> runs;
  std::vector<AggregateRow> rows;
};

inline nlohmann::json to_json(const SuiteRun& r) {
  nlohmann::json j = {{"mode", r.mode},         {"repeat", r.repeat}, {"seed", r.seed},
                      {"m", r.m},               {"samples_per_env", r.samples_per_env},
                      {"ok", r.ok}};
  if (!r.ok) {
    j["error"] = r.error;
    return j;
  }
  j["mcc_s"] = r.mcc_s;
  j["mcc_z"] = r.mcc_z;
  j["final_loss"] = r.final_loss;
  j["s"] = to_json(r.report.s);
  j["z"] = to_json(r.report.z);
  j["per_env_mcc_s"] = r.report.per_env_s;
  j["per_env_mcc_z"] = r.report.per_env_z;
  return j;
}

/// One training run: SCM and data from `seed`, then MCC of the posterior means.
inline SuiteRun run_simulation(const ExperimentConfig& c, std::uint64_t seed, int m, Index samples_per_env,
                               TrainMode mode) {
  SuiteRun run;
  run.seed = seed;
  run.m = m;
  run.samples_per_env = samples_per_env;
  try {
    const GroundTruthScm scm = build_scm(seed, c.scm_dims, m, c.scm_options);
    const std::vector<EnvDataset> data = sample_all_envs(scm, samples_per_env, seed);
    const std::vector<ObservedData> obs = observed(data);
    LacimModel model(model_dims(c, obs, c.scm_dims.q_s, c.scm_dims.q_z, mode), seed);
    TrainConfig tc = c.train;
    tc.mode = mode;
    tc.seed = seed;
    const TrainResult tr = train(model, obs, tc);
    run.final_loss = tr.loss_trace.empty() ? 0.0 : tr.loss_trace.back();
    run.report = evaluate_identifiability(model, data);
    run.mcc_s = run.report.s.mcc;
    run.mcc_z = run.report.z.mcc;
    run.ok = true;
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  return run;
}

/// Repeats r = 0..n-1 with seed + r; modes LaCIM with m environments, LaCIM
/// with m_small environments at the same total sample count, and pooled
/// training on the m-environment data. Writes runs/*.json, aggregate.csv
/// and suite.json under the output directory when `write` is set.
inline SuiteResult run_simulation_suite(const ExperimentConfig& c, bool write = true) {
  validate(c);
  struct Spec {
    std::string label;
    int m;
    Index n;
    TrainMode mode;
  };
  const Index total = c.samples_per_env * c.m;
  const std::vector<Spec> specs = {
      {"lacim_m" + std::to_string(c.m), c.m, c.samples_per_env, TrainMode::lacim},
      {"lacim_m" + std::to_string(c.m_small), c.m_small, total / c.m_small, TrainMode::lacim},
      {"pooled", c.m, c.samples_per_env, TrainMode::pooled},
  };
  const int count = c.n_repeats * static_cast<int>(specs.size());
  SuiteResult res;
  res.runs.resize(static_cast<std::size_t>(count));
  run_tasks(count, c.workers, [&](int i) {
    const int repeat = i / static_cast<int>(specs.size());
    const Spec& sp = specs[static_cast<std::size_t>(i) % specs.size()];
    SuiteRun run = run_simulation(c, c.seed + static_cast<std::uint64_t>(repeat), sp.m, sp.n, sp.mode);
    run.mode = sp.label;
    run.repeat = repeat;
    res.runs[static_cast<std::size_t>(i)] = std::move(run);
  });

  for (const Spec& sp : specs) {
    std::vector<double> s, z;
    for (const auto& r : res.runs)
      if (r.mode == sp.label && r.ok) {
        s.push_back(r.mcc_s);
        z.push_back(r.mcc_z);
      }
    res.rows.push_back(aggregate(sp.label, "mcc_s", s));
    res.rows.push_back(aggregate(sp.label, "mcc_z", z));
  }

  if (write) {
    const std::filesystem::path out(c.output_dir);
    const nlohmann::json cfg = to_json(c);
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : res.runs) {
      nlohmann::json j = to_json(r);
      runs.push_back(j);
      j["config"] = cfg;
      write_json(out / "runs" / (r.mode + "_rep" + std::to_string(r.repeat) + ".json"), j);
    }
    write_aggregate_csv(out / "aggregate.csv", res.rows);
    nlohmann::json table = nlohmann::json::array();
    for (const auto& r : res.rows)
      table.push_back({{"mode", r.mode}, {"metric", r.metric}, {"mean", r.mean}, {"std", r.std}, {"n", r.n}});
    write_json(out / "suite.json", {{"config", cfg}, {"aggregate", table}, {"runs", runs}});
  }
  return res;
}

// ---- toy OOD --------------------------------------------------------------

struct ToyRun {
  int repeat = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double lacim_test_accuracy = 0.0;
  double erm_test_accuracy = 0.0;
  double erm_train_accuracy = 0.0;
  double inference_samples_per_second = 0.0;
};

struct ToyResult {
  std::vector<ToyRun> runs;
  std::vector<AggregateRow> rows;
};

inline ToyRun run_toy_once(const ExperimentConfig& c, std::uint64_t seed) {
  ToyRun run;
  run.seed = seed;
  try {
    const ToySplit split = build_toy_spurious(seed, c.toy);
    const std::vector<ObservedData> obs = observed(split.train);

    LacimModel model(model_dims(c, obs, c.toy.q_s, c.toy.q_z, TrainMode::lacim), seed);
    TrainConfig tc = c.train;
    tc.mode = TrainMode::lacim;
    tc.seed = seed;
    train(model, obs, tc);
    const BatchPrediction pred = predict_batch(model, split.test.x, c.toy_infer, RngStream(seed, stream::kInference));
    run.lacim_test_accuracy = accuracy(pred.labels, split.test.labels);
    run.inference_samples_per_second = pred.samples_per_second;

    ErmConfig ec = c.erm;
    ec.seed = seed;
    const ErmModel erm = train_erm_baseline(obs, ec);
    run.erm_test_accuracy = accuracy(erm.predict_labels(split.test.x), split.test.labels);
    const ObservedData all = pool(obs);
    run.erm_train_accuracy = accuracy(erm.predict_labels(all.x), all.labels);
    run.ok = true;
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  return run;
}

inline nlohmann::json to_json(const ToyRun& r) {
  nlohmann::json j = {{"repeat", r.repeat}, {"seed", r.seed}, {"ok", r.ok}};
  if (!r.ok) {
    j["error"] = r.error;
    return j;
  }
  j["lacim_test_accuracy"] = r.lacim_test_accuracy;
  j["erm_test_accuracy"] = r.erm_test_accuracy;
  j["erm_train_accuracy"] = r.erm_train_accuracy;
  return j;
}

/// LaCIM with test-time latent inference against ERM on the spurious toy
/// preset, seeds seed + r for r < toy repeats. Writes toy.json and toy.csv.
inline ToyResult run_toy_ood(const ExperimentConfig& c, bool write = true) {
  validate(c);
  ToyResult res;
  res.runs.resize(static_cast<std::size_t>(c.toy_repeats));
  run_tasks(c.toy_repeats, c.workers, [&](int r) {
    ToyRun run = run_toy_once(c, c.seed + static_cast<std::uint64_t>(r));
    run.repeat = r;
    res.runs[static_cast<std::size_t>(r)] = std::move(run);
  });
  std::vector<double> la, erm, gap;
  for (const auto& r : res.runs)
    if (r.ok) {
      la.push_back(r.lacim_test_accuracy);
      erm.push_back(r.erm_test_accuracy);
      gap.push_back(r.lacim_test_accuracy - r.erm_test_accuracy);
    }
  res.rows = {aggregate("lacim", "test_accuracy", la), aggregate("erm", "test_accuracy", erm),
              aggregate("lacim_minus_erm", "test_accuracy", gap)};
  if (write) {
    const std::filesystem::path out(c.output_dir);
    write_aggregate_csv(out / "toy.csv", res.rows);
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : res.runs) {
      nlohmann::json j = to_json(r);
      // Throughput is timing-dependent, so it stays out of the reproducible files.
      std::cerr << "toy seed " << r.seed << ": inference " << r.inference_samples_per_second << " samples/s\n";
      runs.push_back(j);
    }
    write_json(out / "toy.json", {{"config", to_json(c)}, {"runs", runs}});
  }
  return res;
}

// ---- theory checks --------------------------------------------------------

/// Diversity on the configured SCM, the Stein identity, the OOD bound and the
/// open-set proxy on simulated latents. Writes theory.json.
inline std::vector<TheoryReport> run_theory_checks(const ExperimentConfig& c, bool write = true) {
  validate(c);
  std::vector<TheoryReport> reports;
  const GroundTruthScm scm = build_scm(c.seed, c.scm_dims, c.m, c.scm_options);
  reports.push_back(check_diversity(scm, c.diversity_grid_points));
  RngStream rng(c.seed, stream::kTheory);
  RngStream stein_rng = rng.substream(1), bound_rng = rng.substream(2);
  reports.push_back(check_stein_identity(stein_rng, c.stein_mixtures));
  reports.push_back(check_ood_bound(bound_rng, c.bound_pairs));
  const std::vector<EnvDataset> data = sample_all_envs(scm, std::max<Index>(c.samples_per_env, 100), c.seed);
  Index n = 0;
  for (const auto& d : data) n += d.size();
  Matrix s(n, c.scm_dims.q_s), z(n, c.scm_dims.q_z);
  Index r = 0;
  for (const auto& d : data) {
    s.middleRows(r, d.size()) = d.s;
    z.middleRows(r, d.size()) = d.z;
    r += d.size();
  }
  reports.push_back(check_nonempty_open_set(gaussian_sufficient_statistics(s, z)));
  if (write) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& rep : reports) arr.push_back(to_json(rep));
    write_json(std::filesystem::path(c.output_dir) / "theory.json", {{"config", to_json(c)}, {"reports", arr}});
  }
  return reports;
}

}  // namespace lacim
