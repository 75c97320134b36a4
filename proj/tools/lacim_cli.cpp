#include "lacim/lacim.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <regex>

using namespace lacim;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> repeats;
  std::optional<std::string> mode;
  std::optional<int> workers;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config; defaults apply to missing keys");
  app->add_option("--seed", c.seed, "base seed");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--repeats", c.repeats, "number of repeats");
  app->add_option("--mode", c.mode, "lacim, pooled or erm")->check(CLI::IsMember({"lacim", "pooled", "erm"}));
  app->add_option("--workers", c.workers, "parallel repeat slots");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.output_dir = *c.out;
  if (c.repeats) {
    cfg.n_repeats = *c.repeats;
    cfg.toy_repeats = *c.repeats;
  }
  if (c.mode) cfg.mode = *c.mode;
  if (c.workers) cfg.workers = *c.workers;
  validate(cfg);
  return cfg;
}

/// env<k>.csv files of a directory, ordered by k.
std::vector<EnvDataset> read_env_dir(const fs::path& dir) {
  require(fs::is_directory(dir), "no dataset directory " + dir.string());
  const std::regex name("env([0-9]+)\\.csv");
  std::vector<std::pair<int, fs::path>> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string file = entry.path().filename().string();
    if (std::regex_match(file, m, name)) files.emplace_back(std::stoi(m[1]), entry.path());
  }
  require(!files.empty(), "no env<k>.csv files in " + dir.string());
  std::sort(files.begin(), files.end());
  std::vector<EnvDataset> out;
  for (const auto& f : files) out.push_back(import_dataset(f.second));
  return out;
}

void write_manifest(const ExperimentConfig& cfg, const std::string& stage, nlohmann::json extra = {}) {
  nlohmann::json j = {{"stage", stage}, {"config", to_json(cfg)}};
  if (!extra.is_null()) j["result"] = std::move(extra);
  write_json(fs::path(cfg.output_dir) / (stage + ".manifest.json"), j);
}

int cmd_simulate(const ExperimentConfig& cfg) {
  const GroundTruthScm scm = build_scm(cfg.seed, cfg.scm_dims, cfg.m, cfg.scm_options);
  const fs::path dir = fs::path(cfg.output_dir) / "data";
  fs::create_directories(dir);
  for (const auto& ds : sample_all_envs(scm, cfg.samples_per_env, cfg.seed))
    export_dataset(ds, dir / ("env" + std::to_string(ds.env) + ".csv"));
  write_manifest(cfg, "simulate");
  std::cout << "wrote " << cfg.m << " environments to " << dir.string() << '\n';
  return 0;
}

nlohmann::json mlp_json(const Mlp& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers()) {
    const Matrix& w = l.weight.value;
    layers.push_back({{"rows", w.rows()},
                      {"cols", w.cols()},
                      {"weight", std::vector<double>(w.data(), w.data() + w.size())},
                      {"bias", std::vector<double>(l.bias.value.data(), l.bias.value.data() + l.bias.value.size())}});
  }
  return {{"slope", net.slope()}, {"layers", layers}};
}

int cmd_train(const ExperimentConfig& cfg, const fs::path& data_dir) {
  const std::vector<EnvDataset> data = read_env_dir(data_dir);
  const std::vector<ObservedData> obs = observed(data);
  const TrainMode mode = parse_mode(cfg.mode);
  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  if (mode == TrainMode::erm) {
    ErmConfig ec = cfg.erm;
    ec.seed = cfg.seed;
    const ErmModel erm = train_erm_baseline(obs, ec);
    const ObservedData all = pool(obs);
    nlohmann::json res;
    if (erm.task == TaskKind::classification)
      res["train_accuracy"] = accuracy(erm.predict_labels(all.x), all.labels);
    else
      res["train_mse"] = mse(erm.outputs(all.x), all.y);
    write_json(out / "erm.json", {{"config", to_json(cfg)}, {"result", res}, {"network", mlp_json(erm.net)}});
    std::cout << res.dump() << '\n';
    return 0;
  }
  LacimModel model(model_dims(cfg, obs, cfg.scm_dims.q_s, cfg.scm_dims.q_z, mode), cfg.seed);
  TrainConfig tc = cfg.train;
  tc.mode = mode;
  tc.seed = cfg.seed;
  const TrainResult tr = train(model, obs, tc);
  const nlohmann::json res = {{"loss_first", tr.loss_trace.empty() ? 0.0 : tr.loss_trace.front()},
                              {"loss_last", tr.loss_trace.empty() ? 0.0 : tr.loss_trace.back()},
                              {"loss_trace", tr.loss_trace}};
  save_checkpoint(model, out / "model", {{"config", to_json(cfg)}, {"train", res}});
  std::cout << "loss " << res["loss_first"] << " -> " << res["loss_last"] << "; checkpoint " << (out / "model.json").string()
            << '\n';
  return 0;
}

int cmd_infer(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& data_file) {
  const LacimModel model = load_checkpoint(checkpoint);
  const EnvDataset ds = import_dataset(data_file);
  const BatchPrediction pred = predict_batch(model, ds.x, cfg.infer, RngStream(cfg.seed, stream::kInference));
  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  std::ofstream csv(out / "predictions.csv");
  const auto& d = model.dims();
  const bool cls = d.task == TaskKind::classification;
  if (cls) {
    csv << "label";
  } else {
    for (int j = 0; j < d.q_y; ++j) csv << (j ? "," : "") << "y" << j;
  }
  for (int j = 0; j < d.q_s; ++j) csv << ",s" << j;
  for (int j = 0; j < d.q_z; ++j) csv << ",z" << j;
  csv << ",objective\n";
  for (Index i = 0; i < ds.size(); ++i) {
    if (cls) {
      csv << pred.labels[static_cast<std::size_t>(i)];
    } else {
      for (int j = 0; j < d.q_y; ++j) csv << (j ? "," : "") << csv::format_double(pred.means(i, j));
    }
    for (int j = 0; j < d.q_s; ++j) csv << ',' << csv::format_double(pred.s(i, j));
    for (int j = 0; j < d.q_z; ++j) csv << ',' << csv::format_double(pred.z(i, j));
    csv << ',' << csv::format_double(pred.objectives[static_cast<std::size_t>(i)]) << '\n';
  }
  require(csv.good(), "write failed for predictions.csv");
  nlohmann::json res = {{"samples", ds.size()},
                        {"penalty_sign", cfg.infer.penalty_sign},
                        {"seconds", pred.seconds},
                        {"samples_per_second", pred.samples_per_second}};
  if (cls && !ds.labels.empty()) res["accuracy"] = accuracy(pred.labels, ds.labels);
  if (!cls && ds.y.rows() == ds.size()) res["mse"] = mse(pred.means, ds.y);
  write_json(out / "infer.json", {{"config", to_json(cfg)}, {"result", res}});
  std::cout << res.dump() << '\n';
  return 0;
}

int cmd_mcc(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& data_dir) {
  const LacimModel model = load_checkpoint(checkpoint);
  const std::vector<EnvDataset> data = read_env_dir(data_dir);
  const IdentifiabilityReport rep = evaluate_identifiability(model, data);
  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  export_latent_scatter(model, data, out / "scatter.csv");
  const nlohmann::json res = {{"mcc_s", rep.s.mcc},
                              {"mcc_z", rep.z.mcc},
                              {"s", to_json(rep.s)},
                              {"z", to_json(rep.z)},
                              {"per_env_mcc_s", rep.per_env_s},
                              {"per_env_mcc_z", rep.per_env_z}};
  write_json(out / "mcc.json", {{"config", to_json(cfg)}, {"result", res}});
  std::cout << "MCC_S " << rep.s.mcc << " MCC_Z " << rep.z.mcc << '\n';
  return 0;
}

int cmd_theory(const ExperimentConfig& cfg) {
  for (const auto& r : run_theory_checks(cfg))
    std::cout << r.check << ": " << (r.pass ? "PASS" : "FAIL") << " (margin " << r.margin << ")\n";
  return 0;
}

int cmd_suite(const ExperimentConfig& cfg) {
  const SuiteResult res = run_simulation_suite(cfg);
  int failed = 0;
  for (const auto& r : res.runs) {
    if (r.ok) {
      std::cerr << r.mode << " rep " << r.repeat << ": MCC_S " << r.mcc_s << " MCC_Z " << r.mcc_z << '\n';
    } else {
      ++failed;
      std::cerr << r.mode << " rep " << r.repeat << " failed: " << r.error << '\n';
    }
  }
  for (const auto& row : res.rows)
    std::cout << row.mode << ' ' << row.metric << ' ' << row.mean << " +- " << row.std << " (n=" << row.n << ")\n";
  return failed == 0 ? 0 : 1;
}

int cmd_toy(const ExperimentConfig& cfg) {
  const ToyResult res = run_toy_ood(cfg);
  int failed = 0;
  for (const auto& r : res.runs) {
    if (!r.ok) {
      ++failed;
      std::cerr << "toy seed " << r.seed << " failed: " << r.error << '\n';
    }
  }
  for (const auto& row : res.rows)
    std::cout << row.mode << ' ' << row.metric << ' ' << row.mean << " +- " << row.std << " (n=" << row.n << ")\n";
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LaCIM simulation, training, inference and checks"};
  app.require_subcommand(1);
  Common common;
  std::string data, checkpoint;

  auto* simulate = app.add_subcommand("simulate", "sample every environment of the configured SCM to CSV");
  auto* train_cmd = app.add_subcommand("train", "train a model on env<k>.csv files");
  auto* infer = app.add_subcommand("infer", "latent inference and prediction for one dataset");
  auto* mcc_cmd = app.add_subcommand("mcc", "MCC of a checkpoint against ground-truth latents");
  auto* theory = app.add_subcommand("theory", "theoretical side-condition checks");
  auto* suite = app.add_subcommand("suite", "LaCIM m, LaCIM m_small and pooled over repeats");
  auto* toy = app.add_subcommand("toy-ood", "LaCIM vs ERM on the spurious toy preset");
  for (auto* sub : {simulate, train_cmd, infer, mcc_cmd, theory, suite, toy}) add_common(sub, common);
  train_cmd->add_option("--data", data, "directory with env<k>.csv (default <out>/data)");
  mcc_cmd->add_option("--data", data, "directory with env<k>.csv (default <out>/data)");
  infer->add_option("--data", data, "dataset CSV")->required();
  for (auto* sub : {infer, mcc_cmd})
    sub->add_option("--checkpoint", checkpoint, "checkpoint manifest (default <out>/model.json)");

  CLI11_PARSE(app, argc, argv);
  try {
    const ExperimentConfig cfg = resolve(common);
    const fs::path out(cfg.output_dir);
    const fs::path data_dir = data.empty() ? out / "data" : fs::path(data);
    const fs::path ckpt = checkpoint.empty() ? out / "model.json" : fs::path(checkpoint);
    if (simulate->parsed()) return cmd_simulate(cfg);
    if (train_cmd->parsed()) return cmd_train(cfg, data_dir);
    if (infer->parsed()) return cmd_infer(cfg, ckpt, data);
    if (mcc_cmd->parsed()) return cmd_mcc(cfg, ckpt, data_dir);
    if (theory->parsed()) return cmd_theory(cfg);
    if (suite->parsed()) return cmd_suite(cfg);
    if (toy->parsed()) return cmd_toy(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
